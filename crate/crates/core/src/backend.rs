//! Encoder backends: a deterministic synthetic mock for verification and
//! a subprocess adapter for real encoders driven by a stats-file contract.

use std::io::Write;
use std::path::PathBuf;
use std::process::Stdio;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::GopGrouping;
use crate::rdmodel::{RdSample, RdSampleSet};

/// One encode job: a per-frame QP schedule for a named sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub sequence_id: String,
    pub frame_qps: Vec<i32>,
}

/// Per-frame statistics returned by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResult {
    /// (bits, mse_y, mse_u, mse_v) per frame.
    pub frames: Vec<(f64, f64, f64, f64)>,
    pub total_bits: f64,
    /// Wall time in seconds; informational only, excluded from determinism.
    pub wall_time: f64,
}

impl EncodeResult {
    pub fn combined_mse(&self, frame: usize) -> f64 {
        let (_, y, u, v) = self.frames[frame];
        (6.0 * y + u + v) / 8.0
    }
}

pub trait EncoderBackend: Sync {
    fn encode(&self, request: &EncodeRequest) -> Result<EncodeResult>;
    fn frame_count(&self) -> usize;
    /// Stable identity string for pass-one cache keying.
    fn identity(&self) -> String;
}

/// Distortion coupling of the synthetic scene: per-frame bits or the
/// containing GOP's total bits drive the hyperbolic law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    FrameLevel,
    GopLevel { gop_size: usize },
}

/// Ground truth of one synthetic frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockFrame {
    pub alpha: f64,
    pub beta: f64,
    /// Bits produced at the reference QP.
    pub r_ref: f64,
}

/// Deterministic synthetic scene realizing the hyperbolic R-D law exactly:
/// bits decay as `r_ref * 2^((q_ref - qp)/6)` and the MSE follows
/// `alpha * bits^beta` (frame level) or `alpha * gop_total^beta`
/// (GOP level), with optional multiplicative log-normal noise on the MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScene {
    pub frames: Vec<MockFrame>,
    pub q_ref: i32,
    pub sigma: f64,
    pub coupling: Coupling,
    pub seed: u64,
}

impl MockScene {
    pub fn frame_bits(&self, frame: usize, qp: i32) -> f64 {
        self.frames[frame].r_ref * 2f64.powf((self.q_ref - qp) as f64 / 6.0)
    }

    fn noise(&self, frame: usize, qp: i32) -> f64 {
        if self.sigma == 0.0 {
            return 1.0;
        }
        // Keyed by (seed, frame, qp) so results are independent of request
        // order and parallelism.
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(frame as u64).to_le_bytes());
        key[16..20].copy_from_slice(&qp.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let z = gaussian(&mut rng);
        (self.sigma * z).exp()
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("scene serializes"));
        hex::encode(hasher.finalize())
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Parameter ranges for scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSceneSpec {
    pub frame_count: usize,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub r_ref_range: (f64, f64),
    pub q_ref: i32,
    pub sigma: f64,
    pub coupling: Coupling,
    pub seed: u64,
}

/// Draws a deterministic pseudo-random scene from parameter ranges.
pub fn generate_mock_scene(spec: &MockSceneSpec) -> Result<MockScene> {
    if spec.frame_count == 0 {
        return Err(Error::InvalidInput("scene needs at least one frame".into()));
    }
    let bad_range = |lo: f64, hi: f64| lo > hi || !lo.is_finite() || !hi.is_finite();
    if bad_range(spec.alpha_range.0, spec.alpha_range.1) || spec.alpha_range.0 <= 0.0 {
        return Err(Error::InvalidInput("alpha range must be positive".into()));
    }
    if bad_range(spec.beta_range.0, spec.beta_range.1) || spec.beta_range.1 >= 0.0 {
        return Err(Error::InvalidInput("beta range must be negative".into()));
    }
    if bad_range(spec.r_ref_range.0, spec.r_ref_range.1) || spec.r_ref_range.0 <= 0.0 {
        return Err(Error::InvalidInput("r_ref range must be positive".into()));
    }
    if spec.sigma < 0.0 {
        return Err(Error::InvalidInput("sigma must be >= 0".into()));
    }
    if let Coupling::GopLevel { gop_size } = spec.coupling {
        if gop_size == 0 {
            return Err(Error::InvalidInput("GOP size must be positive".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let frames = (0..spec.frame_count)
        .map(|_| MockFrame {
            alpha: draw(&mut rng, spec.alpha_range),
            beta: draw(&mut rng, spec.beta_range),
            r_ref: draw(&mut rng, spec.r_ref_range),
        })
        .collect();
    Ok(MockScene {
        frames,
        q_ref: spec.q_ref,
        sigma: spec.sigma,
        coupling: spec.coupling.clone(),
        seed: spec.seed,
    })
}

/// Deterministic synthetic backend.
pub struct MockBackend {
    pub scene: MockScene,
}

impl MockBackend {
    pub fn new(scene: MockScene) -> Self {
        MockBackend { scene }
    }
}

impl EncoderBackend for MockBackend {
    fn encode(&self, request: &EncodeRequest) -> Result<EncodeResult> {
        let started = Instant::now();
        let n = self.scene.frames.len();
        if request.frame_qps.len() != n {
            return Err(Error::Backend(format!(
                "QP schedule covers {} frames, scene has {n}",
                request.frame_qps.len()
            )));
        }
        let bits: Vec<f64> = (0..n)
            .map(|i| self.scene.frame_bits(i, request.frame_qps[i]))
            .collect();
        let driver: Vec<f64> = match &self.scene.coupling {
            Coupling::FrameLevel => bits.clone(),
            Coupling::GopLevel { gop_size } => {
                let grouping = GopGrouping::new(n, *gop_size)?;
                let gop_totals: Vec<f64> = grouping
                    .groups()
                    .iter()
                    .map(|r| bits[r.clone()].iter().sum())
                    .collect();
                (0..n).map(|i| gop_totals[grouping.gop_of(i)]).collect()
            }
        };
        let frames: Vec<(f64, f64, f64, f64)> = (0..n)
            .map(|i| {
                let f = &self.scene.frames[i];
                let mse =
                    f.alpha * driver[i].powf(f.beta) * self.scene.noise(i, request.frame_qps[i]);
                // Equal channel MSEs keep the 6:1:1 combination the identity.
                (bits[i], mse, mse, mse)
            })
            .collect();
        let total_bits = bits.iter().sum();
        Ok(EncodeResult {
            frames,
            total_bits,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    fn frame_count(&self) -> usize {
        self.scene.frames.len()
    }

    fn identity(&self) -> String {
        format!("mock:{}", self.scene.content_hash())
    }
}

/// Configuration of the external-process adapter. The command template is
/// shell-free: the first token is the executable, later tokens may contain
/// the placeholders `{input}`, `{qpfile}`, `{output}`, `{statsfile}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalBackendConfig {
    pub command: Vec<String>,
    pub input: PathBuf,
    pub work_dir: PathBuf,
    pub frame_count: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    3600
}

pub struct ExternalBackend {
    pub config: ExternalBackendConfig,
}

impl ExternalBackend {
    pub fn new(config: ExternalBackendConfig) -> Result<Self> {
        if config.command.is_empty() {
            return Err(Error::InvalidInput("empty adapter command template".into()));
        }
        Ok(ExternalBackend { config })
    }
}

impl EncoderBackend for ExternalBackend {
    fn encode(&self, request: &EncodeRequest) -> Result<EncodeResult> {
        let started = Instant::now();
        std::fs::create_dir_all(&self.config.work_dir)?;
        let tag = &request.sequence_id;
        let qpfile = self.config.work_dir.join(format!("{tag}.qp.csv"));
        let output = self.config.work_dir.join(format!("{tag}.bin"));
        let statsfile = self.config.work_dir.join(format!("{tag}.stats.csv"));
        {
            let mut f = std::fs::File::create(&qpfile)?;
            for (i, qp) in request.frame_qps.iter().enumerate() {
                writeln!(f, "{},{}", i + 1, qp)?;
            }
        }
        let substitute = |arg: &str| {
            arg.replace("{input}", &self.config.input.to_string_lossy())
                .replace("{qpfile}", &qpfile.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
                .replace("{statsfile}", &statsfile.to_string_lossy())
        };
        let mut cmd = std::process::Command::new(substitute(&self.config.command[0]));
        for arg in &self.config.command[1..] {
            cmd.arg(substitute(arg));
        }
        cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
        let mut child = cmd.spawn().map_err(|e| {
            Error::Backend(format!("failed to spawn '{}': {e}", self.config.command[0]))
        })?;
        let deadline = started + Duration::from_secs(self.config.timeout_secs);
        let status = loop {
            match child.try_wait()? {
                Some(status) => break status,
                None => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(Error::ProcessTimeout {
                            seconds: self.config.timeout_secs,
                        });
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut pipe) = child.stderr.take() {
                use std::io::Read;
                let _ = pipe.read_to_string(&mut stderr);
            }
            return Err(Error::ProcessFailed {
                code: status.code(),
                stderr: stderr.chars().take(4096).collect(),
            });
        }
        let stats = std::fs::read_to_string(&statsfile)
            .map_err(|e| Error::MalformedStats(format!("cannot read stats file: {e}")))?;
        parse_stats(&stats, self.config.frame_count, started.elapsed().as_secs_f64())
    }

    fn frame_count(&self) -> usize {
        self.config.frame_count
    }

    fn identity(&self) -> String {
        format!(
            "external:{}:{}",
            self.config.command.join(" "),
            self.config.input.display()
        )
    }
}

/// Parses the stats CSV (`frame_index,qp,bits,mse_y,mse_u,mse_v`) into an
/// EncodeResult, requiring exactly one line per frame.
pub fn parse_stats(text: &str, frame_count: usize, wall_time: f64) -> Result<EncodeResult> {
    let mut frames = vec![None; frame_count];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(Error::MalformedStats(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 1,
                parts.len()
            )));
        }
        let idx: usize = parts[0].parse().map_err(|_| {
            Error::MalformedStats(format!("line {}: bad frame index", lineno + 1))
        })?;
        if idx == 0 || idx > frame_count {
            return Err(Error::MalformedStats(format!(
                "line {}: frame index {idx} out of range 1..={frame_count}",
                lineno + 1
            )));
        }
        let nums: Vec<f64> = parts[2..]
            .iter()
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::MalformedStats(format!("line {}: non-numeric field '{p}'", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if nums[0] <= 0.0 {
            return Err(Error::MalformedStats(format!(
                "line {}: frame bits must be positive",
                lineno + 1
            )));
        }
        if frames[idx - 1].is_some() {
            return Err(Error::MalformedStats(format!(
                "duplicate line for frame {idx}"
            )));
        }
        frames[idx - 1] = Some((nums[0], nums[1], nums[2], nums[3]));
    }
    let missing: Vec<usize> = frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.is_none())
        .map(|(i, _)| i + 1)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MalformedStats(format!(
            "incomplete stats: missing frames {missing:?}"
        )));
    }
    let frames: Vec<(f64, f64, f64, f64)> = frames.into_iter().map(Option::unwrap).collect();
    let total_bits = frames.iter().map(|f| f.0).sum();
    Ok(EncodeResult {
        frames,
        total_bits,
        wall_time,
    })
}

/// Collects an EncodeResult into RdSamples keyed by one sweep QP.
pub fn result_to_samples(
    result: &EncodeResult,
    sweep_qp: i32,
    set: &mut RdSampleSet,
) -> Result<()> {
    for (i, _) in result.frames.iter().enumerate() {
        set.insert(RdSample {
            frame_index: i,
            qp: sweep_qp,
            bits: result.frames[i].0,
            mse: result.combined_mse(i),
        })?;
    }
    Ok(())
}
