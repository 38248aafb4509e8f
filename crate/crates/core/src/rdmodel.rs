//! Hyperbolic rate-distortion model fitting from first-pass statistics:
//! per-frame bits models for all-intra, GOP-total-bits models for
//! random-access and low-delay.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GopGrouping;
use crate::metrics;

/// Floor for MSE observations before the log transform; lossless frames
/// would otherwise break the regression.
pub const MSE_CLAMP: f64 = 1e-6;
/// Post-fit clamp range for the distortion-decay exponent.
pub const BETA_MIN: f64 = -10.0;
pub const BETA_MAX: f64 = -1e-3;

/// One first-pass observation for one frame at one sweep QP.
///
/// `qp` is the sweep key: the constant frame QP in all-intra, the GOP base
/// QP in the GOP-based configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdSample {
    pub frame_index: usize,
    pub qp: i32,
    pub bits: f64,
    pub mse: f64,
}

/// First-pass observations, per frame and per sweep QP.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RdSampleSet {
    /// frames[frame_index] maps sweep QP -> sample.
    frames: Vec<BTreeMap<i32, RdSample>>,
}

impl RdSampleSet {
    pub fn new(frame_count: usize) -> Self {
        RdSampleSet {
            frames: vec![BTreeMap::new(); frame_count],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn insert(&mut self, sample: RdSample) -> Result<()> {
        if sample.frame_index >= self.frames.len() {
            return Err(Error::InvalidInput(format!(
                "frame index {} out of range {}",
                sample.frame_index,
                self.frames.len()
            )));
        }
        if !(0..=51).contains(&sample.qp) {
            return Err(Error::InvalidInput(format!("QP {} outside [0,51]", sample.qp)));
        }
        if sample.bits <= 0.0 || sample.mse < 0.0 {
            return Err(Error::InvalidInput(format!(
                "bad sample for frame {}: bits {}, mse {}",
                sample.frame_index, sample.bits, sample.mse
            )));
        }
        let per_frame = &mut self.frames[sample.frame_index];
        if per_frame.contains_key(&sample.qp) {
            return Err(Error::InvalidInput(format!(
                "duplicate sample for frame {} at QP {}",
                sample.frame_index, sample.qp
            )));
        }
        per_frame.insert(sample.qp, sample);
        Ok(())
    }

    pub fn samples_for(&self, frame: usize) -> impl Iterator<Item = &RdSample> {
        self.frames[frame].values()
    }

    pub fn sample(&self, frame: usize, qp: i32) -> Option<&RdSample> {
        self.frames[frame].get(&qp)
    }

    /// Sweep QPs present for frame 0 (the reference sweep).
    pub fn sweep_qps(&self) -> Vec<i32> {
        self.frames
            .first()
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Total bits across all frames at each sweep QP. QPs missing a sample
    /// for any frame are skipped.
    pub fn totals_per_qp(&self) -> BTreeMap<i32, f64> {
        let mut totals = BTreeMap::new();
        for qp in self.sweep_qps() {
            let mut total = 0.0;
            let mut complete = true;
            for frame in &self.frames {
                match frame.get(&qp) {
                    Some(s) => total += s.bits,
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                totals.insert(qp, total);
            }
        }
        totals
    }

    /// Total bits of one GOP at one sweep QP; errors if a sibling frame
    /// lacks a sample.
    pub fn gop_total(&self, grouping: &GopGrouping, gop: usize, qp: i32) -> Result<f64> {
        let range = grouping.groups()[gop].clone();
        let mut total = 0.0;
        for frame in range {
            total += self
                .sample(frame, qp)
                .ok_or_else(|| {
                    Error::Fit(format!("frame {frame} has no sample at sweep QP {qp}"))
                })?
                .bits;
        }
        Ok(total)
    }

    /// Checks that within each frame, bits strictly decrease as QP increases.
    pub fn validate_monotone(&self) -> Result<()> {
        for (i, frame) in self.frames.iter().enumerate() {
            let mut prev: Option<(i32, f64)> = None;
            for (&qp, s) in frame {
                if let Some((pqp, pbits)) = prev {
                    if s.bits >= pbits {
                        return Err(Error::InvalidInput(format!(
                            "frame {i}: bits not strictly decreasing from QP {pqp} to {qp}"
                        )));
                    }
                }
                prev = Some((qp, s.bits));
            }
        }
        Ok(())
    }

    /// Returns a copy containing only samples whose sweep QP lies in
    /// `[lo, hi]`.
    pub fn restrict_qps(&self, lo: i32, hi: i32) -> RdSampleSet {
        RdSampleSet {
            frames: self
                .frames
                .iter()
                .map(|m| {
                    m.iter()
                        .filter(|(&qp, _)| (lo..=hi).contains(&qp))
                        .map(|(&qp, &s)| (qp, s))
                        .collect()
                })
                .collect(),
        }
    }

    /// Parses CSV lines `frame_index,qp,bits,mse_y,mse_u,mse_v` (1-based
    /// frame index). The combined MSE uses the 6:1:1 channel weights.
    pub fn from_stats_csv<R: BufRead>(reader: R, frame_count: usize) -> Result<Self> {
        let mut set = RdSampleSet::new(frame_count);
        let mut any = false;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 6 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected 'frame_index,qp,bits,mse_y,mse_u,mse_v'".into(),
                });
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-numeric field '{s}'"),
                })
            };
            let frame_1b: usize = parts[0].parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad frame index '{}'", parts[0]),
            })?;
            if frame_1b == 0 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "frame indices are 1-based".into(),
                });
            }
            let qp: i32 = parts[1].parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad QP '{}'", parts[1]),
            })?;
            let bits = parse_f(parts[2])?;
            let mse = metrics::combine_channels(parse_f(parts[3])?, parse_f(parts[4])?, parse_f(parts[5])?)?;
            set.insert(RdSample {
                frame_index: frame_1b - 1,
                qp,
                bits,
                mse,
            })?;
            any = true;
        }
        if !any {
            return Err(Error::InvalidInput("empty stats file".into()));
        }
        Ok(set)
    }

    pub fn to_stats_csv(&self) -> String {
        // Samples hold one combined MSE; write it to all three channel
        // columns so the 6:1:1 recombination reads back the same value.
        let mut out = String::new();
        for (i, frame) in self.frames.iter().enumerate() {
            for s in frame.values() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    i + 1,
                    s.qp,
                    s.bits,
                    s.mse,
                    s.mse,
                    s.mse
                ));
            }
        }
        out
    }
}

/// Sweep window chosen around the central QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitWindow {
    pub central_qp: i32,
    pub lo: i32,
    pub hi: i32,
}

/// Picks the central QP whose total first-pass output size is closest to
/// the target budget (ties toward the lower QP) and returns the clamped
/// window `[max(16, qc-7), min(45, qc+7)]`.
pub fn select_fit_window(samples: &RdSampleSet, target_budget: f64) -> Result<FitWindow> {
    let totals = samples.totals_per_qp();
    if totals.is_empty() {
        return Err(Error::Fit("no complete sweep QP in sample set".into()));
    }
    let mut best: Option<(i32, f64)> = None;
    for (&qp, &total) in &totals {
        let dev = (total - target_budget).abs();
        // BTreeMap iterates QPs ascending, so strict '<' keeps the lower QP on ties.
        if best.map_or(true, |(_, bd)| dev < bd) {
            best = Some((qp, dev));
        }
    }
    let central_qp = best.unwrap().0;
    Ok(FitWindow {
        central_qp,
        lo: (central_qp - 7).max(16),
        hi: (central_qp + 7).min(45),
    })
}

/// Plain OLS of `log y` on `log x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    /// Intercept in natural-log space.
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    /// Number of y values clamped up to `MSE_CLAMP` before the log.
    pub clamped: usize,
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.iter().any(|&(x, _)| x <= 0.0) {
        return Err(Error::Fit("log-log fit requires x > 0".into()));
    }
    let mut clamped = 0;
    let logs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| {
            let y = if y < MSE_CLAMP {
                clamped += 1;
                MSE_CLAMP
            } else {
                y
            };
            (x.ln(), y.ln())
        })
        .collect();
    let n = logs.len() as f64;
    let distinct_x = {
        let mut xs: Vec<f64> = logs.iter().map(|p| p.0).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        xs.len()
    };
    if distinct_x < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 distinct x values, got {distinct_x}"
        )));
    }
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = logs
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        // Constant y: residuals are exactly zero.
        1.0
    };
    Ok(LogLogFit {
        intercept,
        slope,
        r_squared,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FrameBits,
    GopBits,
}

/// Fitted hyperbolic rate-distortion model `mse = alpha * bits^beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicModel {
    pub alpha: f64,
    /// Clamped into `[BETA_MIN, BETA_MAX]` when the raw fit is monotone.
    pub beta: f64,
    pub r_squared: f64,
    pub kind: ModelKind,
    pub gop_index: Option<usize>,
    /// Raw slope was >= 0: the model is unusable for allocation and the
    /// frame falls back to a budget-proportional share.
    pub non_monotone: bool,
    pub mse_clamped: usize,
}

fn model_from_fit(fit: LogLogFit, kind: ModelKind, gop_index: Option<usize>) -> HyperbolicModel {
    let non_monotone = fit.slope >= 0.0;
    let beta = fit.slope.clamp(BETA_MIN, BETA_MAX);
    HyperbolicModel {
        alpha: fit.intercept.exp(),
        beta,
        r_squared: fit.r_squared,
        kind,
        gop_index,
        non_monotone,
        mse_clamped: fit.clamped,
    }
}

impl HyperbolicModel {
    pub fn predict(&self, bits: f64) -> f64 {
        self.alpha * bits.powf(self.beta)
    }
}

/// All-intra model: regresses the frame MSE against the frame bits.
pub fn fit_frame_model_intra(samples: &[RdSample]) -> Result<HyperbolicModel> {
    if samples.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let points: Vec<(f64, f64)> = samples.iter().map(|s| (s.bits, s.mse)).collect();
    Ok(model_from_fit(fit_loglog(&points)?, ModelKind::FrameBits, None))
}

/// GOP model: regresses the frame MSE against the total bits of the
/// containing (virtual) GOP at each sweep QP.
pub fn fit_frame_model_gop(
    frame: usize,
    samples: &RdSampleSet,
    grouping: &GopGrouping,
) -> Result<HyperbolicModel> {
    let gop = grouping.gop_of(frame);
    let mut points = Vec::new();
    for s in samples.samples_for(frame) {
        let total = samples.gop_total(grouping, gop, s.qp)?;
        points.push((total, s.mse));
    }
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "frame {frame}: need at least 2 sweep samples, got {}",
            points.len()
        )));
    }
    Ok(model_from_fit(
        fit_loglog(&points)?,
        ModelKind::GopBits,
        Some(gop),
    ))
}
