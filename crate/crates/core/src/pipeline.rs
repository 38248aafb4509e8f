//! Two-pass orchestration: sweep collection (with caching), model fitting,
//! allocation with fallback handling, QP planning, the final encode, and
//! run evaluation / comparison.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{plan_all_intra, plan_gop, assemble_problem, EncoderProfile, QpSchedule};
use crate::backend::{EncodeRequest, EncodeResult, EncoderBackend};
use crate::error::{Error, Result};
use crate::grid::{ConfidenceGrid, GopGrouping, ScanOrder};
use crate::metrics::{self, MseGrid, QualityReport, RdCurvePoint};
use crate::optimizer::{
    linearize, solve_step_a, solve_step_b, AllocationProblem, SpStructure, VariableKind,
};
use crate::rdmodel::{
    fit_frame_model_gop, fit_frame_model_intra, select_fit_window, FitWindow, HyperbolicModel,
    RdSampleSet,
};

/// Result of the sweep pass.
#[derive(Debug, Clone)]
pub struct PassOneStats {
    pub samples: RdSampleSet,
    pub from_cache: bool,
    pub elapsed_secs: f64,
}

fn sweep_schedule(profile: &EncoderProfile, frame_count: usize, base_qp: i32) -> Result<Vec<i32>> {
    if profile.is_gop_based() {
        let grouping = GopGrouping::new(frame_count, profile.gop_size)?;
        let bases = vec![base_qp; grouping.group_count()];
        Ok(profile.frame_qps(&bases, Some(&grouping)))
    } else {
        Ok(vec![base_qp; frame_count])
    }
}

/// Runs the sweep: one encode per base QP in the profile's range, collected
/// into per-frame samples keyed by the base QP. `parallelism` 0 uses the
/// default thread pool; 1 runs serially.
pub fn first_pass(
    backend: &dyn EncoderBackend,
    profile: &EncoderProfile,
    parallelism: usize,
) -> Result<RdSampleSet> {
    let started = Instant::now();
    let n = backend.frame_count();
    let qps: Vec<i32> = (profile.sweep_qps.0..=profile.sweep_qps.1).collect();
    let encode_one = |&qp: &i32| -> (i32, Result<EncodeResult>) {
        let result = sweep_schedule(profile, n, qp).and_then(|frame_qps| {
            backend.encode(&EncodeRequest {
                sequence_id: format!("pass1-qp{qp}"),
                frame_qps,
            })
        });
        (qp, result)
    };
    let outcomes: Vec<(i32, Result<EncodeResult>)> = if parallelism == 1 {
        qps.iter().map(encode_one).collect()
    } else if parallelism == 0 {
        qps.par_iter().map(encode_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::Backend(format!("thread pool: {e}")))?;
        pool.install(|| qps.par_iter().map(encode_one).collect())
    };
    let mut failed: Vec<(i32, String)> = Vec::new();
    let mut set = RdSampleSet::new(n);
    for (qp, outcome) in outcomes {
        match outcome {
            Ok(result) => crate::backend::result_to_samples(&result, qp, &mut set)?,
            Err(e) => failed.push((qp, e.to_string())),
        }
    }
    if !failed.is_empty() {
        let qps: Vec<String> = failed.iter().map(|(qp, _)| qp.to_string()).collect();
        return Err(Error::Backend(format!(
            "sweep failed at QPs [{}]; first failure (QP {}): {}",
            qps.join(", "),
            failed[0].0,
            failed[0].1
        )));
    }
    set.validate_monotone()?;
    let _ = started;
    Ok(set)
}

/// Cache key over everything the sweep output depends on.
fn cache_key(backend: &dyn EncoderBackend, profile: &EncoderProfile) -> String {
    let mut hasher = Sha256::new();
    hasher.update(backend.identity().as_bytes());
    hasher.update(serde_json::to_vec(profile).expect("profile serializes"));
    hex::encode(hasher.finalize())
}

/// Sweep with an on-disk cache of the stats CSV, keyed by backend identity
/// and profile (GOP structure, offsets, sweep range).
pub fn first_pass_cached(
    backend: &dyn EncoderBackend,
    profile: &EncoderProfile,
    parallelism: usize,
    cache_dir: Option<&Path>,
) -> Result<PassOneStats> {
    let started = Instant::now();
    let cache_path = cache_dir.map(|d| d.join(format!("pass1-{}.csv", cache_key(backend, profile))));
    if let Some(path) = &cache_path {
        if path.exists() {
            let file = std::fs::File::open(path)?;
            let samples = RdSampleSet::from_stats_csv(BufReader::new(file), backend.frame_count())?;
            return Ok(PassOneStats {
                samples,
                from_cache: true,
                elapsed_secs: started.elapsed().as_secs_f64(),
            });
        }
    }
    let samples = first_pass(backend, profile, parallelism)?;
    if let Some(path) = &cache_path {
        std::fs::create_dir_all(path.parent().unwrap())?;
        std::fs::write(path, samples.to_stats_csv())?;
    }
    Ok(PassOneStats {
        samples,
        from_cache: false,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fits one model per frame from windowed sweep samples, per the profile's
/// coupling (frame bits for all-intra, GOP totals otherwise).
pub fn fit_models(
    samples: &RdSampleSet,
    profile: &EncoderProfile,
) -> Result<Vec<HyperbolicModel>> {
    let n = samples.frame_count();
    if profile.is_gop_based() {
        let grouping = GopGrouping::new(n, profile.gop_size)?;
        (0..n)
            .map(|i| fit_frame_model_gop(i, samples, &grouping))
            .collect()
    } else {
        (0..n)
            .map(|i| {
                let frame: Vec<_> = samples.samples_for(i).copied().collect();
                fit_frame_model_intra(&frame)
            })
            .collect()
    }
}

/// Allocation outcome, including which variables were pinned because their
/// fitted models were unusable (non-monotone raw slope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationOutcome {
    /// Per-variable bit shares summing to the budget.
    pub allocation: Vec<f64>,
    /// Variables excluded from optimization and given a frame-count
    /// proportional share of the budget.
    pub pinned_variables: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
}

fn frames_of_variable(problem: &AllocationProblem, var: usize) -> usize {
    (0..problem.frame_count())
        .filter(|&i| problem.variable_of(i) == var)
        .count()
}

/// Two-step solve: weighted-distortion minimization on the budget simplex,
/// then refinement against the linearized smoothness penalty. Variables
/// whose models are non-monotone are pinned to a frame-count proportional
/// share and the remainder is optimized.
pub fn solve_allocation(problem: &AllocationProblem) -> Result<AllocationOutcome> {
    problem.validate()?;
    let v = problem.variable_count();
    let n = problem.frame_count();
    let mut pinned = vec![false; v];
    for i in 0..n {
        if problem.models[i].non_monotone {
            pinned[problem.variable_of(i)] = true;
        }
    }
    let pinned_variables: Vec<usize> = (0..v).filter(|&j| pinned[j]).collect();
    if pinned_variables.is_empty() {
        let step_a = solve_step_a(problem)?;
        let lin = linearize(problem, &step_a.allocation)?;
        let step_b = solve_step_b(problem, &lin, &step_a)?;
        return Ok(AllocationOutcome {
            allocation: step_b.allocation,
            pinned_variables,
            converged: step_a.converged && step_b.converged,
            iterations: step_a.iterations + step_b.iterations,
            kkt_residual: step_a.kkt_residual,
        });
    }
    // Pinned variables get budget * (frames in variable) / (total frames).
    let mut allocation = vec![0.0; v];
    let mut pinned_total = 0.0;
    for &j in &pinned_variables {
        let share = problem.budget * frames_of_variable(problem, j) as f64 / n as f64;
        allocation[j] = share;
        pinned_total += share;
    }
    if pinned_variables.len() == v {
        return Ok(AllocationOutcome {
            allocation,
            pinned_variables,
            converged: true,
            iterations: 0,
            kkt_residual: 0.0,
        });
    }
    // Reduced problem over the frames of free variables. Whole variables
    // are dropped, so for GOP problems the remaining frames still form
    // contiguous groups with any short group staying last.
    let free_frames: Vec<usize> = (0..n)
        .filter(|&i| !pinned[problem.variable_of(i)])
        .collect();
    let index_of: BTreeMap<usize, usize> = free_frames
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let sub_pairs: Vec<(usize, usize, f64)> = problem
        .sp
        .pairs
        .iter()
        .filter_map(|&(a, b, w)| match (index_of.get(&a), index_of.get(&b)) {
            (Some(&a), Some(&b)) => Some((a, b, w)),
            _ => None,
        })
        .collect();
    let variables = match &problem.variables {
        VariableKind::PerFrame => VariableKind::PerFrame,
        VariableKind::PerGop(g) => {
            VariableKind::PerGop(GopGrouping::new(free_frames.len(), g.groups()[0].len())?)
        }
    };
    let sub = AllocationProblem {
        models: free_frames.iter().map(|&i| problem.models[i].clone()).collect(),
        weights: free_frames.iter().map(|&i| problem.weights[i]).collect(),
        lambda: problem.lambda,
        budget: problem.budget - pinned_total,
        variables,
        sp: SpStructure {
            frame_count: free_frames.len(),
            pairs: sub_pairs,
        },
        grid_shape: problem.grid_shape,
    };
    let sub_outcome = solve_allocation(&sub)?;
    let free_vars: Vec<usize> = (0..v).filter(|&j| !pinned[j]).collect();
    for (sub_j, &j) in free_vars.iter().enumerate() {
        allocation[j] = sub_outcome.allocation[sub_j];
    }
    Ok(AllocationOutcome {
        allocation,
        pinned_variables,
        converged: sub_outcome.converged,
        iterations: sub_outcome.iterations,
        kkt_residual: sub_outcome.kkt_residual,
    })
}

/// Wall-clock breakdown; excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub first_pass_secs: f64,
    pub solve_secs: f64,
    pub second_pass_secs: f64,
}

/// Full record of one two-pass run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPassReport {
    pub budget: f64,
    pub lambda: f64,
    pub achieved_bits: f64,
    /// Signed relative deviation `(achieved - budget) / budget`.
    pub bit_error: f64,
    pub quality: QualityReport,
    pub schedule: QpSchedule,
    pub fit_window: FitWindow,
    pub allocation: AllocationOutcome,
    pub first_pass_from_cache: bool,
    pub timing: Timing,
}

impl TwoPassReport {
    /// Copy with timing zeroed and the cache flag cleared, for determinism
    /// comparisons between cold and warm runs.
    pub fn comparable(&self) -> TwoPassReport {
        TwoPassReport {
            timing: Timing::default(),
            first_pass_from_cache: false,
            ..self.clone()
        }
    }
}

/// Everything a two-pass run needs.
pub struct TwoPassInputs<'a> {
    pub backend: &'a dyn EncoderBackend,
    pub profile: &'a EncoderProfile,
    pub confidence: &'a ConfidenceGrid,
    pub scan: &'a ScanOrder,
    pub lambda: f64,
    pub budget: f64,
    /// 0 = default pool, 1 = serial, otherwise a fixed thread count.
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
}

fn check_inputs(inputs: &TwoPassInputs) -> Result<()> {
    if inputs.backend.frame_count() != inputs.scan.frame_count() {
        return Err(Error::DimensionMismatch(format!(
            "backend has {} frames, scan order maps {}",
            inputs.backend.frame_count(),
            inputs.scan.frame_count()
        )));
    }
    if inputs.budget <= 0.0 || !inputs.budget.is_finite() {
        return Err(Error::InvalidInput("budget must be positive".into()));
    }
    if inputs.lambda < 0.0 || !inputs.lambda.is_finite() {
        return Err(Error::InvalidInput("lambda must be >= 0".into()));
    }
    Ok(())
}

/// Maps per-frame combined MSEs back onto the uv grid. Requires the scan
/// order to cover every cell.
pub fn mse_grid_from_result(result: &EncodeResult, scan: &ScanOrder) -> Result<MseGrid> {
    if scan.frame_count() != scan.rows * scan.cols {
        return Err(Error::InvalidInput(format!(
            "scan covers {} of {} cells; full coverage needed for evaluation",
            scan.frame_count(),
            scan.rows * scan.cols
        )));
    }
    if result.frames.len() != scan.frame_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} encoded frames vs {} scan entries",
            result.frames.len(),
            scan.frame_count()
        )));
    }
    let mut values = vec![0.0; scan.rows * scan.cols];
    for i in 0..result.frames.len() {
        let (r, c) = scan.cell_of(i);
        values[r * scan.cols + c] = result.combined_mse(i);
    }
    MseGrid::new(scan.rows, scan.cols, values)
}

/// Quality report for one encode result.
pub fn evaluate_run(
    result: &EncodeResult,
    scan: &ScanOrder,
    confidence: &ConfidenceGrid,
    lambda: f64,
) -> Result<QualityReport> {
    metrics::quality_report(mse_grid_from_result(result, scan)?, confidence, lambda)
}

/// The full two-pass procedure: sweep, window selection, model fitting,
/// allocation, QP planning, final encode, evaluation.
pub fn run_two_pass(inputs: &TwoPassInputs) -> Result<TwoPassReport> {
    check_inputs(inputs)?;
    let pass1 = first_pass_cached(
        inputs.backend,
        inputs.profile,
        inputs.parallelism,
        inputs.cache_dir.as_deref(),
    )
    .map_err(|e| e.in_stage("first_pass"))?;
    let stats = &pass1.samples;

    let solve_started = Instant::now();
    let window =
        select_fit_window(stats, inputs.budget).map_err(|e| e.in_stage("fit_window"))?;
    let windowed = stats.restrict_qps(window.lo, window.hi);
    let models = fit_models(&windowed, inputs.profile).map_err(|e| e.in_stage("fit"))?;
    let problem = assemble_problem(
        inputs.profile,
        models,
        inputs.confidence,
        inputs.scan,
        inputs.lambda,
        inputs.budget,
    )
    .map_err(|e| e.in_stage("assemble"))?;
    let outcome = solve_allocation(&problem).map_err(|e| e.in_stage("solve"))?;

    let mut schedule = plan_schedule(stats, inputs.profile, &outcome.allocation)
        .map_err(|e| e.in_stage("plan"))?;
    schedule.expected_target = expected_target(&problem, stats, inputs.profile, &schedule).ok();
    let solve_secs = solve_started.elapsed().as_secs_f64();

    let second_started = Instant::now();
    let result = inputs
        .backend
        .encode(&EncodeRequest {
            sequence_id: "pass2".into(),
            frame_qps: schedule.frame_qps.clone(),
        })
        .map_err(|e| e.in_stage("second_pass"))?;
    let second_pass_secs = second_started.elapsed().as_secs_f64();

    let quality = evaluate_run(&result, inputs.scan, inputs.confidence, inputs.lambda)
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok(TwoPassReport {
        budget: inputs.budget,
        lambda: inputs.lambda,
        achieved_bits: result.total_bits,
        bit_error: (result.total_bits - inputs.budget) / inputs.budget,
        quality,
        schedule,
        fit_window: window,
        allocation: outcome,
        first_pass_from_cache: pass1.from_cache,
        timing: Timing {
            first_pass_secs: pass1.elapsed_secs,
            solve_secs,
            second_pass_secs,
        },
    })
}

/// Turns a per-variable allocation into a QP schedule for the profile.
pub fn plan_schedule(
    stats: &RdSampleSet,
    profile: &EncoderProfile,
    allocation: &[f64],
) -> Result<QpSchedule> {
    if profile.is_gop_based() {
        let grouping = GopGrouping::new(stats.frame_count(), profile.gop_size)?;
        plan_gop(stats, &grouping, allocation, profile)
    } else {
        plan_all_intra(stats, allocation)
    }
}

fn expected_target(
    problem: &AllocationProblem,
    stats: &RdSampleSet,
    profile: &EncoderProfile,
    schedule: &QpSchedule,
) -> Result<f64> {
    let observed: Vec<f64> = if profile.is_gop_based() {
        let grouping = GopGrouping::new(stats.frame_count(), profile.gop_size)?;
        schedule
            .chosen_sweep_qp
            .iter()
            .enumerate()
            .map(|(gop, &qp)| stats.gop_total(&grouping, gop, qp))
            .collect::<Result<_>>()?
    } else {
        schedule
            .chosen_sweep_qp
            .iter()
            .enumerate()
            .map(|(frame, &qp)| {
                stats
                    .sample(frame, qp)
                    .map(|s| s.bits)
                    .ok_or_else(|| Error::InvalidInput(format!("no sample for frame {frame}")))
            })
            .collect::<Result<_>>()?
    };
    problem.predict_target(&observed)
}

/// Baseline run: the budget is split uniformly across variables before QP
/// planning, skipping model fitting and optimization entirely.
pub fn run_uniform_baseline(inputs: &TwoPassInputs) -> Result<TwoPassReport> {
    check_inputs(inputs)?;
    let pass1 = first_pass_cached(
        inputs.backend,
        inputs.profile,
        inputs.parallelism,
        inputs.cache_dir.as_deref(),
    )
    .map_err(|e| e.in_stage("first_pass"))?;
    let stats = &pass1.samples;
    let n = stats.frame_count();
    let var_count = if inputs.profile.is_gop_based() {
        GopGrouping::new(n, inputs.profile.gop_size)?.group_count()
    } else {
        n
    };
    let allocation = vec![inputs.budget / var_count as f64; var_count];
    let schedule = plan_schedule(stats, inputs.profile, &allocation)?;
    let result = inputs
        .backend
        .encode(&EncodeRequest {
            sequence_id: "pass2-uniform".into(),
            frame_qps: schedule.frame_qps.clone(),
        })
        .map_err(|e| e.in_stage("second_pass"))?;
    let quality = evaluate_run(&result, inputs.scan, inputs.confidence, inputs.lambda)?;
    Ok(TwoPassReport {
        budget: inputs.budget,
        lambda: inputs.lambda,
        achieved_bits: result.total_bits,
        bit_error: (result.total_bits - inputs.budget) / inputs.budget,
        quality,
        schedule,
        fit_window: FitWindow {
            central_qp: 0,
            lo: 0,
            hi: 0,
        },
        allocation: AllocationOutcome {
            allocation,
            pinned_variables: vec![],
            converged: true,
            iterations: 0,
            kkt_residual: 0.0,
        },
        first_pass_from_cache: pass1.from_cache,
        timing: Timing {
            first_pass_secs: pass1.elapsed_secs,
            ..Timing::default()
        },
    })
}

/// Builds a rate-quality curve from runs, sorted by achieved bits. Runs
/// whose target exceeded the dB range (T <= 0 upstream) are rejected.
pub fn reports_to_curve(reports: &[TwoPassReport]) -> Result<Vec<RdCurvePoint>> {
    let mut curve = Vec::with_capacity(reports.len());
    for r in reports {
        let quality = r.quality.t_prime_db.ok_or_else(|| {
            Error::InvalidInput("run has no finite quality value for the curve".into())
        })?;
        curve.push(RdCurvePoint {
            bits: r.achieved_bits,
            quality,
        });
    }
    curve.sort_by(|a, b| a.bits.partial_cmp(&b.bits).unwrap());
    Ok(curve)
}

/// Average bitrate difference (percent) of `test` against `anchor` at equal
/// quality. Negative means `test` spends fewer bits.
pub fn compare_runs(anchor: &[TwoPassReport], test: &[TwoPassReport]) -> Result<f64> {
    metrics::bd_rate(&reports_to_curve(anchor)?, &reports_to_curve(test)?)
}

/// One named sweep preset: the budget grid and smoothness weights to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPreset {
    pub budgets: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Built-in presets; budgets are scaled by `bits_per_frame * frame_count`
/// at the call site via `scale_budgets`.
pub fn builtin_presets() -> BTreeMap<String, SweepPreset> {
    let mut presets = BTreeMap::new();
    presets.insert(
        "default".to_string(),
        SweepPreset {
            budgets: vec![0.5, 1.0, 2.0, 4.0],
            lambdas: vec![0.0, 2.0, 4.0],
        },
    );
    presets.insert(
        "quick".to_string(),
        SweepPreset {
            budgets: vec![1.0],
            lambdas: vec![0.0, 2.0],
        },
    );
    presets
}

/// Loads presets from a JSON file mapping names to `SweepPreset`.
pub fn load_presets(path: &Path) -> Result<BTreeMap<String, SweepPreset>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{profile_defaults, ProfileKind};
    use crate::backend::{generate_mock_scene, Coupling, MockBackend, MockSceneSpec};
    use crate::grid::ScanKind;
    use crate::optimizer::VariableKind;
    use crate::rdmodel::ModelKind;

    // Moderate parameter spread keeps every frame's optimal share inside
    // the bit range its sweep actually observes (no endpoint saturation).
    fn mock_backend(frames: usize, sigma: f64, coupling: Coupling, seed: u64) -> MockBackend {
        MockBackend::new(
            generate_mock_scene(&MockSceneSpec {
                frame_count: frames,
                alpha_range: (1e7, 8e7),
                beta_range: (-1.1, -0.9),
                r_ref_range: (4e4, 9e4),
                q_ref: 31,
                sigma,
                coupling,
                seed,
            })
            .unwrap(),
        )
    }

    #[test]
    fn first_pass_covers_full_sweep_deterministically() {
        let backend = mock_backend(6, 0.01, Coupling::FrameLevel, 3);
        let profile = profile_defaults(ProfileKind::AllIntra);
        let a = first_pass(&backend, &profile, 1).unwrap();
        let b = first_pass(&backend, &profile, 0).unwrap();
        assert_eq!(a.sweep_qps(), (16..=45).collect::<Vec<i32>>());
        assert_eq!(a.to_stats_csv(), b.to_stats_csv());
    }

    #[test]
    fn first_pass_reports_failed_qps() {
        struct Flaky(MockBackend);
        impl EncoderBackend for Flaky {
            fn encode(&self, req: &EncodeRequest) -> crate::Result<EncodeResult> {
                if req.frame_qps[0] % 10 == 0 {
                    return Err(Error::Backend("synthetic failure".into()));
                }
                self.0.encode(req)
            }
            fn frame_count(&self) -> usize {
                self.0.frame_count()
            }
            fn identity(&self) -> String {
                "flaky".into()
            }
        }
        let backend = Flaky(mock_backend(2, 0.0, Coupling::FrameLevel, 1));
        let profile = profile_defaults(ProfileKind::AllIntra);
        let err = first_pass(&backend, &profile, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("20") && msg.contains("30") && msg.contains("40"), "{msg}");
    }

    #[test]
    fn cache_round_trips_and_is_hit_on_second_call() {
        let dir = tempfile::tempdir().unwrap();
        let backend = mock_backend(4, 0.02, Coupling::FrameLevel, 9);
        let profile = profile_defaults(ProfileKind::AllIntra);
        let first = first_pass_cached(&backend, &profile, 1, Some(dir.path())).unwrap();
        assert!(!first.from_cache);
        let second = first_pass_cached(&backend, &profile, 1, Some(dir.path())).unwrap();
        assert!(second.from_cache);
        assert_eq!(first.samples.to_stats_csv(), second.samples.to_stats_csv());
    }

    #[test]
    fn cache_key_distinguishes_profiles_and_scenes() {
        let a = mock_backend(4, 0.0, Coupling::FrameLevel, 1);
        let b = mock_backend(4, 0.0, Coupling::FrameLevel, 2);
        let ai = profile_defaults(ProfileKind::AllIntra);
        let ra = profile_defaults(ProfileKind::RandomAccess);
        assert_ne!(cache_key(&a, &ai), cache_key(&b, &ai));
        assert_ne!(cache_key(&a, &ai), cache_key(&a, &ra));
    }

    fn two_pass_inputs<'a>(
        backend: &'a MockBackend,
        profile: &'a EncoderProfile,
        confidence: &'a ConfidenceGrid,
        scan: &'a ScanOrder,
        lambda: f64,
        budget: f64,
    ) -> TwoPassInputs<'a> {
        TwoPassInputs {
            backend,
            profile,
            confidence,
            scan,
            lambda,
            budget,
            parallelism: 1,
            cache_dir: None,
        }
    }

    #[test]
    fn two_pass_all_intra_hits_budget_and_is_deterministic() {
        let backend = mock_backend(64, 0.0, Coupling::FrameLevel, 11);
        let profile = profile_defaults(ProfileKind::AllIntra);
        let confidence = ConfidenceGrid::uniform(8, 8);
        let scan = ScanOrder::build(ScanKind::Snake, 8, 8, 64).unwrap();
        let budget = 64.0 * 6e4;
        let inputs = two_pass_inputs(&backend, &profile, &confidence, &scan, 2.0, budget);
        let report = run_two_pass(&inputs).unwrap();
        assert!(report.bit_error.abs() < 0.05, "bit error {}", report.bit_error);
        assert!(report.quality.t_prime_db.is_some());
        assert!(report.allocation.pinned_variables.is_empty());
        let again = run_two_pass(&inputs).unwrap();
        assert_eq!(report.comparable(), again.comparable());
    }

    #[test]
    fn two_pass_gop_profile_runs() {
        let backend = mock_backend(24, 0.0, Coupling::GopLevel { gop_size: 8 }, 5);
        let profile = profile_defaults(ProfileKind::RandomAccess);
        let confidence = ConfidenceGrid::uniform(4, 6);
        let scan = ScanOrder::build(ScanKind::Raster, 4, 6, 24).unwrap();
        let budget = 24.0 * 5e4;
        let inputs = two_pass_inputs(&backend, &profile, &confidence, &scan, 0.0, budget);
        let report = run_two_pass(&inputs).unwrap();
        assert_eq!(report.allocation.allocation.len(), 3);
        assert!(report.bit_error.abs() < 0.10, "bit error {}", report.bit_error);
    }

    #[test]
    fn stage_annotation_names_the_failing_stage() {
        let backend = mock_backend(16, 0.0, Coupling::FrameLevel, 11);
        let profile = profile_defaults(ProfileKind::AllIntra);
        let confidence = ConfidenceGrid::uniform(4, 4);
        // Scan maps fewer frames than the backend produces.
        let scan = ScanOrder::build(ScanKind::Raster, 4, 4, 12).unwrap();
        let inputs = two_pass_inputs(&backend, &profile, &confidence, &scan, 0.0, 1e6);
        assert!(matches!(
            run_two_pass(&inputs).unwrap_err(),
            Error::DimensionMismatch(_)
        ));
    }

    #[test]
    fn uniform_baseline_runs_and_never_pins() {
        let backend = mock_backend(16, 0.0, Coupling::FrameLevel, 11);
        let profile = profile_defaults(ProfileKind::AllIntra);
        let confidence = ConfidenceGrid::uniform(4, 4);
        let scan = ScanOrder::build(ScanKind::Snake, 4, 4, 16).unwrap();
        let inputs = two_pass_inputs(&backend, &profile, &confidence, &scan, 2.0, 16.0 * 6e4);
        let report = run_uniform_baseline(&inputs).unwrap();
        assert!(report.allocation.pinned_variables.is_empty());
        assert_eq!(report.allocation.allocation.len(), 16);
    }

    #[test]
    fn fallback_pins_non_monotone_variables() {
        // Hand-built problem: 3 per-frame variables, the middle model
        // flagged as unusable.
        let model = |alpha: f64, non_monotone: bool| HyperbolicModel {
            alpha,
            beta: -1.0,
            r_squared: 1.0,
            kind: ModelKind::FrameBits,
            gop_index: None,
            non_monotone,
            mse_clamped: 0,
        };
        let problem = AllocationProblem {
            models: vec![model(100.0, false), model(100.0, true), model(400.0, false)],
            weights: vec![1.0; 3],
            lambda: 0.0,
            budget: 300.0,
            variables: VariableKind::PerFrame,
            sp: SpStructure::empty(3),
            grid_shape: (1, 3),
        };
        let outcome = solve_allocation(&problem).unwrap();
        assert_eq!(outcome.pinned_variables, vec![1]);
        assert!((outcome.allocation[1] - 100.0).abs() < 1e-9);
        let total: f64 = outcome.allocation.iter().sum();
        assert!((total - 300.0).abs() < 1e-6);
        // Remaining 200 split between alpha 100 and alpha 400 (beta -1):
        // optimum at sqrt ratio 1:2.
        assert!((outcome.allocation[2] / outcome.allocation[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn fallback_with_all_variables_pinned_goes_uniform() {
        let model = HyperbolicModel {
            alpha: 1.0,
            beta: -1.0,
            r_squared: 0.0,
            kind: ModelKind::FrameBits,
            gop_index: None,
            non_monotone: true,
            mse_clamped: 0,
        };
        let problem = AllocationProblem {
            models: vec![model.clone(), model],
            weights: vec![1.0; 2],
            lambda: 0.0,
            budget: 100.0,
            variables: VariableKind::PerFrame,
            sp: SpStructure::empty(2),
            grid_shape: (1, 2),
        };
        let outcome = solve_allocation(&problem).unwrap();
        assert_eq!(outcome.allocation, vec![50.0, 50.0]);
        assert_eq!(outcome.pinned_variables, vec![0, 1]);
    }

    #[test]
    fn curve_and_comparison_from_reports() {
        let backend = mock_backend(16, 0.0, Coupling::FrameLevel, 11);
        let profile = profile_defaults(ProfileKind::AllIntra);
        let confidence = ConfidenceGrid::uniform(4, 4);
        let scan = ScanOrder::build(ScanKind::Snake, 4, 4, 16).unwrap();
        let mut reports = Vec::new();
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let inputs = two_pass_inputs(
                &backend,
                &profile,
                &confidence,
                &scan,
                0.0,
                scale * 16.0 * 6e4,
            );
            reports.push(run_two_pass(&inputs).unwrap());
        }
        let curve = reports_to_curve(&reports).unwrap();
        assert!(curve.windows(2).all(|w| w[0].bits < w[1].bits));
        // A curve against itself costs nothing.
        let bd = compare_runs(&reports, &reports).unwrap();
        assert!(bd.abs() < 1e-9);
    }

    #[test]
    fn presets_serde_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("presets.json");
        let presets = builtin_presets();
        std::fs::write(&path, serde_json::to_string_pretty(&presets).unwrap()).unwrap();
        assert_eq!(load_presets(&path).unwrap(), presets);
    }
}
