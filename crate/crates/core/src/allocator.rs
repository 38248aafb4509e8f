//! Encoder-configuration adapters: profile constants and the mapping from
//! fitted models plus a bit budget to concrete per-frame QP schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConfidenceGrid, GopGrouping, ScanOrder};
use crate::metrics;
use crate::optimizer::{AllocationProblem, SpStructure, VariableKind};
use crate::rdmodel::{HyperbolicModel, ModelKind, RdSampleSet};

pub const QP_MIN: i32 = 0;
pub const QP_MAX: i32 = 51;
/// First-pass sweep range (inclusive).
pub const SWEEP_LO: i32 = 16;
pub const SWEEP_HI: i32 = 45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    AllIntra,
    RandomAccess,
    LowDelay,
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ai" | "all_intra" => Ok(ProfileKind::AllIntra),
            "ra" | "random_access" => Ok(ProfileKind::RandomAccess),
            "ld" | "low_delay" => Ok(ProfileKind::LowDelay),
            other => Err(Error::InvalidInput(format!("unknown profile '{other}'"))),
        }
    }
}

/// Frozen encoder-configuration constants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderProfile {
    pub kind: ProfileKind,
    pub gop_size: usize,
    pub qp_offsets: Vec<i32>,
    pub sweep_qps: (i32, i32),
}

/// Returns the frozen constants of each profile: all-intra encodes every
/// frame at the base QP; random-access uses GOP size 8 with offsets
/// [1,2,3,4,4,3,4,4]; low-delay uses virtual GOP size 12 with offsets
/// [5,4,5,1] repeated three times.
pub fn profile_defaults(kind: ProfileKind) -> EncoderProfile {
    match kind {
        ProfileKind::AllIntra => EncoderProfile {
            kind,
            gop_size: 1,
            qp_offsets: vec![],
            sweep_qps: (SWEEP_LO, SWEEP_HI),
        },
        ProfileKind::RandomAccess => EncoderProfile {
            kind,
            gop_size: 8,
            qp_offsets: vec![1, 2, 3, 4, 4, 3, 4, 4],
            sweep_qps: (SWEEP_LO, SWEEP_HI),
        },
        ProfileKind::LowDelay => EncoderProfile {
            kind,
            gop_size: 12,
            qp_offsets: vec![5, 4, 5, 1, 5, 4, 5, 1, 5, 4, 5, 1],
            sweep_qps: (SWEEP_LO, SWEEP_HI),
        },
    }
}

impl EncoderProfile {
    /// Per-frame QPs for one first-pass sweep at `base_qp`, or for the
    /// second pass given per-GOP base QPs.
    pub fn frame_qps(&self, base_qps: &[i32], grouping: Option<&GopGrouping>) -> Vec<i32> {
        match self.kind {
            ProfileKind::AllIntra => base_qps.to_vec(),
            _ => {
                let grouping = grouping.expect("GOP profile requires a grouping");
                (0..grouping.frame_count)
                    .map(|frame| {
                        let base = base_qps[grouping.gop_of(frame)];
                        let offset = self.qp_offsets[grouping.position_of(frame)];
                        (base + offset).clamp(QP_MIN, QP_MAX)
                    })
                    .collect()
            }
        }
    }

    pub fn is_gop_based(&self) -> bool {
        self.kind != ProfileKind::AllIntra
    }
}

/// Second-pass QP plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSchedule {
    /// Final per-frame QPs (offsets applied, clamped to [0, 51]).
    pub frame_qps: Vec<i32>,
    /// Chosen sweep QP per variable (per frame or per GOP).
    pub chosen_sweep_qp: Vec<i32>,
    /// Sum of the observed first-pass bits of the chosen sweep entries.
    pub expected_bits: f64,
    /// Predicted target value at the chosen observed bits, when a problem
    /// is available to evaluate it.
    pub expected_target: Option<f64>,
    /// True when any frame QP hit the [0, 51] clamp.
    pub clamped: bool,
}

impl QpSchedule {
    /// Serializes as CSV lines `frame_index,qp` (1-based) for encoder
    /// backends.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, qp) in self.frame_qps.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, qp));
        }
        out
    }
}

/// Picks, per frame, the sweep QP whose observed bits are nearest the
/// allocation target. Ties break toward the lower QP; targets outside the
/// observed range saturate at the nearest sweep endpoint.
pub fn plan_all_intra(samples: &RdSampleSet, allocation: &[f64]) -> Result<QpSchedule> {
    let n = samples.frame_count();
    if allocation.len() != n {
        return Err(Error::InvalidInput(format!(
            "allocation length {} vs {n} frames",
            allocation.len()
        )));
    }
    let mut frame_qps = Vec::with_capacity(n);
    let mut expected_bits = 0.0;
    for (frame, &target) in allocation.iter().enumerate() {
        let mut best: Option<(i32, f64, f64)> = None;
        for s in samples.samples_for(frame) {
            let dev = (s.bits - target).abs();
            if best.map_or(true, |(_, bd, _)| dev < bd) {
                best = Some((s.qp, dev, s.bits));
            }
        }
        let (qp, _, bits) =
            best.ok_or_else(|| Error::InvalidInput(format!("frame {frame} has no samples")))?;
        frame_qps.push(qp);
        expected_bits += bits;
    }
    Ok(QpSchedule {
        chosen_sweep_qp: frame_qps.clone(),
        frame_qps,
        expected_bits,
        expected_target: None,
        clamped: false,
    })
}

/// Picks, per (virtual) GOP, the base QP whose observed GOP total is
/// nearest the allocation target, then applies the profile's positional
/// offsets with clamping.
pub fn plan_gop(
    samples: &RdSampleSet,
    grouping: &GopGrouping,
    allocation: &[f64],
    profile: &EncoderProfile,
) -> Result<QpSchedule> {
    let m = grouping.group_count();
    if allocation.len() != m {
        return Err(Error::InvalidInput(format!(
            "allocation length {} vs {m} GOPs",
            allocation.len()
        )));
    }
    let mut base_qps = Vec::with_capacity(m);
    let mut expected_bits = 0.0;
    for (gop, &target) in allocation.iter().enumerate() {
        let mut best: Option<(i32, f64, f64)> = None;
        for qp in samples.sweep_qps() {
            let total = samples.gop_total(grouping, gop, qp)?;
            let dev = (total - target).abs();
            if best.map_or(true, |(_, bd, _)| dev < bd) {
                best = Some((qp, dev, total));
            }
        }
        let (qp, _, total) = best
            .ok_or_else(|| Error::InvalidInput(format!("GOP {gop} has no complete sweep data")))?;
        base_qps.push(qp);
        expected_bits += total;
    }
    let frame_qps = profile.frame_qps(&base_qps, Some(grouping));
    let clamped = (0..grouping.frame_count).any(|frame| {
        let raw = base_qps[grouping.gop_of(frame)] + profile.qp_offsets[grouping.position_of(frame)];
        raw != frame_qps[frame]
    });
    Ok(QpSchedule {
        frame_qps,
        chosen_sweep_qp: base_qps,
        expected_bits,
        expected_target: None,
        clamped,
    })
}

/// Builds the allocation problem for a profile: per-frame variables for
/// all-intra, per-GOP variables otherwise.
pub fn assemble_problem(
    profile: &EncoderProfile,
    models: Vec<HyperbolicModel>,
    confidence: &ConfidenceGrid,
    scan: &ScanOrder,
    lambda: f64,
    budget: f64,
) -> Result<AllocationProblem> {
    let n = scan.frame_count();
    if models.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} models vs {n} frames",
            models.len()
        )));
    }
    let expected_kind = if profile.is_gop_based() {
        ModelKind::GopBits
    } else {
        ModelKind::FrameBits
    };
    if models.iter().any(|m| m.kind != expected_kind) {
        return Err(Error::InvalidInput(format!(
            "model kind mismatch for profile {:?}",
            profile.kind
        )));
    }
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let (r, c) = scan.cell_of(i);
        weights.push(metrics::phi(confidence.get(r, c))?);
    }
    let variables = if profile.is_gop_based() {
        VariableKind::PerGop(GopGrouping::new(n, profile.gop_size)?)
    } else {
        VariableKind::PerFrame
    };
    Ok(AllocationProblem {
        models,
        weights,
        lambda,
        budget,
        variables,
        sp: SpStructure::build(scan, confidence)?,
        grid_shape: (scan.rows, scan.cols),
    })
}
