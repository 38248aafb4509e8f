//! Quality quantities: per-frame MSE, confidence-weighted MSE, the
//! smoothness penalty over the uv plane, the combined target and its
//! logarithmic dB form, the bilinear expectation identity, and BD-rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ConfidenceGrid;

pub const PEAK: f64 = 255.0;

/// Per-SAI combined-channel MSE on the uv plane, squared 8-bit pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries. Unmapped cells hold 0.
    pub values: Vec<f64>,
}

impl MseGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "MSE grid {rows}x{cols} vs {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("MSE entries must be >= 0".into()));
        }
        Ok(MseGrid { rows, cols, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Full quality summary for one reconstructed PTS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub wmse: f64,
    pub sp: f64,
    #[serde(rename = "T")]
    pub t: f64,
    /// `10 * log10(255^2 / T)`; `None` serializes as "inf dB" upstream.
    #[serde(rename = "T_prime_db")]
    pub t_prime_db: Option<f64>,
    pub lambda: f64,
    pub per_sai_mse: MseGrid,
}

/// One point of a rate-quality curve for BD-rate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdCurvePoint {
    pub bits: f64,
    /// Quality in dB (T' or PSNR).
    pub quality: f64,
}

/// Mean squared error between two equally sized 8-bit sample planes.
pub fn frame_mse(reference: &[u8], distorted: &[u8]) -> Result<f64> {
    if reference.len() != distorted.len() || reference.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "plane sizes {} vs {}",
            reference.len(),
            distorted.len()
        )));
    }
    let sum: f64 = reference
        .iter()
        .zip(distorted)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// 6:1:1 channel combination of per-plane MSEs.
pub fn combine_channels(mse_y: f64, mse_u: f64, mse_v: f64) -> Result<f64> {
    if mse_y < 0.0 || mse_u < 0.0 || mse_v < 0.0 {
        return Err(Error::InvalidInput("channel MSE must be >= 0".into()));
    }
    Ok((6.0 * mse_y + mse_u + mse_v) / 8.0)
}

/// Confidence weight: squared to match the squared error.
pub fn phi(w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidInput(format!("confidence {w} outside [0,1]")));
    }
    Ok(w * w)
}

/// Adjacency coefficient on the uv plane: 2 for 4-connected pairs,
/// 1 for diagonal 8-connected pairs, 0 otherwise (including identical cells).
pub fn delta(a: (usize, usize), b: (usize, usize)) -> u8 {
    let dr = a.0.abs_diff(b.0);
    let dc = a.1.abs_diff(b.1);
    if dr + dc == 1 {
        2
    } else if dr == 1 && dc == 1 {
        1
    } else {
        0
    }
}

/// Pair confidence weight: both cells must be confident for the pair to count.
pub fn adjacency_weight(w_a: f64, w_b: f64) -> Result<f64> {
    phi(w_a.min(w_b))
}

/// Confidence-weighted mean of the per-SAI MSE grid.
pub fn weighted_mse(mse: &MseGrid, confidence: &ConfidenceGrid) -> Result<f64> {
    if mse.rows != confidence.rows || mse.cols != confidence.cols {
        return Err(Error::DimensionMismatch(format!(
            "MSE grid {}x{} vs confidence {}x{}",
            mse.rows, mse.cols, confidence.rows, confidence.cols
        )));
    }
    let mut sum = 0.0;
    for (m, w) in mse.values.iter().zip(&confidence.values) {
        sum += phi(*w)? * m;
    }
    Ok(sum / (mse.rows * mse.cols) as f64)
}

/// Smoothness penalty: adjacency-weighted squared MSE differences, summed
/// over all ordered cell pairs (each unordered pair counted twice).
pub fn smoothness_penalty(mse: &MseGrid, confidence: &ConfidenceGrid) -> Result<f64> {
    if mse.rows != confidence.rows || mse.cols != confidence.cols {
        return Err(Error::DimensionMismatch(format!(
            "MSE grid {}x{} vs confidence {}x{}",
            mse.rows, mse.cols, confidence.rows, confidence.cols
        )));
    }
    let mut sum = 0.0;
    for r1 in 0..mse.rows {
        for c1 in 0..mse.cols {
            for r2 in 0..mse.rows {
                for c2 in 0..mse.cols {
                    if (r1, c1) == (r2, c2) {
                        continue;
                    }
                    let d = delta((r1, c1), (r2, c2));
                    if d == 0 {
                        continue;
                    }
                    let w = adjacency_weight(confidence.get(r1, c1), confidence.get(r2, c2))?;
                    let diff = mse.get(r1, c1) - mse.get(r2, c2);
                    sum += d as f64 * w * diff * diff;
                }
            }
        }
    }
    Ok(sum)
}

/// Combined target: `wmse + lambda * sqrt(sp) / (rows * cols)`.
pub fn target(wmse: f64, sp: f64, lambda: f64, dims: (usize, usize)) -> Result<f64> {
    if wmse < 0.0 || sp < 0.0 || lambda < 0.0 {
        return Err(Error::InvalidInput(
            "wmse, sp and lambda must be >= 0".into(),
        ));
    }
    Ok(wmse + lambda * sp.sqrt() / (dims.0 * dims.1) as f64)
}

/// Logarithmic dB form of the target, `10 * log10(255^2 / T)`.
/// `T <= 0` signals a lossless/degenerate stream and is an error.
pub fn t_prime(t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "T = {t} is not positive (lossless or degenerate)"
        )));
    }
    Ok(10.0 * ((PEAK * PEAK) / t).log10())
}

/// Builds a full quality report from a per-SAI MSE grid.
pub fn quality_report(
    mse: MseGrid,
    confidence: &ConfidenceGrid,
    lambda: f64,
) -> Result<QualityReport> {
    let wmse = weighted_mse(&mse, confidence)?;
    let sp = smoothness_penalty(&mse, confidence)?;
    let t = target(wmse, sp, lambda, (mse.rows, mse.cols))?;
    let t_prime_db = t_prime(t).ok();
    Ok(QualityReport {
        wmse,
        sp,
        t,
        t_prime_db,
        lambda,
        per_sai_mse: mse,
    })
}

/// Mean of the squared bilinear difference field over the unit square,
/// given the four corner distortions.
pub fn interp_sq_error_expectation(d00: f64, d01: f64, d10: f64, d11: f64) -> f64 {
    (d00 * d00 + d01 * d01 + d10 * d10 + d11 * d11) / 9.0
        + (d00 * d11 + d01 * d10) / 18.0
        + (d00 * d01 + d00 * d10 + d01 * d11 + d10 * d11) / 9.0
}

/// Bjontegaard delta rate between two rate-quality curves, in percent.
/// Negative means the test curve needs fewer bits than the anchor at
/// equal quality.
pub fn bd_rate(anchor: &[RdCurvePoint], test: &[RdCurvePoint]) -> Result<f64> {
    let a = validate_curve(anchor, "anchor")?;
    let t = validate_curve(test, "test")?;
    // Overlapping quality interval.
    let q_lo = a.0.first().unwrap().max(*t.0.first().unwrap());
    let q_hi = a.0.last().unwrap().min(*t.0.last().unwrap());
    if q_hi <= q_lo {
        return Err(Error::InvalidInput(
            "curves have no overlapping quality range".into(),
        ));
    }
    let pa = polyfit3(&a.0, &a.1)?;
    let pt = polyfit3(&t.0, &t.1)?;
    let int_a = poly3_integral(&pa, q_lo, q_hi);
    let int_t = poly3_integral(&pt, q_lo, q_hi);
    let avg_diff = (int_t - int_a) / (q_hi - q_lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Sorted (quality, log10 bits) with monotonicity checks.
fn validate_curve(curve: &[RdCurvePoint], name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "{name} curve has {} points, need at least 4",
            curve.len()
        )));
    }
    let mut pts: Vec<RdCurvePoint> = curve.to_vec();
    pts.sort_by(|x, y| x.bits.partial_cmp(&y.bits).unwrap());
    for w in pts.windows(2) {
        if w[1].quality <= w[0].quality || w[1].bits <= w[0].bits {
            return Err(Error::InvalidInput(format!(
                "{name} curve is not strictly increasing in bits and quality"
            )));
        }
    }
    if pts.iter().any(|p| p.bits <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "{name} curve contains nonpositive bit counts"
        )));
    }
    Ok((
        pts.iter().map(|p| p.quality).collect(),
        pts.iter().map(|p| p.bits.log10()).collect(),
    ))
}

/// Least-squares cubic fit of y on x. With exactly 4 points this is
/// interpolation, matching the classic BD metric.
fn polyfit3(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    // Center x for conditioning.
    let x0 = x.iter().sum::<f64>() / x.len() as f64;
    let xs: Vec<f64> = x.iter().map(|v| v - x0).collect();
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (xi, yi) in xs.iter().zip(y) {
        let row = [1.0, *xi, xi * xi, xi * xi * xi];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * yi;
        }
    }
    let c = solve4(ata, atb).ok_or_else(|| Error::Fit("singular cubic fit".into()))?;
    // Un-center: expand c0 + c1(x-x0) + c2(x-x0)^2 + c3(x-x0)^3.
    let [c0, c1, c2, c3] = c;
    Ok([
        c0 - c1 * x0 + c2 * x0 * x0 - c3 * x0 * x0 * x0,
        c1 - 2.0 * c2 * x0 + 3.0 * c3 * x0 * x0,
        c2 - 3.0 * c3 * x0,
        c3,
    ])
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..4 {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for i in 0..4 {
        x[i] = b[i] / a[i][i];
    }
    Some(x)
}

fn poly3_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x * x * x / 3.0 + c[3] * x * x * x * x / 4.0;
    eval(hi) - eval(lo)
}
