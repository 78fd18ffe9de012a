//! Fixed (non-trainable) time-axis maps.
//!
//! Every resampling operation in the toolkit is linear in the input frames:
//! output frame `t` is a weighted sum of a few input frames, with weights
//! that depend only on lengths and the validity mask. [`TimeWeights`] stores
//! those weights sparsely; an output frame with no contributing valid input
//! is invalid.

use ndarray::Array2;

use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TimeWeights<F: Real> {
    in_len: usize,
    rows: Vec<Vec<(usize, F)>>,
}

impl<F: Real> TimeWeights<F> {
    fn from_f64(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let rows = rows
            .into_iter()
            .map(|r| r.into_iter().map(|(u, w)| (u, F::from_f64(w).expect("finite weight"))).collect())
            .collect();
        Self { in_len, rows }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    /// Output validity: a frame is valid iff some valid input contributes.
    pub fn out_mask(&self) -> Vec<bool> {
        self.rows.iter().map(|r| !r.is_empty()).collect()
    }

    pub fn support(&self, t: usize) -> &[(usize, F)] {
        &self.rows[t]
    }

    pub fn apply(&self, x: &Array2<F>) -> Array2<F> {
        let mut out = Array2::zeros((self.rows.len(), x.ncols()));
        for (t, row) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(t);
            for &(u, w) in row {
                dst.scaled_add(w, &x.row(u));
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &Array2<F>) -> Array2<F> {
        let mut out = Array2::zeros((self.in_len, g.ncols()));
        for (t, row) in self.rows.iter().enumerate() {
            for &(u, w) in row {
                out.row_mut(u).scaled_add(w, &g.row(t));
            }
        }
        out
    }
}

fn mean_of(mask: &[bool], range: std::ops::Range<usize>) -> Vec<(usize, f64)> {
    let valid: Vec<usize> = range.filter(|&u| mask[u]).collect();
    let w = 1.0 / valid.len().max(1) as f64;
    valid.into_iter().map(|u| (u, w)).collect()
}

/// Non-overlapping windows of `factor` frames, averaged over valid frames.
pub fn avg_downsample<F: Real>(mask: &[bool], factor: usize) -> Result<TimeWeights<F>> {
    if factor == 0 {
        return Err(Error::arg("masked_avg_downsample", "factor must be >= 1"));
    }
    let t_in = mask.len();
    let t_out = t_in.div_ceil(factor);
    let rows = (0..t_out)
        .map(|t| mean_of(mask, t * factor..((t + 1) * factor).min(t_in)))
        .collect();
    Ok(TimeWeights::from_f64(t_in, rows))
}

/// Half-open input window `[floor(t·L/T), max(start+1, ceil((t+1)·L/T)))`
/// read by output frame `t` of an adaptive average resize.
pub fn adaptive_window(t: usize, t_in: usize, t_target: usize) -> (usize, usize) {
    let start = t * t_in / t_target;
    let end = ((t + 1) * t_in).div_ceil(t_target);
    (start, end.max(start + 1))
}

pub fn adaptive_resize<F: Real>(mask: &[bool], t_target: usize) -> Result<TimeWeights<F>> {
    if t_target == 0 {
        return Err(Error::arg("adaptive_resize", "target length must be >= 1"));
    }
    let t_in = mask.len();
    let rows = (0..t_target)
        .map(|t| {
            let (start, end) = adaptive_window(t, t_in, t_target);
            mean_of(mask, start.min(t_in)..end.min(t_in))
        })
        .collect();
    Ok(TimeWeights::from_f64(t_in, rows))
}

/// Align-corners linear interpolation onto `t_target ≥ t_in` frames.
///
/// When exactly one endpoint of an interpolation interval is valid, the
/// valid endpoint is copied; when both are invalid the output is invalid.
pub fn linear_interp<F: Real>(mask: &[bool], t_target: usize) -> Result<TimeWeights<F>> {
    let t_in = mask.len();
    if t_in == 0 {
        return Err(Error::arg("linear_interp_upsample", "empty input"));
    }
    if t_target < t_in {
        return Err(Error::arg(
            "linear_interp_upsample",
            format!("target {t_target} shorter than input {t_in}"),
        ));
    }
    let step = if t_target == 1 { 0.0 } else { (t_in - 1) as f64 / (t_target - 1) as f64 };
    let rows = (0..t_target)
        .map(|t| {
            let pos = t as f64 * step;
            let lo = (pos.floor() as usize).min(t_in - 1);
            let frac = pos - lo as f64;
            let hi = (lo + 1).min(t_in - 1);
            if frac == 0.0 || hi == lo {
                return if mask[lo] { vec![(lo, 1.0)] } else { Vec::new() };
            }
            match (mask[lo], mask[hi]) {
                (true, true) => vec![(lo, 1.0 - frac), (hi, frac)],
                (true, false) => vec![(lo, 1.0)],
                (false, true) => vec![(hi, 1.0)],
                (false, false) => Vec::new(),
            }
        })
        .collect();
    Ok(TimeWeights::from_f64(t_in, rows))
}

/// `out[t] = in[t − delta]`; vacated frames are invalid, nothing wraps.
pub fn shift<F: Real>(mask: &[bool], delta: i64) -> TimeWeights<F> {
    let t_len = mask.len();
    let rows = (0..t_len)
        .map(|t| {
            let src = t as i64 - delta;
            if src >= 0 && (src as usize) < t_len && mask[src as usize] {
                vec![(src as usize, 1.0)]
            } else {
                Vec::new()
            }
        })
        .collect();
    TimeWeights::from_f64(t_len, rows)
}

/// Keeps the first `len` frames, padding with invalid frames if needed.
pub fn prefix<F: Real>(mask: &[bool], len: usize) -> TimeWeights<F> {
    let rows = (0..len)
        .map(|t| if t < mask.len() && mask[t] { vec![(t, 1.0)] } else { Vec::new() })
        .collect();
    TimeWeights::from_f64(mask.len(), rows)
}
