//! Masked sequence operations assembled from tape primitives.
//!
//! Every function here returns a [`SeqVar`] whose invalid rows are exactly
//! zero, and reads only valid rows of its input.

use super::masked::SeqVar;
use super::resample::{self, TimeWeights};
use super::tape::{Tape, Var};
use super::Real;
use crate::error::{Error, Result};

/// `x·W + b` applied to every row of `x`.
pub fn affine<F: Real>(tape: &mut Tape<'_, F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Per-frame affine map; invalid frames stay invalid and zero.
pub fn linear<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, w: Var, b: Var) -> Result<SeqVar> {
    let y = affine(tape, x.var, w, b)?;
    let y = tape.mask_rows(y, &x.mask)?;
    Ok(SeqVar { var: y, mask: x.mask.clone(), frame_rate_hz: x.frame_rate_hz })
}

fn conv_taps<F: Real>(tape: &Tape<'_, F>, x: &SeqVar, kernel: Var, op: &'static str) -> Result<usize> {
    let d_in = tape.shape(x.var).1;
    let rows = tape.shape(kernel).0;
    if d_in == 0 || rows == 0 || rows % d_in != 0 {
        return Err(Error::dim(op, format!("kernel {:?} for input width {d_in}", tape.shape(kernel))));
    }
    Ok(rows / d_in)
}

/// Number of frames produced by an unpadded strided convolution.
pub fn conv_out_len(t_in: usize, taps: usize, stride: usize) -> usize {
    if t_in < taps {
        0
    } else {
        (t_in - taps) / stride + 1
    }
}

/// Strided convolution without implicit padding.
///
/// `kernel` is `(k·d_in)×d_out`. An output frame is valid iff its window
/// holds at least one valid input frame.
pub fn conv1d<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, kernel: Var, bias: Var, stride: usize) -> Result<SeqVar> {
    if stride == 0 {
        return Err(Error::arg("conv1d", "stride must be >= 1"));
    }
    let taps = conv_taps(tape, x, kernel, "conv1d")?;
    let t_out = conv_out_len(x.len(), taps, stride);
    let mask: Vec<bool> = (0..t_out).map(|t| x.mask[t * stride..t * stride + taps].iter().any(|&m| m)).collect();
    let y = tape.conv(x.var, kernel, &x.mask, stride, 0, t_out)?;
    let y = tape.add_row(y, bias)?;
    let y = tape.mask_rows(y, &mask)?;
    Ok(SeqVar { var: y, mask, frame_rate_hz: x.frame_rate_hz / stride as f64 })
}

/// Length-preserving convolution with zero padding at both edges; output
/// validity follows the input mask. Used by the residual trunk.
pub fn conv_same<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, kernel: Var, bias: Var) -> Result<SeqVar> {
    let taps = conv_taps(tape, x, kernel, "conv_same")?;
    let y = tape.conv(x.var, kernel, &x.mask, 1, (taps - 1) / 2, x.len())?;
    let y = tape.add_row(y, bias)?;
    let y = tape.mask_rows(y, &x.mask)?;
    Ok(SeqVar { var: y, mask: x.mask.clone(), frame_rate_hz: x.frame_rate_hz })
}

/// Transposed strided convolution producing `(T−1)·stride + k` frames.
///
/// `kernel` is `(k·d_out)×d_in`, the layout of the conv kernel it is the
/// adjoint of. A frame is valid iff some valid input frame reaches it. The
/// output frame rate is the input rate times `stride`.
pub fn tconv1d<F: Real>(
    tape: &mut Tape<'_, F>,
    x: &SeqVar,
    kernel: Var,
    bias: Var,
    stride: usize,
    taps: usize,
) -> Result<SeqVar> {
    if stride == 0 || taps == 0 {
        return Err(Error::arg("tconv1d", "stride and kernel size must be >= 1"));
    }
    let t_in = x.len();
    let t_out = if t_in == 0 { 0 } else { (t_in - 1) * stride + taps };
    let mut mask = vec![false; t_out];
    for (u, _) in x.mask.iter().enumerate().filter(|(_, &m)| m) {
        mask[u * stride..u * stride + taps].fill(true);
    }
    let y = tape.tconv(x.var, kernel, &x.mask, stride, taps)?;
    let y = tape.add_row(y, bias)?;
    let y = tape.mask_rows(y, &mask)?;
    Ok(SeqVar { var: y, mask, frame_rate_hz: x.frame_rate_hz * stride as f64 })
}

fn mix<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, weights: TimeWeights<F>, frame_rate_hz: f64) -> Result<SeqVar> {
    let mask = weights.out_mask();
    let y = tape.time_mix(x.var, weights)?;
    Ok(SeqVar { var: y, mask, frame_rate_hz })
}

/// Mean over valid frames of non-overlapping `factor`-frame windows.
pub fn masked_avg_downsample<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, factor: usize) -> Result<SeqVar> {
    let w = resample::avg_downsample(&x.mask, factor)?;
    mix(tape, x, w, x.frame_rate_hz / factor as f64)
}

fn rescaled_rate(rate: f64, t_in: usize, t_out: usize) -> f64 {
    if t_in == 0 {
        rate
    } else {
        rate * t_out as f64 / t_in as f64
    }
}

/// Adaptive average resize to `t_target` frames.
pub fn adaptive_resize<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, t_target: usize) -> Result<SeqVar> {
    let w = resample::adaptive_resize(&x.mask, t_target)?;
    mix(tape, x, w, rescaled_rate(x.frame_rate_hz, x.len(), t_target))
}

pub fn linear_interp_upsample<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, t_target: usize) -> Result<SeqVar> {
    let w = resample::linear_interp(&x.mask, t_target)?;
    mix(tape, x, w, rescaled_rate(x.frame_rate_hz, x.len(), t_target))
}

/// Shifts frames later in time by `delta` steps (earlier when negative).
pub fn temporal_shift<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, delta: i64) -> Result<SeqVar> {
    if delta == 0 {
        return Ok(x.clone());
    }
    mix(tape, x, resample::shift(&x.mask, delta), x.frame_rate_hz)
}

/// Truncates to or pads with invalid frames up to `len`.
pub fn fit_length<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, len: usize) -> Result<SeqVar> {
    if len == x.len() {
        return Ok(x.clone());
    }
    mix(tape, x, resample::prefix(&x.mask, len), x.frame_rate_hz)
}

/// Softmax of the `1×T` row `scores` over the frames where `mask` holds.
pub fn masked_softmax<F: Real>(tape: &mut Tape<'_, F>, scores: Var, mask: &[bool]) -> Result<Var> {
    if tape.shape(scores).0 != 1 {
        return Err(Error::dim("masked_softmax", format!("expected a row, got {:?}", tape.shape(scores))));
    }
    tape.softmax_rows(scores, mask)
}

/// Weights of one LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// Bidirectional LSTM; the two directions are concatenated to width `2h`.
pub fn bilstm<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, fwd: LstmWeights, bwd: LstmWeights) -> Result<SeqVar> {
    let f = tape.lstm(x.var, fwd.w_ih, fwd.w_hh, fwd.bias, &x.mask, false)?;
    let b = tape.lstm(x.var, bwd.w_ih, bwd.w_hh, bwd.bias, &x.mask, true)?;
    let y = tape.concat_cols(f, b)?;
    Ok(SeqVar { var: y, mask: x.mask.clone(), frame_rate_hz: x.frame_rate_hz })
}

/// Additive attention pooling: `e_t = wᵀ tanh(W_a f_t)`, `α = softmax(e)`
/// over valid frames, `u = Σ α_t f_t`. `w` is a `1×d` row; returns `1×d`.
pub fn attention_pool<F: Real>(tape: &mut Tape<'_, F>, f: &SeqVar, w_a: Var, w: Var) -> Result<Var> {
    if !f.has_valid() {
        return Err(Error::EmptyAttentionSupport);
    }
    let hidden = tape.matmul(f.var, w_a)?;
    let hidden = tape.tanh(hidden);
    let hidden_t = tape.transpose(hidden);
    let scores = tape.matmul(w, hidden_t)?;
    let alpha = masked_softmax(tape, scores, &f.mask)?;
    tape.matmul(alpha, f.var)
}

/// Frame-wise `[a_t; b_t]`; validity follows `a`.
pub fn concat_frames<F: Real>(tape: &mut Tape<'_, F>, a: &SeqVar, b: &SeqVar) -> Result<SeqVar> {
    if a.len() != b.len() {
        return Err(Error::dim("concat_frames", format!("{} vs {} frames", a.len(), b.len())));
    }
    let y = tape.concat_cols(a.var, b.var)?;
    let y = tape.mask_rows(y, &a.mask)?;
    Ok(SeqVar { var: y, mask: a.mask.clone(), frame_rate_hz: a.frame_rate_hz })
}
