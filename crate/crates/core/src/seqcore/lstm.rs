//! Single-direction LSTM as one fused tape operation.
//!
//! Gate layout in the `4h` axis is `[input, forget, cell, output]`. Frames with
//! a false mask entry are skipped: the recurrent state is carried over
//! unchanged and the output row stays zero. Running in reverse visits the
//! valid frames from last to first.

use ndarray::{Array2, Axis};

use super::tape::{sigmoid, Var};
use super::Real;
use crate::error::{Error, Result};

pub(crate) struct LstmCache<F: Real> {
    pub(crate) inputs: [Var; 4],
    order: Vec<usize>,
    hidden: usize,
    gates: Array2<F>,
    cell: Array2<F>,
    cell_prev: Array2<F>,
    hidden_prev: Array2<F>,
}

pub(crate) struct LstmGrads<F: Real> {
    pub x: Array2<F>,
    pub w_ih: Array2<F>,
    pub w_hh: Array2<F>,
    pub bias: Array2<F>,
}

pub(crate) fn forward<F: Real>(
    x: &Array2<F>,
    w_ih: &Array2<F>,
    w_hh: &Array2<F>,
    bias: &Array2<F>,
    mask: &[bool],
    reverse: bool,
    inputs: [Var; 4],
) -> Result<(Array2<F>, LstmCache<F>)> {
    let (t_len, d_in) = x.dim();
    let h = w_hh.nrows();
    if w_ih.dim() != (d_in, 4 * h) || w_hh.dim() != (h, 4 * h) || bias.dim() != (1, 4 * h) {
        return Err(Error::dim(
            "bilstm",
            format!("x {:?}, w_ih {:?}, w_hh {:?}, bias {:?}", x.dim(), w_ih.dim(), w_hh.dim(), bias.dim()),
        ));
    }
    if mask.len() != t_len {
        return Err(Error::dim("bilstm", format!("{t_len} frames, mask {}", mask.len())));
    }

    let mut order: Vec<usize> = (0..t_len).filter(|&t| mask[t]).collect();
    if reverse {
        order.reverse();
    }

    let pre = x.dot(w_ih) + bias;
    let w_hh = w_hh.as_standard_layout();
    let w = w_hh.as_slice().expect("standard layout");
    let g4 = 4 * h;
    let mut gates = Array2::zeros((t_len, g4));
    let mut cell = Array2::zeros((t_len, h));
    let mut cell_prev = Array2::zeros((t_len, h));
    let mut hidden_prev = Array2::zeros((t_len, h));
    let mut out = Array2::zeros((t_len, h));

    let zero = F::zero();
    let mut a = vec![zero; g4];
    let mut h_state = vec![zero; h];
    let mut c_state = vec![zero; h];
    for &t in &order {
        a.iter_mut().zip(pre.row(t)).for_each(|(a, &p)| *a = p);
        for (k, &hk) in h_state.iter().enumerate() {
            a.iter_mut().zip(&w[k * g4..(k + 1) * g4]).for_each(|(a, &wv)| *a += hk * wv);
        }
        for k in 0..h {
            let (i, f) = (sigmoid(a[k]), sigmoid(a[h + k]));
            let (g, o) = (a[2 * h + k].tanh(), sigmoid(a[3 * h + k]));
            let c_new = f * c_state[k] + i * g;
            let h_new = o * c_new.tanh();
            gates[[t, k]] = i;
            gates[[t, h + k]] = f;
            gates[[t, 2 * h + k]] = g;
            gates[[t, 3 * h + k]] = o;
            cell_prev[[t, k]] = c_state[k];
            hidden_prev[[t, k]] = h_state[k];
            cell[[t, k]] = c_new;
            out[[t, k]] = h_new;
            c_state[k] = c_new;
            h_state[k] = h_new;
        }
    }

    let cache = LstmCache { inputs, order, hidden: h, gates, cell, cell_prev, hidden_prev };
    Ok((out, cache))
}

/// Backpropagation through time for one direction.
pub(crate) fn backward<F: Real>(
    cache: &LstmCache<F>,
    grad_out: &Array2<F>,
    x: &Array2<F>,
    w_ih: &Array2<F>,
    w_hh: &Array2<F>,
) -> LstmGrads<F> {
    let h = cache.hidden;
    let t_len = x.nrows();
    let one = F::one();
    let g4 = 4 * h;
    let w_hh_std = w_hh.as_standard_layout();
    let w = w_hh_std.as_slice().expect("standard layout");
    let mut d_pre = Array2::<F>::zeros((t_len, g4));
    let mut dh_next = vec![F::zero(); h];
    let mut dc_next = vec![F::zero(); h];

    for &t in cache.order.iter().rev() {
        let gates = cache.gates.row(t);
        let mut row = d_pre.row_mut(t);
        for k in 0..h {
            let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let tc = cache.cell[[t, k]].tanh();
            let dh = grad_out[[t, k]] + dh_next[k];
            let dc = dc_next[k] + dh * o * (one - tc * tc);
            row[k] = dc * g * i * (one - i);
            row[h + k] = dc * cache.cell_prev[[t, k]] * f * (one - f);
            row[2 * h + k] = dc * i * (one - g * g);
            row[3 * h + k] = dh * tc * o * (one - o);
            dc_next[k] = dc * f;
        }
        for (k, dh) in dh_next.iter_mut().enumerate() {
            *dh = w[k * g4..(k + 1) * g4].iter().zip(row.iter()).fold(F::zero(), |acc, (&wv, &d)| acc + wv * d);
        }
    }

    LstmGrads {
        x: d_pre.dot(&w_ih.t()),
        w_ih: x.t().dot(&d_pre),
        w_hh: cache.hidden_prev.t().dot(&d_pre),
        bias: d_pre.sum_axis(Axis(0)).insert_axis(Axis(0)),
    }
}
