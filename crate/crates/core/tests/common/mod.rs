//! Shared generators and the gradient-check suite used by several test
//! targets.

#![allow(dead_code)]

use fusehead::fusion::{
    self, Affine, AttnDirection, CrossAttnParams, Ear, FusionKind, FusionVariant, Prep, ProjectedPair, ReverseMode,
};
use fusehead::head::{self, AdapterParams, HeadConfig, OutputParams, Severity, TrunkParams};
use fusehead::model::{self, EarFeatures, Model, ModelConfig, UtteranceFeatures};
use fusehead::seqcore::gradcheck::rel_err;
use fusehead::seqcore::{grad_check, ops, GradInput, LstmWeights, MaskedSeq, SeqVar, Tape, Var};
use fusehead::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;
pub const CANARY_HZ: f64 = 12.5;
pub const WAVLM_HZ: f64 = 50.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Entries of magnitude in `[0.1, 1]`, away from the kinks of `relu`.
pub fn off_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random mask with at least one valid frame when `len > 0`.
pub fn mask(rng: &mut impl Rng, len: usize, p_valid: f64) -> Vec<bool> {
    let mut m: Vec<bool> = (0..len).map(|_| rng.gen_bool(p_valid)).collect();
    if len > 0 && !m.iter().any(|&v| v) {
        let i = rng.gen_range(0..len);
        m[i] = true;
    }
    m
}

pub fn seq_var(v: Var, mask: &[bool], rate: f64) -> SeqVar {
    SeqVar { var: v, mask: mask.to_vec(), frame_rate_hz: rate }
}

/// `Σ out ⊙ R` for a fixed pseudo-random `R` keyed by `seed`, so every
/// output entry gets a distinct weight.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let weights = matrix(&mut rng(seed ^ 0x5eed), r, c, 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.trials > 0
    }
}

fn run_trials<S>(op: &'static str, trials: usize, base_seed: u64, mut setup: S) -> OpCheck
where
    S: FnMut(&mut ChaCha8Rng, u64) -> Result<fusehead::seqcore::GradReport>,
{
    let mut check = OpCheck { op, trials, worst: 0.0, failures: Vec::new() };
    for trial in 0..trials as u64 {
        let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(trial);
        let mut r = rng(seed);
        match setup(&mut r, seed) {
            Ok(report) => {
                check.worst = check.worst.max(report.worst());
                if !report.passed() {
                    check.failures.push(format!("trial {trial}: {:?}", report.max_rel_err));
                }
            }
            Err(e) => check.failures.push(format!("trial {trial}: {e}")),
        }
    }
    check
}

fn affine_inputs(rng: &mut impl Rng, prefix: &str, d_in: usize, d_out: usize) -> [GradInput; 2] {
    [
        GradInput::param(format!("{prefix}.w"), matrix(rng, d_in, d_out, 0.8)),
        GradInput::param(format!("{prefix}.b"), matrix(rng, 1, d_out, 0.3)),
    ]
}

fn lstm_inputs(rng: &mut impl Rng, prefix: &str, d: usize, h: usize) -> [GradInput; 3] {
    [
        GradInput::param(format!("{prefix}.w_ih"), matrix(rng, d, 4 * h, 0.8)),
        GradInput::param(format!("{prefix}.w_hh"), matrix(rng, h, 4 * h, 0.8)),
        GradInput::param(format!("{prefix}.b"), matrix(rng, 1, 4 * h, 0.5)),
    ]
}

fn aff(v: &[Var], at: usize) -> Affine {
    Affine { w: v[at], b: v[at + 1] }
}

fn lstm_w(v: &[Var], at: usize) -> LstmWeights {
    LstmWeights { w_ih: v[at], w_hh: v[at + 1], bias: v[at + 2] }
}

/// Random projected canary/wavlm pair with a jittered 4:1 rate ratio.
fn pair_inputs(rng: &mut impl Rng, d: usize) -> (Vec<GradInput>, Vec<bool>, Vec<bool>) {
    let t_c: usize = rng.gen_range(1..5);
    let t_w = (4 * t_c + rng.gen_range(0..3)).saturating_sub(1).max(1);
    let mc = mask(rng, t_c, 0.8);
    let mw = mask(rng, t_w, 0.8);
    let inputs = vec![GradInput::param("canary", matrix(rng, t_c, d, 1.0)), GradInput::param("wavlm", matrix(rng, t_w, d, 1.0))];
    (inputs, mc, mw)
}

fn pair(v: &[Var], mc: &[bool], mw: &[bool]) -> ProjectedPair {
    ProjectedPair { canary: seq_var(v[0], mc, CANARY_HZ), wavlm: seq_var(v[1], mw, WAVLM_HZ), ear: Ear::L }
}

fn trunk_inputs(rng: &mut impl Rng, d: usize, h: usize, k: usize) -> Vec<GradInput> {
    let mut v = Vec::new();
    v.extend(affine_inputs(rng, "conv", k * d, d));
    v.extend(lstm_inputs(rng, "fwd", d, h));
    v.extend(lstm_inputs(rng, "bwd", d, h));
    v.extend(affine_inputs(rng, "proj", 2 * h, d));
    v.push(GradInput::param("w_a", matrix(rng, d, d, 0.8)));
    v.push(GradInput::param("w", matrix(rng, 1, d, 0.8)));
    v
}

fn trunk_params(v: &[Var], at: usize) -> TrunkParams {
    TrunkParams {
        conv: aff(v, at),
        fwd: lstm_w(v, at + 2),
        bwd: lstm_w(v, at + 5),
        proj: aff(v, at + 8),
        w_a: v[at + 10],
        w: v[at + 11],
    }
}

/// Finite-difference checks of every differentiable op over `trials`
/// random shapes, masks and values each.
pub fn gradient_suite(trials: usize) -> Vec<OpCheck> {
    let mut out = Vec::new();

    out.push(run_trials("matmul+add_row", trials, 1, |r, s| {
        let (n, a, b) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let inputs = [GradInput::param("x", matrix(r, n, a, 1.0)), GradInput::param("w", matrix(r, a, b, 1.0)), GradInput::param("b", matrix(r, 1, b, 1.0))];
        grad_check(|t, v| { let y = ops::affine(t, v[0], v[1], v[2])?; weighted_sum(t, y, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("add+sub+mul+scale", trials, 2, |r, s| {
        let (n, m) = (r.gen_range(1..4), r.gen_range(1..4));
        let c = r.gen_range(-2.0..2.0);
        let inputs = [GradInput::param("a", matrix(r, n, m, 1.0)), GradInput::param("b", matrix(r, n, m, 1.0))];
        grad_check(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.add(p, v[0])?;
                let q = t.sub(q, v[1])?;
                let q = t.scale(q, c);
                weighted_sum(t, q, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("tanh+sigmoid+relu", trials, 3, |r, s| {
        let (n, m) = (r.gen_range(1..4), r.gen_range(1..4));
        let inputs = [GradInput::param("x", off_zero(r, n, m))];
        grad_check(
            |t, v| {
                let a = t.tanh(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.relu(v[0]);
                let ab = t.mul(a, b)?;
                let y = t.add(ab, c)?;
                weighted_sum(t, y, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("transpose+concat_cols+select_row", trials, 4, |r, s| {
        let (n, m) = (r.gen_range(1..4), r.gen_range(1..4));
        let row = r.gen_range(0..n);
        let inputs = [GradInput::param("a", matrix(r, n, m, 1.0)), GradInput::param("b", matrix(r, m, n, 1.0))];
        grad_check(
            |t, v| {
                let bt = t.transpose(v[1]);
                let c = t.concat_cols(v[0], bt)?;
                let y = t.select_row(c, row)?;
                weighted_sum(t, y, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("mask_rows+time_mix", trials, 5, |r, s| {
        let (n, m) = (r.gen_range(1..6), r.gen_range(1..3));
        let mk = mask(r, n, 0.6);
        let target = r.gen_range(1..7);
        let inputs = [GradInput::param("x", matrix(r, n, m, 1.0))];
        grad_check(
            |t, v| {
                let y = t.mask_rows(v[0], &mk)?;
                let w = fusehead::seqcore::resample::adaptive_resize(&mk, target)?;
                let y = t.time_mix(y, w)?;
                weighted_sum(t, y, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("linear", trials, 6, |r, s| {
        let (n, a, b) = (r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..4));
        let mk = mask(r, n, 0.7);
        let mut inputs = vec![GradInput::param("x", matrix(r, n, a, 1.0))];
        inputs.extend(affine_inputs(r, "lin", a, b));
        grad_check(|t, v| { let y = ops::linear(t, &seq_var(v[0], &mk, CANARY_HZ), v[1], v[2])?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("conv1d", trials, 7, |r, s| {
        let (k, stride, a, b) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..3), r.gen_range(1..3));
        let n = k + r.gen_range(0..8);
        let mk = mask(r, n, 0.7);
        let mut inputs = vec![GradInput::param("x", matrix(r, n, a, 1.0))];
        inputs.extend(affine_inputs(r, "k", k * a, b));
        grad_check(|t, v| { let y = ops::conv1d(t, &seq_var(v[0], &mk, WAVLM_HZ), v[1], v[2], stride)?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("conv_same", trials, 8, |r, s| {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (n, d) = (r.gen_range(1..7), r.gen_range(1..3));
        let mk = mask(r, n, 0.7);
        let mut inputs = vec![GradInput::param("x", matrix(r, n, d, 1.0))];
        inputs.extend(affine_inputs(r, "k", k * d, d));
        grad_check(|t, v| { let y = ops::conv_same(t, &seq_var(v[0], &mk, WAVLM_HZ), v[1], v[2])?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("tconv1d", trials, 9, |r, s| {
        let (k, stride, a, b) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..3), r.gen_range(1..3));
        let n = r.gen_range(1..5);
        let mk = mask(r, n, 0.7);
        let mut inputs = vec![GradInput::param("x", matrix(r, n, a, 1.0))];
        inputs.push(GradInput::param("k.w", matrix(r, k * b, a, 0.8)));
        inputs.push(GradInput::param("k.b", matrix(r, 1, b, 0.3)));
        grad_check(|t, v| { let y = ops::tconv1d(t, &seq_var(v[0], &mk, CANARY_HZ), v[1], v[2], stride, k)?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("masked_avg_downsample", trials, 10, |r, s| {
        let (n, d, f) = (r.gen_range(1..12), r.gen_range(1..3), r.gen_range(1..6));
        let mk = mask(r, n, 0.6);
        let inputs = [GradInput::param("x", matrix(r, n, d, 1.0))];
        grad_check(|t, v| { let y = ops::masked_avg_downsample(t, &seq_var(v[0], &mk, WAVLM_HZ), f)?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("adaptive_resize", trials, 11, |r, s| {
        let (n, d, target) = (r.gen_range(1..12), r.gen_range(1..3), r.gen_range(1..12));
        let mk = mask(r, n, 0.6);
        let inputs = [GradInput::param("x", matrix(r, n, d, 1.0))];
        grad_check(|t, v| { let y = ops::adaptive_resize(t, &seq_var(v[0], &mk, WAVLM_HZ), target)?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("linear_interp_upsample", trials, 12, |r, s| {
        let (n, d) = (r.gen_range(1..6), r.gen_range(1..3));
        let target = n + r.gen_range(0..12);
        let mk = mask(r, n, 0.6);
        let inputs = [GradInput::param("x", matrix(r, n, d, 1.0))];
        grad_check(|t, v| { let y = ops::linear_interp_upsample(t, &seq_var(v[0], &mk, CANARY_HZ), target)?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("temporal_shift", trials, 13, |r, s| {
        let (n, d, delta) = (r.gen_range(1..8), r.gen_range(1..3), r.gen_range(-4..5));
        let mk = mask(r, n, 0.7);
        let inputs = [GradInput::param("x", matrix(r, n, d, 1.0))];
        grad_check(|t, v| { let y = ops::temporal_shift(t, &seq_var(v[0], &mk, CANARY_HZ), delta)?; weighted_sum(t, y.var, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("masked_softmax", trials, 14, |r, s| {
        let n = r.gen_range(1..8);
        let mk = mask(r, n, 0.6);
        let inputs = [GradInput::param("e", matrix(r, 1, n, 3.0))];
        grad_check(|t, v| { let a = ops::masked_softmax(t, v[0], &mk)?; weighted_sum(t, a, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("bilstm", trials, 15, |r, s| {
        let (n, d, h) = (r.gen_range(1..7), r.gen_range(1..4), r.gen_range(1..4));
        let mk = mask(r, n, 0.7);
        let mut inputs = vec![GradInput::param("x", matrix(r, n, d, 1.0))];
        inputs.extend(lstm_inputs(r, "fwd", d, h));
        inputs.extend(lstm_inputs(r, "bwd", d, h));
        grad_check(
            |t, v| {
                let y = ops::bilstm(t, &seq_var(v[0], &mk, CANARY_HZ), lstm_w(v, 1), lstm_w(v, 4))?;
                weighted_sum(t, y.var, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("attention_pool", trials, 16, |r, s| {
        let (n, d) = (r.gen_range(1..7), r.gen_range(1..4));
        let mk = mask(r, n, 0.7);
        let inputs = [GradInput::param("f", matrix(r, n, d, 1.0)), GradInput::param("w_a", matrix(r, d, d, 1.0)), GradInput::param("w", matrix(r, 1, d, 1.0))];
        grad_check(|t, v| { let u = ops::attention_pool(t, &seq_var(v[0], &mk, CANARY_HZ), v[1], v[2])?; weighted_sum(t, u, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("concat_frames", trials, 17, |r, s| {
        let (n, a, b) = (r.gen_range(1..6), r.gen_range(1..3), r.gen_range(1..3));
        let (ma, mb) = (mask(r, n, 0.7), mask(r, n, 0.7));
        let inputs = [GradInput::param("a", matrix(r, n, a, 1.0)), GradInput::param("b", matrix(r, n, b, 1.0))];
        grad_check(
            |t, v| { let y = ops::concat_frames(t, &seq_var(v[0], &ma, CANARY_HZ), &seq_var(v[1], &mb, CANARY_HZ))?; weighted_sum(t, y.var, s) },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("frame_align_fuse", trials, 18, |r, s| {
        let d = r.gen_range(1..3);
        let (mut inputs, mc, mw) = pair_inputs(r, d);
        let prep = if r.gen_bool(0.5) { Prep::Conv } else { Prep::Avg };
        let shift = r.gen_range(-2..3);
        inputs.extend(affine_inputs(r, "prep", fusion::RATE_FACTOR * d, d));
        inputs.extend(affine_inputs(r, "fuse", 2 * d, d));
        grad_check(
            |t, v| {
                let conv = (prep == Prep::Conv).then(|| aff(v, 2));
                let y = fusion::frame_align_fuse(t, &pair(v, &mc, &mw), prep, shift, conv, aff(v, 4))?;
                weighted_sum(t, y.seq.var, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("cross_attn_fuse", trials, 19, |r, s| {
        let d = r.gen_range(1..4);
        let (mut inputs, mc, mw) = pair_inputs(r, d);
        for p in ["q", "k", "v"] {
            inputs.extend(affine_inputs(r, p, d, d));
        }
        inputs.extend(affine_inputs(r, "out", 2 * d, d));
        let dir = if r.gen_bool(0.5) { AttnDirection::CanaryQueriesWavlm } else { AttnDirection::WavlmQueriesCanary };
        grad_check(
            |t, v| {
                let params = CrossAttnParams { q: aff(v, 2), k: aff(v, 4), v: aff(v, 6), out: aff(v, 8) };
                let y = fusion::cross_attn_fuse(t, &pair(v, &mc, &mw), dir, params)?;
                weighted_sum(t, y.var, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("reverse_align_fuse", trials, 20, |r, s| {
        let d = r.gen_range(1..3);
        let (mut inputs, mc, mw) = pair_inputs(r, d);
        let mode = if r.gen_bool(0.5) { ReverseMode::Tconv } else { ReverseMode::Linear };
        inputs.extend(affine_inputs(r, "rev", fusion::RATE_FACTOR * d, d));
        inputs.extend(affine_inputs(r, "fuse", 2 * d, d));
        grad_check(
            |t, v| {
                let tconv = (mode == ReverseMode::Tconv).then(|| aff(v, 2));
                let y = fusion::reverse_align_fuse(t, &pair(v, &mc, &mw), mode, tconv, aff(v, 4))?;
                weighted_sum(t, y.var, s)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("ear_merge+pool_late", trials, 21, |r, s| {
        let d = r.gen_range(1..4);
        let (nl, nr) = (r.gen_range(1..6), r.gen_range(1..6));
        let (ml, mr) = (mask(r, nl, 0.7), mask(r, nr, 0.7));
        let mut inputs = vec![GradInput::param("hl", matrix(r, nl, d, 1.0)), GradInput::param("hr", matrix(r, nr, d, 1.0))];
        inputs.extend(affine_inputs(r, "merge", 2 * d, d));
        inputs.push(GradInput::param("zl", matrix(r, 1, d, 1.0)));
        inputs.push(GradInput::param("zr", matrix(r, 1, d, 1.0)));
        inputs.extend(affine_inputs(r, "late", 2 * d, d));
        grad_check(
            |t, v| {
                let seq = fusion::ear_merge_sequence(t, &seq_var(v[0], &ml, CANARY_HZ), &seq_var(v[1], &mr, CANARY_HZ), aff(v, 2))?;
                let pooled = fusion::ear_merge_pooled(t, v[4], v[5], aff(v, 2))?;
                let late = fusion::pool_late_fuse(t, v[4], v[5], aff(v, 6))?;
                let a = weighted_sum(t, seq.var, s)?;
                let b = weighted_sum(t, pooled, s + 1)?;
                let c = weighted_sum(t, late, s + 2)?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out.push(run_trials("trunk", trials, 22, |r, s| {
        let d = 2 * r.gen_range(1..3);
        let n = r.gen_range(1..6);
        let mk = mask(r, n, 0.7);
        let mut inputs = vec![GradInput::param("x", matrix(r, n, d, 1.0))];
        inputs.extend(trunk_inputs(r, d, d / 2, 3));
        grad_check(|t, v| { let u = head::trunk(t, &seq_var(v[0], &mk, CANARY_HZ), &trunk_params(v, 1))?; weighted_sum(t, u, s) }, &inputs, OP_TOL)
    }));
    out.push(run_trials("severity_adapt+predict_logit", trials, 23, |r, s| {
        let (d, e, rank, m) = (r.gen_range(1..4), r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4));
        let sev = Severity::ALL[r.gen_range(0..3)];
        let mut inputs = vec![GradInput::param("u", matrix(r, 1, d, 1.0)), GradInput::param("embed", matrix(r, 3, e, 1.0))];
        inputs.extend(affine_inputs(r, "down", d + e, rank));
        inputs.push(GradInput::param("up", matrix(r, rank, d, 1.0)));
        inputs.extend(affine_inputs(r, "l1", d, m));
        inputs.extend(affine_inputs(r, "l2", m, d));
        inputs.extend(affine_inputs(r, "out", d, 1));
        grad_check(
            |t, v| {
                let adapter = AdapterParams { embed: v[1], down: aff(v, 2), up: v[4] };
                let u = head::severity_adapt(t, v[0], sev, &adapter)?;
                let out = OutputParams { l1: aff(v, 5), l2: aff(v, 7), out: aff(v, 9) };
                let logit = head::predict_logit(t, u, &out)?;
                model::item_loss(t, logit, s as f64 % 100.0)
            },
            &inputs,
            OP_TOL,
        )
    }));
    out
}

/// Small model configuration for end-to-end checks.
pub fn tiny_config(fusion: FusionVariant, input_dim: usize, d: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(fusion);
    cfg.input_dim = input_dim;
    cfg.head = HeadConfig { severity_embed_dim: 3, adapter_rank: 3, ..HeadConfig::with_d(d) };
    cfg
}

pub fn all_variants() -> Vec<FusionVariant> {
    let mut v: Vec<FusionVariant> = [
        FusionKind::CanaryOnly,
        FusionKind::WavlmOnly,
        FusionKind::PoolLate,
        FusionKind::CrossAttn,
        FusionKind::ReverseLinear,
        FusionKind::ReverseTconv,
        FusionKind::ReverseCrossAttn,
    ]
    .into_iter()
    .map(FusionVariant::new)
    .collect();
    v.push(FusionVariant::frame_aligned(Prep::Avg));
    v.push(FusionVariant::frame_aligned(Prep::Conv));
    v.push(FusionVariant { shift_steps: 2, ..FusionVariant::frame_aligned(Prep::Conv) });
    v
}

/// Random binaural utterance with a jittered 4:1 rate ratio and a few
/// interior invalid frames.
pub fn utterance(rng: &mut ChaCha8Rng, dim: usize) -> UtteranceFeatures<f64> {
    let t_c: usize = rng.gen_range(2..9);
    let seq = |rng: &mut ChaCha8Rng, t: usize, rate: f64| {
        let mut m: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.9)).collect();
        m[0] = true;
        MaskedSeq::new(matrix(rng, t, dim, 1.0), m, rate).expect("valid sequence")
    };
    let ear = |rng: &mut ChaCha8Rng| {
        let t_w = 4 * t_c + rng.gen_range(0..5) - 2;
        EarFeatures { canary: seq(rng, t_c, CANARY_HZ), wavlm: seq(rng, t_w, WAVLM_HZ) }
    };
    UtteranceFeatures { ears: [ear(rng), ear(rng)] }
}

pub fn severity(rng: &mut impl Rng) -> Severity {
    Severity::ALL[rng.gen_range(0..3)]
}

pub fn f64_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    Model::init(cfg, seed, 0).expect("valid config").cast()
}

/// Worst relative error between `loss_and_grads` on a batch (mean loss) and
/// central differences over every parameter scalar.
pub fn end_to_end_grad_check(model: &Model<f64>, batch: &[(UtteranceFeatures<f64>, Severity, f64)]) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let n = batch.len() as f64;
    let batch_loss = |m: &Model<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (x, s, y) in batch {
            total += m.loss_and_grads(x, *s, *y)?.0;
        }
        Ok(total / n)
    };
    let mut analytic: std::collections::BTreeMap<String, Array2<f64>> = Default::default();
    for (x, s, y) in batch {
        for (name, g) in model.loss_and_grads(x, *s, *y)?.1 {
            let slot = analytic.entry(name).or_insert_with(|| Array2::zeros(g.dim()));
            slot.scaled_add(1.0 / n, &g);
        }
    }
    let mut probe = model.clone();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let dim = model.params.get(&name)?.value().dim();
        let a = analytic.get(&name).cloned().unwrap_or_else(|| Array2::zeros(dim));
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = model.params.get(&name)?.value()[(i, j)];
                probe.params.get_mut(&name)?.value_mut()[(i, j)] = orig + STEP;
                let up = batch_loss(&probe)?;
                probe.params.get_mut(&name)?.value_mut()[(i, j)] = orig - STEP;
                let down = batch_loss(&probe)?;
                probe.params.get_mut(&name)?.value_mut()[(i, j)] = orig;
                worst = worst.max(rel_err(a[(i, j)], (up - down) / (2.0 * STEP)));
            }
        }
    }
    Ok(worst)
}
