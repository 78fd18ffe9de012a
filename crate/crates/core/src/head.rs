//! The shared predictor head: residual temporal convolution, BiLSTM,
//! attention pooling, late severity adapter, residual MLP and the bounded
//! scalar output `ŷ = 100·σ(r)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Affine;
use crate::seqcore::ops::{self, LstmWeights};
use crate::seqcore::{tape, Real, SeqVar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    ModeratelySevere,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::ModeratelySevere];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::ModeratelySevere => "moderately_severe",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Severity::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::data(format!("unknown severity {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub d: usize,
    pub lstm_hidden: usize,
    pub mlp_width: usize,
    pub severity_embed_dim: usize,
    pub adapter_rank: usize,
    pub conv_kernel: usize,
}

impl HeadConfig {
    pub const SINGLE_D: usize = 256;
    pub const DUAL_D: usize = 192;

    pub fn with_d(d: usize) -> Self {
        Self { d, lstm_hidden: d / 2, mlp_width: d, severity_embed_dim: 16, adapter_rank: 16, conv_kernel: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Config(format!("hidden dimension must be even and positive, got {}", self.d)));
        }
        if 2 * self.lstm_hidden != self.d {
            return Err(Error::Config(format!(
                "lstm_hidden {} must be d/2 so the BiLSTM output matches d = {}",
                self.lstm_hidden, self.d
            )));
        }
        let extents = [self.mlp_width, self.severity_embed_dim, self.adapter_rank, self.conv_kernel];
        if extents.contains(&0) {
            return Err(Error::Config("head extents must all be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::with_d(Self::DUAL_D)
    }
}

/// Weights of one residual-conv / BiLSTM / attention-pool trunk.
#[derive(Debug, Clone, Copy)]
pub struct TrunkParams {
    /// `(k·d)×d` kernel and bias of the residual convolution.
    pub conv: Affine,
    pub fwd: LstmWeights,
    pub bwd: LstmWeights,
    /// `2h→d` map applied to the BiLSTM output.
    pub proj: Affine,
    pub w_a: Var,
    /// `1×d` scoring row.
    pub w: Var,
}

/// Collapses a width-`d` sequence to a `1×d` utterance vector.
pub fn trunk<F: Real>(tape: &mut Tape<'_, F>, x: &SeqVar, p: &TrunkParams) -> Result<Var> {
    if !x.has_valid() {
        return Err(Error::EmptyUtterance);
    }
    let c = ops::conv_same(tape, x, p.conv.w, p.conv.b)?;
    let res = tape.add(x.var, c.var)?;
    let res = SeqVar { var: res, mask: x.mask.clone(), frame_rate_hz: x.frame_rate_hz };
    let rec = ops::bilstm(tape, &res, p.fwd, p.bwd)?;
    let rec = p.proj.apply_seq(tape, &rec)?;
    let y = tape.add(rec.var, res.var)?;
    let y = SeqVar { var: y, mask: x.mask.clone(), frame_rate_hz: x.frame_rate_hz };
    ops::attention_pool(tape, &y, p.w_a, p.w)
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterParams {
    /// `3×e` severity embedding table.
    pub embed: Var,
    /// `(d+e)→r` down-projection with bias.
    pub down: Affine,
    /// `r×d` up-projection without bias.
    pub up: Var,
}

/// `u' = u + relu([u; e_s]·A + a)·B`, a rank-`r` severity-dependent update.
pub fn severity_adapt<F: Real>(tape: &mut Tape<'_, F>, u: Var, s: Severity, p: &AdapterParams) -> Result<Var> {
    let e = tape.select_row(p.embed, s.index())?;
    let joined = tape.concat_cols(u, e)?;
    let h = p.down.apply(tape, joined)?;
    let h = tape.relu(h);
    let delta = tape.matmul(h, p.up)?;
    tape.add(u, delta)
}

#[derive(Debug, Clone, Copy)]
pub struct OutputParams {
    pub l1: Affine,
    pub l2: Affine,
    /// `d→1` logit layer.
    pub out: Affine,
}

/// Residual MLP block `h = u + relu(u·W₁ + b₁)·W₂ + b₂` followed by the
/// logit `r = h·w_o + b_o`. Returns `r` as a `1×1` node.
pub fn predict_logit<F: Real>(tape: &mut Tape<'_, F>, u: Var, p: &OutputParams) -> Result<Var> {
    let h = p.l1.apply(tape, u)?;
    let h = tape.relu(h);
    let h = p.l2.apply(tape, h)?;
    let h = tape.add(u, h)?;
    p.out.apply(tape, h)
}

/// Maps a logit to the bounded score `100·σ(r)`.
pub fn score<F: Real>(r: F) -> F {
    F::from_f64(100.0).expect("constant") * tape::sigmoid(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::MaskedSeq;
    use ndarray::{array, s, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn aff(tape: &mut Tape<'_, f64>, w: Array2<f64>, b: Array2<f64>) -> Affine {
        Affine { w: tape.constant(w), b: tape.constant(b) }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn severity_strings() {
        for s in Severity::ALL {
            assert_eq!(s.as_str().parse::<Severity>().unwrap(), s);
        }
        assert!(matches!("severe".parse::<Severity>(), Err(Error::Data { .. })));
    }

    #[test]
    fn head_config_validation() {
        assert!(HeadConfig::with_d(192).validate().is_ok());
        assert!(HeadConfig::with_d(7).validate().is_err());
        let mut c = HeadConfig::with_d(8);
        c.adapter_rank = 0;
        assert!(c.validate().is_err());
    }

    /// Zero conv and LSTM matrices with a nonzero LSTM bias make the
    /// recurrence a per-unit scalar map; `w = 0` makes pooling a masked mean.
    #[test]
    fn trunk_composition_oracle() {
        let (d, h) = (4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_mat(&mut rng, 5, d);
        let mask = vec![true, false, true, true, false];
        let bias_f = rand_mat(&mut rng, 1, 4 * h);
        let bias_b = rand_mat(&mut rng, 1, 4 * h);
        let proj_w = rand_mat(&mut rng, 2 * h, d);
        let proj_b = rand_mat(&mut rng, 1, d);

        let mut tape = Tape::<f64>::new();
        let xs = tape.seq(&MaskedSeq::new(x.clone(), mask.clone(), 12.5).unwrap());
        let dir = |tape: &mut Tape<'_, f64>, b: &Array2<f64>| LstmWeights {
            w_ih: tape.constant(Array2::zeros((d, 4 * h))),
            w_hh: tape.constant(Array2::zeros((h, 4 * h))),
            bias: tape.constant(b.clone()),
        };
        let p = TrunkParams {
            conv: aff(&mut tape, Array2::zeros((3 * d, d)), Array2::zeros((1, d))),
            fwd: dir(&mut tape, &bias_f),
            bwd: dir(&mut tape, &bias_b),
            proj: aff(&mut tape, proj_w.clone(), proj_b.clone()),
            w_a: tape.constant(rand_mat(&mut rng, d, d)),
            w: tape.constant(Array2::zeros((1, d))),
        };
        let u = trunk(&mut tape, &xs, &p).unwrap();

        // Scalar recurrence per unit over the valid frames, in either order.
        let run = |b: &Array2<f64>, order: &[usize]| -> Vec<Array1<f64>> {
            let mut out = vec![Array1::zeros(h); 5];
            let mut c = vec![0.0; h];
            for &t in order {
                for k in 0..h {
                    let (i, f, g, o) = (sig(b[[0, k]]), sig(b[[0, h + k]]), b[[0, 2 * h + k]].tanh(), sig(b[[0, 3 * h + k]]));
                    c[k] = f * c[k] + i * g;
                    out[t][k] = o * c[k].tanh();
                }
            }
            out
        };
        let fw = run(&bias_f, &[0, 2, 3]);
        let bw = run(&bias_b, &[3, 2, 0]);
        let mut mean = Array1::<f64>::zeros(d);
        for &t in &[0usize, 2, 3] {
            let hcat: Vec<f64> = fw[t].iter().chain(bw[t].iter()).copied().collect();
            for j in 0..d {
                let y = x[[t, j]] + proj_b[[0, j]] + (0..2 * h).map(|i| hcat[i] * proj_w[[i, j]]).sum::<f64>();
                mean[j] += y / 3.0;
            }
        }
        for j in 0..d {
            assert!((tape.value(u)[[0, j]] - mean[j]).abs() < 1e-12);
        }
    }

    fn random_trunk(tape: &mut Tape<'_, f64>, rng: &mut ChaCha8Rng, d: usize) -> TrunkParams {
        let h = d / 2;
        let mut lstm = |tape: &mut Tape<'_, f64>| LstmWeights {
            w_ih: tape.constant(rand_mat(rng, d, 4 * h)),
            w_hh: tape.constant(rand_mat(rng, h, 4 * h)),
            bias: tape.constant(rand_mat(rng, 1, 4 * h)),
        };
        let fwd = lstm(tape);
        let bwd = lstm(tape);
        TrunkParams {
            conv: aff(tape, rand_mat(rng, 3 * d, d), rand_mat(rng, 1, d)),
            fwd,
            bwd,
            proj: aff(tape, rand_mat(rng, d, d), rand_mat(rng, 1, d)),
            w_a: tape.constant(rand_mat(rng, d, d)),
            w: tape.constant(rand_mat(rng, 1, d)),
        }
    }

    #[test]
    fn trunk_single_frame_and_padding() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::<f64>::new();
        let p = random_trunk(&mut tape, &mut rng, d);
        let x = rand_mat(&mut rng, 6, d);
        let base = MaskedSeq::new(x.clone(), vec![true, true, false, true, true, true], 12.5).unwrap();
        let xs = tape.seq(&base);
        let u0 = trunk(&mut tape, &xs, &p).unwrap();
        let u0 = tape.value(u0).clone();
        let padded = tape.seq(&base.padded(3));
        let u1 = trunk(&mut tape, &padded, &p).unwrap();
        let u1 = tape.value(u1).clone();
        assert_eq!(u0, u1);

        // a lone valid frame: values elsewhere are irrelevant
        let mut other = x.clone();
        other.slice_mut(s![1.., ..]).fill(9.0);
        let m = vec![true, false, false, false, false, false];
        let a = tape.seq(&MaskedSeq::new(x, m.clone(), 12.5).unwrap());
        let b = tape.seq(&MaskedSeq::new(other, m, 12.5).unwrap());
        let ua = trunk(&mut tape, &a, &p).unwrap();
        let ua = tape.value(ua).clone();
        let ub = trunk(&mut tape, &b, &p).unwrap();
        let ub = tape.value(ub).clone();
        assert_eq!(ua, ub);

        let dead = tape.seq(&MaskedSeq::new(Array2::ones((2, d)), vec![false, false], 12.5).unwrap());
        assert!(matches!(trunk(&mut tape, &dead, &p), Err(Error::EmptyUtterance)));
    }

    #[test]
    fn adapter_disabled_and_symmetric() {
        let (d, e, r) = (4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::<f64>::new();
        let uval = rand_mat(&mut rng, 1, d);
        let u = tape.constant(uval.clone());
        let p = AdapterParams {
            embed: tape.constant(rand_mat(&mut rng, 3, e)),
            down: aff(&mut tape, rand_mat(&mut rng, d + e, r), rand_mat(&mut rng, 1, r)),
            up: tape.constant(Array2::zeros((r, d))),
        };
        for s in Severity::ALL {
            let out = severity_adapt(&mut tape, u, s, &p).unwrap();
            assert_eq!(tape.value(out), &uval);
        }
        let row = rand_mat(&mut rng, 1, e);
        let table = ndarray::concatenate![ndarray::Axis(0), row, row, row];
        let p = AdapterParams { embed: tape.constant(table), up: tape.constant(rand_mat(&mut rng, r, d)), ..p };
        let outs: Vec<Array2<f64>> =
            Severity::ALL.iter().map(|&s| {
                let v = severity_adapt(&mut tape, u, s, &p).unwrap();
                tape.value(v).clone()
            }).collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn predict_bounds() {
        let d = 3;
        let mut tape = Tape::<f64>::new();
        let p = OutputParams {
            l1: aff(&mut tape, Array2::zeros((d, d)), Array2::zeros((1, d))),
            l2: aff(&mut tape, Array2::zeros((d, d)), Array2::zeros((1, d))),
            out: aff(&mut tape, Array2::zeros((d, 1)), array![[0.0]]),
        };
        let u = tape.constant(array![[1.0, 2.0, 3.0]]);
        let r = predict_logit(&mut tape, u, &p).unwrap();
        assert_eq!(score(tape.scalar(r)), 50.0);
        let mut last = 0.0;
        for r in [-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0] {
            let y = score(r);
            assert!((0.0..=100.0).contains(&y));
            assert!(y >= last);
            last = y;
        }
        assert!(score(30.0f64) < 100.0 && score(-30.0f64) > 0.0);
    }
}
