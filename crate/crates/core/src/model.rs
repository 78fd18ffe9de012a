//! Full predictor: parameter layout, initialization, forward pass for every
//! fusion variant, and checkpoint files.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::cache::crc64;
use crate::error::{Error, Result};
use crate::fusion::{self, Affine, AttnDirection, CrossAttnParams, Ear, FusionKind, FusionVariant, Prep, ReverseMode};
use crate::head::{self, AdapterParams, HeadConfig, OutputParams, Severity, TrunkParams};
use crate::seqcore::ops::LstmWeights;
use crate::seqcore::tensor::matrix_dims;
use crate::seqcore::{Binder, GradMap, MaskedSeq, ParamStore, Real, SeqVar, Tape, Tensor, Var};

/// Width of the cached encoder frames.
pub const ENCODER_DIM: usize = 1024;

/// Divides labels into the unit interval for the loss.
pub const LABEL_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub fusion: FusionVariant,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Default sizes: `d = 256` for single-backbone variants, `d = 192`
    /// for dual-backbone ones, 1024-wide inputs.
    pub fn new(fusion: FusionVariant) -> Self {
        let d = if fusion.kind.is_dual() { HeadConfig::DUAL_D } else { HeadConfig::SINGLE_D };
        Self { input_dim: ENCODER_DIM, fusion, head: HeadConfig::with_d(d) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        self.fusion.validate()?;
        self.head.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// `U(−1/√fan_in, 1/√fan_in)`.
    Fan(usize),
    /// Zeros with the forget-gate slice `[h, 2h)` set to one.
    LstmBias(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: impl Into<String>, shape: &[usize], init: Init) {
    out.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
}

fn affine_spec(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    spec(out, format!("{prefix}.w"), &[d_in, d_out], Init::Fan(d_in));
    spec(out, format!("{prefix}.b"), &[d_out], Init::Zeros);
}

fn trunk_prefixes(kind: FusionKind) -> &'static [&'static str] {
    if kind == FusionKind::PoolLate {
        &["trunk_c", "trunk_w"]
    } else {
        &["trunk"]
    }
}

/// Every trainable tensor of the configured model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let HeadConfig { d, lstm_hidden: h, mlp_width: m, severity_embed_dim: e, adapter_rank: r, conv_kernel: k } = cfg.head;
    let kind = cfg.fusion.kind;
    let mut out = Vec::new();
    if kind != FusionKind::WavlmOnly {
        affine_spec(&mut out, "proj_c", cfg.input_dim, d);
    }
    if kind != FusionKind::CanaryOnly {
        affine_spec(&mut out, "proj_w", cfg.input_dim, d);
    }
    match kind {
        FusionKind::CanaryOnly | FusionKind::WavlmOnly => {}
        FusionKind::PoolLate => affine_spec(&mut out, "late", 2 * d, d),
        FusionKind::FrameAligned => {
            if cfg.fusion.prep == Prep::Conv {
                spec(&mut out, "prep.w", &[fusion::RATE_FACTOR, d, d], Init::Fan(fusion::RATE_FACTOR * d));
                spec(&mut out, "prep.b", &[d], Init::Zeros);
            }
            affine_spec(&mut out, "fuse", 2 * d, d);
        }
        FusionKind::CrossAttn | FusionKind::ReverseCrossAttn => {
            for p in ["xattn.q", "xattn.k", "xattn.v"] {
                affine_spec(&mut out, p, d, d);
            }
            affine_spec(&mut out, "xattn.out", 2 * d, d);
        }
        FusionKind::ReverseLinear => affine_spec(&mut out, "fuse", 2 * d, d),
        FusionKind::ReverseTconv => {
            spec(&mut out, "rev.w", &[fusion::RATE_FACTOR, d, d], Init::Fan(d));
            spec(&mut out, "rev.b", &[d], Init::Zeros);
            affine_spec(&mut out, "fuse", 2 * d, d);
        }
    }
    affine_spec(&mut out, "ear_merge", 2 * d, d);
    for p in trunk_prefixes(kind) {
        spec(&mut out, format!("{p}.conv.w"), &[k, d, d], Init::Fan(k * d));
        spec(&mut out, format!("{p}.conv.b"), &[d], Init::Zeros);
        for dir in ["lstm_f", "lstm_b"] {
            spec(&mut out, format!("{p}.{dir}.w_ih"), &[d, 4 * h], Init::Fan(d));
            spec(&mut out, format!("{p}.{dir}.w_hh"), &[h, 4 * h], Init::Fan(h));
            spec(&mut out, format!("{p}.{dir}.b"), &[4 * h], Init::LstmBias(h));
        }
        affine_spec(&mut out, &format!("{p}.proj"), 2 * h, d);
        spec(&mut out, format!("{p}.pool.w_a"), &[d, d], Init::Fan(d));
        spec(&mut out, format!("{p}.pool.w"), &[d], Init::Fan(d));
    }
    spec(&mut out, "severity.embed", &[Severity::ALL.len(), e], Init::Fan(e));
    affine_spec(&mut out, "severity.down", d + e, r);
    spec(&mut out, "severity.up", &[r, d], Init::Fan(r));
    affine_spec(&mut out, "mlp.l1", d, m);
    affine_spec(&mut out, "mlp.l2", m, d);
    affine_spec(&mut out, "out", d, 1);
    out
}

/// Trainable scalar counts grouped by block (the name up to the first dot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub total: usize,
    pub blocks: BTreeMap<String, usize>,
}

pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let mut blocks = BTreeMap::new();
    let mut total = 0;
    for s in param_specs(cfg) {
        let n: usize = s.shape.iter().product();
        let block = s.name.split('.').next().unwrap_or(&s.name).to_string();
        *blocks.entry(block).or_insert(0) += n;
        total += n;
    }
    ParamBreakdown { total, blocks }
}

fn init_tensor<R: Rng>(s: &ParamSpec, rng: &mut R) -> Tensor<f32> {
    let dims = matrix_dims(&s.shape);
    let value = match s.init {
        Init::Zeros => Array2::zeros(dims),
        Init::Fan(fan) => {
            let bound = 1.0 / (fan.max(1) as f32).sqrt();
            Array2::from_shape_simple_fn(dims, || rng.gen_range(-bound..=bound))
        }
        Init::LstmBias(h) => {
            let mut b = Array2::zeros(dims);
            b.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
            b
        }
    };
    Tensor::from_matrix(&s.shape, value).expect("spec shapes are consistent")
}

/// Both encoder streams of one ear.
#[derive(Debug, Clone, PartialEq)]
pub struct EarFeatures<F: Real = f32> {
    pub canary: MaskedSeq<F>,
    pub wavlm: MaskedSeq<F>,
}

/// Model input for one utterance: left and right ear, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures<F: Real = f32> {
    pub ears: [EarFeatures<F>; 2],
}

impl<F: Real> UtteranceFeatures<F> {
    pub fn ear(&self, ear: Ear) -> &EarFeatures<F> {
        &self.ears[ear as usize]
    }

    pub fn cast<G: Real>(&self) -> UtteranceFeatures<G> {
        let c = |e: &EarFeatures<F>| EarFeatures { canary: e.canary.cast(), wavlm: e.wavlm.cast() };
        UtteranceFeatures { ears: [c(&self.ears[0]), c(&self.ears[1])] }
    }

    /// Appends `pad[i]` invalid frames to stream `i` (L-canary, L-wavlm,
    /// R-canary, R-wavlm).
    pub fn padded(&self, pad: [usize; 4]) -> Self {
        let p = |e: &EarFeatures<F>, a: usize, b: usize| EarFeatures { canary: e.canary.padded(a), wavlm: e.wavlm.padded(b) };
        UtteranceFeatures { ears: [p(&self.ears[0], pad[0], pad[1]), p(&self.ears[1], pad[2], pad[3])] }
    }
}

/// Looks up parameter handles by name while building a forward pass.
struct Params<'b, 'p, F: Real> {
    binder: &'b mut Binder<'p, F>,
}

impl<'p, F: Real> Params<'_, 'p, F> {
    fn var(&mut self, tape: &mut Tape<'p, F>, name: &str) -> Result<Var> {
        self.binder.get(tape, name)
    }

    fn affine(&mut self, tape: &mut Tape<'p, F>, prefix: &str) -> Result<Affine> {
        Ok(Affine { w: self.var(tape, &format!("{prefix}.w"))?, b: self.var(tape, &format!("{prefix}.b"))? })
    }

    fn lstm(&mut self, tape: &mut Tape<'p, F>, prefix: &str) -> Result<LstmWeights> {
        Ok(LstmWeights {
            w_ih: self.var(tape, &format!("{prefix}.w_ih"))?,
            w_hh: self.var(tape, &format!("{prefix}.w_hh"))?,
            bias: self.var(tape, &format!("{prefix}.b"))?,
        })
    }

    fn trunk(&mut self, tape: &mut Tape<'p, F>, p: &str) -> Result<TrunkParams> {
        Ok(TrunkParams {
            conv: self.affine(tape, &format!("{p}.conv"))?,
            fwd: self.lstm(tape, &format!("{p}.lstm_f"))?,
            bwd: self.lstm(tape, &format!("{p}.lstm_b"))?,
            proj: self.affine(tape, &format!("{p}.proj"))?,
            w_a: self.var(tape, &format!("{p}.pool.w_a"))?,
            w: self.var(tape, &format!("{p}.pool.w"))?,
        })
    }

    fn cross_attn(&mut self, tape: &mut Tape<'p, F>) -> Result<CrossAttnParams> {
        Ok(CrossAttnParams {
            q: self.affine(tape, "xattn.q")?,
            k: self.affine(tape, "xattn.k")?,
            v: self.affine(tape, "xattn.v")?,
            out: self.affine(tape, "xattn.out")?,
        })
    }
}

/// Builds the forward pass for one utterance and returns the `1×1` logit
/// `r`. Inputs are trimmed to their valid extent first, so trailing padding
/// never reaches the tape.
pub fn forward<'p, F: Real>(
    tape: &mut Tape<'p, F>,
    binder: &mut Binder<'p, F>,
    cfg: &ModelConfig,
    x: &UtteranceFeatures<F>,
    severity: Severity,
    shift_steps: i64,
) -> Result<Var> {
    let kind = cfg.fusion.kind;
    let mut p = Params { binder };
    let mut ear_streams = Vec::with_capacity(2);
    for ear in Ear::BOTH {
        let f = x.ear(ear);
        ear_streams.push((tape.seq(&f.canary.trimmed()), tape.seq(&f.wavlm.trimmed())));
    }

    let pooled_ear = |tape: &mut Tape<'p, F>, p: &mut Params<'_, 'p, F>, c: &SeqVar, w: &SeqVar| -> Result<Var> {
        match kind {
            FusionKind::CanaryOnly | FusionKind::WavlmOnly => {
                let (name, seq) = if kind == FusionKind::CanaryOnly { ("proj_c", c) } else { ("proj_w", w) };
                let proj = p.affine(tape, name)?;
                let trunk = p.trunk(tape, "trunk")?;
                let h = proj.apply_seq(tape, seq)?;
                head::trunk(tape, &h, &trunk)
            }
            _ => {
                let (proj_c, proj_w) = (p.affine(tape, "proj_c")?, p.affine(tape, "proj_w")?);
                let (trunk_c, trunk_w) = (p.trunk(tape, "trunk_c")?, p.trunk(tape, "trunk_w")?);
                let late = p.affine(tape, "late")?;
                let pair = fusion::project(tape, c, w, Ear::L, proj_c, proj_w)?;
                let z_c = head::trunk(tape, &pair.canary, &trunk_c)?;
                let z_w = head::trunk(tape, &pair.wavlm, &trunk_w)?;
                fusion::pool_late_fuse(tape, z_c, z_w, late)
            }
        }
    };

    let u = if kind.merges_sequences() {
        let (proj_c, proj_w) = (p.affine(tape, "proj_c")?, p.affine(tape, "proj_w")?);
        let prep = match (kind, cfg.fusion.prep) {
            (FusionKind::FrameAligned, Prep::Conv) => Some(p.affine(tape, "prep")?),
            (FusionKind::ReverseTconv, _) => Some(p.affine(tape, "rev")?),
            _ => None,
        };
        let fuse = match kind {
            FusionKind::CrossAttn | FusionKind::ReverseCrossAttn => None,
            _ => Some(p.affine(tape, "fuse")?),
        };
        let xattn = match kind {
            FusionKind::CrossAttn | FusionKind::ReverseCrossAttn => Some(p.cross_attn(tape)?),
            _ => None,
        };
        let merge = p.affine(tape, "ear_merge")?;
        let trunk = p.trunk(tape, "trunk")?;
        let missing = || Error::Config("parameter group missing for variant".into());

        let mut fused = Vec::with_capacity(2);
        for (ear, (c, w)) in Ear::BOTH.into_iter().zip(&ear_streams) {
            let pair = fusion::project(tape, c, w, ear, proj_c, proj_w)?;
            let seq = match kind {
                FusionKind::FrameAligned => {
                    let fuse = fuse.ok_or_else(missing)?;
                    fusion::frame_align_fuse(tape, &pair, cfg.fusion.prep, shift_steps, prep, fuse)?.seq
                }
                FusionKind::CrossAttn => {
                    fusion::cross_attn_fuse(tape, &pair, AttnDirection::CanaryQueriesWavlm, xattn.ok_or_else(missing)?)?
                }
                FusionKind::ReverseCrossAttn => {
                    fusion::cross_attn_fuse(tape, &pair, AttnDirection::WavlmQueriesCanary, xattn.ok_or_else(missing)?)?
                }
                FusionKind::ReverseLinear => {
                    fusion::reverse_align_fuse(tape, &pair, ReverseMode::Linear, None, fuse.ok_or_else(missing)?)?
                }
                FusionKind::ReverseTconv => {
                    fusion::reverse_align_fuse(tape, &pair, ReverseMode::Tconv, prep, fuse.ok_or_else(missing)?)?
                }
                _ => unreachable!("pooled variants merge after the trunk"),
            };
            fused.push(seq);
        }
        let merged = fusion::ear_merge_sequence(tape, &fused[0], &fused[1], merge)?;
        head::trunk(tape, &merged, &trunk)?
    } else {
        let z_l = pooled_ear(tape, &mut p, &ear_streams[0].0, &ear_streams[0].1)?;
        let z_r = pooled_ear(tape, &mut p, &ear_streams[1].0, &ear_streams[1].1)?;
        let merge = p.affine(tape, "ear_merge")?;
        fusion::ear_merge_pooled(tape, z_l, z_r, merge)?
    };

    let adapter = AdapterParams {
        embed: p.var(tape, "severity.embed")?,
        down: p.affine(tape, "severity.down")?,
        up: p.var(tape, "severity.up")?,
    };
    let u = head::severity_adapt(tape, u, severity, &adapter)?;
    let out = OutputParams { l1: p.affine(tape, "mlp.l1")?, l2: p.affine(tape, "mlp.l2")?, out: p.affine(tape, "out")? };
    head::predict_logit(tape, u, &out)
}

/// Squared error `(σ(r) − y/100)²` of one item, as a `1×1` node.
pub fn item_loss<F: Real>(tape: &mut Tape<'_, F>, logit: Var, label: f64) -> Result<Var> {
    let target = F::from_f64(label / LABEL_SCALE).expect("finite label");
    let p = tape.sigmoid(logit);
    let t = tape.constant(Array2::from_elem((1, 1), target));
    let diff = tape.sub(p, t)?;
    Ok(tape.mul(diff, diff)?)
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl Model<f32> {
    /// Fan-based initialization from a ChaCha stream keyed by
    /// `(seed, stream)`.
    pub fn init(config: ModelConfig, seed: u64, stream: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut params = ParamStore::new();
        for s in param_specs(&config) {
            let t = init_tensor(&s, &mut rng);
            params.insert(s.name, t);
        }
        Ok(Self { config, params })
    }
}

impl<F: Real> Model<F> {
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model { config: self.config, params: self.params.cast() }
    }

    pub fn count_params(&self) -> ParamBreakdown {
        count_params(&self.config)
    }

    /// Bounded score `ŷ ∈ [0, 100]` with the configured shift.
    pub fn predict(&self, x: &UtteranceFeatures<F>, severity: Severity) -> Result<F> {
        self.predict_shifted(x, severity, self.config.fusion.shift_steps)
    }

    pub fn predict_shifted(&self, x: &UtteranceFeatures<F>, severity: Severity, shift_steps: i64) -> Result<F> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let r = forward(&mut tape, &mut binder, &self.config, x, severity, shift_steps)?;
        let y = head::score(tape.scalar(r));
        if !y.is_finite() {
            return Err(Error::NonFinite("prediction".into()));
        }
        Ok(y)
    }

    /// Loss of one item and its parameter gradients.
    pub fn loss_and_grads(&self, x: &UtteranceFeatures<F>, severity: Severity, label: f64) -> Result<(F, GradMap<F>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let r = forward(&mut tape, &mut binder, &self.config, x, severity, self.config.fusion.shift_steps)?;
        let loss = item_loss(&mut tape, r, label)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = tape.backward(loss)?;
        Ok((value, binder.gradients(&mut grads)))
    }
}

const CKPT_MAGIC: &[u8; 8] = b"FHCKPT01";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    config: ModelConfig,
    label_scale: f64,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Model<f32> {
    /// Serializes as magic, version, JSON header, little-endian f32 tensors
    /// in header order, and a CRC-64 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CkptHeader {
            config: self.config,
            label_scale: LABEL_SCALE,
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 4 * self.params.num_scalars() + 32);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.value().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc64(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::format("checkpoint", detail);
        if bytes.len() < 28 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("bad magic or truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if crc64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let json_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + json_len).ok_or_else(|| bad("truncated header"))?;
        let header: CkptHeader = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        header.config.validate()?;
        let expected: BTreeMap<String, Vec<usize>> = param_specs(&header.config).into_iter().map(|s| (s.name, s.shape)).collect();
        let mut data = &body[20 + json_len..];
        let mut params = ParamStore::new();
        for (name, shape) in header.tensors {
            if expected.get(&name) != Some(&shape) {
                return Err(bad(&format!("tensor {name} {shape:?} does not match the configuration")));
            }
            let dims = matrix_dims(&shape);
            let n = dims.0 * dims.1;
            let mut raw = vec![0u8; 4 * n];
            data.read_exact(&mut raw).map_err(|_| bad(&format!("truncated tensor {name}")))?;
            let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let value = Array2::from_shape_vec(dims, vals).expect("length checked");
            params.insert(name, Tensor::from_matrix(&shape, value)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if params.len() != expected.len() {
            return Err(bad("missing tensors"));
        }
        Ok(Self { config: header.config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })
    }
}
