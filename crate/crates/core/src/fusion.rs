//! Strategies for combining the coarse (canary, 12.5 Hz) and fine (wavlm,
//! 50 Hz) encoder streams, plus the left/right ear merges.
//!
//! All functions build on a [`Tape`]; parameters arrive as [`Var`] handles
//! so the same code serves training (f32) and gradient checks (f64).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::ops::{self, affine};
use crate::seqcore::{Real, SeqVar, Tape, Var};

/// Downsampling factor between the fine and coarse timelines.
pub const RATE_FACTOR: usize = 4;

/// Milliseconds covered by one coarse-timeline step.
pub const STEP_MS: i64 = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ear {
    L,
    R,
}

impl Ear {
    pub const BOTH: [Ear; 2] = [Ear::L, Ear::R];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    CanaryOnly,
    WavlmOnly,
    PoolLate,
    FrameAligned,
    CrossAttn,
    ReverseLinear,
    ReverseTconv,
    ReverseCrossAttn,
}

impl FusionKind {
    pub const ALL: [FusionKind; 8] = [
        FusionKind::CanaryOnly,
        FusionKind::WavlmOnly,
        FusionKind::PoolLate,
        FusionKind::FrameAligned,
        FusionKind::CrossAttn,
        FusionKind::ReverseLinear,
        FusionKind::ReverseTconv,
        FusionKind::ReverseCrossAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::CanaryOnly => "canary_only",
            FusionKind::WavlmOnly => "wavlm_only",
            FusionKind::PoolLate => "pool_late",
            FusionKind::FrameAligned => "frame_aligned",
            FusionKind::CrossAttn => "cross_attn",
            FusionKind::ReverseLinear => "reverse_linear",
            FusionKind::ReverseTconv => "reverse_tconv",
            FusionKind::ReverseCrossAttn => "reverse_cross_attn",
        }
    }

    pub fn is_dual(self) -> bool {
        !matches!(self, FusionKind::CanaryOnly | FusionKind::WavlmOnly)
    }

    /// Whether the ears are merged before the trunk (sequence level) rather
    /// than after pooling.
    pub fn merges_sequences(self) -> bool {
        self.is_dual() && self != FusionKind::PoolLate
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind {s:?}")))
    }
}

/// Temporal preparation of the fine stream before frame alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prep {
    #[default]
    None,
    Avg,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionVariant {
    pub kind: FusionKind,
    #[serde(default)]
    pub prep: Prep,
    #[serde(default)]
    pub shift_steps: i64,
}

impl FusionVariant {
    pub fn new(kind: FusionKind) -> Self {
        Self { kind, prep: Prep::None, shift_steps: 0 }
    }

    pub fn frame_aligned(prep: Prep) -> Self {
        Self { kind: FusionKind::FrameAligned, prep, shift_steps: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let aligned = self.kind == FusionKind::FrameAligned;
        if aligned && self.prep == Prep::None {
            return Err(Error::Config("frame_aligned fusion needs prep = avg or conv".into()));
        }
        if !aligned && self.prep != Prep::None {
            return Err(Error::Config(format!("prep {:?} is only valid with frame_aligned", self.prep)));
        }
        if !aligned && self.shift_steps != 0 {
            return Err(Error::Config("shift_steps is only valid with frame_aligned".into()));
        }
        Ok(())
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.prep {
            Prep::None => write!(f, "{}", self.kind),
            Prep::Avg => write!(f, "{}(avg)", self.kind),
            Prep::Conv => write!(f, "{}(conv)", self.kind),
        }
    }
}

/// `x·w + b` handles.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub w: Var,
    pub b: Var,
}

impl Affine {
    pub fn apply<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        affine(tape, x, self.w, self.b)
    }

    pub fn apply_seq<F: Real>(&self, tape: &mut Tape<'_, F>, x: &SeqVar) -> Result<SeqVar> {
        ops::linear(tape, x, self.w, self.b)
    }
}

/// Projected streams of one ear, both of width `d`.
#[derive(Debug, Clone)]
pub struct ProjectedPair {
    pub canary: SeqVar,
    pub wavlm: SeqVar,
    pub ear: Ear,
}

fn check_width<F: Real>(tape: &Tape<'_, F>, x: &SeqVar, w: Var, what: &str) -> Result<()> {
    let (have, want) = (tape.shape(x.var).1, tape.shape(w).0);
    if have != want {
        return Err(Error::dim("project", format!("{what} features have width {have}, projection expects {want}")));
    }
    Ok(())
}

pub fn project<F: Real>(
    tape: &mut Tape<'_, F>,
    canary_raw: &SeqVar,
    wavlm_raw: &SeqVar,
    ear: Ear,
    proj_c: Affine,
    proj_w: Affine,
) -> Result<ProjectedPair> {
    check_width(tape, canary_raw, proj_c.w, "canary")?;
    check_width(tape, wavlm_raw, proj_w.w, "wavlm")?;
    Ok(ProjectedPair { canary: proj_c.apply_seq(tape, canary_raw)?, wavlm: proj_w.apply_seq(tape, wavlm_raw)?, ear })
}

/// `W_late[z_c; z_w] + b_late` on pooled `1×d` rows.
pub fn pool_late_fuse<F: Real>(tape: &mut Tape<'_, F>, z_c: Var, z_w: Var, late: Affine) -> Result<Var> {
    let z = tape.concat_cols(z_c, z_w)?;
    late.apply(tape, z)
}

/// Frame-aligned fusion output on the canary timeline.
#[derive(Debug, Clone)]
pub struct AlignedSeq {
    pub seq: SeqVar,
    /// Whether prepared fine-stream evidence reached each frame; frames
    /// without it fused against zeros.
    pub aux_mask: Vec<bool>,
}

/// Prepares the fine stream, shifts it by `shift_steps` coarse steps,
/// resizes it to the canary length and fuses frame-wise.
///
/// `prep_conv` holds the `(4·d)×d` kernel and bias when `prep` is
/// [`Prep::Conv`].
pub fn frame_align_fuse<F: Real>(
    tape: &mut Tape<'_, F>,
    p: &ProjectedPair,
    prep: Prep,
    shift_steps: i64,
    prep_conv: Option<Affine>,
    fuse: Affine,
) -> Result<AlignedSeq> {
    let t_c = p.canary.len();
    if t_c == 0 {
        return Err(Error::EmptyCanaryTimeline);
    }
    let prepared = match (prep, prep_conv) {
        (Prep::Avg, _) => ops::masked_avg_downsample(tape, &p.wavlm, RATE_FACTOR)?,
        (Prep::Conv, Some(k)) => ops::conv1d(tape, &p.wavlm, k.w, k.b, RATE_FACTOR)?,
        (Prep::Conv, None) => return Err(Error::Config("conv preparation without kernel".into())),
        (Prep::None, _) => return Err(Error::Config("frame_aligned fusion needs a preparation".into())),
    };
    let shifted = ops::temporal_shift(tape, &prepared, shift_steps)?;
    let aligned = ops::adaptive_resize(tape, &shifted, t_c)?;
    let fused_in = ops::concat_frames(tape, &p.canary, &aligned)?;
    Ok(AlignedSeq { seq: fuse.apply_seq(tape, &fused_in)?, aux_mask: aligned.mask })
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttnParams {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub out: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnDirection {
    /// Canary frames query the wavlm frames.
    CanaryQueriesWavlm,
    WavlmQueriesCanary,
}

/// Single-head scaled dot-product attention from one stream onto the other,
/// followed by `linear([queries; attended])`. Output lives on the query
/// timeline with the query mask.
pub fn cross_attn_fuse<F: Real>(
    tape: &mut Tape<'_, F>,
    p: &ProjectedPair,
    direction: AttnDirection,
    params: CrossAttnParams,
) -> Result<SeqVar> {
    let (queries, keys) = match direction {
        AttnDirection::CanaryQueriesWavlm => (&p.canary, &p.wavlm),
        AttnDirection::WavlmQueriesCanary => (&p.wavlm, &p.canary),
    };
    if !keys.has_valid() {
        return Err(Error::EmptyAttentionSupport);
    }
    let d = tape.shape(params.q.w).1;
    let q = params.q.apply(tape, queries.var)?;
    let k = params.k.apply(tape, keys.var)?;
    let v = params.v.apply(tape, keys.var)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scale = F::one() / F::from_usize(d).expect("width fits").sqrt();
    let scores = tape.scale(scores, scale);
    let attn = tape.softmax_rows(scores, &keys.mask)?;
    let attended = tape.matmul(attn, v)?;
    let attended = SeqVar { var: attended, mask: queries.mask.clone(), frame_rate_hz: queries.frame_rate_hz };
    let joined = ops::concat_frames(tape, queries, &attended)?;
    params.out.apply_seq(tape, &joined)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseMode {
    Linear,
    Tconv,
}

/// Maps the canary stream up to the wavlm timeline and fuses frame-wise
/// as `linear([canary_up; wavlm])`; the output carries the wavlm mask.
///
/// `tconv` holds the `(4·d)×d` kernel and bias in [`ReverseMode::Tconv`].
pub fn reverse_align_fuse<F: Real>(
    tape: &mut Tape<'_, F>,
    p: &ProjectedPair,
    mode: ReverseMode,
    tconv: Option<Affine>,
    fuse: Affine,
) -> Result<SeqVar> {
    if p.canary.is_empty() || !p.canary.has_valid() {
        return Err(Error::EmptyCanaryTimeline);
    }
    let t_w = p.wavlm.len();
    let up = match (mode, tconv) {
        // A fine stream shorter than the coarse one only happens when most
        // of it is invalid; average-resize instead of interpolating.
        (ReverseMode::Linear, _) if t_w < p.canary.len() => ops::adaptive_resize(tape, &p.canary, t_w.max(1))?,
        (ReverseMode::Linear, _) => ops::linear_interp_upsample(tape, &p.canary, t_w)?,
        (ReverseMode::Tconv, Some(k)) => {
            let up = ops::tconv1d(tape, &p.canary, k.w, k.b, RATE_FACTOR, RATE_FACTOR)?;
            ops::adaptive_resize(tape, &up, t_w.max(1))?
        }
        (ReverseMode::Tconv, None) => return Err(Error::Config("tconv alignment without kernel".into())),
    };
    let up = ops::fit_length(tape, &up, t_w)?;
    let joined = tape.concat_cols(up.var, p.wavlm.var)?;
    let joined = tape.mask_rows(joined, &p.wavlm.mask)?;
    let joined = SeqVar { var: joined, mask: p.wavlm.mask.clone(), frame_rate_hz: p.wavlm.frame_rate_hz };
    fuse.apply_seq(tape, &joined)
}

/// `W_lr[z_L; z_R] + b_lr` on pooled `1×d` rows.
pub fn ear_merge_pooled<F: Real>(tape: &mut Tape<'_, F>, z_l: Var, z_r: Var, merge: Affine) -> Result<Var> {
    let z = tape.concat_cols(z_l, z_r)?;
    merge.apply(tape, z)
}

/// Frame-wise `W_lr[H_L; H_R] + b_lr`. The shorter ear is padded with
/// invalid frames; a merged frame is valid iff either ear's frame is.
pub fn ear_merge_sequence<F: Real>(tape: &mut Tape<'_, F>, h_l: &SeqVar, h_r: &SeqVar, merge: Affine) -> Result<SeqVar> {
    if !h_l.has_valid() && !h_r.has_valid() {
        return Err(Error::EmptyUtterance);
    }
    let len = h_l.len().max(h_r.len());
    let l = ops::fit_length(tape, h_l, len)?;
    let r = ops::fit_length(tape, h_r, len)?;
    let mask: Vec<bool> = l.mask.iter().zip(&r.mask).map(|(&a, &b)| a || b).collect();
    let joined = tape.concat_cols(l.var, r.var)?;
    let joined = SeqVar { var: joined, mask, frame_rate_hz: h_l.frame_rate_hz };
    merge.apply_seq(tape, &joined)
}
