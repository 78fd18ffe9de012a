use ndarray::{s, Array2, ArrayView1};

use super::tape::{Tape, Var};
use super::Real;
use crate::error::{Error, Result};

/// Frame-time matrix with a per-frame validity mask.
///
/// Invalid frames are zeroed on construction, so two sequences that differ
/// only at invalid frames compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq<F: Real = f32> {
    values: Array2<F>,
    mask: Vec<bool>,
    frame_rate_hz: f64,
}

impl<F: Real> MaskedSeq<F> {
    pub fn new(mut values: Array2<F>, mask: Vec<bool>, frame_rate_hz: f64) -> Result<Self> {
        if mask.len() != values.nrows() {
            return Err(Error::dim("MaskedSeq", format!("{} frames, mask {}", values.nrows(), mask.len())));
        }
        if values.ncols() == 0 {
            return Err(Error::dim("MaskedSeq", "feature dimension must be >= 1"));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::arg("MaskedSeq", format!("frame rate {frame_rate_hz}")));
        }
        for (t, (mut row, &m)) in values.rows_mut().into_iter().zip(&mask).enumerate() {
            if !m {
                row.fill(F::zero());
            } else if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("frame {t}")));
            }
        }
        Ok(Self { values, mask, frame_rate_hz })
    }

    pub fn all_valid(values: Array2<F>, frame_rate_hz: f64) -> Result<Self> {
        let mask = vec![true; values.nrows()];
        Self::new(values, mask, frame_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn frame(&self, t: usize) -> Option<ArrayView1<'_, F>> {
        self.mask.get(t).and_then(|&m| m.then(|| self.values.row(t)))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// One past the last valid frame (0 when nothing is valid).
    pub fn extent(&self) -> usize {
        self.mask.iter().rposition(|&m| m).map_or(0, |t| t + 1)
    }

    /// Drops trailing invalid frames.
    pub fn trimmed(&self) -> Self {
        let n = self.extent();
        Self {
            values: self.values.slice(s![..n, ..]).to_owned(),
            mask: self.mask[..n].to_vec(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }

    /// Appends `n` invalid (zero) frames.
    pub fn padded(&self, n: usize) -> Self {
        let mut values = Array2::zeros((self.len() + n, self.dim()));
        values.slice_mut(s![..self.len(), ..]).assign(&self.values);
        let mut mask = self.mask.clone();
        mask.resize(self.len() + n, false);
        Self { values, mask, frame_rate_hz: self.frame_rate_hz }
    }

    pub fn cast<G: Real>(&self) -> MaskedSeq<G> {
        MaskedSeq {
            values: self.values.mapv(|v| G::from(v).expect("representable")),
            mask: self.mask.clone(),
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

/// A masked sequence living on a tape.
#[derive(Debug, Clone)]
pub struct SeqVar {
    pub var: Var,
    pub mask: Vec<bool>,
    pub frame_rate_hz: f64,
}

impl SeqVar {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn has_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

impl<'p, F: Real> Tape<'p, F> {
    /// Records a sequence as a frozen input.
    pub fn seq(&mut self, seq: &MaskedSeq<F>) -> SeqVar {
        self.seq_leaf(seq, false)
    }

    pub fn seq_leaf(&mut self, seq: &MaskedSeq<F>, trainable: bool) -> SeqVar {
        let var = self.leaf(seq.values.clone(), trainable);
        SeqVar { var, mask: seq.mask.clone(), frame_rate_hz: seq.frame_rate_hz }
    }

    pub fn seq_value(&self, x: &SeqVar) -> MaskedSeq<F> {
        MaskedSeq {
            values: self.value(x.var).clone(),
            mask: x.mask.clone(),
            frame_rate_hz: x.frame_rate_hz,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn invalid_frames_are_zeroed() {
        let s = MaskedSeq::new(array![[1.0f32, 2.0], [7.0, 9.0]], vec![true, false], 50.0).unwrap();
        assert_eq!(s.values(), &array![[1.0, 2.0], [0.0, 0.0]]);
        assert_eq!(s.frame(1), None);
    }

    #[test]
    fn garbage_at_invalid_frames_does_not_matter() {
        let a = MaskedSeq::new(array![[1.0f64], [f64::NAN]], vec![true, false], 12.5).unwrap();
        let b = MaskedSeq::new(array![[1.0f64], [3.0]], vec![true, false], 12.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(MaskedSeq::new(array![[1.0f32]], vec![true, true], 1.0).is_err());
        assert!(MaskedSeq::new(Array2::<f32>::zeros((2, 0)), vec![true, true], 1.0).is_err());
        assert!(MaskedSeq::new(array![[1.0f32]], vec![true], 0.0).is_err());
        assert!(matches!(
            MaskedSeq::new(array![[f32::INFINITY]], vec![true], 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn extent_trim_and_pad() {
        let s = MaskedSeq::new(array![[1.0f32], [0.0], [2.0], [0.0]], vec![true, false, true, false], 1.0).unwrap();
        assert_eq!(s.extent(), 3);
        assert_eq!(s.trimmed().len(), 3);
        assert_eq!(s.padded(2).len(), 6);
        assert_eq!(s.padded(2).trimmed(), s.trimmed());
    }
}
