//! Log-mel spectrogram value type.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-scale mel spectrogram with shape (1, T, N): one channel, T frames,
/// N frequency bins. All values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
}

impl Spectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                expected: 1,
                actual: shape.first().copied().unwrap_or(0),
            });
        }
        if !values.is_finite() {
            return Err(Error::NonFinite {
                what: "spectrogram values".to_string(),
            });
        }
        Ok(Spectrogram { values })
    }

    /// Builds from T rows of N bins.
    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let t = frames.len();
        let n = frames.first().map(|f| f.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(t * n);
        for row in frames {
            if row.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "spectrogram",
                    lhs: vec![n],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Spectrogram::new(Tensor::new(vec![1, t, n], data)?)
    }

    /// Frame count T.
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Frequency bin count N.
    pub fn bins(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Value at (frame, bin).
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.values.data()[frame * self.bins() + bin]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_1_t_n_only() {
        assert!(Spectrogram::new(Tensor::zeros(vec![1, 4, 3])).is_ok());
        assert!(Spectrogram::new(Tensor::zeros(vec![4, 3])).is_err());
        assert!(Spectrogram::new(Tensor::zeros(vec![2, 4, 3])).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(Spectrogram::new(t).is_err());
    }

    #[test]
    fn frame_indexing() {
        let s = Spectrogram::from_frames(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!((s.frames(), s.bins()), (2, 2));
        assert_eq!(s.at(1, 0), 3.0);
    }
}
