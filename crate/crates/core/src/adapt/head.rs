//! Per-dimension affine calibration of text embeddings.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{normalize_row_into, EmbeddingSet, Modality};
use crate::par;
use crate::retrieval::{cosine_similarity, SimilarityMatrix};

pub const HEAD_MAGIC: [u8; 4] = *b"UCH1";

/// `e ↦ normalize(γ ⊙ e + β)`, applied to text rows. Starts as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationHead {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl CalibrationHead {
    pub fn identity(dim: usize) -> Self {
        CalibrationHead {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn target_modality(&self) -> Modality {
        Modality::Text
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.iter().chain(&self.beta).all(|v| v.is_finite())
    }

    /// Parameters as one vector, `[γ; β]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.gamma.clone();
        p.extend_from_slice(&self.beta);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let d = self.dim();
        self.gamma.copy_from_slice(&params[..d]);
        self.beta.copy_from_slice(&params[d..]);
    }

    /// Rounds every parameter to the nearest f32, the precision stored on disk.
    pub fn round_to_f32(&mut self) {
        for v in self.gamma.iter_mut().chain(self.beta.iter_mut()) {
            *v = f64::from(*v as f32);
        }
    }

    /// `γ ⊙ e + β` for one row, in f64.
    pub(crate) fn affine(&self, row: &[f64], out: &mut [f64]) {
        for ((o, &e), (&g, &b)) in out.iter_mut().zip(row).zip(self.gamma.iter().zip(&self.beta)) {
            *o = g * e + b;
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dim());
        out.extend_from_slice(&HEAD_MAGIC);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.gamma.iter().chain(&self.beta) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedFile {
                offset: bytes.len() as u64,
                what: "head header",
            });
        }
        let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if found != HEAD_MAGIC {
            return Err(Error::MagicMismatch {
                expected: HEAD_MAGIC,
                found,
            });
        }
        let dim = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let want = 8 + 8 * dim;
        if bytes.len() < want {
            return Err(Error::TruncatedFile {
                offset: bytes.len() as u64,
                what: "head parameters",
            });
        }
        if bytes.len() > want {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes in head blob",
                bytes.len() - want
            )));
        }
        let vals: Vec<f64> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: i / dim, col: i % dim });
        }
        Ok(CalibrationHead {
            gamma: vals[..dim].to_vec(),
            beta: vals[dim..].to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Calibrates and re-normalizes every row of a text set.
pub fn apply_head(head: &CalibrationHead, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != head.dim() {
        return Err(Error::DimMismatch {
            left: head.dim(),
            right: set.dim(),
        });
    }
    if set.modality() != head.target_modality() {
        return Err(Error::ShapeMismatch(
            "the calibration head applies to text embeddings".into(),
        ));
    }
    let dim = set.dim();
    let rows = par::map_range(set.count(), |i| {
        let e: Vec<f64> = set.row(i).iter().map(|&v| f64::from(v)).collect();
        let mut u = vec![0f64; dim];
        head.affine(&e, &mut u);
        let mut out = vec![0f32; dim];
        normalize_row_into(&u, &mut out).map(|_| out)
    });
    let mut data = Vec::with_capacity(set.data().len());
    for (i, row) in rows.into_iter().enumerate() {
        data.extend(row.ok_or(Error::ZeroVectorRow(i))?);
    }
    set.with_data(data, true)
}

/// Cosine similarity after calibrating the text side.
pub fn calibrated_similarity(
    head: &CalibrationHead,
    text: &EmbeddingSet,
    image: &EmbeddingSet,
) -> Result<SimilarityMatrix> {
    cosine_similarity(&apply_head(head, text)?, image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::l2_normalize;

    fn text(dim: usize, data: Vec<f32>) -> EmbeddingSet {
        let n = data.len() / dim;
        EmbeddingSet::new(
            Modality::Text,
            dim,
            data,
            (0..n).map(|i| format!("t{i}")).collect(),
            None,
            false,
        )
        .unwrap()
    }

    #[test]
    fn identity_matches_l2_normalize() {
        let t = text(3, vec![3.0, 4.0, 0.0, 0.1, -0.7, 0.2]);
        let a = apply_head(&CalibrationHead::identity(3), &t).unwrap();
        assert_eq!(a, l2_normalize(&t).unwrap());
    }

    #[test]
    fn uniform_scale_cancels() {
        let t = l2_normalize(&text(3, vec![0.3, -0.2, 0.9, 1.0, 2.0, 3.0])).unwrap();
        let head = CalibrationHead {
            gamma: vec![2.0; 3],
            beta: vec![0.0; 3],
        };
        let a = apply_head(&head, &t).unwrap();
        for (x, y) in a.data().iter().zip(t.data()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn masking_a_dimension() {
        let t = text(2, vec![0.6, 0.8]);
        let head = CalibrationHead {
            gamma: vec![1.0, 0.0],
            beta: vec![0.0, 0.0],
        };
        assert_eq!(apply_head(&head, &t).unwrap().row(0), &[1.0, 0.0]);
        let kill = CalibrationHead {
            gamma: vec![0.0, 0.0],
            beta: vec![0.0, 0.0],
        };
        assert!(matches!(apply_head(&kill, &t), Err(Error::ZeroVectorRow(0))));
        assert!(matches!(
            apply_head(&CalibrationHead::identity(3), &t),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn blob_round_trip() {
        let mut head = CalibrationHead {
            gamma: vec![1.25, 0.1],
            beta: vec![-0.3, 1e-3],
        };
        head.round_to_f32();
        let bytes = head.encode();
        assert_eq!(&bytes[..4], b"UCH1");
        assert_eq!(bytes.len(), 8 + 16);
        assert_eq!(CalibrationHead::decode(&bytes).unwrap(), head);
        assert!(CalibrationHead::decode(&bytes[..20]).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn head() -> impl Strategy<Value = CalibrationHead> {
        (1usize..12).prop_flat_map(|dim| {
            (
                proptest::collection::vec(0.2f64..3.0, dim),
                proptest::collection::vec(-1.0f64..1.0, dim),
            )
                .prop_map(|(gamma, beta)| {
                    let mut h = CalibrationHead { gamma, beta };
                    h.round_to_f32();
                    h
                })
        })
    }

    proptest! {
        #[test]
        fn blob_round_trips(h in head()) {
            prop_assert_eq!(CalibrationHead::decode(&h.encode()).unwrap(), h);
        }

        #[test]
        fn outputs_are_unit_rows(h in head(), seed in any::<u64>()) {
            use rand::Rng;
            let dim = h.dim();
            let mut rng = crate::seed::rng(seed, "head-prop");
            let data = (0..4 * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let ids = (0..4).map(|i| format!("t{i}")).collect();
            let raw = EmbeddingSet::new(Modality::Text, dim, data, ids, None, false).unwrap();
            let Ok(unit) = crate::io::l2_normalize(&raw) else { return Ok(()) };
            if let Ok(out) = apply_head(&h, &unit) {
                for i in 0..out.count() {
                    let n: f64 = out.row(i).iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                    prop_assert!((n.sqrt() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
