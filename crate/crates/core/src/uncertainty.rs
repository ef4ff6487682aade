//! Bidirectional retrieval disagreement.
//!
//! For a (text, image) pair the text→image probability is a softmax over the
//! text's top-K images and the image→text probability a softmax over the
//! image's top-K texts, both at temperature 1. The uncertainty `d` measures how
//! much the two directions disagree.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ccs::ReliableSet;
use crate::error::{Error, Result};
use crate::retrieval::{topk, Direction, SimilarityMatrix, TopKIndex};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UncertaintyVariant {
    /// `exp(|a − b| / ((a + b) / 2))`, with `e²` when the mean is below ε.
    #[default]
    #[serde(rename = "normdiff")]
    NormalizedDiffExp,
    /// `exp(1 − (a + b) / 2)`.
    #[serde(rename = "meanconf")]
    MeanConfidence,
    /// `|ln(a + ε) − ln(b + ε)|`.
    #[serde(rename = "logratio")]
    LogRatio,
}

impl UncertaintyVariant {
    pub const ALL: [UncertaintyVariant; 3] = [
        UncertaintyVariant::NormalizedDiffExp,
        UncertaintyVariant::MeanConfidence,
        UncertaintyVariant::LogRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyVariant::NormalizedDiffExp => "normdiff",
            UncertaintyVariant::MeanConfidence => "meanconf",
            UncertaintyVariant::LogRatio => "logratio",
        }
    }

    pub fn score(self, p_t2i: f64, p_i2t: f64, epsilon: f64) -> f64 {
        let mean = 0.5 * (p_t2i + p_i2t);
        match self {
            UncertaintyVariant::NormalizedDiffExp => {
                if mean < epsilon {
                    std::f64::consts::E * std::f64::consts::E
                } else {
                    ((p_t2i - p_i2t).abs() / mean).exp()
                }
            }
            UncertaintyVariant::MeanConfidence => (1.0 - mean).exp(),
            UncertaintyVariant::LogRatio => ((p_t2i + epsilon).ln() - (p_i2t + epsilon).ln()).abs(),
        }
    }

    /// Closed range of `d` for probabilities in [0, 1].
    pub fn range(self, epsilon: f64) -> (f64, f64) {
        use std::f64::consts::E;
        match self {
            UncertaintyVariant::NormalizedDiffExp => (1.0, E * E),
            UncertaintyVariant::MeanConfidence => (1.0, E),
            UncertaintyVariant::LogRatio => (0.0, ((1.0 + epsilon) / epsilon).ln()),
        }
    }

    /// Multiplier applied to a pair's entropy terms in the adaptation loss.
    ///
    /// `1/d` for the exponential variants. LogRatio is zero at agreement, so
    /// it uses `1/(1 + d)` to keep the weight finite and equal to 1 there.
    pub fn loss_weight(self, d: f64) -> f64 {
        match self {
            UncertaintyVariant::LogRatio => 1.0 / (1.0 + d),
            _ => 1.0 / d,
        }
    }

    /// Loss weight and its partial derivatives with respect to `(p_t2i, p_i2t)`.
    pub fn weight_with_grad(self, a: f64, b: f64, epsilon: f64) -> (f64, f64, f64) {
        let d = self.score(a, b, epsilon);
        let w = self.loss_weight(d);
        match self {
            UncertaintyVariant::NormalizedDiffExp => {
                let mean = 0.5 * (a + b);
                if mean < epsilon {
                    return (w, 0.0, 0.0);
                }
                // w = exp(-r), r = |a - b| / mean
                let diff = a - b;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let dr_da = sign / mean - diff.abs() / (2.0 * mean * mean);
                let dr_db = -sign / mean - diff.abs() / (2.0 * mean * mean);
                (w, -w * dr_da, -w * dr_db)
            }
            UncertaintyVariant::MeanConfidence => (w, 0.5 * w, 0.5 * w),
            UncertaintyVariant::LogRatio => {
                let diff = (a + epsilon).ln() - (b + epsilon).ln();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let w2 = w * w;
                (w, -w2 * sign / (a + epsilon), w2 * sign / (b + epsilon))
            }
        }
    }
}

impl fmt::Display for UncertaintyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UncertaintyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UncertaintyVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown uncertainty variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairProbabilities {
    pub query: usize,
    pub candidate: usize,
    pub p_t2i: f64,
    pub p_i2t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UncertaintyScore {
    pub query: usize,
    pub candidate: usize,
    pub d: f64,
    pub variant: UncertaintyVariant,
}

/// `ln Σ exp(x)` with the max shifted out.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Probabilities for every (reliable query, candidate) pair, in selection order.
pub fn pair_probabilities(
    s: &SimilarityMatrix,
    reliable: &ReliableSet,
    k: usize,
) -> Result<Vec<PairProbabilities>> {
    if reliable.k() != k || reliable.n_queries() != s.n_text() {
        return Err(Error::ShapeMismatch(format!(
            "selection (k = {}, {} queries) does not match k = {k} on {} texts",
            reliable.k(),
            reliable.n_queries(),
            s.n_text()
        )));
    }
    let i2t = topk(s, k, Direction::I2T)?;
    pair_probabilities_with(s, reliable, &i2t)
}

pub(crate) fn pair_probabilities_with(
    s: &SimilarityMatrix,
    reliable: &ReliableSet,
    i2t: &TopKIndex,
) -> Result<Vec<PairProbabilities>> {
    let mut out = Vec::new();
    for (q, candidates) in reliable.iter() {
        if candidates.iter().any(|&g| g >= s.n_image()) {
            return Err(Error::ShapeMismatch(format!(
                "candidate of query {q} outside a gallery of {}",
                s.n_image()
            )));
        }
        let row_lse = log_sum_exp(candidates.iter().map(|&g| f64::from(s.get(q, g))));
        for &g in candidates {
            let score = f64::from(s.get(q, g));
            let col_lse = log_sum_exp(i2t.row(g).iter().map(|&j| f64::from(s.get(j, g))));
            out.push(PairProbabilities {
                query: q,
                candidate: g,
                p_t2i: (score - row_lse).exp(),
                p_i2t: (score - col_lse).exp(),
            });
        }
    }
    Ok(out)
}

pub fn brd_uncertainty(
    p: &PairProbabilities,
    variant: UncertaintyVariant,
    epsilon: f64,
) -> UncertaintyScore {
    UncertaintyScore {
        query: p.query,
        candidate: p.candidate,
        d: variant.score(p.p_t2i, p.p_i2t, epsilon),
        variant,
    }
}

/// CSV dump: `query_id,candidate_id,p_t2i,p_i2t,d,variant`.
pub fn write_uncertainty_csv<W: Write>(
    writer: W,
    probs: &[PairProbabilities],
    scores: &[UncertaintyScore],
    text_ids: Option<&[String]>,
    image_ids: Option<&[String]>,
) -> Result<()> {
    if probs.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: scores.len(),
        });
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["query_id", "candidate_id", "p_t2i", "p_i2t", "d", "variant"])?;
    let name = |ids: Option<&[String]>, i: usize| match ids {
        Some(ids) => ids[i].clone(),
        None => i.to_string(),
    };
    for (p, u) in probs.iter().zip(scores) {
        w.write_record([
            name(text_ids, p.query),
            name(image_ids, p.candidate),
            format!("{:.8}", p.p_t2i),
            format!("{:.8}", p.p_i2t),
            format!("{:.8}", u.d),
            u.variant.name().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
