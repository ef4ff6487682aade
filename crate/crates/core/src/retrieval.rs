//! Similarity matrices, top-K rankings and retrieval metrics.
//!
//! Rankings everywhere in the crate use one order: score descending, then
//! gallery index ascending. That order is what makes top-K, selection and the
//! metrics reproducible bit for bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::EmbeddingSet;
use crate::par;

/// Slack allowed around [-1, 1] for cosine scores.
pub const COSINE_SLACK: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Cosine,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Text queries against the image gallery (rows of `S`).
    T2I,
    /// Image queries against the texts (columns of `S`).
    I2T,
}

/// Row-major `n_text × n_image` score matrix; `s[q][g] = s(t_q, i_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_text: usize,
    n_image: usize,
    scores: Vec<f32>,
    provenance: Provenance,
}

impl SimilarityMatrix {
    pub fn new(
        n_text: usize,
        n_image: usize,
        scores: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        if n_text == 0 || n_image == 0 {
            return Err(Error::ShapeMismatch(format!(
                "empty score matrix {n_text}×{n_image}"
            )));
        }
        if scores.len() != n_text * n_image {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {n_text}×{n_image} matrix",
                scores.len()
            )));
        }
        for (i, &v) in scores.iter().enumerate() {
            let out_of_range =
                provenance == Provenance::Cosine && v.abs() > 1.0 + COSINE_SLACK;
            if !v.is_finite() || out_of_range {
                return Err(Error::NonFiniteValue {
                    row: i / n_image,
                    col: i % n_image,
                });
            }
        }
        Ok(SimilarityMatrix {
            n_text,
            n_image,
            scores,
            provenance,
        })
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_image(&self) -> usize {
        self.n_image
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, q: usize, g: usize) -> f32 {
        self.scores[q * self.n_image + g]
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.scores[q * self.n_image..(q + 1) * self.n_image]
    }

    /// Image-major copy: `t.get(g, q) == self.get(q, g)`.
    pub fn transpose(&self) -> SimilarityMatrix {
        let mut out = vec![0f32; self.scores.len()];
        for q in 0..self.n_text {
            for g in 0..self.n_image {
                out[g * self.n_text + q] = self.scores[q * self.n_image + g];
            }
        }
        SimilarityMatrix {
            n_text: self.n_image,
            n_image: self.n_text,
            scores: out,
            provenance: self.provenance,
        }
    }

    /// Multiplies every entry by `factor`; the result is external provenance.
    pub fn scaled(&self, factor: f32) -> Result<SimilarityMatrix> {
        SimilarityMatrix::new(
            self.n_text,
            self.n_image,
            self.scores.iter().map(|v| v * factor).collect(),
            Provenance::External,
        )
    }

    fn gallery_len(&self, direction: Direction) -> usize {
        match direction {
            Direction::T2I => self.n_image,
            Direction::I2T => self.n_text,
        }
    }
}

/// The crate-wide ranking order: higher score first, lower index on ties.
pub fn rank_order(a: (usize, f32), b: (usize, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Dot products of unit rows; accumulated in f64, stored as f32.
pub fn cosine_similarity(text: &EmbeddingSet, image: &EmbeddingSet) -> Result<SimilarityMatrix> {
    if text.dim() != image.dim() {
        return Err(Error::DimMismatch {
            left: text.dim(),
            right: image.dim(),
        });
    }
    if !text.is_normalized() {
        return Err(Error::NotNormalized("text"));
    }
    if !image.is_normalized() {
        return Err(Error::NotNormalized("image"));
    }
    let (n_text, n_image) = (text.count(), image.count());
    let mut scores = vec![0f32; n_text * n_image];
    par::fill_rows(&mut scores, n_image, |q, row| {
        let t = text.row(q);
        for (g, out) in row.iter_mut().enumerate() {
            let acc: f64 = t
                .iter()
                .zip(image.row(g))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            *out = acc as f32;
        }
    });
    SimilarityMatrix::new(n_text, n_image, scores, Provenance::Cosine)
}

/// Top-K gallery items per query, sorted by [`rank_order`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopKIndex {
    direction: Direction,
    k: usize,
    gallery_len: usize,
    indices: Vec<usize>,
    scores: Vec<f32>,
}

impl TopKIndex {
    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        self.indices.len() / self.k
    }

    /// Number of items each query was ranked against.
    pub fn gallery_len(&self) -> usize {
        self.gallery_len
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn row_scores(&self, q: usize) -> &[f32] {
        &self.scores[q * self.k..(q + 1) * self.k]
    }

    pub fn contains(&self, q: usize, item: usize) -> bool {
        self.row(q).contains(&item)
    }
}

fn top_of_row(row: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut items: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        items.truncate(k);
    }
    items.sort_unstable_by(|a, b| rank_order(*a, *b));
    items
}

/// Top-`k` per query row. `I2T` ranks texts for each image (the transpose).
pub fn topk(s: &SimilarityMatrix, k: usize, direction: Direction) -> Result<TopKIndex> {
    let gallery = s.gallery_len(direction);
    if k == 0 || k > gallery {
        return Err(Error::KOutOfRange { k, max: gallery });
    }
    let transposed;
    let view = match direction {
        Direction::T2I => s,
        Direction::I2T => {
            transposed = s.transpose();
            &transposed
        }
    };
    let rows = par::map_range(view.n_text(), |q| top_of_row(view.row(q), k));
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut scores = Vec::with_capacity(rows.len() * k);
    for row in rows {
        for (i, v) in row {
            indices.push(i);
            scores.push(v);
        }
    }
    Ok(TopKIndex {
        direction,
        k,
        gallery_len: gallery,
        indices,
        scores,
    })
}

/// Full ranking of one query row.
pub fn full_ranking(row: &[f32]) -> Vec<usize> {
    top_of_row(row, row.len()).into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub n_queries: usize,
}

impl RetrievalMetrics {
    /// Recall at one of the reported cutoffs (1, 5 or 10).
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }

    /// Fixed four-decimal JSON report.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"r1\":{:.4},\"r5\":{:.4},\"r10\":{:.4},\"map\":{:.4},\"n_queries\":{}}}",
            self.r1, self.r5, self.r10, self.map, self.n_queries
        )
    }
}

struct QueryOutcome {
    first_hit: usize,
    ap: f64,
}

/// R@{1,5,10} and mAP of text→image retrieval over the full ranking.
pub fn evaluate(
    s: &SimilarityMatrix,
    query_labels: Option<&[i32]>,
    gallery_labels: Option<&[i32]>,
) -> Result<RetrievalMetrics> {
    let query_labels = query_labels.ok_or(Error::MissingLabels("query"))?;
    let gallery_labels = gallery_labels.ok_or(Error::MissingLabels("gallery"))?;
    if query_labels.len() != s.n_text() {
        return Err(Error::LengthMismatch {
            left: query_labels.len(),
            right: s.n_text(),
        });
    }
    if gallery_labels.len() != s.n_image() {
        return Err(Error::LengthMismatch {
            left: gallery_labels.len(),
            right: s.n_image(),
        });
    }
    let outcomes = par::map_range(s.n_text(), |q| {
        let want = query_labels[q];
        let ranking = full_ranking(s.row(q));
        let mut hits = 0usize;
        let mut precision_sum = 0f64;
        let mut first_hit = None;
        for (rank, &g) in ranking.iter().enumerate() {
            if gallery_labels[g] == want {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first_hit.get_or_insert(rank);
            }
        }
        first_hit.map(|first_hit| QueryOutcome {
            first_hit,
            ap: precision_sum / hits as f64,
        })
    });
    let n = outcomes.len();
    let (mut c1, mut c5, mut c10, mut ap_sum) = (0usize, 0usize, 0usize, 0f64);
    for (q, outcome) in outcomes.into_iter().enumerate() {
        let o = outcome.ok_or(Error::QueryWithoutPositive(q))?;
        c1 += usize::from(o.first_hit < 1);
        c5 += usize::from(o.first_hit < 5);
        c10 += usize::from(o.first_hit < 10);
        ap_sum += o.ap;
    }
    let nf = n as f64;
    Ok(RetrievalMetrics {
        r1: c1 as f64 / nf,
        r5: c5 as f64 / nf,
        r10: c10 as f64 / nf,
        map: ap_sum / nf,
        n_queries: n,
    })
}
