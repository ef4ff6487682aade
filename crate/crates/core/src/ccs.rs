//! Cycle-consistency selection.
//!
//! A text query is reliable when it shows up again in the top-K text lists of
//! its own top-K images. Selection runs once, on the pre-adaptation matrix.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::retrieval::{topk, Direction, SimilarityMatrix, TopKIndex};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ReliableSet {
    k: usize,
    n_queries: usize,
    reliable: Vec<usize>,
    candidates: Vec<Vec<usize>>,
    rejected: Vec<usize>,
}

impl ReliableSet {
    /// Every query kept, with its top-K list as candidates. The Tent baseline
    /// trains on this instead of a selected subset.
    pub fn everything(t2i: &TopKIndex) -> ReliableSet {
        let n = t2i.n_queries();
        ReliableSet {
            k: t2i.k(),
            n_queries: n,
            reliable: (0..n).collect(),
            candidates: (0..n).map(|q| t2i.row(q).to_vec()).collect(),
            rejected: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn reliable(&self) -> &[usize] {
        &self.reliable
    }

    pub fn rejected(&self) -> &[usize] {
        &self.rejected
    }

    /// Candidate list of the `i`-th reliable query (not query index `i`).
    pub fn candidates(&self, i: usize) -> &[usize] {
        &self.candidates[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.reliable
            .iter()
            .copied()
            .zip(self.candidates.iter().map(Vec::as_slice))
    }

    pub fn is_empty(&self) -> bool {
        self.reliable.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            k: usize,
            n_reliable: usize,
            n_rejected: usize,
            reliable: &'a [usize],
        }
        Ok(serde_json::to_string(&Dump {
            k: self.k,
            n_reliable: self.reliable.len(),
            n_rejected: self.rejected.len(),
            reliable: &self.reliable,
        })?)
    }
}

/// Selection from precomputed top-K structures of the same `k`.
pub fn select_from_topk(t2i: &TopKIndex, i2t: &TopKIndex) -> Result<ReliableSet> {
    if t2i.k() != i2t.k() || t2i.direction() != Direction::T2I || i2t.direction() != Direction::I2T
    {
        return Err(Error::ShapeMismatch(
            "selection needs T2I and I2T top-K lists of the same k".into(),
        ));
    }
    let flags = par::map_range(t2i.n_queries(), |q| {
        t2i.row(q).iter().any(|&g| i2t.contains(g, q))
    });
    let mut out = ReliableSet {
        k: t2i.k(),
        n_queries: flags.len(),
        reliable: Vec::new(),
        candidates: Vec::new(),
        rejected: Vec::new(),
    };
    for (q, keep) in flags.into_iter().enumerate() {
        if keep {
            out.reliable.push(q);
            out.candidates.push(t2i.row(q).to_vec());
        } else {
            out.rejected.push(q);
        }
    }
    Ok(out)
}

pub fn select_reliable(s: &SimilarityMatrix, k: usize) -> Result<ReliableSet> {
    let max = s.n_text().min(s.n_image());
    if k == 0 || k > max {
        return Err(Error::KOutOfRange { k, max });
    }
    let t2i = topk(s, k, Direction::T2I)?;
    let i2t = topk(s, k, Direction::I2T)?;
    select_from_topk(&t2i, &i2t)
}
