use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{AdaptationConfig, NegativeSource};
use crate::ccs::ReliableSet;
use crate::error::{Error, Result};
use crate::retrieval::{Direction, TopKIndex};
use crate::seed;

/// One query with its pseudo-positive first, then its negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTuple {
    pub query: usize,
    pub images: Vec<usize>,
}

impl QueryTuple {
    pub fn pseudo_positive(&self) -> usize {
        self.images[0]
    }

    pub fn negatives(&self) -> &[usize] {
        &self.images[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tuples: Vec<QueryTuple>,
}

impl Batch {
    pub fn n_pairs(&self) -> usize {
        self.tuples.iter().map(|t| t.images.len()).sum()
    }
}

/// Draws `need` distinct images outside `exclude` (the query's top-k list).
fn draw_outside(
    rng: &mut ChaCha8Rng,
    gallery: usize,
    exclude: &[usize],
    chosen: &mut Vec<usize>,
    need: usize,
) {
    let free = gallery - exclude.len();
    let need = need.min(free);
    if need == 0 {
        return;
    }
    if need * 4 > free || free < 64 {
        let pool: Vec<usize> = (0..gallery).filter(|g| !exclude.contains(g)).collect();
        chosen.extend(sample(rng, pool.len(), need).into_iter().map(|i| pool[i]));
        return;
    }
    let start = chosen.len();
    while chosen.len() - start < need {
        let g = rng.random_range(0..gallery);
        if !exclude.contains(&g) && !chosen[start..].contains(&g) {
            chosen.push(g);
        }
    }
}

fn tuple_for(
    rng: &mut ChaCha8Rng,
    query: usize,
    list: &[usize],
    gallery: usize,
    config: &AdaptationConfig,
) -> QueryTuple {
    let want = config.negatives_per_query;
    let mut images = Vec::with_capacity(1 + want);
    images.push(list[0]);
    let from_list = match config.negative_source {
        NegativeSource::TopK => want.min(list.len() - 1),
        NegativeSource::OutsideTopK => 0,
    };
    images.extend(
        sample(rng, list.len() - 1, from_list)
            .into_iter()
            .map(|i| list[1 + i]),
    );
    draw_outside(rng, gallery, list, &mut images, want - from_list);
    QueryTuple { query, images }
}

/// Shuffles the reliable queries for `round` and cuts them into batches.
///
/// Identical inputs, config and round give identical batches.
pub fn build_batches(
    reliable: &ReliableSet,
    t2i: &TopKIndex,
    config: &AdaptationConfig,
    round: usize,
) -> Result<Vec<Batch>> {
    if reliable.is_empty() {
        return Err(Error::NoReliableQueries);
    }
    if t2i.direction() != Direction::T2I
        || t2i.k() != reliable.k()
        || t2i.n_queries() != reliable.n_queries()
    {
        return Err(Error::ShapeMismatch(
            "batches need the T2I top-K list the selection was made from".into(),
        ));
    }
    let mut rng = seed::rng_indexed(config.seed, "batches", round as u64);
    let mut order = reliable.reliable().to_vec();
    order.shuffle(&mut rng);
    let gallery = t2i.gallery_len();
    Ok(order
        .chunks(config.queries_per_batch)
        .map(|chunk| Batch {
            tuples: chunk
                .iter()
                .map(|&q| tuple_for(&mut rng, q, t2i.row(q), gallery, config))
                .collect(),
        })
        .collect())
}
