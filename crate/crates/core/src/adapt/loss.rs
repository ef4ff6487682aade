//! Weighted bidirectional entropy and its analytic gradient.
//!
//! For every (query, image) pair in a tuple the loss adds
//! `w · (h(p_t2i) + h(p_i2t))` with `h(p) = -p ln p`. `p_t2i` is a softmax over
//! the tuple's images; `p_i2t` normalizes over the image's frozen top-K texts,
//! all of which pass through the head and so receive gradient too.

use super::batch::{Batch, QueryTuple};
use super::head::CalibrationHead;
use crate::error::{Error, Result};
use crate::io::EmbeddingSet;
use crate::par;
use crate::retrieval::{Direction, TopKIndex};
use crate::uncertainty::{log_sum_exp, UncertaintyVariant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// `w` from the uncertainty of each pair. With `detach` the weight is a
    /// constant in the backward pass.
    Uncertainty {
        variant: UncertaintyVariant,
        epsilon: f64,
        detach: bool,
    },
    /// Every pair gets the same `d` and weight `1/d`.
    Fixed(f64),
}

/// Frozen inputs shared by every loss evaluation of one adaptation run.
pub struct LossContext<'a> {
    text: &'a EmbeddingSet,
    image: Vec<f64>,
    dim: usize,
    i2t: &'a TopKIndex,
}

impl<'a> LossContext<'a> {
    pub fn new(text: &'a EmbeddingSet, image: &EmbeddingSet, i2t: &'a TopKIndex) -> Result<Self> {
        if text.dim() != image.dim() {
            return Err(Error::DimMismatch {
                left: text.dim(),
                right: image.dim(),
            });
        }
        if i2t.direction() != Direction::I2T
            || i2t.n_queries() != image.count()
            || i2t.gallery_len() != text.count()
        {
            return Err(Error::ShapeMismatch(
                "I2T top-K list does not match the embedding sets".into(),
            ));
        }
        Ok(LossContext {
            text,
            image: image.data().iter().map(|&v| f64::from(v)).collect(),
            dim: image.dim(),
            i2t,
        })
    }

    fn image_row(&self, g: usize) -> &[f64] {
        &self.image[g * self.dim..(g + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub n_pairs: usize,
    pub d_sum: f64,
}

impl LossOutput {
    fn zero(dim: usize) -> Self {
        LossOutput {
            loss: 0.0,
            grad_gamma: vec![0.0; dim],
            grad_beta: vec![0.0; dim],
            n_pairs: 0,
            d_sum: 0.0,
        }
    }

    fn add(&mut self, other: &LossOutput) {
        self.loss += other.loss;
        self.n_pairs += other.n_pairs;
        self.d_sum += other.d_sum;
        for (a, b) in self.grad_gamma.iter_mut().zip(&other.grad_gamma) {
            *a += b;
        }
        for (a, b) in self.grad_beta.iter_mut().zip(&other.grad_beta) {
            *a += b;
        }
    }

    pub fn mean_d(&self) -> f64 {
        if self.n_pairs == 0 {
            0.0
        } else {
            self.d_sum / self.n_pairs as f64
        }
    }

    /// Gradient in `[γ; β]` order.
    pub fn grad(&self) -> Vec<f64> {
        let mut g = self.grad_gamma.clone();
        g.extend_from_slice(&self.grad_beta);
        g
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_gamma
            .iter()
            .chain(&self.grad_beta)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn entropy_term(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Calibrated text rows touched by one tuple, with their gradient buffers.
struct TextCache {
    index: Vec<usize>,
    raw: Vec<Vec<f64>>,
    unit: Vec<Vec<f64>>,
    norm: Vec<f64>,
    grad: Vec<Vec<f64>>,
}

impl TextCache {
    fn new() -> Self {
        TextCache {
            index: Vec::new(),
            raw: Vec::new(),
            unit: Vec::new(),
            norm: Vec::new(),
            grad: Vec::new(),
        }
    }

    fn slot(&mut self, j: usize, ctx: &LossContext, head: &CalibrationHead) -> Result<usize> {
        if let Some(s) = self.index.iter().position(|&i| i == j) {
            return Ok(s);
        }
        let e: Vec<f64> = ctx.text.row(j).iter().map(|&v| f64::from(v)).collect();
        let mut u = vec![0.0; ctx.dim];
        head.affine(&e, &mut u);
        let norm = dot(&u, &u).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroVectorRow(j));
        }
        u.iter_mut().for_each(|v| *v /= norm);
        self.index.push(j);
        self.raw.push(e);
        self.unit.push(u);
        self.norm.push(norm);
        self.grad.push(vec![0.0; ctx.dim]);
        Ok(self.index.len() - 1)
    }

    fn accumulate(&mut self, slot: usize, ds: f64, image_row: &[f64]) {
        for (g, v) in self.grad[slot].iter_mut().zip(image_row) {
            *g += ds * v;
        }
    }

    /// Pushes `dL/dt` back through the normalization and the affine map.
    fn backprop(&self, out: &mut LossOutput) {
        for s in 0..self.index.len() {
            let t = &self.unit[s];
            let gt = &self.grad[s];
            let proj = dot(t, gt);
            for d in 0..t.len() {
                let gu = (gt[d] - t[d] * proj) / self.norm[s];
                out.grad_gamma[d] += gu * self.raw[s][d];
                out.grad_beta[d] += gu;
            }
        }
    }
}

fn tuple_loss(
    ctx: &LossContext,
    head: &CalibrationHead,
    tuple: &QueryTuple,
    mode: WeightMode,
) -> Result<LossOutput> {
    let mut cache = TextCache::new();
    let sq = cache.slot(tuple.query, ctx, head)?;
    let m = tuple.images.len();
    let s: Vec<f64> = tuple
        .images
        .iter()
        .map(|&g| dot(&cache.unit[sq], ctx.image_row(g)))
        .collect();
    let row_lse = log_sum_exp(s.iter().copied());
    let a: Vec<f64> = s.iter().map(|v| (v - row_lse).exp()).collect();

    // Column side: every text in the image's top-K list, with its share.
    let mut columns = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for (i, &g) in tuple.images.iter().enumerate() {
        let mut slots = Vec::with_capacity(ctx.i2t.k());
        let mut col = Vec::with_capacity(ctx.i2t.k());
        for &j in ctx.i2t.row(g) {
            let sj = cache.slot(j, ctx, head)?;
            slots.push(sj);
            col.push(dot(&cache.unit[sj], ctx.image_row(g)));
        }
        let lse = log_sum_exp(col.iter().copied());
        b.push((s[i] - lse).exp());
        let pi: Vec<f64> = col.iter().map(|v| (v - lse).exp()).collect();
        columns.push((slots, pi));
    }

    let mut out = LossOutput::zero(ctx.dim);
    let mut dl_da = vec![0.0; m];
    let mut dl_db = vec![0.0; m];
    for i in 0..m {
        let (w, dw_da, dw_db, d) = match mode {
            WeightMode::Uncertainty {
                variant,
                epsilon,
                detach,
            } => {
                let (w, ga, gb) = variant.weight_with_grad(a[i], b[i], epsilon);
                let d = variant.score(a[i], b[i], epsilon);
                if detach {
                    (w, 0.0, 0.0, d)
                } else {
                    (w, ga, gb, d)
                }
            }
            WeightMode::Fixed(d) => (1.0 / d, 0.0, 0.0, d),
        };
        let h = entropy_term(a[i]) + entropy_term(b[i]);
        let term = w * h;
        dl_da[i] = -w * (a[i].ln() + 1.0) + h * dw_da;
        dl_db[i] = -w * (b[i].ln() + 1.0) + h * dw_db;
        if !(term.is_finite() && dl_da[i].is_finite() && dl_db[i].is_finite()) {
            return Err(Error::NonFiniteLoss {
                query: tuple.query,
                candidate: tuple.images[i],
            });
        }
        out.loss += term;
        out.d_sum += d;
        out.n_pairs += 1;
    }

    let mean_grad: f64 = dl_da.iter().zip(&a).map(|(g, p)| g * p).sum();
    for (i, &g) in tuple.images.iter().enumerate() {
        let v = ctx.image_row(g);
        let ds_row = a[i] * (dl_da[i] - mean_grad) + dl_db[i] * b[i];
        cache.accumulate(sq, ds_row, v);
        let (slots, pi) = &columns[i];
        for (&sj, &p) in slots.iter().zip(pi) {
            cache.accumulate(sj, -dl_db[i] * b[i] * p, v);
        }
    }
    cache.backprop(&mut out);
    Ok(out)
}

/// Summed loss and gradient over a batch. Tuples run in parallel and are
/// reduced in batch order, so the result does not depend on thread count.
pub fn batch_loss(
    ctx: &LossContext,
    head: &CalibrationHead,
    batch: &Batch,
    mode: WeightMode,
) -> Result<LossOutput> {
    if head.dim() != ctx.dim {
        return Err(Error::DimMismatch {
            left: head.dim(),
            right: ctx.dim,
        });
    }
    let parts = par::map_slice(&batch.tuples, |t| tuple_loss(ctx, head, t, mode));
    let mut out = LossOutput::zero(ctx.dim);
    for part in parts {
        out.add(&part?);
    }
    Ok(out)
}

pub fn uatta_loss(
    ctx: &LossContext,
    head: &CalibrationHead,
    batch: &Batch,
    variant: UncertaintyVariant,
    epsilon: f64,
    detach: bool,
) -> Result<LossOutput> {
    batch_loss(
        ctx,
        head,
        batch,
        WeightMode::Uncertainty {
            variant,
            epsilon,
            detach,
        },
    )
}

/// Unweighted entropy, `d ≡ 1` for every pair.
pub fn tent_loss(ctx: &LossContext, head: &CalibrationHead, batch: &Batch) -> Result<LossOutput> {
    batch_loss(ctx, head, batch, WeightMode::Fixed(1.0))
}


#[cfg(test)]
mod props {
    use super::tests::random_set;
    use super::*;
    use crate::adapt::{build_batches, AdaptationConfig};
    use crate::ccs::select_reliable;
    use crate::io::Modality;
    use crate::retrieval::{cosine_similarity, topk};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weighted_entropy_is_bounded(
            seed in 0u64..1000,
            shift in proptest::collection::vec(-0.5f64..0.5, 16),
            v in proptest::sample::select(UncertaintyVariant::ALL.to_vec()),
            detach in any::<bool>(),
        ) {
            let dim = 8;
            let text = random_set(Modality::Text, 12, dim, seed);
            let image = random_set(Modality::Image, 10, dim, seed + 1);
            let s = cosine_similarity(&text, &image).unwrap();
            let k = 3;
            let reliable = select_reliable(&s, k).unwrap();
            prop_assume!(!reliable.is_empty());
            let t2i = topk(&s, k, Direction::T2I).unwrap();
            let i2t = topk(&s, k, Direction::I2T).unwrap();
            let config = AdaptationConfig { k, ..Default::default() };
            let batch = build_batches(&reliable, &t2i, &config, 0).unwrap().remove(0);
            let mut head = CalibrationHead::identity(dim);
            let mut p = head.params();
            for (x, d) in p.iter_mut().zip(&shift) {
                *x += d;
            }
            head.set_params(&p);
            let ctx = LossContext::new(&text, &image, &i2t).unwrap();
            let weighted = uatta_loss(&ctx, &head, &batch, v, 1e-8, detach).unwrap();
            let plain = tent_loss(&ctx, &head, &batch).unwrap();
            prop_assert_eq!(weighted.n_pairs, batch.n_pairs());
            prop_assert!(weighted.loss >= 0.0);
            prop_assert!(weighted.loss <= plain.loss * (1.0 + 1e-12));
            prop_assert!(plain.loss <= 2.0 * batch.n_pairs() as f64 / std::f64::consts::E);
            prop_assert!(weighted.grad().iter().all(|g| g.is_finite()));
        }
    }
}
