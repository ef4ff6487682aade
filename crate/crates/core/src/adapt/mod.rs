//! Test-time adaptation of the text calibration head.

mod batch;
mod config;
mod head;
mod loss;
mod optim;

use std::io::{Read, Write};

use serde::Serialize;

pub use batch::{build_batches, Batch, QueryTuple};
pub use config::{
    AdaptationConfig, NegativeSource, Objective, LARGE_TEST_SET, ROUNDS_LARGE, ROUNDS_SMALL,
};
pub use head::{apply_head, calibrated_similarity, CalibrationHead, HEAD_MAGIC};
pub use loss::{batch_loss, tent_loss, uatta_loss, LossContext, LossOutput, WeightMode};
pub use optim::{AdamState, AdamW};

use crate::ccs::{select_from_topk, ReliableSet};
use crate::error::{Error, Result};
use crate::io::{l2_normalize, EmbeddingSet};
use crate::retrieval::{evaluate, topk, Direction, RetrievalMetrics, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean over the round's batches of the summed batch loss.
    pub loss: f64,
    pub mean_d: f64,
    /// Mean over batches of the gradient's L2 norm.
    pub grad_norm: f64,
    pub r1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AdaptationHistory {
    pub n_queries: usize,
    pub n_reliable: usize,
    pub rounds: Vec<RoundRecord>,
}

impl AdaptationHistory {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.loss).collect()
    }

    pub fn mean_d(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.mean_d).collect()
    }

    pub fn r1(&self) -> Option<Vec<f64>> {
        self.rounds.iter().map(|r| r.r1).collect()
    }

    /// `round,loss,mean_d,grad_norm[,r1]`; the r1 column only when tracked.
    /// Floats use the shortest text that parses back to the same value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let with_r1 = self.rounds.iter().any(|r| r.r1.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["round", "loss", "mean_d", "grad_norm"];
        if with_r1 {
            header.push("r1");
        }
        w.write_record(&header)?;
        for r in &self.rounds {
            let mut rec = vec![
                r.round.to_string(),
                r.loss.to_string(),
                r.mean_d.to_string(),
                r.grad_norm.to_string(),
            ];
            if with_r1 {
                rec.push(r.r1.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<history>", e))?;
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv). The counts are not part of the CSV.
    pub fn read_csv<R: Read>(reader: R, n_queries: usize, n_reliable: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let with_r1 = r.headers()?.iter().any(|h| h == "r1");
        let mut rounds = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::ShapeMismatch(format!("history row {line}: bad {what}"));
            let num = |i: usize, what: &str| -> Result<f64> {
                rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(what))
            };
            rounds.push(RoundRecord {
                round: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("round"))?,
                loss: num(1, "loss")?,
                mean_d: num(2, "mean_d")?,
                grad_norm: num(3, "grad_norm")?,
                r1: match rec.get(4) {
                    Some(v) if with_r1 && !v.is_empty() => Some(num(4, "r1")?),
                    _ => None,
                },
            });
        }
        Ok(AdaptationHistory {
            n_queries,
            n_reliable,
            rounds,
        })
    }
}

fn check_inputs(text: &EmbeddingSet, image: &EmbeddingSet, s: &SimilarityMatrix) -> Result<()> {
    if text.dim() != image.dim() {
        return Err(Error::DimMismatch {
            left: text.dim(),
            right: image.dim(),
        });
    }
    if s.n_text() != text.count() || s.n_image() != image.count() {
        return Err(Error::ShapeMismatch(format!(
            "score matrix {}×{} for {} texts and {} images",
            s.n_text(),
            s.n_image(),
            text.count(),
            image.count()
        )));
    }
    Ok(())
}

/// Runs the whole adaptation. A pure function of its inputs and `config.seed`.
///
/// When both sets carry labels, R@1 of the current head is recorded after
/// every round.
pub fn adapt(
    text: &EmbeddingSet,
    image: &EmbeddingSet,
    s: &SimilarityMatrix,
    config: &AdaptationConfig,
) -> Result<(CalibrationHead, AdaptationHistory)> {
    config.validate()?;
    check_inputs(text, image, s)?;
    let max_k = s.n_text().min(s.n_image());
    if config.k > max_k {
        return Err(Error::KOutOfRange {
            k: config.k,
            max: max_k,
        });
    }
    let t2i = topk(s, config.k, Direction::T2I)?;
    let i2t = topk(s, config.k, Direction::I2T)?;
    let reliable = match config.objective {
        Objective::Uatta => select_from_topk(&t2i, &i2t)?,
        Objective::Tent => ReliableSet::everything(&t2i),
    };
    if reliable.is_empty() {
        return Err(Error::NoReliableQueries);
    }
    let mode = match config.objective {
        Objective::Uatta => WeightMode::Uncertainty {
            variant: config.uncertainty_variant,
            epsilon: config.epsilon,
            detach: config.detach_uncertainty,
        },
        Objective::Tent => WeightMode::Fixed(1.0),
    };
    let labels = text.labels().zip(image.labels());
    let ctx = LossContext::new(text, image, &i2t)?;
    let opt = AdamW {
        lr: config.learning_rate,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    };

    let mut head = CalibrationHead::identity(text.dim());
    let mut params = head.params();
    let mut state = AdamState::new(params.len());
    let mut history = AdaptationHistory {
        n_queries: reliable.n_queries(),
        n_reliable: reliable.reliable().len(),
        rounds: Vec::new(),
    };
    for round in 0..config.rounds_for(history.n_reliable) {
        let batches = build_batches(&reliable, &t2i, config, round)?;
        let (mut loss, mut grad_norm, mut d_sum, mut pairs) = (0.0, 0.0, 0.0, 0usize);
        for batch in &batches {
            let out = batch_loss(&ctx, &head, batch, mode)?;
            opt.step(&mut params, &out.grad(), &mut state);
            head.set_params(&params);
            if !head.is_finite() {
                let t = &batch.tuples[0];
                return Err(Error::NonFiniteLoss {
                    query: t.query,
                    candidate: t.pseudo_positive(),
                });
            }
            loss += out.loss;
            grad_norm += out.grad_norm();
            d_sum += out.d_sum;
            pairs += out.n_pairs;
        }
        let r1 = match labels {
            Some((ql, gl)) => {
                let s_now = calibrated_similarity(&head, text, image)?;
                Some(evaluate(&s_now, Some(ql), Some(gl))?.r1)
            }
            None => None,
        };
        let nb = batches.len() as f64;
        history.rounds.push(RoundRecord {
            round,
            loss: loss / nb,
            mean_d: d_sum / pairs.max(1) as f64,
            grad_norm: grad_norm / nb,
            r1,
        });
    }
    head.round_to_f32();
    Ok((head, history))
}

/// Output of [`run`]. Metrics are present when both sets carry labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationRun {
    pub head: CalibrationHead,
    pub history: AdaptationHistory,
    pub before: Option<RetrievalMetrics>,
    pub after: Option<RetrievalMetrics>,
}

fn normalized(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.is_normalized() {
        Ok(set.clone())
    } else {
        l2_normalize(set)
    }
}

/// Normalize, score, adapt and re-evaluate.
///
/// Baseline scores go through the identity head, the same path as the adapted
/// scores, so a run that leaves the head at identity reproduces the baseline
/// metrics bit for bit.
pub fn run(
    text: &EmbeddingSet,
    image: &EmbeddingSet,
    config: &AdaptationConfig,
) -> Result<AdaptationRun> {
    let text = normalized(text)?;
    let image = normalized(image)?;
    let baseline = calibrated_similarity(&CalibrationHead::identity(text.dim()), &text, &image)?;
    let (head, history) = adapt(&text, &image, &baseline, config)?;
    let labels = text.labels().zip(image.labels());
    let (before, after) = match labels {
        Some((ql, gl)) => {
            let adapted = calibrated_similarity(&head, &text, &image)?;
            (
                Some(evaluate(&baseline, Some(ql), Some(gl))?),
                Some(evaluate(&adapted, Some(ql), Some(gl))?),
            )
        }
        None => (None, None),
    };
    Ok(AdaptationRun {
        head,
        history,
        before,
        after,
    })
}
