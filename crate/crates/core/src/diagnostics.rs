//! TP/FP uncertainty statistics and run reports.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::adapt::AdaptationHistory;
use crate::ccs::ReliableSet;
use crate::error::{Error, Result};
use crate::retrieval::{topk, Direction, RetrievalMetrics, SimilarityMatrix};
use crate::simulator::{label_pairs, PairTag};
use crate::uncertainty::{pair_probabilities_with, UncertaintyVariant};

pub const DEFAULT_BINS: usize = 20;

/// Equal-width bins over a variant's range with TP and FP counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub variant: UncertaintyVariant,
    /// `n_bins + 1` edges.
    pub edges: Vec<f64>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
}

impl Histogram {
    pub fn n_bins(&self) -> usize {
        self.tp.len()
    }

    pub fn total(&self) -> usize {
        self.tp.iter().chain(&self.fp).sum()
    }

    /// `bin_low,bin_high,tp,fp`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_low", "bin_high", "tp", "fp"])?;
        for b in 0..self.n_bins() {
            w.write_record([
                format!("{:.6}", self.edges[b]),
                format!("{:.6}", self.edges[b + 1]),
                self.tp[b].to_string(),
                self.fp[b].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<histogram>", e))?;
        Ok(())
    }

    /// Two-series bar chart, TP and FP side by side in each bin.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 320.0, 40.0);
        let peak = self.tp.iter().chain(&self.fp).copied().max().unwrap_or(0).max(1) as f64;
        let slot = (w - 2.0 * pad) / self.n_bins() as f64;
        let bar = slot * 0.4;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{pad}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#,
            y = h - pad,
            x = w - pad
        );
        for b in 0..self.n_bins() {
            let x0 = pad + b as f64 * slot + slot * 0.1;
            for (i, (count, color)) in [(self.tp[b], "#2b8cbe"), (self.fp[b], "#e34a33")]
                .into_iter()
                .enumerate()
            {
                let bh = (h - 2.0 * pad) * count as f64 / peak;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.2}" y="{:.2}" width="{bar:.2}" height="{bh:.2}" fill="{color}"/>"#,
                    x0 + i as f64 * bar,
                    h - pad - bh
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{pad}" y="{}" font-size="12">d ({}) from {:.3} to {:.3}; blue TP, red FP</text>"#,
            pad * 0.6,
            self.variant,
            self.edges[0],
            self.edges[self.n_bins()]
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn check_aligned(scores: &[f64], tags: &[PairTag]) -> Result<()> {
    if scores.len() != tags.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: tags.len(),
        });
    }
    Ok(())
}

pub fn uncertainty_histogram(
    scores: &[f64],
    tags: &[PairTag],
    variant: UncertaintyVariant,
    epsilon: f64,
    n_bins: usize,
) -> Result<Histogram> {
    check_aligned(scores, tags)?;
    if n_bins < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 bins, got {n_bins}")));
    }
    let (lo, hi) = variant.range(epsilon);
    let width = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..n_bins).map(|b| lo + b as f64 * width).collect();
    edges.push(hi);
    let mut tp = vec![0; n_bins];
    let mut fp = vec![0; n_bins];
    for (&d, &tag) in scores.iter().zip(tags) {
        let pos = ((d - lo) / width).floor();
        let b = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(n_bins - 1)
        };
        match tag {
            PairTag::TruePositive => tp[b] += 1,
            PairTag::FalsePositive => fp[b] += 1,
        }
    }
    Ok(Histogram {
        variant,
        edges,
        tp,
        fp,
    })
}

/// ROC AUC of `d` as a false-positive detector; ties count one half.
pub fn separation_auc(scores: &[f64], tags: &[PairTag]) -> Result<f64> {
    check_aligned(scores, tags)?;
    let n_fp = tags.iter().filter(|t| t.is_false_positive()).count();
    let n_tp = tags.len() - n_fp;
    if n_fp == 0 || n_tp == 0 {
        return Err(Error::DegenerateClasses);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the midrank keeps every quantity an exact integer.
    let mut fp_rank2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + j + 2) as u64;
        fp_rank2 += mid2 * order[i..=j].iter().filter(|&&k| tags[k].is_false_positive()).count() as u64;
        i = j + 1;
    }
    let (n_fp, n_tp) = (n_fp as u64, n_tp as u64);
    let u2 = fp_rank2 - n_fp * (n_fp + 1);
    Ok(u2 as f64 / (2 * n_fp * n_tp) as f64)
}

/// Uncertainty and TP/FP tag of every query's rank-1 pair before adaptation.
pub fn rank1_uncertainty(
    s: &SimilarityMatrix,
    k: usize,
    variant: UncertaintyVariant,
    epsilon: f64,
    query_labels: Option<&[i32]>,
    gallery_labels: Option<&[i32]>,
) -> Result<(Vec<f64>, Vec<PairTag>)> {
    let t2i = topk(s, k, Direction::T2I)?;
    let i2t = topk(s, k, Direction::I2T)?;
    let tags = label_pairs(&t2i, query_labels, gallery_labels)?;
    let probs = pair_probabilities_with(s, &ReliableSet::everything(&t2i), &i2t)?;
    let d = probs
        .chunks_exact(k)
        .map(|row| variant.score(row[0].p_t2i, row[0].p_i2t, epsilon))
        .collect();
    Ok((d, tags))
}

/// Mean of the scores tagged `tag`, if any.
pub fn class_mean(scores: &[f64], tags: &[PairTag], tag: PairTag) -> Option<f64> {
    let picked: Vec<f64> = scores
        .iter()
        .zip(tags)
        .filter(|(_, &t)| t == tag)
        .map(|(&d, _)| d)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricDeltas {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub loss: Vec<f64>,
    pub mean_d: Vec<f64>,
    pub grad_norm: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub before: RetrievalMetrics,
    pub after: RetrievalMetrics,
    pub delta: MetricDeltas,
    pub n_queries: usize,
    pub n_reliable: usize,
    pub rounds: usize,
    pub curves: Curves,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn compare_report(
    before: &RetrievalMetrics,
    after: &RetrievalMetrics,
    history: &AdaptationHistory,
) -> Report {
    Report {
        before: *before,
        after: *after,
        delta: MetricDeltas {
            r1: after.r1 - before.r1,
            r5: after.r5 - before.r5,
            r10: after.r10 - before.r10,
            map: after.map - before.map,
        },
        n_queries: history.n_queries,
        n_reliable: history.n_reliable,
        rounds: history.len(),
        curves: curves(history),
    }
}

/// Round-wise series of a history, one entry per round.
pub fn curves(history: &AdaptationHistory) -> Curves {
    Curves {
        loss: history.losses(),
        mean_d: history.mean_d(),
        grad_norm: history.rounds.iter().map(|r| r.grad_norm).collect(),
        r1: history.r1().filter(|v| !v.is_empty()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::RoundRecord;
    use std::f64::consts::E;
    use PairTag::*;

    #[test]
    fn hand_auc() {
        let auc = separation_auc(
            &[1.0, 2.0, 1.5, 3.0],
            &[TruePositive, TruePositive, FalsePositive, FalsePositive],
        )
        .unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_extremes() {
        let tags = [TruePositive, FalsePositive, TruePositive, FalsePositive];
        assert_eq!(separation_auc(&[1.0, 5.0, 2.0, 6.0], &tags).unwrap(), 1.0);
        assert_eq!(separation_auc(&[2.0; 4], &tags).unwrap(), 0.5);
        assert!(matches!(
            separation_auc(&[1.0, 2.0], &[TruePositive, TruePositive]),
            Err(Error::DegenerateClasses)
        ));
        assert!(matches!(
            separation_auc(&[1.0], &tags),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn histogram_edges_and_mass() {
        let v = UncertaintyVariant::NormalizedDiffExp;
        let h = uncertainty_histogram(&[1.0; 5], &[TruePositive; 5], v, 1e-8, DEFAULT_BINS).unwrap();
        assert_eq!(h.tp[0], 5);
        assert_eq!(h.total(), 5);
        assert_eq!(h.edges.len(), 21);
        assert_eq!((h.edges[0], h.edges[20]), (1.0, E * E));

        let h = uncertainty_histogram(
            &[1.0, E * E, 1.0, E * E],
            &[TruePositive, FalsePositive, TruePositive, FalsePositive],
            v,
            1e-8,
            4,
        )
        .unwrap();
        assert_eq!(h.tp, vec![2, 0, 0, 0]);
        assert_eq!(h.fp, vec![0, 0, 0, 2]);
        let mut csv = Vec::new();
        h.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("bin_low,bin_high,tp,fp\n1.000000,"));
        let svg = h.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(uncertainty_histogram(&[1.0], &[TruePositive], v, 1e-8, 1).is_err());
    }

    fn metrics(r1: f64) -> RetrievalMetrics {
        RetrievalMetrics {
            r1,
            r5: 0.8,
            r10: 0.9,
            map: 0.5,
            n_queries: 10,
        }
    }

    #[test]
    fn report_deltas_and_curves() {
        let history = AdaptationHistory {
            n_queries: 10,
            n_reliable: 7,
            rounds: (0..3)
                .map(|round| RoundRecord {
                    round,
                    loss: 1.0,
                    mean_d: 1.1,
                    grad_norm: 0.1,
                    r1: Some(0.6),
                })
                .collect(),
        };
        let same = compare_report(&metrics(0.5), &metrics(0.5), &history);
        assert_eq!(same.delta.r1, 0.0);
        assert_eq!(same.delta.map, 0.0);
        let r = compare_report(&metrics(0.595), &metrics(0.6185), &history);
        assert!((r.delta.r1 - 0.0235).abs() < 1e-12);
        assert_eq!(r.curves.loss.len(), 3);
        assert_eq!(r.curves.r1.as_ref().map(Vec::len), Some(3));
        assert!(r.to_json().unwrap().contains("\"delta\""));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<PairTag>)> {
        proptest::collection::vec((0u8..6, any::<bool>()), 2..40).prop_map(|v| {
            v.into_iter()
                .map(|(d, fp)| {
                    let tag = if fp { PairTag::FalsePositive } else { PairTag::TruePositive };
                    (1.0 + f64::from(d) / 4.0, tag)
                })
                .unzip()
        })
    }

    proptest! {
        #[test]
        fn auc_counts_pairs((d, tags) in scored()) {
            let fp: Vec<f64> = d.iter().zip(&tags).filter(|(_, t)| t.is_false_positive()).map(|(&x, _)| x).collect();
            let tp: Vec<f64> = d.iter().zip(&tags).filter(|(_, t)| !t.is_false_positive()).map(|(&x, _)| x).collect();
            prop_assume!(!fp.is_empty() && !tp.is_empty());
            let mut wins = 0.0;
            for &f in &fp {
                for &t in &tp {
                    wins += if f > t { 1.0 } else if f == t { 0.5 } else { 0.0 };
                }
            }
            let expect = wins / (fp.len() * tp.len()) as f64;
            prop_assert!((separation_auc(&d, &tags).unwrap() - expect).abs() < 1e-12);
        }

        #[test]
        fn histogram_keeps_every_pair((d, tags) in scored(), bins in 2usize..30) {
            let v = UncertaintyVariant::NormalizedDiffExp;
            let h = uncertainty_histogram(&d, &tags, v, 1e-8, bins).unwrap();
            prop_assert_eq!(h.n_bins(), bins);
            prop_assert_eq!(h.total(), d.len());
            let n_fp = tags.iter().filter(|t| t.is_false_positive()).count();
            prop_assert_eq!(h.fp.iter().sum::<usize>(), n_fp);
            prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
