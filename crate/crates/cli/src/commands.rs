use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uatta_core::adapt::{
    self, apply_head, calibrated_similarity, AdaptationHistory, CalibrationHead, Objective,
};
use uatta_core::ccs::{select_reliable, ReliableSet};
use uatta_core::diagnostics::{
    class_mean, compare_report, curves, rank1_uncertainty, separation_auc, uncertainty_histogram,
    Curves,
};
use uatta_core::io::{l2_normalize, load_embeddings, load_scores, EmbeddingSet};
use uatta_core::retrieval::{self, topk, Direction, RetrievalMetrics, SimilarityMatrix};
use uatta_core::simulator::{generate, write_dataset, PairTag};
use uatta_core::uncertainty::{brd_uncertainty, pair_probabilities, write_uncertainty_csv};
use uatta_core::Error as CoreError;

use crate::error::{CliError, CliResult};
use crate::{Baseline, Inputs, Resolved};

pub const HEAD_FILE: &str = "head.uch";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const BEFORE_FILE: &str = "metrics_before.json";
pub const AFTER_FILE: &str = "metrics_after.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

enum Loaded {
    Embeddings {
        text: EmbeddingSet,
        image: EmbeddingSet,
    },
    Scores {
        s: SimilarityMatrix,
        text: Option<EmbeddingSet>,
        image: Option<EmbeddingSet>,
    },
}

impl Loaded {
    fn open(inputs: &Inputs) -> CliResult<Loaded> {
        let text = inputs.text.as_deref().map(load_embeddings).transpose()?;
        let image = inputs.image.as_deref().map(load_embeddings).transpose()?;
        match (&inputs.scores, text, image) {
            (Some(path), text, image) => {
                let s = load_scores(path)?;
                for (set, n) in [(&text, s.n_text()), (&image, s.n_image())] {
                    if let Some(set) = set {
                        if set.count() != n {
                            return Err(CoreError::LengthMismatch {
                                left: set.count(),
                                right: n,
                            }
                            .into());
                        }
                    }
                }
                Ok(Loaded::Scores { s, text, image })
            }
            (None, Some(text), Some(image)) => Ok(Loaded::Embeddings {
                text: if text.is_normalized() { text } else { l2_normalize(&text)? },
                image: if image.is_normalized() { image } else { l2_normalize(&image)? },
            }),
            _ => Err(CliError::Usage(
                "give --text and --image, or --scores".into(),
            )),
        }
    }

    /// Baseline scores; embeddings go through the identity head.
    fn similarity(&self) -> CliResult<SimilarityMatrix> {
        match self {
            Loaded::Embeddings { text, image } => Ok(calibrated_similarity(
                &CalibrationHead::identity(text.dim()),
                text,
                image,
            )?),
            Loaded::Scores { s, .. } => Ok(s.clone()),
        }
    }

    fn sets(&self) -> (Option<&EmbeddingSet>, Option<&EmbeddingSet>) {
        match self {
            Loaded::Embeddings { text, image } => (Some(text), Some(image)),
            Loaded::Scores { text, image, .. } => (text.as_ref(), image.as_ref()),
        }
    }

    fn labels(&self) -> (Option<&[i32]>, Option<&[i32]>) {
        let (t, i) = self.sets();
        (t.and_then(|s| s.labels()), i.and_then(|s| s.labels()))
    }

    fn ids(&self) -> (Option<&[String]>, Option<&[String]>) {
        let (t, i) = self.sets();
        (t.map(|s| s.ids()), i.map(|s| s.ids()))
    }
}

fn out_dir(res: &Resolved) -> CliResult<&Path> {
    let dir = res
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --out".into()))?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(CoreError::from)?)
}

pub fn simulate(res: &Resolved) -> CliResult<()> {
    let dir = out_dir(res)?;
    let spec = &res.config.simulate;
    let (text, image) = generate(spec)?;
    write_dataset(spec, &text, &image, dir)?;
    println!(
        "wrote {} texts and {} images (dim {}) to {}",
        text.count(),
        image.count(),
        spec.dim,
        dir.display()
    );
    Ok(())
}

pub fn select(res: &Resolved, inputs: &Inputs) -> CliResult<()> {
    let loaded = Loaded::open(inputs)?;
    let reliable = select_reliable(&loaded.similarity()?, res.config.adapt.k)?;
    let dump = reliable.to_json()? + "\n";
    match res.out.as_deref() {
        Some(_) => {
            write(out_dir(res)?, SELECTION_FILE, &dump)?;
            println!(
                "{} of {} queries reliable at k = {}",
                reliable.reliable().len(),
                reliable.n_queries(),
                reliable.k()
            );
        }
        None => print!("{dump}"),
    }
    Ok(())
}

/// Report for label-free inputs: the curves without metrics.
#[derive(Serialize)]
struct CurvesOnly {
    n_queries: usize,
    n_reliable: usize,
    rounds: usize,
    curves: Curves,
}

pub fn adapt(res: &Resolved, inputs: &Inputs) -> CliResult<()> {
    let loaded = Loaded::open(inputs)?;
    let config = &res.config.adapt;
    config.validate()?;
    let dir = out_dir(res)?;
    let s = loaded.similarity()?;
    let t2i = topk(&s, config.k, Direction::T2I)?;
    let training = match config.objective {
        Objective::Tent if res.baseline != Baseline::None => ReliableSet::everything(&t2i),
        _ => select_reliable(&s, config.k)?,
    };

    let (head, history) = match (&loaded, res.baseline) {
        (_, Baseline::None) => {
            let dim = loaded.sets().0.map_or(0, |t| t.dim());
            let history = AdaptationHistory {
                n_queries: training.n_queries(),
                n_reliable: training.reliable().len(),
                rounds: Vec::new(),
            };
            (CalibrationHead::identity(dim), history)
        }
        (Loaded::Scores { .. }, _) => return Err(CliError::ExternalScoresCannotAdapt),
        (Loaded::Embeddings { text, image }, _) => adapt::adapt(text, image, &s, config)?,
    };
    let after_s = match &loaded {
        Loaded::Embeddings { text, image } => calibrated_similarity(&head, text, image)?,
        Loaded::Scores { s, .. } => s.clone(),
    };

    if let Loaded::Embeddings { .. } = loaded {
        head.save(dir.join(HEAD_FILE))?;
    }
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write(dir, HISTORY_FILE, csv)?;
    write(dir, SELECTION_FILE, training.to_json()? + "\n")?;
    write(dir, RESOLVED_CONFIG_FILE, res.config.to_toml())?;

    let (ql, gl) = loaded.labels();
    if ql.is_some() && gl.is_some() {
        let before = retrieval::evaluate(&s, ql, gl)?;
        let after = retrieval::evaluate(&after_s, ql, gl)?;
        write(dir, BEFORE_FILE, json(&before)?)?;
        write(dir, AFTER_FILE, json(&after)?)?;
        let report = compare_report(&before, &after, &history);
        write(dir, REPORT_FILE, report.to_json()?)?;
        println!(
            "R@1 {:.4} -> {:.4} ({:+.2} pts), mAP {:.4} -> {:.4}; {} of {} queries trained on, {} rounds",
            before.r1,
            after.r1,
            100.0 * report.delta.r1,
            before.map,
            after.map,
            history.n_reliable,
            history.n_queries,
            history.len()
        );
    } else {
        let report = CurvesOnly {
            n_queries: history.n_queries,
            n_reliable: history.n_reliable,
            rounds: history.len(),
            curves: curves(&history),
        };
        write(dir, REPORT_FILE, json(&report)?)?;
        println!(
            "adapted over {} rounds on {} of {} queries; no labels, so no metrics",
            history.len(),
            history.n_reliable,
            history.n_queries
        );
    }
    Ok(())
}

pub fn evaluate_cmd(
    res: &Resolved,
    inputs: &Inputs,
    head: Option<&Path>,
) -> CliResult<RetrievalMetrics> {
    let loaded = Loaded::open(inputs)?;
    let s = match (head, &loaded) {
        (None, _) => loaded.similarity()?,
        (Some(path), Loaded::Embeddings { text, image }) => {
            let head = CalibrationHead::load(path)?;
            retrieval::cosine_similarity(&apply_head(&head, text)?, image)?
        }
        (Some(_), Loaded::Scores { .. }) => return Err(CliError::ExternalScoresCannotAdapt),
    };
    let (ql, gl) = loaded.labels();
    let metrics = retrieval::evaluate(&s, ql, gl)?;
    let line = metrics.to_json() + "\n";
    if res.out.is_some() {
        write(out_dir(res)?, "metrics.json", &line)?;
    }
    print!("{line}");
    Ok(metrics)
}

pub fn evaluate(res: &Resolved, inputs: &Inputs, head: Option<&Path>) -> CliResult<()> {
    evaluate_cmd(res, inputs, head).map(|_| ())
}

#[derive(Serialize)]
struct DiagnoseSummary {
    k: usize,
    variant: String,
    n_queries: usize,
    n_tp: usize,
    n_fp: usize,
    mean_d_tp: Option<f64>,
    mean_d_fp: Option<f64>,
    /// `null` when every rank-1 pair is TP, or every one is FP.
    auc: Option<f64>,
}

pub fn diagnose(res: &Resolved, inputs: &Inputs) -> CliResult<()> {
    let loaded = Loaded::open(inputs)?;
    let dir = out_dir(res)?;
    let a = &res.config.adapt;
    let s = loaded.similarity()?;
    let (ql, gl) = loaded.labels();
    let (d, tags) = rank1_uncertainty(&s, a.k, a.uncertainty_variant, a.epsilon, ql, gl)?;

    let hist = uncertainty_histogram(&d, &tags, a.uncertainty_variant, a.epsilon, res.config.diagnose.bins)?;
    let mut csv = Vec::new();
    hist.write_csv(&mut csv)?;
    write(dir, "histogram.csv", csv)?;
    write(dir, "histogram.svg", hist.to_svg())?;

    let reliable = select_reliable(&s, a.k)?;
    let probs = pair_probabilities(&s, &reliable, a.k)?;
    let scores: Vec<_> = probs
        .iter()
        .map(|p| brd_uncertainty(p, a.uncertainty_variant, a.epsilon))
        .collect();
    let (tid, iid) = loaded.ids();
    let mut csv = Vec::new();
    write_uncertainty_csv(&mut csv, &probs, &scores, tid, iid)?;
    write(dir, "uncertainty.csv", csv)?;

    let auc = match separation_auc(&d, &tags) {
        Ok(v) => Some(v),
        Err(CoreError::DegenerateClasses) => {
            eprintln!("note: rank-1 pairs are all one class; AUC undefined");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let n_fp = tags.iter().filter(|t| t.is_false_positive()).count();
    let summary = DiagnoseSummary {
        k: a.k,
        variant: a.uncertainty_variant.to_string(),
        n_queries: tags.len(),
        n_tp: tags.len() - n_fp,
        n_fp,
        mean_d_tp: class_mean(&d, &tags, PairTag::TruePositive),
        mean_d_fp: class_mean(&d, &tags, PairTag::FalsePositive),
        auc,
    };
    write(dir, "diagnostics.json", json(&summary)?)?;
    println!(
        "{} TP / {} FP rank-1 pairs; mean d TP {} FP {}; AUC {}",
        summary.n_tp,
        summary.n_fp,
        fmt_opt(summary.mean_d_tp),
        fmt_opt(summary.mean_d_fp),
        fmt_opt(auc)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

#[derive(Deserialize)]
struct SelectionDump {
    n_reliable: usize,
    n_rejected: usize,
}

pub fn report(res: &Resolved, run: &Path) -> CliResult<()> {
    let sel: SelectionDump = read_json(&run.join(SELECTION_FILE))?;
    let before: RetrievalMetrics = read_json(&run.join(BEFORE_FILE))?;
    let after: RetrievalMetrics = read_json(&run.join(AFTER_FILE))?;
    let path = run.join(HISTORY_FILE);
    let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let history = AdaptationHistory::read_csv(file, sel.n_reliable + sel.n_rejected, sel.n_reliable)?;
    let report = compare_report(&before, &after, &history);
    println!("metric   before    after     delta");
    for (name, b, a, d) in [
        ("R@1", before.r1, after.r1, report.delta.r1),
        ("R@5", before.r5, after.r5, report.delta.r5),
        ("R@10", before.r10, after.r10, report.delta.r10),
        ("mAP", before.map, after.map, report.delta.map),
    ] {
        println!("{name:<8} {b:.4}    {a:.4}    {d:+.4}");
    }
    println!(
        "{} rounds, {} of {} queries trained on",
        history.len(),
        history.n_reliable,
        history.n_queries
    );
    if res.out.is_some() {
        write(out_dir(res)?, REPORT_FILE, report.to_json()?)?;
    }
    Ok(())
}
