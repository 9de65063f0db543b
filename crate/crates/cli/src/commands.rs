use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dgow::corpus::{parse_corpus_tsv, Sentence, Split};
use dgow::io::{read_graph_file, BUNDLE_GRAPH, BUNDLE_MODEL, BUNDLE_PARAMS};
use dgow::train::TrainReport;
use dgow::{
    build_dgow, build_mgow, load_corpus, similarity_report, similarity_report_for, Aggregator, Bundle, Construction,
    Corpus, ExperimentConfig, GraphFile, LoadReport, SimilarityOptions, SpectralOptions,
};

use crate::output::{RunDir, Stamp};
use crate::{dataset_of, output_of, AnalyzeSimilarity, Evaluate, ExperimentArgs, Predict};

fn load(c: &ExperimentConfig) -> Result<(Corpus, LoadReport)> {
    let path = dataset_of(c)?;
    let (corpus, report) =
        load_corpus(&path, c.load_options()).with_context(|| format!("loading {}", path.display()))?;
    log::info!(
        "{}: {} train, {} test, {} classes, {} words",
        path.display(),
        report.train,
        report.test,
        report.classes.len(),
        report.vocabulary_size
    );
    Ok((corpus, report))
}

fn check_windows(windows: &[usize]) -> Result<()> {
    if windows.is_empty() {
        bail!("no window sizes given");
    }
    if let Some(w) = windows.iter().find(|&&w| w < 2) {
        bail!("window size {w} < 2");
    }
    Ok(())
}

#[derive(Serialize)]
struct BlockSummary<'a> {
    class: &'a str,
    nodes: usize,
    edges: usize,
}

#[derive(Serialize)]
struct GraphSummary<'a> {
    construction: Construction,
    window: usize,
    blocks: Vec<BlockSummary<'a>>,
    load: &'a LoadReport,
}

pub fn build_graph(exp: &ExperimentArgs) -> Result<()> {
    let c = exp.resolve()?;
    let run = RunDir::acquire(&output_of(&c)?, &["graph.tsv", "graph.json"], exp.force())?;
    let (corpus, report) = load(&c)?;
    let graph = match c.construction {
        Construction::Dgow => GraphFile::from_dgow(&corpus, &build_dgow(&corpus, c.window)?),
        Construction::Mgow => GraphFile::from_mgow(&corpus, &build_mgow(&corpus, c.window)?),
    };
    run.write("graph.tsv", graph.to_text().as_bytes())?;
    let summary = GraphSummary {
        construction: graph.construction,
        window: graph.window,
        blocks: graph
            .classes
            .iter()
            .zip(&graph.blocks)
            .map(|(class, b)| BlockSummary {
                class,
                nodes: b.num_nodes(),
                edges: b.num_edges(),
            })
            .collect(),
        load: &report,
    };
    run.write_json("graph.json", &Stamp::new(c.hash()), &summary)
}

pub fn analyze_similarity(a: &AnalyzeSimilarity) -> Result<()> {
    let c = a.exp.resolve()?;
    let run = RunDir::acquire(&output_of(&c)?, &["similarity.csv", "similarity.json"], a.exp.force())?;
    let (corpus, _) = load(&c)?;
    let opts = SimilarityOptions {
        spectral: SpectralOptions {
            dim: a.dim,
            seed: c.seed,
            ..SpectralOptions::default()
        },
        sample_n: a.sample,
        seed: c.seed,
        top_classes: a.top_classes,
    };
    let table = match &a.graph {
        Some(path) => {
            let graph = read_graph_file(path).with_context(|| format!("reading {}", path.display()))?;
            if graph.vocabulary != corpus.vocabulary {
                bail!("{} was built from a different corpus or preprocessing", path.display());
            }
            match graph.construction {
                Construction::Dgow => {
                    if graph.classes != corpus.classes {
                        bail!("{} has classes {:?}, corpus has {:?}", path.display(), graph.classes, corpus.classes);
                    }
                    similarity_report_for(&corpus, &graph.dgow(), Construction::Dgow, graph.window, &opts)?
                }
                Construction::Mgow => {
                    similarity_report_for(&corpus, &graph.blocks[0], Construction::Mgow, graph.window, &opts)?
                }
            }
        }
        None => {
            check_windows(&a.windows)?;
            similarity_report(&corpus, c.construction, &a.windows, &opts)?
        }
    };
    if table.classes.len() < 2 {
        log::warn!("fewer than two classes hold more than {} training sentences", a.sample);
    }
    let stamp = Stamp::new(c.hash());
    run.write("similarity.csv", format!("{}{}", stamp.csv_comment(), table.to_csv()).as_bytes())?;
    run.write_json("similarity.json", &stamp, &table)
}

/// Corpus with the validation split held out, ready for training.
fn training_corpus(c: &ExperimentConfig) -> Result<(Corpus, LoadReport)> {
    if c.construction != Construction::Dgow {
        bail!("the classifier is trained on per-class graphs; construction must be dgow");
    }
    let (corpus, mut report) = load(c)?;
    let corpus = corpus.split_validation(c.val_fraction, c.seed)?;
    report.train = corpus.train.len();
    report.validation = corpus.validation.len();
    Ok((corpus, report))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    load: &'a LoadReport,
    best_run: usize,
    report: &'a TrainReport,
}

#[derive(Serialize)]
struct Timing {
    seconds: f64,
}

fn learning_curve(stamp: &Stamp, report: &TrainReport) -> String {
    let mut out = stamp.csv_comment();
    out.push_str("run,epoch,train_loss,val_accuracy\n");
    for r in &report.runs {
        for e in &r.fit.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.run, e.epoch, e.train_loss, e.val_accuracy);
        }
    }
    out
}

pub fn train(exp: &ExperimentArgs) -> Result<()> {
    let c = exp.resolve()?;
    let dir = output_of(&c)?;
    let run = RunDir::acquire(
        &dir,
        &["config.json", "train_report.json", "learning_curve.csv", "timing.json", "model"],
        exp.force(),
    )?;
    let (corpus, report) = training_corpus(&c)?;
    let start = Instant::now();
    let dgow = build_dgow(&corpus, c.window)?;
    let (train_report, mut models) = dgow::train_repeats(&corpus, &dgow, &c.model, &c.train)?;
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "test accuracy {:.2} ± {:.2} over {} runs",
        train_report.test_accuracy_mean,
        train_report.test_accuracy_std,
        train_report.runs.len()
    );

    let stamp = Stamp::new(c.hash());
    let best = train_report.best_run();
    let bundle = Bundle::new(GraphFile::from_dgow(&corpus, &dgow), models.swap_remove(best), c.hash());
    bundle.save(&run.path("model"))?;
    run.write("config.json", format!("{}\n", c.to_json()).as_bytes())?;
    run.write_json(
        "train_report.json",
        &stamp,
        &TrainOutput {
            load: &report,
            best_run: best,
            report: &train_report,
        },
    )?;
    run.write("learning_curve.csv", learning_curve(&stamp, &train_report).as_bytes())?;
    run.write_json("timing.json", &stamp, &Timing { seconds })
}

fn load_bundle(dir: &Path) -> Result<Bundle> {
    for f in [BUNDLE_GRAPH, BUNDLE_PARAMS, BUNDLE_MODEL] {
        if !dir.join(f).exists() {
            bail!("{} is not a model bundle (missing {f})", dir.display());
        }
    }
    Bundle::load(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    dataset: &'a Path,
    classes: &'a [String],
    evaluation: dgow::Evaluation,
}

pub fn evaluate(a: &Evaluate) -> Result<()> {
    let run = RunDir::acquire(&a.out, &["evaluation.json"], a.force)?;
    let bundle = load_bundle(&a.bundle)?;
    let text = std::fs::read_to_string(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
    let docs = parse_corpus_tsv(&text)?;
    let classes = &bundle.graph.classes;
    let mut test = Vec::new();
    for d in docs.iter().filter(|d| d.split == Split::Test) {
        let Some(label) = classes.iter().position(|c| *c == d.label) else {
            bail!("line {}: label {:?} is not one of the model's classes {:?}", d.line, d.label, classes);
        };
        test.push(Sentence {
            raw_id: d.line,
            tokens: bundle.graph.vocabulary.encode(&d.text),
            label: Some(label),
        });
    }
    let evaluation = dgow::evaluate(&bundle.model, &test)?;
    log::info!("accuracy {:.2} on {} sentences", evaluation.accuracy, evaluation.total);
    run.write_json(
        "evaluation.json",
        &Stamp::new(bundle.meta.config_hash.clone()),
        &EvaluationOutput {
            dataset: &a.dataset,
            classes,
            evaluation,
        },
    )
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: usize,
    scores: Option<Vec<f64>>,
    predicted_label: Option<&'a str>,
}

pub fn predict(a: &Predict) -> Result<()> {
    let run = RunDir::acquire(&a.out, &["predictions.jsonl"], a.force)?;
    let bundle = load_bundle(&a.bundle)?;
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let emb = bundle.model.node_embeddings()?;
    let mut out = serde_json::to_string(&Stamp::new(bundle.meta.config_hash.clone()))?;
    out.push('\n');
    let mut empty = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens = bundle.graph.vocabulary.encode(line);
        let record = if tokens.is_empty() {
            empty += 1;
            PredictionLine {
                id: i + 1,
                scores: None,
                predicted_label: None,
            }
        } else {
            let p = bundle.model.predict(&emb, &tokens)?;
            PredictionLine {
                id: i + 1,
                predicted_label: Some(&bundle.graph.classes[p.class]),
                scores: Some(p.scores),
            }
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    if empty > 0 {
        log::warn!("{empty} sentences had no known word and were left unlabelled");
    }
    run.write("predictions.jsonl", out.as_bytes())
}

#[derive(Serialize)]
struct AblationRow {
    setting: String,
    test_accuracy_mean: f64,
    test_accuracy_std: f64,
    test_accuracies: Vec<f64>,
}

#[derive(Serialize)]
struct Ablation<'a> {
    parameter: &'a str,
    rows: &'a [AblationRow],
}

fn ablation_row(setting: String, report: &TrainReport) -> AblationRow {
    log::info!("{setting}: {:.2} ± {:.2}", report.test_accuracy_mean, report.test_accuracy_std);
    AblationRow {
        setting,
        test_accuracy_mean: report.test_accuracy_mean,
        test_accuracy_std: report.test_accuracy_std,
        test_accuracies: report.runs.iter().map(|r| r.test.accuracy).collect(),
    }
}

fn write_ablation(run: &RunDir, name: &str, parameter: &str, c: &ExperimentConfig, rows: &[AblationRow]) -> Result<()> {
    let stamp = Stamp::new(c.hash());
    let mut csv = stamp.csv_comment();
    let _ = writeln!(csv, "{parameter},mean,std,runs");
    for r in rows {
        let _ = writeln!(csv, "{},{:.2},{:.2},{}", r.setting, r.test_accuracy_mean, r.test_accuracy_std, r.test_accuracies.len());
    }
    run.write(&format!("{name}.csv"), csv.as_bytes())?;
    run.write_json(&format!("{name}.json"), &stamp, &Ablation { parameter, rows })
}

pub fn ablate_window(exp: &ExperimentArgs, windows: &[usize]) -> Result<()> {
    check_windows(windows)?;
    let c = exp.resolve()?;
    let run = RunDir::acquire(&output_of(&c)?, &["ablation_window.csv", "ablation_window.json"], exp.force())?;
    let (corpus, _) = training_corpus(&c)?;
    let mut rows = Vec::new();
    for &w in windows {
        let dgow = build_dgow(&corpus, w)?;
        let (report, _) = dgow::train_repeats(&corpus, &dgow, &c.model, &c.train)?;
        rows.push(ablation_row(w.to_string(), &report));
    }
    write_ablation(&run, "ablation_window", "window", &c, &rows)
}

pub fn ablate_aggregator(exp: &ExperimentArgs) -> Result<()> {
    let c = exp.resolve()?;
    let run = RunDir::acquire(&output_of(&c)?, &["ablation_aggregator.csv", "ablation_aggregator.json"], exp.force())?;
    let (corpus, _) = training_corpus(&c)?;
    let dgow = build_dgow(&corpus, c.window)?;
    let mut rows = Vec::new();
    for a in Aggregator::ALL {
        let model = dgow::ModelConfig {
            aggregator: a,
            ..c.model.clone()
        };
        let (report, _) = dgow::train_repeats(&corpus, &dgow, &model, &c.train)?;
        rows.push(ablation_row(a.to_string(), &report));
    }
    write_ablation(&run, "ablation_aggregator", "aggregator", &c, &rows)
}
