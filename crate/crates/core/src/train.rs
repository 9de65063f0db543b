//! Training with positive/negative class pairs, early stopping and
//! evaluation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::graph::Dgow;
use crate::model::{DgowGnn, ModelConfig};
use crate::nn::{AdamConfig, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once validation accuracy is below each of this many previous epochs.
    pub patience: usize,
    pub seed: u64,
    pub repeats: usize,
    /// Sentences per Adam step.
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 200,
            patience: 4,
            seed: 0,
            repeats: 10,
            batch_size: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_epochs == 0 || self.repeats == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_epochs, repeats, batch_size and patience must be at least 1".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Draws a negative class `q ≠ p` with probability proportional to the
/// training size of `q`, renormalized over the classes other than `p`.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    others: Vec<Vec<usize>>,
    dists: Vec<WeightedIndex<f64>>,
    sizes: Vec<usize>,
}

impl NegativeSampler {
    pub fn new(class_sizes: &[usize]) -> Result<Self> {
        let p_count = class_sizes.len();
        if p_count < 2 {
            return Err(Error::Config(format!("negative sampling needs 2 classes, got {p_count}")));
        }
        let mut others = Vec::with_capacity(p_count);
        let mut dists = Vec::with_capacity(p_count);
        for p in 0..p_count {
            let qs: Vec<usize> = (0..p_count).filter(|&q| q != p).collect();
            let mut w: Vec<f64> = qs.iter().map(|&q| class_sizes[q] as f64).collect();
            if w.iter().all(|&x| x == 0.0) {
                w.fill(1.0);
            }
            dists.push(WeightedIndex::new(&w).expect("non-negative weights with a positive total"));
            others.push(qs);
        }
        Ok(Self {
            others,
            dists,
            sizes: class_sizes.to_vec(),
        })
    }

    /// Probability of each class as the negative for `p`.
    pub fn probabilities(&self, p: usize) -> Vec<f64> {
        let total: usize = self.others[p].iter().map(|&q| self.sizes[q]).sum();
        (0..self.sizes.len())
            .map(|q| match (q == p, total) {
                (true, _) => 0.0,
                (false, 0) => 1.0 / (self.sizes.len() - 1) as f64,
                (false, t) => self.sizes[q] as f64 / t as f64,
            })
            .collect()
    }

    pub fn sample(&self, p: usize, rng: &mut impl Rng) -> usize {
        self.others[p][self.dists[p].sample(rng)]
    }
}

/// `history` holds validation accuracies up to and including the current
/// epoch. True when the current value is strictly below each of the
/// previous `patience` values.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    let n = history.len();
    if n <= patience {
        return false;
    }
    let current = history[n - 1];
    history[n - 1 - patience..n - 1].iter().all(|&prev| current < prev)
}

fn add_grads(acc: &mut [Option<Matrix>], grads: Vec<Option<Matrix>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// One pass over `sentences` in shuffled order. Each sentence contributes
/// `BCE(ẑ_own, 1) + BCE(ẑ_neg, 0)`. Returns the mean per-sentence loss.
pub fn train_epoch(
    model: &mut DgowGnn,
    sentences: &[Sentence],
    sampler: &NegativeSampler,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..sentences.len())
        .filter(|&i| sentences[i].label.is_some() && !sentences[i].tokens.is_empty())
        .collect();
    if order.is_empty() {
        return Err(Error::Config("no labelled training sentence".into()));
    }
    order.shuffle(rng);
    let adam = cfg.adam();
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let mut acc: Vec<Option<Matrix>> = vec![None; model.params().len()];
        for &i in chunk {
            let s = &sentences[i];
            let p = s.label.expect("filtered");
            let q = sampler.sample(p, rng);
            let (loss, grads) = model.pair_loss(&s.tokens, p, Some(q))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, sentence: s.raw_id });
            }
            total += loss;
            add_grads(&mut acc, grads);
        }
        model.params_mut().adam_step(&acc, &adam)?;
    }
    Ok(total / order.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub total: usize,
    pub correct: usize,
    /// Percent.
    pub accuracy: f64,
    /// Sentences with no token; counted as wrong.
    pub unclassifiable: usize,
    /// Percent per class; `None` when the class has no sentence.
    pub class_accuracy: Vec<Option<f64>>,
    pub class_support: Vec<usize>,
    /// `confusion[true][predicted]`; unclassifiable sentences are not counted.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy of P-class argmax prediction on labelled sentences.
pub fn evaluate(model: &DgowGnn, sentences: &[Sentence]) -> Result<Evaluation> {
    let labelled: Vec<&Sentence> = sentences.iter().filter(|s| s.label.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let p_count = model.num_classes();
    let emb = model.node_embeddings()?;
    let preds: Vec<Option<usize>> = labelled
        .par_iter()
        .map(|s| match model.predict(&emb, &s.tokens) {
            Ok(pred) => Ok(Some(pred.class)),
            Err(Error::Unclassifiable) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0; p_count]; p_count];
    let mut support = vec![0; p_count];
    let mut hits = vec![0; p_count];
    let mut unclassifiable = 0;
    for (s, pred) in labelled.iter().zip(&preds) {
        let y = s.label.expect("filtered");
        support[y] += 1;
        match pred {
            Some(c) => {
                confusion[y][*c] += 1;
                if *c == y {
                    hits[y] += 1;
                }
            }
            None => unclassifiable += 1,
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        total: labelled.len(),
        correct,
        accuracy: 100.0 * correct as f64 / labelled.len() as f64,
        unclassifiable,
        class_accuracy: hits
            .iter()
            .zip(&support)
            .map(|(&h, &n)| (n > 0).then(|| 100.0 * h as f64 / n as f64))
            .collect(),
        class_support: support,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Trains until `max_epochs` or early stop, then restores the parameters of
/// the best validation epoch (the earliest one on ties).
pub fn fit(model: &mut DgowGnn, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<FitReport> {
    cfg.validate()?;
    if corpus.validation.is_empty() {
        return Err(Error::Split("training needs a validation split".into()));
    }
    let sampler = NegativeSampler::new(&corpus.class_sizes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<std::sync::Arc<Matrix>>)> = None;
    let mut reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = train_epoch(model, &corpus.train, &sampler, &mut rng, cfg, epoch)?;
        let val = evaluate(model, &corpus.validation)?.accuracy;
        log::info!("epoch {epoch}: loss {train_loss:.5}, validation {val:.2}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy: val,
        });
        history.push(val);
        if best.as_ref().is_none_or(|(_, b, _)| val > *b) {
            best = Some((epoch, val, model.params().snapshot()));
        }
        if should_stop(&history, cfg.patience) {
            reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch");
    model.params_mut().restore(&snapshot);
    Ok(FitReport {
        stop_epoch: epochs.len(),
        epochs,
        stop_reason: reason,
        best_epoch,
        best_val_accuracy: best_val,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub fit: FitReport,
    pub test: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub classes: Vec<String>,
    pub runs: Vec<RunReport>,
    pub test_accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub test_accuracy_std: f64,
    pub class_accuracy_mean: Vec<Option<f64>>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl TrainReport {
    pub fn summarize(classes: Vec<String>, runs: Vec<RunReport>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let class_accuracy_mean = (0..classes.len())
            .map(|c| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.test.class_accuracy[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Self {
            classes,
            runs,
            test_accuracy_mean: mean,
            test_accuracy_std: std,
            class_accuracy_mean,
        }
    }

    /// Index of the run with the best validation accuracy, earliest on ties.
    pub fn best_run(&self) -> usize {
        let vals: Vec<f64> = self.runs.iter().map(|r| r.fit.best_val_accuracy).collect();
        crate::model::argmax(&vals).unwrap_or(0)
    }
}

/// Trains `train_cfg.repeats` independent models with seeds `seed + r`, in
/// parallel, and evaluates each on the test split.
pub fn train_repeats(
    corpus: &Corpus,
    dgow: &Dgow,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainReport, Vec<DgowGnn>)> {
    train_cfg.validate()?;
    let results: Vec<(RunReport, DgowGnn)> = (0..train_cfg.repeats)
        .into_par_iter()
        .map(|run| {
            let seed = train_cfg.seed.wrapping_add(run as u64);
            let mut model = DgowGnn::new(dgow.clone(), model_cfg.clone(), seed)?;
            let fit_report = fit(&mut model, corpus, train_cfg, seed)?;
            let test = evaluate(&model, &corpus.test)?;
            Ok((
                RunReport {
                    run,
                    seed,
                    fit: fit_report,
                    test,
                },
                model,
            ))
        })
        .collect::<Result<_>>()?;
    let (runs, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((TrainReport::summarize(corpus.classes.clone(), runs), models))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, _) = mean_std(&ra);
    let (mb, _) = mean_std(&rb);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
