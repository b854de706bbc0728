//! Metrics, the leave-one-subject-out harness and the permuted-label
//! baseline.

pub mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{session_checksum, Intent, Session};
use crate::error::{Error, Result};
use crate::model::InputMode;
use crate::train::{
    finetune, gaze_examples, labeled_examples, permute_labels, predict_labeled, pretext_examples, pretrain,
    supervised_train, FreezeMode, LabeledExample, Stage, TrainConfig, TrainOutcome,
};

pub use metrics::{f1_per_class, macro_f1, ConfusionCounts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Classifier trained from scratch on labeled windows.
    Supervised,
    /// Pretext pretraining, then fine-tuning of transformer and head only.
    SemiPartial,
    /// Pretext pretraining, then fine-tuning of every tensor.
    SemiFull,
    /// Supervised gaze-only training on permuted labels.
    Random,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::Supervised,
        Pipeline::SemiPartial,
        Pipeline::SemiFull,
        Pipeline::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Supervised => "supervised",
            Pipeline::SemiPartial => "semi_partial",
            Pipeline::SemiFull => "semi_full",
            Pipeline::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn is_semi(self) -> bool {
        matches!(self, Pipeline::SemiPartial | Pipeline::SemiFull)
    }

    /// Input mode actually trained: the permuted baseline is gaze-only.
    pub fn input_mode(self, requested: InputMode) -> InputMode {
        match self {
            Pipeline::Random => InputMode::GazeOnly,
            _ => requested,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Base seed; fold `i` trains with `seed + i`.
    pub seed: u64,
    /// Settings of the classification stage. Stage, freeze mode and seed
    /// are set per pipeline and fold.
    pub train: TrainConfig,
    /// Settings of the pretext stage for the semi-supervised pipelines.
    pub pretrain: TrainConfig,
    /// Folds trained concurrently.
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                stage: Stage::Pretext,
                ..TrainConfig::default()
            },
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }
}

/// Train/test split holding out one subject.
#[derive(Clone, Debug)]
pub struct Fold<'a> {
    pub index: usize,
    pub test_subject: String,
    pub train: Vec<&'a Session>,
    pub test: Vec<&'a Session>,
}

/// One fold per subject, in sorted subject order.
pub fn loso_folds(sessions: &[Session]) -> Result<Vec<Fold<'_>>> {
    let subjects: BTreeSet<&str> = sessions.iter().map(|s| s.meta.subject_id.as_str()).collect();
    if subjects.len() < 3 {
        return Err(Error::Config(format!(
            "leave-one-subject-out needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .enumerate()
        .map(|(index, subject)| {
            let (test, train) = sessions.iter().partition(|s| s.meta.subject_id == subject);
            Fold {
                index,
                test_subject: subject.to_string(),
                train,
                test,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subject: String,
    pub seed: u64,
    pub validation_subject: Option<String>,
    pub n_train_windows: usize,
    pub n_test_windows: usize,
    /// Reading taken as the positive class.
    pub confusion_reading: ConfusionCounts,
    /// Scanning taken as the positive class.
    pub confusion_scanning: ConfusionCounts,
    pub f1_reading: f64,
    pub f1_scanning: f64,
    pub f1_overall: f64,
    pub best_epoch: usize,
    /// Checksum of the trained fold model.
    pub model_checksum: String,
    pub train_session_checksums: Vec<String>,
    pub test_session_checksums: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub pipeline: Pipeline,
    pub input_mode: InputMode,
    pub label_fraction: f64,
    pub folds: Vec<FoldReport>,
    /// Test subjects without any valid window.
    pub skipped: Vec<String>,
    /// Unweighted means over folds.
    pub f1_reading: f64,
    pub f1_scanning: f64,
    pub f1_overall: f64,
    pub config_hash: String,
    pub data_checksum: String,
}

impl F1Report {
    /// Plain-text table: one row per fold and the mean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({}, {:.0}% labels)",
            self.pipeline.as_str(),
            self.input_mode.as_str(),
            100.0 * self.label_fraction
        );
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "subject", "overall", "reading", "scanning");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{:<10} {:>8.2} {:>8.2} {:>8.2}",
                f.test_subject, f.f1_overall, f.f1_reading, f.f1_scanning
            );
        }
        for s in &self.skipped {
            let _ = writeln!(out, "{s:<10} {:>8} {:>8} {:>8}", "-", "-", "-");
        }
        let _ = writeln!(
            out,
            "{:<10} {:>8.2} {:>8.2} {:>8.2}",
            "mean", self.f1_overall, self.f1_reading, self.f1_scanning
        );
        out
    }
}

/// Combined checksum of a session set, independent of order.
pub fn data_checksum(sessions: &[&Session]) -> Result<String> {
    let mut sums = sessions.iter().map(|s| session_checksum(s)).collect::<Result<Vec<_>>>()?;
    sums.sort();
    let mut h = Sha256::new();
    for s in &sums {
        h.update(s.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Backbone pretrained on one fold's training sessions.
#[derive(Clone, Debug)]
pub struct PretrainedFold {
    pub test_subject: String,
    pub outcome: TrainOutcome,
}

fn run_folds<'a, R: Send>(
    folds: &'a [Fold<'a>],
    jobs: usize,
    f: impl Fn(&'a Fold<'a>) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    if jobs <= 1 {
        return folds.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| folds.par_iter().map(&f).collect())
}

/// Pretext pretraining for every fold on its training sessions only. Fold
/// `i` pretrains with seed `cfg.seed + i`.
pub fn pretrain_folds(sessions: &[Session], cfg: &EvalConfig) -> Result<Vec<PretrainedFold>> {
    cfg.validate()?;
    let folds = loso_folds(sessions)?;
    run_folds(&folds, cfg.jobs, |fold| {
        let train: Vec<Session> = fold.train.iter().map(|s| (*s).clone()).collect();
        let examples = pretext_examples(&train, cfg.pretrain.stride)?;
        let pcfg = TrainConfig {
            stage: Stage::Pretext,
            input_mode: cfg.train.input_mode,
            model: cfg.train.model.clone(),
            seed: cfg.fold_seed(fold.index),
            ..cfg.pretrain.clone()
        };
        log::info!("fold {}: pretraining on {} windows", fold.test_subject, examples.len());
        Ok(PretrainedFold {
            test_subject: fold.test_subject.clone(),
            outcome: pretrain(&examples, &pcfg)?,
        })
    })
}

/// Leave-one-subject-out evaluation of one pipeline. Semi-supervised
/// pipelines pretrain per fold first.
pub fn loso_evaluate(sessions: &[Session], pipeline: Pipeline, cfg: &EvalConfig) -> Result<F1Report> {
    let pretrained = if pipeline.is_semi() {
        Some(pretrain_folds(sessions, cfg)?)
    } else {
        None
    };
    loso_evaluate_pretrained(sessions, pipeline, cfg, pretrained.as_deref())
}

/// Like [`loso_evaluate`], reusing per-fold pretrained backbones.
pub fn loso_evaluate_pretrained(
    sessions: &[Session],
    pipeline: Pipeline,
    cfg: &EvalConfig,
    pretrained: Option<&[PretrainedFold]>,
) -> Result<F1Report> {
    cfg.validate()?;
    let folds = loso_folds(sessions)?;
    if pipeline.is_semi() {
        let ok = pretrained.is_some_and(|p| {
            p.len() == folds.len() && p.iter().zip(&folds).all(|(p, f)| p.test_subject == f.test_subject)
        });
        if !ok {
            return Err(Error::Config(format!(
                "{} needs one pretrained backbone per fold",
                pipeline.as_str()
            )));
        }
    }
    let input_mode = pipeline.input_mode(cfg.train.input_mode);
    let results = run_folds(&folds, cfg.jobs, |fold| {
        run_fold(fold, pipeline, input_mode, cfg, pretrained.map(|p| &p[fold.index].outcome))
    })?;

    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (fold, r) in folds.iter().zip(results) {
        match r {
            Some(r) => reports.push(r),
            None => {
                log::warn!("fold {}: test subject has no valid windows; skipped", fold.test_subject);
                skipped.push(fold.test_subject.clone());
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Dataset("no fold had a testable subject".into()));
    }
    let n = reports.len() as f64;
    let f1_reading = reports.iter().map(|f| f.f1_reading).sum::<f64>() / n;
    let f1_scanning = reports.iter().map(|f| f.f1_scanning).sum::<f64>() / n;
    let all: Vec<&Session> = sessions.iter().collect();
    Ok(F1Report {
        pipeline,
        input_mode,
        label_fraction: cfg.train.label_fraction,
        folds: reports,
        skipped,
        f1_reading,
        f1_scanning,
        f1_overall: macro_f1(f1_reading, f1_scanning),
        config_hash: cfg.hash(),
        data_checksum: data_checksum(&all)?,
    })
}

fn run_fold(
    fold: &Fold<'_>,
    pipeline: Pipeline,
    input_mode: InputMode,
    cfg: &EvalConfig,
    pretrained: Option<&TrainOutcome>,
) -> Result<Option<FoldReport>> {
    let stride = cfg.train.stride;
    let test_sessions: Vec<Session> = fold.test.iter().map(|s| (*s).clone()).collect();
    let test = labeled_examples(&test_sessions, stride)?;
    if test.is_empty() {
        return Ok(None);
    }
    let train_sessions: Vec<Session> = fold.train.iter().map(|s| (*s).clone()).collect();
    let seed = cfg.fold_seed(fold.index);
    let mut tcfg = TrainConfig {
        seed,
        input_mode,
        ..cfg.train.clone()
    };
    let (outcome, n_train) = match pipeline {
        Pipeline::Supervised | Pipeline::Random => {
            tcfg.stage = Stage::Supervised;
            let mut examples = labeled_examples(&train_sessions, stride)?;
            if pipeline == Pipeline::Random {
                permute_labels(&mut examples, seed);
            }
            (supervised_train(&examples, &tcfg)?, examples.len())
        }
        Pipeline::SemiPartial | Pipeline::SemiFull => {
            tcfg.stage = Stage::Finetune;
            tcfg.freeze = if pipeline == Pipeline::SemiFull {
                FreezeMode::Full
            } else {
                FreezeMode::Partial
            };
            let pre = pretrained.expect("checked by caller");
            let examples = gaze_examples(&train_sessions, stride)?;
            (finetune(&pre.params, &pre.stats, &examples, &tcfg)?, examples.len())
        }
    };
    let refs: Vec<&LabeledExample> = test.iter().collect();
    let probs = predict_labeled(&outcome.params, &outcome.stats, &refs)?;
    let pred: Vec<Intent> = probs
        .iter()
        .map(|p| if p[0] >= p[1] { Intent::Reading } else { Intent::Scanning })
        .collect();
    let gold: Vec<Intent> = test.iter().map(|e| e.gaze.label).collect();
    let (f1_reading, f1_scanning) = f1_per_class(&pred, &gold)?;
    let checksums = |set: &[&Session]| set.iter().map(|s| session_checksum(s)).collect::<Result<Vec<_>>>();
    log::info!(
        "fold {} ({}): macro F1 {:.2}",
        fold.test_subject,
        pipeline.as_str(),
        macro_f1(f1_reading, f1_scanning)
    );
    Ok(Some(FoldReport {
        fold: fold.index,
        test_subject: fold.test_subject.clone(),
        seed,
        validation_subject: outcome.validation_subject.clone(),
        n_train_windows: n_train,
        n_test_windows: test.len(),
        confusion_reading: ConfusionCounts::from_predictions(&pred, &gold, Intent::Reading),
        confusion_scanning: ConfusionCounts::from_predictions(&pred, &gold, Intent::Scanning),
        f1_reading,
        f1_scanning,
        f1_overall: macro_f1(f1_reading, f1_scanning),
        best_epoch: outcome.best_epoch,
        model_checksum: outcome.params.checksum(),
        train_session_checksums: checksums(&fold.train)?,
        test_session_checksums: checksums(&fold.test)?,
    }))
}
