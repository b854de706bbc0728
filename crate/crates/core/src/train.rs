//! Training stages: pretext pretraining on mouse velocity, fine-tuning of a
//! pretrained backbone for intent classification, and the supervised
//! baseline trained from scratch.
//!
//! Each stage consumes its own example type. Pretext examples carry no
//! label, fine-tuning examples carry no mouse channels, so neither stage can
//! read the other's supervision.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use magread_numerics::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{windowize, Channels, FeatureStats, Intent, NormStats, Session, WindowMode, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::eval::metrics::{f1_per_class, macro_f1};
use crate::model::{
    forward, forward_on_tape, is_frozen_in_partial, save_checkpoint, BoundParams, HeadKind, InputMode, ModelConfig,
    ModelInput, ModelParams, Stream,
};
use crate::seed;

pub const HISTORY_FILE: &str = "history.jsonl";
const EVAL_BATCH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretext,
    Finetune,
    Supervised,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretext => "pretext",
            Stage::Finetune => "finetune",
            Stage::Supervised => "supervised",
        }
    }
}

/// Which tensors fine-tuning updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// Every tensor.
    Full,
    /// Transformer layers, final norm and head; encoders, cross-attention
    /// and fusion stay fixed.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub freeze: FreezeMode,
    pub input_mode: InputMode,
    pub stage: Stage,
    /// Window stride used when slicing sessions.
    pub stride: usize,
    /// Share of labeled training windows kept, stratified by class.
    pub label_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            freeze: FreezeMode::Full,
            input_mode: InputMode::GazePlusComp,
            stage: Stage::Supervised,
            stride: DEFAULT_STRIDE,
            label_fraction: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!("label_fraction must be in (0, 1], got {}", self.label_fraction));
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Unlabeled window with its cursor-velocity target in screen fractions
/// per second.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextExample {
    pub subject_id: String,
    pub g: Channels,
    pub c: Channels,
    pub target: [f32; 2],
}

/// Labeled gaze-only window.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeExample {
    pub subject_id: String,
    pub g: Channels,
    pub c: Channels,
    pub label: Intent,
}

/// Labeled window with the cursor stream, for the supervised input
/// ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub gaze: GazeExample,
    pub m: Option<Channels>,
}

pub trait Labeled {
    fn label(&self) -> Intent;
    fn set_label(&mut self, label: Intent);
    fn subject_id(&self) -> &str;
}

impl Labeled for GazeExample {
    fn label(&self) -> Intent {
        self.label
    }
    fn set_label(&mut self, label: Intent) {
        self.label = label;
    }
    fn subject_id(&self) -> &str {
        &self.subject_id
    }
}

impl Labeled for LabeledExample {
    fn label(&self) -> Intent {
        self.gaze.label
    }
    fn set_label(&mut self, label: Intent) {
        self.gaze.label = label;
    }
    fn subject_id(&self) -> &str {
        &self.gaze.subject_id
    }
}

/// Pretext windows of every session that has a cursor log. Labels are never
/// consulted.
pub fn pretext_examples(sessions: &[Session], stride: usize) -> Result<Vec<PretextExample>> {
    let mut out = Vec::new();
    for s in sessions {
        for w in windowize(s, stride, WindowMode::Pretext)? {
            if let Some(target) = w.vel_target {
                out.push(PretextExample {
                    subject_id: w.subject_id,
                    g: w.g,
                    c: w.c,
                    target,
                });
            }
        }
    }
    Ok(out)
}

/// Labeled gaze windows. The cursor log is dropped before slicing.
pub fn gaze_examples(sessions: &[Session], stride: usize) -> Result<Vec<GazeExample>> {
    let mut out = Vec::new();
    for s in sessions {
        let gaze_only = Session {
            meta: s.meta.clone(),
            gaze: s.gaze.clone(),
            mouse: Vec::new(),
            labels: s.labels.clone(),
        };
        for w in windowize(&gaze_only, stride, WindowMode::Labeled)? {
            out.push(GazeExample {
                subject_id: w.subject_id,
                g: w.g,
                c: w.c,
                label: w.label.expect("labeled window"),
            });
        }
    }
    Ok(out)
}

/// Labeled windows including the resampled cursor stream.
pub fn labeled_examples(sessions: &[Session], stride: usize) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for s in sessions {
        for w in windowize(s, stride, WindowMode::Labeled)? {
            out.push(LabeledExample {
                gaze: GazeExample {
                    subject_id: w.subject_id,
                    g: w.g,
                    c: w.c,
                    label: w.label.expect("labeled window"),
                },
                m: w.m,
            });
        }
    }
    Ok(out)
}

/// `w_c = N / (2·N_c)`.
pub fn compute_class_weights(labels: &[Intent]) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[l.class_id()] += 1;
    }
    if let Some(c) = Intent::ALL.iter().find(|c| counts[c.class_id()] == 0) {
        return Err(Error::Training(format!(
            "class `{}` is absent from the training split",
            c.as_str()
        )));
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

/// Keeps `ceil(fraction·N_c)` examples of each class, chosen with a seeded
/// shuffle, in their original order.
pub fn select_label_fraction<E: Labeled + Clone>(examples: &[E], fraction: f64, seed: u64) -> Vec<E> {
    if fraction >= 1.0 {
        return examples.to_vec();
    }
    let mut keep = vec![false; examples.len()];
    for class in Intent::ALL {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label() == class).collect();
        let take = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
        idx.shuffle(&mut seed::rng(seed, &[seed::fnv1a(b"label-fraction"), class.class_id() as u64]));
        for &i in &idx[..take] {
            keep[i] = true;
        }
    }
    examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect()
}

/// Shuffles labels across examples, preserving the class counts exactly.
pub fn permute_labels<E: Labeled>(examples: &mut [E], seed: u64) {
    let mut labels: Vec<Intent> = examples.iter().map(Labeled::label).collect();
    labels.shuffle(&mut seed::rng(seed, &[seed::fnv1a(b"permute-labels")]));
    for (e, l) in examples.iter_mut().zip(labels) {
        e.set_label(l);
    }
}

/// Subject held out for early stopping, picked from the sorted subject ids
/// by the seed. `None` with fewer than two subjects.
pub fn validation_subject<'a>(subjects: impl Iterator<Item = &'a str>, seed: u64) -> Option<String> {
    let ids: BTreeSet<&str> = subjects.collect();
    if ids.len() < 2 {
        return None;
    }
    let pick = (seed::derive(seed, &[seed::fnv1a(b"validation")]) % ids.len() as u64) as usize;
    ids.into_iter().nth(pick).map(str::to_string)
}

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Macro F1 in percent, classification stages only.
    pub f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub stats: NormStats,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub validation_subject: Option<String>,
}

impl TrainOutcome {
    /// Writes the checkpoint and `history.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_checkpoint(dir, &self.params, Some(&self.stats))?;
        write_history(dir.join(HISTORY_FILE), &self.history)
    }

    /// Mean training loss per epoch.
    pub fn train_losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.loss)
            .collect()
    }
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in history {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn fit_pair<'a>(name: &str, chans: impl Iterator<Item = &'a Channels> + Clone) -> [FeatureStats; 2] {
    let axis = |a: usize| {
        FeatureStats::fit(
            &format!("{name}_{}", ["x", "y"][a]),
            chans.clone().flat_map(move |ch| ch[a].iter().map(|&v| v as f64)),
        )
    };
    [axis(0), axis(1)]
}

fn standardize(ch: &Channels, s: &[FeatureStats; 2]) -> Channels {
    let mut out = *ch;
    for (axis, row) in out.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = s[axis].apply(*v);
        }
    }
    out
}

enum Targets {
    Velocity(Vec<[f32; 2]>),
    Class(Vec<usize>),
}

/// Standardized tensors-to-be for one split.
struct Data {
    g: Vec<Channels>,
    c: Vec<Channels>,
    m: Vec<Channels>,
    targets: Targets,
}

impl Data {
    fn len(&self) -> usize {
        self.g.len()
    }

    fn input(&self, idx: &[usize], mode: InputMode) -> ModelInput<f32> {
        let mut input = ModelInput::new(idx.len());
        for &s in mode.streams() {
            let src = match s {
                Stream::Gaze => &self.g,
                Stream::Comp => &self.c,
                Stream::Mouse => &self.m,
            };
            input = input.with(s, ModelInput::stream_tensor(idx.iter().map(|&i| &src[i])));
        }
        input
    }

    fn loss(&self, tape: &mut Tape<f32>, out: Var, idx: &[usize], weights: &[f32; 2]) -> Result<Var> {
        Ok(match &self.targets {
            Targets::Velocity(v) => {
                let data = idx.iter().flat_map(|&i| v[i]).collect();
                let target = tape.constant(Tensor::from_vec(vec![idx.len(), 2], data)?);
                tape.mse_loss(out, target)?
            }
            Targets::Class(y) => {
                let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                tape.weighted_cross_entropy(out, &labels, weights)?
            }
        })
    }
}

/// Loss and, for classification, macro F1 over a whole split.
fn evaluate(params: &ModelParams<f32>, data: &Data, weights: &[f32; 2]) -> Result<(f64, Option<f64>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut pred = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let out = forward(params, &data.input(chunk, params.input_mode))?;
        let mut tape = Tape::new();
        let o = tape.constant(out.clone());
        let l = data.loss(&mut tape, o, chunk, weights)?;
        let l = tape.value(l).data()[0] as f64;
        // Cross-entropy is normalized by the batch's summed weight, MSE by
        // its element count; undo either to average over the split.
        let w = match &data.targets {
            Targets::Velocity(_) => chunk.len() as f64,
            Targets::Class(y) => chunk.iter().map(|&i| weights[y[i]] as f64).sum(),
        };
        loss_sum += l * w;
        weight_sum += w;
        if let Targets::Class(_) = data.targets {
            pred.extend(out.data().chunks(2).map(|z| {
                if z[0] >= z[1] {
                    Intent::Reading
                } else {
                    Intent::Scanning
                }
            }));
        }
    }
    let f1 = match &data.targets {
        Targets::Class(y) => {
            let gold: Vec<Intent> = y.iter().map(|&c| Intent::from_class_id(c).expect("class id")).collect();
            let (r, s) = f1_per_class(&pred, &gold)?;
            Some(macro_f1(r, s))
        }
        Targets::Velocity(_) => None,
    };
    Ok((loss_sum / weight_sum, f1))
}

struct Fit {
    params: ModelParams<f32>,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

/// Adam over the trainable tensors with per-epoch seeded shuffling; keeps
/// the parameters of the best validation epoch (the last epoch when there
/// is no validation split).
fn fit(
    mut params: ModelParams<f32>,
    trainable: &dyn Fn(&str) -> bool,
    train: &Data,
    val: Option<&Data>,
    weights: [f32; 2],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<Fit> {
    if train.len() == 0 {
        return Err(Error::Training(format!("{} stage has no training windows", stage.as_str())));
    }
    let names: Vec<String> = params.names().filter(|n| trainable(n)).map(str::to_string).collect();
    let mut adam = AdamState::<f32>::new(names.iter().map(|n| params.get(n).expect("named tensor").numel()));
    let adam_cfg = cfg.adam();
    let mode = params.input_mode;

    let mut history = Vec::new();
    let mut best: Option<(f64, ModelParams<f32>, usize)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::fnv1a(stage.as_str().as_bytes()), epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params, trainable);
            let out = forward_on_tape(&mut tape, &bound, &params, &train.input(chunk, mode))?;
            let loss = train.loss(&mut tape, out, chunk, &weights)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "{} loss became non-finite in epoch {epoch}",
                    stage.as_str()
                )));
            }
            total += value as f64 * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Vec<f32>> = names.iter().map(|n| grads.take(bound.get(n))).collect();
            let mut refs: Vec<&mut Tensor<f32>> = params
                .iter_mut()
                .filter(|(n, _)| trainable(n))
                .map(|(_, t)| t)
                .collect();
            adam_step(&mut refs, &g, &mut adam, &adam_cfg)?;
        }
        let train_loss = total / train.len() as f64;
        history.push(EpochRecord {
            stage,
            epoch,
            split: "train".into(),
            loss: train_loss,
            f1: None,
        });
        log::debug!("{} epoch {epoch}: train loss {train_loss:.5}", stage.as_str());

        let Some(val) = val else {
            best = Some((train_loss, params.clone(), epoch));
            continue;
        };
        let (val_loss, val_f1) = evaluate(&params, val, &weights)?;
        history.push(EpochRecord {
            stage,
            epoch,
            split: "val".into(),
            loss: val_loss,
            f1: val_f1,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::debug!("{} stopped early after epoch {epoch}", stage.as_str());
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch");
    Ok(Fit {
        params,
        history,
        best_epoch,
    })
}

fn split_by_subject<'a, E>(
    examples: &'a [E],
    val_subject: Option<&str>,
    subject: impl Fn(&E) -> &str,
) -> (Vec<&'a E>, Vec<&'a E>) {
    examples
        .iter()
        .partition(|e| val_subject.map_or(true, |v| subject(e) != v))
}

fn check_gaze_mode(cfg: &TrainConfig) -> Result<()> {
    if cfg.input_mode.uses_mouse() {
        return Err(Error::Config(format!(
            "the {} stage reads gaze only; input mode {} needs the cursor stream",
            cfg.stage.as_str(),
            cfg.input_mode.as_str()
        )));
    }
    Ok(())
}

/// Trains the backbone and a velocity head with MSE on standardized cursor
/// velocity.
pub fn pretrain(examples: &[PretextExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_gaze_mode(cfg)?;
    if examples.is_empty() {
        return Err(Error::Training("no windows with velocity targets".into()));
    }
    let val_subject = validation_subject(examples.iter().map(|e| e.subject_id.as_str()), cfg.seed);
    let (tr, va) = split_by_subject(examples, val_subject.as_deref(), |e| &e.subject_id);
    let vel = |a: usize| {
        FeatureStats::fit(
            ["vel_x", "vel_y"][a],
            tr.iter().map(move |e| e.target[a] as f64),
        )
    };
    let stats = NormStats {
        g: fit_pair("g", tr.iter().map(|e| &e.g)),
        c: fit_pair("c", tr.iter().map(|e| &e.c)),
        m: Default::default(),
        vel: [vel(0), vel(1)],
    };
    let data = |set: &[&PretextExample]| Data {
        g: set.iter().map(|e| standardize(&e.g, &stats.g)).collect(),
        c: set.iter().map(|e| standardize(&e.c, &stats.c)).collect(),
        m: Vec::new(),
        targets: Targets::Velocity(
            set.iter()
                .map(|e| [stats.vel[0].apply(e.target[0]), stats.vel[1].apply(e.target[1])])
                .collect(),
        ),
    };
    let (train, val) = (data(&tr), data(&va));
    let params = ModelParams::init(&cfg.model, cfg.input_mode, HeadKind::VelocityRegressor, cfg.seed)?;
    let fit = fit(
        params,
        &|_| true,
        &train,
        (!va.is_empty()).then_some(&val),
        [1.0, 1.0],
        cfg,
        Stage::Pretext,
    )?;
    Ok(TrainOutcome {
        params: fit.params,
        stats,
        history: fit.history,
        best_epoch: fit.best_epoch,
        validation_subject: val_subject,
    })
}

fn class_data(set: &[&GazeExample], m: Option<Vec<Channels>>, stats: &NormStats) -> Data {
    Data {
        g: set.iter().map(|e| standardize(&e.g, &stats.g)).collect(),
        c: set.iter().map(|e| standardize(&e.c, &stats.c)).collect(),
        m: m.unwrap_or_default(),
        targets: Targets::Class(set.iter().map(|e| e.label.class_id()).collect()),
    }
}

fn weights_of(set: &[&GazeExample]) -> Result<[f32; 2]> {
    let w = compute_class_weights(&set.iter().map(|e| e.label).collect::<Vec<_>>())?;
    Ok([w[0] as f32, w[1] as f32])
}

/// Replaces the head of a pretrained model with a fresh classifier and
/// trains with class-weighted cross-entropy under the configured freeze
/// mode. Inputs are standardized with the pretraining statistics.
pub fn finetune(
    pretrained: &ModelParams<f32>,
    stats: &NormStats,
    examples: &[GazeExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_gaze_mode(cfg)?;
    if pretrained.config != cfg.model || pretrained.input_mode != cfg.input_mode {
        return Err(Error::Checkpoint(format!(
            "pretrained backbone ({:?}, {}) does not match the requested ({:?}, {})",
            pretrained.config,
            pretrained.input_mode.as_str(),
            cfg.model,
            cfg.input_mode.as_str()
        )));
    }
    let kept = select_label_fraction(examples, cfg.label_fraction, cfg.seed);
    let val_subject = validation_subject(kept.iter().map(|e| e.subject_id.as_str()), cfg.seed);
    let (tr, va) = split_by_subject(&kept, val_subject.as_deref(), |e| &e.subject_id);
    let weights = weights_of(&tr)?;
    let mut params = pretrained.clone();
    params.swap_head(HeadKind::IntentClassifier, seed::derive(cfg.seed, &[seed::fnv1a(b"finetune-head")]));
    let (train, val) = (class_data(&tr, None, stats), class_data(&va, None, stats));
    let freeze = cfg.freeze;
    let trainable = move |name: &str| freeze == FreezeMode::Full || !is_frozen_in_partial(name);
    let fit = fit(
        params,
        &trainable,
        &train,
        (!va.is_empty()).then_some(&val),
        weights,
        cfg,
        Stage::Finetune,
    )?;
    Ok(TrainOutcome {
        params: fit.params,
        stats: stats.clone(),
        history: fit.history,
        best_epoch: fit.best_epoch,
        validation_subject: val_subject,
    })
}

/// Trains a classifier from random initialization on any input mode.
pub fn supervised_train(examples: &[LabeledExample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mouse = cfg.input_mode.uses_mouse();
    if mouse && examples.iter().any(|e| e.m.is_none()) {
        return Err(Error::Dataset(format!(
            "input mode {} needs a cursor log in every session",
            cfg.input_mode.as_str()
        )));
    }
    let kept = select_label_fraction(examples, cfg.label_fraction, cfg.seed);
    let val_subject = validation_subject(kept.iter().map(|e| e.gaze.subject_id.as_str()), cfg.seed);
    let (tr, va) = split_by_subject(&kept, val_subject.as_deref(), |e| &e.gaze.subject_id);
    let tr_gaze: Vec<&GazeExample> = tr.iter().map(|e| &e.gaze).collect();
    let va_gaze: Vec<&GazeExample> = va.iter().map(|e| &e.gaze).collect();
    let stats = NormStats {
        g: fit_pair("g", tr_gaze.iter().map(|e| &e.g)),
        c: fit_pair("c", tr_gaze.iter().map(|e| &e.c)),
        m: if mouse {
            fit_pair("m", tr.iter().filter_map(|e| e.m.as_ref()))
        } else {
            Default::default()
        },
        vel: Default::default(),
    };
    let mouse_of = |set: &[&LabeledExample]| {
        mouse.then(|| {
            set.iter()
                .map(|e| standardize(e.m.as_ref().expect("checked above"), &stats.m))
                .collect()
        })
    };
    let weights = weights_of(&tr_gaze)?;
    let train = class_data(&tr_gaze, mouse_of(&tr), &stats);
    let val = class_data(&va_gaze, mouse_of(&va), &stats);
    let params = ModelParams::init(&cfg.model, cfg.input_mode, HeadKind::IntentClassifier, cfg.seed)?;
    let fit = fit(
        params,
        &|_| true,
        &train,
        (!va.is_empty()).then_some(&val),
        weights,
        cfg,
        Stage::Supervised,
    )?;
    Ok(TrainOutcome {
        params: fit.params,
        stats,
        history: fit.history,
        best_epoch: fit.best_epoch,
        validation_subject: val_subject,
    })
}

/// Class probabilities for gaze windows under a trained classifier.
pub fn predict_gaze(params: &ModelParams<f32>, stats: &NormStats, examples: &[&GazeExample]) -> Result<Vec<[f32; 2]>> {
    let data = class_data(examples, None, stats);
    predict_data(params, &data)
}

/// Class probabilities for labeled windows, including the cursor stream
/// when the model's input mode uses it.
pub fn predict_labeled(
    params: &ModelParams<f32>,
    stats: &NormStats,
    examples: &[&LabeledExample],
) -> Result<Vec<[f32; 2]>> {
    let gaze: Vec<&GazeExample> = examples.iter().map(|e| &e.gaze).collect();
    let m = params.input_mode.uses_mouse().then(|| {
        examples
            .iter()
            .map(|e| e.m.as_ref().map_or([[0.0; 24]; 2], |m| standardize(m, &stats.m)))
            .collect()
    });
    predict_data(params, &class_data(&gaze, m, stats))
}

fn predict_data(params: &ModelParams<f32>, data: &Data) -> Result<Vec<[f32; 2]>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(crate::model::predict(params, &data.input(chunk, params.input_mode))?);
    }
    Ok(out)
}
