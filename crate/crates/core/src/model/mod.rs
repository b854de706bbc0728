//! Dual-stream gaze encoder: per-stream CNNs, bidirectional cross-attention
//! fusion, a pre-norm transformer and a swappable two-output head.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use magread_numerics::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

pub use checkpoint::{
    load_checkpoint, load_for_finetune, save_checkpoint, CheckpointManifest, TensorEntry, MANIFEST_FILE, WEIGHTS_FILE,
};
pub use forward::{
    cross_block, cross_fuse, encode_stream, forward, forward_on_tape, head_forward, predict, transformer_forward,
    BoundParams, ModelInput,
};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub cnn_layers: usize,
    pub kernel: usize,
    pub transformer_layers: usize,
    pub ffn_hidden: usize,
    pub window: usize,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            cnn_layers: 3,
            kernel: 3,
            transformer_layers: 3,
            ffn_hidden: 256,
            window: crate::dataio::WINDOW_LEN,
            in_channels: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.window != crate::dataio::WINDOW_LEN {
            return bad(format!("window must be {}, got {}", crate::dataio::WINDOW_LEN, self.window));
        }
        if self.kernel != 3 {
            return bad(format!("only kernel size 3 is supported, got {}", self.kernel));
        }
        if self.in_channels != 2 {
            return bad(format!("streams carry 2 channels, got {}", self.in_channels));
        }
        if self.cnn_layers == 0 || self.transformer_layers == 0 || self.ffn_hidden == 0 {
            return bad("cnn_layers, transformer_layers and ffn_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Which input streams feed the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    GazePlusComp,
    GazeOnly,
    CompOnly,
    MouseOnly,
    MouseGazeComp,
}

impl InputMode {
    pub const ALL: [InputMode; 5] = [
        InputMode::GazePlusComp,
        InputMode::GazeOnly,
        InputMode::CompOnly,
        InputMode::MouseOnly,
        InputMode::MouseGazeComp,
    ];

    pub fn streams(self) -> &'static [Stream] {
        match self {
            InputMode::GazePlusComp => &[Stream::Gaze, Stream::Comp],
            InputMode::GazeOnly => &[Stream::Gaze],
            InputMode::CompOnly => &[Stream::Comp],
            InputMode::MouseOnly => &[Stream::Mouse],
            InputMode::MouseGazeComp => &[Stream::Gaze, Stream::Comp, Stream::Mouse],
        }
    }

    pub fn uses_mouse(self) -> bool {
        self.streams().contains(&Stream::Mouse)
    }

    /// Whether gaze and compensated streams are fused by cross-attention.
    pub fn fused(self) -> bool {
        matches!(self, InputMode::GazePlusComp | InputMode::MouseGazeComp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::GazePlusComp => "gaze_plus_comp",
            InputMode::GazeOnly => "gaze_only",
            InputMode::CompOnly => "comp_only",
            InputMode::MouseOnly => "mouse_only",
            InputMode::MouseGazeComp => "mouse_gaze_comp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        InputMode::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Gaze,
    Comp,
    Mouse,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Gaze => "enc_g",
            Stream::Comp => "enc_c",
            Stream::Mouse => "enc_m",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    VelocityRegressor,
    IntentClassifier,
}

/// Parameters excluded from partial fine-tuning: encoders, cross-attention
/// and fusion.
pub fn is_frozen_in_partial(name: &str) -> bool {
    name.starts_with("enc_") || name.starts_with("xattn_") || name.starts_with("fusion.")
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Fixed sinusoidal positional table `[window × d]`.
pub fn positional_table<T: Scalar>(window: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(window * d);
    for t in 0..window {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * freq;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(vec![window, d], data).expect("table shape")
}

/// Initialization rule for one tensor.
#[derive(Clone, Copy, Debug)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every learned tensor, in a fixed order.
fn layout(cfg: &ModelConfig, mode: InputMode) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], Init::FanIn(i)));
        out.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
        out.push((format!("{name}.gamma"), vec![d], Init::Ones));
        out.push((format!("{name}.beta"), vec![d], Init::Zeros));
    };
    for s in mode.streams() {
        let mut cin = cfg.in_channels;
        for l in 0..cfg.cnn_layers {
            let name = format!("{}.conv{l}", s.prefix());
            out.push((format!("{name}.w"), vec![d, cin, cfg.kernel], Init::FanIn(cin * cfg.kernel)));
            out.push((format!("{name}.b"), vec![d], Init::Zeros));
            cin = d;
        }
    }
    if mode.fused() {
        for block in ["xattn_gc", "xattn_cg"] {
            for p in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{block}.{p}"), d, d);
            }
            norm(&mut out, &format!("{block}.norm"));
        }
        let width = if mode.uses_mouse() { 3 * d } else { 2 * d };
        linear(&mut out, "fusion", width, d);
    }
    for l in 0..cfg.transformer_layers {
        norm(&mut out, &format!("tf{l}.norm1"));
        for p in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("tf{l}.attn.{p}"), d, d);
        }
        norm(&mut out, &format!("tf{l}.norm2"));
        linear(&mut out, &format!("tf{l}.ffn1"), d, cfg.ffn_hidden);
        linear(&mut out, &format!("tf{l}.ffn2"), cfg.ffn_hidden, d);
    }
    norm(&mut out, "final_norm");
    linear(&mut out, "head", d, 2);
    out
}

fn init_tensor<T: Scalar>(base_seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = seed::rng(base_seed, &[seed::fnv1a(name.as_bytes())]);
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            Tensor::from_vec(shape.to_vec(), data).expect("init shape")
        }
    }
}

/// Named model tensors plus the fixed positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub input_mode: InputMode,
    pub head: HeadKind,
    tensors: BTreeMap<String, Tensor<T>>,
    pos_table: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization; each tensor draws from its own stream
    /// keyed by name, so re-initializing one tensor never shifts another.
    pub fn init(config: &ModelConfig, input_mode: InputMode, head: HeadKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config, input_mode)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = init_tensor(seed, &name, &shape, init);
                (name, t)
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            input_mode,
            head,
            tensors,
            pos_table: positional_table(config.window, config.d_model),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        input_mode: InputMode,
        head: HeadKind,
        tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, input_mode);
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.iter().any(|(n, _, _)| n == *k)) {
            return Err(Error::Checkpoint(format!("unknown tensor `{extra}`")));
        }
        Ok(ModelParams {
            pos_table: positional_table(config.window, config.d_model),
            config,
            input_mode,
            head,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn pos_table(&self) -> &Tensor<T> {
        &self.pos_table
    }

    /// Replaces the positional table, e.g. with zeros to probe permutation
    /// equivariance.
    pub fn set_pos_table(&mut self, table: Tensor<T>) -> Result<()> {
        if table.shape() != self.pos_table.shape() {
            return Err(Error::Config(format!(
                "positional table must have shape {:?}",
                self.pos_table.shape()
            )));
        }
        self.pos_table = table;
        Ok(())
    }

    /// Attaches a freshly initialized head of the given kind.
    pub fn swap_head(&mut self, head: HeadKind, seed: u64) {
        for (name, shape, init) in layout(&self.config, self.input_mode) {
            if is_head(&name) {
                self.tensors.insert(name.clone(), init_tensor(seed, &name, &shape, init));
            }
        }
        self.head = head;
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            input_mode: self.input_mode,
            head: self.head,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            pos_table: self.pos_table.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl ModelParams<f32> {
    /// SHA-256 over one tensor's little-endian bytes.
    pub fn tensor_checksum(&self, name: &str) -> Option<String> {
        self.tensors.get(name).map(|t| {
            let mut h = Sha256::new();
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            hex::encode(h.finalize())
        })
    }

    /// SHA-256 over names, shapes and values of the selected tensors.
    pub fn checksum_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !keep(name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    pub fn backbone_checksum(&self) -> String {
        self.checksum_where(|n| !is_head(n))
    }
}

/// Closed-form parameter count for a configuration and input mode.
pub fn param_count_formula(cfg: &ModelConfig, mode: InputMode) -> usize {
    let (d, c, k, f) = (cfg.d_model, cfg.in_channels, cfg.kernel, cfg.ffn_hidden);
    let encoder = (d * c * k + d) + (cfg.cnn_layers - 1) * (d * d * k + d);
    let mha = 4 * (d * d + d);
    let norm = 2 * d;
    let streams = mode.streams().len();
    let fusion = if mode.fused() {
        2 * (mha + norm) + (streams * d * d + d)
    } else {
        0
    };
    let layer = 2 * norm + mha + (d * f + f) + (f * d + d);
    streams * encoder + fusion + cfg.transformer_layers * layer + norm + (d * 2 + 2)
}
