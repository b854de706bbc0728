use std::collections::BTreeMap;

use magread_numerics::{Scalar, Tape, Tensor, Var};

use super::{HeadKind, InputMode, ModelParams, Stream, LN_EPS};
use crate::dataio::Channels;
use crate::error::{Error, Result};

/// Batched model inputs, each stream `[B × window × 2]` time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T: Scalar = f32> {
    pub batch: usize,
    pub gaze: Option<Tensor<T>>,
    pub comp: Option<Tensor<T>>,
    pub mouse: Option<Tensor<T>>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn new(batch: usize) -> Self {
        ModelInput {
            batch,
            gaze: None,
            comp: None,
            mouse: None,
        }
    }

    /// Packs channel-major windows into one time-major stream tensor.
    pub fn stream_tensor<'a>(windows: impl ExactSizeIterator<Item = &'a Channels>) -> Tensor<T> {
        let b = windows.len();
        let len = crate::dataio::WINDOW_LEN;
        let mut data = Vec::with_capacity(b * len * 2);
        for ch in windows {
            for t in 0..len {
                data.push(T::of(ch[0][t] as f64));
                data.push(T::of(ch[1][t] as f64));
            }
        }
        Tensor::from_vec(vec![b, len, 2], data).expect("stream shape")
    }

    pub fn with(mut self, stream: Stream, x: Tensor<T>) -> Self {
        *self.slot(stream) = Some(x);
        self
    }

    fn slot(&mut self, stream: Stream) -> &mut Option<Tensor<T>> {
        match stream {
            Stream::Gaze => &mut self.gaze,
            Stream::Comp => &mut self.comp,
            Stream::Mouse => &mut self.mouse,
        }
    }

    pub fn get(&self, stream: Stream) -> Option<&Tensor<T>> {
        match stream {
            Stream::Gaze => self.gaze.as_ref(),
            Stream::Comp => self.comp.as_ref(),
            Stream::Mouse => self.mouse.as_ref(),
        }
    }
}

/// Model tensors recorded on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Records every tensor, as a trainable leaf where `trainable(name)`
    /// holds and as a constant otherwise.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("tensor `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w")))?;
    Ok(tape.add_bias(y, p.get(&format!("{name}.b")))?)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    Ok(tape.layer_norm(
        x,
        p.get(&format!("{name}.gamma")),
        p.get(&format!("{name}.beta")),
        T::of(LN_EPS),
    )?)
}

/// Multi-head attention sublayer with input and output projections.
fn mha<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    name: &str,
    q_src: Var,
    kv_src: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, p, &format!("{name}.q"), q_src)?;
    let k = linear(tape, p, &format!("{name}.k"), kv_src)?;
    let v = linear(tape, p, &format!("{name}.v"), kv_src)?;
    let a = tape.attention(q, k, v, batch, heads)?;
    linear(tape, p, &format!("{name}.o"), a)
}

/// CNN encoder of one stream: `[B×T×2] → [B·T × d]`.
pub fn encode_stream<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    params: &ModelParams<T>,
    stream: Stream,
    x: Var,
) -> Result<Var> {
    let cfg = &params.config;
    match *tape.shape(x) {
        [_, t, c] if t == cfg.window && c == cfg.in_channels => {}
        ref other => {
            return Err(Error::Config(format!(
                "{} input must be [batch, {}, {}], got {other:?}",
                stream.prefix(),
                cfg.window,
                cfg.in_channels
            )))
        }
    }
    let batch = tape.shape(x)[0];
    let mut h = x;
    for l in 0..cfg.cnn_layers {
        let name = format!("{}.conv{l}", stream.prefix());
        h = tape.conv1d_time_major(h, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")))?;
        h = tape.relu(h);
    }
    Ok(tape.reshape(h, &[batch * cfg.window, cfg.d_model])?)
}

/// One cross-attention block: `LN(q_src + MHA(q_src, kv_src))`.
pub fn cross_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    params: &ModelParams<T>,
    name: &str,
    q_src: Var,
    kv_src: Var,
    batch: usize,
) -> Result<Var> {
    let a = mha(tape, p, name, q_src, kv_src, batch, params.config.n_heads)?;
    let r = tape.add(q_src, a)?;
    norm(tape, p, &format!("{name}.norm"), r)
}

/// Bidirectional fusion: both cross-attention outputs (and the mouse
/// encoding, if any) are concatenated per step, projected back to `d`, and
/// the mean of the gaze encodings is added as a residual.
pub fn cross_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    params: &ModelParams<T>,
    hg: Var,
    hc: Var,
    hm: Option<Var>,
    batch: usize,
) -> Result<Var> {
    if tape.shape(hg) != tape.shape(hc) {
        return Err(Error::Config(format!(
            "cross_fuse streams differ in shape: {:?} vs {:?}",
            tape.shape(hg),
            tape.shape(hc)
        )));
    }
    let a = cross_block(tape, p, params, "xattn_gc", hg, hc, batch)?;
    let b = cross_block(tape, p, params, "xattn_cg", hc, hg, batch)?;
    let mut parts = vec![a, b];
    parts.extend(hm);
    let cat = tape.concat_cols(&parts)?;
    let proj = linear(tape, p, "fusion", cat)?;
    let sum = tape.add(hg, hc)?;
    let mean = tape.scale(sum, T::of(0.5));
    Ok(tape.add(proj, mean)?)
}

/// Positional encoding, pre-norm transformer layers and the final layer
/// norm: `[B·T × d] → [B·T × d]`.
pub fn transformer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    params: &ModelParams<T>,
    h: Var,
    batch: usize,
) -> Result<Var> {
    let cfg = &params.config;
    let table = params.pos_table().data();
    let mut tiled = Vec::with_capacity(batch * table.len());
    for _ in 0..batch {
        tiled.extend_from_slice(table);
    }
    let pos = tape.constant(Tensor::from_vec(vec![batch * cfg.window, cfg.d_model], tiled)?);
    let mut x = tape.add(h, pos)?;
    for l in 0..cfg.transformer_layers {
        let n1 = norm(tape, p, &format!("tf{l}.norm1"), x)?;
        let a = mha(tape, p, &format!("tf{l}.attn"), n1, n1, batch, cfg.n_heads)?;
        x = tape.add(x, a)?;
        let n2 = norm(tape, p, &format!("tf{l}.norm2"), x)?;
        let f = linear(tape, p, &format!("tf{l}.ffn1"), n2)?;
        let f = tape.relu(f);
        let f = linear(tape, p, &format!("tf{l}.ffn2"), f)?;
        x = tape.add(x, f)?;
    }
    norm(tape, p, "final_norm", x)
}

/// Head on each window's final step: `[B·T × d] → [B × 2]`.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    params: &ModelParams<T>,
    h: Var,
    batch: usize,
) -> Result<Var> {
    let w = params.config.window;
    let rows: Vec<usize> = (0..batch).map(|b| b * w + w - 1).collect();
    let last = tape.gather_rows(h, &rows)?;
    linear(tape, p, "head", last)
}

/// Records the full model on `tape` and returns the `[B × 2]` output.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    params: &ModelParams<T>,
    input: &ModelInput<T>,
) -> Result<Var> {
    let batch = input.batch;
    if batch == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let mut enc = BTreeMap::new();
    for &s in params.input_mode.streams() {
        let x = input.get(s).ok_or_else(|| {
            Error::Config(format!(
                "input mode {} needs the {} stream",
                params.input_mode.as_str(),
                s.prefix()
            ))
        })?;
        if x.shape().first() != Some(&batch) {
            return Err(Error::Config(format!(
                "{} stream has shape {:?}, batch is {batch}",
                s.prefix(),
                x.shape()
            )));
        }
        let xv = tape.constant(x.clone());
        enc.insert(s.prefix(), encode_stream(tape, p, params, s, xv)?);
    }
    let h = match params.input_mode {
        InputMode::GazePlusComp | InputMode::MouseGazeComp => {
            let hm = enc.get(Stream::Mouse.prefix()).copied();
            cross_fuse(tape, p, params, enc["enc_g"], enc["enc_c"], hm, batch)?
        }
        InputMode::GazeOnly => enc["enc_g"],
        InputMode::CompOnly => enc["enc_c"],
        InputMode::MouseOnly => enc["enc_m"],
    };
    let h = transformer_forward(tape, p, params, h, batch)?;
    head_forward(tape, p, params, h, batch)
}

/// Inference without gradients: `[B × 2]` logits or standardized velocity.
pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &ModelInput<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, params, |_| false);
    let out = forward_on_tape(&mut tape, &p, params, input)?;
    Ok(tape.value(out).clone())
}

/// Class probabilities `[p_reading, p_scanning]` per window.
pub fn predict(params: &ModelParams<f32>, input: &ModelInput<f32>) -> Result<Vec<[f32; 2]>> {
    if params.head != HeadKind::IntentClassifier {
        return Err(Error::Config("predict needs an intent-classifier head".into()));
    }
    let logits = forward(params, input)?;
    Ok(logits
        .data()
        .chunks(2)
        .map(|z| {
            let m = z[0].max(z[1]);
            let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
            [a / (a + b), b / (a + b)]
        })
        .collect())
}
