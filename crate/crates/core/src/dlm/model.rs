use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Filled from the corpus vocabulary when 0.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_ff: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_len: 640,
            d_ff: 512,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("model.init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub attn_gain: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_gain: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Every trainable tensor of the model. `Params<Tensor>` is the stored form,
/// `Params<Var>` the same parameters bound to a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub head: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> LayerParams<T> {
    fn refs(&self) -> [(&'static str, &T); 10] {
        [
            ("attn_gain", &self.attn_gain),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_gain", &self.ffn_gain),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn refs_mut(&mut self) -> [(&'static str, &mut T); 10] {
        [
            ("attn_gain", &mut self.attn_gain),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ffn_gain", &mut self.ffn_gain),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn try_map<U>(&self, f: &mut impl FnMut(&T) -> Result<U>) -> Result<LayerParams<U>> {
        Ok(LayerParams {
            attn_gain: f(&self.attn_gain)?,
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            ffn_gain: f(&self.ffn_gain)?,
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
        })
    }
}

impl<T> Params<T> {
    /// Named references in a fixed order shared by every `Params`.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.refs().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.refs_mut().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Params<U>> {
        Ok(Params {
            tok_emb: f(&self.tok_emb)?,
            pos_emb: f(&self.pos_emb)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(&mut f))
                .collect::<Result<_>>()?,
            final_gain: f(&self.final_gain)?,
            head: f(&self.head)?,
        })
    }
}

impl ModelParams {
    /// Weights ~ N(0, init_std²), biases 0, norm gains 1.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut w = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("shape")
        };
        let (d, f) = (config.d_model, config.d_ff);
        let ones = |n: usize| Tensor::vector(vec![1.0; n]);
        let tok_emb = w(config.vocab_size, d);
        let pos_emb = w(config.max_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_gain: ones(d),
                wq: w(d, d),
                wk: w(d, d),
                wv: w(d, d),
                wo: w(d, d),
                ffn_gain: ones(d),
                w1: w(d, f),
                b1: Tensor::zeros(&[f]),
                w2: w(f, d),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head = w(d, config.vocab_size);
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_gain: ones(d),
            head,
        })
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Params<Var> {
        self.try_map(|t| {
            Ok(if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            })
        })
        .expect("binding cannot fail")
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        if self.layers.len() != config.n_layers {
            return Err(Error::Dimension(format!(
                "{} layers stored, config has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        let mut expected: Vec<Vec<usize>> = vec![vec![v, d], vec![config.max_len, d]];
        for _ in 0..config.n_layers {
            expected.extend([
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        expected.extend([vec![d], vec![d, v]]);
        for ((name, t), shape) in self.named().into_iter().zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: stored {:?}, config needs {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Post-softmax attention and value rows of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadCapture {
    /// `A`, shape `L × L`.
    pub attn: Var,
    /// `V`, shape `L × d_h`.
    pub value: Var,
}

/// Per layer, per head captures recorded on the tape.
#[derive(Clone, Debug, Default)]
pub struct AttentionCapture {
    pub layers: Vec<Vec<HeadCapture>>,
}

impl AttentionCapture {
    pub fn layer(&self, layer: usize) -> Result<&[HeadCapture]> {
        self.layers
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("layer {layer} was not captured")))
    }
}

pub struct ForwardOutput {
    /// `L × vocab`.
    pub logits: Var,
    pub capture: AttentionCapture,
}

/// Pre-norm transformer with full (bidirectional) self-attention.
pub fn forward(
    tape: &mut Tape,
    params: &Params<Var>,
    config: &ModelConfig,
    ids: &[usize],
    capture: bool,
) -> Result<ForwardOutput> {
    let len = ids.len();
    if len == 0 || len > config.max_len {
        return Err(Error::Contract(format!(
            "sequence length {len} outside 1..={}",
            config.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Index(format!("token id {bad} >= vocab size {}", config.vocab_size)));
    }
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let positions: Vec<usize> = (0..len).collect();

    let tok = tape.gather_rows(params.tok_emb, ids)?;
    let pos = tape.gather_rows(params.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut captured = AttentionCapture::default();

    for layer in &params.layers {
        let h = tape.rms_norm(x, layer.attn_gain)?;
        let q = tape.matmul(h, layer.wq)?;
        let k = tape.matmul(h, layer.wk)?;
        let v = tape.matmul(h, layer.wv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        let mut layer_capture = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let (a, b) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
            layer_capture.push(HeadCapture { attn, value: vh });
        }
        let merged = tape.concat_cols(&heads)?;
        let attn_out = tape.matmul(merged, layer.wo)?;
        x = tape.add(x, attn_out)?;

        let h = tape.rms_norm(x, layer.ffn_gain)?;
        let f = tape.matmul(h, layer.w1)?;
        let f = tape.add_row_vector(f, layer.b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, layer.w2)?;
        let f = tape.add_row_vector(f, layer.b2)?;
        x = tape.add(x, f)?;
        if capture {
            captured.layers.push(layer_capture);
        }
    }
    let h = tape.rms_norm(x, params.final_gain)?;
    let logits = tape.matmul(h, params.head)?;
    Ok(ForwardOutput {
        logits,
        capture: captured,
    })
}

/// A stored model for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = forward(&mut tape, &p, &self.config, ids, false)?;
        Ok(tape.value(out.logits).clone())
    }
}
