//! Layers used by the motion networks. Each layer registers its parameters
//! in a [`ParamStore`] under a name prefix at construction, and later reads
//! them back onto a [`Graph`] in `forward`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(&weight, init::fan_in_uniform(rng, in_dim, vec![in_dim, out_dim]))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(vec![out_dim]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(&gain, Tensor::new(vec![dim], vec![1.0; dim])?)?;
        store.insert(&bias, Tensor::zeros(vec![dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.gain)?;
        let bias = g.param(store, &self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(shape_err("multi_head_attention", format!("d_model {d_model} with {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), d_model, d_model, true)?,
            heads,
        })
    }

    /// Attention of `query` rows over `memory` rows, block-diagonal with
    /// `q_block` query rows per `kv_block` memory rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, memory: Var, q_block: usize, kv_block: usize) -> Result<Var> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let a = g.attention(q, k, v, self.heads, q_block, kv_block)?;
        self.out.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d_model, hidden, true)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d_model, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Sinusoidal position table, `len × d` row-major.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm transformer encoder.
#[derive(Clone, Debug)]
pub struct TransformerEncoderStack {
    layers: Vec<EncoderLayer>,
    ln_final: LayerNorm,
}

impl TransformerEncoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), cfg.d_model)?,
                    attn: MultiHeadAttention::new(store, rng, &format!("{p}.attn"), cfg.d_model, cfg.heads)?,
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), cfg.d_model)?,
                    ff: FeedForward::new(store, rng, &format!("{p}.ff"), cfg.d_model, cfg.ff_dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), cfg.d_model)?,
        })
    }

    /// `x` holds independent sequences of `block` rows each.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, block: usize) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, store, x)?;
            let a = layer.attn.forward(g, store, h, h, block, block)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, store, x)?;
            let f = layer.ff.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        self.ln_final.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm transformer decoder (non-causal self attention followed by
/// cross attention over a memory sequence).
#[derive(Clone, Debug)]
pub struct TransformerDecoderStack {
    layers: Vec<DecoderLayer>,
    ln_final: LayerNorm,
}

impl TransformerDecoderStack {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), cfg.d_model)?,
                    self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), cfg.d_model, cfg.heads)?,
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), cfg.d_model)?,
                    cross_attn: MultiHeadAttention::new(store, rng, &format!("{p}.cross_attn"), cfg.d_model, cfg.heads)?,
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), cfg.d_model)?,
                    ff: FeedForward::new(store, rng, &format!("{p}.ff"), cfg.d_model, cfg.ff_dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), cfg.d_model)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, block: usize, memory: Var, memory_block: usize) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, store, x)?;
            let a = layer.self_attn.forward(g, store, h, h, block, block)?;
            x = g.add(x, a)?;
            let h = layer.ln_cross.forward(g, store, x)?;
            let a = layer.cross_attn.forward(g, store, h, memory, block, memory_block)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, store, x)?;
            let f = layer.ff.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        self.ln_final.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    input: Linear,
    recurrent: Linear,
}

/// Stacked LSTM over batched sequences.
#[derive(Clone, Debug)]
pub struct LstmStack {
    layers: Vec<LstmLayer>,
    hidden: usize,
}

pub struct LstmOutput {
    /// Top-layer hidden states, `steps * batch` rows in time-major order.
    pub outputs: Var,
    /// Top-layer hidden state after the last step, `batch × hidden`.
    pub last_hidden: Var,
}

impl LstmStack {
    /// Input weights use fan-in uniform init, recurrent weights are
    /// orthogonal per gate, biases are zero except the forget gate (1).
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input_dim: usize, hidden: usize, n_layers: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let in_dim = if l == 0 { input_dim } else { hidden };
            let p = format!("{name}.layer{l}");
            let input = Linear::new(store, rng, &format!("{p}.input"), in_dim, 4 * hidden, true)?;
            let recurrent = Linear::new(store, rng, &format!("{p}.recurrent"), hidden, 4 * hidden, false)?;
            let mut w = vec![0.0; hidden * 4 * hidden];
            for gate in 0..4 {
                let q = init::orthogonal(rng, hidden);
                for r in 0..hidden {
                    for c in 0..hidden {
                        w[r * 4 * hidden + gate * hidden + c] = q[r * hidden + c];
                    }
                }
            }
            store.get_mut(&recurrent.weight)?.value = Tensor::matrix(hidden, 4 * hidden, w)?;
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
            store.get_mut(input.bias.as_ref().expect("input bias"))?.value = Tensor::new(vec![4 * hidden], b)?;
            layers.push(LstmLayer { input, recurrent });
        }
        Ok(Self { layers, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `x` is `steps * batch` rows (time-major: row `s * batch + b`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, steps: usize) -> Result<LstmOutput> {
        let (rows, _) = g.dims(x);
        if rows != batch * steps || batch == 0 {
            return Err(shape_err("lstm", format!("{rows} rows for batch {batch} × {steps} steps")));
        }
        let h_dim = self.hidden;
        let mut seq = x;
        let mut last = None;
        for layer in &self.layers {
            let proj = layer.input.forward(g, store, seq)?;
            let mut h = g.zeros(batch, h_dim);
            let mut c = g.zeros(batch, h_dim);
            let mut hs = Vec::with_capacity(steps);
            for s in 0..steps {
                let xs = g.slice_rows(proj, s * batch, batch)?;
                let rec = layer.recurrent.forward(g, store, h)?;
                let gates = g.add(xs, rec)?;
                let hc = g.lstm_cell(gates, c)?;
                h = g.slice_cols(hc, 0, h_dim)?;
                c = g.slice_cols(hc, h_dim, h_dim)?;
                hs.push(h);
            }
            seq = if hs.len() == 1 { hs[0] } else { g.concat_rows(&hs)? };
            last = Some(h);
        }
        Ok(LstmOutput {
            outputs: seq,
            last_hidden: last.ok_or_else(|| shape_err("lstm", "no layers"))?,
        })
    }
}
