//! Post-norm transformer layers built on the autodiff graph, plus a cached
//! incremental encoder for streaming inference.

use serde::{Deserialize, Serialize};

use crate::attention::multi_head_attention;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{layer_norm, linear, Tensor};

/// Fixed sinusoidal position encoding for absolute positions
/// `offset..offset + n`.
pub fn sinusoidal_positions(n: usize, d: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        let pos = (p + offset) as f64;
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[p * d + i] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
        }
    }
    Tensor::matrix(n, d, data).expect("non-empty")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(params: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        Linear {
            weight: params.add_xavier(format!("{name}.weight"), rows, cols, rng),
            bias: params.add_const(format!("{name}.bias"), cols, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }

    pub fn apply(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        linear(x, params.get(self.weight), params.get(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn init(params: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gamma: params.add_const(format!("{name}.gamma"), d, 1.0),
            beta: params.add_const(format!("{name}.beta"), d, 0.0),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn apply(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x, params.get(self.gamma), params.get(self.beta))?.0)
    }
}

/// Projected multi-head attention.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionBlock {
    fn init(params: &mut ParamStore, name: &str, d: usize, rng: &mut impl rand::Rng) -> Self {
        AttentionBlock {
            query: Linear::init(params, &format!("{name}.q"), d, d, rng),
            key: Linear::init(params, &format!("{name}.k"), d, d, rng),
            value: Linear::init(params, &format!("{name}.v"), d, d, rng),
            output: Linear::init(params, &format!("{name}.o"), d, d, rng),
        }
    }

    /// Key/value projections of a memory, reusable across queries.
    pub fn project_memory(&self, g: &mut Graph, memory: Var) -> Result<(Var, Var)> {
        Ok((self.key.forward(g, memory)?, self.value.forward(g, memory)?))
    }

    pub fn forward_projected(
        &self,
        g: &mut Graph,
        x: Var,
        keys: Var,
        values: Var,
        mask: &AttentionMask,
        heads: usize,
    ) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let ctx = g.attention(q, keys, values, mask, heads)?;
        self.output.forward(g, ctx)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let (k, v) = self.project_memory(g, memory)?;
        self.forward_projected(g, x, k, v, mask, heads)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    fn init(params: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut impl rand::Rng) -> Self {
        FeedForward {
            inner: Linear::init(params, &format!("{name}.inner"), d, ff, rng),
            outer: Linear::init(params, &format!("{name}.outer"), ff, d, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }

    fn apply(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.inner.apply(params, x)?.map(|v| v.max(0.0));
        self.outer.apply(params, &h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attention: AttentionBlock,
    pub norm1: Norm,
    pub feed_forward: FeedForward,
    pub norm2: Norm,
}

/// Stack of self-attention encoder layers sharing one width and head count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerStack {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: Vec<EncoderLayer>,
}

impl TransformerStack {
    pub fn init(
        params: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        layers: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                EncoderLayer {
                    attention: AttentionBlock::init(params, &format!("{p}.attn"), d, rng),
                    norm1: Norm::init(params, &format!("{p}.norm1"), d),
                    feed_forward: FeedForward::init(params, &format!("{p}.ff"), d, ff, rng),
                    norm2: Norm::init(params, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Ok(TransformerStack { d, heads, ff, layers })
    }

    /// Residual + post-norm encoding of `x` under `mask`.
    pub fn encode_with_mask(&self, g: &mut Graph, x: Var, mask: &AttentionMask, dropout: f64) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let a = layer.attention.forward(g, h, h, mask, self.heads)?;
            let a = g.dropout(a, dropout);
            let r = g.add(h, a)?;
            let y = layer.norm1.forward(g, r)?;
            let f = layer.feed_forward.forward(g, y)?;
            let f = g.dropout(f, dropout);
            let r = g.add(y, f)?;
            h = layer.norm2.forward(g, r)?;
        }
        Ok(h)
    }
}

/// Causal encoder state grown one frame at a time. Each layer caches the
/// projected keys and values of every frame seen so far, so earlier outputs
/// are never recomputed.
#[derive(Clone, Debug)]
pub struct IncrementalEncoder {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    outputs: Vec<f64>,
    frames: usize,
    d: usize,
}

impl IncrementalEncoder {
    pub fn new(stack: &TransformerStack) -> Self {
        IncrementalEncoder {
            keys: vec![Vec::new(); stack.layers.len()],
            values: vec![Vec::new(); stack.layers.len()],
            outputs: Vec::new(),
            frames: 0,
            d: stack.d,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Encoded rows for all frames so far (`frames × d`).
    pub fn outputs(&self) -> Result<Tensor> {
        Tensor::matrix(self.frames, self.d, self.outputs.clone())
    }

    /// Encodes the next frame (already embedded, `d` values) and returns its
    /// output row.
    pub fn push(&mut self, stack: &TransformerStack, params: &ParamStore, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.d {
            return Err(Error::Shape(format!("frame of width {} for encoder width {}", row.len(), self.d)));
        }
        let m = self.frames + 1;
        let mut h = Tensor::matrix(1, self.d, row.to_vec())?;
        for (l, layer) in stack.layers.iter().enumerate() {
            let q = layer.attention.query.apply(params, &h)?;
            let k = layer.attention.key.apply(params, &h)?;
            let v = layer.attention.value.apply(params, &h)?;
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
            let keys = Tensor::matrix(m, self.d, self.keys[l].clone())?;
            let values = Tensor::matrix(m, self.d, self.values[l].clone())?;
            let ctx = multi_head_attention(&q, &keys, &values, &AttentionMask::full(1, m), stack.heads)?.output;
            let a = layer.attention.output.apply(params, &ctx)?;
            let mut r = h.clone();
            r.add_assign(&a);
            let y = layer.norm1.apply(params, &r)?;
            let f = layer.feed_forward.apply(params, &y)?;
            let mut r = y;
            r.add_assign(&f);
            h = layer.norm2.apply(params, &r)?;
        }
        self.outputs.extend_from_slice(h.data());
        self.frames = m;
        Ok(h.into_data())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attention: AttentionBlock,
    pub norm1: Norm,
    pub cross_attention: Option<AttentionBlock>,
    pub norm_cross: Option<Norm>,
    pub feed_forward: FeedForward,
    pub norm2: Norm,
}

/// Decoder stack; without cross-attention it is a causal self-attention
/// stack over its input sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderStack {
    pub d: usize,
    pub heads: usize,
    pub layers: Vec<DecoderLayer>,
}

/// Cross-attention memory already projected into per-layer keys/values.
pub struct ProjectedMemory {
    pub kv: Vec<(Var, Var)>,
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        layers: usize,
        cross: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                DecoderLayer {
                    self_attention: AttentionBlock::init(params, &format!("{p}.self"), d, rng),
                    norm1: Norm::init(params, &format!("{p}.norm1"), d),
                    cross_attention: cross.then(|| AttentionBlock::init(params, &format!("{p}.cross"), d, rng)),
                    norm_cross: cross.then(|| Norm::init(params, &format!("{p}.norm_cross"), d)),
                    feed_forward: FeedForward::init(params, &format!("{p}.ff"), d, ff, rng),
                    norm2: Norm::init(params, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Ok(DecoderStack { d, heads, layers })
    }

    pub fn has_cross(&self) -> bool {
        self.layers.first().is_some_and(|l| l.cross_attention.is_some())
    }

    pub fn project_memory(&self, g: &mut Graph, memory: Var) -> Result<ProjectedMemory> {
        let kv = self
            .layers
            .iter()
            .map(|l| {
                l.cross_attention
                    .as_ref()
                    .ok_or_else(|| Error::Config("decoder has no cross-attention".into()))?
                    .project_memory(g, memory)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProjectedMemory { kv })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        self_mask: &AttentionMask,
        memory: Option<(&ProjectedMemory, &AttentionMask)>,
        dropout: f64,
    ) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.self_attention.forward(g, h, h, self_mask, self.heads)?;
            let a = g.dropout(a, dropout);
            let r = g.add(h, a)?;
            h = layer.norm1.forward(g, r)?;
            if let (Some(cross), Some(norm), Some((mem, mask))) =
                (&layer.cross_attention, &layer.norm_cross, memory)
            {
                let (k, v) = mem.kv[l];
                let c = cross.forward_projected(g, h, k, v, mask, self.heads)?;
                let c = g.dropout(c, dropout);
                let r = g.add(h, c)?;
                h = norm.forward(g, r)?;
            }
            let f = layer.feed_forward.forward(g, h)?;
            let f = g.dropout(f, dropout);
            let r = g.add(h, f)?;
            h = layer.norm2.forward(g, r)?;
        }
        Ok(h)
    }
}
