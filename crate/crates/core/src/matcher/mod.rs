//! Cross-modality matching: map elements become per-element embeddings via a
//! positional MLP, a learnable semantic table and a pre-norm transformer
//! decoder that cross-attends into the layer-0 BEV grid with deformable
//! sampling.

mod checkpoint;
mod decoder;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::bev::PYRAMID_LEVELS;
use crate::map::{SemanticType, DESCRIPTOR_LEN};
use crate::{Error, Result, Tensor};

pub use checkpoint::{load_params, parse_params, save_params, write_params};
pub(crate) use decoder::value_tensor;
pub use decoder::{
    attention_weights, decode, decode_graph, deformable_cross_attention, element_inputs, feed_forward,
    init_queries, normalize_descriptor, positional_encode, self_attention, semantic_logits_graph,
    semantic_probabilities, DecoderInputs, MapEmbedding,
};

/// Layer-norm epsilon used throughout the decoder.
pub const LN_EPS: f64 = 1e-5;

/// Network widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherDims {
    /// Embedding width C (also the layer-0 BEV channel count).
    pub channels: usize,
    pub heads: usize,
    /// Deformable sampling points per head.
    pub points: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Width D after per-level unification.
    pub score_dim: usize,
    pub score_hidden: usize,
    /// BEV channel counts C_0 ≥ C_1 ≥ C_2.
    pub level_channels: [usize; PYRAMID_LEVELS],
}

impl Default for MatcherDims {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            points: 4,
            layers: 4,
            ffn_hidden: 64,
            score_dim: 8,
            score_hidden: 16,
            level_channels: [32, 16, 8],
        }
    }
}

impl MatcherDims {
    pub fn validate(&self) -> Result<()> {
        let d = self;
        let fail = |m: &str| Err(Error::arg(format!("matcher dims: {m}")));
        if [d.channels, d.heads, d.points, d.ffn_hidden, d.score_dim, d.score_hidden].contains(&0) {
            return fail("all widths must be positive");
        }
        if d.channels % 2 != 0 {
            return fail("channels must be even for the positional encoding");
        }
        if d.channels % d.heads != 0 {
            return fail("channels must be divisible by heads");
        }
        if d.level_channels[0] != d.channels {
            return fail("layer-0 BEV channels must equal the embedding width");
        }
        if d.level_channels.windows(2).any(|w| w[1] > w[0] || w[1] == 0) {
            return fail("level channels must be positive and non-increasing");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Every learnable tensor, addressed by name. Names double as gradient-check
/// parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub dims: MatcherDims,
    tensors: BTreeMap<String, Tensor>,
}

pub const TABLE: &str = "sem_table";

pub(crate) fn layer_key(d: usize, name: &str) -> String {
    format!("dec.{d}.{name}")
}

pub(crate) fn level_key(prefix: &str, l: usize) -> String {
    format!("{prefix}.{l}")
}

/// Expected shape of every tensor for the given dims.
fn shapes(d: &MatcherDims) -> Vec<(String, (usize, usize))> {
    let c = d.channels;
    let mp = d.heads * d.points;
    let mut v: Vec<(String, (usize, usize))> = vec![
        (TABLE.into(), (SemanticType::COUNT, c)),
        ("pos.w1".into(), (DESCRIPTOR_LEN, c)),
        ("pos.b1".into(), (1, c)),
        ("pos.w2".into(), (c, c)),
        ("pos.b2".into(), (1, c)),
    ];
    for l in 0..d.layers {
        for (name, shape) in [
            ("ln1.g", (1, c)),
            ("ln1.b", (1, c)),
            ("sa.wq", (c, c)),
            ("sa.wk", (c, c)),
            ("sa.wv", (c, c)),
            ("sa.wo", (c, c)),
            ("ln2.g", (1, c)),
            ("ln2.b", (1, c)),
            ("ca.off_w", (c, 2 * mp)),
            ("ca.off_b", (1, 2 * mp)),
            ("ca.attn_w", (c, mp)),
            ("ca.attn_b", (1, mp)),
            ("ca.wv", (c, c)),
            ("ca.wo", (c, c)),
            ("ln3.g", (1, c)),
            ("ln3.b", (1, c)),
            ("ffn.w1", (c, d.ffn_hidden)),
            ("ffn.b1", (1, d.ffn_hidden)),
            ("ffn.w2", (d.ffn_hidden, c)),
            ("ffn.b2", (1, c)),
        ] {
            v.push((layer_key(l, name), shape));
        }
    }
    for l in 1..PYRAMID_LEVELS {
        v.push((level_key("seg_proj", l), (c, d.level_channels[l])));
    }
    for l in 0..PYRAMID_LEVELS {
        v.push((level_key("unify_bev", l), (d.level_channels[l], d.score_dim)));
        v.push((level_key("unify_emb", l), (c, d.score_dim)));
        v.push((level_key("unify_emb_b", l), (1, d.score_dim)));
    }
    v.push(("head.w1".into(), (d.score_dim, d.score_hidden)));
    v.push(("head.b1".into(), (1, d.score_hidden)));
    v.push(("head.w2".into(), (d.score_hidden, 1)));
    v.push(("head.b2".into(), (1, 1)));
    v
}

/// Truncating projection `rows × cols` (identity on the leading block).
fn truncation(rows: usize, cols: usize, gain: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for i in 0..rows.min(cols) {
        t.set(i, i, gain);
    }
    t
}

/// Oracle score gains per pyramid level. Coarse levels are sharp enough to
/// pick the right mode; fine levels stay soft so the expectation
/// interpolates between candidates.
pub const ORACLE_GAINS: [f64; PYRAMID_LEVELS] = [40.0, 20.0, 10.0];

impl MatcherParams {
    /// Seeded initialization: weights uniform in ±1/√fan_in, layer-norm
    /// gains one, biases and the sampling-offset head zero.
    pub fn init(dims: MatcherDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in shapes(&dims) {
            let leaf = name.rsplit('.').next().unwrap_or(&name).to_string();
            let t = if name == TABLE {
                Tensor::uniform(r, c, 1.0, &mut rng)
            } else if name.contains(".off_") || leaf.starts_with('b') || leaf.ends_with("_b") || name.starts_with("unify_emb_b") {
                Tensor::zeros(r, c)
            } else if leaf == "g" {
                Tensor::filled(r, c, 1.0)
            } else {
                Tensor::uniform(r, c, 1.0 / (r as f64).sqrt(), &mut rng)
            };
            tensors.insert(name, t);
        }
        Ok(Self { dims, tensors })
    }

    /// Hand-set parameters under which matching is exact on oracle renders:
    /// one-hot semantic table, no decoder layers, zero positional encoding,
    /// truncating projections and a near-linear score head. `gains[l]` sets
    /// the score sharpness at pyramid level `l`.
    pub fn oracle(dims: MatcherDims, gains: [f64; PYRAMID_LEVELS]) -> Result<Self> {
        let dims = MatcherDims { layers: 0, ..dims };
        dims.validate()?;
        let n = SemanticType::COUNT;
        if dims.level_channels[PYRAMID_LEVELS - 1] < n || dims.score_dim < n {
            return Err(Error::arg(format!(
                "oracle parameters need at least {n} channels on every level and in the score width"
            )));
        }
        let mut p = Self::init(dims, 0)?;
        let c = dims.channels;
        p.set(TABLE, truncation(n, c, 1.0))?;
        for name in ["pos.w1", "pos.b1", "pos.w2", "pos.b2"] {
            let (r, k) = p.tensors[name].shape();
            p.set(name, Tensor::zeros(r, k))?;
        }
        for l in 1..PYRAMID_LEVELS {
            p.set(&level_key("seg_proj", l), truncation(c, dims.level_channels[l], 1.0))?;
        }
        for (l, gain) in gains.iter().enumerate() {
            p.set(&level_key("unify_bev", l), truncation(dims.level_channels[l], dims.score_dim, 1.0))?;
            p.set(&level_key("unify_emb", l), truncation(c, dims.score_dim, *gain))?;
        }
        let mut w1 = Tensor::zeros(dims.score_dim, dims.score_hidden);
        for i in 0..dims.score_dim {
            w1.set(i, 0, 1.0);
        }
        let mut b1 = Tensor::zeros(1, dims.score_hidden);
        // keeps GELU in its near-linear range for non-negative inputs
        b1.data[0] = 3.0;
        let mut w2 = Tensor::zeros(dims.score_hidden, 1);
        w2.data[0] = 1.0;
        p.set("head.w1", w1)?;
        p.set("head.b1", b1)?;
        p.set("head.w2", w2)?;
        Ok(p)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::arg(format!("parameter {name} has non-finite values")));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub(crate) fn from_parts(dims: MatcherDims, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        dims.validate()?;
        let expected = shapes(&dims);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for (name, shape) in expected {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape()))),
                None => return Err(Error::Shape(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { dims, tensors })
    }

    /// `self += scale · grads` over every tensor that has a gradient.
    pub fn apply_update(&mut self, grads: &BTreeMap<String, Tensor>, scale: f64) {
        for (name, g) in grads {
            if let Some(t) = self.tensors.get_mut(name) {
                for (x, d) in t.data.iter_mut().zip(&g.data) {
                    *x += scale * d;
                }
            }
        }
    }

    /// Records every tensor as a graph leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let id = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        ParamNodes { dims: self.dims, ids }
    }
}

/// Graph handles of a bound [`MatcherParams`].
pub struct ParamNodes {
    pub dims: MatcherDims,
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
