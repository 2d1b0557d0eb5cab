use super::{layer_key, level_key, MatcherParams, ParamNodes, LN_EPS, TABLE};
use crate::autodiff::{Graph, NodeId};
use crate::bev::{positional_encoding_2d, BevGrid};
use crate::geometry::{project_endpoint_to_bev, GridSpec, Pose6};
use crate::map::{Geometry, GeometryKind, MapElement, SemanticType, DESCRIPTOR_LEN};
use crate::{Error, Result, Tensor};

/// Largest magnitude accepted in a normalized coordinate slot.
pub const MAX_NORMALIZED: f64 = 10.0;

/// Output embedding of one map element.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEmbedding {
    pub id: u64,
    pub sem: SemanticType,
    pub embedding: Vec<f64>,
}

impl MapEmbedding {
    /// Rows of a `K × C` matrix.
    pub fn stack(embeddings: &[MapEmbedding]) -> Tensor {
        let c = embeddings.first().map_or(0, |e| e.embedding.len());
        Tensor::from_vec(embeddings.len(), c, embeddings.iter().flat_map(|e| e.embedding.iter().copied()).collect())
    }
}

/// Per-element decoder inputs for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInputs {
    /// Normalized descriptors, `K × 8`.
    pub descriptors: Tensor,
    pub kinds: Vec<GeometryKind>,
    /// Semantic type indices.
    pub types: Vec<usize>,
    /// Layer-0 grid coordinates of each element's first endpoint, `K × 2`.
    pub refs: Tensor,
}

/// Shifts and scales the coordinate slots of a descriptor:
/// `(d - origin) / scale` on x/y pairs, other slots untouched.
pub fn normalize_descriptor(e: &MapElement, origin: [f64; 2], scale: [f64; 2]) -> [f64; DESCRIPTOR_LEN] {
    let mut d = e.descriptor();
    for &(sx, sy) in Geometry::coordinate_slots(e.geom.kind()) {
        d[sx] = (d[sx] - origin[0]) / scale[0];
        d[sy] = (d[sy] - origin[1]) / scale[1];
    }
    d
}

/// Normalizes against the initial pose's position and the half-extent of the
/// layer-0 grid, and projects reference points at the initial pose.
pub fn element_inputs(elements: &[MapElement], init_pose: &Pose6, spec: &GridSpec) -> Result<DecoderInputs> {
    let ext = spec.extent();
    let scale = [ext[0] / 2.0, ext[1] / 2.0];
    let origin = init_pose.xy();
    let mut desc = Vec::with_capacity(elements.len() * DESCRIPTOR_LEN);
    let mut refs = Vec::with_capacity(elements.len() * 2);
    for e in elements {
        desc.extend(normalize_descriptor(e, origin, scale));
        refs.extend(project_endpoint_to_bev(init_pose, e.geom.anchor(), spec)?);
    }
    Ok(DecoderInputs {
        descriptors: Tensor::from_vec(elements.len(), DESCRIPTOR_LEN, desc),
        kinds: elements.iter().map(|e| e.geom.kind()).collect(),
        types: elements.iter().map(|e| e.sem.index()).collect(),
        refs: Tensor::from_vec(elements.len(), 2, refs),
    })
}

fn check_normalized(inputs: &DecoderInputs) -> Result<()> {
    for (i, kind) in inputs.kinds.iter().enumerate() {
        for &(sx, sy) in Geometry::coordinate_slots(*kind) {
            for s in [sx, sy] {
                let v = inputs.descriptors.get(i, s);
                if !(v.abs() <= MAX_NORMALIZED) {
                    return Err(Error::arg(format!(
                        "element {i}: coordinate slot {s} = {v} is not normalized (|v| > {MAX_NORMALIZED})"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let m = g.matmul(x, w);
    g.add_row(m, b)
}

fn pos_graph(g: &mut Graph, p: &ParamNodes, desc: NodeId) -> NodeId {
    let h = affine(g, desc, p.id("pos.w1"), p.id("pos.b1"));
    let h = g.gelu(h);
    affine(g, h, p.id("pos.w2"), p.id("pos.b2"))
}

fn norm(g: &mut Graph, p: &ParamNodes, d: usize, which: &str, x: NodeId) -> NodeId {
    let gain = p.id(&layer_key(d, &format!("{which}.g")));
    let bias = p.id(&layer_key(d, &format!("{which}.b")));
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Per-head attention matrices (each `K × K`) of the self-attention block
/// on already-normalized input `n`.
fn sa_weights(g: &mut Graph, p: &ParamNodes, d: usize, n: NodeId) -> (Vec<NodeId>, NodeId) {
    let dims = p.dims;
    let dh = dims.head_dim();
    let q = g.matmul(n, p.id(&layer_key(d, "sa.wq")));
    let k = g.matmul(n, p.id(&layer_key(d, "sa.wk")));
    let v = g.matmul(n, p.id(&layer_key(d, "sa.wv")));
    let mut weights = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        weights.push(g.softmax_rows(logits));
    }
    (weights, v)
}

fn sa_graph(g: &mut Graph, p: &ParamNodes, d: usize, n: NodeId) -> NodeId {
    let dh = p.dims.head_dim();
    let (weights, v) = sa_weights(g, p, d, n);
    let heads: Vec<NodeId> = weights
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            let vh = g.slice_cols(v, h * dh, dh);
            g.matmul(a, vh)
        })
        .collect();
    let cat = g.concat_cols(&heads);
    g.matmul(cat, p.id(&layer_key(d, "sa.wo")))
}

/// `refs` repeated once per (head, point) pair, matching the row order of
/// the reshaped offset head.
fn tiled_refs(refs: &Tensor, per_query: usize) -> Tensor {
    let mut data = Vec::with_capacity(refs.rows * per_query * 2);
    for i in 0..refs.rows {
        for _ in 0..per_query {
            data.extend_from_slice(refs.row(i));
        }
    }
    Tensor::from_vec(refs.rows * per_query, 2, data)
}

fn ca_graph(g: &mut Graph, p: &ParamNodes, d: usize, n: NodeId, refs: &Tensor, value: NodeId, spec: GridSpec) -> NodeId {
    let dims = p.dims;
    let (k, c, m, pts, dh) = (refs.rows, dims.channels, dims.heads, dims.points, dims.head_dim());
    let off = affine(g, n, p.id(&layer_key(d, "ca.off_w")), p.id(&layer_key(d, "ca.off_b")));
    let off = g.reshape(off, k * m * pts, 2);
    let base = g.constant(tiled_refs(refs, m * pts));
    let loc = g.add(off, base);
    let samples = g.bilinear(value, spec, loc);
    let logits = affine(g, n, p.id(&layer_key(d, "ca.attn_w")), p.id(&layer_key(d, "ca.attn_b")));
    let logits = g.reshape(logits, k * m, pts);
    let a = g.softmax_rows(logits);
    let agg = g.group_weighted_sum(samples, a);
    let proj = g.matmul(agg, p.id(&layer_key(d, "ca.wv")));
    let wide = g.reshape(proj, k, m * c);
    let heads: Vec<NodeId> = (0..m).map(|h| g.slice_cols(wide, h * c + h * dh, dh)).collect();
    let cat = g.concat_cols(&heads);
    g.matmul(cat, p.id(&layer_key(d, "ca.wo")))
}

fn ffn_graph(g: &mut Graph, p: &ParamNodes, d: usize, n: NodeId) -> NodeId {
    let h = affine(g, n, p.id(&layer_key(d, "ffn.w1")), p.id(&layer_key(d, "ffn.b1")));
    let h = g.gelu(h);
    affine(g, h, p.id(&layer_key(d, "ffn.w2")), p.id(&layer_key(d, "ffn.b2")))
}

fn residual(g: &mut Graph, x: NodeId, f: impl FnOnce(&mut Graph, NodeId) -> NodeId, ln: impl FnOnce(&mut Graph, NodeId) -> NodeId) -> NodeId {
    let n = ln(g, x);
    let y = f(g, n);
    g.add(x, y)
}

/// Records the full decoder: positional MLP, query initialization and `L`
/// pre-norm layers. `value` is the `cells × C` layer-0 grid plus positional
/// encoding. Returns the `K × C` embeddings.
pub fn decode_graph(g: &mut Graph, p: &ParamNodes, inputs: &DecoderInputs, value: NodeId, spec: GridSpec) -> Result<NodeId> {
    check_normalized(inputs)?;
    if inputs.types.is_empty() {
        return Err(Error::arg("decoder needs at least one element"));
    }
    let desc = g.constant(inputs.descriptors.clone());
    let epos = pos_graph(g, p, desc);
    let sem = g.gather_rows(p.id(TABLE), inputs.types.clone());
    let mut x = g.add(epos, sem);
    for d in 0..p.dims.layers {
        x = residual(g, x, |g, n| sa_graph(g, p, d, n), |g, x| norm(g, p, d, "ln1", x));
        x = residual(g, x, |g, n| ca_graph(g, p, d, n, &inputs.refs, value, spec), |g, x| norm(g, p, d, "ln2", x));
        x = residual(g, x, |g, n| ffn_graph(g, p, d, n), |g, x| norm(g, p, d, "ln3", x));
    }
    Ok(x)
}

/// Layer-0 features plus the 2-D sinusoidal encoding, as `cells × C`.
pub(crate) fn value_tensor(layer0: &BevGrid) -> Result<Tensor> {
    let pos = positional_encoding_2d(&layer0.spec, layer0.channels)?;
    let mut t = layer0.to_tensor();
    t.data.iter_mut().zip(&pos.data).for_each(|(a, b)| *a += b);
    Ok(t)
}

fn check_layer(params: &MatcherParams, layer: usize) -> Result<()> {
    if layer >= params.dims.layers {
        return Err(Error::arg(format!("decoder has {} layers, asked for {layer}", params.dims.layers)));
    }
    Ok(())
}

/// One vector per element from the positional MLP.
pub fn positional_encode(params: &MatcherParams, inputs: &DecoderInputs) -> Result<Tensor> {
    check_normalized(inputs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let desc = g.constant(inputs.descriptors.clone());
    let out = pos_graph(&mut g, &p, desc);
    Ok(g.value(out).clone())
}

/// `Q_i = E^pos_i + E^sem_{s_i}`.
pub fn init_queries(epos: &Tensor, types: &[usize], table: &Tensor) -> Result<Tensor> {
    if epos.rows != types.len() || epos.cols != table.cols {
        return Err(Error::Shape(format!(
            "positional encodings {:?} do not match {} types of width {}",
            epos.shape(),
            types.len(),
            table.cols
        )));
    }
    let mut q = epos.clone();
    for (i, &t) in types.iter().enumerate() {
        if t >= table.rows {
            return Err(Error::arg(format!("unknown semantic type index {t}")));
        }
        for (a, b) in q.row_mut(i).iter_mut().zip(table.row(t)) {
            *a += b;
        }
    }
    Ok(q)
}

fn run_block(params: &MatcherParams, q: &Tensor, f: impl FnOnce(&mut Graph, &ParamNodes, NodeId) -> NodeId) -> Tensor {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(q.clone());
    let out = f(&mut g, &p, x);
    g.value(out).clone()
}

/// Residual self-attention block of decoder layer `layer`.
pub fn self_attention(params: &MatcherParams, layer: usize, q: &Tensor) -> Result<Tensor> {
    check_layer(params, layer)?;
    Ok(run_block(params, q, |g, p, x| residual(g, x, |g, n| sa_graph(g, p, layer, n), |g, x| norm(g, p, layer, "ln1", x))))
}

/// Per-head attention weights of the self-attention block of `layer`.
pub fn attention_weights(params: &MatcherParams, layer: usize, q: &Tensor) -> Result<Vec<Tensor>> {
    check_layer(params, layer)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(q.clone());
    let n = norm(&mut g, &p, layer, "ln1", x);
    let (w, _) = sa_weights(&mut g, &p, layer, n);
    Ok(w.into_iter().map(|id| g.value(id).clone()).collect())
}

/// Residual deformable cross-attention block of `layer`; `value` is the
/// sampled grid (typically layer-0 features plus positional encoding).
pub fn deformable_cross_attention(params: &MatcherParams, layer: usize, q: &Tensor, refs: &Tensor, value: &BevGrid) -> Result<Tensor> {
    check_layer(params, layer)?;
    if value.channels != params.dims.channels || refs.rows != q.rows {
        return Err(Error::Shape("cross-attention inputs do not match the matcher width".into()));
    }
    let vt = value.to_tensor();
    Ok(run_block(params, q, |g, p, x| {
        let v = g.constant(vt);
        residual(g, x, |g, n| ca_graph(g, p, layer, n, refs, v, value.spec), |g, x| norm(g, p, layer, "ln2", x))
    }))
}

/// Residual feed-forward block of `layer`.
pub fn feed_forward(params: &MatcherParams, layer: usize, q: &Tensor) -> Result<Tensor> {
    check_layer(params, layer)?;
    Ok(run_block(params, q, |g, p, x| residual(g, x, |g, n| ffn_graph(g, p, layer, n), |g, x| norm(g, p, layer, "ln3", x))))
}

/// Map embeddings for `elements` seen from `init_pose`.
pub fn decode(elements: &[MapElement], init_pose: &Pose6, layer0: &BevGrid, params: &MatcherParams) -> Result<Vec<MapEmbedding>> {
    if elements.is_empty() {
        return Ok(Vec::new());
    }
    if layer0.channels != params.dims.channels {
        return Err(Error::Shape(format!(
            "layer-0 grid has {} channels, matcher expects {}",
            layer0.channels, params.dims.channels
        )));
    }
    let inputs = element_inputs(elements, init_pose, &layer0.spec)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let value = g.constant(value_tensor(layer0)?);
    let out = decode_graph(&mut g, &p, &inputs, value, layer0.spec)?;
    let emb = g.value(out);
    Ok(elements
        .iter()
        .enumerate()
        .map(|(i, e)| MapEmbedding {
            id: e.id,
            sem: e.sem,
            embedding: emb.row(i).to_vec(),
        })
        .collect())
}

/// Semantic logits `cells × N_e` of pyramid layer `level`: each cell's
/// features dotted with the (level-projected) semantic table rows.
pub fn semantic_logits_graph(g: &mut Graph, p: &ParamNodes, grid: NodeId, level: usize) -> NodeId {
    let table = if level == 0 {
        p.id(TABLE)
    } else {
        g.matmul(p.id(TABLE), p.id(&level_key("seg_proj", level)))
    };
    let t = g.transpose(table);
    g.matmul(grid, t)
}

/// Per-cell type probabilities `cells × N_e` for a pyramid layer.
pub fn semantic_probabilities(bev: &BevGrid, params: &MatcherParams) -> Result<Tensor> {
    if bev.channels != params.dims.level_channels[bev.layer] {
        return Err(Error::Shape(format!(
            "layer {} grid has {} channels, expected {}",
            bev.layer, bev.channels, params.dims.level_channels[bev.layer]
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let grid = g.constant(bev.to_tensor());
    let logits = semantic_logits_graph(&mut g, &p, grid, bev.layer);
    let s = g.sigmoid(logits);
    Ok(g.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::super::MatcherDims;
    use super::*;
    use crate::autodiff::{gelu_value, sigmoid_value};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> MatcherDims {
        MatcherDims {
            channels: 8,
            heads: 2,
            points: 3,
            layers: 2,
            ffn_hidden: 12,
            score_dim: 4,
            score_hidden: 5,
            level_channels: [8, 6, 4],
        }
    }

    fn random_params(seed: u64) -> MatcherParams {
        let mut p = MatcherParams::init(dims(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let names: Vec<String> = p.names().map(String::from).collect();
        for name in names {
            let t = p.get(&name);
            let scale = if name.contains("off_") { 0.8 } else { 0.5 };
            let mut v = t.clone();
            v.data.iter_mut().for_each(|x| *x += rng.random_range(-scale..scale));
            p.set(&name, v).unwrap();
        }
        p
    }

    fn random_grid(spec: GridSpec, c: usize, seed: u64) -> BevGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..spec.cells() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        BevGrid::new(spec, c, 0, data).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows).map(|i| t.row(i).to_vec()).collect()
    }

    fn mat_vec(v: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols).map(|j| (0..w.rows).map(|i| v[i] * w.get(i, j)).sum()).collect()
    }

    fn layer_norm(v: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(k, x)| (x - mean) / (var + LN_EPS).sqrt() * g.data[k] + b.data[k])
            .collect()
    }

    fn sample(grid: &BevGrid, p: [f64; 2]) -> Vec<f64> {
        crate::bev::bilinear_sample(grid, p).unwrap()
    }

    #[test]
    fn queries_are_an_exact_sum() {
        let epos = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]);
        let table = Tensor::from_rows(&[vec![0.25, 0.0], vec![3.0, 4.0]]);
        let q = init_queries(&epos, &[1, 0], &table).unwrap();
        assert_eq!(rows(&q), vec![vec![4.0, 6.0], vec![0.75, -1.0]]);
        let zero = Tensor::zeros(2, 2);
        assert_eq!(init_queries(&zero, &[1, 1], &table).unwrap().row(0), table.row(1));
        assert_eq!(init_queries(&epos, &[0, 0], &Tensor::zeros(2, 2)).unwrap(), epos);
        assert!(init_queries(&epos, &[0, 5], &table).is_err());
    }

    #[test]
    fn positional_encoding_of_origin_is_the_bias_path() {
        let p = random_params(1);
        let e = MapElement::vertical(0, SemanticType::Pole, [10.0, -4.0], 3.0);
        let inputs = DecoderInputs {
            descriptors: Tensor::from_vec(1, 8, normalize_descriptor(&e, [10.0, -4.0], [16.0, 16.0]).to_vec()),
            kinds: vec![GeometryKind::Vertical],
            types: vec![5],
            refs: Tensor::zeros(1, 2),
        };
        let out = positional_encode(&p, &inputs).unwrap();
        let mut d = [0.0; 8];
        d[3] = 3.0;
        let h: Vec<f64> = mat_vec(&d, p.get("pos.w1"))
            .iter()
            .zip(&p.get("pos.b1").data)
            .map(|(a, b)| gelu_value(a + b))
            .collect();
        let expect: Vec<f64> = mat_vec(&h, p.get("pos.w2")).iter().zip(&p.get("pos.b2").data).map(|(a, b)| a + b).collect();
        for (a, b) in out.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_world_coordinates_are_rejected() {
        let p = random_params(1);
        let e = MapElement::segment(0, SemanticType::LaneLine, [300.0, 0.0], [310.0, 0.0]);
        let inputs = element_inputs(&[e], &Pose6::planar(0.0, 0.0, 1.8, 0.0), &GridSpec::centered(16, 16, 1.0)).unwrap();
        assert!(positional_encode(&p, &inputs).is_err());
    }

    #[test]
    fn perturbed_elements_encode_differently() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let p = random_params(seed);
            let base: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut moved = base.clone();
            moved[rng.random_range(0..4)] += 1e-2;
            let make = |d: &[f64]| DecoderInputs {
                descriptors: Tensor::from_vec(2, 8, [d, d].concat()),
                kinds: vec![GeometryKind::Segment; 2],
                types: vec![0, 0],
                refs: Tensor::zeros(2, 2),
            };
            let a = positional_encode(&p, &make(&base)).unwrap();
            let b = positional_encode(&p, &make(&moved)).unwrap();
            assert_eq!(a.row(0), a.row(1));
            assert!(a.max_abs_diff(&b) > 1e-6);
        }
    }

    /// Loop re-implementation of the residual self-attention block.
    fn sa_oracle(p: &MatcherParams, d: usize, q: &Tensor) -> Tensor {
        let dims = p.dims;
        let dh = dims.head_dim();
        let key = |n: &str| p.get(&layer_key(d, n));
        let n: Vec<Vec<f64>> = (0..q.rows).map(|i| layer_norm(q.row(i), key("ln1.g"), key("ln1.b"))).collect();
        let qs: Vec<Vec<f64>> = n.iter().map(|v| mat_vec(v, key("sa.wq"))).collect();
        let ks: Vec<Vec<f64>> = n.iter().map(|v| mat_vec(v, key("sa.wk"))).collect();
        let vs: Vec<Vec<f64>> = n.iter().map(|v| mat_vec(v, key("sa.wv"))).collect();
        let mut out = q.clone();
        for i in 0..q.rows {
            let mut cat = vec![0.0; dims.channels];
            for h in 0..dims.heads {
                let r = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = (0..q.rows)
                    .map(|j| qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..q.rows {
                    let a = (logits[j] - m).exp() / z;
                    for (k, c) in r.clone().enumerate() {
                        cat[h * dh + k] += a * vs[j][c];
                    }
                }
            }
            for (o, v) in out.row_mut(i).iter_mut().zip(mat_vec(&cat, key("sa.wo"))) {
                *o += v;
            }
        }
        out
    }

    /// Loop re-implementation of the residual cross-attention block.
    fn ca_oracle(p: &MatcherParams, d: usize, q: &Tensor, refs: &Tensor, value: &BevGrid) -> Tensor {
        let dims = p.dims;
        let (c, dh) = (dims.channels, dims.head_dim());
        let key = |n: &str| p.get(&layer_key(d, n));
        let mut out = q.clone();
        for i in 0..q.rows {
            let n = layer_norm(q.row(i), key("ln2.g"), key("ln2.b"));
            let off: Vec<f64> = mat_vec(&n, key("ca.off_w")).iter().zip(&key("ca.off_b").data).map(|(a, b)| a + b).collect();
            let logit: Vec<f64> = mat_vec(&n, key("ca.attn_w")).iter().zip(&key("ca.attn_b").data).map(|(a, b)| a + b).collect();
            let mut cat = vec![0.0; c];
            for h in 0..dims.heads {
                let ls = &logit[h * dims.points..(h + 1) * dims.points];
                let m = ls.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = ls.iter().map(|l| (l - m).exp()).sum();
                let mut acc = vec![0.0; c];
                for k in 0..dims.points {
                    let a = (ls[k] - m).exp() / z;
                    let o = 2 * (h * dims.points + k);
                    let s = sample(value, [refs.get(i, 0) + off[o], refs.get(i, 1) + off[o + 1]]);
                    for (x, v) in acc.iter_mut().zip(&s) {
                        *x += a * v;
                    }
                }
                let projected = mat_vec(&acc, key("ca.wv"));
                cat[h * dh..(h + 1) * dh].copy_from_slice(&projected[h * dh..(h + 1) * dh]);
            }
            for (o, v) in out.row_mut(i).iter_mut().zip(mat_vec(&cat, key("ca.wo"))) {
                *o += v;
            }
        }
        out
    }

    fn random_queries(k: usize, c: usize, seed: u64) -> Tensor {
        Tensor::uniform(k, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn self_attention_matches_loops() {
        for seed in 0..20 {
            let p = random_params(seed);
            let q = random_queries(1 + seed as usize % 5, 8, seed + 100);
            let fast = self_attention(&p, 1, &q).unwrap();
            assert!(fast.max_abs_diff(&sa_oracle(&p, 1, &q)) < 1e-10);
        }
    }

    #[test]
    fn single_query_attends_to_itself() {
        let p = random_params(3);
        let q = random_queries(1, 8, 4);
        for w in attention_weights(&p, 0, &q).unwrap() {
            assert_eq!(w.data, vec![1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = random_params(4);
        let q = random_queries(6, 8, 5);
        for w in attention_weights(&p, 1, &q).unwrap() {
            for i in 0..w.rows {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let p = random_params(6);
        let q = random_queries(5, 8, 7);
        let perm = [3, 0, 4, 1, 2];
        let mut qp = Tensor::zeros(5, 8);
        for (dst, &src) in perm.iter().enumerate() {
            qp.row_mut(dst).copy_from_slice(q.row(src));
        }
        let a = self_attention(&p, 0, &q).unwrap();
        let b = self_attention(&p, 0, &qp).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(dst).iter().zip(a.row(src)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_matches_loops() {
        let spec = GridSpec::centered(9, 11, 1.0);
        for seed in 0..20 {
            let p = random_params(seed);
            let grid = random_grid(spec, 8, seed + 50);
            let k = 1 + seed as usize % 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 70);
            let refs = Tensor::from_vec(k, 2, (0..2 * k).map(|_| rng.random_range(-1.0..10.0)).collect());
            let q = random_queries(k, 8, seed + 90);
            let fast = deformable_cross_attention(&p, 0, &q, &refs, &grid).unwrap();
            assert!(fast.max_abs_diff(&ca_oracle(&p, 0, &q, &refs, &grid)) < 1e-10);
        }
    }

    #[test]
    fn collapsed_sampling_reads_the_reference_point() {
        let spec = GridSpec::centered(9, 9, 1.0);
        let mut p = random_params(8);
        for name in ["ca.off_w", "ca.off_b", "ca.attn_w", "ca.attn_b"] {
            let key = layer_key(0, name);
            let (r, c) = p.get(&key).shape();
            p.set(&key, Tensor::zeros(r, c)).unwrap();
        }
        let grid = random_grid(spec, 8, 9);
        let refs = Tensor::from_rows(&[vec![3.3, 4.6], vec![7.5, 0.25]]);
        let q = random_queries(2, 8, 10);
        let out = deformable_cross_attention(&p, 0, &q, &refs, &grid).unwrap();
        let (wv, wo) = (p.get("dec.0.ca.wv"), p.get("dec.0.ca.wo"));
        for i in 0..2 {
            let s = sample(&grid, [refs.get(i, 0), refs.get(i, 1)]);
            let expect = mat_vec(&mat_vec(&s, wv), wo);
            for k in 0..8 {
                assert!((out.get(i, k) - q.get(i, k) - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_grid_leaves_only_the_residual() {
        let spec = GridSpec::centered(9, 9, 1.0);
        let p = random_params(11);
        let q = random_queries(3, 8, 12);
        let refs = Tensor::from_rows(&[vec![1.0, 1.0], vec![4.0, 4.0], vec![8.0, 0.0]]);
        let out = deformable_cross_attention(&p, 1, &q, &refs, &BevGrid::zeros(spec, 8, 0)).unwrap();
        assert!(out.max_abs_diff(&q) < 1e-15);
    }

    fn scene() -> (Vec<MapElement>, Pose6) {
        let els = vec![
            MapElement::segment(1, SemanticType::LaneLine, [-3.0, 1.0], [4.0, 1.5]),
            MapElement::vertical(2, SemanticType::Pole, [2.0, -3.0], 5.0),
            MapElement::segment(3, SemanticType::StopLine, [0.5, -2.0], [0.5, 2.0]),
        ];
        (els, Pose6::from_euler([0.2, -0.1, 1.7], 0.3, 0.02, -0.01))
    }

    #[test]
    fn decode_without_layers_returns_initial_queries() {
        let (els, pose) = scene();
        let spec = GridSpec::centered(10, 10, 1.0);
        let p = MatcherParams::init(MatcherDims { layers: 0, ..dims() }, 2).unwrap();
        let emb = decode(&els, &pose, &random_grid(spec, 8, 1), &p).unwrap();
        let inputs = element_inputs(&els, &pose, &spec).unwrap();
        let q = init_queries(&positional_encode(&p, &inputs).unwrap(), &inputs.types, p.get(TABLE)).unwrap();
        assert_eq!(MapEmbedding::stack(&emb), q);
        assert_eq!(emb[1].id, 2);
        assert_eq!(emb[1].sem, SemanticType::Pole);
    }

    #[test]
    fn decode_is_deterministic_and_grid_sensitive() {
        let (els, pose) = scene();
        let spec = GridSpec::centered(10, 10, 1.0);
        let p = random_params(13);
        let g1 = random_grid(spec, 8, 1);
        let a = decode(&els, &pose, &g1, &p).unwrap();
        let b = decode(&els, &pose, &g1, &p).unwrap();
        assert_eq!(a, b);
        for seed in 2..6 {
            let c = decode(&els, &pose, &random_grid(spec, 8, seed), &p).unwrap();
            assert!(MapEmbedding::stack(&a).max_abs_diff(&MapEmbedding::stack(&c)) > 1e-6);
        }
    }

    #[test]
    fn decode_layers_compose_blocks() {
        let (els, pose) = scene();
        let spec = GridSpec::centered(10, 10, 1.0);
        let p = random_params(14);
        let grid = random_grid(spec, 8, 3);
        let emb = decode(&els, &pose, &grid, &p).unwrap();
        let inputs = element_inputs(&els, &pose, &spec).unwrap();
        let value = BevGrid::from_tensor(spec, 0, value_tensor(&grid).unwrap()).unwrap();
        let mut q = init_queries(&positional_encode(&p, &inputs).unwrap(), &inputs.types, p.get(TABLE)).unwrap();
        for d in 0..2 {
            q = self_attention(&p, d, &q).unwrap();
            q = deformable_cross_attention(&p, d, &q, &inputs.refs, &value).unwrap();
            q = feed_forward(&p, d, &q).unwrap();
        }
        assert!(MapEmbedding::stack(&emb).max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn semantic_probability_examples() {
        let spec = GridSpec::centered(4, 4, 1.0);
        let p = random_params(15);
        let zero = semantic_probabilities(&BevGrid::zeros(spec, 8, 0), &p).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.5));
        // feature = E_j scaled so that its dot with E_j is ln 3
        let table = p.get(TABLE);
        let j = 2;
        let e = table.row(j);
        let n2: f64 = e.iter().map(|v| v * v).sum();
        let mut grid = BevGrid::zeros(spec, 8, 0);
        grid.cell_mut(1, 2).iter_mut().zip(e).for_each(|(g, v)| *g = v * 3f64.ln() / n2);
        let probs = semantic_probabilities(&grid, &p).unwrap();
        assert!((probs.get(spec.cols + 2, j) - 0.75).abs() < 1e-12);
        let rnd = random_grid(spec, 8, 16);
        let pr = semantic_probabilities(&rnd, &p).unwrap();
        assert!(pr.data.iter().all(|&v| v > 0.0 && v < 1.0));
        let logit = (0..8).map(|k| rnd.cell(0, 0)[k] * table.get(4, k)).sum::<f64>();
        assert!((pr.get(0, 4) - sigmoid_value(logit)).abs() < 1e-12);
    }

    #[test]
    fn finer_levels_use_projected_table() {
        let spec = GridSpec::centered(4, 4, 1.0).refined();
        let p = random_params(17);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..spec.cells() * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = BevGrid::new(spec, 6, 1, data).unwrap();
        let pr = semantic_probabilities(&grid, &p).unwrap();
        let proj = p.get(TABLE).matmul(p.get("seg_proj.1"));
        let logit: f64 = (0..6).map(|k| grid.cell(3, 5)[k] * proj.get(7, k)).sum();
        assert!((pr.get(3 * spec.cols + 5, 7) - sigmoid_value(logit)).abs() < 1e-12);
    }
}
