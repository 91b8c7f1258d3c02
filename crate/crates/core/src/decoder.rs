//! Inference of the dual-level query decoder.
//!
//! Queries attend to superpoint features (coarse, `M` keys) while masks are
//! predicted against point features (fine, `N` columns). The attention mask
//! for layer `l` comes from the layer-`l` point masks pooled down to
//! superpoints. Three layers run; the final masks and queries are the
//! frame's detections.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_in_place, LayerNorm, Linear, Mlp};
use crate::superpoint::{pool_mask, PoolDenominator, ShapeWeights, SuperpointSet};

pub const NUM_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    /// `Q x C`
    pub values: DMatrix<f64>,
    /// Superpoint row each query was initialized from.
    pub origin: Vec<usize>,
    pub layer: usize,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Keeps the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> QuerySet {
        QuerySet {
            values: self.values.select_rows(rows),
            origin: rows.iter().map(|&r| self.origin[r]).collect(),
            layer: self.layer,
        }
    }
}

/// Builds the initial queries from superpoint features. A ratio of 1 keeps
/// every row in order; smaller ratios draw `ceil(ratio * M)` rows without
/// replacement.
pub fn init_queries(superpoint_features: &DMatrix<f64>, sample_ratio: f64, seed: u64) -> Result<QuerySet> {
    if !(sample_ratio > 0.0 && sample_ratio <= 1.0) {
        return Err(Error::config(format!("query sample ratio {sample_ratio} outside (0, 1]")));
    }
    let m = superpoint_features.nrows();
    if m == 0 {
        return Err(Error::EmptyInput("no superpoint features to initialize queries"));
    }
    let origin: Vec<usize> = if sample_ratio == 1.0 {
        (0..m).collect()
    } else {
        let count = ((sample_ratio * m as f64).ceil() as usize).clamp(1, m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, m, count).into_vec();
        picked.sort_unstable();
        picked
    };
    Ok(QuerySet {
        values: superpoint_features.select_rows(&origin),
        origin,
        layer: 0,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x + f(norm(x))`
    #[default]
    Pre,
    /// `norm(x + f(x))`
    Post,
    /// `x + f(x)`
    None,
}

/// Architectural conventions a weight file was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConvention {
    pub norm: NormPlacement,
    pub heads: usize,
}

impl Default for DecoderConvention {
    fn default() -> Self {
        DecoderConvention {
            norm: NormPlacement::Pre,
            heads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionWeights {
    pub fn zeros(c: usize) -> Self {
        AttentionWeights {
            q: Linear::zeros(c, c),
            k: Linear::zeros(c, c),
            v: Linear::zeros(c, c),
            out: Linear::zeros(c, c),
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            if l.input_dim() != c || l.output_dim() != c {
                return Err(Error::config(format!(
                    "attention projection is {} -> {}, expected {c} -> {c}",
                    l.input_dim(),
                    l.output_dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights {
    pub cross: AttentionWeights,
    pub self_attn: AttentionWeights,
    pub ffn: Mlp,
    pub norm_cross: LayerNorm,
    pub norm_self: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayerWeights {
    pub fn zeros(c: usize) -> Self {
        DecoderLayerWeights {
            cross: AttentionWeights::zeros(c),
            self_attn: AttentionWeights::zeros(c),
            ffn: Mlp::new(vec![Linear::zeros(c, 2 * c), Linear::zeros(2 * c, c)]).expect("chained"),
            norm_cross: LayerNorm::identity(c),
            norm_self: LayerNorm::identity(c),
            norm_ffn: LayerNorm::identity(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub layers: Vec<DecoderLayerWeights>,
    /// Linear map applied to queries before the dot product with point features.
    pub mask_head: Linear,
    /// Foreground score head, `C -> 1`.
    pub cls_head: Option<Linear>,
    pub convention: DecoderConvention,
}

impl DecoderWeights {
    pub fn new(
        layers: Vec<DecoderLayerWeights>,
        mask_head: Linear,
        cls_head: Option<Linear>,
        convention: DecoderConvention,
    ) -> Result<Self> {
        let w = DecoderWeights {
            layers,
            mask_head,
            cls_head,
            convention,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(c: usize) -> Self {
        DecoderWeights {
            layers: (0..NUM_LAYERS).map(|_| DecoderLayerWeights::zeros(c)).collect(),
            mask_head: Linear::zeros(c, c),
            cls_head: None,
            convention: DecoderConvention::default(),
        }
    }

    /// Uniformly random parameters, scaled by `1/sqrt(fan_in)`.
    pub fn random<R: Rng>(c: usize, rng: &mut R) -> Self {
        let mut lin = |i: usize, o: usize| {
            let s = 1.0 / (i as f64).sqrt();
            Linear {
                weight: DMatrix::from_fn(o, i, |_, _| rng.gen_range(-s..s)),
                bias: DVector::from_fn(o, |_, _| rng.gen_range(-0.1..0.1)),
            }
        };
        let mut layers = Vec::new();
        for _ in 0..NUM_LAYERS {
            let mut attn = || AttentionWeights {
                q: lin(c, c),
                k: lin(c, c),
                v: lin(c, c),
                out: lin(c, c),
            };
            let cross = attn();
            let self_attn = attn();
            layers.push(DecoderLayerWeights {
                cross,
                self_attn,
                ffn: Mlp::new(vec![lin(c, 2 * c), lin(2 * c, c)]).expect("chained"),
                norm_cross: LayerNorm::identity(c),
                norm_self: LayerNorm::identity(c),
                norm_ffn: LayerNorm::identity(c),
            });
        }
        DecoderWeights {
            layers,
            mask_head: lin(c, c),
            cls_head: Some(lin(c, 1)),
            convention: DecoderConvention::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mask_head.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.layers.len() != NUM_LAYERS {
            return Err(Error::config(format!(
                "decoder needs {NUM_LAYERS} layers, got {}",
                self.layers.len()
            )));
        }
        let heads = self.convention.heads;
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::config(format!("{c} channels cannot be split into {heads} heads")));
        }
        if self.mask_head.output_dim() != c {
            return Err(Error::config("mask head must map C -> C"));
        }
        if let Some(cls) = &self.cls_head {
            if cls.input_dim() != c || cls.output_dim() != 1 {
                return Err(Error::config("classification head must map C -> 1"));
            }
        }
        for layer in &self.layers {
            layer.cross.check(c)?;
            layer.self_attn.check(c)?;
            if layer.ffn.input_dim() != c || layer.ffn.output_dim() != c {
                return Err(Error::config("feed-forward stack must map C -> C"));
            }
            for n in [&layer.norm_cross, &layer.norm_self, &layer.norm_ffn] {
                if n.dim() != c {
                    return Err(Error::config("layer norm width differs from C"));
                }
            }
        }
        Ok(())
    }
}

/// `Q x M` booleans; `true` lets query `i` attend to superpoint `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    values: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::config("attention mask size mismatch"));
        }
        Ok(AttentionMask { rows, cols, values })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            values: vec![true; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>], cols: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::config("attention mask rows differ in length"));
            }
            values.extend_from_slice(r);
        }
        Ok(AttentionMask {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[i * self.cols + j]
    }
}

/// Per-head attention probabilities `softmax(q k^T / sqrt(d) + A)`, each
/// `Q x M`. Rows whose mask is entirely false attend to every key.
pub fn cross_attention_weights(
    queries: &DMatrix<f64>,
    superpoint_features: &DMatrix<f64>,
    mask: &AttentionMask,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let q = weights.q.forward(queries)?;
    let k = weights.k.forward(superpoint_features)?;
    if mask.rows != q.nrows() || mask.cols != k.nrows() {
        return Err(Error::config(format!(
            "attention mask is {}x{}, expected {}x{}",
            mask.rows,
            mask.cols,
            q.nrows(),
            k.nrows()
        )));
    }
    attention_probs(&q, &k, Some(mask), heads)
}

fn attention_probs(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let c = q.ncols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config(format!("{c} channels cannot be split into {heads} heads")));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (nq, nk) = (q.nrows(), k.nrows());
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.columns(h * d, d);
        let kh = k.columns(h * d, d);
        let logits = qh * kh.transpose() * scale;
        let mut probs = DMatrix::zeros(nq, nk);
        let mut row = vec![0.0; nk];
        for i in 0..nq {
            let fully_masked = mask.is_some_and(|m| (0..nk).all(|j| !m.get(i, j)));
            for j in 0..nk {
                let allowed = fully_masked || mask.is_none_or(|m| m.get(i, j));
                row[j] = if allowed { logits[(i, j)] } else { f64::NEG_INFINITY };
            }
            softmax_in_place(&mut row);
            for j in 0..nk {
                probs[(i, j)] = row[j];
            }
        }
        out.push(probs);
    }
    Ok(out)
}

fn attend(probs: &[DMatrix<f64>], v: &DMatrix<f64>) -> DMatrix<f64> {
    let heads = probs.len();
    let d = v.ncols() / heads;
    let mut out = DMatrix::zeros(probs[0].nrows(), v.ncols());
    for (h, p) in probs.iter().enumerate() {
        out.columns_mut(h * d, d).copy_from(&(p * v.columns(h * d, d)));
    }
    out
}

/// Masked cross-attention of queries over superpoint features: the softmax
/// of scaled query/key products, masked by `mask`, applied to the value
/// projection of the superpoint features. `queries` are taken as given (any
/// normalization is the caller's business). The result has no output
/// projection or residual.
pub fn masked_cross_attention(
    queries: &DMatrix<f64>,
    superpoint_features: &DMatrix<f64>,
    mask: &AttentionMask,
    weights: &DecoderWeights,
    layer: usize,
) -> Result<DMatrix<f64>> {
    let lw = layer_weights(weights, layer)?;
    let probs = cross_attention_weights(queries, superpoint_features, mask, &lw.cross, weights.convention.heads)?;
    let v = lw.cross.v.forward(superpoint_features)?;
    Ok(attend(&probs, &v))
}

fn layer_weights(weights: &DecoderWeights, layer: usize) -> Result<&DecoderLayerWeights> {
    weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::config(format!("decoder layer {layer} out of range")))
}

fn residual<F>(x: &DMatrix<f64>, norm: &LayerNorm, placement: NormPlacement, f: F) -> Result<DMatrix<f64>>
where
    F: FnOnce(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    match placement {
        NormPlacement::Pre => Ok(x + f(&norm.forward(x)?)?),
        NormPlacement::Post => norm.forward(&(x + f(x)?)),
        NormPlacement::None => Ok(x + f(x)?),
    }
}

/// Cross-attention sub-block with its output projection and residual.
pub fn cross_attention_block(
    queries: &QuerySet,
    superpoint_features: &DMatrix<f64>,
    mask: &AttentionMask,
    weights: &DecoderWeights,
    layer: usize,
) -> Result<QuerySet> {
    let lw = layer_weights(weights, layer)?;
    let values = residual(&queries.values, &lw.norm_cross, weights.convention.norm, |x| {
        let attended = masked_cross_attention(x, superpoint_features, mask, weights, layer)?;
        lw.cross.out.forward(&attended)
    })?;
    Ok(QuerySet {
        values,
        origin: queries.origin.clone(),
        layer: queries.layer,
    })
}

/// Self-attention among queries followed by the feed-forward stack, both
/// residual.
pub fn decoder_layer(attended: &QuerySet, weights: &DecoderWeights, layer: usize) -> Result<QuerySet> {
    let lw = layer_weights(weights, layer)?;
    let placement = weights.convention.norm;
    let heads = weights.convention.heads;
    let x = residual(&attended.values, &lw.norm_self, placement, |x| {
        let q = lw.self_attn.q.forward(x)?;
        let k = lw.self_attn.k.forward(x)?;
        let v = lw.self_attn.v.forward(x)?;
        let probs = attention_probs(&q, &k, None, heads)?;
        lw.self_attn.out.forward(&attend(&probs, &v))
    })?;
    let values = residual(&x, &lw.norm_ffn, placement, |x| lw.ffn.forward(x))?;
    Ok(QuerySet {
        values,
        origin: attended.origin.clone(),
        layer: layer + 1,
    })
}

/// Per-query point masks with confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMasks {
    /// `Q x N` mask logits.
    pub logits: DMatrix<f64>,
    /// `point_masks[q][p] = sigmoid(logits[q, p]) > threshold`
    pub point_masks: Vec<Vec<bool>>,
    pub scores: Vec<f64>,
    /// Row of the producing query in the decoder output.
    pub query_rows: Vec<usize>,
}

impl PredictedMasks {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn select(&self, keep: &[usize]) -> PredictedMasks {
        PredictedMasks {
            logits: self.logits.select_rows(keep),
            point_masks: keep.iter().map(|&i| self.point_masks[i].clone()).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
            query_rows: keep.iter().map(|&i| self.query_rows[i]).collect(),
        }
    }
}

/// Mask logits are `mask_head(Q) . F_P^T`. Scores come from the
/// classification head when present and are 1 otherwise.
pub fn predict_masks(
    queries: &QuerySet,
    point_features: &DMatrix<f64>,
    weights: &DecoderWeights,
    threshold: f64,
) -> Result<PredictedMasks> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("mask threshold {threshold} outside (0, 1)")));
    }
    let embed = weights.mask_head.forward(&queries.values)?;
    if embed.ncols() != point_features.ncols() {
        return Err(Error::config(format!(
            "mask embeddings have {} channels, point features {}",
            embed.ncols(),
            point_features.ncols()
        )));
    }
    let logits = &embed * point_features.transpose();
    let point_masks = logits
        .row_iter()
        .map(|row| row.iter().map(|&x| sigmoid(x) > threshold).collect())
        .collect();
    let scores = match &weights.cls_head {
        Some(head) => head.forward(&queries.values)?.column(0).iter().map(|&x| sigmoid(x)).collect(),
        None => vec![1.0; queries.len()],
    };
    Ok(PredictedMasks {
        logits,
        point_masks,
        scores,
        query_rows: (0..queries.len()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub mask_threshold: f64,
    pub pool_denominator: PoolDenominator,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            mask_threshold: 0.5,
            pool_denominator: PoolDenominator::PointCount,
        }
    }
}

/// Runs the three decoder layers and returns the refined queries with their
/// final point masks.
pub fn decode(
    initial: &QuerySet,
    superpoint_features: &DMatrix<f64>,
    point_features: &DMatrix<f64>,
    sp: &SuperpointSet,
    shape: &ShapeWeights,
    weights: &DecoderWeights,
    opts: DecodeOptions,
) -> Result<(QuerySet, PredictedMasks)> {
    if superpoint_features.nrows() != sp.len() {
        return Err(Error::config("superpoint features do not match the superpoint set"));
    }
    let mut queries = initial.clone();
    for layer in 0..NUM_LAYERS {
        let masks = predict_masks(&queries, point_features, weights, opts.mask_threshold)?;
        let rows = masks
            .point_masks
            .iter()
            .map(|m| pool_mask(m, sp, shape, opts.pool_denominator, opts.mask_threshold))
            .collect::<Result<Vec<_>>>()?;
        let attn = AttentionMask::from_rows(&rows, sp.len())?;
        let attended = cross_attention_block(&queries, superpoint_features, &attn, weights, layer)?;
        queries = decoder_layer(&attended, weights, layer)?;
    }
    let masks = predict_masks(&queries, point_features, weights, opts.mask_threshold)?;
    Ok((queries, masks))
}

/// `|a ∩ b| / |a ∪ b|` over boolean point masks; 0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy mask suppression. Empty masks are dropped first; the rest are
/// visited by descending score (ties by lower row) and kept unless their IoU
/// with an already kept mask exceeds `iou_threshold`.
pub fn mask_nms(masks: &PredictedMasks, iou_threshold: f64) -> Result<PredictedMasks> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::config(format!("NMS threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..masks.len())
        .filter(|&i| masks.point_masks[i].iter().any(|&b| b))
        .collect();
    order.sort_by(|&a, &b| masks.scores[b].total_cmp(&masks.scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| mask_iou(&masks.point_masks[i], &masks.point_masks[k]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    Ok(masks.select(&keep))
}
