//! Lifting 2D instance masks onto a frame's point cloud and pooling point
//! features into one feature row per mask ("superpoint").
//!
//! Pooling is shape-aware: every superpoint is normalized to a unit-diameter
//! shape around its center, a per-point MLP embeds the normalized positions,
//! a channel-wise max gives the shape embedding, and a second MLP turns
//! `[local, global]` into a per-point weight in `(0, 1)`. The superpoint
//! feature is the weighted mean of its point features plus the shape
//! embedding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::nn::{sigmoid, Mlp};

/// Raw mask-file value for pixels covered by no mask.
pub const UNMASKED_RAW: u16 = u16::MAX;

/// Per-pixel mask labels in `{-1} ∪ [0, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    labels: Vec<i32>,
    /// Original id of each compact label, as read from the mask source.
    source_ids: Vec<u32>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::config(format!(
                "mask has {} labels, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        let count = labels.iter().copied().max().unwrap_or(-1).max(-1) + 1;
        let mut seen = vec![false; count as usize];
        for &l in &labels {
            if l < -1 {
                return Err(Error::config(format!("invalid mask label {l}")));
            }
            if l >= 0 {
                seen[l as usize] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!("mask label {missing} never occurs")));
        }
        Ok(MaskImage {
            width,
            height,
            labels,
            source_ids: (0..count as u32).collect(),
        })
    }

    /// Builds a mask from arbitrary 16-bit ids. `UNMASKED_RAW` marks
    /// uncovered pixels; the remaining ids are compacted to `[0, M)` in
    /// ascending id order.
    pub fn from_raw_ids(width: u32, height: u32, raw: &[u16]) -> Result<Self> {
        if raw.len() != width as usize * height as usize {
            return Err(Error::config(format!(
                "mask has {} pixels, expected {}x{}",
                raw.len(),
                width,
                height
            )));
        }
        let mut present = vec![false; UNMASKED_RAW as usize];
        for &r in raw {
            if r != UNMASKED_RAW {
                present[r as usize] = true;
            }
        }
        let mut compact = vec![-1i32; UNMASKED_RAW as usize];
        let mut source_ids = Vec::new();
        for (id, _) in present.iter().enumerate().filter(|(_, p)| **p) {
            compact[id] = source_ids.len() as i32;
            source_ids.push(id as u32);
        }
        let labels = raw
            .iter()
            .map(|&r| if r == UNMASKED_RAW { -1 } else { compact[r as usize] })
            .collect();
        Ok(MaskImage {
            width,
            height,
            labels,
            source_ids,
        })
    }

    /// Inverse of [`MaskImage::from_raw_ids`].
    pub fn to_raw_ids(&self) -> Vec<u16> {
        self.labels
            .iter()
            .map(|&l| {
                if l < 0 {
                    UNMASKED_RAW
                } else {
                    self.source_ids[l as usize] as u16
                }
            })
            .collect()
    }

    pub fn mask_count(&self) -> usize {
        self.source_ids.len()
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn source_id(&self, label: usize) -> u32 {
        self.source_ids[label]
    }

    pub fn get(&self, u: u32, v: u32) -> i32 {
        self.labels[(v * self.width + u) as usize]
    }
}

/// Per-point superpoint label; `-1` for points outside every mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointIndex {
    pub index: Vec<i32>,
    /// Number of groups `M`.
    pub groups: usize,
}

pub fn lift_masks(mask: &MaskImage, cloud: &PointCloud) -> Result<SuperpointIndex> {
    if (mask.width, mask.height) != cloud.image_size {
        return Err(Error::config(format!(
            "mask is {}x{} but the point cloud comes from a {}x{} frame",
            mask.width, mask.height, cloud.image_size.0, cloud.image_size.1
        )));
    }
    let index = cloud
        .source_pixel
        .iter()
        .map(|&(u, v)| mask.get(u, v))
        .collect();
    Ok(SuperpointIndex {
        index,
        groups: mask.mask_count(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtentMode {
    /// Divide by the largest per-axis extent, preserving aspect ratio.
    #[default]
    Scalar,
    /// Divide each axis by its own extent.
    PerAxis,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    #[default]
    Centroid,
    BoxCenter,
}

/// Denominator of the weighted pooling mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolDenominator {
    /// `sum(w * x) / |P|`
    #[default]
    PointCount,
    /// `sum(w * x) / sum(w)`
    WeightSum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    pub extent: ExtentMode,
    pub center: CenterMode,
}

/// Centers a point set and scales it to unit diameter.
pub fn normalize_superpoint(points: &[Vec3], opts: NormalizeOptions) -> Result<(Vec3, Vec<Vec3>)> {
    if points.is_empty() {
        return Err(Error::EmptyInput("superpoint without points"));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    let mut sum = Vec3::zeros();
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
        sum += p;
    }
    let center = match opts.center {
        CenterMode::Centroid => sum / points.len() as f64,
        CenterMode::BoxCenter => (lo + hi) * 0.5,
    };
    let extent = hi - lo;
    let scale = match opts.extent {
        ExtentMode::Scalar => {
            let e = extent.max();
            Vec3::from_element(if e > 0.0 { 1.0 / e } else { 0.0 })
        }
        ExtentMode::PerAxis => extent.map(|e| if e > 0.0 { 1.0 / e } else { 0.0 }),
    };
    let normalized = points
        .iter()
        .map(|p| (p - center).component_mul(&scale))
        .collect();
    Ok((center, normalized))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superpoint {
    /// Compact mask label this superpoint was lifted from.
    pub mask_label: usize,
    /// Indices into the frame's point cloud, ascending.
    pub points: Vec<usize>,
    pub center: Vec3,
    pub normalized: Vec<Vec3>,
}

/// Non-empty superpoints of one frame, in ascending mask-label order.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointSet {
    pub superpoints: Vec<Superpoint>,
    pub num_points: usize,
}

impl SuperpointSet {
    /// Groups the cloud by `index`. Masks that received no valid point are
    /// dropped, so row `i` of every per-superpoint matrix refers to
    /// `superpoints[i]`.
    pub fn build(cloud: &PointCloud, index: &SuperpointIndex, opts: NormalizeOptions) -> Result<Self> {
        if index.index.len() != cloud.len() {
            return Err(Error::config(format!(
                "superpoint index covers {} points, cloud has {}",
                index.index.len(),
                cloud.len()
            )));
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); index.groups];
        for (p, &g) in index.index.iter().enumerate() {
            if g >= 0 {
                let g = g as usize;
                if g >= index.groups {
                    return Err(Error::config(format!("superpoint label {g} out of range")));
                }
                groups[g].push(p);
            }
        }
        let mut superpoints = Vec::new();
        for (label, points) in groups.into_iter().enumerate() {
            if points.is_empty() {
                continue;
            }
            let pos: Vec<Vec3> = points.iter().map(|&p| cloud.positions[p]).collect();
            let (center, normalized) = normalize_superpoint(&pos, opts)?;
            superpoints.push(Superpoint {
                mask_label: label,
                points,
                center,
                normalized,
            });
        }
        Ok(SuperpointSet {
            superpoints,
            num_points: cloud.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.superpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpoints.is_empty()
    }

    /// Compact index over this set's superpoints (not the original mask labels).
    pub fn index(&self) -> SuperpointIndex {
        let mut index = vec![-1; self.num_points];
        for (i, sp) in self.superpoints.iter().enumerate() {
            for &p in &sp.points {
                index[p] = i as i32;
            }
        }
        SuperpointIndex {
            index,
            groups: self.len(),
        }
    }
}

/// Trained parameters of the two pooling MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPoolWeights {
    /// `3 -> C`, applied to every normalized point.
    pub mlp_local: Mlp,
    /// `2C -> 1`, applied to `[local, global]`.
    pub mlp_weight: Mlp,
}

impl GeoPoolWeights {
    pub fn new(mlp_local: Mlp, mlp_weight: Mlp) -> Result<Self> {
        if mlp_local.input_dim() != 3 {
            return Err(Error::config("local geometry MLP must take 3 inputs"));
        }
        let c = mlp_local.output_dim();
        if mlp_weight.input_dim() != 2 * c || mlp_weight.output_dim() != 1 {
            return Err(Error::config(format!(
                "weight MLP must map {} -> 1, got {} -> {}",
                2 * c,
                mlp_weight.input_dim(),
                mlp_weight.output_dim()
            )));
        }
        Ok(GeoPoolWeights {
            mlp_local,
            mlp_weight,
        })
    }

    pub fn channels(&self) -> usize {
        self.mlp_local.output_dim()
    }
}

/// Per-point local embeddings and their channel-wise max.
pub fn geo_features(normalized: &[Vec3], w: &GeoPoolWeights) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if normalized.is_empty() {
        return Err(Error::EmptyInput("superpoint without points"));
    }
    let input = DMatrix::from_fn(normalized.len(), 3, |r, c| normalized[r][c]);
    let local = w.mlp_local.forward(&input)?;
    let global = DVector::from_fn(local.ncols(), |c, _| {
        local.column(c).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    });
    Ok((local, global))
}

pub fn point_weights(z_local: &DMatrix<f64>, z_global: &DVector<f64>, w: &GeoPoolWeights) -> Result<Vec<f64>> {
    let c = z_local.ncols();
    if z_global.len() != c {
        return Err(Error::config("local and global embeddings differ in width"));
    }
    let mut concat = DMatrix::zeros(z_local.nrows(), 2 * c);
    concat.columns_mut(0, c).copy_from(z_local);
    for mut row in concat.columns_mut(c, c).row_iter_mut() {
        row.copy_from(&z_global.transpose());
    }
    let out = w.mlp_weight.forward(&concat)?;
    Ok(out.column(0).iter().map(|&x| sigmoid(x)).collect())
}

/// Point weights and shape embedding for every superpoint of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeWeights {
    pub point_weights: Vec<Vec<f64>>,
    pub global: Vec<DVector<f64>>,
}

impl ShapeWeights {
    /// Runs the pooling MLPs, or falls back to unit weights and a zero shape
    /// embedding (plain mean pooling) when no weights are loaded.
    pub fn compute(sp: &SuperpointSet, weights: Option<&GeoPoolWeights>, channels: usize) -> Result<Self> {
        let mut point_weights = Vec::with_capacity(sp.len());
        let mut global = Vec::with_capacity(sp.len());
        for s in &sp.superpoints {
            match weights {
                Some(w) => {
                    if w.channels() != channels {
                        return Err(Error::config(format!(
                            "pooling weights produce {} channels, point features have {}",
                            w.channels(),
                            channels
                        )));
                    }
                    let (local, g) = geo_features(&s.normalized, w)?;
                    point_weights.push(self::point_weights(&local, &g, w)?);
                    global.push(g);
                }
                None => {
                    point_weights.push(vec![1.0; s.points.len()]);
                    global.push(DVector::zeros(channels));
                }
            }
        }
        Ok(ShapeWeights {
            point_weights,
            global,
        })
    }
}

/// Weighted mean of point features per superpoint plus its shape embedding.
pub fn geometric_pool(
    features: &DMatrix<f64>,
    sp: &SuperpointSet,
    shape: &ShapeWeights,
    denominator: PoolDenominator,
) -> Result<DMatrix<f64>> {
    if features.nrows() != sp.num_points {
        return Err(Error::config(format!(
            "{} feature rows for {} points",
            features.nrows(),
            sp.num_points
        )));
    }
    if shape.point_weights.len() != sp.len() || shape.global.len() != sp.len() {
        return Err(Error::config("shape weights do not match the superpoint set"));
    }
    let c = features.ncols();
    let mut out = DMatrix::zeros(sp.len(), c);
    for (i, s) in sp.superpoints.iter().enumerate() {
        let w = &shape.point_weights[i];
        if w.len() != s.points.len() || shape.global[i].len() != c {
            return Err(Error::config(format!("shape weights of superpoint {i} have the wrong size")));
        }
        let mut acc = DVector::<f64>::zeros(c);
        for (&p, &wj) in s.points.iter().zip(w) {
            acc.axpy(wj, &features.row(p).transpose(), 1.0);
        }
        let denom = match denominator {
            PoolDenominator::PointCount => s.points.len() as f64,
            PoolDenominator::WeightSum => w.iter().sum(),
        };
        acc /= denom;
        acc += &shape.global[i];
        out.row_mut(i).copy_from(&acc.transpose());
    }
    Ok(out)
}

/// Pools a per-point boolean mask to a per-superpoint mask with the same
/// weighted mean as [`geometric_pool`] (without the shape embedding) and
/// thresholds it at `threshold`.
pub fn pool_mask(
    point_mask: &[bool],
    sp: &SuperpointSet,
    shape: &ShapeWeights,
    denominator: PoolDenominator,
    threshold: f64,
) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("mask threshold {threshold} outside (0, 1)")));
    }
    if point_mask.len() != sp.num_points {
        return Err(Error::config("point mask length differs from the point count"));
    }
    Ok(sp
        .superpoints
        .iter()
        .zip(&shape.point_weights)
        .map(|(s, w)| {
            let num: f64 = s
                .points
                .iter()
                .zip(w)
                .filter(|(&p, _)| point_mask[p])
                .map(|(_, &wj)| wj)
                .sum();
            let denom = match denominator {
                PoolDenominator::PointCount => s.points.len() as f64,
                PoolDenominator::WeightSum => w.iter().sum(),
            };
            num / denom > threshold
        })
        .collect())
}

fn check_index(values: &DMatrix<f64>, index: &SuperpointIndex) -> Result<()> {
    if values.nrows() != index.index.len() {
        return Err(Error::config("value rows and index length differ"));
    }
    if let Some(&bad) = index.index.iter().find(|&&g| g >= index.groups as i32 || g < -1) {
        return Err(Error::config(format!("group label {bad} out of range")));
    }
    Ok(())
}

/// Per-group mean; rows labelled `-1` are ignored and empty groups are zero.
pub fn scatter_mean(values: &DMatrix<f64>, index: &SuperpointIndex) -> Result<DMatrix<f64>> {
    check_index(values, index)?;
    let mut out = DMatrix::zeros(index.groups, values.ncols());
    let mut counts = vec![0usize; index.groups];
    for (r, &g) in index.index.iter().enumerate() {
        if g < 0 {
            continue;
        }
        let mut row = out.row_mut(g as usize);
        row += values.row(r);
        counts[g as usize] += 1;
    }
    for (g, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mut row = out.row_mut(g);
            row /= n as f64;
        }
    }
    Ok(out)
}

/// Per-group channel-wise max; rows labelled `-1` are ignored and empty
/// groups are zero.
pub fn scatter_max(values: &DMatrix<f64>, index: &SuperpointIndex) -> Result<DMatrix<f64>> {
    check_index(values, index)?;
    let mut out = DMatrix::from_element(index.groups, values.ncols(), f64::NEG_INFINITY);
    let mut touched = vec![false; index.groups];
    for (r, &g) in index.index.iter().enumerate() {
        if g < 0 {
            continue;
        }
        let g = g as usize;
        touched[g] = true;
        for c in 0..values.ncols() {
            out[(g, c)] = out[(g, c)].max(values[(r, c)]);
        }
    }
    for (g, t) in touched.iter().enumerate() {
        if !t {
            out.row_mut(g).fill(0.0);
        }
    }
    Ok(out)
}
