//! Online query merging.
//!
//! Every detected mask is summarized by fixed-size vectors: a world-frame
//! box, a contrastive embedding and a semantic distribution. Comparing the
//! current frame's detections against the map is then one box-IoU matrix
//! plus two cosine matrices. Pairs scoring below the prune threshold are
//! forbidden, the rest are matched one-to-one, matched detections are folded
//! into their instance with a running average, and unmatched detections
//! become new instances.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::decoder::{PredictedMasks, QuerySet};
use crate::error::{Error, Result};
use crate::geometry::{aabb_iou_matrix, aabb_of_points, Aabb, Vec3};
use crate::nn::{softmax_in_place, softplus, Mlp};
use crate::superpoint::SuperpointSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// Global point ids over the accumulated scene, sorted and unique.
    pub point_ids: Vec<usize>,
    pub bbox: Aabb,
    pub contrastive: Vec<f64>,
    pub semantic: Vec<f64>,
    /// Number of detections merged into this record.
    pub n: u32,
    pub confidence: f64,
    pub instance_id: u64,
}

impl InstanceRecord {
    pub fn semantic_argmax(&self) -> Option<usize> {
        self.semantic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }
}

/// Auxiliary heads mapping a query feature to the record vectors. Any head
/// left out falls back to a weight-free estimate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadWeights {
    /// `C -> 6` offsets `[lower_x, lower_y, lower_z, upper_x, upper_y, upper_z]`
    /// from the query's superpoint center.
    pub bbox: Option<Mlp>,
    /// `C -> C_f`
    pub contrastive: Option<Mlp>,
    /// `C -> K` category logits.
    pub semantic: Option<Mlp>,
}

impl HeadWeights {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let heads = [("box", &self.bbox), ("contrastive", &self.contrastive), ("semantic", &self.semantic)];
        for (name, head) in heads {
            if let Some(h) = head {
                if h.input_dim() != channels {
                    return Err(Error::config(format!(
                        "{name} head takes {} channels, queries have {channels}",
                        h.input_dim()
                    )));
                }
            }
        }
        if let Some(b) = &self.bbox {
            if b.output_dim() != 6 {
                return Err(Error::config("box head must output 6 offsets"));
            }
        }
        Ok(())
    }
}

/// Everything one frame contributes to the map.
#[derive(Debug, Clone, Copy)]
pub struct FrameDetections<'a> {
    /// Decoder output; `masks.query_rows` index into it.
    pub queries: &'a QuerySet,
    pub masks: &'a PredictedMasks,
    pub superpoints: &'a SuperpointSet,
    /// Pooled superpoint features, one row per superpoint.
    pub superpoint_features: &'a DMatrix<f64>,
    /// World-frame positions of the frame's points.
    pub positions: &'a [Vec3],
    /// Optional category per superpoint row.
    pub semantic_labels: Option<&'a [Option<usize>]>,
    pub num_classes: usize,
    /// Global id of the frame's first point.
    pub point_offset: usize,
}

/// Resolves overlapping masks so every point belongs to at most one mask:
/// higher score wins, ties go to the lower row.
pub fn exclusive_masks(masks: &PredictedMasks) -> Vec<Vec<usize>> {
    let n = masks.point_masks.first().map_or(0, |m| m.len());
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks.scores[b].total_cmp(&masks.scores[a]).then(a.cmp(&b)));
    let mut taken = vec![false; n];
    let mut out = vec![Vec::new(); masks.len()];
    for i in order {
        for (p, &on) in masks.point_masks[i].iter().enumerate() {
            if on && !taken[p] {
                taken[p] = true;
                out[i].push(p);
            }
        }
    }
    out
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// One record per non-empty detection, with `n = 1` and a placeholder
/// instance id (assigned on registration).
pub fn make_records(det: &FrameDetections<'_>, heads: &HeadWeights) -> Result<Vec<InstanceRecord>> {
    let masks = det.masks;
    let owned = exclusive_masks(masks);
    let mut records = Vec::new();
    for (i, local) in owned.into_iter().enumerate() {
        if local.is_empty() {
            continue;
        }
        let qrow = masks.query_rows[i];
        if qrow >= det.queries.len() {
            return Err(Error::config(format!("mask refers to missing query row {qrow}")));
        }
        let origin = det.queries.origin[qrow];
        let sp = det
            .superpoints
            .superpoints
            .get(origin)
            .ok_or_else(|| Error::config(format!("query origin {origin} is not a superpoint")))?;
        let q = det.queries.values.rows(qrow, 1).into_owned();

        let bbox = match &heads.bbox {
            Some(h) => {
                let off = h.forward(&q)?;
                let o: Vec<f64> = off.iter().map(|&x| softplus(x)).collect();
                let c = sp.center;
                Aabb::new(
                    [c.x - o[0], c.y - o[1], c.z - o[2]],
                    [c.x + o[3], c.y + o[4], c.z + o[5]],
                )
            }
            None => aabb_of_points(local.iter().map(|&p| &det.positions[p]))?,
        };
        let contrastive = match &heads.contrastive {
            Some(h) => h.forward(&q)?.iter().copied().collect(),
            None => {
                let row: Vec<f64> = det.superpoint_features.row(origin).iter().copied().collect();
                normalized(&row)
            }
        };
        let semantic = match &heads.semantic {
            Some(h) => {
                let mut s: Vec<f64> = h.forward(&q)?.iter().copied().collect();
                softmax_in_place(&mut s);
                s
            }
            None => {
                let k = det.num_classes.max(1);
                match det.semantic_labels.and_then(|l| l.get(origin).copied().flatten()) {
                    Some(label) if label < k => {
                        let mut s = vec![0.0; k];
                        s[label] = 1.0;
                        s
                    }
                    _ => vec![1.0 / k as f64; k],
                }
            }
        };
        records.push(InstanceRecord {
            point_ids: local.iter().map(|&p| p + det.point_offset).collect(),
            bbox,
            contrastive,
            semantic,
            n: 1,
            confidence: masks.scores[i],
            instance_id: 0,
        });
    }
    Ok(records)
}

fn normalized_rows(records: &[InstanceRecord], pick: fn(&InstanceRecord) -> &[f64]) -> Result<DMatrix<f64>> {
    let dim = records.first().map_or(0, |r| pick(r).len());
    let mut m = DMatrix::zeros(records.len(), dim);
    for (i, r) in records.iter().enumerate() {
        let v = pick(r);
        if v.len() != dim {
            return Err(Error::config("records disagree on vector length"));
        }
        for (j, x) in normalized(v).into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

/// `m x k` similarity: box IoU plus contrastive cosine plus semantic cosine.
pub fn similarity_matrix(prev: &[InstanceRecord], cur: &[InstanceRecord]) -> Result<DMatrix<f64>> {
    if prev.is_empty() || cur.is_empty() {
        return Ok(DMatrix::zeros(prev.len(), cur.len()));
    }
    let pb: Vec<Aabb> = prev.iter().map(|r| r.bbox).collect();
    let cb: Vec<Aabb> = cur.iter().map(|r| r.bbox).collect();
    let mut sim = aabb_iou_matrix(&pb, &cb);
    for pick in [
        (|r: &InstanceRecord| r.contrastive.as_slice()) as fn(&InstanceRecord) -> &[f64],
        |r: &InstanceRecord| r.semantic.as_slice(),
    ] {
        let a = normalized_rows(prev, pick)?;
        let b = normalized_rows(cur, pick)?;
        if a.ncols() != b.ncols() {
            return Err(Error::config(format!(
                "cannot compare {}-d and {}-d record vectors",
                a.ncols(),
                b.ncols()
            )));
        }
        sim += a * b.transpose();
    }
    Ok(sim)
}

/// Replaces entries below `threshold` with `-inf`.
pub fn prune(sim: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    sim.map(|x| if x < threshold { f64::NEG_INFINITY } else { x })
}

/// Maximum-similarity one-to-one matching; `-inf` pairs never match.
/// Returns `(prev_index, cur_index)` pairs.
pub fn match_instances(pruned: &DMatrix<f64>) -> Vec<(usize, usize)> {
    max_weight_matching(pruned)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceFusion {
    #[default]
    Max,
    WeightedAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeOptions {
    pub prune_threshold: f64,
    pub confidence_fusion: ConfidenceFusion,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            prune_threshold: 1.75,
            confidence_fusion: ConfidenceFusion::Max,
        }
    }
}

/// Wall time of the three merge stages for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeTiming {
    #[serde(with = "millis")]
    pub similarity: Duration,
    #[serde(with = "millis")]
    pub matching: Duration,
    #[serde(with = "millis")]
    pub updating: Duration,
}

pub(crate) mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(ms.max(0.0) / 1e3))
    }
}

/// `prev * n/(n+1) + cur / (n+1)`, elementwise.
pub fn running_average(prev: &mut [f64], cur: &[f64], n: u32) {
    let a = n as f64 / (n as f64 + 1.0);
    let b = 1.0 / (n as f64 + 1.0);
    for (p, c) in prev.iter_mut().zip(cur) {
        *p = a * *p + b * c;
    }
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// The global instance map over all points seen so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceMap {
    pub records: Vec<InstanceRecord>,
    /// Number of points accumulated over all frames.
    pub point_count: usize,
    pub next_instance_id: u64,
    pub frames: usize,
}

impl InstanceMap {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&mut self, mut record: InstanceRecord) {
        record.instance_id = self.next_instance_id;
        record.n = 1;
        self.next_instance_id += 1;
        self.records.push(record);
    }

    /// Folds `cur[j]` into `records[i]`.
    fn fuse(&mut self, i: usize, cur: &InstanceRecord, fusion: ConfidenceFusion) -> Result<()> {
        let rec = &mut self.records[i];
        if rec.contrastive.len() != cur.contrastive.len() || rec.semantic.len() != cur.semantic.len() {
            return Err(Error::Integrity("record vector lengths changed between frames".into()));
        }
        let n = rec.n;
        let mut b = rec.bbox.to_array();
        running_average(&mut b, &cur.bbox.to_array(), n);
        rec.bbox = Aabb::from_array(b);
        running_average(&mut rec.contrastive, &cur.contrastive, n);
        running_average(&mut rec.semantic, &cur.semantic, n);
        rec.confidence = match fusion {
            ConfidenceFusion::Max => rec.confidence.max(cur.confidence),
            ConfidenceFusion::WeightedAverage => {
                let mut c = [rec.confidence];
                running_average(&mut c, &[cur.confidence], n);
                c[0]
            }
        };
        rec.point_ids = sorted_union(&rec.point_ids, &cur.point_ids);
        rec.n = n + 1;
        Ok(())
    }

    fn check_range(&self, cur: &[InstanceRecord], frame_points: usize) -> Result<()> {
        let lo = self.point_count;
        let hi = lo + frame_points;
        for (j, r) in cur.iter().enumerate() {
            if r.point_ids.is_empty() {
                return Err(Error::Integrity(format!("detection {j} has no points")));
            }
            if !r.point_ids.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Integrity(format!("detection {j} point ids are not sorted and unique")));
            }
            if r.point_ids[0] < lo || *r.point_ids.last().unwrap() >= hi {
                return Err(Error::Integrity(format!(
                    "detection {j} references points outside the frame range [{lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Merges one frame's detections, which must reference the frame's global
    /// point range `[point_count, point_count + frame_points)`.
    pub fn merge_step(&mut self, cur: Vec<InstanceRecord>, frame_points: usize, opts: MergeOptions) -> Result<MergeTiming> {
        self.check_range(&cur, frame_points)?;
        let start = Instant::now();
        let sim = similarity_matrix(&self.records, &cur)?;
        let t_sim = Instant::now();
        let pairs = match_instances(&prune(&sim, opts.prune_threshold));
        let t_match = Instant::now();
        let mut matched = vec![false; cur.len()];
        for &(i, j) in &pairs {
            self.fuse(i, &cur[j], opts.confidence_fusion)?;
            matched[j] = true;
        }
        for (rec, m) in cur.into_iter().zip(matched) {
            if !m {
                self.register(rec);
            }
        }
        self.point_count += frame_points;
        self.frames += 1;
        let t_update = Instant::now();
        Ok(MergeTiming {
            similarity: t_sim - start,
            matching: t_match - t_sim,
            updating: t_update - t_match,
        })
    }

    /// Builds records for a decoded frame and merges them.
    pub fn frame_update(&mut self, det: &FrameDetections<'_>, heads: &HeadWeights, opts: MergeOptions) -> Result<MergeTiming> {
        if det.point_offset != self.point_count {
            return Err(Error::Integrity(format!(
                "frame starts at point {} but the map holds {}",
                det.point_offset, self.point_count
            )));
        }
        let records = make_records(det, heads)?;
        self.merge_step(records, det.positions.len(), opts)
    }

    /// Instance id per global point, `None` for unassigned points.
    pub fn point_labels(&self) -> Vec<Option<u64>> {
        let mut labels = vec![None; self.point_count];
        for r in &self.records {
            for &p in &r.point_ids {
                labels[p] = Some(r.instance_id);
            }
        }
        labels
    }
}
