//! Streaming driver: frames in, instance map out.
//!
//! Per frame: unproject depth, lift masks to superpoints, pool point features
//! into superpoint features, decode masks (or, without decoder weights, use
//! each superpoint directly as a detection), suppress duplicates, and merge
//! into the map.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{debug, info};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, init_queries, mask_nms, DecodeOptions, PredictedMasks, QuerySet};
use crate::error::{Error, Result};
use crate::geometry::{unproject_depth, Aabb, Vec3};
use crate::io::export::{GroundTruth, MapExport};
use crate::io::frames::{read_sequence, write_frame, Frame};
use crate::io::weights::ModelWeights;
use crate::io::{read_json, write_json};
use crate::merging::{
    make_records, millis, ConfidenceFusion, FrameDetections, InstanceMap, InstanceRecord, MergeOptions, MergeTiming,
};
use crate::metrics::{evaluate_ap, EvalResult};
use crate::superpoint::{geometric_pool, lift_masks, NormalizeOptions, PoolDenominator, ShapeWeights, SuperpointSet};
use crate::synthetic::{generate_sequence, SynthConfig, SyntheticSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Sigmoid threshold for point and superpoint masks.
    pub mask_threshold: f64,
    /// Similarity below which two records may not be matched.
    pub prune_threshold: f64,
    /// Contrastive temperature (used by the loss diagnostics).
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nms_iou: f64,
    pub depth_scale: f64,
    pub normalize: NormalizeOptions,
    pub pool_denominator: PoolDenominator,
    pub confidence_fusion: ConfidenceFusion,
    /// Fraction of superpoints that seed decoder queries.
    pub query_ratio: f64,
    /// Feature width used when a frame has no feature file and no decoder
    /// fixes the width.
    pub feature_channels: usize,
    /// Length of the semantic distribution when no semantic head is loaded.
    pub num_classes: usize,
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mask_threshold: 0.5,
            prune_threshold: 1.75,
            temperature: 0.02,
            alpha: 0.5,
            beta: 0.5,
            nms_iou: 0.6,
            depth_scale: 0.001,
            normalize: NormalizeOptions::default(),
            pool_denominator: PoolDenominator::PointCount,
            confidence_fusion: ConfidenceFusion::Max,
            query_ratio: 1.0,
            feature_channels: 32,
            num_classes: 20,
            weights: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit_open("mask threshold", self.mask_threshold)?;
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::config(format!("NMS IoU must lie in (0, 1], got {}", self.nms_iou)));
        }
        if !(self.query_ratio > 0.0 && self.query_ratio <= 1.0) {
            return Err(Error::config(format!("query ratio must lie in (0, 1], got {}", self.query_ratio)));
        }
        if !self.prune_threshold.is_finite() {
            return Err(Error::config("prune threshold must be finite"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::config("depth scale must be positive"));
        }
        if self.feature_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("feature channels and class count must be positive"));
        }
        Ok(())
    }

    pub fn merge_options(&self) -> MergeOptions {
        MergeOptions {
            prune_threshold: self.prune_threshold,
            confidence_fusion: self.confidence_fusion,
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            mask_threshold: self.mask_threshold,
            pool_denominator: self.pool_denominator,
        }
    }
}

/// Wall time of each stage for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub points: usize,
    pub detections: usize,
    #[serde(with = "millis")]
    pub io: Duration,
    /// Unprojection, lifting and pooling.
    #[serde(with = "millis")]
    pub backbone: Duration,
    /// Decoding, suppression and record construction.
    #[serde(with = "millis")]
    pub decoder: Duration,
    #[serde(with = "millis")]
    pub similarity: Duration,
    #[serde(with = "millis")]
    pub matching: Duration,
    #[serde(with = "millis")]
    pub updating: Duration,
    #[serde(with = "millis")]
    pub total: Duration,
}

impl FrameTiming {
    pub fn stage_sum(&self) -> Duration {
        self.io + self.backbone + self.decoder + self.similarity + self.matching + self.updating
    }
}

/// Incremental pipeline state.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub weights: ModelWeights,
    pub map: InstanceMap,
    /// World positions of every accumulated point, indexed by global id.
    pub positions: Vec<Vec3>,
    pub timings: Vec<FrameTiming>,
}

impl Pipeline {
    pub fn new(config: RunConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if let Some(d) = &weights.decoder {
            d.validate()?;
            weights.heads.validate(d.channels())?;
            if let Some(g) = &weights.geo_pool {
                if g.channels() != d.channels() {
                    return Err(Error::config("pooling and decoder weights disagree on the channel count"));
                }
            }
        }
        Ok(Pipeline {
            config,
            weights,
            map: InstanceMap::new(),
            positions: Vec::new(),
            timings: Vec::new(),
        })
    }

    fn channels(&self) -> usize {
        match (&self.weights.decoder, &self.weights.geo_pool) {
            (Some(d), _) => d.channels(),
            (None, Some(g)) => g.channels(),
            (None, None) => self.config.feature_channels,
        }
    }

    /// Processes one frame; `io` is the time spent obtaining it.
    pub fn process(&mut self, frame: &Frame, io: Duration) -> Result<FrameTiming> {
        self.process_inner(frame, io).map_err(|e| Error::Frame {
            frame: frame.index,
            source: Box::new(e),
        })
    }

    fn process_inner(&mut self, frame: &Frame, io: Duration) -> Result<FrameTiming> {
        let cfg = &self.config;
        let start = Instant::now();
        let cloud = unproject_depth(&frame.depth, &frame.intrinsics, &frame.pose, frame.index)?;
        let index = lift_masks(&frame.mask, &cloud)?;
        let sp = SuperpointSet::build(&cloud, &index, cfg.normalize)?;
        let point_features = match &frame.features {
            Some(f) => f.clone(),
            None => DMatrix::zeros(cloud.len(), self.channels()),
        };
        let shape = ShapeWeights::compute(&sp, self.weights.geo_pool.as_ref(), point_features.ncols())?;
        let sp_features = geometric_pool(&point_features, &sp, &shape, cfg.pool_denominator)?;
        let t_backbone = Instant::now();

        let records = if sp.is_empty() {
            Vec::new()
        } else {
            let (queries, masks) = match &self.weights.decoder {
                Some(dw) => {
                    let seed = cfg.seed ^ (frame.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    let init = init_queries(&sp_features, cfg.query_ratio, seed)?;
                    let (q, m) = decode(&init, &sp_features, &point_features, &sp, &shape, dw, cfg.decode_options())?;
                    (q, mask_nms(&m, cfg.nms_iou)?)
                }
                None => passthrough(&sp, &sp_features),
            };
            let categories = frame.mask_categories();
            if let Some(c) = categories.iter().flatten().find(|&&c| c >= cfg.num_classes) {
                return Err(Error::config(format!(
                    "category {c} outside the {} configured classes",
                    cfg.num_classes
                )));
            }
            let labels: Vec<Option<usize>> = sp.superpoints.iter().map(|s| categories[s.mask_label]).collect();
            let det = FrameDetections {
                queries: &queries,
                masks: &masks,
                superpoints: &sp,
                superpoint_features: &sp_features,
                positions: &cloud.positions,
                semantic_labels: Some(&labels),
                num_classes: cfg.num_classes,
                point_offset: self.map.point_count,
            };
            make_records(&det, &self.weights.heads)?
        };
        let detections = records.len();
        let t_decoder = Instant::now();
        let merge = self.map.merge_step(records, cloud.len(), cfg.merge_options())?;
        self.positions.extend_from_slice(&cloud.positions);
        let end = Instant::now();

        let timing = FrameTiming {
            frame: frame.index,
            points: cloud.len(),
            detections,
            io,
            backbone: t_backbone - start,
            decoder: t_decoder - t_backbone,
            similarity: merge.similarity,
            matching: merge.matching,
            updating: (end - t_decoder).saturating_sub(merge.similarity + merge.matching),
            total: io + (end - start),
        };
        info!(
            "frame {}: {} points, {} detections, {} instances; io {:.2} ms, backbone {:.2} ms, decoder {:.2} ms, \
             similarity {:.3} ms, matching {:.3} ms, updating {:.3} ms, total {:.2} ms",
            frame.index,
            timing.points,
            detections,
            self.map.records.len(),
            ms(timing.io),
            ms(timing.backbone),
            ms(timing.decoder),
            ms(timing.similarity),
            ms(timing.matching),
            ms(timing.updating),
            ms(timing.total),
        );
        self.timings.push(timing);
        Ok(timing)
    }

    pub fn export(&self) -> MapExport {
        MapExport::new(&self.map, serde_json::json!({ "config": self.config }))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Every superpoint becomes a detection with confidence 1.
fn passthrough(sp: &SuperpointSet, sp_features: &DMatrix<f64>) -> (QuerySet, PredictedMasks) {
    let m = sp.len();
    let point_masks = sp
        .superpoints
        .iter()
        .map(|s| {
            let mut mask = vec![false; sp.num_points];
            for &p in &s.points {
                mask[p] = true;
            }
            mask
        })
        .collect();
    let queries = QuerySet {
        values: sp_features.clone(),
        origin: (0..m).collect(),
        layer: 0,
    };
    let masks = PredictedMasks {
        logits: DMatrix::zeros(0, 0),
        point_masks,
        scores: vec![1.0; m],
        query_rows: (0..m).collect(),
    };
    (queries, masks)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub map: InstanceMap,
    pub positions: Vec<Vec3>,
    pub timings: Vec<FrameTiming>,
    pub export: MapExport,
}

/// Runs the whole sequence in `dir`.
pub fn run(dir: &Path, config: RunConfig, weights: ModelWeights) -> Result<RunOutput> {
    let mut pipeline = Pipeline::new(config, weights)?;
    let mut reader = read_sequence(dir, pipeline.config.depth_scale)?;
    info!("{} frames in {}", reader.len(), dir.display());
    loop {
        let t = Instant::now();
        let Some(frame) = reader.next() else { break };
        let frame = frame?;
        pipeline.process(&frame, t.elapsed())?;
    }
    let export = pipeline.export();
    Ok(RunOutput {
        map: pipeline.map,
        positions: pipeline.positions,
        timings: pipeline.timings,
        export,
    })
}

/// Scores a map export against a ground-truth file.
pub fn evaluate_files(pred: &Path, gt: &Path) -> Result<EvalResult> {
    let pred: MapExport = read_json(pred)?;
    let gt: GroundTruth = read_json(gt)?;
    if pred.point_count != gt.point_count {
        return Err(Error::config(format!(
            "prediction covers {} points, ground truth {}",
            pred.point_count, gt.point_count
        )));
    }
    Ok(evaluate_ap(&pred.predictions(), &gt.point_sets()))
}

impl SyntheticSequence {
    /// The frames as the reader will return them (features rounded to f32).
    pub fn to_frames(&self) -> Vec<Frame> {
        self.frames
            .iter()
            .zip(&self.features)
            .enumerate()
            .map(|(i, (f, feats))| Frame {
                index: i,
                intrinsics: f.intrinsics,
                pose: f.pose,
                depth: f.depth.clone(),
                mask: f.mask.clone(),
                features: Some(feats.point_features.map(|x| x as f32 as f64)),
                semantics: Some(f.instances.iter().map(|inst| (inst.instance_id, inst.category)).collect()),
            })
            .collect()
    }

    pub fn ground_truth_file(&self) -> Result<GroundTruth> {
        let point_count = self.frames.iter().map(|f| f.depth.data.iter().filter(|&&d| d != 0).count()).sum();
        Ok(GroundTruth {
            point_count,
            instances: self.ground_truth()?,
        })
    }

    /// Writes the frames plus `gt.json` and `scene.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for frame in self.to_frames() {
            write_frame(dir, &frame)?;
        }
        write_json(&dir.join("gt.json"), &self.ground_truth_file()?)?;
        write_json(&dir.join("scene.json"), &self.scene)
    }
}

/// Generates a sequence and writes it to `dir`.
pub fn synth(dir: &Path, cfg: SynthConfig) -> Result<SyntheticSequence> {
    let seq = generate_sequence(cfg)?;
    seq.write(dir)?;
    info!(
        "wrote {} frames with {} objects to {}",
        seq.frames.len(),
        seq.scene.objects.len(),
        dir.display()
    );
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub prev: usize,
    pub cur: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub points_per_instance: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prev: 200,
            cur: 50,
            channels: 256,
            num_classes: 20,
            points_per_instance: 500,
            iterations: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    /// Mean over iterations, in milliseconds.
    pub similarity_ms: f64,
    pub matching_ms: f64,
    pub updating_ms: f64,
    pub total_ms: f64,
    /// Matched pairs in the last iteration.
    pub matched: usize,
}

fn random_record(rng: &mut ChaCha8Rng, cfg: &BenchConfig, first_point: usize) -> InstanceRecord {
    let c = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..2.0));
    let h = Vec3::new(rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
    let mut semantic = vec![0.0; cfg.num_classes];
    semantic[rng.gen_range(0..cfg.num_classes)] = 1.0;
    InstanceRecord {
        point_ids: (first_point..first_point + cfg.points_per_instance).collect(),
        bbox: Aabb::from_center_half(c, h),
        contrastive: (0..cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        semantic,
        n: 1,
        confidence: rng.gen_range(0.5..1.0),
        instance_id: 0,
    }
}

/// Times one merge of `cur` detections into a map of `prev` instances. Half
/// of the detections are perturbed copies of existing instances.
pub fn bench(cfg: BenchConfig) -> Result<BenchReport> {
    if cfg.prev == 0 || cfg.cur == 0 || cfg.channels == 0 || cfg.num_classes == 0 || cfg.iterations == 0 {
        return Err(Error::config("bench sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per = cfg.points_per_instance;
    let mut base = InstanceMap::new();
    let prev: Vec<InstanceRecord> = (0..cfg.prev).map(|i| random_record(&mut rng, &cfg, i * per)).collect();
    base.merge_step(prev.clone(), cfg.prev * per, MergeOptions::default())?;

    let offset = base.point_count;
    let cur: Vec<InstanceRecord> = (0..cfg.cur)
        .map(|j| {
            let mut r = if j % 2 == 0 {
                let mut r = prev[rng.gen_range(0..cfg.prev)].clone();
                r.bbox = r.bbox.translated(&Vec3::new(0.02, -0.01, 0.0));
                r.contrastive.iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
                r
            } else {
                random_record(&mut rng, &cfg, 0)
            };
            r.point_ids = (offset + j * per..offset + (j + 1) * per).collect();
            r
        })
        .collect();

    let mut total = MergeTiming::default();
    let mut matched = 0;
    for _ in 0..cfg.iterations {
        let mut map = base.clone();
        let t = map.merge_step(cur.clone(), cfg.cur * per, MergeOptions::default())?;
        total.similarity += t.similarity;
        total.matching += t.matching;
        total.updating += t.updating;
        matched = cfg.prev + cfg.cur - map.records.len();
    }
    let n = cfg.iterations as f64;
    let report = BenchReport {
        config: cfg,
        similarity_ms: ms(total.similarity) / n,
        matching_ms: ms(total.matching) / n,
        updating_ms: ms(total.updating) / n,
        total_ms: ms(total.similarity + total.matching + total.updating) / n,
        matched,
    };
    debug!("{report:?}");
    Ok(report)
}
