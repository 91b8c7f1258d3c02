//! Procedural scenes of boxes and spheres with exact ground truth.
//!
//! Rendering is analytic ray casting, so every depth pixel, mask id and
//! instance correspondence is known exactly. Oracle features stand in for a
//! trained backbone: each instance gets a fixed signature vector, and noise
//! is a seeded uniform perturbation scaled by the noise level, so raising the
//! level moves the same draws further from the clean values.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject_depth, Aabb, CameraIntrinsics, DepthImage, PointCloud, Pose, Vec3};
use crate::superpoint::{MaskImage, UNMASKED_RAW};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box with the given half extents.
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: [f64; 3],
    pub instance_id: u32,
    pub category: usize,
}

impl SceneObject {
    pub fn bbox(&self) -> Aabb {
        let c = Vec3::from(self.center);
        match self.shape {
            Shape::Box { half } => Aabb::from_center_half(c, Vec3::from(half)),
            Shape::Sphere { radius } => Aabb::from_center_half(c, Vec3::repeat(radius)),
        }
    }

    /// Smallest positive ray parameter `t` with `origin + t * dir` on the surface.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let c = Vec3::from(self.center);
        match self.shape {
            Shape::Box { half } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    let lo = c[a] - half[a];
                    let hi = c[a] + half[a];
                    if dir[a] == 0.0 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (lo - origin[a]) / dir[a];
                    let t2 = (hi - origin[a]) / dir[a];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far || t_far <= 0.0 {
                    return None;
                }
                Some(if t_near > 0.0 { t_near } else { t_far })
            }
            Shape::Sphere { radius } => {
                let oc = origin - c;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let disc = b * b - a * (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = (-b - s) / a;
                let t1 = (-b + s) / a;
                if t0 > 0.0 {
                    Some(t0)
                } else if t1 > 0.0 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    /// Distance from `p` to the surface (zero on it).
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let c = Vec3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => ((p - c).norm() - radius).abs(),
            Shape::Box { half } => {
                let d = (p - c).abs() - Vec3::from(half);
                let outside = d.map(|x| x.max(0.0)).norm();
                let inside = d.max().min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    pub room: Aabb,
    pub num_classes: usize,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.objects.iter().map(|o| Vec3::from(o.center)).sum();
        sum / self.objects.len().max(1) as f64
    }

    pub fn object(&self, instance_id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }
}

/// Placement attempts per object before giving up.
pub const MAX_RETRIES: usize = 1000;
const GAP: f64 = 0.1;

/// Half width of the square room floor holding `n` objects.
fn room_half(n: usize) -> f64 {
    0.8 + 0.6 * (n as f64).sqrt()
}

/// Places `n_objects` primitives resting on the floor `z = 0`, with at least
/// 10 cm between bounding boxes.
pub fn generate_scene(seed: u64, n_objects: usize, num_classes: usize) -> Result<SyntheticScene> {
    generate_scene_in(seed, n_objects, num_classes, room_half(n_objects))
}

/// [`generate_scene`] with an explicit room half width.
pub fn generate_scene_in(seed: u64, n_objects: usize, num_classes: usize, half_width: f64) -> Result<SyntheticScene> {
    if n_objects == 0 {
        return Err(Error::Precondition("a scene needs at least one object".into()));
    }
    if num_classes == 0 {
        return Err(Error::Precondition("a scene needs at least one category".into()));
    }
    if n_objects >= UNMASKED_RAW as usize {
        return Err(Error::config("too many objects for 16-bit mask ids"));
    }
    let r = half_width;
    let room = Aabb::new([-r, -r, 0.0], [r, r, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for id in 0..n_objects {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let shape = if rng.gen_bool(0.5) {
                Shape::Box {
                    half: [rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.5)],
                }
            } else {
                Shape::Sphere {
                    radius: rng.gen_range(0.15..0.35),
                }
            };
            let (hx, hy, hz) = match shape {
                Shape::Box { half } => (half[0], half[1], half[2]),
                Shape::Sphere { radius } => (radius, radius, radius),
            };
            if hx >= r || hy >= r {
                continue;
            }
            let center = [rng.gen_range(-r + hx..r - hx), rng.gen_range(-r + hy..r - hy), hz];
            let category = rng.gen_range(0..num_classes);
            let candidate = SceneObject {
                shape,
                center,
                instance_id: id as u32,
                category,
            };
            let grown = {
                let b = candidate.bbox();
                Aabb::new(b.min.map(|x| x - GAP), b.max.map(|x| x + GAP))
            };
            if objects.iter().all(|o| !o.bbox().intersects(&grown)) {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capacity { retries: MAX_RETRIES });
        }
    }
    Ok(SyntheticScene {
        objects,
        room,
        num_classes,
        seed,
    })
}

/// Ground truth for one mask in a rendered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInstance {
    pub instance_id: u32,
    pub category: usize,
    pub bbox: Aabb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub depth: DepthImage,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Labels are compacted instance ids; `source_id` recovers the id.
    pub mask: MaskImage,
    /// One entry per mask label, in label order.
    pub instances: Vec<FrameInstance>,
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 260.0,
        fy: 260.0,
        cx: 159.5,
        cy: 119.5,
        width: 320,
        height: 240,
    }
}

/// Casts one ray per pixel and keeps the nearest hit.
pub fn render_frame(scene: &SyntheticScene, pose: &Pose, k: &CameraIntrinsics) -> Result<SyntheticFrame> {
    k.validate()?;
    let scale = DepthImage::DEFAULT_SCALE;
    let n = k.width as usize * k.height as usize;
    let mut depth = vec![0u16; n];
    let mut raw = vec![UNMASKED_RAW; n];
    let origin = *pose.translation();
    for v in 0..k.height {
        for u in 0..k.width {
            // unit z component, so the ray parameter is the camera-frame depth
            let dir = pose.rotation() * k.ray(u as f64, v as f64);
            let mut best: Option<(f64, u32)> = None;
            for o in &scene.objects {
                if let Some(t) = o.intersect(&origin, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, o.instance_id));
                    }
                }
            }
            if let Some((t, id)) = best {
                let q = (t / scale).round();
                if q >= 1.0 && q <= u16::MAX as f64 {
                    let i = (v * k.width + u) as usize;
                    depth[i] = q as u16;
                    raw[i] = id as u16;
                }
            }
        }
    }
    let mask = MaskImage::from_raw_ids(k.width, k.height, &raw)?;
    let instances = (0..mask.mask_count())
        .map(|l| {
            let id = mask.source_id(l);
            let o = scene
                .object(id)
                .ok_or_else(|| Error::Integrity(format!("rendered unknown instance {id}")))?;
            Ok(FrameInstance {
                instance_id: id,
                category: o.category,
                bbox: o.bbox(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticFrame {
        depth: DepthImage::new(k.width, k.height, depth, scale)?,
        pose: *pose,
        intrinsics: *k,
        mask,
        instances,
    })
}

/// `n_frames` cameras evenly spaced on a circle above the scene, all looking
/// at the object centroid.
pub fn orbit_trajectory(scene: &SyntheticScene, n_frames: usize) -> Result<Vec<Pose>> {
    if n_frames == 0 {
        return Err(Error::Precondition("trajectory needs at least one frame".into()));
    }
    let target = scene.centroid();
    let half = 0.5 * (scene.room.max[0] - scene.room.min[0]).max(scene.room.max[1] - scene.room.min[1]);
    let radius = 2.5 * half + 1.0;
    let height = 0.8 * half + 1.2;
    (0..n_frames)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_frames as f64;
            let eye = Vec3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), height);
            Pose::look_at(eye, target)
        })
        .collect()
}

/// splitmix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seeded(parts: &[u64]) -> ChaCha8Rng {
    let s = parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ p));
    ChaCha8Rng::seed_from_u64(s)
}

fn unit_cube(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Fixed unit vector for an instance id, independent of the scene.
pub fn instance_signature(instance_id: u32, channels: usize) -> Vec<f64> {
    let mut rng = seeded(&[1, instance_id as u64]);
    let mut v = unit_cube(&mut rng, channels);
    normalize(&mut v);
    v
}

/// Oracle record vectors for one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOracle {
    pub instance_id: u32,
    pub bbox: Aabb,
    pub contrastive: Vec<f64>,
    pub semantic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeatures {
    /// One entry per mask label.
    pub masks: Vec<MaskOracle>,
    /// Per-point features in unprojection order; unmasked points get zeros
    /// plus noise.
    pub point_features: DMatrix<f64>,
}

/// Noise draws depend only on the scene seed, frame index and instance id,
/// so two calls differing only in `noise` perturb in the same directions.
pub fn oracle_features(
    frame: &SyntheticFrame,
    frame_index: usize,
    scene: &SyntheticScene,
    noise: f64,
    channels: usize,
) -> Result<OracleFeatures> {
    if !(noise >= 0.0) {
        return Err(Error::Precondition("noise level must be nonnegative".into()));
    }
    let k = scene.num_classes;
    let seed = scene.seed;
    let offset = |id: u32| unit_cube(&mut seeded(&[2, seed, frame_index as u64, id as u64]), channels);
    let masks = frame
        .instances
        .iter()
        .map(|inst| {
            let id = inst.instance_id;
            let mut rng = seeded(&[3, seed, frame_index as u64, id as u64]);
            let jitter: Vec<f64> = unit_cube(&mut rng, 6);
            let mut b = inst.bbox.to_array();
            for (x, j) in b.iter_mut().zip(&jitter) {
                *x += noise * j;
            }
            for a in 0..3 {
                if b[a] > b[a + 3] {
                    b.swap(a, a + 3);
                }
            }
            let mut f = instance_signature(id, channels);
            if noise > 0.0 {
                for (x, o) in f.iter_mut().zip(offset(id)) {
                    *x += noise * o;
                }
                normalize(&mut f);
            }
            let blend = noise.min(1.0);
            let mut s = vec![blend / k as f64; k];
            s[inst.category] += 1.0 - blend;
            MaskOracle {
                instance_id: id,
                bbox: Aabb::from_array(b),
                contrastive: f,
                semantic: s,
            }
        })
        .collect::<Vec<_>>();

    let cloud = frame_cloud(frame, frame_index)?;
    let mut fp = DMatrix::zeros(cloud.len(), channels);
    let bases: Vec<Vec<f64>> = frame
        .instances
        .iter()
        .map(|inst| {
            let sig = instance_signature(inst.instance_id, channels);
            let off = offset(inst.instance_id);
            sig.iter().zip(&off).map(|(s, o)| s + noise * o).collect()
        })
        .collect();
    let mut rng = seeded(&[4, seed, frame_index as u64]);
    for (p, &(u, v)) in cloud.source_pixel.iter().enumerate() {
        let label = frame.mask.get(u, v);
        for c in 0..channels {
            let base = if label >= 0 { bases[label as usize][c] } else { 0.0 };
            let jitter: f64 = rng.gen_range(-1.0..1.0);
            fp[(p, c)] = base + 0.1 * noise * jitter;
        }
    }
    Ok(OracleFeatures {
        masks,
        point_features: fp,
    })
}

/// The frame's point cloud, in the order the pipeline sees it.
pub fn frame_cloud(frame: &SyntheticFrame, frame_index: usize) -> Result<PointCloud> {
    unproject_depth(&frame.depth, &frame.intrinsics, &frame.pose, frame_index)
}

/// Perturbs valid depths by up to `noise * 5 cm`, keeping them valid.
pub fn jitter_depth(depth: &mut DepthImage, seed: u64, frame_index: usize, noise: f64) {
    if noise <= 0.0 {
        return;
    }
    let mut rng = seeded(&[5, seed, frame_index as u64]);
    let amp = noise * 0.05 / depth.depth_scale;
    for d in depth.data.iter_mut() {
        let j: f64 = rng.gen_range(-1.0..1.0);
        if *d != 0 {
            *d = (*d as f64 + amp * j).round().clamp(1.0, u16::MAX as f64) as u16;
        }
    }
}

/// Settings for a whole synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub objects: usize,
    pub frames: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub channels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            objects: 5,
            frames: 8,
            num_classes: 8,
            noise: 0.0,
            channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub config: SynthConfig,
    pub scene: SyntheticScene,
    pub frames: Vec<SyntheticFrame>,
    pub features: Vec<OracleFeatures>,
}

/// Ground-truth instance over the concatenated points of all frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtInstance {
    pub instance_id: u32,
    pub category: usize,
    pub point_ids: Vec<usize>,
}

/// Scene, orbit, rendering (with depth jitter when noisy) and oracle
/// features.
pub fn generate_sequence(cfg: SynthConfig) -> Result<SyntheticSequence> {
    let scene = generate_scene(cfg.seed, cfg.objects, cfg.num_classes)?;
    let k = default_intrinsics();
    let poses = orbit_trajectory(&scene, cfg.frames)?;
    let mut frames = Vec::with_capacity(poses.len());
    let mut features = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let mut frame = render_frame(&scene, pose, &k)?;
        jitter_depth(&mut frame.depth, cfg.seed, i, cfg.noise);
        features.push(oracle_features(&frame, i, &scene, cfg.noise, cfg.channels)?);
        frames.push(frame);
    }
    Ok(SyntheticSequence {
        config: cfg,
        scene,
        frames,
        features,
    })
}

impl SyntheticSequence {
    /// Instances that are visible in at least one frame, by instance id.
    pub fn ground_truth(&self) -> Result<Vec<GtInstance>> {
        let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        let mut offset = 0;
        for (i, frame) in self.frames.iter().enumerate() {
            let cloud = frame_cloud(frame, i)?;
            for (p, &(u, v)) in cloud.source_pixel.iter().enumerate() {
                let label = frame.mask.get(u, v);
                if label >= 0 {
                    by_id
                        .entry(frame.mask.source_id(label as usize))
                        .or_default()
                        .push(offset + p);
                }
            }
            offset += cloud.len();
        }
        Ok(by_id
            .into_iter()
            .map(|(id, point_ids)| GtInstance {
                instance_id: id,
                category: self.scene.object(id).map_or(0, |o| o.category),
                point_ids,
            })
            .collect())
    }
}
