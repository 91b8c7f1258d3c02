//! Pinhole camera model, depth unprojection and axis-aligned boxes.
//!
//! Poses are camera-to-world: a camera-frame point `p_c` maps to
//! `rotation * p_c + translation` in the world frame. The camera looks down
//! its +z axis with +x to the right and +y down the image.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point to `(u, v, z)`.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        )
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    const TOLERANCE: f64 = 1e-6;

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= Self::TOLERANCE) {
            return Err(Error::config(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::config(format!("rotation determinant is {det}")));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::config("translation is not finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with world +z as the up hint.
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("eye and target coincide"))?;
        let right = forward
            .cross(&Vec3::z())
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("view direction is parallel to the up axis"))?;
        let down = forward.cross(&right);
        Pose::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    /// Row-major; zero marks a missing measurement.
    pub data: Vec<u16>,
    /// Meters per depth unit.
    pub depth_scale: f64,
}

impl DepthImage {
    pub const DEFAULT_SCALE: f64 = 0.001;

    pub fn new(width: u32, height: u32, data: Vec<u16>, depth_scale: f64) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::config(format!(
                "depth buffer has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !(depth_scale > 0.0) {
            return Err(Error::config("depth scale must be positive"));
        }
        Ok(DepthImage {
            width,
            height,
            data,
            depth_scale,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0; width as usize * height as usize],
            depth_scale: Self::DEFAULT_SCALE,
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub source_pixel: Vec<(u32, u32)>,
    pub frame_id: usize,
    /// `(width, height)` of the source image.
    pub image_size: (u32, u32),
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Back-projects every valid depth pixel into the world frame.
pub fn unproject_depth(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    pose: &Pose,
    frame_id: usize,
) -> Result<PointCloud> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::config(format!(
            "depth is {}x{} but intrinsics expect {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut cloud = PointCloud {
        frame_id,
        image_size: (depth.width, depth.height),
        ..Default::default()
    };
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d == 0 {
                continue;
            }
            let z = d as f64 * depth.depth_scale;
            let p = k.ray(u as f64, v as f64) * z;
            cloud.positions.push(pose.to_world(&p));
            cloud.source_pixel.push((u, v));
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        debug_assert!((0..3).all(|a| min[a] <= max[a]), "inverted box");
        Aabb { min, max }
    }

    pub fn from_center_half(center: Vec3, half: Vec3) -> Self {
        let c = center - half;
        let d = center + half;
        Aabb::new([c.x, c.y, c.z], [d.x, d.y, d.z])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// `[min.x, min.y, min.z, max.x, max.y, max.z]`
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2],
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Aabb::new([a[0], a[1], a[2]], [a[3], a[4], a[5]])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= other.max[a] && other.min[a] <= self.max[a])
    }

    pub fn translated(&self, t: &Vec3) -> Aabb {
        Aabb::new(
            [self.min[0] + t.x, self.min[1] + t.y, self.min[2] + t.z],
            [self.max[0] + t.x, self.max[1] + t.y, self.max[2] + t.z],
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

pub fn aabb_of_points<'a, I>(points: I) -> Result<Aabb>
where
    I: IntoIterator<Item = &'a Vec3>,
{
    let mut iter = points.into_iter();
    let first = iter.next().ok_or(Error::EmptyInput("aabb of an empty point set"))?;
    let mut min = [first.x, first.y, first.z];
    let mut max = min;
    for p in iter {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    Ok(Aabb { min, max })
}

/// IoU of two boxes. A zero-volume union yields 1 for identical boxes and 0
/// otherwise.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> f64 {
    let mut inter = 1.0;
    for ax in 0..3 {
        let lo = a.min[ax].max(b.min[ax]);
        let hi = a.max[ax].min(b.max[ax]);
        inter *= (hi - lo).max(0.0);
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Pairwise IoU matrix, `m x k` for `m` boxes in `a` and `k` in `b`.
///
/// Works on the flattened per-axis coordinate columns so the inner loop is a
/// straight sweep over contiguous slices.
pub fn aabb_iou_matrix(a: &[Aabb], b: &[Aabb]) -> nalgebra::DMatrix<f64> {
    let m = a.len();
    let k = b.len();
    let mut out = nalgebra::DMatrix::zeros(m, k);
    if m == 0 || k == 0 {
        return out;
    }
    let cols = |boxes: &[Aabb]| -> ([Vec<f64>; 3], [Vec<f64>; 3], Vec<f64>) {
        let lo = [0, 1, 2].map(|ax| boxes.iter().map(|bx| bx.min[ax]).collect());
        let hi = [0, 1, 2].map(|ax| boxes.iter().map(|bx| bx.max[ax]).collect());
        let vol = boxes.iter().map(Aabb::volume).collect();
        (lo, hi, vol)
    };
    let (b_lo, b_hi, b_vol) = cols(b);
    let mut inter = vec![0.0; k];
    for (i, ai) in a.iter().enumerate() {
        inter.iter_mut().for_each(|x| *x = 1.0);
        for ax in 0..3 {
            let (alo, ahi) = (ai.min[ax], ai.max[ax]);
            for ((x, blo), bhi) in inter.iter_mut().zip(&b_lo[ax]).zip(&b_hi[ax]) {
                *x *= (ahi.min(*bhi) - alo.max(*blo)).max(0.0);
            }
        }
        let avol = ai.volume();
        for j in 0..k {
            let union = avol + b_vol[j] - inter[j];
            out[(i, j)] = if union > 0.0 {
                (inter[j] / union).clamp(0.0, 1.0)
            } else if *ai == b[j] {
                1.0
            } else {
                0.0
            };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut ChaCha8Rng) -> Aabb {
        let c = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let h = Vec3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        Aabb::from_center_half(c, h)
    }

    #[test]
    fn principal_point_lies_on_axis() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let mut depth = DepthImage::zeros(64, 48);
        depth.data[(24 * 64 + 32) as usize] = 1000;
        let cloud = unproject_depth(&depth, &k, &Pose::identity(), 0).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_abs_diff_eq!(cloud.positions[0], Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_eq!(cloud.source_pixel[0], (32, 24));
    }

    #[test]
    fn zero_depth_is_empty() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let cloud = unproject_depth(&DepthImage::zeros(64, 48), &k, &Pose::identity(), 3).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(cloud.frame_id, 3);
    }

    #[test]
    fn off_axis_pixel() {
        // Hand-evaluated: x = (132 - 32) * 2.0 / 100 = 2.0, y = 0, z = 2.0.
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 200, 48).unwrap();
        let mut depth = DepthImage::zeros(200, 48);
        depth.data[(24 * 200 + 132) as usize] = 2000;
        let cloud = unproject_depth(&depth, &k, &Pose::identity(), 0).unwrap();
        assert_abs_diff_eq!(cloud.positions[0], Vec3::new(2.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn unproject_matches_per_pixel_oracle() {
        let k = CameraIntrinsics::new(90.0, 110.0, 15.5, 11.0, 31, 23).unwrap();
        let pose = Pose::look_at(Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.0, 0.3, 0.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<u16> = (0..31 * 23)
            .map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..5000) })
            .collect();
        let depth = DepthImage::new(31, 23, data, 0.001).unwrap();
        let cloud = unproject_depth(&depth, &k, &pose, 0).unwrap();
        let mut idx = 0;
        for v in 0..23u32 {
            for u in 0..31u32 {
                let d = depth.get(u, v);
                if d == 0 {
                    continue;
                }
                let z = d as f64 * 0.001;
                let xc = (u as f64 - 15.5) * z / 90.0;
                let yc = (v as f64 - 11.0) * z / 110.0;
                let r = pose.rotation();
                let t = pose.translation();
                let expect = Vec3::new(
                    r[(0, 0)] * xc + r[(0, 1)] * yc + r[(0, 2)] * z + t.x,
                    r[(1, 0)] * xc + r[(1, 1)] * yc + r[(1, 2)] * z + t.y,
                    r[(2, 0)] * xc + r[(2, 1)] * yc + r[(2, 2)] * z + t.z,
                );
                assert_abs_diff_eq!(cloud.positions[idx], expect, epsilon = 1e-12);
                assert_eq!(cloud.source_pixel[idx], (u, v));
                idx += 1;
            }
        }
        assert_eq!(idx, cloud.len());
    }

    #[test]
    fn unproject_round_trip() {
        let k = CameraIntrinsics::new(120.0, 120.0, 40.0, 30.0, 80, 60).unwrap();
        let pose = Pose::look_at(Vec3::new(3.0, 1.0, 2.0), Vec3::new(0.0, 0.0, 0.5)).unwrap();
        let data: Vec<u16> = (0..80 * 60).map(|i| (500 + i % 3000) as u16).collect();
        let depth = DepthImage::new(80, 60, data, 0.001).unwrap();
        let cloud = unproject_depth(&depth, &k, &pose, 0).unwrap();
        for (p, &(u, v)) in cloud.positions.iter().zip(&cloud.source_pixel) {
            let (pu, pv, pz) = k.project(&pose.to_camera(p));
            assert!((pu - u as f64).abs() < 1e-6);
            assert!((pv - v as f64).abs() < 1e-6);
            assert!((pz - depth.get(u, v) as f64 * 0.001).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let err = unproject_depth(&DepthImage::zeros(64, 47), &k, &Pose::identity(), 0).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn invalid_intrinsics_and_pose() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(Pose::new(r, Vec3::zeros()).is_err());
        r[(0, 0)] = 1.1;
        assert!(Pose::new(r, Vec3::zeros()).is_err());
    }

    #[test]
    fn look_at_is_orthonormal() {
        let pose = Pose::look_at(Vec3::new(4.0, 0.0, 1.0), Vec3::zeros()).unwrap();
        let dir = pose.rotation() * Vec3::z();
        assert_abs_diff_eq!(dir, (-Vec3::new(4.0, 0.0, 1.0)).normalize(), epsilon = 1e-12);
        // image "down" has a negative world z component
        assert!((pose.rotation() * Vec3::y()).z < 0.0);
    }

    #[test]
    fn aabb_extrema() {
        let b = aabb_of_points(&[Vec3::zeros()]).unwrap();
        assert_eq!(b, Aabb::new([0.0; 3], [0.0; 3]));
        let b = aabb_of_points(&[Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(b, Aabb::new([0.0; 3], [1.0, 2.0, 3.0]));
        assert!(matches!(
            aabb_of_points(std::iter::empty()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn aabb_random_extrema_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b = aabb_of_points(&pts).unwrap();
        for a in 0..3 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in &pts {
                if p[a] < lo {
                    lo = p[a];
                }
                if p[a] > hi {
                    hi = p[a];
                }
            }
            assert_eq!(b.min[a], lo);
            assert_eq!(b.max[a], hi);
        }
    }

    #[test]
    fn iou_analytic_cases() {
        let unit = Aabb::new([0.0; 3], [1.0; 3]);
        assert_eq!(aabb_iou(&unit, &unit), 1.0);
        let shifted = Aabb::new([0.5, 0.0, 0.0], [1.5, 1.0, 1.0]);
        assert_abs_diff_eq!(aabb_iou(&unit, &shifted), 1.0 / 3.0, epsilon = 1e-15);
        let m = aabb_iou_matrix(&[unit], &[unit, shifted]);
        assert_eq!(m[(0, 0)], 1.0);
        assert_abs_diff_eq!(m[(0, 1)], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_boxes() {
        let flat = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 0.0]);
        let point = Aabb::new([0.5; 3], [0.5; 3]);
        assert_eq!(aabb_iou(&flat, &flat), 1.0);
        assert_eq!(aabb_iou(&point, &point), 1.0);
        assert_eq!(aabb_iou(&flat, &point), 0.0);
        // flat box inside a solid one: zero intersection volume
        let unit = Aabb::new([0.0; 3], [1.0; 3]);
        assert_eq!(aabb_iou(&flat, &unit), 0.0);
        let m = aabb_iou_matrix(&[flat, point], &[flat, point, unit]);
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn iou_matrix_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Aabb> = (0..20).map(|_| random_box(&mut rng)).collect();
        let b: Vec<Aabb> = (0..30).map(|_| random_box(&mut rng)).collect();
        let m = aabb_iou_matrix(&a, &b);
        assert_eq!(m.shape(), (20, 30));
        for i in 0..20 {
            for j in 0..30 {
                assert!((m[(i, j)] - aabb_iou(&a[i], &b[j])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn iou_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a: Vec<Aabb> = (0..7).map(|_| random_box(&mut rng)).collect();
            let b: Vec<Aabb> = (0..5).map(|_| random_box(&mut rng)).collect();
            let ab = aabb_iou_matrix(&a, &b);
            let ba = aabb_iou_matrix(&b, &a);
            assert!((ab.clone() - ba.transpose()).abs().max() <= 1e-15);
            assert!(ab.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let aa = aabb_iou_matrix(&a, &a);
            for i in 0..a.len() {
                assert_eq!(aa[(i, i)], 1.0);
            }
            let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let at: Vec<Aabb> = a.iter().map(|x| x.translated(&t)).collect();
            let bt: Vec<Aabb> = b.iter().map(|x| x.translated(&t)).collect();
            assert!((aabb_iou_matrix(&at, &bt) - ab).abs().max() <= 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in proptest::array::uniform6(-2.0f64..2.0),
            b in proptest::array::uniform6(-2.0f64..2.0),
        ) {
            let mk = |v: [f64; 6]| Aabb::new(
                [v[0].min(v[3]), v[1].min(v[4]), v[2].min(v[5])],
                [v[0].max(v[3]), v[1].max(v[4]), v[2].max(v[5])],
            );
            let (a, b) = (mk(a), mk(b));
            let ab = aabb_iou(&a, &b);
            proptest::prop_assert!((0.0..=1.0).contains(&ab));
            proptest::prop_assert_eq!(ab, aabb_iou(&b, &a));
        }
    }
}
