//! Lifts 2D masks to superpoints and pools point features onto them, with and
//! without learned pooling weights.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use instfuse::geometry::unproject_depth;
use instfuse::nn::{Linear, Mlp};
use instfuse::superpoint::{
    geometric_pool, lift_masks, GeoPoolWeights, NormalizeOptions, PoolDenominator, ShapeWeights, SuperpointSet,
};
use instfuse::synthetic::{default_intrinsics, generate_scene, orbit_trajectory, render_frame};

fn linear(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear {
    let w = DMatrix::from_fn(o, i, |_, _| rng.gen_range(-0.3..0.3));
    Linear::new(w, DVector::zeros(o)).unwrap()
}

fn main() -> instfuse::Result<()> {
    let scene = generate_scene(2, 5, 8)?;
    let k = default_intrinsics();
    let pose = orbit_trajectory(&scene, 1)?[0];
    let frame = render_frame(&scene, &pose, &k)?;
    let cloud = unproject_depth(&frame.depth, &k, &frame.pose, 0)?;
    let index = lift_masks(&frame.mask, &cloud)?;
    let sp = SuperpointSet::build(&cloud, &index, NormalizeOptions::default())?;
    for (i, s) in sp.superpoints.iter().enumerate() {
        println!("superpoint {i}: {} points around {:.2?}", s.points.len(), s.center.as_slice());
    }

    // positions as features make the pooled rows easy to read
    let c = 3;
    let features = DMatrix::from_fn(cloud.len(), c, |r, j| cloud.positions[r][j]);
    let mean = geometric_pool(&features, &sp, &ShapeWeights::compute(&sp, None, c)?, PoolDenominator::PointCount)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let geo = GeoPoolWeights::new(
        Mlp::new(vec![linear(&mut rng, 3, 16), linear(&mut rng, 16, c)])?,
        Mlp::single(linear(&mut rng, 2 * c, 1)),
    )?;
    let shape = ShapeWeights::compute(&sp, Some(&geo), c)?;
    let learned = geometric_pool(&features, &sp, &shape, PoolDenominator::WeightSum)?;
    for i in 0..sp.len() {
        println!(
            "superpoint {i}: mean {:.3?}  learned {:.3?}",
            mean.row(i).iter().collect::<Vec<_>>(),
            learned.row(i).iter().collect::<Vec<_>>()
        );
    }
    Ok(())
}
