//! Runs the three-layer masked decoder with random weights on one frame and
//! suppresses duplicate masks.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use instfuse::decoder::{decode, init_queries, mask_nms, DecodeOptions, DecoderWeights};
use instfuse::geometry::unproject_depth;
use instfuse::superpoint::{geometric_pool, lift_masks, NormalizeOptions, PoolDenominator, ShapeWeights, SuperpointSet};
use instfuse::synthetic::{default_intrinsics, generate_scene, oracle_features, orbit_trajectory, render_frame};

fn main() -> instfuse::Result<()> {
    let c = 32;
    let scene = generate_scene(3, 6, 8)?;
    let k = default_intrinsics();
    let frame = render_frame(&scene, &orbit_trajectory(&scene, 1)?[0], &k)?;
    let cloud = unproject_depth(&frame.depth, &k, &frame.pose, 0)?;
    let sp = SuperpointSet::build(&cloud, &lift_masks(&frame.mask, &cloud)?, NormalizeOptions::default())?;
    let features: DMatrix<f64> = oracle_features(&frame, 0, &scene, 0.0, c)?.point_features;
    let shape = ShapeWeights::compute(&sp, None, c)?;
    let sp_features = geometric_pool(&features, &sp, &shape, PoolDenominator::PointCount)?;

    let weights = DecoderWeights::random(c, &mut ChaCha8Rng::seed_from_u64(1));
    let queries = init_queries(&sp_features, 1.0, 0)?;
    let (refined, masks) = decode(&queries, &sp_features, &features, &sp, &shape, &weights, DecodeOptions::default())?;
    println!("{} superpoints -> {} queries after {} layers", sp.len(), refined.len(), refined.layer);
    for (q, m) in masks.point_masks.iter().enumerate() {
        let on = m.iter().filter(|&&b| b).count();
        println!("query {q}: {on} points, score {:.3}", masks.scores[q]);
    }
    let kept = mask_nms(&masks, 0.6)?;
    println!("{} masks survive suppression", kept.len());
    Ok(())
}
