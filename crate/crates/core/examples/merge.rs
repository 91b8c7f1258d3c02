//! Builds two hand-made frames of instance records and merges them, printing
//! the similarity matrix and the resulting map.

use instfuse::geometry::{Aabb, Vec3};
use instfuse::merging::{prune, similarity_matrix, InstanceMap, InstanceRecord, MergeOptions};

fn record(points: std::ops::Range<usize>, center: [f64; 3], signature: [f64; 3], class: usize) -> InstanceRecord {
    let mut semantic = vec![0.0; 4];
    semantic[class] = 1.0;
    InstanceRecord {
        point_ids: points.collect(),
        bbox: Aabb::from_center_half(Vec3::from(center), Vec3::new(0.3, 0.3, 0.3)),
        contrastive: signature.to_vec(),
        semantic,
        n: 1,
        confidence: 0.9,
        instance_id: 0,
    }
}

fn main() -> instfuse::Result<()> {
    let opts = MergeOptions::default();
    let mut map = InstanceMap::new();
    map.merge_step(
        vec![
            record(0..40, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1),
            record(40..90, [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], 2),
        ],
        100,
        opts,
    )?;

    // second view: the chair moved slightly, a new lamp appears
    let cur = vec![
        record(100..130, [2.1, 0.0, 0.05], [0.1, 0.99, 0.0], 2),
        record(130..160, [-2.0, 1.0, 0.0], [0.0, 0.0, 1.0], 3),
    ];
    let sim = similarity_matrix(&map.records, &cur)?;
    println!("similarity:\n{sim:.3}");
    println!("after pruning at {}:\n{:.3}", opts.prune_threshold, prune(&sim, opts.prune_threshold));

    let timing = map.merge_step(cur, 60, opts)?;
    println!("merge took {:?}", timing.similarity + timing.matching + timing.updating);
    for r in &map.records {
        println!(
            "instance {}: {} points, seen {} times, center {:.2?}",
            r.instance_id,
            r.point_ids.len(),
            r.n,
            r.bbox.center().as_slice()
        );
    }
    Ok(())
}
