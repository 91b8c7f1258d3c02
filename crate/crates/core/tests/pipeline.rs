use std::collections::BTreeSet;
use std::time::Duration;

use instfuse::io::{export_ply, read_sequence, ModelWeights, PlyFormat};
use instfuse::merging::similarity_matrix;
use instfuse::pipeline::{run, synth, Pipeline, RunConfig};
use instfuse::synthetic::{generate_sequence, SynthConfig};

fn config(seed: u64, objects: usize, frames: usize) -> SynthConfig {
    SynthConfig {
        seed,
        objects,
        frames,
        ..Default::default()
    }
}

#[test]
fn written_sequence_reads_back_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = synth(tmp.path(), config(4, 4, 3)).unwrap();
    let expected = seq.to_frames();
    let frames: Vec<_> = read_sequence(tmp.path(), 0.001).unwrap().map(Result::unwrap).collect();
    assert_eq!(frames.len(), expected.len());
    for (got, want) in frames.iter().zip(&expected) {
        assert_eq!(got.index, want.index);
        assert_eq!(got.depth.data, want.depth.data);
        assert_eq!(got.mask.labels(), want.mask.labels());
        assert_eq!(got.features, want.features);
        assert_eq!(got.semantics, want.semantics);
        assert_eq!(got.intrinsics, want.intrinsics);
        let d = got.pose.to_world(&instfuse::geometry::Vec3::new(1.0, 2.0, 3.0))
            - want.pose.to_world(&instfuse::geometry::Vec3::new(1.0, 2.0, 3.0));
        assert!(d.norm() < 1e-9);
    }
}

#[test]
fn stage_times_add_up_to_the_frame_total() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), config(5, 6, 4)).unwrap();
    let out = run(tmp.path(), RunConfig::default(), ModelWeights::default()).unwrap();
    assert_eq!(out.timings.len(), 4);
    for t in &out.timings {
        let sum = t.stage_sum().as_secs_f64();
        let total = t.total.as_secs_f64();
        assert!(sum <= total * 1.05 && sum >= total * 0.95, "stages {sum} vs total {total}");
    }
}

#[test]
fn overrides_show_up_in_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), config(6, 3, 2)).unwrap();
    let cfg = RunConfig {
        prune_threshold: 1.5,
        seed: 11,
        ..Default::default()
    };
    let out = run(tmp.path(), cfg, ModelWeights::default()).unwrap();
    let c = &out.export.provenance["config"];
    assert_eq!(c["prune_threshold"], 1.5);
    assert_eq!(c["seed"], 11);
    assert_eq!(c["mask_threshold"], 0.5);
}

#[test]
fn same_object_scores_at_least_two_across_frames() {
    let seq = generate_sequence(config(8, 6, 4)).unwrap();
    let frames = seq.to_frames();
    for pair in frames.windows(2) {
        let mut snapshots = Vec::new();
        for f in pair {
            let mut p = Pipeline::new(RunConfig::default(), ModelWeights::default()).unwrap();
            p.process(f, Duration::ZERO).unwrap();
            snapshots.push(p.map.records);
        }
        let sim = similarity_matrix(&snapshots[0], &snapshots[1]).unwrap();
        let ids = |i: usize| -> BTreeSet<u32> { seq.frames[pair[i].index].instances.iter().map(|x| x.instance_id).collect() };
        let shared = ids(0).intersection(&ids(1)).count();
        let strong = (0..sim.nrows())
            .filter(|&r| (0..sim.ncols()).any(|c| sim[(r, c)] >= 2.0))
            .count();
        assert_eq!(strong, shared, "frames {}-{}", pair[0].index, pair[1].index);
    }
}

/// Minimal binary PLY reader, independent of the writer.
fn parse_binary_ply(bytes: &[u8]) -> Vec<([f32; 3], [u8; 3])> {
    let end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    let header = std::str::from_utf8(&bytes[..end]).unwrap();
    assert!(header.starts_with("ply\nformat binary_little_endian 1.0\n"));
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .unwrap()
        .parse()
        .unwrap();
    let body = &bytes[end..];
    assert_eq!(body.len(), n * 15);
    body.chunks(15)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap());
            ([f(0), f(1), f(2)], [c[12], c[13], c[14]])
        })
        .collect()
}

#[test]
fn ply_points_match_positions_and_instances() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), config(3, 5, 3)).unwrap();
    let out = run(tmp.path(), RunConfig::default(), ModelWeights::default()).unwrap();
    let path = tmp.path().join("out.ply");
    export_ply(&path, &out.map, &out.positions, PlyFormat::BinaryLittleEndian).unwrap();
    let vertices = parse_binary_ply(&std::fs::read(&path).unwrap());
    assert_eq!(vertices.len(), out.positions.len());
    for (v, p) in vertices.iter().zip(&out.positions) {
        assert_eq!(v.0, [p.x as f32, p.y as f32, p.z as f32]);
    }
    // every instance gets a single color
    for r in &out.map.records {
        let colors: BTreeSet<[u8; 3]> = r.point_ids.iter().map(|&i| vertices[i].1).collect();
        assert_eq!(colors.len(), 1);
    }
}
