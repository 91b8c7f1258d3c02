//! Streams a synthetic sequence through the pipeline frame by frame, printing
//! the map size and stage timings, then scores the result.

use std::time::Duration;

use instfuse::io::ModelWeights;
use instfuse::metrics::evaluate_ap;
use instfuse::pipeline::{Pipeline, RunConfig};
use instfuse::synthetic::{generate_sequence, SynthConfig};

fn main() -> instfuse::Result<()> {
    let seq = generate_sequence(SynthConfig {
        seed: 1,
        objects: 8,
        frames: 8,
        ..Default::default()
    })?;
    let mut pipeline = Pipeline::new(RunConfig::default(), ModelWeights::default())?;
    for frame in seq.to_frames() {
        let t = pipeline.process(&frame, Duration::ZERO)?;
        println!(
            "frame {}: {} points, {} detections, map has {} instances ({:.2} ms)",
            t.frame,
            t.points,
            t.detections,
            pipeline.map.records.len(),
            t.total.as_secs_f64() * 1e3
        );
    }
    let gt = seq.ground_truth_file()?;
    let r = evaluate_ap(&pipeline.export().predictions(), &gt.point_sets());
    println!("AP {:.3}  AP50 {:.3}  AP25 {:.3}", r.ap, r.ap50, r.ap25);
    Ok(())
}
