//! Generates a synthetic sequence and writes it as a frame directory that the
//! `instfuse run` command can consume.
//!
//! cargo run --example synthetic -- /tmp/seq

use std::path::PathBuf;

use instfuse::pipeline::synth;
use instfuse::synthetic::SynthConfig;

fn main() -> instfuse::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("instfuse-seq"), PathBuf::from);
    std::fs::create_dir_all(&dir).map_err(|e| instfuse::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let seq = synth(
        &dir,
        SynthConfig {
            seed: 3,
            objects: 6,
            frames: 10,
            noise: 0.05,
            ..Default::default()
        },
    )?;
    for o in &seq.scene.objects {
        println!("object {} (class {}): {:?} at {:.2?}", o.instance_id, o.category, o.shape, o.center.as_slice());
    }
    for (i, f) in seq.frames.iter().enumerate() {
        let valid = f.depth.data.iter().filter(|&&d| d != 0).count();
        println!("frame {i}: {valid} depth pixels, {} visible objects", f.instances.len());
    }
    println!("wrote {}", dir.display());
    Ok(())
}
