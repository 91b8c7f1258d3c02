//! Runs a frame directory and writes the map as JSON and as an instance
//! colored PLY.
//!
//! cargo run --example export -- /tmp/seq

use std::path::PathBuf;

use instfuse::io::{export_ply, write_json, ModelWeights, PlyFormat};
use instfuse::pipeline::{run, synth, RunConfig};
use instfuse::synthetic::SynthConfig;

fn main() -> instfuse::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            let d = std::env::temp_dir().join("instfuse-export");
            std::fs::create_dir_all(&d).map_err(|e| instfuse::Error::Io {
                path: d.clone(),
                source: e,
            })?;
            synth(&d, SynthConfig::default())?;
            d
        }
    };
    let out = run(&dir, RunConfig::default(), ModelWeights::default())?;
    let json = dir.join("map.json");
    let ply = dir.join("map.ply");
    write_json(&json, &out.export)?;
    export_ply(&ply, &out.map, &out.positions, PlyFormat::BinaryLittleEndian)?;
    println!("{} instances over {} points", out.map.records.len(), out.map.point_count);
    println!("wrote {} and {}", json.display(), ply.display());
    Ok(())
}
