//! PLY and JSON exports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::merging::InstanceMap;
use crate::metrics::Prediction;
use crate::synthetic::GtInstance;

pub const UNASSIGNED_COLOR: [u8; 3] = [128, 128, 128];

const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [255, 255, 255],
];

pub fn instance_color(id: Option<u64>) -> [u8; 3] {
    match id {
        Some(i) => PALETTE[(i % PALETTE.len() as u64) as usize],
        None => UNASSIGNED_COLOR,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

/// Point cloud colored by instance, as PLY bytes.
pub fn ply_bytes(map: &InstanceMap, positions: &[Vec3], format: PlyFormat) -> Result<Vec<u8>> {
    if positions.len() != map.point_count {
        return Err(Error::config(format!(
            "map covers {} points but {} positions were given",
            map.point_count,
            positions.len()
        )));
    }
    let labels = map.point_labels();
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {name} 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        positions.len()
    )
    .into_bytes();
    let mut line = String::new();
    for (p, l) in positions.iter().zip(&labels) {
        let c = instance_color(*l);
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        match format {
            PlyFormat::Ascii => {
                line.clear();
                writeln!(line, "{} {} {} {} {} {}", xyz[0], xyz[1], xyz[2], c[0], c[1], c[2]).unwrap();
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in xyz {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&c);
            }
        }
    }
    Ok(out)
}

pub fn export_ply(path: &Path, map: &InstanceMap, positions: &[Vec3], format: PlyFormat) -> Result<()> {
    let bytes = ply_bytes(map, positions, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedInstance {
    pub instance_id: u64,
    pub n: u32,
    #[serde(rename = "box")]
    pub bbox: Aabb,
    pub semantic_argmax: Option<usize>,
    pub confidence: f64,
    pub point_count: usize,
    pub point_ids: Vec<usize>,
}

/// JSON form of an instance map plus the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub provenance: serde_json::Value,
    pub frames: usize,
    pub point_count: usize,
    pub instances: Vec<ExportedInstance>,
}

impl MapExport {
    pub fn new(map: &InstanceMap, provenance: serde_json::Value) -> Self {
        MapExport {
            provenance,
            frames: map.frames,
            point_count: map.point_count,
            instances: map
                .records
                .iter()
                .map(|r| ExportedInstance {
                    instance_id: r.instance_id,
                    n: r.n,
                    bbox: r.bbox,
                    semantic_argmax: r.semantic_argmax(),
                    confidence: r.confidence,
                    point_count: r.point_ids.len(),
                    point_ids: r.point_ids.clone(),
                })
                .collect(),
        }
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        self.instances
            .iter()
            .map(|i| Prediction {
                point_ids: i.point_ids.clone(),
                confidence: i.confidence,
            })
            .collect()
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        // serde_json reports line/column; convert to a byte offset
        let offset: usize = bytes
            .split(|&b| b == b'\n')
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::parse(path, offset as u64, e.to_string())
    })
}

/// Ground-truth file written next to a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub point_count: usize,
    pub instances: Vec<GtInstance>,
}

impl GroundTruth {
    pub fn point_sets(&self) -> Vec<Vec<usize>> {
        self.instances.iter().map(|g| g.point_ids.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merging::InstanceRecord;

    fn two_instance_map() -> InstanceMap {
        let rec = |id: u64, pts: Vec<usize>| InstanceRecord {
            point_ids: pts,
            bbox: Aabb::new([0.0; 3], [1.0; 3]),
            contrastive: vec![1.0],
            semantic: vec![0.0, 1.0],
            n: 1,
            confidence: 0.5,
            instance_id: id,
        };
        InstanceMap {
            records: vec![rec(0, vec![0, 1]), rec(1, vec![3])],
            point_count: 4,
            next_instance_id: 2,
            frames: 1,
        }
    }

    #[test]
    fn empty_map_ply() {
        let bytes = ply_bytes(&InstanceMap::new(), &[], PlyFormat::Ascii).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
    }

    #[test]
    fn two_instances_two_colors() {
        let map = two_instance_map();
        let pos: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.5, -1.25)).collect();
        let text = String::from_utf8(ply_bytes(&map, &pos, PlyFormat::Ascii).unwrap()).unwrap();
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 4);
        let colors: std::collections::BTreeSet<String> = body
            .iter()
            .map(|l| l.split(' ').skip(3).collect::<Vec<_>>().join(" "))
            .filter(|c| c != "128 128 128")
            .collect();
        assert_eq!(colors.len(), 2);
        assert!(body[2].ends_with("128 128 128"));
        assert!(body[0].starts_with("0 0.5 -1.25 "));

        let bin = ply_bytes(&map, &pos, PlyFormat::BinaryLittleEndian).unwrap();
        let header_end = bin.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(bin.len() - header_end, 4 * 15);
    }

    #[test]
    fn json_records() {
        let m = MapExport::new(&two_instance_map(), serde_json::json!({"seed": 1}));
        let s = to_json(&m);
        let back: MapExport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.instances[0].semantic_argmax, Some(1));
        assert_eq!(back.instances[1].point_count, 1);
        assert!(s.contains("\"box\""));
    }

    #[test]
    fn bad_json_has_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, "{\n  \"a\": ?\n}").unwrap();
        match read_json::<serde_json::Value>(&p).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 9),
            e => panic!("{e}"),
        }
    }
}
