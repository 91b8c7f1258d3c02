//! Frame directories.
//!
//! ```text
//! intrinsics.txt      fx fy cx cy width height
//! pose_00000.txt      4x4 camera-to-world matrix, row-major
//! depth_00000.png     16-bit grayscale depth units
//! mask_00000.png      16-bit instance ids, 65535 = unmasked
//! feat_00000.bin      optional: u32 N, u32 C, then N*C f32 (little-endian)
//! sem_00000.txt       optional: one "<mask id> <category>" pair per line
//! ```
//!
//! Per-point features are listed in unprojection order: valid depth pixels,
//! row by row.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthImage, Pose, Vec3};
use crate::superpoint::MaskImage;

/// One time step read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub depth: DepthImage,
    pub mask: MaskImage,
    /// `N x C`, one row per valid depth pixel.
    pub features: Option<DMatrix<f64>>,
    /// Category per raw mask id.
    pub semantics: Option<BTreeMap<u32, usize>>,
}

impl Frame {
    /// Category of each compact mask label, where known.
    pub fn mask_categories(&self) -> Vec<Option<usize>> {
        (0..self.mask.mask_count())
            .map(|l| {
                self.semantics
                    .as_ref()
                    .and_then(|s| s.get(&self.mask.source_id(l)).copied())
            })
            .collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated tokens with their byte offsets.
fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split_ascii_whitespace()
        .map(move |t| (t.as_ptr() as usize - text.as_ptr() as usize, t))
}

fn text_of<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|e| Error::parse(path, e.valid_up_to() as u64, "not valid UTF-8"))
}

fn numbers<T: std::str::FromStr>(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<T>> {
    let text = text_of(path, bytes)?;
    let mut out = Vec::with_capacity(expected);
    for (offset, tok) in tokens(text) {
        if out.len() == expected {
            return Err(Error::parse(path, offset as u64, format!("expected {expected} values, found more")));
        }
        let v = tok
            .parse()
            .map_err(|_| Error::parse(path, offset as u64, format!("cannot parse {tok:?} as a number")))?;
        out.push(v);
    }
    if out.len() < expected {
        return Err(Error::parse(
            path,
            bytes.len() as u64,
            format!("expected {expected} values, found {}", out.len()),
        ));
    }
    Ok(out)
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let bytes = read(path)?;
    let v: Vec<f64> = numbers(path, &bytes, 6)?;
    for (i, &d) in v[4..].iter().enumerate() {
        if d.fract() != 0.0 || d < 1.0 || d > u32::MAX as f64 {
            return Err(Error::parse(path, 0, format!("image dimension {} is not a positive integer", 4 + i)));
        }
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as u32, v[5] as u32)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    write(path, text.as_bytes())
}

pub fn read_pose(path: &Path) -> Result<Pose> {
    let bytes = read(path)?;
    let v: Vec<f64> = numbers(path, &bytes, 16)?;
    if v[12..] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::parse(path, 0, "last row of a pose must be 0 0 0 1"));
    }
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    Pose::new(r, Vec3::new(v[3], v[7], v[11]))
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    let r = pose.rotation();
    let t = pose.translation();
    let mut text = String::new();
    for i in 0..3 {
        text.push_str(&format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]));
    }
    text.push_str("0 0 0 1\n");
    write(path, text.as_bytes())
}

/// Reads a 16-bit grayscale PNG as `(width, height, values)`.
pub fn read_png16(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let bytes = read(path)?;
    let mut cursor = Cursor::new(bytes.as_slice());
    let decoded = (|| {
        let mut reader = png::Decoder::new(&mut cursor).read_info()?;
        let info = reader.info();
        let (w, h) = (info.width, info.height);
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
            return Ok(Err(format!(
                "expected 16-bit grayscale, found {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        reader.next_frame(&mut buf)?;
        let values = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        Ok(Ok((w, h, values)))
    })();
    match decoded {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(msg)) => Err(Error::parse(path, 0, msg)),
        Err::<_, png::DecodingError>(e) => Err(Error::parse(path, cursor.position(), e.to_string())),
    }
}

pub fn write_png16(path: &Path, width: u32, height: u32, values: &[u16]) -> Result<()> {
    let mut out = Vec::new();
    let encoded = (|| {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        w.write_image_data(&bytes)?;
        w.finish()
    })();
    encoded.map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    write(path, &out)
}

pub fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = read(path)?;
    if bytes.len() < 8 {
        return Err(Error::parse(path, bytes.len() as u64, "truncated header"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = n.checked_mul(c).and_then(|x| x.checked_mul(4)).and_then(|x| x.checked_add(8));
    if expected != Some(bytes.len()) {
        return Err(Error::parse(
            path,
            bytes.len().min(8) as u64,
            format!("header declares {n}x{c} floats but the payload has {} bytes", bytes.len() - 8),
        ));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    Ok(DMatrix::from_row_iterator(n, c, values))
}

/// Writes features as f32; values are rounded.
pub fn write_features(path: &Path, features: &DMatrix<f64>) -> Result<()> {
    let (n, c) = features.shape();
    let mut out = Vec::with_capacity(8 + 4 * n * c);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for i in 0..n {
        for j in 0..c {
            out.extend_from_slice(&(features[(i, j)] as f32).to_le_bytes());
        }
    }
    write(path, &out)
}

pub fn read_semantics(path: &Path) -> Result<BTreeMap<u32, usize>> {
    let bytes = read(path)?;
    let text = text_of(path, &bytes)?;
    let toks: Vec<(usize, &str)> = tokens(text).collect();
    if !toks.len().is_multiple_of(2) {
        return Err(Error::parse(path, bytes.len() as u64, "odd number of values"));
    }
    let mut map = BTreeMap::new();
    for pair in toks.chunks(2) {
        let id = pair[0]
            .1
            .parse()
            .map_err(|_| Error::parse(path, pair[0].0 as u64, "bad mask id"))?;
        let cat = pair[1]
            .1
            .parse()
            .map_err(|_| Error::parse(path, pair[1].0 as u64, "bad category"))?;
        map.insert(id, cat);
    }
    Ok(map)
}

pub fn write_semantics(path: &Path, semantics: &BTreeMap<u32, usize>) -> Result<()> {
    let text: String = semantics.iter().map(|(id, c)| format!("{id} {c}\n")).collect();
    write(path, text.as_bytes())
}

pub fn frame_path(dir: &Path, stem: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{index:05}.{ext}"))
}

const FRAME_FILES: [(&str, &str, bool); 5] = [
    ("pose", "txt", true),
    ("depth", "png", true),
    ("mask", "png", true),
    ("feat", "bin", false),
    ("sem", "txt", false),
];

fn frame_index(name: &str) -> Option<usize> {
    FRAME_FILES.iter().find_map(|(stem, ext, _)| {
        let rest = name.strip_prefix(stem)?.strip_prefix('_')?;
        let digits = rest.strip_suffix(ext)?.strip_suffix('.')?;
        (digits.len() >= 5 && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok())?
    })
}

/// Frames of a directory, yielded in index order.
#[derive(Debug)]
pub struct SequenceReader {
    dir: PathBuf,
    intrinsics: Option<CameraIntrinsics>,
    depth_scale: f64,
    next: usize,
    len: usize,
}

/// Opens a frame directory. Every index from 0 up to the highest one present
/// must have a pose, depth and mask file.
pub fn read_sequence(dir: &Path, depth_scale: f64) -> Result<SequenceReader> {
    if !(depth_scale > 0.0) {
        return Err(Error::config("depth scale must be positive"));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut present: BTreeSet<usize> = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(frame_index) {
            present.insert(i);
        }
    }
    let len = present.last().map_or(0, |&m| m + 1);
    for i in 0..len {
        for (stem, ext, required) in FRAME_FILES {
            if required && !frame_path(dir, stem, i, ext).is_file() {
                return Err(Error::Gap { index: i });
            }
        }
    }
    let intrinsics = if len > 0 {
        Some(read_intrinsics(&dir.join("intrinsics.txt"))?)
    } else {
        None
    };
    Ok(SequenceReader {
        dir: dir.to_path_buf(),
        intrinsics,
        depth_scale,
        next: 0,
        len,
    })
}

impl SequenceReader {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn intrinsics(&self) -> Option<&CameraIntrinsics> {
        self.intrinsics.as_ref()
    }

    pub fn read_frame(&self, index: usize) -> Result<Frame> {
        let k = self.intrinsics.ok_or(Error::EmptyInput("sequence has no frames"))?;
        let dir = &self.dir;
        let pose = read_pose(&frame_path(dir, "pose", index, "txt"))?;
        let dims = |path: &Path, w: u32, h: u32| {
            if (w, h) != (k.width, k.height) {
                return Err(Error::config(format!(
                    "{} is {w}x{h} but intrinsics expect {}x{}",
                    path.display(),
                    k.width,
                    k.height
                )));
            }
            Ok(())
        };
        let depth_path = frame_path(dir, "depth", index, "png");
        let (w, h, data) = read_png16(&depth_path)?;
        dims(&depth_path, w, h)?;
        let depth = DepthImage::new(w, h, data, self.depth_scale)?;
        let mask_path = frame_path(dir, "mask", index, "png");
        let (w, h, raw) = read_png16(&mask_path)?;
        dims(&mask_path, w, h)?;
        let mask = MaskImage::from_raw_ids(w, h, &raw)?;
        let feat_path = frame_path(dir, "feat", index, "bin");
        let features = if feat_path.is_file() {
            let f = read_features(&feat_path)?;
            let valid = depth.data.iter().filter(|&&d| d != 0).count();
            if f.nrows() != valid {
                return Err(Error::config(format!(
                    "{} has {} rows but the depth image has {valid} valid pixels",
                    feat_path.display(),
                    f.nrows()
                )));
            }
            Some(f)
        } else {
            None
        };
        let sem_path = frame_path(dir, "sem", index, "txt");
        let semantics = if sem_path.is_file() {
            Some(read_semantics(&sem_path)?)
        } else {
            None
        };
        Ok(Frame {
            index,
            intrinsics: k,
            pose,
            depth,
            mask,
            features,
            semantics,
        })
    }
}

impl Iterator for SequenceReader {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.len {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.read_frame(i).map_err(|e| Error::Frame {
            frame: i,
            source: Box::new(e),
        }))
    }
}

/// Writes one frame; the intrinsics go to `intrinsics.txt`.
pub fn write_frame(dir: &Path, frame: &Frame) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let i = frame.index;
    write_intrinsics(&dir.join("intrinsics.txt"), &frame.intrinsics)?;
    write_pose(&frame_path(dir, "pose", i, "txt"), &frame.pose)?;
    let d = &frame.depth;
    write_png16(&frame_path(dir, "depth", i, "png"), d.width, d.height, &d.data)?;
    let m = &frame.mask;
    write_png16(&frame_path(dir, "mask", i, "png"), m.width, m.height, &m.to_raw_ids())?;
    if let Some(f) = &frame.features {
        write_features(&frame_path(dir, "feat", i, "bin"), f)?;
    }
    if let Some(s) = &frame.semantics {
        write_semantics(&frame_path(dir, "sem", i, "txt"), s)?;
    }
    Ok(())
}
