//! Bit-exact file formats: tensors, checkpoints, manifests, CSV reports and
//! PGM/PPM heatmap renderings.
//!
//! Tensor payloads are stored as little-endian IEEE-754 32-bit values and
//! widened to 64-bit on load. All writers go through a temp-file-then-rename
//! step so concurrent readers never observe a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::localization::BoxPx;
use crate::metrics::MetricRow;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"CCAMTNSR";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCAMCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

/// Quantize through 32-bit storage precision.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut file = fs::File::create(tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Byte cursor with truncation-aware reads.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "wanted {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn encode_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn decode_tensor(cursor: &mut Cursor) -> Result<Tensor> {
    let magic = cursor.take(8, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            expected: "CCAMTNSR",
            found: magic.to_vec(),
        });
    }
    let version = cursor.u32("tensor version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let dtype = cursor.u32("tensor dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnknownDtype(dtype));
    }
    let rank = cursor.u32("tensor rank")? as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Shape(format!("tensor rank {rank} outside 1..=4")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let extent = cursor.u32("tensor extent")? as usize;
        if extent == 0 {
            return Err(Error::Shape("zero extent in stored tensor".into()));
        }
        shape.push(extent);
    }
    let count: usize = shape.iter().product();
    let payload = cursor.take(4 * count, "tensor payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

/// Write one tensor file (32-bit storage precision).
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(24 + 4 * t.len());
    encode_tensor(&mut bytes, t);
    atomic_write(path, &bytes)
}

/// Load one tensor file, widening to 64-bit in memory.
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cursor = Cursor::new(&bytes);
    let t = decode_tensor(&mut cursor)?;
    if cursor.remaining() != 0 {
        return Err(Error::invalid(format!(
            "{} trailing bytes after tensor payload",
            cursor.remaining()
        )));
    }
    Ok(t)
}

/// Named parameter tensors plus string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Write a checkpoint container: entries in order, then a key=value block.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &ckpt.entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }
    let mut meta_block = String::new();
    for (key, value) in &ckpt.metadata {
        if key.contains('\n') || value.contains('\n') || key.contains('=') {
            return Err(Error::invalid(format!(
                "metadata entry {key:?} contains reserved characters"
            )));
        }
        meta_block.push_str(key);
        meta_block.push('=');
        meta_block.push_str(value);
        meta_block.push('\n');
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.entries {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        encode_tensor(&mut bytes, tensor);
    }
    bytes.extend_from_slice(&(meta_block.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta_block.as_bytes());
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut cursor = Cursor::new(&bytes);
    let magic = cursor.take(8, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: "CCAMCKPT",
            found: magic.to_vec(),
        });
    }
    let version = cursor.u32("checkpoint version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let count = cursor.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = cursor.u32("name length")? as usize;
        let name_bytes = cursor.take(name_len, "entry name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::invalid("entry name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let tensor = decode_tensor(&mut cursor)?;
        entries.push((name, tensor));
    }
    let meta_len = cursor.u32("metadata length")? as usize;
    let meta_bytes = cursor.take(meta_len, "metadata block")?;
    if cursor.remaining() != 0 {
        return Err(Error::invalid(format!(
            "{} trailing bytes after metadata",
            cursor.remaining()
        )));
    }
    let meta_str =
        std::str::from_utf8(meta_bytes).map_err(|_| Error::invalid("metadata is not UTF-8"))?;
    let mut metadata = BTreeMap::new();
    for line in meta_str.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("metadata line {line:?} lacks '='")))?;
        metadata.insert(key.to_string(), value.to_string());
    }
    Ok(Checkpoint { entries, metadata })
}

/// One dataset-manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub tensor_path: String,
    pub label: usize,
    pub boxes: Vec<BoxPx>,
}

/// Write `id<TAB>path<TAB>label<TAB>x0,y0,x1,y1[;...]` lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for entry in entries {
        if entry.id.contains('\t') || entry.tensor_path.contains('\t') {
            return Err(Error::invalid("manifest fields must not contain tabs"));
        }
        if entry.boxes.is_empty() {
            return Err(Error::invalid(format!(
                "manifest entry {:?} has no boxes",
                entry.id
            )));
        }
        let boxes = entry
            .boxes
            .iter()
            .map(|b| format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1))
            .collect::<Vec<_>>()
            .join(";");
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            entry.id, entry.tensor_path, entry.label, boxes
        ));
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fail = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(fail(format!("expected 4 tab fields, got {}", fields.len())));
        }
        let label: usize = fields[2]
            .parse()
            .map_err(|_| fail(format!("bad label {:?}", fields[2])))?;
        let mut boxes = Vec::new();
        for spec in fields[3].split(';') {
            let coords: Vec<&str> = spec.split(',').collect();
            if coords.len() != 4 {
                return Err(fail(format!("box {spec:?} needs 4 coordinates")));
            }
            let mut parsed = [0usize; 4];
            for (slot, raw) in parsed.iter_mut().zip(&coords) {
                *slot = raw
                    .parse()
                    .map_err(|_| fail(format!("bad box coordinate {raw:?}")))?;
            }
            boxes.push(
                BoxPx::new(parsed[0], parsed[1], parsed[2], parsed[3])
                    .map_err(|e| fail(e.to_string()))?,
            );
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            tensor_path: fields[1].to_string(),
            label,
            boxes,
        });
    }
    Ok(entries)
}

/// CSV header of metric reports.
pub const REPORT_HEADER: &str = "metric,value,count_correct,count_total";

fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn csv_split(line: &str, line_no: usize) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    current.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if current.is_empty() => quoted = true,
            ',' if !quoted => {
                fields.push(std::mem::take(&mut current));
            }
            c => current.push(c),
        }
    }
    if quoted {
        return Err(Error::Parse {
            line: line_no,
            message: "unterminated quote".into(),
        });
    }
    fields.push(current);
    Ok(fields)
}

/// Write the metric report as CSV.
pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            csv_quote(&row.metric),
            row.error_pct,
            row.correct,
            row.total
        ));
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == REPORT_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad header {header:?}"),
            })
        }
        None => {
            return Err(Error::Truncated("empty report".into()));
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields = csv_split(line, line_no)?;
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            line: line_no,
            message: format!("bad {what}"),
        };
        rows.push(MetricRow {
            metric: fields[0].clone(),
            error_pct: fields[1].parse().map_err(|_| parse_err("value"))?,
            correct: fields[2].parse().map_err(|_| parse_err("count_correct"))?,
            total: fields[3].parse().map_err(|_| parse_err("count_total"))?,
        });
    }
    Ok(rows)
}

/// Rendering style for heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapStyle {
    /// Binary PGM (P5), 8-bit gray.
    Gray,
    /// Binary PPM (P6) with a blue-to-red piecewise-linear colormap.
    Color,
}

impl std::str::FromStr for HeatmapStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(HeatmapStyle::Gray),
            "color" => Ok(HeatmapStyle::Color),
            other => Err(Error::invalid(format!(
                "unknown style {other:?} (expected gray|color)"
            ))),
        }
    }
}

impl HeatmapStyle {
    pub fn extension(&self) -> &'static str {
        match self {
            HeatmapStyle::Gray => "pgm",
            HeatmapStyle::Color => "ppm",
        }
    }
}

/// Blue → cyan → yellow → red, linear between the four anchors.
fn colormap(v: f64) -> [u8; 3] {
    const ANCHORS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 255.0]),
        (1.0 / 3.0, [0.0, 255.0, 255.0]),
        (2.0 / 3.0, [255.0, 255.0, 0.0]),
        (1.0, [255.0, 0.0, 0.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    let mut i = 0;
    while i + 2 < ANCHORS.len() && v > ANCHORS[i + 1].0 {
        i += 1;
    }
    let (t0, c0) = ANCHORS[i];
    let (t1, c1) = ANCHORS[i + 1];
    let t = if t1 > t0 { (v - t0) / (t1 - t0) } else { 0.0 };
    let mut out = [0u8; 3];
    for (slot, (a, b)) in out.iter_mut().zip(c0.iter().zip(c1.iter())) {
        *slot = (a + t * (b - a)).round() as u8;
    }
    out
}

fn on_outline(b: &BoxPx, x: usize, y: usize) -> bool {
    let on_x_edge = (x == b.x0 || x + 1 == b.x1) && y >= b.y0 && y < b.y1;
    let on_y_edge = (y == b.y0 || y + 1 == b.y1) && x >= b.x0 && x < b.x1;
    on_x_edge || on_y_edge
}

/// Render a normalized map as PGM (gray) or PPM (color), optionally burning
/// in a 1-pixel box outline (white in gray mode, blue in color mode).
pub fn render_heatmap(
    map: &Tensor,
    path: &Path,
    style: HeatmapStyle,
    overlay: Option<BoxPx>,
) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::shape(format!(
            "heatmap expects H x W, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if let Some(b) = overlay {
        if b.x1 > w || b.y1 > h {
            return Err(Error::invalid(format!(
                "overlay box ({},{},{},{}) outside {w}x{h} map",
                b.x0, b.y0, b.x1, b.y1
            )));
        }
    }
    let mut bytes = Vec::new();
    match style {
        HeatmapStyle::Gray => {
            bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
            for y in 0..h {
                for x in 0..w {
                    let burn = overlay.as_ref().is_some_and(|b| on_outline(b, x, y));
                    let v = if burn {
                        255
                    } else {
                        (255.0 * map.at2(y, x).clamp(0.0, 1.0)).round() as u8
                    };
                    bytes.push(v);
                }
            }
        }
        HeatmapStyle::Color => {
            bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
            for y in 0..h {
                for x in 0..w {
                    let burn = overlay.as_ref().is_some_and(|b| on_outline(b, x, y));
                    let rgb = if burn {
                        [0, 0, 255]
                    } else {
                        colormap(map.at2(y, x))
                    };
                    bytes.extend_from_slice(&rgb);
                }
            }
        }
    }
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    fn random_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn tensor_round_trip_at_storage_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let mut rng = StdRng::seed_from_u64(1);
        let t = random_tensor(&[3, 4, 5], &mut rng);
        save_tensor(&path, &t).unwrap();
        let loaded = load_tensor(&path).unwrap();
        assert_eq!(loaded, quantize_f32(&t));
    }

    #[test]
    fn tensor_files_are_byte_deterministic() {
        let dir = tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let t = random_tensor(&[2, 6], &mut rng);
        let a = dir.path().join("a.tnsr");
        let b = dir.path().join("b.tnsr");
        save_tensor(&a, &t).unwrap();
        save_tensor(&b, &t).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn bad_magic_is_its_own_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::zeros(&[2, 2]).unwrap();
        save_tensor(&path, &t).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        fs::write(&path, bytes).unwrap();
        match load_tensor(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::filled(&[3, 3], 1.5).unwrap();
        save_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_tensor(&path) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_and_version_are_distinct() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::zeros(&[1]).unwrap();
        save_tensor(&path, &t).unwrap();
        let original = fs::read(&path).unwrap();

        let mut bytes = original.clone();
        bytes[12..16].copy_from_slice(&7u32.to_le_bytes()); // dtype slot
        fs::write(&path, &bytes).unwrap();
        match load_tensor(&path) {
            Err(Error::UnknownDtype(7)) => {}
            other => panic!("expected UnknownDtype, got {other:?}"),
        }

        let mut bytes = original;
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes()); // version slot
        fs::write(&path, &bytes).unwrap();
        match load_tensor(&path) {
            Err(Error::UnknownVersion(9)) => {}
            other => panic!("expected UnknownVersion, got {other:?}"),
        }
    }

    #[test]
    fn rank_zero_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TENSOR_MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_tensor(&path) {
            Err(Error::Shape(_)) => {}
            other => panic!("expected Shape error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = StdRng::seed_from_u64(3);
        let mut metadata = BTreeMap::new();
        metadata.insert("epochs".to_string(), "30".to_string());
        metadata.insert("seed".to_string(), "7".to_string());
        let ckpt = Checkpoint {
            entries: vec![
                ("fc.W".to_string(), quantize_f32(&random_tensor(&[4, 3], &mut rng))),
                ("embed.W".to_string(), quantize_f32(&random_tensor(&[8], &mut rng))),
            ],
            metadata,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn duplicate_checkpoint_names_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = Tensor::zeros(&[1]).unwrap();
        let ckpt = Checkpoint {
            entries: vec![("w".to_string(), t.clone()), ("w".to_string(), t)],
            metadata: BTreeMap::new(),
        };
        match save_checkpoint(&path, &ckpt) {
            Err(Error::DuplicateName(name)) => assert_eq!(name, "w"),
            other => panic!("expected DuplicateName, got {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            entries: vec![("w".to_string(), Tensor::filled(&[4], 2.0).unwrap())],
            metadata: BTreeMap::new(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_parse_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        let entries = vec![
            ManifestEntry {
                id: "train_00000".into(),
                tensor_path: "tensors/train_00000.tnsr".into(),
                label: 0,
                boxes: vec![BoxPx::new(1, 2, 6, 9).unwrap()],
            },
            ManifestEntry {
                id: "train_00001".into(),
                tensor_path: "tensors/train_00001.tnsr".into(),
                label: 2,
                boxes: vec![
                    BoxPx::new(0, 0, 4, 4).unwrap(),
                    BoxPx::new(8, 8, 12, 16).unwrap(),
                ],
            },
            ManifestEntry {
                id: "test_00000".into(),
                tensor_path: "tensors/test_00000.tnsr".into(),
                label: 1,
                boxes: vec![BoxPx::new(3, 3, 10, 12).unwrap()],
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let loaded = read_manifest(&path).unwrap();
        assert_eq!(loaded, entries);

        fs::write(&path, "id\tpath\t0\t1,2,3\n").unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("expected Parse error, got {other:?}"),
        }

        fs::write(&path, "a\tb\t0\t0,0,4,4\nc\td\tnope\t0,0,4,4\n").unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("expected Parse at line 2, got {other:?}"),
        }
    }

    #[test]
    fn report_round_trip_with_quoting() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![
            MetricRow {
                metric: "top1_loc_err[topbot:i=1,b=10]".into(),
                error_pct: 100.0 / 3.0,
                correct: 2,
                total: 3,
            },
            MetricRow {
                metric: "top1_cls_err".into(),
                error_pct: 0.0,
                correct: 3,
                total: 3,
            },
        ];
        write_report(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("\"top1_loc_err[topbot:i=1,b=10]\""));
        let loaded = read_report(&path).unwrap();
        assert_eq!(loaded, rows);
    }

    #[test]
    fn report_write_is_byte_deterministic() {
        let dir = tempdir().unwrap();
        let rows = vec![MetricRow {
            metric: "gtknown_loc_err".into(),
            error_pct: 12.5,
            correct: 7,
            total: 8,
        }];
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_report(&a, &rows).unwrap();
        write_report(&b, &rows).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn pgm_fixed_header_and_payload_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = Tensor::zeros(&[2, 2]).unwrap();
        render_heatmap(&map, &path, HeatmapStyle::Gray, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0u8, 0, 0, 0]);
        assert_eq!(bytes.len(), 15);
    }

    #[test]
    fn pgm_full_intensity_is_255() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = Tensor::new(&[1, 2], vec![1.0, 0.5]).unwrap();
        render_heatmap(&map, &path, HeatmapStyle::Gray, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 2..];
        assert_eq!(payload[0], 255);
        assert_eq!(payload[1], 128);
    }

    #[test]
    fn ppm_colormap_endpoints() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ppm");
        let map = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        render_heatmap(&map, &path, HeatmapStyle::Color, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 6..];
        assert_eq!(&payload[0..3], &[0, 0, 255]); // blue at 0
        assert_eq!(&payload[3..6], &[255, 0, 0]); // red at 1
    }

    #[test]
    fn overlay_outline_is_burned_in() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = Tensor::zeros(&[4, 4]).unwrap();
        let b = BoxPx::new(1, 1, 3, 3).unwrap();
        render_heatmap(&map, &path, HeatmapStyle::Gray, Some(b)).unwrap();
        let bytes = fs::read(&path).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        // The 2x2 box at (1,1) is all outline.
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(payload[y * 4 + x], 255);
        }
        assert_eq!(payload[0], 0);
        assert_eq!(payload[15], 0);
    }

    #[test]
    fn overlay_outside_map_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = Tensor::zeros(&[4, 4]).unwrap();
        let b = BoxPx::new(1, 1, 6, 3).unwrap();
        assert!(render_heatmap(&map, &path, HeatmapStyle::Gray, Some(b)).is_err());
    }
}
