//! Dataset plumbing: IDX ingestion, raw intensity records, PGM previews and
//! line-delimited JSON manifests.
//!
//! Generated data lives under one output directory:
//!
//! ```text
//! manifest.jsonl        header line, then one line per item in item-id order
//! records/item-*.cint   raw f32 intensities
//! previews/item-*.pgm   8-bit previews at the experiment exposure scale
//! spill/worker-*.jsonl  per-worker append logs, removed once complete
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{quantize_values, GridSpec, IntensityImage};
use crate::scene::{SlmObject, SLM_SIDE};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const IMAGE_HEADER: usize = 16;
const LABEL_HEADER: usize = 8;

pub const CINT_MAGIC: [u8; 4] = *b"CINT";
const CINT_HEADER: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RECORDS_DIR: &str = "records";
pub const PREVIEWS_DIR: &str = "previews";
pub const SPILL_DIR: &str = "spill";
pub const MANIFEST_FORMAT: &str = "pcoh-manifest/1";

/// Images and labels of an IDX pair, 28x28 8-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    name: String,
    images: Vec<u8>,
    labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            message: "truncated header".into(),
        })
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let found = bytes.len() - header;
    if found < expected {
        return Err(Error::Parse {
            offset: header,
            message: format!("truncated payload: expected {expected} bytes, found {found}"),
        });
    }
    if found > expected {
        return Err(Error::Parse {
            offset: header + expected,
            message: format!("{} trailing bytes after payload", found - expected),
        });
    }
    Ok(())
}

/// Decodes an IDX image file (`0x00000803`, 28x28). Returns the flat pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("image magic expected, found {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != SLM_SIDE || cols != SLM_SIDE {
        return Err(Error::Parse {
            offset: 8,
            message: format!("dimension mismatch: {rows}x{cols}, expected {SLM_SIDE}x{SLM_SIDE}"),
        });
    }
    check_payload(bytes, IMAGE_HEADER, count * rows * cols)?;
    Ok(bytes[IMAGE_HEADER..].to_vec())
}

/// Decodes an IDX label file (`0x00000801`), class ids 0-9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("label magic expected, found {magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    check_payload(bytes, LABEL_HEADER, count)?;
    let labels = bytes[LABEL_HEADER..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Parse {
            offset: LABEL_HEADER + i,
            message: format!("label {} outside 0-9", labels[i]),
        });
    }
    Ok(labels)
}

pub fn parse_idx(name: &str, image_bytes: &[u8], label_bytes: &[u8]) -> Result<IdxDataset> {
    let images = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    let count = images.len() / (SLM_SIDE * SLM_SIDE);
    if labels.len() != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("label count {} differs from image count {count}", labels.len()),
        });
    }
    Ok(IdxDataset {
        name: name.to_string(),
        images,
        labels,
    })
}

/// Reads a file, transparently gunzipping it when it starts with the gzip
/// magic bytes.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

impl IdxDataset {
    /// Loads an image/label file pair (plain or gzipped). The dataset name
    /// is the image file name up to its first dot.
    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let name = images
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.split('.').next())
            .unwrap_or("idx")
            .to_string();
        parse_idx(&name, &read_maybe_gz(images)?, &read_maybe_gz(labels)?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let px = SLM_SIDE * SLM_SIDE;
        &self.images[index * px..(index + 1) * px]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn object(&self, index: usize) -> SlmObject {
        SlmObject::new(self.image(index).to_vec()).expect("IDX images are 28x28")
    }

    /// Class counts over `indices`.
    pub fn class_histogram(&self, indices: &[usize]) -> Vec<u32> {
        let mut hist = vec![0u32; 10];
        for &i in indices {
            hist[self.labels[i] as usize] += 1;
        }
        hist
    }
}

/// Uniform sample of `count` distinct indices out of `size`, sorted
/// ascending, deterministic under `seed`.
pub fn select_objects(size: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count > size {
        return Err(Error::config(format!(
            "cannot select {count} objects from a dataset of {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, size, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Raw detector intensities as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityRecord {
    pub grid: GridSpec,
    pub values: Vec<f32>,
}

impl IntensityRecord {
    pub fn from_image(image: &IntensityImage) -> Self {
        Self {
            grid: *image.grid(),
            values: image.values().iter().map(|&v| v as f32).collect(),
        }
    }

    /// `CINT`, u32 n, f64 pitch, then `n*n` f32 values, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CINT_HEADER + 4 * self.values.len());
        out.extend_from_slice(&CINT_MAGIC);
        out.extend_from_slice(&(self.grid.n() as u32).to_le_bytes());
        out.extend_from_slice(&self.grid.pitch().to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CINT_HEADER {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: "truncated CINT header".into(),
            });
        }
        if bytes[..4] != CINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "CINT magic expected".into(),
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let pitch = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let grid = GridSpec::new(n, pitch).map_err(|e| Error::Parse {
            offset: 4,
            message: e.to_string(),
        })?;
        check_payload(bytes, CINT_HEADER, 4 * n * n)?;
        let values = bytes[CINT_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { grid, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_image(&self) -> Result<IntensityImage> {
        IntensityImage::new(self.grid, self.values.iter().map(|&v| v as f64).collect())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &v| m.max(v as f64))
    }

    /// 8-bit pixels at `scale`: `clamp(round(v * scale), 0, 255)`.
    pub fn quantize(&self, scale: f64) -> Vec<u8> {
        let wide: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        quantize_values(&wide, scale)
    }
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(pixels: &[u8], width: usize) -> Vec<u8> {
    let height = pixels.len() / width.max(1);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// failed write never leaves a partial file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTaxonomy {
    Digit,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub experiment_id: String,
    pub preset: String,
    pub scene_hash: String,
    pub taxonomy: LabelTaxonomy,
    pub grid_n: usize,
    pub grid_pitch: f64,
    pub wavelength: f64,
    pub realizations: usize,
    /// Global preview/quantization scale: 255 over the largest intensity in
    /// the calibration batch (the first `calibration_items` item ids).
    pub exposure_scale: f64,
    pub calibration_items: usize,
    pub class_histogram: Vec<u32>,
    pub items_expected: usize,
    pub complete: bool,
    /// Lowest item id not yet generated, when incomplete.
    pub resume_cursor: Option<u64>,
    /// Every effective experiment parameter.
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub item_id: u64,
    pub source_dataset: Option<String>,
    pub source_index: Option<u64>,
    pub class_label: Option<u8>,
    pub depth_label: Option<u8>,
    pub depth_m: Option<f64>,
    pub l_c_m: f64,
    pub base_seed: u64,
    pub converged: Option<bool>,
    /// Relative to the manifest directory.
    pub path: String,
    pub sha256: String,
    pub max_intensity: f64,
    pub exposure_scale: f64,
}

/// Provenance of one item, supplied by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemInfo {
    pub item_id: u64,
    pub source_dataset: Option<String>,
    pub source_index: Option<u64>,
    pub class_label: Option<u8>,
    pub depth_label: Option<u8>,
    pub depth_m: Option<f64>,
    pub l_c_m: f64,
    pub base_seed: u64,
}

pub fn record_path(item_id: u64) -> String {
    format!("{RECORDS_DIR}/item-{item_id:06}.cint")
}

pub fn preview_path(item_id: u64) -> String {
    format!("{PREVIEWS_DIR}/item-{item_id:06}.pgm")
}

/// Writes the raw record for `image` under `root` and returns its manifest
/// entry. With `preview_scale`, an 8-bit PGM preview is written as well.
/// The entry is only returned once the record is on disk.
pub fn write_intensity_record(
    image: &IntensityImage,
    root: &Path,
    info: ItemInfo,
    preview_scale: Option<f64>,
) -> Result<ManifestRecord> {
    let record = IntensityRecord::from_image(image);
    let bytes = record.encode();
    let rel = record_path(info.item_id);
    write_atomic(&root.join(&rel), &bytes)?;
    if let Some(scale) = preview_scale {
        write_preview(root, info.item_id, &record, scale)?;
    }
    Ok(ManifestRecord {
        item_id: info.item_id,
        source_dataset: info.source_dataset,
        source_index: info.source_index,
        class_label: info.class_label,
        depth_label: info.depth_label,
        depth_m: info.depth_m,
        l_c_m: info.l_c_m,
        base_seed: info.base_seed,
        converged: image.metadata.converged,
        path: rel,
        sha256: sha256_hex(&bytes),
        max_intensity: record.max(),
        exposure_scale: preview_scale.unwrap_or(image.exposure_scale),
    })
}

pub fn write_preview(root: &Path, item_id: u64, record: &IntensityRecord, scale: f64) -> Result<()> {
    let pgm = encode_pgm(&record.quantize(scale), record.grid.n());
    write_atomic(&root.join(preview_path(item_id)), &pgm)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Item(ManifestRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

/// Outcome of checking a manifest against the files on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerificationReport {
    pub checked: usize,
    pub missing: Vec<String>,
    pub mismatched: Vec<String>,
    pub extra: Vec<String>,
    pub problems: Vec<String>,
}

impl VerificationReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.mismatched.is_empty() && self.extra.is_empty() && self.problems.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_ok() {
            return Ok(self);
        }
        let first = self
            .missing
            .iter()
            .map(|p| format!("missing {p}"))
            .chain(self.mismatched.iter().map(|p| format!("hash mismatch {p}")))
            .chain(self.extra.iter().map(|p| format!("unreferenced {p}")))
            .chain(self.problems.iter().cloned())
            .next()
            .unwrap_or_default();
        Err(Error::data(format!(
            "manifest verification failed ({} missing, {} mismatched, {} extra, {} other): {first}",
            self.missing.len(),
            self.mismatched.len(),
            self.extra.len(),
            self.problems.len()
        )))
    }
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone())).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Item(r.clone())).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("manifest line {}: {e}", i + 1)))?;
            match (parsed, i) {
                (Line::Header(h), 0) => header = Some(h),
                (Line::Header(_), _) => {
                    return Err(Error::data(format!("manifest line {}: second header", i + 1)))
                }
                (Line::Item(r), _) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::data("manifest has no header line"))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::data(format!("unsupported manifest format {:?}", header.format)));
        }
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Distinct coherence lengths in ascending order.
    pub fn l_c_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.l_c_m).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Distinct detector depths in ascending order.
    pub fn depth_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.records.iter().filter_map(|r| r.depth_m).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Checks structure, label taxonomy and every record hash; files in
    /// `records/` that no entry references are reported as extra.
    pub fn verify(&self, root: &Path) -> Result<VerificationReport> {
        let mut report = VerificationReport::default();
        let mut seen = BTreeSet::new();
        let mut last = None;
        for r in &self.records {
            if !seen.insert(r.item_id) {
                report.problems.push(format!("duplicate item id {}", r.item_id));
            }
            if last.is_some_and(|l| r.item_id < l) {
                report.problems.push(format!("item {} out of order", r.item_id));
            }
            last = Some(r.item_id);
            let labels_ok = match self.header.taxonomy {
                LabelTaxonomy::Digit => r.class_label.is_some() && r.depth_label.is_none(),
                LabelTaxonomy::Depth => r.depth_label.is_some() && r.class_label.is_none(),
            };
            if !labels_ok {
                report
                    .problems
                    .push(format!("item {} does not carry exactly one {:?} label", r.item_id, self.header.taxonomy));
            }
            report.checked += 1;
            match fs::read(root.join(&r.path)) {
                Ok(bytes) if sha256_hex(&bytes) == r.sha256 => {}
                Ok(_) => report.mismatched.push(r.path.clone()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => report.missing.push(r.path.clone()),
                Err(e) => return Err(Error::io(root.join(&r.path), e)),
            }
        }
        if self.header.complete && self.records.len() != self.header.items_expected {
            report.problems.push(format!(
                "{} records for {} expected items",
                self.records.len(),
                self.header.items_expected
            ));
        }

        let referenced: BTreeSet<&str> = self.records.iter().map(|r| r.path.as_str()).collect();
        let dir = root.join(RECORDS_DIR);
        if dir.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .map(|name| format!("{RECORDS_DIR}/{name}"))
                .filter(|p| !referenced.contains(p.as_str()))
                .collect();
            names.sort();
            report.extra = names;
        }
        Ok(report)
    }
}

/// Append-only log of finished records for one worker.
#[derive(Debug)]
pub struct SpillWriter {
    path: PathBuf,
    file: File,
}

impl SpillWriter {
    pub fn open(root: &Path, worker: usize) -> Result<Self> {
        let dir = root.join(SPILL_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("worker-{worker}.jsonl"));
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, record: &ManifestRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Every spilled record whose file still matches its hash, keyed by item
/// id. Truncated trailing lines from an interrupted writer are skipped.
pub fn collect_spilled(root: &Path) -> Result<BTreeMap<u64, ManifestRecord>> {
    let dir = root.join(SPILL_DIR);
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    for path in files {
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            let Ok(rec) = serde_json::from_str::<ManifestRecord>(&line) else {
                continue;
            };
            let intact = fs::read(root.join(&rec.path)).is_ok_and(|b| sha256_hex(&b) == rec.sha256);
            if intact {
                out.insert(rec.item_id, rec);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_well_formed_pair() {
        let ds = parse_idx("t", &idx_images(3, 28, 28, 9), &idx_labels(&[1, 2, 3])).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image(2).len(), 784);
        assert_eq!(ds.label(1), 2);
        assert_eq!(ds.class_histogram(&[0, 1, 2, 2])[3], 2);
    }

    #[test]
    fn header_only_file_fails_at_payload_offset() {
        let mut b = idx_images(2, 28, 28, 0);
        b.truncate(IMAGE_HEADER);
        match parse_idx_images(&b) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, IMAGE_HEADER),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_file_with_image_magic_rejected() {
        let mut b = idx_labels(&[0, 1]);
        b[..4].copy_from_slice(&IMAGE_MAGIC.to_be_bytes());
        match parse_idx_labels(&b) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("label magic expected"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_dimensions_and_counts_rejected() {
        assert!(matches!(parse_idx_images(&idx_images(1, 32, 32, 0)), Err(Error::Parse { offset: 8, .. })));
        assert!(matches!(
            parse_idx("t", &idx_images(2, 28, 28, 0), &idx_labels(&[1])),
            Err(Error::Parse { offset: 4, .. })
        ));
        assert!(parse_idx_labels(&idx_labels(&[10])).is_err());
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn gz_input_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_labels(&[4, 5, 6]);
        let path = dir.path().join("l.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_maybe_gz(&path).unwrap(), raw);
    }

    #[test]
    fn selection_is_a_deterministic_set() {
        assert_eq!(select_objects(10, 10, 3).unwrap(), (0..10).collect::<Vec<_>>());
        let a = select_objects(60000, 5000, 11).unwrap();
        assert_eq!(a, select_objects(60000, 5000, 11).unwrap());
        assert_ne!(a, select_objects(60000, 5000, 12).unwrap());
        let unique: BTreeSet<usize> = a.iter().copied().collect();
        assert_eq!(unique.len(), 5000);
        assert!(select_objects(5, 6, 0).is_err());
    }

    #[test]
    fn cint_round_trip_is_bit_exact() {
        let g = GridSpec::new(8, 1.25e-5).unwrap();
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.731).sin().abs() * 1e-3).collect();
        let img = IntensityImage::new(g, vals).unwrap();
        let rec = IntensityRecord::from_image(&img);
        let bytes = rec.encode();
        assert_eq!(&bytes[..4], b"CINT");
        assert_eq!(bytes.len(), 16 + 4 * 64);
        let back = IntensityRecord::decode(&bytes).unwrap();
        assert_eq!(back.grid, g);
        assert!(back.values.iter().zip(&rec.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(IntensityRecord::decode(&bytes[..40]), Err(Error::Parse { offset: 16, .. })));
    }

    #[test]
    fn preview_pixels_follow_exposure_rule() {
        let g = GridSpec::new(2, 1e-5).unwrap();
        let img = IntensityImage::new(g, vec![0.0, 0.5, 1.0, 3.0]).unwrap();
        let rec = IntensityRecord::from_image(&img);
        assert_eq!(rec.quantize(100.0), vec![0, 50, 100, 255]);
        let pgm = encode_pgm(&rec.quantize(100.0), 2);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 50, 100, 255]);
    }

    fn sample_manifest(root: &Path, n: u64) -> DatasetManifest {
        let g = GridSpec::new(4, 1e-5).unwrap();
        let records = (0..n)
            .map(|id| {
                let img = IntensityImage::new(g, vec![id as f64 + 1.0; 16]).unwrap();
                let info = ItemInfo {
                    item_id: id,
                    source_dataset: Some("t".into()),
                    source_index: Some(id),
                    class_label: Some(id as u8 % 10),
                    depth_label: None,
                    depth_m: None,
                    l_c_m: 1e-3,
                    base_seed: id,
                };
                write_intensity_record(&img, root, info, Some(10.0)).unwrap()
            })
            .collect();
        DatasetManifest {
            header: ManifestHeader {
                format: MANIFEST_FORMAT.into(),
                experiment_id: "t".into(),
                preset: "direct".into(),
                scene_hash: "0".into(),
                taxonomy: LabelTaxonomy::Digit,
                grid_n: 4,
                grid_pitch: 1e-5,
                wavelength: 635e-9,
                realizations: 1,
                exposure_scale: 10.0,
                calibration_items: n as usize,
                class_histogram: vec![0; 10],
                items_expected: n as usize,
                complete: true,
                resume_cursor: None,
                parameters: serde_json::Value::Null,
            },
            records,
        }
    }

    #[test]
    fn manifest_round_trip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 3);
        let path = dir.path().join(MANIFEST_FILE);
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.verify(dir.path()).unwrap().is_ok());
        assert!(dir.path().join(preview_path(2)).exists());
    }

    #[test]
    fn verification_detects_tampering_missing_and_extra() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 3);
        fs::write(dir.path().join(record_path(1)), b"CINTxxxx").unwrap();
        fs::remove_file(dir.path().join(record_path(2))).unwrap();
        fs::write(dir.path().join(RECORDS_DIR).join("stray.cint"), b"").unwrap();
        let r = m.verify(dir.path()).unwrap();
        assert_eq!(r.mismatched, vec![record_path(1)]);
        assert_eq!(r.missing, vec![record_path(2)]);
        assert_eq!(r.extra, vec![format!("{RECORDS_DIR}/stray.cint")]);
        assert!(matches!(r.into_result(), Err(Error::Data(_))));
    }

    #[test]
    fn mixed_taxonomy_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample_manifest(dir.path(), 2);
        m.records[1].depth_label = Some(0);
        assert!(!m.verify(dir.path()).unwrap().is_ok());
    }

    #[test]
    fn spill_survives_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path(), 2);
        let mut w = SpillWriter::open(dir.path(), 0).unwrap();
        for r in &m.records {
            w.append(r).unwrap();
        }
        let p = dir.path().join(SPILL_DIR).join("worker-0.jsonl");
        let mut f = OpenOptions::new().append(true).open(p).unwrap();
        f.write_all(b"{\"item_id\": 7, \"sou").unwrap();
        let got = collect_spilled(dir.path()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[&1], m.records[1]);
    }
}
