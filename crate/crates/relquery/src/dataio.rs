//! File formats: IDX images, metadata CSV, PGM, checkpoints, run records and
//! experiment tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use relquery_core::experiment::{response_name, KSweepRow, SummaryRow, TrialResult};
use relquery_core::session::{QueryRecord, SessionConfig, Trajectory};
use relquery_core::synthworld::{Image, Item, Metadata, IMAGE_PIXELS, IMAGE_SIDE, METADATA_FIELDS};
use relquery_core::vae::{EpochMetrics, LatentSplit, TrainConfig, Vae};
use relquery_core::ModelKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const RUN_RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("IDX magic {0:#010x} is not an unsigned-byte image file (0x00000803)")]
    WrongMagic(u32),
    #[error("IDX file truncated: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("IDX images are {rows}x{cols}, expected 28x28")]
    BadDimensions { rows: u32, cols: u32 },
    #[error("metadata CSV is missing column `{0}`")]
    MissingColumn(String),
    #[error("metadata CSV row {row}, column `{column}`: `{value}` is not a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("malformed PGM: {0}")]
    BadPgm(&'static str),
    #[error("{what} format version {got} is not supported (expected {expected})")]
    Version { what: &'static str, got: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses an IDX unsigned-byte image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Image>, DataError> {
    let word = |i: usize| -> Result<u32, DataError> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(DataError::Truncated { expected: 16, got: bytes.len() })
    };
    let magic = word(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::WrongMagic(magic));
    }
    let (count, rows, cols) = (word(1)?, word(2)?, word(3)?);
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(DataError::BadDimensions { rows, cols });
    }
    let expected = 16 + count as usize * IMAGE_PIXELS;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, got: bytes.len() });
    }
    Ok(bytes[16..expected]
        .chunks_exact(IMAGE_PIXELS)
        .map(|px| Image::new(px.iter().map(|&b| b as f64 / 255.0).collect()).expect("784 values in [0, 1]"))
        .collect())
}

pub fn load_idx_images(path: &Path) -> Result<Vec<Image>, DataError> {
    parse_idx_images(&fs::read(path).map_err(io_err(path))?)
}

pub fn encode_idx_images(images: &[Image]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * IMAGE_PIXELS);
    for w in [IDX_IMAGE_MAGIC, images.len() as u32, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    for img in images {
        out.extend(img.pixels().iter().map(|&p| quantize(p)));
    }
    out
}

pub fn write_idx_images(images: &[Image], path: &Path) -> Result<(), DataError> {
    write_bytes(path, &encode_idx_images(images))
}

/// Metadata rows in file order, with the `id` column when present.
pub fn parse_metadata_csv(text: &str) -> Result<Vec<(Option<u32>, Metadata)>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let columns = METADATA_FIELDS
        .iter()
        .map(|&name| find(name).ok_or_else(|| DataError::MissingColumn(name.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let id_col = find("id");
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut values = [0.0; 6];
        for (k, &col) in columns.iter().enumerate() {
            let cell = rec.get(col).unwrap_or("");
            values[k] = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::NotNumeric {
                row: row + 1,
                column: METADATA_FIELDS[k].to_string(),
                value: cell.to_string(),
            })?;
        }
        let id = match id_col {
            Some(c) => {
                let cell = rec.get(c).unwrap_or("");
                Some(cell.parse::<u32>().map_err(|_| DataError::NotNumeric {
                    row: row + 1,
                    column: "id".into(),
                    value: cell.to_string(),
                })?)
            }
            None => None,
        };
        out.push((id, Metadata::from_array(values)));
    }
    Ok(out)
}

pub fn load_metadata_csv(path: &Path) -> Result<Vec<Metadata>, DataError> {
    Ok(load_metadata_rows(path)?.into_iter().map(|(_, m)| m).collect())
}

pub fn load_metadata_rows(path: &Path) -> Result<Vec<(Option<u32>, Metadata)>, DataError> {
    parse_metadata_csv(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn write_metadata_csv(items: &[Item], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("id").chain(METADATA_FIELDS))?;
    for it in items {
        let m = it.metadata.to_array();
        w.write_record(std::iter::once(it.id.to_string()).chain(m.iter().map(|v| v.to_string())))?;
    }
    write_bytes(path, &w.into_inner().map_err(|e| DataError::Invalid(e.to_string()))?)
}

/// Joins an IDX image file with a metadata CSV of the same length.
pub fn load_external_items(idx: &Path, csv_path: &Path) -> Result<Vec<Item>, DataError> {
    let images = load_idx_images(idx)?;
    let rows = load_metadata_rows(csv_path)?;
    if images.len() != rows.len() {
        return Err(DataError::Invalid(format!("{} images but {} metadata rows", images.len(), rows.len())));
    }
    let items: Vec<Item> = images
        .into_iter()
        .zip(rows)
        .enumerate()
        .map(|(i, (image, (id, metadata)))| Item { id: id.unwrap_or(i as u32), image, metadata, params: None })
        .collect();
    let mut ids: Vec<u32> = items.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(DataError::Invalid("metadata ids are not unique".into()));
    }
    Ok(items)
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    out.extend(img.pixels().iter().map(|&p| quantize(p)));
    out
}

pub fn write_pgm(img: &Image, path: &Path) -> Result<(), DataError> {
    write_bytes(path, &encode_pgm(img))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image, DataError> {
    // Header: magic, width, height, maxval separated by single whitespace runs.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::BadPgm("header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| DataError::BadPgm("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(DataError::BadPgm("not a P5 file"));
    }
    if fields[1] != "28" || fields[2] != "28" {
        return Err(DataError::BadPgm("image is not 28x28"));
    }
    let maxval: f64 = fields[3].parse().map_err(|_| DataError::BadPgm("bad maxval"))?;
    if !(1.0..=255.0).contains(&maxval) {
        return Err(DataError::BadPgm("maxval must be in 1..=255"));
    }
    let payload = bytes.get(pos + 1..pos + 1 + IMAGE_PIXELS).ok_or(DataError::BadPgm("payload truncated"))?;
    Image::from_clamped(payload.iter().map(|&b| b as f64 / maxval)).map_err(|e| DataError::Invalid(e.to_string()))
}

pub fn load_pgm(path: &Path) -> Result<Image, DataError> {
    decode_pgm(&fs::read(path).map_err(io_err(path))?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    let text = serde_json::to_vec_pretty(value).map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    write_bytes(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

/// A trained model with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub key: ModelKey,
    pub split: LatentSplit,
    pub train: TrainConfig,
    pub data_seed: u64,
    pub vae: Vae<f32>,
}

impl Checkpoint {
    pub fn new(key: ModelKey, train: TrainConfig, data_seed: u64, vae: Vae<f32>) -> Self {
        Checkpoint { format_version: CHECKPOINT_VERSION, key, split: vae.split, train, data_seed, vae }
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DataError> {
    write_json(ckpt, path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
    }
    let header: Header = read_json(path)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(DataError::Version { what: "checkpoint", got: header.format_version, expected: CHECKPOINT_VERSION });
    }
    let ckpt: Checkpoint = read_json(path)?;
    if ckpt.vae.split != ckpt.split {
        return Err(DataError::Invalid("checkpoint split does not match its model".into()));
    }
    Ok(ckpt)
}

/// One localization session as exported to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub model_id: String,
    pub seed: u64,
    pub config: SessionConfig,
    pub target_id: Option<u32>,
    pub baseline_loss: Option<f64>,
    pub queries: Vec<QueryRecord>,
    /// Decoded final estimate, 784 row-major pixels.
    pub final_estimate: Vec<f64>,
    pub nearest_neighbor: u32,
}

impl RunRecord {
    pub fn from_trajectory(model_id: &str, config: SessionConfig, t: &Trajectory) -> Self {
        RunRecord {
            format_version: RUN_RECORD_VERSION,
            model_id: model_id.to_string(),
            seed: t.seed,
            config,
            target_id: t.target_id,
            baseline_loss: t.baseline_loss,
            queries: t.records.clone(),
            final_estimate: t.final_image.pixels().to_vec(),
            nearest_neighbor: t.nearest_neighbor,
        }
    }
}

pub fn write_run_record(record: &RunRecord, path: &Path) -> Result<(), DataError> {
    write_json(record, path)
}

pub fn read_run_record(path: &Path) -> Result<RunRecord, DataError> {
    let r: RunRecord = read_json(path)?;
    if r.format_version != RUN_RECORD_VERSION {
        return Err(DataError::Version { what: "run record", got: r.format_version, expected: RUN_RECORD_VERSION });
    }
    Ok(r)
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>, DataError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    w.into_inner().map_err(|e| DataError::Invalid(e.to_string()))
}

pub fn metrics_csv(history: &[EpochMetrics]) -> Result<Vec<u8>, DataError> {
    csv_bytes(&["epoch", "recon", "kl", "triplet", "total"], |w| {
        for m in history {
            w.write_record([m.epoch.to_string(), m.recon.to_string(), m.kl.to_string(), m.triplet.to_string(), m.total.to_string()])?;
        }
        Ok(())
    })
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<(), DataError> {
    write_bytes(path, &metrics_csv(history)?)
}

fn cell_fields(r: &TrialResult) -> [String; 3] {
    [r.cell.model.objective.name().into(), response_name(r.cell.response).into(), r.cell.model.noisy.to_string()]
}

/// Per-trial, per-query losses: `objective,response_model,noise,trial,query_index,metadata_loss`.
pub fn experiment_csv(results: &[TrialResult]) -> Result<Vec<u8>, DataError> {
    csv_bytes(&["objective", "response_model", "noise", "trial", "query_index", "metadata_loss"], |w| {
        for r in results {
            for rec in &r.trajectory.records {
                let [o, m, n] = cell_fields(r);
                let loss = rec.metadata_loss.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([o, m, n, r.trial.to_string(), rec.index.to_string(), loss])?;
            }
        }
        Ok(())
    })
}

/// Query-0 losses (decoded prior mean), one row per trial.
pub fn baselines_csv(results: &[TrialResult]) -> Result<Vec<u8>, DataError> {
    csv_bytes(&["objective", "response_model", "noise", "trial", "target_id", "baseline_loss"], |w| {
        for r in results {
            let [o, m, n] = cell_fields(r);
            let target = r.trajectory.target_id.map(|v| v.to_string()).unwrap_or_default();
            let loss = r.trajectory.baseline_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([o, m, n, r.trial.to_string(), target, loss])?;
        }
        Ok(())
    })
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>, DataError> {
    csv_bytes(&["objective", "response_model", "noise", "query_index", "median", "q1", "q3"], |w| {
        for r in rows {
            w.write_record([
                r.cell.model.objective.name().to_string(),
                response_name(r.cell.response).to_string(),
                r.cell.model.noisy.to_string(),
                r.query_index.to_string(),
                r.median.to_string(),
                r.q1.to_string(),
                r.q3.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn k_sweep_csv(rows: &[KSweepRow]) -> Result<Vec<u8>, DataError> {
    csv_bytes(&["objective", "noise", "k", "median", "q1", "q3"], |w| {
        for r in rows {
            w.write_record([
                r.model.objective.name().to_string(),
                r.model.noisy.to_string(),
                r.k.to_string(),
                r.median.to_string(),
                r.q1.to_string(),
                r.q3.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    write_bytes(path, bytes)
}

/// Writes each image as `<dir>/<id>.pgm`.
pub fn write_image_dir(items: &[Item], dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for it in items {
        let path = dir.join(format!("{:05}.pgm", it.id));
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(&encode_pgm(&it.image)).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_header(magic: u32, count: u32, rows: u32, cols: u32) -> Vec<u8> {
        [magic, count, rows, cols].iter().flat_map(|w| w.to_be_bytes()).collect()
    }

    #[test]
    fn idx_single_image() {
        let mut bytes = idx_header(0x803, 1, 28, 28);
        bytes.extend((0..784).map(|i| (i % 256) as u8));
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].pixels()[255], 1.0);
        assert_eq!(imgs[0].pixels()[0], 0.0);
        assert_eq!(encode_idx_images(&imgs), bytes);
    }

    #[test]
    fn idx_errors_are_distinct() {
        assert!(matches!(parse_idx_images(&idx_header(0x801, 1, 28, 28)), Err(DataError::WrongMagic(0x801))));
        let mut short = idx_header(0x803, 2, 28, 28);
        short.extend([0u8; 784]);
        assert!(matches!(parse_idx_images(&short), Err(DataError::Truncated { expected: 1584, got: 800 })));
        assert!(matches!(parse_idx_images(&idx_header(0x803, 1, 32, 32)), Err(DataError::BadDimensions { rows: 32, cols: 32 })));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn metadata_csv_rules() {
        let ok = "area,length,thickness,slant,width,height,digit\n10,12,2.5,0.1,3,12,1\n";
        let rows = parse_metadata_csv(ok).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, None);
        assert_eq!(rows[0].1.slant, 0.1);
        let missing = "area,length,thickness,width,height\n1,2,3,4,5\n";
        match parse_metadata_csv(missing) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "slant"),
            other => panic!("{other:?}"),
        }
        let bad = "area,length,thickness,slant,width,height\n1,2,x,4,5,6\n";
        assert!(matches!(parse_metadata_csv(bad), Err(DataError::NotNumeric { row: 1, .. })));
        let with_id = "id,area,length,thickness,slant,width,height\n7,1,2,3,4,5,6\n";
        assert_eq!(parse_metadata_csv(with_id).unwrap()[0].0, Some(7));
    }

    #[test]
    fn pgm_layout_and_round_trip() {
        let zero = encode_pgm(&Image::zeros());
        assert_eq!(&zero[..13], b"P5\n28 28\n255\n");
        assert_eq!(zero.len(), 13 + 784);
        assert!(zero[13..].iter().all(|&b| b == 0));
        let img = Image::new((0..784).map(|i| (i as f64 * 0.37).fract()).collect()).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(decode_pgm(b"P2\n28 28\n255\n").is_err());
    }
}
