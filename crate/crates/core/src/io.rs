//! On-disk formats: binary graymaps, annotation lines, checkpoints and the
//! CSV outputs. Floats in CSV files are written in shortest round-trip form
//! so a file read back reproduces the in-memory values exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationReport, PredictionRecord, ReliabilityBin};
use crate::geometry::{BoundingBox, ImageFrame, ObjectMask, Raster};
use crate::model::{EpochRecord, ModelState, NetConfig, Network};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALSM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so an
/// interrupted write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- graymaps

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary (P5) graymap with maxval below 256.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary graymap (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?;
        *field = text.parse().map_err(|_| bad("bad header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit graymaps are supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() - pos < n {
        return Err(bad("truncated pixel data"));
    }
    let mut px = bytes[pos..pos + n].to_vec();
    if maxval != 255 {
        for v in &mut px {
            *v = ((*v as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8;
        }
    }
    Ok((width, height, px))
}

pub fn raster_to_bytes(r: &Raster) -> Vec<u8> {
    r.data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_raster_pgm(path: &Path, r: &Raster) -> Result<()> {
    let bytes = encode_pgm(r.width, r.height, &raster_to_bytes(r));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raster_pgm(path: &Path) -> Result<Raster> {
    let (w, h, px) = decode_pgm(&read_file(path)?, path)?;
    Raster::new(w, h, px.iter().map(|&v| v as f32 / 255.0).collect())
}

pub fn write_mask_pgm(path: &Path, m: &ObjectMask) -> Result<()> {
    let px: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(m.width(), m.height(), &px)).map_err(|e| Error::io(path, e))
}

/// Pixels at or above half intensity are object pixels.
pub fn read_mask_pgm(path: &Path) -> Result<ObjectMask> {
    let (w, h, px) = decode_pgm(&read_file(path)?, path)?;
    ObjectMask::from_bits(w, h, px.iter().map(|&v| v >= 128).collect())
}

// ------------------------------------------------------------- annotations

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub frame: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<usize>,
}

impl Annotation {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        let [x, y, w, h] = self.bbox;
        BoundingBox::new(x, y, w, h)
    }

    pub fn image_frame(&self) -> Result<ImageFrame> {
        ImageFrame::new(self.frame[0], self.frame[1])
    }

    /// Stem of the image path, used as the sample id.
    pub fn sample_id(&self) -> String {
        Path::new(&self.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.clone())
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(a);
    }
    Ok(out)
}

pub fn encode_annotations(items: &[Annotation]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for a in items {
        let line = serde_json::to_string(a).map_err(|e| Error::invalid(e.to_string()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

/// Resolves a path from an annotation file relative to `base`.
pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

// ------------------------------------------------------------- checkpoints

/// `ALSM`, u32 version, u32 config length, NetConfig JSON, u64 parameter
/// count, then parameters and momentum as little-endian f32 in storage order.
pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(state.config()).map_err(|e| Error::invalid(e.to_string()))?;
    let params = state.net.params();
    let mut out = Vec::with_capacity(24 + cfg.len() + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.iter().chain(&state.momentum) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let bad = |msg: String| Error::format(path, msg);
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(bad("truncated checkpoint".into()));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let config: NetConfig = serde_json::from_slice(take(cfg_len)?)
        .map_err(|e| bad(format!("bad config block: {e}")))?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut floats = |n: usize| -> Result<Vec<f32>> {
        let raw = take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };
    let params = floats(n)?;
    let momentum = floats(n)?;
    if !r.is_empty() {
        return Err(bad("trailing bytes after checkpoint".into()));
    }
    let net = Network::from_params(config, params).map_err(|e| bad(e.to_string()))?;
    Ok(ModelState { net, momentum })
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&read_file(path)?, path)
}

// -------------------------------------------------------------------- CSV

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

fn parse_num<T: std::str::FromStr>(s: &str, path: &Path, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("bad {what} `{s}`")))
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> Result<Vec<u8>> {
    let header = ["epoch", "lr", "train_loss", "val_acc"].map(String::from);
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// `sample_id, true, predicted, confidence, objectness, p0 .. p{K-1}`.
pub fn predictions_csv(ids: &[String], records: &[PredictionRecord]) -> Result<Vec<u8>> {
    if ids.len() != records.len() {
        return Err(Error::invalid("one id per record required"));
    }
    let k = records.first().map_or(0, |r| r.probs.len());
    let mut header: Vec<String> = ["sample_id", "true", "predicted", "confidence", "objectness"]
        .map(String::from)
        .to_vec();
    header.extend((0..k).map(|i| format!("p{i}")));
    let rows: Vec<Vec<String>> = ids
        .iter()
        .zip(records)
        .map(|(id, r)| {
            let mut row = vec![
                id.clone(),
                r.true_class.to_string(),
                r.predicted.to_string(),
                r.confidence.to_string(),
                r.objectness.map(|o| o.to_string()).unwrap_or_default(),
            ];
            row.extend(r.probs.iter().map(|p| p.to_string()));
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn read_predictions_csv(path: &Path) -> Result<(Vec<String>, Vec<PredictionRecord>)> {
    let (header, rows) = read_csv(path)?;
    let fixed = ["sample_id", "true", "predicted", "confidence", "objectness"];
    if header.len() < fixed.len() + 2 || header[..fixed.len()] != fixed {
        return Err(Error::format(path, "unexpected predictions header"));
    }
    let mut ids = Vec::with_capacity(rows.len());
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::format(path, "ragged row"));
        }
        ids.push(row[0].clone());
        let objectness = if row[4].trim().is_empty() {
            None
        } else {
            Some(parse_num(&row[4], path, "objectness")?)
        };
        records.push(PredictionRecord {
            true_class: parse_num(&row[1], path, "class")?,
            predicted: parse_num(&row[2], path, "class")?,
            confidence: parse_num(&row[3], path, "confidence")?,
            objectness,
            probs: row[5..]
                .iter()
                .map(|s| parse_num(s, path, "probability"))
                .collect::<Result<_>>()?,
        });
    }
    Ok((ids, records))
}

/// Header plus a single row of report values.
pub fn report_csv(rep: &CalibrationReport) -> Result<Vec<u8>> {
    let first_bins = rep.ece.first().map_or(0, |e| e.0);
    let mut header = vec!["n".to_string(), "accuracy".to_string()];
    let mut row = vec![rep.n.to_string(), rep.accuracy.to_string()];
    for (b, v) in &rep.ece {
        header.push(format!("ece_{b}"));
        row.push(v.to_string());
    }
    header.push(format!("mce_{first_bins}"));
    row.push(rep.mce.to_string());
    for (name, m) in [
        ("overconfidence", rep.overconfidence),
        ("underconfidence", rep.underconfidence),
    ] {
        header.push(name.to_string());
        row.push(m.value.to_string());
        header.push(format!("{name}_undefined"));
        row.push(m.undefined.to_string());
    }
    header.push("avg_confidence".into());
    row.push(rep.avg_confidence.to_string());
    header.push("mean_deviation".into());
    row.push(
        rep.mean_deviation
            .map(|v| v.to_string())
            .unwrap_or_default(),
    );
    csv_bytes(&header, &[row])
}

pub fn bins_csv(bins: &[ReliabilityBin]) -> Result<Vec<u8>> {
    let header = ["lower", "upper", "count", "mean_conf", "acc"].map(String::from);
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| {
            vec![
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.mean_confidence.to_string(),
                b.accuracy.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn read_bins_csv(path: &Path) -> Result<Vec<ReliabilityBin>> {
    let (header, rows) = read_csv(path)?;
    if header != ["lower", "upper", "count", "mean_conf", "acc"] {
        return Err(Error::format(path, "unexpected bins header"));
    }
    rows.iter()
        .map(|r| {
            if r.len() != 5 {
                return Err(Error::format(path, "ragged row"));
            }
            Ok(ReliabilityBin {
                lower: parse_num(&r[0], path, "lower")?,
                upper: parse_num(&r[1], path, "upper")?,
                count: parse_num(&r[2], path, "count")?,
                mean_confidence: parse_num(&r[3], path, "mean_conf")?,
                accuracy: parse_num(&r[4], path, "acc")?,
            })
        })
        .collect()
}

/// Reads a single-row CSV (such as a report) into `(column, value)` pairs.
pub fn read_single_row_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let (header, rows) = read_csv(path)?;
    let row = rows
        .into_iter()
        .next()
        .ok_or_else(|| Error::format(path, "no data row"))?;
    Ok(header.into_iter().zip(row).collect())
}

/// Generic header + rows writer for tables assembled by the pipeline.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    csv_bytes(&header, rows)
}
