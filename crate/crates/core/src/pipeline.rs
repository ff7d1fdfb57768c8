//! Staged experiment pipeline. Each stage reads and writes plain files, so
//! any stage can be rerun on its own:
//!
//! ```text
//! data/      manifest.json, train.jsonl, val.jsonl, images/, masks/
//! runs/<p>/  checkpoint.alsm, epochs.csv, train_meta.json,
//!            eval_object/, eval_context/   (predictions.csv, report.csv, bins.csv)
//! comparison.csv
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationReport, PredictionRecord};
use crate::config::{ExperimentConfig, Resolved};
use crate::geometry::{
    transformed_objectness, AugmentTransform, BoundingBox, ImageFrame, ObjectMask,
};
use crate::io::{self, Annotation};
use crate::labeling::{adaptive_alpha, LabelVector, LabelingPolicy, PolicyMode};
use crate::model::{self, ModelState};
use crate::synthdata::{eval_sets_from_samples, AnnotatedSample, Dataset, EvalSet, SceneSpec};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.alsm";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const TRAIN_META: &str = "train_meta.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const REPORT: &str = "report.csv";
pub const BINS: &str = "bins.csv";
pub const COMPARISON: &str = "comparison.csv";

/// Written next to the generated data; echoes the full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub resolved: Resolved,
    pub n_train: usize,
    pub n_val: usize,
    pub mean_pixel: f64,
    pub train_annotations: String,
    pub val_annotations: String,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn write_split(dir: &Path, split: &str, samples: &[AnnotatedSample]) -> Result<Vec<Annotation>> {
    let img_dir = dir.join("images").join(split);
    let mask_dir = dir.join("masks").join(split);
    io::create_dir_all(&img_dir)?;
    io::create_dir_all(&mask_dir)?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}.pgm");
        io::write_raster_pgm(&img_dir.join(&name), &s.image)?;
        io::write_mask_pgm(&mask_dir.join(&name), &s.mask)?;
        out.push(Annotation {
            image: format!("images/{split}/{name}"),
            class: s.class,
            bbox: s.bbox.to_array(),
            frame: [s.frame.width, s.frame.height],
            mask: Some(format!("masks/{split}/{name}")),
            texture: s.texture,
        });
    }
    Ok(out)
}

/// Generates the training and validation splits into `out_dir`.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let resolved = cfg.resolve()?;
    let train = Dataset::generate(&resolved.scene, cfg.n_train)?;
    let val = Dataset::generate(&resolved.scene.with_stream("val"), cfg.n_val)?;
    io::create_dir_all(out_dir)?;
    for (split, samples, file) in [
        ("train", &train.samples, "train.jsonl"),
        ("val", &val.samples, "val.jsonl"),
    ] {
        let ann = write_split(out_dir, split, samples)?;
        io::write_atomic(&out_dir.join(file), &io::encode_annotations(&ann)?)?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        resolved,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        mean_pixel: train.mean_pixel,
        train_annotations: "train.jsonl".into(),
        val_annotations: "val.jsonl".into(),
    };
    io::write_atomic(&out_dir.join(MANIFEST), &json_bytes(&manifest)?)?;
    Ok(manifest)
}

/// A dataset directory read back into memory.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Dataset,
    pub val: Vec<AnnotatedSample>,
}

impl LoadedData {
    /// `(object, context)` evaluation sets cropped as `cfg` prescribes.
    pub fn eval_sets(&self, cfg: &ExperimentConfig) -> Result<(EvalSet, EvalSet)> {
        let resolved = cfg.resolve()?;
        eval_sets_from_samples(&self.val, &resolved.sampler, self.train.mean_pixel)
    }
}

fn load_split(dir: &Path, file: &str) -> Result<Vec<AnnotatedSample>> {
    let path = dir.join(file);
    let anns = io::read_annotations(&path)?;
    anns.iter()
        .map(|a| {
            let bbox = a.bounding_box()?;
            let frame = a.image_frame()?;
            let image = io::read_raster_pgm(&io::resolve(dir, &a.image))?;
            if (image.width, image.height) != (frame.width as usize, frame.height as usize) {
                return Err(Error::format(
                    &path,
                    format!("{}: size differs from frame", a.image),
                ));
            }
            let mask = match &a.mask {
                Some(m) => io::read_mask_pgm(&io::resolve(dir, m))?,
                None => ObjectMask::from_box(&bbox, frame),
            };
            Ok(AnnotatedSample {
                image,
                mask,
                class: a.class,
                bbox,
                frame,
                texture: a.texture,
            })
        })
        .collect()
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    serde_json::from_slice(&io::read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))
}

/// Reads a directory written by [`gen_data`].
pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let manifest = load_manifest(dir)?;
    let spec: SceneSpec = manifest.resolved.scene.clone();
    let samples = load_split(dir, &manifest.train_annotations)?;
    let val = load_split(dir, &manifest.val_annotations)?;
    if samples.len() != manifest.n_train || val.len() != manifest.n_val {
        return Err(Error::format(
            dir.join(MANIFEST),
            "sample counts disagree with annotations",
        ));
    }
    if let Some(s) = samples
        .iter()
        .chain(&val)
        .find(|s| s.class >= spec.num_classes)
    {
        return Err(Error::format(
            dir,
            format!("class {} out of range", s.class),
        ));
    }
    let mean_pixel = manifest.mean_pixel;
    if crate::synthdata::mean_pixel(&samples) != mean_pixel {
        return Err(Error::format(
            dir.join(MANIFEST),
            "mean pixel disagrees with training images",
        ));
    }
    Ok(LoadedData {
        dir: dir.to_path_buf(),
        manifest,
        train: Dataset {
            spec,
            samples,
            mean_pixel,
        },
        val,
    })
}

/// Directory name for a policy's run, e.g. `adaptive_1.0`.
pub fn policy_dir_name(mode: &PolicyMode) -> String {
    mode.to_string().replace(':', "_")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub policy: String,
    pub seed: u64,
    pub context_fraction: f64,
    pub epochs: usize,
    pub first_batch_hash: String,
    pub final_train_loss: f64,
    pub final_val_acc: Option<f64>,
}

/// Trains one policy on a loaded dataset and writes the checkpoint, the
/// epoch log and a small metadata file into `out_dir`.
pub fn train_policy(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    mode: &PolicyMode,
    out_dir: &Path,
) -> Result<(ModelState, TrainMeta)> {
    let resolved = cfg.resolve()?;
    if resolved.scene.num_classes != data.train.spec.num_classes {
        return Err(Error::Config(format!(
            "config has {} classes but the data has {}",
            resolved.scene.num_classes, data.train.spec.num_classes
        )));
    }
    let (object_val, _) = data.eval_sets(cfg)?;
    let policy = LabelingPolicy::new(*mode, resolved.scene.num_classes)?;
    let outcome = model::train(
        &data.train,
        Some(&object_val),
        &resolved.sampler,
        &policy,
        &resolved.net,
        &resolved.train,
    )?;
    io::create_dir_all(out_dir)?;
    io::save_checkpoint(&out_dir.join(CHECKPOINT), &outcome.state)?;
    io::write_atomic(&out_dir.join(EPOCH_LOG), &io::epoch_log_csv(&outcome.log)?)?;
    let last = outcome.log.last();
    let meta = TrainMeta {
        policy: mode.to_string(),
        seed: cfg.seed,
        context_fraction: if mode.uses_context_items() {
            resolved.sampler.context_fraction
        } else {
            0.0
        },
        epochs: resolved.train.epochs,
        first_batch_hash: outcome.first_batch_hash,
        final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
        final_val_acc: last.and_then(|r| r.val_acc),
    };
    io::write_atomic(&out_dir.join(TRAIN_META), &json_bytes(&meta)?)?;
    Ok((outcome.state, meta))
}

pub fn predict_set(
    state: &ModelState,
    set: &EvalSet,
) -> Result<(Vec<String>, Vec<PredictionRecord>)> {
    if set.is_empty() {
        return Err(Error::invalid(format!(
            "evaluation set `{}` is empty",
            set.name
        )));
    }
    if state.net.input_len() != set.items[0].image.data.len() {
        return Err(Error::invalid(format!(
            "checkpoint expects {:?} inputs but the evaluation crops differ",
            state.config().input_size
        )));
    }
    let mut ids = Vec::with_capacity(set.len());
    let mut records = Vec::with_capacity(set.len());
    for item in &set.items {
        ids.push(item.id.clone());
        records.push(state.predict(&item.image, item.class, Some(item.objectness))?);
    }
    Ok((ids, records))
}

/// Writes the report and reliability bins for `records` into `out_dir`.
pub fn write_report(
    records: &[PredictionRecord],
    bins: &[usize],
    out_dir: &Path,
) -> Result<CalibrationReport> {
    let rep = calibration::report(records, bins)?;
    io::create_dir_all(out_dir)?;
    io::write_atomic(&out_dir.join(REPORT), &io::report_csv(&rep)?)?;
    io::write_atomic(&out_dir.join(BINS), &io::bins_csv(&rep.bins)?)?;
    Ok(rep)
}

/// Predictions, report and bins for one evaluation set.
pub fn evaluate(
    state: &ModelState,
    set: &EvalSet,
    bins: &[usize],
    out_dir: &Path,
) -> Result<CalibrationReport> {
    let (ids, records) = predict_set(state, set)?;
    io::create_dir_all(out_dir)?;
    // Round-trip through the CSV so the inline report and one recomputed
    // later from the file agree to the bit.
    let bytes = io::predictions_csv(&ids, &records)?;
    let path = out_dir.join(PREDICTIONS);
    io::write_atomic(&path, &bytes)?;
    let (_, records) = io::read_predictions_csv(&path)?;
    write_report(&records, bins, out_dir)
}

/// Recomputes a report from any predictions CSV.
pub fn report_from_predictions(
    predictions: &Path,
    bins: &[usize],
    out_dir: &Path,
) -> Result<CalibrationReport> {
    let (_, records) = io::read_predictions_csv(predictions)?;
    write_report(&records, bins, out_dir)
}

pub fn load_policy_checkpoint(runs_dir: &Path, mode: &PolicyMode) -> Result<ModelState> {
    let path = runs_dir.join(policy_dir_name(mode)).join(CHECKPOINT);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no checkpoint for policy `{mode}`; train it first with `als train --policy {mode}`"),
            ),
        ));
    }
    io::load_checkpoint(&path)
}

/// One policy's row of the context-dependence comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub policy: String,
    pub context: CalibrationReport,
    pub object: CalibrationReport,
}

pub const COMPARISON_HEADER: [&str; 12] = [
    "policy",
    "ctx_acc",
    "ctx_oconf",
    "ctx_uconf",
    "ctx_aconf",
    "obj_acc",
    "obj_oconf",
    "obj_uconf",
    "obj_aconf",
    "obj_mean_dev",
    "obj_ece",
    "obj_mce",
];

impl ComparisonRow {
    fn cells(&self) -> Vec<String> {
        let c = &self.context;
        let o = &self.object;
        vec![
            self.policy.clone(),
            c.accuracy.to_string(),
            c.overconfidence.value.to_string(),
            c.underconfidence.value.to_string(),
            c.avg_confidence.to_string(),
            o.accuracy.to_string(),
            o.overconfidence.value.to_string(),
            o.underconfidence.value.to_string(),
            o.avg_confidence.to_string(),
            o.mean_deviation.map(|v| v.to_string()).unwrap_or_default(),
            o.ece.first().map(|e| e.1.to_string()).unwrap_or_default(),
            o.mce.to_string(),
        ]
    }
}

/// Evaluates each policy's checkpoint under `runs_dir` on the object and
/// context-only sets and writes `comparison.csv` to `out`.
pub fn context_experiment(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    runs_dir: &Path,
    policies: &[PolicyMode],
    out: &Path,
) -> Result<Vec<ComparisonRow>> {
    if policies.is_empty() {
        return Err(Error::invalid("no policies to compare"));
    }
    let states = policies
        .iter()
        .map(|m| load_policy_checkpoint(runs_dir, m))
        .collect::<Result<Vec<_>>>()?;
    let (object_set, context_set) = data.eval_sets(cfg)?;
    let mut rows = Vec::with_capacity(policies.len());
    for (mode, state) in policies.iter().zip(&states) {
        let dir = runs_dir.join(policy_dir_name(mode));
        let object = evaluate(state, &object_set, &cfg.bins, &dir.join("eval_object"))?;
        let context = evaluate(state, &context_set, &cfg.bins, &dir.join("eval_context"))?;
        rows.push(ComparisonRow {
            policy: mode.to_string(),
            context,
            object,
        });
    }
    let cells: Vec<Vec<String>> = rows.iter().map(ComparisonRow::cells).collect();
    io::write_atomic(out, &io::table_csv(&COMPARISON_HEADER, &cells)?)?;
    Ok(rows)
}

/// Data generation, training of every configured policy and the comparison,
/// all under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ComparisonRow>> {
    cfg.validate()?;
    let policies = cfg.policy_modes()?;
    let data_dir = out_dir.join("data");
    gen_data(cfg, &data_dir)?;
    let data = load_data(&data_dir)?;
    let runs = out_dir.join("runs");
    for mode in &policies {
        train_policy(cfg, &data, mode, &runs.join(policy_dir_name(mode)))?;
    }
    context_experiment(cfg, &data, &runs, &policies, &out_dir.join(COMPARISON))
}

/// How annotated images are transformed before labeling: `identity`,
/// `center:<fraction>` or `crop:x,y,w,h` with an optional trailing `,flip`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformSpec {
    Identity,
    Center(f64),
    Crop { crop: BoundingBox, hflip: bool },
}

impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "bad transform `{s}` (identity, center:<f> or crop:x,y,w,h[,flip])"
            ))
        };
        if s == "identity" {
            return Ok(TransformSpec::Identity);
        }
        if let Some(f) = s.strip_prefix("center:") {
            let f: f64 = f.parse().map_err(|_| bad())?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad());
            }
            return Ok(TransformSpec::Center(f));
        }
        let rest = s.strip_prefix("crop:").ok_or_else(bad)?;
        let mut parts: Vec<&str> = rest.split(',').collect();
        let hflip = parts.last() == Some(&"flip");
        if hflip {
            parts.pop();
        }
        if parts.len() != 4 {
            return Err(bad());
        }
        let v = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformSpec::Crop {
            crop: BoundingBox::new(v[0], v[1], v[2], v[3])?,
            hflip,
        })
    }
}

impl TransformSpec {
    pub fn for_frame(&self, frame: ImageFrame) -> Result<AugmentTransform> {
        let size = (frame.width, frame.height);
        match *self {
            TransformSpec::Identity => Ok(AugmentTransform::identity(frame)),
            TransformSpec::Center(f) => AugmentTransform::center(frame, f, size),
            TransformSpec::Crop { crop, hflip } => AugmentTransform::new(crop, size, hflip),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub sample_id: String,
    pub objectness: f64,
    /// The policy's smoothing factor for this sample: 0 for hard labels,
    /// the fixed value for uniform smoothing, one minus objectness for
    /// adaptive smoothing.
    pub alpha: f64,
    pub class: usize,
    pub label: LabelVector,
}

/// Target vectors for annotated samples seen through `transform`.
pub fn label_annotations(
    anns: &[Annotation],
    transform: &TransformSpec,
    policy: &LabelingPolicy,
) -> Result<Vec<LabelRow>> {
    anns.iter()
        .map(|a| {
            let id = a.sample_id();
            let with_id = |e: Error| Error::invalid(format!("{id}: {e}"));
            let frame = a.image_frame().map_err(with_id)?;
            let t = transform.for_frame(frame).map_err(with_id)?;
            let objectness = transformed_objectness(&a.bounding_box().map_err(with_id)?, frame, &t)
                .map_err(with_id)?;
            let label = policy.label(a.class, objectness).map_err(with_id)?;
            let alpha = match policy.mode {
                PolicyMode::Hard => 0.0,
                PolicyMode::UniformSmoothing { alpha } => alpha,
                PolicyMode::Adaptive { .. } => adaptive_alpha(objectness)?,
            };
            Ok(LabelRow {
                sample_id: id,
                objectness,
                alpha,
                class: a.class,
                label,
            })
        })
        .collect()
}

/// `sample_id, objectness, alpha, p0 .. p{K-1}`, or with `sparse`
/// `sample_id, objectness, alpha, y, rest` where the last two cells read
/// `y:<p_y>` and `rest:<p_other>`.
pub fn label_csv(rows: &[LabelRow], num_classes: usize, sparse: bool) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["sample_id", "objectness", "alpha"]
        .map(String::from)
        .to_vec();
    if sparse {
        header.extend(["y".to_string(), "rest".to_string()]);
    } else {
        header.extend((0..num_classes).map(|i| format!("p{i}")));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut cells = Vec::with_capacity(rows.len());
    for r in rows {
        let p = r.label.probs();
        let mut row = vec![
            r.sample_id.clone(),
            r.objectness.to_string(),
            r.alpha.to_string(),
        ];
        if sparse {
            let others: Vec<f64> = (0..p.len())
                .filter(|&i| i != r.class)
                .map(|i| p[i])
                .collect();
            let rest = others[0];
            if others.iter().any(|&v| (v - rest).abs() > 1e-12) {
                return Err(Error::invalid(format!(
                    "{}: off-class entries are not uniform",
                    r.sample_id
                )));
            }
            row.push(format!("y:{}", p[r.class]));
            row.push(format!("rest:{rest}"));
        } else {
            row.extend(p.iter().map(|v| v.to_string()));
        }
        cells.push(row);
    }
    io::table_csv(&header, &cells)
}

/// Caps the worker pool used for data generation and gradient shards.
/// Results do not depend on the count.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
