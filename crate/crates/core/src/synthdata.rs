//! Deterministic synthetic scenes with class-correlated backgrounds.
//!
//! Each sample is one rectangular object carrying a class-specific
//! high-contrast glyph, pasted on a low-contrast oriented grating whose
//! texture matches the object's class with probability
//! `context_correlation`. The object box and mask are exact, so objectness
//! is known without estimation. Sample `i` depends only on `(seed, i)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    transformed_objectness, AugmentTransform, BoundingBox, ImageFrame, ObjectMask, Raster,
};
use crate::rng::{derive_seed, stream_rng};
use crate::{Error, Result};

const MAX_SIZE_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub image_size: (u32, u32),
    /// Object side length as a fraction of the frame side, `(min, max)`.
    pub object_size_range: (f64, f64),
    /// Probability that the background texture is the object's own class
    /// texture rather than one drawn uniformly over all classes.
    pub context_correlation: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_classes: 10,
            image_size: (64, 64),
            object_size_range: (0.35, 0.85),
            context_correlation: 0.9,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("scene needs at least 2 classes"));
        }
        ImageFrame::new(self.image_size.0, self.image_size.1)?;
        let (lo, hi) = self.object_size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "object_size_range ({lo}, {hi}) must satisfy 0 < min <= max <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.context_correlation) {
            return Err(Error::invalid("context_correlation outside [0, 1]"));
        }
        Ok(())
    }

    pub fn frame(&self) -> ImageFrame {
        ImageFrame {
            width: self.image_size.0,
            height: self.image_size.1,
        }
    }

    /// Background texture associated with a class.
    pub fn texture_for_class(&self, class: usize) -> usize {
        class
    }

    /// Same scene statistics on an independent seed stream.
    pub fn with_stream(&self, tag: &str) -> SceneSpec {
        SceneSpec {
            seed: derive_seed(self.seed, tag),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: Raster,
    pub mask: ObjectMask,
    pub class: usize,
    pub bbox: BoundingBox,
    pub frame: ImageFrame,
    /// Background texture id; unknown for samples read from disk without it.
    pub texture: Option<usize>,
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn background_value(texture: usize, x: f64, y: f64, phase: f64) -> f64 {
    let orientation = (texture % 5) as f64 * std::f64::consts::PI / 5.0;
    let period = if (texture / 5).is_multiple_of(2) {
        6.0
    } else {
        14.0
    };
    let base = 0.32 + 0.036 * (texture % 10) as f64;
    let t = x * orientation.cos() + y * orientation.sin();
    base + 0.1 * (std::f64::consts::TAU * t / period + phase).sin()
}

/// Glyph intensity at normalised object coordinates `(u, v)` in `[0, 1)`.
fn glyph_on(class: usize, u: f64, v: f64) -> bool {
    let cell = |a: f64, n: f64| (a * n).floor() as i64;
    let du = (u - 0.5).abs();
    let dv = (v - 0.5).abs();
    let on = match class % 10 {
        0 => cell(v, 4.0) % 2 == 0,
        1 => cell(u, 4.0) % 2 == 0,
        2 => (cell(u, 2.0) + cell(v, 2.0)) % 2 == 0,
        3 => (cell(u, 4.0) + cell(v, 4.0)) % 2 == 0,
        4 => cell(u + v, 3.0) % 2 == 0,
        5 => cell(u - v + 1.0, 3.0) % 2 == 0,
        6 => cell(du.max(dv), 6.0) % 2 == 0,
        7 => du < 0.17 || dv < 0.17,
        8 => du.max(dv) > 0.3,
        _ => du * du + dv * dv < 0.16,
    };
    on ^ ((class / 10) % 2 == 1)
}

/// Sample `index` of the scene. Pure in `(spec.seed, index)`.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Result<AnnotatedSample> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, "sample", index);
    let frame = spec.frame();
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let class = rng.gen_range(0..spec.num_classes);

    let (lo, hi) = spec.object_size_range;
    let mut size = None;
    for _ in 0..MAX_SIZE_RETRIES {
        let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let w = (s * fw).round();
        let h = (s * fh).round();
        if w >= 1.0 && h >= 1.0 && w <= fw && h <= fh {
            size = Some((w, h));
            break;
        }
    }
    let (w, h) = size.ok_or_else(|| {
        Error::invalid(format!(
            "object size range ({lo}, {hi}) cannot fit a {}x{} frame",
            frame.width, frame.height
        ))
    })?;
    let x = rng.gen_range(0..=(fw - w) as u32) as f64;
    let y = rng.gen_range(0..=(fh - h) as u32) as f64;
    let bbox = BoundingBox::new(x, y, w, h)?;

    let texture = if rng.gen_bool(spec.context_correlation) {
        spec.texture_for_class(class)
    } else {
        spec.texture_for_class(rng.gen_range(0..spec.num_classes))
    };
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mask = ObjectMask::from_box(&bbox, frame);
    let (width, height) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(width * height);
    for py in 0..height {
        for px in 0..width {
            let noise = rng.gen_range(-0.04..0.04);
            let value = if mask.get(px, py) {
                let u = (px as f64 + 0.5 - x) / w;
                let v = (py as f64 + 0.5 - y) / h;
                if glyph_on(class, u, v) {
                    0.92
                } else {
                    0.08
                }
            } else {
                background_value(texture, px as f64, py as f64, phase)
            };
            data.push(quantize(value + noise));
        }
    }
    Ok(AnnotatedSample {
        image: Raster::new(width, height, data)?,
        mask,
        class,
        bbox,
        frame,
        texture: Some(texture),
    })
}

/// A generated split plus the mean pixel of the training split, which is the
/// fill value for object removal.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<AnnotatedSample>,
    pub mean_pixel: f64,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, n: usize) -> Result<Dataset> {
        spec.validate()?;
        let samples = (0..n as u64)
            .into_par_iter()
            .map(|i| generate_sample(spec, i))
            .collect::<Result<Vec<_>>>()?;
        let mean_pixel = mean_pixel(&samples);
        Ok(Dataset {
            spec: spec.clone(),
            samples,
            mean_pixel,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mean over every pixel of every sample, accumulated in a fixed order.
pub fn mean_pixel(samples: &[AnnotatedSample]) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for s in samples {
        sum += s.image.data.iter().map(|&v| v as f64).sum::<f64>();
        count += s.image.data.len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// The image with every object pixel replaced by `mean_pixel`.
pub fn remove_objects(sample: &AnnotatedSample, mean_pixel: f64) -> Raster {
    let fill = mean_pixel as f32;
    let data = sample
        .image
        .data
        .iter()
        .zip(sample.mask.bits())
        .map(|(&v, &m)| if m { fill } else { v })
        .collect();
    Raster {
        width: sample.image.width,
        height: sample.image.height,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Probability that a training draw is a context-only item.
    pub context_fraction: f64,
    /// Crop area as a fraction of the frame area.
    pub crop_scale_range: (f64, f64),
    /// Crop width / height.
    pub aspect_range: (f64, f64),
    pub output_size: (u32, u32),
    /// Side fraction of the centred evaluation crop.
    pub eval_crop_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            context_fraction: 0.15,
            crop_scale_range: (0.08, 1.0),
            aspect_range: (0.75, 4.0 / 3.0),
            output_size: (32, 32),
            eval_crop_fraction: 0.875,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.context_fraction) {
            return Err(Error::invalid(format!(
                "context_fraction {} outside [0, 1)",
                self.context_fraction
            )));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(
                "crop_scale_range must satisfy 0 < min <= max <= 1",
            ));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::invalid("aspect_range must satisfy 0 < min <= max"));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::invalid("output_size must be positive"));
        }
        if !(self.eval_crop_fraction > 0.0 && self.eval_crop_fraction <= 1.0) {
            return Err(Error::invalid("eval_crop_fraction outside (0, 1]"));
        }
        Ok(())
    }
}

/// Random-resized-crop with horizontal flip. The crop is pixel aligned and
/// always inside the frame.
pub fn random_crop<R: Rng>(
    rng: &mut R,
    frame: ImageFrame,
    cfg: &SamplerConfig,
) -> AugmentTransform {
    let (fw, fh) = (frame.width as f64, frame.height as f64);
    let area = fw * fh;
    let mut crop = None;
    for _ in 0..10 {
        let scale = rng.gen_range(cfg.crop_scale_range.0..=cfg.crop_scale_range.1);
        let ratio = rng.gen_range(cfg.aspect_range.0..=cfg.aspect_range.1);
        let w = (area * scale * ratio).sqrt().round();
        let h = (area * scale / ratio).sqrt().round();
        if w >= 1.0 && h >= 1.0 && w <= fw && h <= fh {
            let x = rng.gen_range(0..=(fw - w) as u32) as f64;
            let y = rng.gen_range(0..=(fh - h) as u32) as f64;
            crop = Some(BoundingBox { x, y, w, h });
            break;
        }
    }
    let crop = crop.unwrap_or_else(|| frame.as_box());
    let hflip = rng.gen_bool(0.5);
    AugmentTransform {
        crop,
        output_size: cfg.output_size,
        hflip,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ItemKind {
    Object { class: usize, objectness: f64 },
    Context,
}

#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub image: Raster,
    pub kind: ItemKind,
    pub sample_index: usize,
    pub transform: AugmentTransform,
}

/// Training draw number `step`. The sample and crop are drawn from one
/// stream and the context decision from another, so runs that differ only
/// in `context_fraction` see the same crops at every non-context step.
pub fn draw_training_item(
    dataset: &Dataset,
    cfg: &SamplerConfig,
    step: u64,
) -> Result<TrainingItem> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot draw from an empty dataset"));
    }
    let is_context = stream_rng(cfg.seed, "context", step).gen::<f64>() < cfg.context_fraction;
    let mut rng = stream_rng(cfg.seed, "item", step);
    let sample_index = rng.gen_range(0..dataset.len());
    let sample = &dataset.samples[sample_index];
    let transform = random_crop(&mut rng, sample.frame, cfg);
    if is_context {
        let image = transform.apply_raster(&remove_objects(sample, dataset.mean_pixel));
        return Ok(TrainingItem {
            image,
            kind: ItemKind::Context,
            sample_index,
            transform,
        });
    }
    let objectness = transformed_objectness(&sample.bbox, sample.frame, &transform)?;
    Ok(TrainingItem {
        image: transform.apply_raster(&sample.image),
        kind: ItemKind::Object {
            class: sample.class,
            objectness,
        },
        sample_index,
        transform,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub image: Raster,
    pub class: usize,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Centre-cropped object and context-only evaluation sets built from the
/// same validation samples. `mean_pixel` is the training-split mean.
pub fn eval_sets_from_samples(
    samples: &[AnnotatedSample],
    cfg: &SamplerConfig,
    mean_pixel: f64,
) -> Result<(EvalSet, EvalSet)> {
    let mut object = Vec::with_capacity(samples.len());
    let mut context = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let t = AugmentTransform::center(s.frame, cfg.eval_crop_fraction, cfg.output_size)?;
        let objectness = transformed_objectness(&s.bbox, s.frame, &t)?;
        object.push(EvalItem {
            id: format!("val-{i:06}"),
            image: t.apply_raster(&s.image),
            class: s.class,
            objectness,
        });
        context.push(EvalItem {
            id: format!("val-{i:06}"),
            image: t.apply_raster(&remove_objects(s, mean_pixel)),
            class: s.class,
            // every object pixel has been replaced
            objectness: 0.0,
        });
    }
    Ok((
        EvalSet {
            name: "object".into(),
            items: object,
        },
        EvalSet {
            name: "context".into(),
            items: context,
        },
    ))
}

/// Generates `n_val` validation samples on a stream disjoint from training
/// and returns `(object_val, context_val)`.
pub fn build_eval_sets(
    spec: &SceneSpec,
    n_val: usize,
    cfg: &SamplerConfig,
    mean_pixel: f64,
) -> Result<(EvalSet, EvalSet)> {
    if n_val == 0 {
        return Err(Error::invalid("n_val must be at least 1"));
    }
    let val = Dataset::generate(&spec.with_stream("val"), n_val)?;
    eval_sets_from_samples(&val.samples, cfg, mean_pixel)
}
