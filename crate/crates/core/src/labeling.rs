//! Target vectors for one training sample.
//!
//! Every constructor returns a [`LabelVector`] on the probability simplex,
//! up to the rounding of its entries. All off-class entries of a smoothed
//! label are the same double.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    probs: Vec<f64>,
}

impl LabelVector {
    fn raw(probs: Vec<f64>) -> Self {
        LabelVector { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Accepts any non-negative vector summing to one within 1e-9.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("label needs at least two classes"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("label entries must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("label sums to {sum}, not 1")));
        }
        Ok(LabelVector { probs })
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_class(y: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if y >= k {
        return Err(Error::invalid(format!("class {y} out of range for K={k}")));
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name}={v} outside [0, 1]")));
    }
    Ok(())
}

pub fn hard_label(y: usize, k: usize) -> Result<LabelVector> {
    check_class(y, k)?;
    let mut probs = vec![0.0; k];
    probs[y] = 1.0;
    Ok(LabelVector { probs })
}

/// `1 - alpha` on the true class, `alpha / (K - 1)` everywhere else.
pub fn uniform_smooth_label(y: usize, k: usize, alpha: f64) -> Result<LabelVector> {
    check_class(y, k)?;
    check_unit("alpha", alpha)?;
    Ok(smoothed(y, k, alpha))
}

fn smoothed(y: usize, k: usize, alpha: f64) -> LabelVector {
    let off = alpha / (k - 1) as f64;
    let mut probs = vec![off; k];
    probs[y] = 1.0 - alpha;
    LabelVector::raw(probs)
}

/// Smoothing factor for a sample whose object covers `objectness` of the
/// (cropped) image.
pub fn adaptive_alpha(objectness: f64) -> Result<f64> {
    check_unit("objectness", objectness)?;
    Ok(1.0 - objectness)
}

/// What an adaptive label does for a sample with no visible object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroObjectness {
    /// Every class equiprobable.
    #[default]
    Uniform,
    /// The smoothing formula taken literally at alpha = 1: zero mass on the
    /// true class, `1 / (K - 1)` elsewhere. Kept for ablations.
    Raw,
}

/// `beta * smooth(alpha = 1 - objectness) + (1 - beta) * one_hot(y)`.
pub fn adaptive_label(y: usize, k: usize, objectness: f64, beta: f64) -> Result<LabelVector> {
    adaptive_label_with(y, k, objectness, beta, ZeroObjectness::Uniform)
}

pub fn adaptive_label_with(
    y: usize,
    k: usize,
    objectness: f64,
    beta: f64,
    zero: ZeroObjectness,
) -> Result<LabelVector> {
    check_class(y, k)?;
    check_unit("beta", beta)?;
    let alpha = adaptive_alpha(objectness)?;
    if beta == 0.0 {
        return hard_label(y, k);
    }
    let soft = if objectness == 0.0 && zero == ZeroObjectness::Uniform {
        vec![1.0 / k as f64; k]
    } else {
        let off = alpha / (k - 1) as f64;
        let mut v = vec![off; k];
        v[y] = 1.0 - alpha;
        v
    };
    if beta == 1.0 {
        return Ok(LabelVector::raw(soft));
    }
    let probs = soft
        .iter()
        .enumerate()
        .map(|(i, &s)| beta * s + if i == y { 1.0 - beta } else { 0.0 })
        .collect();
    Ok(LabelVector::raw(probs))
}

/// Target for an image with every object removed.
pub fn context_label(k: usize) -> Result<LabelVector> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    Ok(LabelVector::raw(vec![1.0 / k as f64; k]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyMode {
    Hard,
    UniformSmoothing { alpha: f64 },
    Adaptive { beta: f64 },
}

impl PolicyMode {
    /// Only adaptive policies are trained on context-only items.
    pub fn uses_context_items(&self) -> bool {
        matches!(self, PolicyMode::Adaptive { .. })
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyMode::Hard => write!(f, "hard"),
            PolicyMode::UniformSmoothing { alpha } => write!(f, "uniform:{alpha:?}"),
            PolicyMode::Adaptive { beta } => write!(f, "adaptive:{beta:?}"),
        }
    }
}

impl FromStr for PolicyMode {
    type Err = Error;

    /// `hard`, `uniform:<alpha>` or `adaptive:<beta>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let parse_unit = |a: Option<&str>, what: &str| -> Result<f64> {
            let a = a.ok_or_else(|| Error::invalid(format!("policy `{s}` needs :<{what}>")))?;
            let v: f64 = a
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} in policy `{s}`")))?;
            check_unit(what, v)?;
            Ok(v)
        };
        match name {
            "hard" if arg.is_none() => Ok(PolicyMode::Hard),
            "uniform" => Ok(PolicyMode::UniformSmoothing {
                alpha: parse_unit(arg, "alpha")?,
            }),
            "adaptive" => Ok(PolicyMode::Adaptive {
                beta: parse_unit(arg, "beta")?,
            }),
            _ => Err(Error::invalid(format!(
                "unknown policy `{s}` (expected hard, uniform:<alpha> or adaptive:<beta>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelingPolicy {
    pub mode: PolicyMode,
    pub num_classes: usize,
    pub zero_objectness: ZeroObjectness,
}

impl LabelingPolicy {
    pub fn new(mode: PolicyMode, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        match mode {
            PolicyMode::Hard => {}
            PolicyMode::UniformSmoothing { alpha } => check_unit("alpha", alpha)?,
            PolicyMode::Adaptive { beta } => check_unit("beta", beta)?,
        }
        Ok(LabelingPolicy {
            mode,
            num_classes,
            zero_objectness: ZeroObjectness::Uniform,
        })
    }

    /// Target for an object sample of class `y` whose visible proportion is
    /// `objectness`. Only the adaptive mode looks at `objectness`.
    pub fn label(&self, y: usize, objectness: f64) -> Result<LabelVector> {
        let k = self.num_classes;
        match self.mode {
            PolicyMode::Hard => hard_label(y, k),
            PolicyMode::UniformSmoothing { alpha } => uniform_smooth_label(y, k, alpha),
            PolicyMode::Adaptive { beta } => {
                adaptive_label_with(y, k, objectness, beta, self.zero_objectness)
            }
        }
    }
}
