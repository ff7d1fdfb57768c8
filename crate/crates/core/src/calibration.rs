//! Calibration metrics over top-1 predictions.
//!
//! Confidence bins are equal width over `[0, 1]`, each half-open on the left,
//! `(lower, upper]`, with a confidence of exactly 0 assigned to the first
//! bin. All means use a correctly rounded sum, so every metric is exactly
//! invariant to record order and to duplicating the whole record set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
    pub true_class: usize,
    pub objectness: Option<f64>,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.predicted == self.true_class
    }
}

/// Shewchuk's exact partial sums; `value()` is the correctly rounded total.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        ExactSum::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // round-half-even correction across the remaining partials
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<ExactSum>().value()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub mean_confidence: f64,
    /// Zero for an empty bin.
    pub accuracy: f64,
}

impl ReliabilityBin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.mean_confidence).abs()
    }
}

fn bin_edges(b: usize, n: usize) -> (f64, f64) {
    (b as f64 / n as f64, (b + 1) as f64 / n as f64)
}

/// Bin of a confidence, consistent with the float edges of [`bin_edges`].
pub fn bin_index(confidence: f64, num_bins: usize) -> usize {
    let n = num_bins;
    let mut b = ((confidence * n as f64).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    while b > 0 && confidence <= bin_edges(b, n).0 {
        b -= 1;
    }
    while b + 1 < n && confidence > bin_edges(b, n).1 {
        b += 1;
    }
    b
}

fn check_records(records: &[PredictionRecord], num_bins: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no prediction records"));
    }
    if num_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if let Some(r) = records
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.confidence))
    {
        return Err(Error::invalid(format!(
            "confidence {} outside [0, 1]",
            r.confidence
        )));
    }
    Ok(())
}

/// Per-bin counts, mean confidence and accuracy.
pub fn reliability_bins(
    records: &[PredictionRecord],
    num_bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    check_records(records, num_bins)?;
    let mut conf = vec![ExactSum::new(); num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut count = vec![0usize; num_bins];
    for r in records {
        let b = bin_index(r.confidence, num_bins);
        conf[b].add(r.confidence);
        count[b] += 1;
        correct[b] += r.is_correct() as usize;
    }
    Ok((0..num_bins)
        .map(|b| {
            let (lower, upper) = bin_edges(b, num_bins);
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (
                    conf[b].value() / count[b] as f64,
                    correct[b] as f64 / count[b] as f64,
                )
            };
            ReliabilityBin {
                lower,
                upper,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect())
}

/// `sum_b (count_b / N) |acc_b - conf_b|`, summed in bin order.
pub fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    exact_sum(
        bins.iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n as f64) * b.gap()),
    )
}

pub fn mce_from_bins(bins: &[ReliabilityBin]) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(ReliabilityBin::gap)
        .fold(0.0, f64::max)
}

pub fn ece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    Ok(ece_from_bins(&reliability_bins(records, num_bins)?))
}

pub fn mce(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    Ok(mce_from_bins(&reliability_bins(records, num_bins)?))
}

/// A conditional mean that may have an empty conditioning set. Empty sets
/// report 0 with `undefined` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMean {
    pub value: f64,
    pub undefined: bool,
}

fn conditional_mean<I: Iterator<Item = f64>>(values: I) -> ConditionalMean {
    let mut s = ExactSum::new();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    if n == 0 {
        ConditionalMean {
            value: 0.0,
            undefined: true,
        }
    } else {
        ConditionalMean {
            value: s.value() / n as f64,
            undefined: false,
        }
    }
}

/// Mean confidence on wrong predictions.
pub fn overconfidence(records: &[PredictionRecord]) -> ConditionalMean {
    conditional_mean(
        records
            .iter()
            .filter(|r| !r.is_correct())
            .map(|r| r.confidence),
    )
}

/// Mean `1 - confidence` on correct predictions.
pub fn underconfidence(records: &[PredictionRecord]) -> ConditionalMean {
    conditional_mean(
        records
            .iter()
            .filter(|r| r.is_correct())
            .map(|r| 1.0 - r.confidence),
    )
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no prediction records"));
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn average_confidence(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no prediction records"));
    }
    Ok(exact_sum(records.iter().map(|r| r.confidence)) / records.len() as f64)
}

/// Mean `|confidence - objectness|`. Every record must carry objectness.
pub fn mean_deviation(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no prediction records"));
    }
    let mut s = ExactSum::new();
    for (i, r) in records.iter().enumerate() {
        let o = r
            .objectness
            .ok_or_else(|| Error::invalid(format!("record {i} has no objectness")))?;
        s.add((r.confidence - o).abs());
    }
    Ok(s.value() / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub n: usize,
    pub accuracy: f64,
    /// `(num_bins, ece)` in the requested order.
    pub ece: Vec<(usize, f64)>,
    /// MCE at the first bin count.
    pub mce: f64,
    pub overconfidence: ConditionalMean,
    pub underconfidence: ConditionalMean,
    pub avg_confidence: f64,
    /// Present when every record carries objectness.
    pub mean_deviation: Option<f64>,
    /// Reliability bins at the first bin count.
    pub bins: Vec<ReliabilityBin>,
}

impl CalibrationReport {
    pub fn ece_at(&self, num_bins: usize) -> Option<f64> {
        self.ece
            .iter()
            .find(|(b, _)| *b == num_bins)
            .map(|&(_, v)| v)
    }
}

pub const DEFAULT_BINS: [usize; 2] = [100, 15];

pub fn report(records: &[PredictionRecord], num_bins_list: &[usize]) -> Result<CalibrationReport> {
    let first = *num_bins_list
        .first()
        .ok_or_else(|| Error::invalid("need at least one bin count"))?;
    let bins = reliability_bins(records, first)?;
    let mut ece_list = vec![(first, ece_from_bins(&bins))];
    for &nb in &num_bins_list[1..] {
        ece_list.push((nb, ece(records, nb)?));
    }
    let mean_dev = if records.iter().all(|r| r.objectness.is_some()) {
        Some(mean_deviation(records)?)
    } else {
        None
    };
    Ok(CalibrationReport {
        n: records.len(),
        accuracy: accuracy(records)?,
        mce: mce_from_bins(&bins),
        ece: ece_list,
        overconfidence: overconfidence(records),
        underconfidence: underconfidence(records),
        avg_confidence: average_confidence(records)?,
        mean_deviation: mean_dev,
        bins,
    })
}

/// Mean and sample standard deviation of ECE over bootstrap resamples of
/// the records.
pub fn bootstrap_ece(
    records: &[PredictionRecord],
    num_bins: usize,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_records(records, num_bins)?;
    if resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    let mut values = Vec::with_capacity(resamples);
    let mut draw = Vec::with_capacity(records.len());
    for r in 0..resamples {
        let mut rng = stream_rng(seed, "bootstrap", r as u64);
        draw.clear();
        for _ in 0..records.len() {
            draw.push(records[rng.gen_range(0..records.len())].clone());
        }
        values.push(ece(&draw, num_bins)?);
    }
    let mean = exact_sum(values.iter().copied()) / resamples as f64;
    let var = exact_sum(values.iter().map(|v| (v - mean).powi(2))) / (resamples - 1) as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(confidence: f64, correct: bool) -> PredictionRecord {
        PredictionRecord {
            probs: vec![confidence, 1.0 - confidence],
            predicted: 0,
            confidence,
            true_class: if correct { 0 } else { 1 },
            objectness: None,
        }
    }

    #[test]
    fn exact_sum_is_correctly_rounded() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
        let v = [1.0, 1e-16, 1e-16];
        assert_eq!(exact_sum(v), 1.0000000000000002);
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.10000001, 10), 1);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.6, 10), 5);
        assert_eq!(bin_index(0.5, 1), 0);
    }

    #[test]
    fn perfect_calibration_is_zero() {
        // Two bins, each with accuracy equal to its mean confidence.
        let mut r = vec![rec(0.5, true), rec(0.5, false)];
        r.extend([
            rec(0.75, true),
            rec(0.75, true),
            rec(0.75, true),
            rec(0.75, false),
        ]);
        assert_eq!(ece(&r, 10).unwrap(), 0.0);
        assert_eq!(mce(&r, 10).unwrap(), 0.0);
    }

    #[test]
    fn single_confident_mistake() {
        let r = [rec(1.0, false)];
        assert_eq!(ece(&r, 15).unwrap(), 1.0);
        assert_eq!(mce(&r, 15).unwrap(), 1.0);
    }

    #[test]
    fn four_record_hand_example() {
        let r = [
            rec(0.6, true),
            rec(0.6, false),
            rec(0.9, true),
            rec(0.9, true),
        ];
        assert!((ece(&r, 10).unwrap() - 0.1).abs() < 1e-12);
        assert!((mce(&r, 10).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(ece(&[], 10).is_err());
        assert!(mce(&[], 10).is_err());
        assert!(ece(&[rec(0.5, true)], 0).is_err());
        assert!(report(&[], &DEFAULT_BINS).is_err());
    }

    #[test]
    fn conditional_means() {
        let wrong = [rec(0.9, false), rec(0.9, false)];
        assert_eq!(overconfidence(&wrong).value, 0.9);
        let none_wrong = [rec(0.7, true)];
        let o = overconfidence(&none_wrong);
        assert!(o.undefined);
        assert_eq!(o.value, 0.0);
        let right = [rec(1.0, true), rec(1.0, true)];
        assert_eq!(underconfidence(&right).value, 0.0);
        let k = 10.0;
        let uniform = [rec(1.0 / k, true)];
        assert!((underconfidence(&uniform).value - (1.0 - 1.0 / k)).abs() < 1e-15);
    }

    #[test]
    fn mean_deviation_hand_example() {
        let mut a = rec(0.8, true);
        a.objectness = Some(0.5);
        let mut b = rec(0.3, true);
        b.objectness = Some(0.4);
        assert!((mean_deviation(&[a.clone(), b]).unwrap() - 0.2).abs() < 1e-15);
        let mut same = rec(0.4, true);
        same.objectness = Some(0.4);
        assert_eq!(mean_deviation(&[same]).unwrap(), 0.0);
        assert!(mean_deviation(&[a, rec(0.3, true)]).is_err());
    }

    #[test]
    fn all_correct_and_certain() {
        let r = vec![rec(1.0, true); 5];
        let rep = report(&r, &DEFAULT_BINS).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.ece_at(100), Some(0.0));
        assert_eq!(rep.ece_at(15), Some(0.0));
        assert_eq!(rep.mce, 0.0);
        assert!(rep.overconfidence.undefined);
        assert_eq!(rep.underconfidence.value, 0.0);
        assert_eq!(rep.bins.len(), 100);
        assert_eq!(rep.mean_deviation, None);
    }

    #[test]
    fn bootstrap_spread_is_finite() {
        let r: Vec<_> = (0..50)
            .map(|i| rec(0.5 + (i % 5) as f64 / 10.0, i % 3 != 0))
            .collect();
        let (mean, std) = bootstrap_ece(&r, 15, 100, 1).unwrap();
        assert!(mean > 0.0 && std > 0.0 && std < 0.5);
        assert_eq!(bootstrap_ece(&r, 15, 100, 1).unwrap(), (mean, std));
        assert!(bootstrap_ece(&r, 15, 1, 1).is_err());
    }
}
