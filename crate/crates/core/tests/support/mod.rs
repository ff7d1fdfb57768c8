//! Oracle checks shared by the integration tests and the acceptance
//! harness. Each returns a one-line summary on success and the first
//! counterexample on failure.

#![allow(dead_code)]

use als_core::calibration::{self, PredictionRecord};
use als_core::geometry::{
    apply_transform, objectness_pixels, transformed_objectness, AugmentTransform, BoundingBox,
    ImageFrame, ObjectMask,
};
use als_core::labeling::{
    adaptive_label, adaptive_label_with, hard_label, uniform_smooth_label, LabelVector,
    ZeroObjectness,
};
use als_core::loss::{cross_entropy, grad_logits};
use als_core::model::{NetConfig, Network};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // negated so that a NaN operand fails the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ------------------------------------------------------------------ labels

fn random_objectness<R: Rng>(rng: &mut R) -> f64 {
    match rng.gen_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        2 => rng.gen_range(0.0..1e-3),
        _ => rng.gen_range(0.0..=1.0),
    }
}

fn random_beta<R: Rng>(rng: &mut R) -> f64 {
    match rng.gen_range(0..6) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen_range(0.0..=1.0),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Simplex closure, the beta = 0 and beta = 1 reductions, the true-class
/// floor and monotonicity in objectness over `cases` random draws.
pub fn label_algebra(cases: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst_sum = 0.0f64;
    let mut worst_equiv = 0.0f64;
    for case in 0..cases {
        let k = match case % 4 {
            0 => 2,
            1 => 10,
            2 => 100,
            _ => rng.gen_range(2..=100),
        };
        let y = rng.gen_range(0..k);
        let o = random_objectness(&mut rng);
        let beta = random_beta(&mut rng);
        let ctx = format!("case {case}: k={k} y={y} objectness={o} beta={beta}");

        for zero in [ZeroObjectness::Uniform, ZeroObjectness::Raw] {
            let l = adaptive_label_with(y, k, o, beta, zero).map_err(|e| format!("{ctx}: {e}"))?;
            let p = l.probs();
            let sum: f64 = p.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            ensure!((sum - 1.0).abs() <= 1e-12, "{ctx}: sum {sum}");
            ensure!(p.iter().all(|&v| v >= 0.0), "{ctx}: negative entry {p:?}");
            ensure!(
                p[y] >= 1.0 - beta,
                "{ctx}: true-class mass {} below 1 - beta",
                p[y]
            );

            // monotone in objectness, except across the uniform rule at 0
            let o2 = (o + rng.gen_range(0.0..=1.0) * (1.0 - o)).min(1.0);
            if zero == ZeroObjectness::Raw || o > 0.0 {
                let l2 = adaptive_label_with(y, k, o2, beta, zero).unwrap();
                ensure!(
                    l2.probs()[y] >= p[y],
                    "{ctx}: probs[y] fell from {} to {} at objectness {o2}",
                    p[y],
                    l2.probs()[y]
                );
            }
        }

        let zero = adaptive_label(y, k, o, 0.0).unwrap();
        ensure!(
            zero == hard_label(y, k).unwrap(),
            "{ctx}: beta=0 is not one-hot"
        );

        if o > 0.0 {
            let a = adaptive_label(y, k, o, 1.0).unwrap();
            let u = uniform_smooth_label(y, k, 1.0 - o).unwrap();
            let d = max_abs_diff(a.probs(), u.probs());
            worst_equiv = worst_equiv.max(d);
            ensure!(
                d <= 1e-12,
                "{ctx}: beta=1 differs from uniform smoothing by {d}"
            );
        }
        let raw = adaptive_label_with(y, k, o, 1.0, ZeroObjectness::Raw).unwrap();
        let u = uniform_smooth_label(y, k, 1.0 - o).unwrap();
        ensure!(
            max_abs_diff(raw.probs(), u.probs()) <= 1e-12,
            "{ctx}: literal rule differs from uniform smoothing"
        );
    }
    Ok(format!(
        "{cases} cases, max |sum-1| {worst_sum:.1e}, max beta=1 gap {worst_equiv:.1e}"
    ))
}

// -------------------------------------------------------------- objectness

fn int_box<R: Rng>(rng: &mut R, fw: u32, fh: u32) -> BoundingBox {
    let w = rng.gen_range(1..=fw);
    let h = rng.gen_range(1..=fh);
    let x = rng.gen_range(0..=fw - w);
    let y = rng.gen_range(0..=fh - h);
    BoundingBox::new(x as f64, y as f64, w as f64, h as f64).unwrap()
}

/// Grid-aligned boxes and crops at unit scale: the pixel count and the box
/// ratio must agree exactly.
pub fn objectness_exact(pairs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..pairs {
        let (fw, fh) = (rng.gen_range(1..=48u32), rng.gen_range(1..=48u32));
        let frame = ImageFrame::new(fw, fh).unwrap();
        let bbox = int_box(&mut rng, fw, fh);
        let crop = int_box(&mut rng, fw, fh);
        let t =
            AugmentTransform::new(crop, (crop.w as u32, crop.h as u32), rng.gen_bool(0.5)).unwrap();
        let mask = ObjectMask::from_box(&bbox, frame);
        let pixels = objectness_pixels(&apply_transform(&mask, &t)).unwrap();
        let analytic = transformed_objectness(&bbox, frame, &t).unwrap();
        ensure!(
            pixels == analytic,
            "pair {i}: frame {fw}x{fh} box {bbox:?} crop {crop:?}: pixels {pixels} vs analytic {analytic}"
        );
    }
    Ok(format!("{pairs} grid-aligned pairs agree exactly"))
}

/// Arbitrary real crops (possibly overhanging the frame) resampled to
/// arbitrary output sizes: the discrepancy stays within `2 / min(out)`.
pub fn objectness_resampled(pairs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let (fw, fh) = (rng.gen_range(4..=64u32), rng.gen_range(4..=64u32));
        let frame = ImageFrame::new(fw, fh).unwrap();
        let bbox = int_box(&mut rng, fw, fh);
        let cw = rng.gen_range(1.0..=fw as f64 * 1.2);
        let ch = rng.gen_range(1.0..=fh as f64 * 1.2);
        let cx = rng.gen_range(-0.2 * cw..fw as f64 - 0.8 * cw.min(fw as f64));
        let cy = rng.gen_range(-0.2 * ch..fh as f64 - 0.8 * ch.min(fh as f64));
        let out = (rng.gen_range(2..=64u32), rng.gen_range(2..=64u32));
        let crop = BoundingBox::new(cx, cy, cw, ch).unwrap();
        let t = AugmentTransform::new(crop, out, rng.gen_bool(0.5)).unwrap();
        let Ok(analytic) = transformed_objectness(&bbox, frame, &t) else {
            continue;
        };
        let mask = ObjectMask::from_box(&bbox, frame);
        let pixels = objectness_pixels(&apply_transform(&mask, &t)).unwrap();
        let bound = 2.0 / out.0.min(out.1) as f64;
        let d = (pixels - analytic).abs();
        worst = worst.max(d * out.0.min(out.1) as f64);
        ensure!(
            d <= bound,
            "pair {i}: frame {fw}x{fh} box {bbox:?} crop {crop:?} out {out:?}: |{pixels} - {analytic}| > {bound}"
        );
    }
    Ok(format!(
        "{pairs} resampled pairs, worst discrepancy {worst:.3} / min(out) (bound 2)"
    ))
}

// --------------------------------------------------------------- gradients

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_label<R: Rng>(rng: &mut R, k: usize) -> LabelVector {
    let y = rng.gen_range(0..k);
    match rng.gen_range(0..4) {
        0 => hard_label(y, k).unwrap(),
        1 => uniform_smooth_label(y, k, rng.gen_range(0.0..=1.0)).unwrap(),
        2 => adaptive_label(y, k, rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)).unwrap(),
        _ => {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let head: f64 = p[..k - 1].iter().sum();
            p[k - 1] = (1.0 - head).max(0.0);
            LabelVector::from_probs(p).unwrap()
        }
    }
}

/// `softmax - label` against central differences of the loss, in `f64`.
pub fn loss_gradient(cases: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for case in 0..cases {
        let k = [2, 5, 100][case % 3];
        let scale = [0.1, 1.0, 5.0][rng.gen_range(0..3)];
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();
        let label = random_label(&mut rng, k);
        let g = grad_logits(&z, &label).unwrap();
        let fd: Vec<f64> = (0..k)
            .map(|i| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                (cross_entropy(&zp, &label).unwrap() - cross_entropy(&zm, &label).unwrap())
                    / (2.0 * h)
            })
            .collect();
        let e = rel_err(&g, &fd);
        worst = worst.max(e);
        ensure!(e < 1e-6, "case {case}: k={k} rel err {e:.3e}");
    }
    Ok(format!("{cases} cases, worst rel err {worst:.2e}"))
}

pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        input_size: (8, 8),
        channels: vec![2, 3],
        kernel: 3,
        hidden: 6,
        num_classes: 2,
        init_seed: 1,
    }
}

/// A tiny network with every parameter random (the output layer included),
/// stored in `f32`, and its exact `f64` twin.
pub fn random_tiny_net(seed: u64) -> (Network<f32>, Network<f64>) {
    let mut rng = rng(seed);
    let cfg = tiny_net_config();
    let n = Network::<f64>::new(cfg.clone()).unwrap().num_params();
    let params: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.6f32..0.6)).collect();
    let net32 = Network::from_params(cfg.clone(), params).unwrap();
    let net64 = net32.cast::<f64>();
    (net32, net64)
}

/// Single-precision analytic gradients of the full network against `f64`
/// central differences, by parameter and along random directions.
pub fn network_gradient(trials: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut worst_jvp = 0.0f64;
    let h = 1e-6;
    for trial in 0..trials {
        let (net32, net64) = random_tiny_net(seed ^ ((trial as u64 + 1) * 0x9e37));
        let input: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let input64: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        let label = random_label(&mut rng, 2);
        let (_, g32) = net32.loss_and_grad(&input, &label).unwrap();
        let g: Vec<f64> = g32.iter().map(|&v| v as f64).collect();

        let base: Vec<f64> = net64.params().to_vec();
        let loss_at = |p: &[f64]| {
            Network::from_params(net64.config().clone(), p.to_vec())
                .unwrap()
                .loss(&input64, &label)
                .unwrap()
        };
        let fd: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + h;
                let up = loss_at(&p);
                p[i] = base[i] - h;
                (up - loss_at(&p)) / (2.0 * h)
            })
            .collect();
        let e = rel_err(&g, &fd);
        worst = worst.max(e);
        ensure!(
            e < 1e-4,
            "trial {trial}: parameter gradient rel err {e:.3e}"
        );

        // Jacobian-vector product of the logits against a vector-Jacobian
        // product: <J v, u> == <v, J^T u>.
        let v: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits_at = |t: f64| {
            let p: Vec<f64> = base.iter().zip(&v).map(|(b, d)| b + t * d).collect();
            Network::from_params(net64.config().clone(), p)
                .unwrap()
                .forward(&input64)
                .unwrap()
        };
        let (zp, zm) = (logits_at(h), logits_at(-h));
        let jvp: f64 = (0..2).map(|i| u[i] * (zp[i] - zm[i]) / (2.0 * h)).sum();
        let u32v: Vec<f32> = u.iter().map(|&x| x as f32).collect();
        let vjp: f64 = net32
            .vjp(&input, &u32v)
            .unwrap()
            .iter()
            .zip(&v)
            .map(|(&a, b)| a as f64 * b)
            .sum();
        let e = (jvp - vjp).abs() / jvp.abs().max(vjp.abs()).max(1e-12);
        worst_jvp = worst_jvp.max(e);
        ensure!(
            e < 1e-4,
            "trial {trial}: JVP {jvp} vs VJP {vjp}, rel err {e:.3e}"
        );
    }
    Ok(format!(
        "{trials} tiny networks, worst parameter rel err {worst:.2e}, worst JVP rel err {worst_jvp:.2e}"
    ))
}

// ------------------------------------------------------------- calibration

/// Fixed-point scale: every finite double in `[0, 2^60)` is an exact
/// integer multiple of `2^-SCALE`.
const SCALE: u64 = 1100;

fn to_fixed(x: f64) -> BigInt {
    assert!(x.is_finite() && x >= 0.0);
    if x == 0.0 {
        return BigInt::from(0);
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e) = if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    };
    BigInt::from(mant) << ((e + SCALE as i64) as usize)
}

fn pow2(e: i64) -> f64 {
    let mut v = 1.0f64;
    let mut e = e;
    while e > 0 {
        let s = e.min(1000);
        v *= f64::from_bits(((s + 1023) as u64) << 52);
        e -= s;
    }
    while e < 0 {
        let s = (-e).min(1000);
        v *= f64::from_bits(((1023 - s) as u64) << 52);
        e += s;
    }
    v
}

/// Round-half-even of a non-negative fixed-point value to a double.
fn from_fixed(v: &BigInt) -> f64 {
    let bits = v.bits() as i64;
    if bits == 0 {
        return 0.0;
    }
    let shift = bits - 53;
    let mut mant: u64;
    let mut exp = shift - SCALE as i64;
    if shift <= 0 {
        mant = u64::try_from(v.clone()).unwrap();
        exp = -(SCALE as i64);
    } else {
        let q: BigInt = v >> (shift as usize);
        let rem: BigInt = v - (&q << (shift as usize));
        let half = BigInt::from(1) << ((shift - 1) as usize);
        mant = u64::try_from(q).unwrap();
        if rem > half || (rem == half && mant % 2 == 1) {
            mant += 1;
        }
    }
    mant as f64 * pow2(exp)
}

/// Correctly rounded sum of non-negative doubles, computed exactly.
pub fn oracle_sum(values: &[f64]) -> f64 {
    let total = values
        .iter()
        .fold(BigInt::from(0), |acc, &v| acc + to_fixed(v));
    from_fixed(&total)
}

pub fn record(confidence: f64, correct: bool) -> PredictionRecord {
    PredictionRecord {
        probs: vec![confidence, 1.0 - confidence],
        predicted: 0,
        confidence,
        true_class: if correct { 0 } else { 1 },
        objectness: None,
    }
}

/// Naive two-pass recomputation: for every bin, scan all records for its
/// members, then form `(count / N) * |acc - conf|` with exact sums.
pub fn oracle_ece_mce(records: &[PredictionRecord], num_bins: usize) -> (f64, f64) {
    let n = records.len();
    let mut terms = Vec::new();
    let mut mce = 0.0f64;
    for b in 0..num_bins {
        let lower = b as f64 / num_bins as f64;
        let upper = (b + 1) as f64 / num_bins as f64;
        let members: Vec<&PredictionRecord> = records
            .iter()
            .filter(|r| {
                (r.confidence > lower && r.confidence <= upper) || (b == 0 && r.confidence == 0.0)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let count = members.len();
        let conf =
            oracle_sum(&members.iter().map(|r| r.confidence).collect::<Vec<_>>()) / count as f64;
        let correct = members
            .iter()
            .filter(|r| r.predicted == r.true_class)
            .count();
        let acc = correct as f64 / count as f64;
        let gap = (acc - conf).abs();
        mce = mce.max(gap);
        terms.push((count as f64 / n as f64) * gap);
    }
    (oracle_sum(&terms), mce)
}

fn random_records<R: Rng>(rng: &mut R, n: usize, num_bins: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|_| {
            let c = match rng.gen_range(0..8) {
                0 => rng.gen_range(0..=num_bins) as f64 / num_bins as f64,
                1 => 1.0,
                2 => 0.0,
                _ => rng.gen_range(0.0..=1.0),
            };
            let skill: f64 = rng.gen_range(0.0..1.0);
            record(
                c,
                rng.gen_bool((c * skill + (1.0 - skill) * 0.5).clamp(0.0, 1.0)),
            )
        })
        .collect()
}

/// ECE and MCE against the naive exact oracle, the reliability-bin identity,
/// MCE >= ECE, and the hand-worked four-record example.
pub fn calibration_oracle(sets: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst_identity = 0.0f64;
    for set in 0..sets {
        let n = rng.gen_range(1..=400);
        let nb = [1, 7, 10, 15, 100][set % 5];
        let recs = random_records(&mut rng, n, nb);
        let (oe, om) = oracle_ece_mce(&recs, nb);
        let e = calibration::ece(&recs, nb).unwrap();
        let m = calibration::mce(&recs, nb).unwrap();
        ensure!(
            e == oe,
            "set {set}: n={n} bins={nb}: ece {e:e} vs oracle {oe:e}"
        );
        ensure!(
            m == om,
            "set {set}: n={n} bins={nb}: mce {m:e} vs oracle {om:e}"
        );
        ensure!(m >= e, "set {set}: mce {m} < ece {e}");

        let rep = calibration::report(&recs, &[nb, 15]).unwrap();
        let weighted: f64 = rep
            .bins
            .iter()
            .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
            .sum();
        let d = (weighted - rep.ece[0].1).abs();
        worst_identity = worst_identity.max(d);
        ensure!(d <= 1e-12, "set {set}: bin identity off by {d:e}");
        ensure!(rep.bins.len() == nb, "set {set}: {} bins", rep.bins.len());
    }

    let hand: Vec<PredictionRecord> = [(0.6, true), (0.6, false), (0.9, true), (0.9, true)]
        .iter()
        .map(|&(c, ok)| record(c, ok))
        .collect();
    let e = calibration::ece(&hand, 10).unwrap();
    let m = calibration::mce(&hand, 10).unwrap();
    ensure!((e - 0.1).abs() <= 1e-12, "hand example ece {e}");
    ensure!((m - 0.1).abs() <= 1e-12, "hand example mce {m}");
    Ok(format!(
        "{sets} random sets exact, identity within {worst_identity:.1e}, hand example {e:.15} / {m:.15}"
    ))
}
