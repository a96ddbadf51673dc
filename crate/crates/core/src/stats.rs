//! Quantiles, robust scale estimates, seeded bootstrap machinery, and normal
//! significance arithmetic. Everything downstream builds on these primitives,
//! so the conventions here are fixed once and used everywhere:
//!
//! * quantiles use linear interpolation at rank `(n - 1) * q` on the sorted
//!   sample (the common "type 7" rule);
//! * bootstrap standard errors are the sample standard deviation of the
//!   replicate statistics; confidence intervals are the 2.5 and 97.5
//!   percentile of the replicates;
//! * all randomness flows through ChaCha8 streams so that results depend only
//!   on the seed, never on scheduling or worker count. Replicate `k` draws
//!   from stream `k + 1`; stream 0 is reserved for whole-sample draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// SplitMix64 finalizer. Used to fold salts into a master seed when deriving
/// independent substreams (per cell, per run, per sweep variant).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a salt.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    mix64(master ^ mix64(salt))
}

/// RNG for one bootstrap replicate. Every replicate owns its own ChaCha
/// stream, so a replicate's draws are identical no matter how the replicate
/// loop is scheduled.
pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64 + 1);
    rng
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Quantile of `values` at level `q` in [0, 1], linear interpolation at rank
/// `(n - 1) * q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::BadQuantileLevel(q));
    }
    check_finite(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

/// Same rule on an already-sorted slice. Callers guarantee non-empty input
/// and `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Scale estimators selectable wherever a dispersion is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleKind {
    /// Sample standard deviation (n - 1 denominator).
    Sd,
    /// Interquartile range divided by 1.349, the IQR of a unit normal.
    IqrSe,
    /// Median absolute deviation times 1.4826.
    MadSe,
}

impl ScaleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(ScaleKind::Sd),
            "iqr_se" => Ok(ScaleKind::IqrSe),
            "mad_se" => Ok(ScaleKind::MadSe),
            other => Err(Error::Config(format!("unknown scale kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleKind::Sd => "sd",
            ScaleKind::IqrSe => "iqr_se",
            ScaleKind::MadSe => "mad_se",
        }
    }
}

/// Dispersion of `values` under the chosen estimator. Needs at least two
/// values; all three estimators agree on scale for a normal sample.
pub fn robust_scale(values: &[f64], kind: ScaleKind) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: values.len() });
    }
    check_finite(values)?;
    match kind {
        ScaleKind::Sd => Ok(sample_sd(values)),
        ScaleKind::IqrSe => {
            let mut sorted = values.to_vec();
            sorted.sort_unstable_by(f64::total_cmp);
            let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
            Ok(iqr / 1.349)
        }
        ScaleKind::MadSe => {
            let med = quantile(values, 0.5)?;
            let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
            Ok(1.4826 * quantile(&dev, 0.5)?)
        }
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

/// Center of the most populated histogram bin. Bins are half-open intervals
/// `[origin + k*w, origin + (k+1)*w)`; ties go to the lower bin.
pub fn histogram_mode(values: &[f64], bin_width: f64, origin: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::NonPositive { what: "bin width", value: bin_width });
    }
    check_finite(values)?;
    let mut counts: std::collections::BTreeMap<i64, usize> = std::collections::BTreeMap::new();
    for &v in values {
        let k = ((v - origin) / bin_width).floor() as i64;
        *counts.entry(k).or_insert(0) += 1;
    }
    // BTreeMap iterates in ascending bin order, so a strict comparison keeps
    // the lowest bin on ties.
    let mut best = (i64::MIN, 0usize);
    for (&k, &c) in &counts {
        if c > best.1 {
            best = (k, c);
        }
    }
    Ok(origin + (best.0 as f64 + 0.5) * bin_width)
}

/// Statistic evaluated on a sample or a bootstrap resample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stat {
    Mean,
    Median,
    Quantile(f64),
    /// Fraction of values strictly above the threshold.
    FractionAbove(f64),
    /// 75th minus 25th percentile.
    InterquartileSpan,
}

impl Stat {
    /// Evaluate on `buf`, which may be reordered in place.
    pub fn eval(self, buf: &mut [f64]) -> f64 {
        match self {
            Stat::Mean => buf.iter().sum::<f64>() / buf.len() as f64,
            Stat::Median => {
                buf.sort_unstable_by(f64::total_cmp);
                quantile_sorted(buf, 0.5)
            }
            Stat::Quantile(q) => {
                buf.sort_unstable_by(f64::total_cmp);
                quantile_sorted(buf, q)
            }
            Stat::FractionAbove(tau) => {
                buf.iter().filter(|&&v| v > tau).count() as f64 / buf.len() as f64
            }
            Stat::InterquartileSpan => {
                buf.sort_unstable_by(f64::total_cmp);
                quantile_sorted(buf, 0.75) - quantile_sorted(buf, 0.25)
            }
        }
    }

    fn validate(self) -> Result<()> {
        if let Stat::Quantile(q) = self {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::BadQuantileLevel(q));
            }
        }
        Ok(())
    }
}

/// Output of a single-sample bootstrap.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    /// Statistic on the original sample.
    pub point: f64,
    /// Sample standard deviation of the replicate statistics.
    pub se: f64,
    /// 2.5th percentile of the replicates.
    pub ci_low: f64,
    /// 97.5th percentile of the replicates.
    pub ci_high: f64,
    pub reps: usize,
    /// Replicate statistics, retained only on request.
    pub replicates: Option<Vec<f64>>,
}

pub const MIN_BOOTSTRAP_REPS: usize = 100;

/// Nonparametric bootstrap of `stat` over `values`. Deterministic for a
/// given seed regardless of scheduling.
pub fn bootstrap_stat(values: &[f64], stat: Stat, reps: usize, seed: u64) -> Result<BootstrapResult> {
    bootstrap_stat_full(values, stat, reps, seed, false)
}

/// As [`bootstrap_stat`] but optionally retaining the replicate values so an
/// alternative scale estimator can be applied to them later.
pub fn bootstrap_stat_full(
    values: &[f64],
    stat: Stat,
    reps: usize,
    seed: u64,
    keep_replicates: bool,
) -> Result<BootstrapResult> {
    if values.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: values.len() });
    }
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::Config(format!(
            "bootstrap replicate count must be at least {MIN_BOOTSTRAP_REPS}, got {reps}"
        )));
    }
    stat.validate()?;
    check_finite(values)?;

    let n = values.len();
    let mut point_buf = values.to_vec();
    let point = stat.eval(&mut point_buf);

    let mut reps_out = Vec::with_capacity(reps);
    let mut buf = vec![0.0; n];
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        for slot in buf.iter_mut() {
            *slot = values[rng.gen_range(0..n)];
        }
        reps_out.push(stat.eval(&mut buf));
    }

    let se = sample_sd(&reps_out);
    let mut sorted = reps_out.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let ci_low = quantile_sorted(&sorted, 0.025);
    let ci_high = quantile_sorted(&sorted, 0.975);

    Ok(BootstrapResult {
        point,
        se,
        ci_low,
        ci_high,
        reps,
        replicates: keep_replicates.then_some(reps_out),
    })
}

/// A difference with its resampling scale and normal significance.
#[derive(Debug, Clone, Copy)]
pub struct Significance {
    pub delta: f64,
    pub se: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

/// z and two-sided normal p for a difference with a positive scale.
pub fn z_and_p(delta: f64, se: f64) -> Result<Significance> {
    if !(se > 0.0) || !se.is_finite() || !delta.is_finite() {
        return Err(Error::DegenerateScale);
    }
    Ok(significance_lenient(delta, se))
}

/// Same arithmetic, with a documented convention for a collapsed scale:
/// se = 0 with delta = 0 reports z = 0, p = 1 (no evidence either way);
/// se = 0 with delta != 0 reports an infinite z with p = 0 (the difference
/// exceeded all resampling variation).
pub fn significance_lenient(delta: f64, se: f64) -> Significance {
    let (z, p) = if se > 0.0 {
        let z = delta / se;
        (z, two_sided_p(z))
    } else if delta == 0.0 {
        (0.0, 1.0)
    } else {
        (delta.signum() * f64::INFINITY, 0.0)
    };
    Significance { delta, se, z, p_two_sided: p }
}

fn two_sided_p(z: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    p.clamp(0.0, 1.0)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

/// Bootstrap of a difference of one statistic over paired samples. Each
/// replicate resamples pair indices, so the two sides always stay aligned.
/// `delta` is `stat(first elements) - stat(second elements)`.
pub fn paired_bootstrap_diff(
    pairs: &[(f64, f64)],
    stat: Stat,
    reps: usize,
    seed: u64,
) -> Result<Significance> {
    if pairs.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: pairs.len() });
    }
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::Config(format!(
            "bootstrap replicate count must be at least {MIN_BOOTSTRAP_REPS}, got {reps}"
        )));
    }
    stat.validate()?;
    for &(a, b) in pairs {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite);
        }
    }

    let n = pairs.len();
    let mut a_buf: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut b_buf: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let delta = stat.eval(&mut a_buf) - stat.eval(&mut b_buf);

    let mut rep_deltas = Vec::with_capacity(reps);
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        for slot in 0..n {
            let idx = rng.gen_range(0..n);
            a_buf[slot] = pairs[idx].0;
            b_buf[slot] = pairs[idx].1;
        }
        rep_deltas.push(stat.eval(&mut a_buf) - stat.eval(&mut b_buf));
    }

    let se = sample_sd(&rep_deltas);
    Ok(significance_lenient(delta, se))
}
