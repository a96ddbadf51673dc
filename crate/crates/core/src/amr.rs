//! Age-metallicity relation analysis.
//!
//! Curves are binned medians of age against [Fe/H] on contiguous fixed-width
//! bins anchored at 0 dex. A bin is robust when it holds at least
//! [`ROBUST_BIN_MIN`] stars; thin bins stay in the output but are flagged,
//! and anything that connects bins (fits aside) uses robust bins only.

use crate::error::{Error, Result};
use crate::stats::{
    bootstrap_stat, paired_bootstrap_diff, quantile, replicate_rng, significance_lenient,
    z_and_p, Significance, Stat,
};
use rand::Rng;

/// Minimum stars for a bin median to be treated as robust.
pub const ROBUST_BIN_MIN: usize = 30;

/// Default metal-poor fit window, closed below and open above.
pub const METAL_POOR_RANGE: (f64, f64) = (-1.0, -0.5);

/// One metallicity bin of a curve.
#[derive(Debug, Clone)]
pub struct AmrBin {
    pub center: f64,
    pub n: usize,
    pub median: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub robust: bool,
}

/// Binned age-metallicity curve.
#[derive(Debug, Clone)]
pub struct AmrCurve {
    pub bin_width: f64,
    pub bins: Vec<AmrBin>,
}

fn bin_index(feh: f64, width: f64) -> i64 {
    (feh / width).floor() as i64
}

/// Build a curve from parallel metallicity and age slices. Bins run
/// contiguously from the lowest to the highest populated bin; empty bins in
/// between are carried with a zero count.
pub fn binned_amr(
    feh: &[f64],
    ages: &[f64],
    bin_width: f64,
    reps: usize,
    seed: u64,
) -> Result<AmrCurve> {
    if feh.len() != ages.len() {
        return Err(Error::Config(format!(
            "metallicity and age lists differ in length: {} vs {}",
            feh.len(),
            ages.len()
        )));
    }
    if feh.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(bin_width > 0.0) {
        return Err(Error::NonPositive { what: "bin width", value: bin_width });
    }
    if feh.iter().chain(ages.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }

    let mut groups: std::collections::BTreeMap<i64, Vec<f64>> = std::collections::BTreeMap::new();
    for (&f, &a) in feh.iter().zip(ages) {
        groups.entry(bin_index(f, bin_width)).or_default().push(a);
    }
    let lo = *groups.keys().next().unwrap();
    let hi = *groups.keys().last().unwrap();

    let mut bins = Vec::with_capacity((hi - lo + 1) as usize);
    for k in lo..=hi {
        let center = (k as f64 + 0.5) * bin_width;
        match groups.get(&k) {
            Some(a) if !a.is_empty() => {
                let median = Some(quantile(a, 0.5)?);
                let (ci_low, ci_high) = if a.len() >= 2 {
                    let b = bootstrap_stat(a, Stat::Median, reps, crate::stats::derive_seed(seed, k as u64))?;
                    (Some(b.ci_low), Some(b.ci_high))
                } else {
                    (None, None)
                };
                bins.push(AmrBin {
                    center,
                    n: a.len(),
                    median,
                    ci_low,
                    ci_high,
                    robust: a.len() >= ROBUST_BIN_MIN,
                });
            }
            _ => bins.push(AmrBin {
                center,
                n: 0,
                median: None,
                ci_low: None,
                ci_high: None,
                robust: false,
            }),
        }
    }
    Ok(AmrCurve { bin_width, bins })
}

/// Ordinary least squares of age on metallicity over one [Fe/H] window.
#[derive(Debug, Clone, Copy)]
pub struct AmrFit {
    /// Gyr per dex.
    pub slope: f64,
    pub intercept: f64,
    /// Bootstrap standard error of the slope.
    pub slope_se: f64,
    pub n: usize,
    /// The window actually fitted, closed below, open above.
    pub range: (f64, f64),
}

fn ols_slope_intercept(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    // identical-x degeneracy checked on the raw values: rounding in the
    // mean can leave sum of squares at a few ulps instead of exactly zero
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    if lo == hi {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Fit the AMR on records with `range.0 <= feh < range.1`. The slope scale
/// comes from a row bootstrap; replicates that collapse to a single
/// metallicity are skipped.
pub fn fit_amr(
    feh: &[f64],
    ages: &[f64],
    range: (f64, f64),
    reps: usize,
    seed: u64,
) -> Result<AmrFit> {
    if feh.len() != ages.len() {
        return Err(Error::Config("metallicity and age lists differ in length".into()));
    }
    if !(range.0 < range.1) {
        return Err(Error::Config(format!("empty fit range [{}, {})", range.0, range.1)));
    }
    let rows: Vec<(f64, f64)> = feh
        .iter()
        .zip(ages)
        .filter(|(&f, _)| f >= range.0 && f < range.1)
        .map(|(&f, &a)| (f, a))
        .collect();
    if rows.len() < 3 {
        return Err(Error::TooFewValues { needed: 3, got: rows.len() });
    }
    if rows.iter().any(|&(f, a)| !f.is_finite() || !a.is_finite()) {
        return Err(Error::NonFinite);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (slope, intercept) =
        ols_slope_intercept(&xs, &ys).ok_or_else(|| Error::ConstantVariable("feh".into()))?;

    let n = rows.len();
    let mut rep_slopes = Vec::with_capacity(reps);
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        for slot in 0..n {
            let (f, a) = rows[rng.gen_range(0..n)];
            bx[slot] = f;
            by[slot] = a;
        }
        if let Some((s, _)) = ols_slope_intercept(&bx, &by) {
            rep_slopes.push(s);
        }
    }
    if rep_slopes.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: rep_slopes.len() });
    }
    let m = rep_slopes.iter().sum::<f64>() / rep_slopes.len() as f64;
    let slope_se = (rep_slopes.iter().map(|s| (s - m) * (s - m)).sum::<f64>()
        / (rep_slopes.len() - 1) as f64)
        .sqrt();
    Ok(AmrFit { slope, intercept, slope_se, n, range })
}

/// Difference of two independently fitted slopes: `fit_b - fit_a` with the
/// quadrature-combined scale. The fits must cover the same window.
pub fn slope_diff_independent(fit_a: &AmrFit, fit_b: &AmrFit) -> Result<Significance> {
    if fit_a.range != fit_b.range {
        return Err(Error::RangeMismatch);
    }
    let delta = fit_b.slope - fit_a.slope;
    let se = (fit_a.slope_se * fit_a.slope_se + fit_b.slope_se * fit_b.slope_se).sqrt();
    z_and_p(delta, se).or_else(|_| Ok(significance_lenient(delta, se)))
}

/// Slope difference between two age columns over the same stars: each
/// replicate resamples rows once and refits both columns, so star-level
/// noise cancels. `delta = slope(ages_b) - slope(ages_a)`.
pub fn slope_diff_paired(
    feh: &[f64],
    ages_a: &[f64],
    ages_b: &[f64],
    range: (f64, f64),
    reps: usize,
    seed: u64,
) -> Result<Significance> {
    if feh.len() != ages_a.len() || feh.len() != ages_b.len() {
        return Err(Error::Config("input lists differ in length".into()));
    }
    let rows: Vec<(f64, f64, f64)> = feh
        .iter()
        .zip(ages_a.iter().zip(ages_b))
        .filter(|(&f, _)| f >= range.0 && f < range.1)
        .map(|(&f, (&a, &b))| (f, a, b))
        .collect();
    if rows.len() < 3 {
        return Err(Error::TooFewValues { needed: 3, got: rows.len() });
    }
    let fit_of = |sel: &dyn Fn(&(f64, f64, f64)) -> f64, data: &[(f64, f64, f64)]| {
        let xs: Vec<f64> = data.iter().map(|r| r.0).collect();
        let ys: Vec<f64> = data.iter().map(sel).collect();
        ols_slope_intercept(&xs, &ys).map(|(s, _)| s)
    };
    let sa = fit_of(&|r| r.1, &rows).ok_or_else(|| Error::ConstantVariable("feh".into()))?;
    let sb = fit_of(&|r| r.2, &rows).ok_or_else(|| Error::ConstantVariable("feh".into()))?;
    let delta = sb - sa;

    let n = rows.len();
    let mut rep_deltas = Vec::with_capacity(reps);
    let mut buf = vec![(0.0, 0.0, 0.0); n];
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        for slot in 0..n {
            buf[slot] = rows[rng.gen_range(0..n)];
        }
        let (ra, rb) = match (fit_of(&|r| r.1, &buf), fit_of(&|r| r.2, &buf)) {
            (Some(a), Some(b)) => (a, b),
            _ => continue,
        };
        rep_deltas.push(rb - ra);
    }
    if rep_deltas.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: rep_deltas.len() });
    }
    let m = rep_deltas.iter().sum::<f64>() / rep_deltas.len() as f64;
    let se = (rep_deltas.iter().map(|d| (d - m) * (d - m)).sum::<f64>()
        / (rep_deltas.len() - 1) as f64)
        .sqrt();
    Ok(significance_lenient(delta, se))
}

/// Difference of one age statistic between two age columns inside a single
/// metallicity window (`lo <= feh < hi`). Paired mode resamples rows;
/// independent mode bootstraps each column separately and combines scales
/// in quadrature. `delta = stat(ages_b) - stat(ages_a)`.
pub fn fixed_feh_delta(
    feh: &[f64],
    ages_a: &[f64],
    ages_b: &[f64],
    window: (f64, f64),
    stat: Stat,
    paired: bool,
    reps: usize,
    seed: u64,
) -> Result<Significance> {
    if feh.len() != ages_a.len() || feh.len() != ages_b.len() {
        return Err(Error::Config("input lists differ in length".into()));
    }
    if !(window.0 < window.1) {
        return Err(Error::Config(format!("empty window [{}, {})", window.0, window.1)));
    }
    let sel: Vec<usize> = (0..feh.len())
        .filter(|&i| feh[i] >= window.0 && feh[i] < window.1)
        .collect();
    if sel.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: sel.len() });
    }
    if paired {
        let pairs: Vec<(f64, f64)> = sel.iter().map(|&i| (ages_b[i], ages_a[i])).collect();
        paired_bootstrap_diff(&pairs, stat, reps, seed)
    } else {
        let a: Vec<f64> = sel.iter().map(|&i| ages_a[i]).collect();
        let b: Vec<f64> = sel.iter().map(|&i| ages_b[i]).collect();
        let ra = bootstrap_stat(&a, stat, reps, crate::stats::derive_seed(seed, 0))?;
        let rb = bootstrap_stat(&b, stat, reps, crate::stats::derive_seed(seed, 1))?;
        let delta = rb.point - ra.point;
        let se = (ra.se * ra.se + rb.se * rb.se).sqrt();
        Ok(significance_lenient(delta, se))
    }
}

/// One bin of a two-group age comparison.
#[derive(Debug, Clone)]
pub struct GroupBin {
    pub center: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// median(a) - median(b); None when either side is empty.
    pub delta: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Both sides hold at least [`ROBUST_BIN_MIN`] stars.
    pub robust: bool,
}

/// Per-metallicity-bin difference of median age between two groups, with
/// independent two-sample bootstrap intervals. Bins where either side is
/// empty keep their counts and a flagged, absent delta.
pub fn group_delta_by_feh(
    feh_a: &[f64],
    ages_a: &[f64],
    feh_b: &[f64],
    ages_b: &[f64],
    bin_width: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<GroupBin>> {
    if feh_a.len() != ages_a.len() || feh_b.len() != ages_b.len() {
        return Err(Error::Config("input lists differ in length".into()));
    }
    if feh_a.is_empty() && feh_b.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(bin_width > 0.0) {
        return Err(Error::NonPositive { what: "bin width", value: bin_width });
    }

    let mut bins_a: std::collections::BTreeMap<i64, Vec<f64>> = std::collections::BTreeMap::new();
    let mut bins_b: std::collections::BTreeMap<i64, Vec<f64>> = std::collections::BTreeMap::new();
    for (&f, &a) in feh_a.iter().zip(ages_a) {
        bins_a.entry(bin_index(f, bin_width)).or_default().push(a);
    }
    for (&f, &a) in feh_b.iter().zip(ages_b) {
        bins_b.entry(bin_index(f, bin_width)).or_default().push(a);
    }
    let lo = bins_a.keys().chain(bins_b.keys()).min().copied().unwrap();
    let hi = bins_a.keys().chain(bins_b.keys()).max().copied().unwrap();

    let mut out = Vec::new();
    for k in lo..=hi {
        let a = bins_a.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        let b = bins_b.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        let center = (k as f64 + 0.5) * bin_width;
        let mut bin = GroupBin {
            center,
            n_a: a.len(),
            n_b: b.len(),
            delta: None,
            ci_low: None,
            ci_high: None,
            robust: a.len() >= ROBUST_BIN_MIN && b.len() >= ROBUST_BIN_MIN,
        };
        if !a.is_empty() && !b.is_empty() {
            bin.delta = Some(quantile(a, 0.5)? - quantile(b, 0.5)?);
            if a.len() >= 2 && b.len() >= 2 {
                let bin_seed = crate::stats::derive_seed(seed, k as u64);
                let mut rep_deltas = Vec::with_capacity(reps);
                let mut buf_a = vec![0.0; a.len()];
                let mut buf_b = vec![0.0; b.len()];
                for r in 0..reps {
                    let mut rng = replicate_rng(bin_seed, r);
                    for slot in buf_a.iter_mut() {
                        *slot = a[rng.gen_range(0..a.len())];
                    }
                    for slot in buf_b.iter_mut() {
                        *slot = b[rng.gen_range(0..b.len())];
                    }
                    rep_deltas.push(Stat::Median.eval(&mut buf_a) - Stat::Median.eval(&mut buf_b));
                }
                bin.ci_low = Some(quantile(&rep_deltas, 0.025)?);
                bin.ci_high = Some(quantile(&rep_deltas, 0.975)?);
            }
        }
        out.push(bin);
    }
    Ok(out)
}

/// Where two curves cross an age threshold, with the pairwise differences
/// between the crossing positions. Interpolation runs along the sequence of
/// robust bins (consecutive robust points are connected, exactly as the
/// curve would be drawn), so thin bins never create or move a crossing.
/// Multiple crossings are all reported; picking one is the caller's job.
#[derive(Debug, Clone)]
pub struct Crossings {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// b crossing minus a crossing, for every pair.
    pub diffs: Vec<f64>,
}

pub fn threshold_crossings(a: &AmrCurve, b: &AmrCurve, threshold: f64) -> Result<Crossings> {
    if a.bin_width != b.bin_width {
        return Err(Error::BinningMismatch);
    }
    if !threshold.is_finite() {
        return Err(Error::NonFinite);
    }
    let xa = curve_crossings(a, threshold);
    let xb = curve_crossings(b, threshold);
    let mut diffs = Vec::with_capacity(xa.len() * xb.len());
    for &ca in &xa {
        for &cb in &xb {
            diffs.push(cb - ca);
        }
    }
    Ok(Crossings { a: xa, b: xb, diffs })
}

fn curve_crossings(curve: &AmrCurve, threshold: f64) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = curve
        .bins
        .iter()
        .filter(|b| b.robust)
        .filter_map(|b| b.median.map(|m| (b.center, m)))
        .collect();
    let mut out = Vec::new();
    for w in pts.windows(2) {
        let (x1, y1) = w[0];
        let (x2, y2) = w[1];
        if y1 == threshold {
            if out.last() != Some(&x1) {
                out.push(x1);
            }
            continue;
        }
        if y2 == threshold {
            // picked up as the left node of the next segment, or below
            continue;
        }
        if (y1 - threshold) * (y2 - threshold) < 0.0 {
            out.push(x1 + (threshold - y1) * (x2 - x1) / (y2 - y1));
        }
    }
    if let Some(&(x, y)) = pts.last() {
        if y == threshold && out.last() != Some(&x) {
            out.push(x);
        }
    }
    out
}
