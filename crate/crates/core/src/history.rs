//! Population-level formation-history tracers and their comparisons.
//!
//! Three scalar tracers summarize an age distribution: the formation
//! timescale `dt_form` (75th minus 25th percentile), the peak formation age
//! (histogram mode, 0.5 Gyr bins anchored at 0), and the old fraction
//! `f_old` (strictly above 10 Gyr by default). The cumulative formation
//! fraction CFF(tau) = P(age >= tau) is carried as a curve: its rows run
//! from the largest grid age downward so that "formed early" reads
//! left-to-right, and along that order the fraction never decreases.

use crate::catalog::{AgeSource, Catalog, QualityCuts};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::sbw::{Classification, GridDiagnostics};
use crate::stats::{
    derive_seed, histogram_mode, quantile, replicate_rng, significance_lenient, Significance,
    MIN_BOOTSTRAP_REPS,
};
use rand::Rng;

pub const DEFAULT_TAU_OLD: f64 = 10.0;
pub const DEFAULT_PEAK_BIN_WIDTH: f64 = 0.5;

/// Formation-history tracers for one (sample, age scale) pair.
#[derive(Debug, Clone)]
pub struct HistorySummary {
    /// (age grid point, fraction with age >= that point), descending in age.
    pub cff: Vec<(f64, f64)>,
    /// P75 - P25 of the ages, Gyr.
    pub dt_form: f64,
    /// Histogram-mode age, Gyr (bin center).
    pub peak_age: f64,
    /// Fraction of ages strictly above the old-age threshold.
    pub f_old: f64,
    pub n: usize,
    pub age_source: AgeSource,
    pub sample_label: String,
}

fn tracer_triple(ages: &[f64], peak_bin_width: f64, tau_old: f64) -> Result<(f64, f64, f64)> {
    let dt = quantile(ages, 0.75)? - quantile(ages, 0.25)?;
    let peak = histogram_mode(ages, peak_bin_width, 0.0)?;
    let old = ages.iter().filter(|&&a| a > tau_old).count() as f64 / ages.len() as f64;
    Ok((dt, peak, old))
}

/// Summarize one age sample. The grid must be ascending; the emitted CFF
/// rows are reversed to the descending-age convention.
pub fn history_summary(
    ages: &[f64],
    age_grid: &[f64],
    peak_bin_width: f64,
    tau_old: f64,
) -> Result<HistorySummary> {
    if ages.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ages.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite);
    }
    if age_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("age grid must be strictly ascending".into()));
    }
    let n = ages.len() as f64;
    let cff: Vec<(f64, f64)> = age_grid
        .iter()
        .rev()
        .map(|&tau| (tau, ages.iter().filter(|&&a| a >= tau).count() as f64 / n))
        .collect();
    let (dt_form, peak_age, f_old) = tracer_triple(ages, peak_bin_width, tau_old)?;
    Ok(HistorySummary {
        cff,
        dt_form,
        peak_age,
        f_old,
        n: ages.len(),
        age_source: AgeSource::Infer,
        sample_label: String::new(),
    })
}

/// Per-tracer significance of a two-sample comparison.
#[derive(Debug, Clone, Copy)]
pub struct TracerDeltas {
    pub dt_form: Significance,
    pub peak_age: Significance,
    pub f_old: Significance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMode {
    /// The two age lists cover the same stars, index-aligned; each replicate
    /// draws one set of star indices and recomputes both summaries, so
    /// star-level noise cancels.
    Paired,
    /// Unrelated samples; each side is resampled on its own.
    Independent,
}

impl CompareMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "independent" => Ok(Self::Independent),
            other => Err(Error::Config(format!("unknown comparison mode '{other}'"))),
        }
    }
}

fn summarize_deltas(point: (f64, f64, f64), reps: &[(f64, f64, f64)]) -> Result<TracerDeltas> {
    if reps.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: reps.len() });
    }
    let se_of = |sel: &dyn Fn(&(f64, f64, f64)) -> f64| {
        let m = reps.iter().map(|r| sel(r)).sum::<f64>() / reps.len() as f64;
        (reps.iter().map(|r| (sel(r) - m) * (sel(r) - m)).sum::<f64>()
            / (reps.len() - 1) as f64)
            .sqrt()
    };
    Ok(TracerDeltas {
        dt_form: significance_lenient(point.0, se_of(&|r| r.0)),
        peak_age: significance_lenient(point.1, se_of(&|r| r.1)),
        f_old: significance_lenient(point.2, se_of(&|r| r.2)),
    })
}

/// Compare the tracers of two age samples; every delta is side b minus
/// side a.
pub fn compare_histories(
    ages_a: &[f64],
    ages_b: &[f64],
    mode: CompareMode,
    peak_bin_width: f64,
    tau_old: f64,
    reps: usize,
    seed: u64,
) -> Result<TracerDeltas> {
    if ages_a.len() < 2 || ages_b.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: ages_a.len().min(ages_b.len()) });
    }
    if mode == CompareMode::Paired && ages_a.len() != ages_b.len() {
        return Err(Error::Config(format!(
            "paired comparison needs index-aligned samples, got {} vs {}",
            ages_a.len(),
            ages_b.len()
        )));
    }
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::Config(format!(
            "bootstrap replicate count must be at least {MIN_BOOTSTRAP_REPS}, got {reps}"
        )));
    }
    let ta = tracer_triple(ages_a, peak_bin_width, tau_old)?;
    let tb = tracer_triple(ages_b, peak_bin_width, tau_old)?;
    let point = (tb.0 - ta.0, tb.1 - ta.1, tb.2 - ta.2);

    let mut rep_deltas = Vec::with_capacity(reps);
    match mode {
        CompareMode::Paired => {
            let n = ages_a.len();
            let mut buf_a = vec![0.0; n];
            let mut buf_b = vec![0.0; n];
            for k in 0..reps {
                let mut rng = replicate_rng(seed, k);
                for slot in 0..n {
                    let pick = rng.gen_range(0..n);
                    buf_a[slot] = ages_a[pick];
                    buf_b[slot] = ages_b[pick];
                }
                let ra = tracer_triple(&buf_a, peak_bin_width, tau_old)?;
                let rb = tracer_triple(&buf_b, peak_bin_width, tau_old)?;
                rep_deltas.push((rb.0 - ra.0, rb.1 - ra.1, rb.2 - ra.2));
            }
        }
        CompareMode::Independent => {
            let seed_a = derive_seed(seed, 0);
            let seed_b = derive_seed(seed, 1);
            let mut buf_a = vec![0.0; ages_a.len()];
            let mut buf_b = vec![0.0; ages_b.len()];
            for k in 0..reps {
                let mut rng_a = replicate_rng(seed_a, k);
                let mut rng_b = replicate_rng(seed_b, k);
                for slot in buf_a.iter_mut() {
                    *slot = ages_a[rng_a.gen_range(0..ages_a.len())];
                }
                for slot in buf_b.iter_mut() {
                    *slot = ages_b[rng_b.gen_range(0..ages_b.len())];
                }
                let ra = tracer_triple(&buf_a, peak_bin_width, tau_old)?;
                let rb = tracer_triple(&buf_b, peak_bin_width, tau_old)?;
                rep_deltas.push((rb.0 - ra.0, rb.1 - ra.1, rb.2 - ra.2));
            }
        }
    }
    summarize_deltas(point, &rep_deltas)
}

/// Does tightening the quality selection move the formation history?
/// Compares the high-quality subset against the standard sample it came
/// from. Each replicate resamples the standard rows once; the high-quality
/// side of that replicate is the subset of the same draw passing the cuts,
/// so the two sides stay maximally correlated and the reported z measures
/// only the selection effect. Deltas are high-quality minus standard.
pub fn quality_selection_check(
    catalog: &Catalog,
    rows: &[usize],
    hq_cuts: &QualityCuts,
    source: AgeSource,
    peak_bin_width: f64,
    tau_old: f64,
    reps: usize,
    seed: u64,
) -> Result<TracerDeltas> {
    if rows.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: rows.len() });
    }
    if reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::Config(format!(
            "bootstrap replicate count must be at least {MIN_BOOTSTRAP_REPS}, got {reps}"
        )));
    }
    hq_cuts.validate()?;
    let ages = catalog.ages(rows, source);
    if ages.len() != rows.len() {
        // seismic source with rows lacking that age would break alignment
        return Err(Error::Config(
            "every row must carry the requested age for a paired selection check".into(),
        ));
    }
    let pass: Vec<bool> =
        rows.iter().map(|&r| hq_cuts.passes(&catalog.records()[r])).collect();
    let hq_ages: Vec<f64> = ages
        .iter()
        .zip(&pass)
        .filter_map(|(&a, &p)| p.then_some(a))
        .collect();
    if hq_ages.len() < 2 {
        return Err(Error::EmptyGroup("high-quality subset".into()));
    }
    let t_std = tracer_triple(&ages, peak_bin_width, tau_old)?;
    let t_hq = tracer_triple(&hq_ages, peak_bin_width, tau_old)?;
    let point = (t_hq.0 - t_std.0, t_hq.1 - t_std.1, t_hq.2 - t_std.2);

    let n = rows.len();
    let mut rep_deltas = Vec::with_capacity(reps);
    let mut buf = vec![0.0; n];
    let mut buf_hq = Vec::with_capacity(n);
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        buf_hq.clear();
        for slot in 0..n {
            let pick = rng.gen_range(0..n);
            buf[slot] = ages[pick];
            if pass[pick] {
                buf_hq.push(ages[pick]);
            }
        }
        if buf_hq.len() < 2 {
            continue;
        }
        let rs = tracer_triple(&buf, peak_bin_width, tau_old)?;
        let rh = tracer_triple(&buf_hq, peak_bin_width, tau_old)?;
        rep_deltas.push((rh.0 - rs.0, rh.1 - rs.1, rh.2 - rs.2));
    }
    summarize_deltas(point, &rep_deltas)
}

/// How stars are split into the two bias strata.
#[derive(Debug, Clone, Copy)]
pub enum StrataSplit {
    /// Cells classified high-bias against cells classified low-bias;
    /// degenerate and under-filled cells contribute no stars.
    Classification,
    /// Cells at or above the q-th quantile of the S values against cells
    /// below it; cells with no S value contribute no stars.
    SQuantile(f64),
}

/// Compare formation-history tracers between stars living in high-bias
/// cells and stars living in low-bias cells (independent mode; the strata
/// share no stars). Deltas are high stratum minus low stratum.
pub fn bias_strata_check(
    catalog: &Catalog,
    grid: &Grid,
    diags: &GridDiagnostics,
    source: AgeSource,
    split: StrataSplit,
    peak_bin_width: f64,
    tau_old: f64,
    reps: usize,
    seed: u64,
) -> Result<TracerDeltas> {
    if grid.spec.n_rows() != diags.n_rows || grid.spec.n_cols() != diags.n_cols {
        return Err(Error::BinningMismatch);
    }
    let s_threshold = match split {
        StrataSplit::Classification => None,
        StrataSplit::SQuantile(q) => {
            let s_values: Vec<f64> =
                diags.cells.iter().filter_map(|c| c.s).collect();
            if s_values.is_empty() {
                return Err(Error::NoValidCells);
            }
            Some(quantile(&s_values, q)?)
        }
    };

    let mut high_rows = Vec::new();
    let mut low_rows = Vec::new();
    for cell in &grid.cells {
        let diag = diags.cell(cell.i, cell.j);
        let side = match (split, s_threshold) {
            (StrataSplit::Classification, _) => match diag.classification {
                Classification::HighBias => Some(true),
                Classification::LowBias => Some(false),
                _ => None,
            },
            (StrataSplit::SQuantile(_), Some(thr)) => diag.s.map(|s| s >= thr),
            _ => unreachable!(),
        };
        match side {
            Some(true) => high_rows.extend_from_slice(&cell.members),
            Some(false) => low_rows.extend_from_slice(&cell.members),
            None => {}
        }
    }
    if high_rows.len() < 2 {
        return Err(Error::EmptyGroup("high-bias stratum".into()));
    }
    if low_rows.len() < 2 {
        return Err(Error::EmptyGroup("low-bias stratum".into()));
    }
    let ages_high = catalog.ages(&high_rows, source);
    let ages_low = catalog.ages(&low_rows, source);
    compare_histories(
        &ages_low,
        &ages_high,
        CompareMode::Independent,
        peak_bin_width,
        tau_old,
        reps,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::StarRecord;
    use crate::grid::{EdgeStrategy, GridSpec};
    use crate::sbw::{CellDiagnostic, MapMode};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn cff_counts_fraction_at_or_above() {
        let s = history_summary(&[2.0, 4.0, 6.0, 8.0], &[5.0], 0.5, 10.0).unwrap();
        assert_eq!(s.cff, vec![(5.0, 0.5)]);
    }

    #[test]
    fn cff_rows_run_from_old_to_young() {
        let ages = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0];
        let grid = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
        let s = history_summary(&ages, &grid, 0.5, 10.0).unwrap();
        assert_eq!(s.cff.first().unwrap().0, 12.0);
        assert_eq!(s.cff.last().unwrap(), &(0.0, 1.0), "every age is >= 0");
        // descending tau means non-decreasing fraction along the table
        assert!(s.cff.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn dt_form_from_stated_quantile_rule() {
        let s = history_summary(&[0.0, 1.0, 2.0, 3.0, 4.0], &[2.0], 0.5, 10.0).unwrap();
        assert_relative_eq!(s.dt_form, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn f_old_is_a_strict_threshold() {
        let s = history_summary(&[5.0, 11.0, 12.0, 9.0], &[5.0], 0.5, 10.0).unwrap();
        assert_relative_eq!(s.f_old, 0.5);
        let t = history_summary(&[10.0, 10.0, 11.0, 9.0], &[5.0], 0.5, 10.0).unwrap();
        assert_relative_eq!(t.f_old, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn peak_age_is_the_fullest_bin_center() {
        let mut ages = vec![9.3, 9.2, 9.4, 9.1, 9.3];
        ages.extend([2.0, 5.0, 7.0, 12.0]);
        let s = history_summary(&ages, &[5.0], 0.5, 10.0).unwrap();
        assert_relative_eq!(s.peak_age, 9.25, epsilon = 1e-12);
    }

    #[test]
    fn ascending_grid_is_required() {
        assert!(history_summary(&[5.0], &[3.0, 3.0], 0.5, 10.0).is_err());
        assert!(history_summary(&[5.0], &[4.0, 3.0], 0.5, 10.0).is_err());
    }

    #[test]
    fn identical_sides_give_exact_zero_everywhere() {
        let ages: Vec<f64> = (0..80).map(|k| 2.0 + 0.15 * k as f64).collect();
        let d = compare_histories(&ages, &ages, CompareMode::Paired, 0.5, 10.0, 150, 11).unwrap();
        assert_eq!(d.dt_form.delta, 0.0);
        assert_eq!(d.dt_form.z, 0.0);
        assert_eq!(d.peak_age.delta, 0.0);
        assert_eq!(d.f_old.delta, 0.0);
        assert_eq!(d.f_old.p_two_sided, 1.0);
    }

    #[test]
    fn paired_stretch_widens_dt_form_decisively() {
        // side b stretches the distribution about its median so the
        // interquartile span grows from exactly 3.04 to exactly 3.55 Gyr
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 2.2535).unwrap();
        let raw: Vec<f64> = (0..2834).map(|_| 8.0 + noise.sample(&mut rng)).collect();
        let m = quantile(&raw, 0.5).unwrap();
        let iqr = quantile(&raw, 0.75).unwrap() - quantile(&raw, 0.25).unwrap();
        let ages_a: Vec<f64> = raw.iter().map(|v| m + (v - m) * (3.04 / iqr)).collect();
        let ages_b: Vec<f64> = ages_a.iter().map(|v| m + (v - m) * (3.55 / 3.04)).collect();

        let d =
            compare_histories(&ages_a, &ages_b, CompareMode::Paired, 0.5, 10.0, 400, 7).unwrap();
        assert_relative_eq!(d.dt_form.delta, 0.51, epsilon = 1e-9);
        assert!(d.dt_form.z > 3.0, "z = {}", d.dt_form.z);
    }

    #[test]
    fn paired_peak_shift_is_recovered() {
        // heavy cluster near 9.1 Gyr moves to near 6.0 Gyr in side b
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jitter = Normal::new(0.0, 0.1).unwrap();
        let broad = Normal::new(0.0, 3.0).unwrap();
        let mut ages_a = Vec::new();
        let mut ages_b = Vec::new();
        for _ in 0..400 {
            let j = jitter.sample(&mut rng);
            ages_a.push(9.3 + j);
            ages_b.push(6.2 + j);
        }
        for _ in 0..300 {
            let v: f64 = 8.0 + broad.sample(&mut rng);
            let v = v.clamp(0.5, 14.0);
            ages_a.push(v);
            ages_b.push(v);
        }
        let d =
            compare_histories(&ages_a, &ages_b, CompareMode::Paired, 0.5, 10.0, 200, 5).unwrap();
        assert!(
            (d.peak_age.delta + 3.1).abs() <= 0.35,
            "peak delta = {}",
            d.peak_age.delta
        );
        assert!(d.peak_age.z < -3.0 || d.peak_age.z == f64::NEG_INFINITY);
    }

    #[test]
    fn paired_mode_rejects_unequal_lengths() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![1.0, 2.0];
        assert!(compare_histories(&a, &b, CompareMode::Paired, 0.5, 10.0, 150, 1).is_err());
    }

    fn synthetic_record(id: usize, snr: f64, age: f64) -> StarRecord {
        StarRecord {
            id: format!("s{id}"),
            teff: 4800.0,
            logg: 2.5,
            feh: -0.2,
            alpha_fe: 0.1,
            snr,
            plx: 2.0,
            plx_err: 0.1,
            distance: 0.5,
            gal_r: 8.0,
            gal_z: 0.3,
            age_infer: age,
            age_seismo: None,
        }
    }

    fn permissive_cuts(snr_min: f64) -> QualityCuts {
        QualityCuts {
            snr_min,
            plx_snr_min: 0.0,
            teff_range: (3000.0, 7000.0),
            logg_range: (0.0, 5.0),
        }
    }

    #[test]
    fn hq_equal_to_full_sample_gives_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let age_dist = Normal::new(7.0, 2.0).unwrap();
        let records: Vec<StarRecord> = (0..300)
            .map(|i| {
                let a: f64 = age_dist.sample(&mut rng);
                synthetic_record(i, 150.0, a.clamp(0.2, 19.0))
            })
            .collect();
        let catalog = Catalog::new(records).unwrap();
        let rows: Vec<usize> = (0..300).collect();
        let d = quality_selection_check(
            &catalog,
            &rows,
            &permissive_cuts(0.0),
            AgeSource::Infer,
            0.5,
            10.0,
            150,
            13,
        )
        .unwrap();
        assert_eq!(d.dt_form.delta, 0.0);
        assert_eq!(d.dt_form.z, 0.0);
        assert_eq!(d.peak_age.delta, 0.0);
        assert_eq!(d.f_old.delta, 0.0);
    }

    #[test]
    fn uncoupled_quality_cut_stays_insignificant() {
        // snr carries no age information, so halving the sample by snr must
        // not move the tracers beyond noise for the large majority of seeds
        use rand::Rng as _;
        let mut all_quiet = 0;
        let n_seeds = 12;
        for seed in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let age_dist = Normal::new(7.0, 2.0).unwrap();
            let records: Vec<StarRecord> = (0..1200)
                .map(|i| {
                    let a: f64 = age_dist.sample(&mut rng);
                    let snr = 60.0 + 140.0 * rng.gen::<f64>();
                    synthetic_record(i, snr, a.clamp(0.2, 19.0))
                })
                .collect();
            let catalog = Catalog::new(records).unwrap();
            let rows: Vec<usize> = (0..1200).collect();
            let d = quality_selection_check(
                &catalog,
                &rows,
                &permissive_cuts(130.0),
                AgeSource::Infer,
                0.5,
                10.0,
                200,
                seed,
            )
            .unwrap();
            if d.dt_form.z.abs() < 2.0 && d.f_old.z.abs() < 2.0 && d.peak_age.z.abs() < 2.5 {
                all_quiet += 1;
            }
        }
        assert!(all_quiet >= 9, "only {all_quiet}/{n_seeds} seeds quiet");
    }

    fn one_row_two_cell_fixture(
        ages_high: &[f64],
        ages_low: &[f64],
    ) -> (Catalog, Grid, GridDiagnostics) {
        let mut records = Vec::new();
        for (k, &a) in ages_high.iter().enumerate() {
            records.push(synthetic_record(k, 80.0, a));
        }
        for (k, &a) in ages_low.iter().enumerate() {
            records.push(synthetic_record(10_000 + k, 200.0, a));
        }
        let catalog = Catalog::new(records).unwrap();
        let spec = GridSpec {
            snr_edges: vec![0.0, 150.0, 300.0],
            plx_snr_edges: vec![0.0, 50.0, 100.0],
            strategy: EdgeStrategy::Fixed,
            n_min: 2,
        };
        // every record has plx_snr = 20, so only the j = 0 column is used
        let grid = Grid::assign_catalog(spec, &catalog, &catalog.all_rows()).unwrap();
        let mk = |i: usize, j: usize, n: usize, s: Option<f64>, c: Classification| CellDiagnostic {
            i,
            j,
            n,
            delta: s.map(|v| v * 0.1),
            sigma: s.map(|_| 0.1),
            s,
            classification: c,
            replicates: None,
        };
        let diags = GridDiagnostics {
            mode: MapMode::Internal,
            stat: crate::sbw::TformStat::Median,
            tau: 3.0,
            eps: 1e-6,
            n_rows: 2,
            n_cols: 2,
            cells: vec![
                mk(0, 0, ages_high.len(), Some(5.0), Classification::HighBias),
                mk(0, 1, 0, None, Classification::InsufficientN),
                mk(1, 0, ages_low.len(), Some(0.5), Classification::LowBias),
                mk(1, 1, 0, None, Classification::InsufficientN),
            ],
            r_tilde: None,
            reference: None,
        };
        (catalog, grid, diags)
    }

    #[test]
    fn strata_split_detects_old_shifted_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dist = Normal::new(0.0, 1.5).unwrap();
        let ages_high: Vec<f64> = (0..600)
            .map(|_| (10.5_f64 + dist.sample(&mut rng)).clamp(0.3, 19.0))
            .collect();
        let ages_low: Vec<f64> = (0..600)
            .map(|_| (7.0_f64 + dist.sample(&mut rng)).clamp(0.3, 19.0))
            .collect();
        let (catalog, grid, diags) = one_row_two_cell_fixture(&ages_high, &ages_low);
        let d = bias_strata_check(
            &catalog,
            &grid,
            &diags,
            AgeSource::Infer,
            StrataSplit::Classification,
            0.5,
            10.0,
            300,
            23,
        )
        .unwrap();
        assert!(d.f_old.delta > 0.3, "f_old delta = {}", d.f_old.delta);
        assert!(d.f_old.z > 3.0, "z = {}", d.f_old.z);
    }

    #[test]
    fn strata_split_null_stays_quiet() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dist = Normal::new(8.0, 2.0).unwrap();
        let ages_high: Vec<f64> =
            (0..500).map(|_| Distribution::<f64>::sample(&dist, &mut rng).clamp(0.3, 19.0)).collect();
        let ages_low: Vec<f64> =
            (0..500).map(|_| Distribution::<f64>::sample(&dist, &mut rng).clamp(0.3, 19.0)).collect();
        let (catalog, grid, diags) = one_row_two_cell_fixture(&ages_high, &ages_low);
        let d = bias_strata_check(
            &catalog,
            &grid,
            &diags,
            AgeSource::Infer,
            StrataSplit::Classification,
            0.5,
            10.0,
            300,
            31,
        )
        .unwrap();
        assert!(d.dt_form.z.abs() < 2.5, "dt z = {}", d.dt_form.z);
        assert!(d.f_old.z.abs() < 2.5, "f_old z = {}", d.f_old.z);
    }

    #[test]
    fn all_cells_on_one_side_is_an_error() {
        let ages: Vec<f64> = (0..40).map(|k| 4.0 + 0.1 * k as f64).collect();
        let (catalog, grid, mut diags) = one_row_two_cell_fixture(&ages, &ages);
        diags.cells[0].classification = Classification::LowBias;
        let r = bias_strata_check(
            &catalog,
            &grid,
            &diags,
            AgeSource::Infer,
            StrataSplit::Classification,
            0.5,
            10.0,
            150,
            1,
        );
        assert!(matches!(r, Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn quantile_split_uses_cell_s_values() {
        let ages_a: Vec<f64> = (0..60).map(|k| 5.0 + 0.05 * k as f64).collect();
        let ages_b: Vec<f64> = (0..60).map(|k| 5.0 + 0.05 * k as f64).collect();
        let (catalog, grid, diags) = one_row_two_cell_fixture(&ages_a, &ages_b);
        // median split: cell with s = 5.0 lands high, s = 0.5 lands low
        let d = bias_strata_check(
            &catalog,
            &grid,
            &diags,
            AgeSource::Infer,
            StrataSplit::SQuantile(0.5),
            0.5,
            10.0,
            150,
            2,
        )
        .unwrap();
        assert_eq!(d.dt_form.delta, 0.0);
    }

    proptest! {
        #[test]
        fn cff_never_increases_with_age(
            ages in proptest::collection::vec(0.1_f64..19.9, 3..60),
            grid_step in 0.5_f64..3.0,
        ) {
            let grid: Vec<f64> = (0..8).map(|k| k as f64 * grid_step).collect();
            let s = history_summary(&ages, &grid, 0.5, 10.0).unwrap();
            // stored descending in age, so fraction is non-decreasing
            prop_assert!(s.cff.windows(2).all(|w| w[1].1 >= w[0].1));
            prop_assert!(s.dt_form >= 0.0);
            prop_assert!((0.0..=1.0).contains(&s.f_old));
        }

        #[test]
        fn dt_form_is_translation_invariant_and_scales(
            ages in proptest::collection::vec(0.5_f64..15.0, 4..50),
            shift in 0.0_f64..3.0,
            scale in 0.5_f64..2.0,
        ) {
            let base = history_summary(&ages, &[5.0], 0.5, 10.0).unwrap().dt_form;
            let shifted: Vec<f64> = ages.iter().map(|a| a + shift).collect();
            let scaled: Vec<f64> = ages.iter().map(|a| a * scale).collect();
            let dt_shift = history_summary(&shifted, &[5.0], 0.5, 10.0).unwrap().dt_form;
            let dt_scale = history_summary(&scaled, &[5.0], 0.5, 10.0).unwrap().dt_form;
            prop_assert!((dt_shift - base).abs() < 1e-9 * (1.0 + base));
            prop_assert!((dt_scale - scale * base).abs() < 1e-9 * (1.0 + base));
        }

        #[test]
        fn f_old_ignores_order(
            mut ages in proptest::collection::vec(0.5_f64..19.0, 4..50),
            rot in 0usize..50,
        ) {
            let base = history_summary(&ages, &[5.0], 0.5, 10.0).unwrap().f_old;
            let r = rot % ages.len();
            ages.rotate_left(r);
            let rotated = history_summary(&ages, &[5.0], 0.5, 10.0).unwrap().f_old;
            prop_assert_eq!(base, rotated);
        }
    }
}
