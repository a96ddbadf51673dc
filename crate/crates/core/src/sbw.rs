//! Stable-but-wrong diagnostic maps.
//!
//! A cell is "stable but wrong" when its formation-time proxy sits many
//! resampling scales away from a reference while the in-cell scatter stays
//! small: high significance `s = |delta| / sigma_cell` with a tight
//! `sigma_cell`. Two references are supported. The internal map compares
//! each cell against the high-quality subsample and can only expose
//! *relative* distortion; the truth map anchors each cell to stars that also
//! carry an independent (asteroseismic) age and measures the bias directly.
//!
//! The catalog-level stability ratio `r_tilde` is the median absolute cell
//! offset divided by the mean cell scale; it separates the regime where the
//! bootstrap scatter still covers the bias (low) from the regime where cells
//! are confidently wrong (high).

use rayon::prelude::*;

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::stats::{
    bootstrap_stat_full, robust_scale, ScaleKind, Stat,
};

/// Default degenerate-scale guard, in Gyr.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Default high-bias threshold on `s`.
pub const DEFAULT_TAU: f64 = 3.0;

/// Formation-time proxy statistic for a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TformStat {
    Median,
    Mean,
}

impl TformStat {
    pub fn to_stat(self) -> Stat {
        match self {
            TformStat::Median => Stat::Median,
            TformStat::Mean => Stat::Mean,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(TformStat::Median),
            "mean" => Ok(TformStat::Mean),
            other => Err(Error::Config(format!("unknown formation-time statistic {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TformStat::Median => "median",
            TformStat::Mean => "mean",
        }
    }
}

/// Per-cell outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    HighBias,
    LowBias,
    /// Scale collapsed below the guard; `s` is undefined.
    Degenerate,
    /// Too few members for a diagnostic.
    InsufficientN,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::HighBias => "high_bias",
            Classification::LowBias => "low_bias",
            Classification::Degenerate => "degenerate",
            Classification::InsufficientN => "insufficient_n",
        }
    }
}

/// Significance of a cell offset. `None` means the scale sits at or below
/// the guard and the ratio is undefined; the value is never infinite.
pub fn s_metric(delta: f64, sigma_cell: f64, eps: f64) -> Result<Option<f64>> {
    if sigma_cell < 0.0 {
        return Err(Error::NegativeSigma(sigma_cell));
    }
    if !delta.is_finite() || !sigma_cell.is_finite() {
        return Err(Error::NonFinite);
    }
    if sigma_cell <= eps {
        return Ok(None);
    }
    Ok(Some(delta.abs() / sigma_cell))
}

/// Threshold rule: a cell is high-bias exactly when `s >= tau`.
pub fn classify(s: f64, tau: f64) -> Classification {
    if s >= tau {
        Classification::HighBias
    } else {
        Classification::LowBias
    }
}

/// Diagnostic for one cell. `n` counts the records the diagnostic actually
/// used (all members for the internal map, truth pairs for the truth map).
#[derive(Debug, Clone)]
pub struct CellDiagnostic {
    pub i: usize,
    pub j: usize,
    pub n: usize,
    pub delta: Option<f64>,
    pub sigma: Option<f64>,
    pub s: Option<f64>,
    pub classification: Classification,
    /// Bootstrap replicate statistics, retained on request so alternative
    /// scale estimators can be applied without rerunning.
    pub replicates: Option<Vec<f64>>,
}

/// Which reference a map was computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    /// Offsets relative to the high-quality subsample.
    Internal,
    /// Offsets relative to per-star independent ages.
    Truth,
}

impl MapMode {
    pub fn name(self) -> &'static str {
        match self {
            MapMode::Internal => "internal",
            MapMode::Truth => "truth",
        }
    }
}

/// A full diagnostic map.
#[derive(Debug, Clone)]
pub struct GridDiagnostics {
    pub mode: MapMode,
    pub stat: TformStat,
    pub tau: f64,
    pub eps: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub cells: Vec<CellDiagnostic>,
    /// Median |delta| over diagnostic cells divided by their mean sigma.
    /// None when no cell produced a diagnostic.
    pub r_tilde: Option<f64>,
    /// Reference formation time (internal mode only).
    pub reference: Option<f64>,
}

impl GridDiagnostics {
    pub fn cell(&self, i: usize, j: usize) -> &CellDiagnostic {
        &self.cells[i * self.n_cols + j]
    }

    /// Cells that carry a computed offset and scale.
    pub fn diagnostic_cells(&self) -> impl Iterator<Item = &CellDiagnostic> {
        self.cells.iter().filter(|c| c.delta.is_some() && c.sigma.is_some())
    }

    pub fn high_bias_cells(&self) -> impl Iterator<Item = &CellDiagnostic> {
        self.cells
            .iter()
            .filter(|c| c.classification == Classification::HighBias)
    }

    /// Fraction of diagnostic cells classified high-bias.
    pub fn high_bias_fraction(&self) -> Option<f64> {
        let total = self
            .cells
            .iter()
            .filter(|c| {
                matches!(c.classification, Classification::HighBias | Classification::LowBias)
            })
            .count();
        if total == 0 {
            return None;
        }
        let high = self.high_bias_cells().count();
        Some(high as f64 / total as f64)
    }
}

/// Map computation options. `seed` feeds per-cell substreams, so maps are
/// deterministic at any worker count.
#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    pub stat: TformStat,
    pub reps: usize,
    pub seed: u64,
    pub eps: f64,
    pub tau: f64,
    pub keep_replicates: bool,
    /// Compute diagnostics for every cell with at least two usable records,
    /// ignoring the grid's minimum-count threshold.
    pub include_small_cells: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            stat: TformStat::Median,
            reps: 1000,
            seed: 42,
            eps: DEFAULT_EPS,
            tau: DEFAULT_TAU,
            keep_replicates: false,
            include_small_cells: false,
        }
    }
}

impl MapOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("eps must be non-negative, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Internal-reference map: each cell's formation-time proxy against the
/// high-quality subsample's. `hq_rows` index into the catalog.
pub fn internal_map(
    catalog: &Catalog,
    grid: &Grid,
    hq_rows: &[usize],
    opts: &MapOptions,
) -> Result<GridDiagnostics> {
    opts.validate()?;
    if hq_rows.is_empty() {
        return Err(Error::EmptyGroup("high-quality reference".into()));
    }
    let mut hq_ages: Vec<f64> = hq_rows
        .iter()
        .map(|&r| catalog.records()[r].age_infer)
        .collect();
    let reference = opts.stat.to_stat().eval(&mut hq_ages);

    let cells = run_cells(grid, opts, |cell| {
        cell.members
            .iter()
            .map(|&r| catalog.records()[r].age_infer)
            .collect()
    }, reference)?;

    let r_tilde = r_tilde_of(&cells).ok();
    Ok(GridDiagnostics {
        mode: MapMode::Internal,
        stat: opts.stat,
        tau: opts.tau,
        eps: opts.eps,
        n_rows: grid.spec.n_rows(),
        n_cols: grid.spec.n_cols(),
        cells,
        r_tilde,
        reference: Some(reference),
    })
}

/// Truth-anchored map: per cell, the chosen statistic of the per-star
/// differences (inferred minus independent age) with its bootstrap scale.
/// Only records carrying both ages participate; per-cell counts refer to
/// those records.
pub fn truth_map(catalog: &Catalog, grid: &Grid, opts: &MapOptions) -> Result<GridDiagnostics> {
    opts.validate()?;
    let any_pairs = grid.cells.iter().any(|c| {
        c.members
            .iter()
            .any(|&r| catalog.records()[r].age_seismo.is_some())
    });
    if !any_pairs {
        return Err(Error::NoTruthPairs);
    }

    let cells = run_cells(grid, opts, |cell| {
        cell.members
            .iter()
            .filter_map(|&r| {
                let rec = &catalog.records()[r];
                rec.age_seismo.map(|truth| rec.age_infer - truth)
            })
            .collect()
    }, 0.0)?;

    let r_tilde = r_tilde_of(&cells).ok();
    Ok(GridDiagnostics {
        mode: MapMode::Truth,
        stat: opts.stat,
        tau: opts.tau,
        eps: opts.eps,
        n_rows: grid.spec.n_rows(),
        n_cols: grid.spec.n_cols(),
        cells,
        r_tilde,
        reference: None,
    })
}

fn run_cells<F>(
    grid: &Grid,
    opts: &MapOptions,
    values_of: F,
    reference: f64,
) -> Result<Vec<CellDiagnostic>>
where
    F: Fn(&crate::grid::Cell) -> Vec<f64> + Sync,
{
    let n_min = grid.spec.n_min;
    let stat = opts.stat.to_stat();
    grid.cells
        .par_iter()
        .map(|cell| {
            let values = values_of(cell);
            let n = values.len();
            let enough = if opts.include_small_cells { n >= 2 } else { n >= n_min && n >= 2 };
            if !enough {
                return Ok(CellDiagnostic {
                    i: cell.i,
                    j: cell.j,
                    n,
                    delta: None,
                    sigma: None,
                    s: None,
                    classification: Classification::InsufficientN,
                    replicates: None,
                });
            }
            // Per-cell seed is derived from (master seed, i, j): the map is
            // reproducible cell by cell in any execution order.
            let salt = ((cell.i as u64) << 32) | cell.j as u64;
            let seed = crate::stats::derive_seed(opts.seed, salt);
            let boot = bootstrap_stat_full(&values, stat, opts.reps, seed, opts.keep_replicates)?;
            let delta = boot.point - reference;
            let sigma = boot.se;
            let s = s_metric(delta, sigma, opts.eps)?;
            let classification = match s {
                Some(v) => classify(v, opts.tau),
                None => Classification::Degenerate,
            };
            Ok(CellDiagnostic {
                i: cell.i,
                j: cell.j,
                n,
                delta: Some(delta),
                sigma: Some(sigma),
                s,
                classification,
                replicates: boot.replicates,
            })
        })
        .collect()
}

/// Stability ratio over the cells of one map: median absolute offset of the
/// diagnostic cells divided by their mean scale.
pub fn r_tilde(diags: &GridDiagnostics) -> Result<f64> {
    r_tilde_of(&diags.cells)
}

fn r_tilde_of(cells: &[CellDiagnostic]) -> Result<f64> {
    let mut abs_delta = Vec::new();
    let mut sigma_sum = 0.0;
    for c in cells {
        if let (Some(d), Some(sig)) = (c.delta, c.sigma) {
            abs_delta.push(d.abs());
            sigma_sum += sig;
        }
    }
    if abs_delta.is_empty() {
        return Err(Error::NoValidCells);
    }
    let med = crate::stats::quantile(&abs_delta, 0.5)?;
    let mean_sigma = sigma_sum / abs_delta.len() as f64;
    if mean_sigma <= 0.0 {
        // all diagnostic cells collapsed; the ratio carries no information
        return Err(Error::DegenerateScale);
    }
    Ok(med / mean_sigma)
}

/// Recompute a map's scales from retained bootstrap replicates with an
/// alternative estimator, then reclassify. Errors if the map was built
/// without `keep_replicates`.
pub fn sigma_alt_map(diags: &GridDiagnostics, kind: ScaleKind) -> Result<GridDiagnostics> {
    let mut cells = Vec::with_capacity(diags.cells.len());
    for c in &diags.cells {
        if c.delta.is_none() {
            cells.push(c.clone());
            continue;
        }
        let reps = c.replicates.as_ref().ok_or(Error::ReplicatesMissing)?;
        let sigma = robust_scale(reps, kind)?;
        let delta = c.delta.unwrap();
        let s = s_metric(delta, sigma, diags.eps)?;
        let classification = match s {
            Some(v) => classify(v, diags.tau),
            None => Classification::Degenerate,
        };
        cells.push(CellDiagnostic {
            i: c.i,
            j: c.j,
            n: c.n,
            delta: Some(delta),
            sigma: Some(sigma),
            s,
            classification,
            replicates: Some(reps.clone()),
        });
    }
    let r_tilde = r_tilde_of(&cells).ok();
    Ok(GridDiagnostics { cells, r_tilde, ..diags.clone() })
}
