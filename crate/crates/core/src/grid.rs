//! Two-dimensional data-quality grid: spectral SNR on one axis, parallax
//! signal-to-noise on the other. Cells partition the catalog; each analysis
//! cell carries its member rows and a validity flag from the minimum-count
//! threshold. Undersized cells are kept and flagged, never dropped.

use std::path::Path;

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::stats::quantile;

/// How bin edges are placed along an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeStrategy {
    /// Equal-count edges at evenly spaced quantiles.
    Quantile,
    /// Equal-width edges between the axis minimum and maximum.
    Fixed,
}

impl EdgeStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(EdgeStrategy::Quantile),
            "fixed" => Ok(EdgeStrategy::Fixed),
            other => Err(Error::Config(format!("unknown edge strategy {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeStrategy::Quantile => "quantile",
            EdgeStrategy::Fixed => "fixed",
        }
    }
}

/// Grid geometry plus the validity threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub snr_edges: Vec<f64>,
    pub plx_snr_edges: Vec<f64>,
    pub strategy: EdgeStrategy,
    pub n_min: usize,
}

impl GridSpec {
    pub fn n_rows(&self) -> usize {
        self.snr_edges.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.plx_snr_edges.len() - 1
    }

    /// Cell of a point, or None when it falls outside the grid. Intervals
    /// are half-open with the top edge closed, so every in-range point lands
    /// in exactly one cell.
    pub fn assign(&self, snr: f64, plx_snr: f64) -> Option<(usize, usize)> {
        let i = bin_of(&self.snr_edges, snr)?;
        let j = bin_of(&self.plx_snr_edges, plx_snr)?;
        Some((i, j))
    }

    /// Plain-text serialization, full float precision.
    pub fn to_text(&self) -> String {
        let fmt = |edges: &[f64]| {
            edges.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "strategy={}\nn_min={}\nsnr_edges={}\nplx_snr_edges={}\n",
            self.strategy.name(),
            self.n_min,
            fmt(&self.snr_edges),
            fmt(&self.plx_snr_edges)
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut strategy = None;
        let mut n_min = None;
        let mut snr_edges = None;
        let mut plx_edges = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad grid spec line {line:?}")))?;
            match key.trim() {
                "strategy" => strategy = Some(EdgeStrategy::parse(value.trim())?),
                "n_min" => {
                    n_min = Some(value.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("bad n_min {value:?}"))
                    })?)
                }
                "snr_edges" => snr_edges = Some(parse_edge_list(value)?),
                "plx_snr_edges" => plx_edges = Some(parse_edge_list(value)?),
                other => return Err(Error::Config(format!("unknown grid spec key {other:?}"))),
            }
        }
        let spec = GridSpec {
            snr_edges: snr_edges.ok_or_else(|| Error::Config("grid spec missing snr_edges".into()))?,
            plx_snr_edges: plx_edges
                .ok_or_else(|| Error::Config("grid spec missing plx_snr_edges".into()))?,
            strategy: strategy.ok_or_else(|| Error::Config("grid spec missing strategy".into()))?,
            n_min: n_min.ok_or_else(|| Error::Config("grid spec missing n_min".into()))?,
        };
        validate_edges(&spec.snr_edges, "snr")?;
        validate_edges(&spec.plx_snr_edges, "plx_snr")?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_edge_list(value: &str) -> Result<Vec<f64>> {
    value
        .trim()
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad edge value {t:?}")))
        })
        .collect()
}

fn validate_edges(edges: &[f64], axis: &str) -> Result<()> {
    if edges.len() < 3 {
        return Err(Error::Config(format!("{axis} axis needs at least 2 bins")));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::DegenerateEdges { axis: axis.to_string() });
    }
    Ok(())
}

fn bin_of(edges: &[f64], x: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if x < edges[0] || x > edges[last] {
        return None;
    }
    if x == edges[last] {
        return Some(last - 1); // top edge closed
    }
    // partition_point gives the count of edges <= x; bins are [e_k, e_{k+1}).
    Some(edges.partition_point(|&e| e <= x) - 1)
}

/// One grid cell with its member rows.
#[derive(Debug, Clone)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
    pub members: Vec<usize>,
    /// Met the minimum-count threshold.
    pub valid: bool,
}

/// A built grid: geometry, cells in row-major order, and whatever fell
/// outside the edges.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: GridSpec,
    pub cells: Vec<Cell>,
    pub outside: Vec<usize>,
}

impl Grid {
    pub fn cell(&self, i: usize, j: usize) -> &Cell {
        &self.cells[i * self.spec.n_cols() + j]
    }

    /// Recompute validity under a different threshold without re-binning.
    pub fn rethreshold(&mut self, n_min: usize) {
        self.spec.n_min = n_min;
        for cell in &mut self.cells {
            cell.valid = cell.members.len() >= n_min;
        }
    }

    /// Assign rows of a catalog onto an existing geometry.
    pub fn assign_catalog(spec: GridSpec, catalog: &Catalog, rows: &[usize]) -> Result<Grid> {
        validate_edges(&spec.snr_edges, "snr")?;
        validate_edges(&spec.plx_snr_edges, "plx_snr")?;
        let n_rows = spec.n_rows();
        let n_cols = spec.n_cols();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_rows * n_cols];
        let mut outside = Vec::new();
        for &row in rows {
            let rec = &catalog.records()[row];
            let plx_snr = rec.plx_snr()?;
            match spec.assign(rec.snr, plx_snr) {
                Some((i, j)) => members[i * n_cols + j].push(row),
                None => outside.push(row),
            }
        }
        let n_min = spec.n_min;
        let cells = members
            .into_iter()
            .enumerate()
            .map(|(k, m)| Cell {
                i: k / n_cols,
                j: k % n_cols,
                valid: m.len() >= n_min,
                members: m,
            })
            .collect();
        Ok(Grid { spec, cells, outside })
    }
}

/// Build a grid over the given rows of a catalog.
pub fn build_grid(
    catalog: &Catalog,
    rows: &[usize],
    n_bins_snr: usize,
    n_bins_plx: usize,
    strategy: EdgeStrategy,
    n_min: usize,
) -> Result<Grid> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_bins_snr < 2 || n_bins_plx < 2 {
        return Err(Error::Config("bin counts must be at least 2 per axis".into()));
    }
    let snr: Vec<f64> = rows.iter().map(|&i| catalog.records()[i].snr).collect();
    let plx_snr: Vec<f64> = rows
        .iter()
        .map(|&i| catalog.records()[i].plx_snr())
        .collect::<Result<_>>()?;

    let snr_edges = axis_edges(&snr, n_bins_snr, strategy, "snr")?;
    let plx_snr_edges = axis_edges(&plx_snr, n_bins_plx, strategy, "plx_snr")?;
    let spec = GridSpec { snr_edges, plx_snr_edges, strategy, n_min };
    Grid::assign_catalog(spec, catalog, rows)
}

fn axis_edges(values: &[f64], n_bins: usize, strategy: EdgeStrategy, axis: &str) -> Result<Vec<f64>> {
    let edges = match strategy {
        EdgeStrategy::Quantile => {
            let mut sorted = values.to_vec();
            sorted.sort_unstable_by(f64::total_cmp);
            (0..=n_bins)
                .map(|k| quantile(&sorted, k as f64 / n_bins as f64))
                .collect::<Result<Vec<f64>>>()?
        }
        EdgeStrategy::Fixed => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::NonFinite);
            }
            let w = (hi - lo) / n_bins as f64;
            let mut e: Vec<f64> = (0..=n_bins).map(|k| lo + w * k as f64).collect();
            e[n_bins] = hi; // guard against rounding pushing the max outside
            e
        }
    };
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::DegenerateEdges { axis: axis.to_string() });
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::StarRecord;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn catalog_with_quality(points: &[(f64, f64)]) -> Catalog {
        let recs: Vec<StarRecord> = points
            .iter()
            .enumerate()
            .map(|(i, &(snr, plx_snr))| StarRecord {
                id: format!("g{i}"),
                teff: 4800.0,
                logg: 2.5,
                feh: -0.2,
                alpha_fe: 0.1,
                snr,
                plx: plx_snr * 0.05,
                plx_err: 0.05,
                distance: 1.0,
                gal_r: 8.0,
                gal_z: 0.0,
                age_infer: 5.0,
                age_seismo: None,
            })
            .collect();
        Catalog::new(recs).unwrap()
    }

    #[test]
    fn quantile_edges_on_nine_distinct_values() {
        let pts: Vec<(f64, f64)> = (1..=9).map(|k| (k as f64, k as f64)).collect();
        let cat = catalog_with_quality(&pts);
        let rows = cat.all_rows();
        let grid = build_grid(&cat, &rows, 3, 3, EdgeStrategy::Quantile, 1).unwrap();
        let e = &grid.spec.snr_edges;
        assert_relative_eq!(e[0], 1.0);
        assert_relative_eq!(e[1], 11.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(e[2], 19.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(e[3], 9.0);
        // equal-count marginals: three per row
        for i in 0..3 {
            let row_total: usize = (0..3).map(|j| grid.cell(i, j).members.len()).sum();
            assert_eq!(row_total, 3);
        }
    }

    #[test]
    fn identical_axis_values_are_degenerate() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| (50.0, k as f64 + 1.0)).collect();
        let cat = catalog_with_quality(&pts);
        let rows = cat.all_rows();
        let err = build_grid(&cat, &rows, 3, 3, EdgeStrategy::Quantile, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateEdges { axis } if axis == "snr"));
    }

    #[test]
    fn fixed_strategy_gives_equal_widths() {
        let pts: Vec<(f64, f64)> = (0..=10).map(|k| (k as f64 * 10.0, k as f64 + 1.0)).collect();
        let cat = catalog_with_quality(&pts);
        let rows = cat.all_rows();
        let grid = build_grid(&cat, &rows, 4, 2, EdgeStrategy::Fixed, 1).unwrap();
        let e = &grid.spec.snr_edges;
        for w in e.windows(2) {
            assert_relative_eq!(w[1] - w[0], 25.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn top_edge_is_closed() {
        let edges = vec![0.0, 1.0, 2.0];
        assert_eq!(bin_of(&edges, 2.0), Some(1));
        assert_eq!(bin_of(&edges, 1.0), Some(1));
        assert_eq!(bin_of(&edges, 0.999999), Some(0));
        assert_eq!(bin_of(&edges, 2.0001), None);
        assert_eq!(bin_of(&edges, -0.1), None);
    }

    #[test]
    fn undersized_cells_are_flagged_not_dropped() {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for k in 0..20 {
            pts.push((10.0 + k as f64, 10.0 + (k % 5) as f64));
        }
        let cat = catalog_with_quality(&pts);
        let rows = cat.all_rows();
        let grid = build_grid(&cat, &rows, 2, 2, EdgeStrategy::Quantile, 50).unwrap();
        assert_eq!(grid.cells.len(), 4);
        assert!(grid.cells.iter().all(|c| !c.valid));
        let total: usize = grid.cells.iter().map(|c| c.members.len()).sum();
        assert_eq!(total + grid.outside.len(), 20);
    }

    #[test]
    fn spec_round_trips_through_text() {
        let spec = GridSpec {
            snr_edges: vec![1.0, 3.0 + 1.0 / 3.0, 9.0],
            plx_snr_edges: vec![0.5, 2.25, 7.125],
            strategy: EdgeStrategy::Quantile,
            n_min: 50,
        };
        let text = spec.to_text();
        let back = GridSpec::from_text(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn reassignment_from_serialized_spec_matches() {
        let pts: Vec<(f64, f64)> = (0..60)
            .map(|k| (20.0 + (k as f64 * 7.3) % 90.0, 2.0 + (k as f64 * 3.1) % 20.0))
            .collect();
        let cat = catalog_with_quality(&pts);
        let rows = cat.all_rows();
        let grid = build_grid(&cat, &rows, 3, 3, EdgeStrategy::Quantile, 5).unwrap();
        let spec2 = GridSpec::from_text(&grid.spec.to_text()).unwrap();
        let grid2 = Grid::assign_catalog(spec2, &cat, &rows).unwrap();
        for (a, b) in grid.cells.iter().zip(grid2.cells.iter()) {
            assert_eq!(a.members, b.members);
            assert_eq!(a.valid, b.valid);
        }
    }

    #[test]
    fn rethreshold_updates_validity_in_place() {
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|k| (10.0 + k as f64, 1.0 + (k % 8) as f64))
            .collect();
        let cat = catalog_with_quality(&pts);
        let rows = cat.all_rows();
        let mut grid = build_grid(&cat, &rows, 2, 2, EdgeStrategy::Quantile, 5).unwrap();
        let before: Vec<usize> = grid.cells.iter().map(|c| c.members.len()).collect();
        grid.rethreshold(11);
        for (cell, n) in grid.cells.iter().zip(before) {
            assert_eq!(cell.members.len(), n);
            assert_eq!(cell.valid, n >= 11);
        }
    }

    proptest! {
        // Cells plus the outside bucket partition the input rows exactly.
        #[test]
        fn cells_partition_rows(
            raw in proptest::collection::vec((1.0f64..300.0, 0.5f64..50.0), 8..120),
            nb_snr in 2usize..5,
            nb_plx in 2usize..5,
            fixed in proptest::bool::ANY,
        ) {
            let cat = catalog_with_quality(&raw);
            let rows = cat.all_rows();
            let strategy = if fixed { EdgeStrategy::Fixed } else { EdgeStrategy::Quantile };
            let grid = match build_grid(&cat, &rows, nb_snr, nb_plx, strategy, 3) {
                Ok(g) => g,
                // duplicated quantile edges are a legitimate rejection
                Err(Error::DegenerateEdges { .. }) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            };
            let mut seen = vec![false; raw.len()];
            for cell in &grid.cells {
                for &m in &cell.members {
                    prop_assert!(!seen[m], "row {m} assigned twice");
                    seen[m] = true;
                }
            }
            for &m in &grid.outside {
                prop_assert!(!seen[m]);
                seen[m] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
            // edges span the data, so nothing is actually outside
            prop_assert!(grid.outside.is_empty());
        }

        // With all-distinct values under the quantile strategy, marginal
        // counts per row differ by at most one.
        #[test]
        fn quantile_marginals_are_balanced(
            n in 20usize..150,
            nb in 2usize..6,
        ) {
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|k| {
                    let x = (k as f64 * 0.7354).sin() * 100.0 + 150.0 + k as f64 * 1e-6;
                    let y = (k as f64 * 0.311).cos() * 10.0 + 20.0 + k as f64 * 1e-7;
                    (x, y)
                })
                .collect();
            let cat = catalog_with_quality(&pts);
            let rows = cat.all_rows();
            let grid = build_grid(&cat, &rows, nb, nb, EdgeStrategy::Quantile, 1).unwrap();
            let mut row_counts = vec![0usize; nb];
            for cell in &grid.cells {
                row_counts[cell.i] += cell.members.len();
            }
            let lo = row_counts.iter().min().unwrap();
            let hi = row_counts.iter().max().unwrap();
            prop_assert!(hi - lo <= 1, "row counts {row_counts:?}");
        }
    }
}
