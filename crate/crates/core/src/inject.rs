//! Synthetic catalogs and injection-recovery experiments.
//!
//! A minimal inference surrogate stands in for the real age pipeline:
//!
//! ```text
//! a_infer = (1 - lambda) * a_true + lambda * prior_mean
//!           + beta0 * bias_mult(cell) + Normal(0, noise(cell))
//! ```
//!
//! True ages come from a Gaussian-mixture formation history, metallicity is
//! linked linearly to true age so matching experiments have something to
//! match on, and each star's quality coordinates put it in a known grid
//! cell. Everything downstream (truth mapping, the dimensionless ratio,
//! phase scans) is a deterministic function of the config, seed included.

use crate::catalog::{Catalog, StarRecord};
use crate::error::{Error, Result};
use crate::grid::{EdgeStrategy, Grid, GridSpec};
use crate::sbw::{self, GridDiagnostics, MapOptions, TformStat};
use crate::stats::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Deserialize;

/// Ages are clipped into this window so synthetic records stay valid.
pub const AGE_CLIP: (f64, f64) = (1e-3, 20.0);

// quality-axis layout: row i spans snr in [50 + 50 i, 50 + 50 (i+1)),
// column j spans plx_snr in [5 + 5 j, 5 + 5 (j+1))
const SNR_BASE: f64 = 50.0;
const SNR_STEP: f64 = 50.0;
const PLXSNR_BASE: f64 = 5.0;
const PLXSNR_STEP: f64 = 5.0;
const PLX_ERR: f64 = 0.1;

// rng stream ids within the config seed
const STREAM_AGES: u64 = 1;
const STREAM_COVARIATES: u64 = 2;
const STREAM_SURROGATE: u64 = 3;
// salt for the bootstrap seed handed to the truth map
const SALT_BOOTSTRAP: u64 = 4;

/// Per-cell scalar field over the quality grid.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSpec {
    /// Same value everywhere.
    Uniform(f64),
    /// `low` on the low-SNR half of the rows, `high` elsewhere. With an odd
    /// row count the middle row goes to the high-quality side.
    LowQualityHalf { low: f64, high: f64 },
    /// Linear ramp in (i + j) from the worst-quality corner to the best.
    Gradient { from: f64, to: f64 },
    /// Explicit row-major values, one per cell.
    Explicit(Vec<f64>),
}

impl ProfileSpec {
    /// Value at cell (i, j) of a rows x cols grid.
    pub fn value(&self, i: usize, j: usize, rows: usize, cols: usize) -> f64 {
        match self {
            Self::Uniform(v) => *v,
            Self::LowQualityHalf { low, high } => {
                if i * 2 < rows {
                    *low
                } else {
                    *high
                }
            }
            Self::Gradient { from, to } => {
                let span = (rows - 1) + (cols - 1);
                if span == 0 {
                    *from
                } else {
                    from + (to - from) * (i + j) as f64 / span as f64
                }
            }
            Self::Explicit(values) => values[i * cols + j],
        }
    }

    /// Parse "uniform:V", "low-quality-half:LOW:HIGH", "gradient:FROM:TO",
    /// or "explicit:v1,v2,...".
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |t: &str| Error::Config(format!("cannot parse profile '{t}'"));
        let (kind, rest) = text.split_once(':').ok_or_else(|| bad(text))?;
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split(|c| c == ':' || c == ',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| bad(text)))
                .collect()
        };
        match kind.trim() {
            "uniform" => {
                let v = nums(rest)?;
                if v.len() != 1 {
                    return Err(bad(text));
                }
                Ok(Self::Uniform(v[0]))
            }
            "low-quality-half" => {
                let v = nums(rest)?;
                if v.len() != 2 {
                    return Err(bad(text));
                }
                Ok(Self::LowQualityHalf { low: v[0], high: v[1] })
            }
            "gradient" => {
                let v = nums(rest)?;
                if v.len() != 2 {
                    return Err(bad(text));
                }
                Ok(Self::Gradient { from: v[0], to: v[1] })
            }
            "explicit" => Ok(Self::Explicit(nums(rest)?)),
            _ => Err(bad(text)),
        }
    }

    fn check(&self, what: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<()> {
        if let Self::Explicit(values) = self {
            if values.len() != rows * cols {
                return Err(Error::Config(format!(
                    "{what} profile needs {} values, got {}",
                    rows * cols,
                    values.len()
                )));
            }
        }
        for i in 0..rows {
            for j in 0..cols {
                let v = self.value(i, j, rows, cols);
                if !v.is_finite() || v < lo || v > hi {
                    return Err(Error::Config(format!(
                        "{what} profile value {v} at cell ({i}, {j}) outside [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One Gaussian component of the true-age mixture.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct SfhComponent {
    pub mean: f64,
    pub spread: f64,
    pub weight: f64,
}

/// Linear link from true age to metallicity with Gaussian scatter.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct FehLink {
    pub intercept: f64,
    pub slope: f64,
    pub scatter: f64,
}

impl Default for FehLink {
    fn default() -> Self {
        // older stars more metal-poor, mild scatter
        Self { intercept: 0.2, slope: -0.06, scatter: 0.08 }
    }
}

/// Full description of one synthetic experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_per_cell: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub sfh: Vec<SfhComponent>,
    /// Global bias amplitude, Gyr.
    pub bias_amp: f64,
    pub prior_mean: f64,
    /// Cell multiplier on the bias amplitude, in [0, 1].
    pub bias_profile: ProfileSpec,
    /// Shrinkage toward the prior mean, in [0, 1].
    pub shrink_profile: ProfileSpec,
    /// Per-star noise SD, Gyr.
    pub noise_profile: ProfileSpec,
    pub feh_link: FehLink,
    /// Spread quality coordinates uniformly inside each cell instead of
    /// pinning them at the center; required when downstream analyses
    /// re-bin by quantiles.
    pub quality_jitter: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_per_cell: 200,
            grid_rows: 3,
            grid_cols: 3,
            sfh: vec![
                SfhComponent { mean: 6.0, spread: 1.5, weight: 0.5 },
                SfhComponent { mean: 10.0, spread: 1.5, weight: 0.5 },
            ],
            bias_amp: 0.0,
            prior_mean: 8.0,
            bias_profile: ProfileSpec::Uniform(1.0),
            shrink_profile: ProfileSpec::Uniform(0.0),
            noise_profile: ProfileSpec::Uniform(2.0),
            feh_link: FehLink::default(),
            quality_jitter: false,
        }
    }
}

#[derive(Deserialize)]
struct RawProfiles {
    bias: String,
    shrink: String,
    noise: String,
}

#[derive(Deserialize)]
struct RawSimConfig {
    seed: u64,
    n_per_cell: usize,
    grid_rows: usize,
    grid_cols: usize,
    sfh: Vec<SfhComponent>,
    bias_amp: f64,
    prior_mean: f64,
    profiles: RawProfiles,
    #[serde(default)]
    feh_link: Option<FehLink>,
    #[serde(default)]
    quality_jitter: bool,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawSimConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad sim config: {e}")))?;
        let cfg = Self {
            seed: raw.seed,
            n_per_cell: raw.n_per_cell,
            grid_rows: raw.grid_rows,
            grid_cols: raw.grid_cols,
            sfh: raw.sfh,
            bias_amp: raw.bias_amp,
            prior_mean: raw.prior_mean,
            bias_profile: ProfileSpec::parse(&raw.profiles.bias)?,
            shrink_profile: ProfileSpec::parse(&raw.profiles.shrink)?,
            noise_profile: ProfileSpec::parse(&raw.profiles.noise)?,
            feh_link: raw.feh_link.unwrap_or_default(),
            quality_jitter: raw.quality_jitter,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return Err(Error::Config("grid needs at least 2 rows and 2 columns".into()));
        }
        if self.n_per_cell == 0 {
            return Err(Error::Config("n_per_cell must be positive".into()));
        }
        if self.sfh.is_empty() {
            return Err(Error::Config("formation-history mixture is empty".into()));
        }
        let wsum: f64 = self.sfh.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {wsum}, expected 1")));
        }
        for c in &self.sfh {
            if !(c.weight > 0.0) || !(c.spread >= 0.0) || !c.mean.is_finite() {
                return Err(Error::Config("bad mixture component".into()));
            }
        }
        if !self.bias_amp.is_finite() {
            return Err(Error::NonFinite);
        }
        if !(self.prior_mean > 0.0 && self.prior_mean <= AGE_CLIP.1) {
            return Err(Error::Config(format!("prior mean {} outside (0, 20]", self.prior_mean)));
        }
        if !(self.feh_link.scatter >= 0.0) {
            return Err(Error::Config("metallicity link scatter must be >= 0".into()));
        }
        let (r, c) = (self.grid_rows, self.grid_cols);
        self.bias_profile.check("bias", r, c, 0.0, 1.0)?;
        self.shrink_profile.check("shrink", r, c, 0.0, 1.0)?;
        self.noise_profile.check("noise", r, c, 0.0, f64::INFINITY)?;
        Ok(())
    }

    /// Grid spec matching the designed quality layout.
    pub fn grid_spec(&self, n_min: usize) -> GridSpec {
        let snr_edges: Vec<f64> =
            (0..=self.grid_rows).map(|k| SNR_BASE + SNR_STEP * k as f64).collect();
        let plx_snr_edges: Vec<f64> =
            (0..=self.grid_cols).map(|k| PLXSNR_BASE + PLXSNR_STEP * k as f64).collect();
        GridSpec { snr_edges, plx_snr_edges, strategy: EdgeStrategy::Fixed, n_min }
    }

    /// Cells whose bias multiplier is nonzero — where bias was injected.
    pub fn designed_bias_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.grid_rows {
            for j in 0..self.grid_cols {
                if self.bias_profile.value(i, j, self.grid_rows, self.grid_cols) > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// The surrogate for one star: shrink toward the prior, add the cell's
/// bias, add noise, clip into the valid age window. Returns the age and
/// whether clipping fired.
pub fn inference_surrogate(
    config: &SimConfig,
    i: usize,
    j: usize,
    a_true: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, bool) {
    let (rows, cols) = (self_dims(config).0, self_dims(config).1);
    let lambda = config.shrink_profile.value(i, j, rows, cols);
    let mult = config.bias_profile.value(i, j, rows, cols);
    let sd = config.noise_profile.value(i, j, rows, cols);
    let eps = if sd > 0.0 {
        Normal::new(0.0, sd).expect("validated sd").sample(rng)
    } else {
        0.0
    };
    let raw = (1.0 - lambda) * a_true + lambda * config.prior_mean + config.bias_amp * mult + eps;
    clip_age(raw)
}

fn self_dims(config: &SimConfig) -> (usize, usize) {
    (config.grid_rows, config.grid_cols)
}

fn clip_age(raw: f64) -> (f64, bool) {
    if raw < AGE_CLIP.0 {
        (AGE_CLIP.0, true)
    } else if raw > AGE_CLIP.1 {
        (AGE_CLIP.1, true)
    } else {
        (raw, false)
    }
}

/// A generated catalog plus its designed grid and clipping counters.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub catalog: Catalog,
    pub grid_spec: GridSpec,
    /// True ages that had to be clipped into the valid window.
    pub n_clipped_true: usize,
    /// Surrogate outputs that had to be clipped.
    pub n_clipped_infer: usize,
}

/// Generate the synthetic catalog: `age_seismo` carries the true age,
/// `age_infer` the surrogate output.
pub fn synth_catalog(config: &SimConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng_ages = ChaCha8Rng::seed_from_u64(config.seed);
    rng_ages.set_stream(STREAM_AGES);
    let mut rng_cov = ChaCha8Rng::seed_from_u64(config.seed);
    rng_cov.set_stream(STREAM_COVARIATES);
    let mut rng_sur = ChaCha8Rng::seed_from_u64(config.seed);
    rng_sur.set_stream(STREAM_SURROGATE);

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let cum_weights: Vec<f64> = config
        .sfh
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.weight;
            Some(*acc)
        })
        .collect();

    let (rows, cols) = (config.grid_rows, config.grid_cols);
    let mut records = Vec::with_capacity(rows * cols * config.n_per_cell);
    let mut n_clipped_true = 0;
    let mut n_clipped_infer = 0;
    let mut serial = 0usize;

    for i in 0..rows {
        for j in 0..cols {
            for _ in 0..config.n_per_cell {
                // true age from the mixture
                let pick: f64 = rng_ages.gen();
                let comp = cum_weights.iter().position(|&w| pick < w).unwrap_or(config.sfh.len() - 1);
                let c = &config.sfh[comp];
                let raw_true = c.mean + c.spread * unit.sample(&mut rng_ages);
                let (a_true, clipped) = clip_age(raw_true);
                n_clipped_true += clipped as usize;

                // quality coordinates: cell centers, or uniform inside the
                // cell when downstream work needs re-binnable coordinates
                let (u, v) = if config.quality_jitter {
                    (rng_cov.gen::<f64>(), rng_cov.gen::<f64>())
                } else {
                    (0.5, 0.5)
                };
                let snr = SNR_BASE + SNR_STEP * (i as f64 + u);
                let plx_snr = PLXSNR_BASE + PLXSNR_STEP * (j as f64 + v);
                let plx = plx_snr * PLX_ERR;

                // covariates; metallicity tracks true age through the link
                let teff = 4300.0 + 900.0 * rng_cov.gen::<f64>();
                let logg = 1.8 + 1.4 * rng_cov.gen::<f64>();
                let alpha_fe = 0.3 * rng_cov.gen::<f64>();
                let feh = (config.feh_link.intercept
                    + config.feh_link.slope * a_true
                    + config.feh_link.scatter * unit.sample(&mut rng_cov))
                .clamp(-3.0, 1.0);
                let distance = 1.0 / plx;
                let gal_r = (8.0 + 2.0 * unit.sample(&mut rng_cov)).clamp(0.1, 20.0);
                let gal_z = 0.5 * unit.sample(&mut rng_cov);

                let (a_infer, clipped) = inference_surrogate(config, i, j, a_true, &mut rng_sur);
                n_clipped_infer += clipped as usize;

                records.push(StarRecord {
                    id: format!("sim{serial:06}"),
                    teff,
                    logg,
                    feh,
                    alpha_fe,
                    snr,
                    plx,
                    plx_err: PLX_ERR,
                    distance,
                    gal_r,
                    gal_z,
                    age_infer: a_infer,
                    age_seismo: Some(a_true),
                });
                serial += 1;
            }
        }
    }

    Ok(SynthOutput {
        catalog: Catalog::new(records)?,
        grid_spec: config.grid_spec(2),
        n_clipped_true,
        n_clipped_infer,
    })
}

/// Diagnostic knobs for one injection run.
#[derive(Debug, Clone, Copy)]
pub struct LabOptions {
    pub stat: TformStat,
    pub reps: usize,
    pub tau: f64,
    pub eps: f64,
}

impl Default for LabOptions {
    fn default() -> Self {
        Self { stat: TformStat::Median, reps: 500, tau: sbw::DEFAULT_TAU, eps: sbw::DEFAULT_EPS }
    }
}

/// Everything one injection run produced.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub diags: GridDiagnostics,
    /// Measured ratio: median cell |delta| over mean cell sigma.
    pub r_tilde: f64,
    /// Designed ratio from the config alone (see [`injected_r_tilde`]).
    pub r_tilde_injected: f64,
    /// Share of classified cells that came out high-bias.
    pub sbw_fraction: f64,
    /// At least one cell classified high-bias.
    pub sbw_event: bool,
    pub n_clipped_true: usize,
    pub n_clipped_infer: usize,
    pub config_echo: SimConfig,
}

/// The ratio the config is designed to produce, ignoring shrinkage and
/// clipping: typical injected offset over the expected bootstrap scale of
/// the cell statistic. For the median the scale is `1.2533 sd / sqrt(n)`,
/// for the mean `sd / sqrt(n)`.
pub fn injected_r_tilde(config: &SimConfig, stat: TformStat) -> f64 {
    let (rows, cols) = (config.grid_rows, config.grid_cols);
    let mut mults = Vec::with_capacity(rows * cols);
    let mut ses = Vec::with_capacity(rows * cols);
    let factor = match stat {
        TformStat::Median => 1.2533,
        TformStat::Mean => 1.0,
    };
    for i in 0..rows {
        for j in 0..cols {
            mults.push(config.bias_profile.value(i, j, rows, cols));
            let sd = config.noise_profile.value(i, j, rows, cols);
            ses.push(factor * sd / (config.n_per_cell as f64).sqrt());
        }
    }
    mults.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = mults.len() / 2;
    let med_mult = if mults.len() % 2 == 1 {
        mults[mid]
    } else {
        0.5 * (mults[mid - 1] + mults[mid])
    };
    let mean_se = ses.iter().sum::<f64>() / ses.len() as f64;
    if mean_se == 0.0 {
        return if config.bias_amp.abs() * med_mult > 0.0 { f64::INFINITY } else { 0.0 };
    }
    config.bias_amp.abs() * med_mult / mean_se
}

/// Generate, grid, truth-map, and summarize one synthetic experiment.
pub fn run_injection(config: &SimConfig, opts: &LabOptions) -> Result<SimResult> {
    let synth = synth_catalog(config)?;
    let rows = synth.catalog.all_rows();
    let grid = Grid::assign_catalog(synth.grid_spec.clone(), &synth.catalog, &rows)?;
    let map_opts = MapOptions {
        stat: opts.stat,
        reps: opts.reps,
        seed: derive_seed(config.seed, SALT_BOOTSTRAP),
        eps: opts.eps,
        tau: opts.tau,
        keep_replicates: false,
        include_small_cells: false,
    };
    let diags = sbw::truth_map(&synth.catalog, &grid, &map_opts)?;
    let r_tilde = diags.r_tilde.ok_or(Error::NoValidCells)?;
    let sbw_fraction = diags.high_bias_fraction().ok_or(Error::NoValidCells)?;
    Ok(SimResult {
        r_tilde,
        r_tilde_injected: injected_r_tilde(config, opts.stat),
        sbw_fraction,
        sbw_event: sbw_fraction > 0.0,
        n_clipped_true: synth.n_clipped_true,
        n_clipped_infer: synth.n_clipped_infer,
        config_echo: config.clone(),
        diags,
    })
}

/// One (amplitude, seed) outcome of a phase scan.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub amplitude: f64,
    pub run_seed: u64,
    pub r_tilde: f64,
    pub r_tilde_injected: f64,
    pub sbw_fraction: f64,
    pub sbw_event: bool,
}

/// One bin of the transition curve.
#[derive(Debug, Clone, Copy)]
pub struct PhaseBin {
    pub r_lo: f64,
    pub r_hi: f64,
    pub n_runs: usize,
    /// Share of runs in the bin with at least one high-bias cell.
    pub event_rate: f64,
    /// Mean share of classified cells that came out high-bias.
    pub mean_fraction: f64,
}

/// A full phase-transition scan.
#[derive(Debug, Clone)]
pub struct PhaseScan {
    pub points: Vec<PhasePoint>,
    /// Event rate binned by the designed ratio.
    pub curve: Vec<PhaseBin>,
    /// First-seed diagnostics per amplitude, for grid panels.
    pub representatives: Vec<(f64, GridDiagnostics)>,
}

/// Run `seeds_per_amp` independent realizations at every amplitude and bin
/// the outcomes by the designed ratio. Runs are independent and executed in
/// parallel; per-run seeds derive from the base seed, the amplitude index,
/// and the repeat index, so the scan is reproducible at any worker count.
pub fn phase_scan(
    base: &SimConfig,
    amplitudes: &[f64],
    seeds_per_amp: usize,
    opts: &LabOptions,
    curve_bin_width: f64,
) -> Result<PhaseScan> {
    if amplitudes.len() < 2 {
        return Err(Error::Config("phase scan needs at least 2 amplitudes".into()));
    }
    if seeds_per_amp < 10 {
        return Err(Error::Config("phase scan needs at least 10 seeds per amplitude".into()));
    }
    if !(curve_bin_width > 0.0) {
        return Err(Error::NonPositive { what: "curve bin width", value: curve_bin_width });
    }
    if amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Config("amplitudes must be finite and non-negative".into()));
    }

    let jobs: Vec<(usize, usize)> = (0..amplitudes.len())
        .flat_map(|a| (0..seeds_per_amp).map(move |s| (a, s)))
        .collect();
    let runs: Vec<Result<(usize, SimResult)>> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let mut config = base.clone();
            config.bias_amp = amplitudes[a];
            config.seed = derive_seed(base.seed, ((a as u64) << 32) | s as u64);
            run_injection(&config, opts).map(|r| (a, r))
        })
        .collect();

    let mut points = Vec::with_capacity(jobs.len());
    let mut representatives: Vec<Option<(f64, GridDiagnostics)>> = vec![None; amplitudes.len()];
    for run in runs {
        let (a, result) = run?;
        if representatives[a].is_none() {
            representatives[a] = Some((amplitudes[a], result.diags.clone()));
        }
        points.push(PhasePoint {
            amplitude: amplitudes[a],
            run_seed: result.config_echo.seed,
            r_tilde: result.r_tilde,
            r_tilde_injected: result.r_tilde_injected,
            sbw_fraction: result.sbw_fraction,
            sbw_event: result.sbw_event,
        });
    }

    // bin by the designed ratio
    let mut groups: std::collections::BTreeMap<i64, Vec<&PhasePoint>> =
        std::collections::BTreeMap::new();
    for p in &points {
        let k = (p.r_tilde_injected / curve_bin_width).floor() as i64;
        groups.entry(k).or_default().push(p);
    }
    let curve = groups
        .into_iter()
        .map(|(k, members)| {
            let n = members.len();
            let events = members.iter().filter(|p| p.sbw_event).count();
            let fsum: f64 = members.iter().map(|p| p.sbw_fraction).sum();
            PhaseBin {
                r_lo: k as f64 * curve_bin_width,
                r_hi: (k + 1) as f64 * curve_bin_width,
                n_runs: n,
                event_rate: events as f64 / n as f64,
                mean_fraction: fsum / n as f64,
            }
        })
        .collect();

    Ok(PhaseScan {
        points,
        curve,
        representatives: representatives.into_iter().flatten().collect(),
    })
}
