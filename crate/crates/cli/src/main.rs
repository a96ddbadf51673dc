//! `sbw`: detect and quantify quality-dependent bias structure in catalogs
//! of indirectly inferred stellar ages.
//!
//! Every subcommand writes delimited tables (plus convenience heatmaps) into
//! one output directory and finishes it with a manifest. Exit codes: 0 on
//! success, 1 on a usage error, 2 on a data error.

mod cmds;
mod output;
mod ppm;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sbw",
    version,
    about = "Quality-grid bias diagnostics for inferred stellar-age catalogs",
    max_term_width = 100
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Directory receiving every output of this run.
    #[arg(long, global = true, env = "SBW_OUTPUT_DIR", default_value = "sbw-out")]
    output_dir: PathBuf,
    /// Master random seed; all resampling derives from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Bootstrap replicates per interval or scale estimate.
    #[arg(long, global = true, default_value_t = 1000)]
    bootstrap_reps: usize,
    /// Worker threads; 0 uses one per core. Results are identical at any
    /// worker count.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Catalog file (delimited text with a header row).
    #[arg(long)]
    input: PathBuf,
    /// Schema file: delimiter, column mapping, optional quality cuts.
    #[arg(long)]
    schema: PathBuf,
    /// Skip unparsable rows (counting them) instead of aborting.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Bins along the spectral signal-to-noise axis.
    #[arg(long, default_value_t = 6)]
    nbins_snr: usize,
    /// Bins along the parallax signal-to-noise axis.
    #[arg(long, default_value_t = 6)]
    nbins_plx: usize,
    /// Edge placement: quantile | fixed.
    #[arg(long, default_value = "quantile")]
    strategy: String,
    /// Minimum records for a cell to count as valid.
    #[arg(long, default_value_t = 50)]
    nmin: usize,
}

#[derive(Args, Clone)]
struct MapArgs {
    /// Formation-time statistic per cell: median | mean.
    #[arg(long, default_value = "median")]
    tform_stat: String,
    /// Cell scale estimator: sd | iqr_se | mad_se.
    #[arg(long, default_value = "sd")]
    sigma_kind: String,
    /// Significance threshold separating high-bias from low-bias cells.
    #[arg(long, default_value_t = 3.0)]
    tau: f64,
    /// Diagnose cells below the count threshold too (2 records suffice).
    #[arg(long)]
    include_small_cells: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load a catalog and write a validation report.
    Ingest {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Build the quality grid; write its geometry and occupancy.
    Grid {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Per-cell bias map against the high-quality reference sample.
    SbwMap {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        map: MapArgs,
    },
    /// Per-cell bias map anchored to independent per-star ages.
    StruthMap {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        map: MapArgs,
    },
    /// Match high-quality against low-quality stars on physical covariates.
    Cem {
        #[command(flatten)]
        input: InputArgs,
        /// Comma-separated matching variables
        /// (teff, logg, feh, alpha_fe, distance, gal_r, gal_z).
        #[arg(long, default_value = "teff,logg,feh,alpha_fe,distance,gal_r,gal_z")]
        vars: String,
        /// Quantile bins per matching variable.
        #[arg(long, default_value_t = 3)]
        ncoarse: usize,
        /// Treated group: hq | lq.
        #[arg(long, default_value = "hq")]
        treated: String,
        /// Control group: hq | lq.
        #[arg(long, default_value = "lq")]
        control: String,
        /// Age column for the matched comparison: infer | seismo.
        #[arg(long, default_value = "infer")]
        ages: String,
        /// Metallicity bin width (dex) for the matched per-bin deltas.
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
    },
    /// Age-metallicity relation: binned curve and linear fit.
    Amr {
        #[command(flatten)]
        input: InputArgs,
        /// Age column: infer | seismo.
        #[arg(long, default_value = "infer")]
        ages: String,
        /// Sample: std | hq | lq | all.
        #[arg(long, default_value = "std")]
        sample: String,
        /// Metallicity bin width, dex.
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        /// Fit window as LO:HI (closed below, open above).
        #[arg(long, default_value = "-1.0:-0.5", allow_hyphen_values = true)]
        fit_range: String,
    },
    /// Formation-history tracers, optionally compared across samples.
    History {
        #[command(flatten)]
        input: InputArgs,
        /// Age column: infer | seismo.
        #[arg(long, default_value = "infer")]
        ages: String,
        /// Sample: std | hq | lq | all | high-bias | low-bias.
        #[arg(long, default_value = "std")]
        sample: String,
        /// Second sample to compare against; deltas are that sample minus
        /// --sample. std+hq runs the paired selection check; low-bias
        /// +high-bias splits stars by the diagnostic map.
        #[arg(long)]
        paired_with: Option<String>,
        /// Grid step of the cumulative formation fraction, Gyr.
        #[arg(long, default_value_t = 0.5)]
        age_grid_step: f64,
        /// Histogram bin width for the peak-age tracer, Gyr.
        #[arg(long, default_value_t = 0.5)]
        peak_bin_width: f64,
        /// Ages strictly above this count as old, Gyr.
        #[arg(long, default_value_t = 10.0)]
        age_threshold: f64,
        /// Split the bias strata at this S quantile instead of by
        /// classification.
        #[arg(long)]
        split_quantile: Option<f64>,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        map: MapArgs,
    },
    /// Synthetic injection runs and phase scans.
    Inject {
        /// Simulation config file.
        #[arg(long)]
        config: PathBuf,
        /// Scan specification, e.g. amplitudes=0:2:0.1 or
        /// amplitudes=0,0.5,1.
        #[arg(long)]
        scan: Option<String>,
        /// Independent realizations per amplitude.
        #[arg(long, default_value_t = 40)]
        seeds: usize,
        /// Also write the synthetic catalog under this file name.
        #[arg(long)]
        emit_catalog: Option<String>,
        /// Formation-time statistic: median | mean.
        #[arg(long, default_value = "median")]
        tform_stat: String,
        /// Significance threshold for the high-bias classification.
        #[arg(long, default_value_t = 3.0)]
        tau: f64,
        /// Width of the designed-ratio bins of the transition curve.
        #[arg(long, default_value_t = 0.25)]
        curve_bin_width: f64,
    },
    /// One-at-a-time parameter sweeps around a base diagnostic.
    Robustness {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        map: MapArgs,
        /// Sweep axis and values, e.g. nbins=5,6,7; repeatable. Axes:
        /// nbins, nmin, sigma, tform, strategy, ncoarse.
        #[arg(long)]
        sweep: Vec<String>,
        /// Bias map the sweeps rerun: truth | internal.
        #[arg(long, default_value = "truth")]
        reference: String,
        /// Matching variables for the ncoarse axis.
        #[arg(long, default_value = "teff,logg,feh,alpha_fe,distance,gal_r,gal_z")]
        vars: String,
    },
    /// Run the full pipeline; bundle every table into one directory.
    Report {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        map: MapArgs,
        /// Comma-separated matching variables.
        #[arg(long, default_value = "teff,logg,feh,alpha_fe,distance,gal_r,gal_z")]
        vars: String,
        /// Quantile bins per matching variable.
        #[arg(long, default_value_t = 3)]
        ncoarse: usize,
        /// Metallicity bin width, dex.
        #[arg(long, default_value_t = 0.1)]
        bin_width: f64,
        /// Fit window as LO:HI.
        #[arg(long, default_value = "-1.0:-0.5", allow_hyphen_values = true)]
        fit_range: String,
    },
}

/// Post-parse failures split into flag problems (exit 1) and input-data
/// problems (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<sbw_core::error::Error> for CliError {
    fn from(e: sbw_core::error::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(format!("{e:#}"))
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub type CmdResult = std::result::Result<(), CliError>;

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> i32 {
    if cli.global.workers > 0 {
        // the pool is process-global; later subcommand code only reads it
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.workers)
            .build_global()
        {
            eprintln!("error: cannot size the worker pool: {e}");
            return 1;
        }
    }
    let cmdline: String = std::env::args().collect::<Vec<_>>().join(" ");
    match cmds::dispatch(&cli, &cmdline) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
