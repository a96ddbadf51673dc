//! Subcommand implementations. Every command digests its inputs, runs,
//! writes tables through one [`OutDir`], and finishes the directory with a
//! manifest. Numeric outputs depend only on inputs, flags, and the seed —
//! never on the worker count.

use std::collections::BTreeSet;
use std::path::Path;

use crate::output::{digest_file, fmt_f64, fmt_opt, OutDir};
use crate::ppm::{self, Palette};
use crate::{Cli, CliError, CmdResult, Command, GlobalArgs, GridArgs, InputArgs, MapArgs};

use sbw_core::amr;
use sbw_core::catalog::{AgeSource, Catalog, QualityCuts, RowPolicy, Schema};
use sbw_core::cem;
use sbw_core::grid::{build_grid, EdgeStrategy, Grid};
use sbw_core::history;
use sbw_core::inject::{self, LabOptions, SimConfig};
use sbw_core::sbw::{self, Classification, GridDiagnostics, MapOptions, TformStat};
use sbw_core::stats::{derive_seed, quantile, ScaleKind, Significance};

use crate::usage;

// single-purpose salts separating the RNG streams of analyses that share
// one master seed
const SALT_MAP_INTERNAL: u64 = 1;
const SALT_MAP_TRUTH: u64 = 2;
const SALT_AMR_CURVE: u64 = 3;
const SALT_AMR_FIT: u64 = 4;
const SALT_CEM_BINS: u64 = 5;
const SALT_CEM_OVERALL: u64 = 6;
const SALT_HISTORY: u64 = 7;

pub fn dispatch(cli: &Cli, cmdline: &str) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { input } => cmd_ingest(g, input, cmdline),
        Command::Grid { input, grid } => cmd_grid(g, input, grid, cmdline),
        Command::SbwMap { input, grid, map } => {
            cmd_map(g, input, grid, map, MapRef::Internal, cmdline)
        }
        Command::StruthMap { input, grid, map } => {
            cmd_map(g, input, grid, map, MapRef::Truth, cmdline)
        }
        Command::Cem { input, vars, ncoarse, treated, control, ages, bin_width } => {
            cmd_cem(g, input, vars, *ncoarse, treated, control, ages, *bin_width, cmdline)
        }
        Command::Amr { input, ages, sample, bin_width, fit_range } => {
            cmd_amr(g, input, ages, sample, *bin_width, fit_range, cmdline)
        }
        Command::History {
            input,
            ages,
            sample,
            paired_with,
            age_grid_step,
            peak_bin_width,
            age_threshold,
            split_quantile,
            grid,
            map,
        } => cmd_history(
            g,
            input,
            ages,
            sample,
            paired_with.as_deref(),
            *age_grid_step,
            *peak_bin_width,
            *age_threshold,
            *split_quantile,
            grid,
            map,
            cmdline,
        ),
        Command::Inject { config, scan, seeds, emit_catalog, tform_stat, tau, curve_bin_width } => {
            cmd_inject(
                g,
                config,
                scan.as_deref(),
                *seeds,
                emit_catalog.as_deref(),
                tform_stat,
                *tau,
                *curve_bin_width,
                cmdline,
            )
        }
        Command::Robustness { input, grid, map, sweep, reference, vars } => {
            cmd_robustness(g, input, grid, map, sweep, reference, vars, cmdline)
        }
        Command::Report { input, grid, map, vars, ncoarse, bin_width, fit_range } => {
            cmd_report(g, input, grid, map, vars, *ncoarse, *bin_width, fit_range, cmdline)
        }
    }
}

// ---------------------------------------------------------------- plumbing

struct Loaded {
    catalog: Catalog,
    n_loaded: usize,
    n_skipped: usize,
    schema: Schema,
}

fn load_catalog(input: &InputArgs) -> Result<Loaded, CliError> {
    let schema = Schema::from_file(&input.schema)?;
    let policy = if input.lenient { RowPolicy::Lenient } else { RowPolicy::Strict };
    let report = Catalog::load(&input.input, &schema, policy)?;
    Ok(Loaded {
        catalog: report.catalog,
        n_loaded: report.n_loaded,
        n_skipped: report.n_skipped,
        schema,
    })
}

/// Rows passing the schema's baseline cuts; everything when no cuts given.
fn baseline_rows(loaded: &Loaded) -> Result<Vec<usize>, CliError> {
    match &loaded.schema.cuts {
        Some(cuts) => Ok(loaded.catalog.apply_cuts(cuts)?),
        None => Ok(loaded.catalog.all_rows()),
    }
}

fn hq_cuts_of(loaded: &Loaded) -> Result<(&QualityCuts, &QualityCuts), CliError> {
    match (&loaded.schema.cuts, &loaded.schema.hq_cuts) {
        (Some(base), Some(hq)) => Ok((base, hq)),
        _ => Err(CliError::Data(
            "this analysis needs both [cuts] and [hq_cuts] in the schema file".into(),
        )),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SampleSel {
    Std,
    Hq,
    Lq,
    All,
}

fn parse_simple_sample(s: &str) -> Result<SampleSel, CliError> {
    match s {
        "std" => Ok(SampleSel::Std),
        "hq" => Ok(SampleSel::Hq),
        "lq" => Ok(SampleSel::Lq),
        "all" => Ok(SampleSel::All),
        other => Err(usage(format!(
            "unknown sample {other:?} (expected std, hq, lq, or all)"
        ))),
    }
}

fn sample_rows(loaded: &Loaded, sel: SampleSel) -> Result<Vec<usize>, CliError> {
    match sel {
        SampleSel::All => Ok(loaded.catalog.all_rows()),
        SampleSel::Std => baseline_rows(loaded),
        SampleSel::Hq | SampleSel::Lq => {
            let (base, hq) = hq_cuts_of(loaded)?;
            let split = loaded.catalog.select_hq(base, hq)?;
            Ok(if sel == SampleSel::Hq { split.hq } else { split.lq })
        }
    }
}

/// Rows carrying the requested age, still aligned with their covariates.
fn rows_with_age(loaded: &Loaded, rows: Vec<usize>, source: AgeSource) -> Vec<usize> {
    match source {
        AgeSource::Infer => rows,
        AgeSource::Seismo => loaded.catalog.truth_rows(&rows),
    }
}

fn parse_age_source(s: &str) -> Result<AgeSource, CliError> {
    AgeSource::parse(s).map_err(|e| usage(e.to_string()))
}

fn parse_strategy(s: &str) -> Result<EdgeStrategy, CliError> {
    EdgeStrategy::parse(s).map_err(|e| usage(e.to_string()))
}

fn parse_tform(s: &str) -> Result<TformStat, CliError> {
    TformStat::parse(s).map_err(|e| usage(e.to_string()))
}

fn parse_scale(s: &str) -> Result<ScaleKind, CliError> {
    ScaleKind::parse(s).map_err(|e| usage(e.to_string()))
}

/// "LO:HI" with LO < HI.
fn parse_range(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || usage(format!("cannot parse range {s:?} (expected LO:HI)"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(usage(format!("empty range {s:?}")));
    }
    Ok((lo, hi))
}

fn parse_vars(s: &str) -> Result<Vec<cem::MatchVariable>, CliError> {
    s.split(',')
        .map(|t| cem::MatchVariable::parse(t.trim()).map_err(|e| usage(e.to_string())))
        .collect()
}

fn params_digest(parts: &[(&str, String)]) -> String {
    let text: String = parts.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    crate::output::digest_bytes(text.as_bytes())
}

fn start_run(
    g: &GlobalArgs,
    stamp_seed: u64,
    params: &[(&str, String)],
) -> Result<(OutDir, String), CliError> {
    let digest = params_digest(params);
    let out = OutDir::create(&g.output_dir, stamp_seed, &digest)?;
    Ok((out, digest))
}

fn finish_run(
    out: &mut OutDir,
    cmdline: &str,
    stamp_seed: u64,
    digest: &str,
    inputs: &[(String, String)],
) -> CmdResult {
    out.write_manifest(cmdline, stamp_seed, digest, inputs)?;
    Ok(())
}

fn input_digests(paths: &[&Path]) -> Result<Vec<(String, String)>, CliError> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), digest_file(p)?)))
        .collect()
}

fn sig_row(tracer: &str, s: &Significance) -> Vec<String> {
    vec![
        tracer.to_string(),
        fmt_f64(s.delta),
        fmt_f64(s.se),
        fmt_f64(s.z),
        fmt_f64(s.p_two_sided),
    ]
}

// ------------------------------------------------------------------ ingest

fn cmd_ingest(g: &GlobalArgs, input: &InputArgs, cmdline: &str) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let params = [
        ("command", "ingest".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
    ];
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;
    do_ingest(&mut out, &loaded, &input.input)?;
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

fn do_ingest(out: &mut OutDir, loaded: &Loaded, input_path: &Path) -> CmdResult {
    let recs = loaded.catalog.records();
    let mut text = String::new();
    use std::fmt::Write as _;
    writeln!(text, "input: {}", input_path.display()).unwrap();
    writeln!(text, "n_loaded: {}", loaded.n_loaded).unwrap();
    writeln!(text, "n_skipped: {}", loaded.n_skipped).unwrap();
    let n_seismo = recs.iter().filter(|r| r.age_seismo.is_some()).count();
    writeln!(text, "age_seismo_present: {n_seismo}").unwrap();
    if let Some(cuts) = &loaded.schema.cuts {
        writeln!(text, "cuts_pass: {}", loaded.catalog.apply_cuts(cuts)?.len()).unwrap();
    }
    if let (Some(base), Some(hq)) = (&loaded.schema.cuts, &loaded.schema.hq_cuts) {
        let split = loaded.catalog.select_hq(base, hq)?;
        writeln!(text, "hq_pass: {}", split.hq.len()).unwrap();
        writeln!(text, "lq_pass: {}", split.lq.len()).unwrap();
    }
    let columns: [(&str, fn(&sbw_core::catalog::StarRecord) -> Option<f64>); 12] = [
        ("teff", |r| Some(r.teff)),
        ("logg", |r| Some(r.logg)),
        ("feh", |r| Some(r.feh)),
        ("alpha_fe", |r| Some(r.alpha_fe)),
        ("snr", |r| Some(r.snr)),
        ("plx", |r| Some(r.plx)),
        ("plx_err", |r| Some(r.plx_err)),
        ("distance", |r| Some(r.distance)),
        ("gal_r", |r| Some(r.gal_r)),
        ("gal_z", |r| Some(r.gal_z)),
        ("age_infer", |r| Some(r.age_infer)),
        ("age_seismo", |r| r.age_seismo),
    ];
    for (name, get) in columns {
        let vals: Vec<f64> = recs.iter().filter_map(get).collect();
        if vals.is_empty() {
            writeln!(text, "column {name}: absent").unwrap();
        } else {
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(text, "column {name}: min {} max {}", fmt_f64(lo), fmt_f64(hi)).unwrap();
        }
    }
    out.write_text("ingest_report.txt", &text)?;
    Ok(())
}

// -------------------------------------------------------------------- grid

fn grid_params(grid: &GridArgs) -> Vec<(&'static str, String)> {
    vec![
        ("nbins_snr", grid.nbins_snr.to_string()),
        ("nbins_plx", grid.nbins_plx.to_string()),
        ("strategy", grid.strategy.clone()),
        ("nmin", grid.nmin.to_string()),
    ]
}

fn build_base_grid(loaded: &Loaded, args: &GridArgs) -> Result<(Vec<usize>, Grid), CliError> {
    let strategy = parse_strategy(&args.strategy)?;
    let rows = baseline_rows(loaded)?;
    let grid = build_grid(
        &loaded.catalog,
        &rows,
        args.nbins_snr,
        args.nbins_plx,
        strategy,
        args.nmin,
    )?;
    Ok((rows, grid))
}

fn cmd_grid(g: &GlobalArgs, input: &InputArgs, grid_args: &GridArgs, cmdline: &str) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let mut params = vec![
        ("command", "grid".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
    ];
    params.extend(grid_params(grid_args));
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;
    let (_, grid) = build_base_grid(&loaded, grid_args)?;
    do_grid(&mut out, &grid)?;
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

fn do_grid(out: &mut OutDir, grid: &Grid) -> CmdResult {
    // one self-contained file: the geometry lines a later run can read back,
    // with occupancy appended as comments
    let mut text = grid.spec.to_text();
    use std::fmt::Write as _;
    writeln!(text, "# outside {}", grid.outside.len()).unwrap();
    for cell in &grid.cells {
        writeln!(text, "# cell {} {} {} {}", cell.i, cell.j, cell.members.len(), cell.valid)
            .unwrap();
    }
    out.write_text("grid.txt", &text)?;

    let rows: Vec<Vec<String>> = grid
        .cells
        .iter()
        .map(|c| {
            vec![
                c.i.to_string(),
                c.j.to_string(),
                fmt_f64(grid.spec.snr_edges[c.i]),
                fmt_f64(grid.spec.snr_edges[c.i + 1]),
                fmt_f64(grid.spec.plx_snr_edges[c.j]),
                fmt_f64(grid.spec.plx_snr_edges[c.j + 1]),
                c.members.len().to_string(),
                c.valid.to_string(),
            ]
        })
        .collect();
    out.write_table(
        "grid_cells.csv",
        &["i", "j", "snr_lo", "snr_hi", "plx_lo", "plx_hi", "n", "valid"],
        &rows,
    )?;
    Ok(())
}

// -------------------------------------------------------------- bias maps

#[derive(Clone, Copy, PartialEq, Eq)]
enum MapRef {
    Internal,
    Truth,
}

fn compute_map(
    loaded: &Loaded,
    grid: &Grid,
    map_args: &MapArgs,
    map_ref: MapRef,
    seed: u64,
    reps: usize,
    keep_replicates: bool,
) -> Result<GridDiagnostics, CliError> {
    let stat = parse_tform(&map_args.tform_stat)?;
    let kind = parse_scale(&map_args.sigma_kind)?;
    let opts = MapOptions {
        stat,
        reps,
        seed,
        eps: sbw::DEFAULT_EPS,
        tau: map_args.tau,
        // alternative scale estimators read the retained replicates
        keep_replicates: keep_replicates || kind != ScaleKind::Sd,
        include_small_cells: map_args.include_small_cells,
    };
    let diags = match map_ref {
        MapRef::Truth => sbw::truth_map(&loaded.catalog, grid, &opts)?,
        MapRef::Internal => {
            let (base, hq) = hq_cuts_of(loaded)?;
            let split = loaded.catalog.select_hq(base, hq)?;
            sbw::internal_map(&loaded.catalog, grid, &split.hq, &opts)?
        }
    };
    Ok(match kind {
        ScaleKind::Sd => diags,
        other => sbw::sigma_alt_map(&diags, other)?,
    })
}

fn cmd_map(
    g: &GlobalArgs,
    input: &InputArgs,
    grid_args: &GridArgs,
    map_args: &MapArgs,
    map_ref: MapRef,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let (name, salt) = match map_ref {
        MapRef::Internal => ("sbw-map", SALT_MAP_INTERNAL),
        MapRef::Truth => ("struth-map", SALT_MAP_TRUTH),
    };
    let mut params = vec![
        ("command", name.to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
        ("seed", g.seed.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
        ("tform_stat", map_args.tform_stat.clone()),
        ("sigma_kind", map_args.sigma_kind.clone()),
        ("tau", map_args.tau.to_string()),
        ("include_small_cells", map_args.include_small_cells.to_string()),
    ];
    params.extend(grid_params(grid_args));
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;
    let (_, grid) = build_base_grid(&loaded, grid_args)?;
    let diags = compute_map(
        &loaded,
        &grid,
        map_args,
        map_ref,
        derive_seed(g.seed, salt),
        g.bootstrap_reps,
        false,
    )?;
    let prefix = match map_ref {
        MapRef::Internal => "sbw",
        MapRef::Truth => "struth",
    };
    do_map(&mut out, prefix, &diags, &grid, &map_args.sigma_kind)?;
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

fn map_cell_columns() -> [&'static str; 11] {
    ["i", "j", "snr_lo", "snr_hi", "plx_lo", "plx_hi", "n", "delta", "sigma", "s", "classification"]
}

fn map_cell_rows(diags: &GridDiagnostics, grid: &Grid) -> Vec<Vec<String>> {
    diags
        .cells
        .iter()
        .map(|c| {
            vec![
                c.i.to_string(),
                c.j.to_string(),
                fmt_f64(grid.spec.snr_edges[c.i]),
                fmt_f64(grid.spec.snr_edges[c.i + 1]),
                fmt_f64(grid.spec.plx_snr_edges[c.j]),
                fmt_f64(grid.spec.plx_snr_edges[c.j + 1]),
                c.n.to_string(),
                fmt_opt(c.delta),
                fmt_opt(c.sigma),
                fmt_opt(c.s),
                c.classification.name().to_string(),
            ]
        })
        .collect()
}

fn cell_matrix(
    diags: &GridDiagnostics,
    get: impl Fn(&sbw_core::sbw::CellDiagnostic) -> Option<f64>,
) -> Vec<Vec<Option<f64>>> {
    (0..diags.n_rows)
        .map(|i| (0..diags.n_cols).map(|j| get(diags.cell(i, j))).collect())
        .collect()
}

fn do_map(
    out: &mut OutDir,
    prefix: &str,
    diags: &GridDiagnostics,
    grid: &Grid,
    sigma_kind: &str,
) -> CmdResult {
    out.write_table(
        &format!("{prefix}_map.csv"),
        &map_cell_columns(),
        &map_cell_rows(diags, grid),
    )?;

    let count = |c: Classification| diags.cells.iter().filter(|d| d.classification == c).count();
    let mut text = String::new();
    use std::fmt::Write as _;
    writeln!(text, "mode: {}", diags.mode.name()).unwrap();
    writeln!(text, "stat: {}", diags.stat.name()).unwrap();
    writeln!(text, "sigma_kind: {sigma_kind}").unwrap();
    writeln!(text, "tau: {}", fmt_f64(diags.tau)).unwrap();
    writeln!(text, "eps: {}", fmt_f64(diags.eps)).unwrap();
    writeln!(text, "rows: {}", diags.n_rows).unwrap();
    writeln!(text, "cols: {}", diags.n_cols).unwrap();
    if let Some(r) = diags.reference {
        writeln!(text, "reference_tform: {}", fmt_f64(r)).unwrap();
    }
    writeln!(text, "r_tilde: {}", fmt_opt(diags.r_tilde)).unwrap();
    writeln!(text, "n_high_bias: {}", count(Classification::HighBias)).unwrap();
    writeln!(text, "n_low_bias: {}", count(Classification::LowBias)).unwrap();
    writeln!(text, "n_degenerate: {}", count(Classification::Degenerate)).unwrap();
    writeln!(text, "n_insufficient: {}", count(Classification::InsufficientN)).unwrap();
    writeln!(text, "high_bias_fraction: {}", fmt_opt(diags.high_bias_fraction())).unwrap();
    out.write_text(&format!("{prefix}_summary.txt"), &text)?;

    out.write_text(
        &format!("{prefix}_delta.ppm"),
        &ppm::render(&cell_matrix(diags, |c| c.delta), Palette::Diverging),
    )?;
    out.write_text(
        &format!("{prefix}_sigma.ppm"),
        &ppm::render(&cell_matrix(diags, |c| c.sigma), Palette::Sequential),
    )?;
    out.write_text(
        &format!("{prefix}_s.ppm"),
        &ppm::render(&cell_matrix(diags, |c| c.s), Palette::Sequential),
    )?;
    Ok(())
}

// --------------------------------------------------------------------- cem

#[allow(clippy::too_many_arguments)]
fn cmd_cem(
    g: &GlobalArgs,
    input: &InputArgs,
    vars: &str,
    ncoarse: usize,
    treated: &str,
    control: &str,
    ages: &str,
    bin_width: f64,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let params = [
        ("command", "cem".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
        ("seed", g.seed.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
        ("vars", vars.to_string()),
        ("ncoarse", ncoarse.to_string()),
        ("treated", treated.to_string()),
        ("control", control.to_string()),
        ("ages", ages.to_string()),
        ("bin_width", bin_width.to_string()),
    ];
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;
    do_cem(&mut out, &loaded, vars, ncoarse, treated, control, ages, bin_width, g.seed, g.bootstrap_reps)?;
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

#[allow(clippy::too_many_arguments)]
fn do_cem(
    out: &mut OutDir,
    loaded: &Loaded,
    vars: &str,
    ncoarse: usize,
    treated: &str,
    control: &str,
    ages: &str,
    bin_width: f64,
    seed: u64,
    reps: usize,
) -> CmdResult {
    let variables = parse_vars(vars)?;
    let source = parse_age_source(ages)?;
    let group_rows = |name: &str| -> Result<Vec<usize>, CliError> {
        match name {
            "hq" => sample_rows(loaded, SampleSel::Hq),
            "lq" => sample_rows(loaded, SampleSel::Lq),
            other => Err(usage(format!("unknown group {other:?} (expected hq or lq)"))),
        }
    };
    if treated == control {
        return Err(usage("treated and control name the same group"));
    }
    let treated_rows = group_rows(treated)?;
    let control_rows = group_rows(control)?;

    let spec = cem::CoarseningSpec { variables, n_coarse: ncoarse };
    let coarsening = cem::coarsen(&loaded.catalog, &treated_rows, &control_rows, &spec)?;
    let matched = cem::cem(&loaded.catalog, &treated_rows, &control_rows, &coarsening)?;

    // per-record weights, catalog order
    let mut weight_rows: Vec<(usize, &str, f64)> = Vec::new();
    for stratum in matched.strata.values() {
        for &r in &stratum.treated {
            weight_rows.push((r, treated, 1.0));
        }
        for &r in &stratum.control {
            weight_rows.push((r, control, stratum.control_weight));
        }
    }
    weight_rows.sort_by_key(|&(r, _, _)| r);
    let table: Vec<Vec<String>> = weight_rows
        .iter()
        .map(|&(r, group, w)| {
            let rec = &loaded.catalog.records()[r];
            vec![
                rec.id.clone(),
                group.to_string(),
                fmt_f64(w),
                fmt_f64(rec.teff),
                fmt_f64(rec.logg),
                fmt_f64(rec.feh),
                fmt_f64(rec.alpha_fe),
                fmt_f64(rec.snr),
                fmt_f64(rec.distance),
                fmt_f64(rec.gal_r),
                fmt_f64(rec.gal_z),
                fmt_f64(rec.age_infer),
                fmt_opt(rec.age_seismo),
            ]
        })
        .collect();
    out.write_table(
        "cem_matched.csv",
        &[
            "id", "group", "weight", "teff", "logg", "feh", "alpha_fe", "snr", "distance",
            "gal_r", "gal_z", "age_infer", "age_seismo",
        ],
        &table,
    )?;

    let bins = cem::matched_amr_delta(
        &loaded.catalog,
        &matched,
        source,
        bin_width,
        reps,
        derive_seed(seed, SALT_CEM_BINS),
    )?;
    let bin_rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| {
            vec![
                fmt_f64(b.center),
                fmt_opt(b.delta),
                fmt_opt(b.ci_low),
                fmt_opt(b.ci_high),
                b.n_treated.to_string(),
                b.n_control.to_string(),
                b.robust.to_string(),
            ]
        })
        .collect();
    out.write_table(
        "cem_amr_delta.csv",
        &["feh_center", "delta", "ci_low", "ci_high", "n_treated", "n_control", "robust"],
        &bin_rows,
    )?;

    let overall = cem::matched_overall_delta(
        &loaded.catalog,
        &matched,
        source,
        reps,
        derive_seed(seed, SALT_CEM_OVERALL),
    )?;

    let mut text = String::new();
    use std::fmt::Write as _;
    writeln!(text, "treated: {treated}").unwrap();
    writeln!(text, "control: {control}").unwrap();
    writeln!(text, "variables: {vars}").unwrap();
    writeln!(text, "n_coarse: {ncoarse}").unwrap();
    writeln!(text, "n_treated_in: {}", matched.n_treated_in).unwrap();
    writeln!(text, "n_control_in: {}", matched.n_control_in).unwrap();
    writeln!(text, "n_treated_matched: {}", matched.n_treated_matched).unwrap();
    writeln!(text, "n_control_matched: {}", matched.n_control_matched).unwrap();
    writeln!(text, "n_strata_matched: {}", matched.strata.len()).unwrap();
    writeln!(text, "l1_before: {}", fmt_f64(matched.l1_before)).unwrap();
    writeln!(text, "l1_after: {}", fmt_f64(matched.l1_after)).unwrap();
    let mut cw: Vec<f64> = Vec::new();
    for stratum in matched.strata.values() {
        cw.extend(std::iter::repeat(stratum.control_weight).take(stratum.control.len()));
    }
    for (label, q) in [("min", 0.0), ("p25", 0.25), ("median", 0.5), ("p75", 0.75), ("max", 1.0)] {
        writeln!(text, "control_weight_{label}: {}", fmt_f64(quantile(&cw, q)?)).unwrap();
    }
    writeln!(text, "ages: {}", source.name()).unwrap();
    writeln!(text, "overall_delta: {}", fmt_f64(overall.delta)).unwrap();
    writeln!(text, "overall_se: {}", fmt_f64(overall.se)).unwrap();
    writeln!(text, "overall_z: {}", fmt_f64(overall.z)).unwrap();
    writeln!(text, "overall_p: {}", fmt_f64(overall.p_two_sided)).unwrap();
    out.write_text("cem_report.txt", &text)?;
    Ok(())
}

// --------------------------------------------------------------------- amr

fn cmd_amr(
    g: &GlobalArgs,
    input: &InputArgs,
    ages: &str,
    sample: &str,
    bin_width: f64,
    fit_range: &str,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let params = [
        ("command", "amr".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
        ("seed", g.seed.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
        ("ages", ages.to_string()),
        ("sample", sample.to_string()),
        ("bin_width", bin_width.to_string()),
        ("fit_range", fit_range.to_string()),
    ];
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;
    do_amr(&mut out, "amr", &loaded, ages, sample, bin_width, fit_range, g.seed, g.bootstrap_reps)?;
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

#[allow(clippy::too_many_arguments)]
fn do_amr(
    out: &mut OutDir,
    prefix: &str,
    loaded: &Loaded,
    ages: &str,
    sample: &str,
    bin_width: f64,
    fit_range: &str,
    seed: u64,
    reps: usize,
) -> CmdResult {
    let source = parse_age_source(ages)?;
    let sel = parse_simple_sample(sample)?;
    let range = parse_range(fit_range)?;
    let rows = rows_with_age(loaded, sample_rows(loaded, sel)?, source);
    let feh: Vec<f64> = rows.iter().map(|&r| loaded.catalog.records()[r].feh).collect();
    let age_vals = loaded.catalog.ages(&rows, source);

    let curve = amr::binned_amr(&feh, &age_vals, bin_width, reps, derive_seed(seed, SALT_AMR_CURVE))?;
    let rows_out: Vec<Vec<String>> = curve
        .bins
        .iter()
        .map(|b| {
            vec![
                fmt_f64(b.center),
                b.n.to_string(),
                fmt_opt(b.median),
                fmt_opt(b.ci_low),
                fmt_opt(b.ci_high),
                b.robust.to_string(),
            ]
        })
        .collect();
    out.write_table(
        &format!("{prefix}_curve.csv"),
        &["feh_center", "n", "median_age", "ci_low", "ci_high", "robust"],
        &rows_out,
    )?;

    let fit = amr::fit_amr(&feh, &age_vals, range, reps, derive_seed(seed, SALT_AMR_FIT))?;
    out.write_table(
        &format!("{prefix}_fit.csv"),
        &["sample", "ages", "slope", "intercept", "slope_se", "n", "range_lo", "range_hi"],
        &[vec![
            sample.to_string(),
            source.name().to_string(),
            fmt_f64(fit.slope),
            fmt_f64(fit.intercept),
            fmt_f64(fit.slope_se),
            fit.n.to_string(),
            fmt_f64(fit.range.0),
            fmt_f64(fit.range.1),
        ]],
    )?;
    Ok(())
}

// ----------------------------------------------------------------- history

fn age_grid(step: f64) -> Result<Vec<f64>, CliError> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(usage(format!("age grid step must be positive, got {step}")));
    }
    let n = (20.0 / step).ceil() as usize;
    Ok((0..=n).map(|k| k as f64 * step).collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_history(
    g: &GlobalArgs,
    input: &InputArgs,
    ages: &str,
    sample: &str,
    paired_with: Option<&str>,
    age_grid_step: f64,
    peak_bin_width: f64,
    age_threshold: f64,
    split_quantile: Option<f64>,
    grid_args: &GridArgs,
    map_args: &MapArgs,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let mut params = vec![
        ("command", "history".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
        ("seed", g.seed.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
        ("ages", ages.to_string()),
        ("sample", sample.to_string()),
        ("paired_with", paired_with.unwrap_or("-").to_string()),
        ("age_grid_step", age_grid_step.to_string()),
        ("peak_bin_width", peak_bin_width.to_string()),
        ("age_threshold", age_threshold.to_string()),
        (
            "split_quantile",
            split_quantile.map(|q| q.to_string()).unwrap_or_else(|| "-".into()),
        ),
        ("tform_stat", map_args.tform_stat.clone()),
        ("sigma_kind", map_args.sigma_kind.clone()),
        ("tau", map_args.tau.to_string()),
    ];
    params.extend(grid_params(grid_args));
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;
    do_history(
        &mut out,
        "history",
        &loaded,
        ages,
        sample,
        paired_with,
        age_grid_step,
        peak_bin_width,
        age_threshold,
        split_quantile,
        grid_args,
        map_args,
        g.seed,
        g.bootstrap_reps,
    )?;
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

/// Stars in the classified strata of the diagnostic map: (high, low).
fn strata_rows(
    loaded: &Loaded,
    grid_args: &GridArgs,
    map_args: &MapArgs,
    split_quantile: Option<f64>,
    seed: u64,
    reps: usize,
) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    let (_, grid) = build_base_grid(loaded, grid_args)?;
    let diags = compute_map(
        loaded,
        &grid,
        map_args,
        MapRef::Truth,
        derive_seed(seed, SALT_MAP_TRUTH),
        reps,
        false,
    )?;
    let threshold = match split_quantile {
        None => None,
        Some(q) => {
            let s: Vec<f64> = diags.cells.iter().filter_map(|c| c.s).collect();
            if s.is_empty() {
                return Err(CliError::Data("no cell produced a significance value".into()));
            }
            Some(quantile(&s, q)?)
        }
    };
    let mut high = Vec::new();
    let mut low = Vec::new();
    for cell in &grid.cells {
        let diag = diags.cell(cell.i, cell.j);
        let side = match threshold {
            Some(thr) => diag.s.map(|s| s >= thr),
            None => match diag.classification {
                Classification::HighBias => Some(true),
                Classification::LowBias => Some(false),
                _ => None,
            },
        };
        match side {
            Some(true) => high.extend_from_slice(&cell.members),
            Some(false) => low.extend_from_slice(&cell.members),
            None => {}
        }
    }
    Ok((high, low))
}

#[allow(clippy::too_many_arguments)]
fn do_history(
    out: &mut OutDir,
    prefix: &str,
    loaded: &Loaded,
    ages: &str,
    sample: &str,
    paired_with: Option<&str>,
    age_grid_step: f64,
    peak_bin_width: f64,
    age_threshold: f64,
    split_quantile: Option<f64>,
    grid_args: &GridArgs,
    map_args: &MapArgs,
    seed: u64,
    reps: usize,
) -> CmdResult {
    let source = parse_age_source(ages)?;
    let grid_pts = age_grid(age_grid_step)?;

    let rows_of = |name: &str| -> Result<Vec<usize>, CliError> {
        match name {
            "std" | "hq" | "lq" | "all" => {
                let sel = parse_simple_sample(name)?;
                Ok(rows_with_age(loaded, sample_rows(loaded, sel)?, source))
            }
            "high-bias" | "low-bias" => {
                let (high, low) = strata_rows(
                    loaded, grid_args, map_args, split_quantile, seed, reps,
                )?;
                let rows = if name == "high-bias" { high } else { low };
                Ok(rows_with_age(loaded, rows, source))
            }
            other => Err(usage(format!(
                "unknown sample {other:?} (expected std, hq, lq, all, high-bias, or low-bias)"
            ))),
        }
    };

    let mut tracer_rows: Vec<Vec<String>> = Vec::new();
    let emit_sample = |out: &mut OutDir,
                           tracer_rows: &mut Vec<Vec<String>>,
                           label: &str,
                           rows: &[usize]|
     -> CmdResult {
        let age_vals = loaded.catalog.ages(rows, source);
        let summary =
            history::history_summary(&age_vals, &grid_pts, peak_bin_width, age_threshold)?;
        let cff: Vec<Vec<String>> = summary
            .cff
            .iter()
            .map(|&(age, frac)| vec![fmt_f64(age), fmt_f64(frac)])
            .collect();
        out.write_table(&format!("{prefix}_cff_{label}.csv"), &["age", "fraction"], &cff)?;
        tracer_rows.push(vec![
            label.to_string(),
            source.name().to_string(),
            summary.n.to_string(),
            fmt_f64(summary.dt_form),
            fmt_f64(summary.peak_age),
            fmt_f64(summary.f_old),
        ]);
        Ok(())
    };

    let sample_rows_main = rows_of(sample)?;
    emit_sample(out, &mut tracer_rows, sample, &sample_rows_main)?;

    if let Some(other) = paired_with {
        let other_rows = rows_of(other)?;
        emit_sample(out, &mut tracer_rows, other, &other_rows)?;

        let hist_seed = derive_seed(seed, SALT_HISTORY);
        let deltas = match (sample, other) {
            // selection check: the high-quality side of each replicate is
            // the passing subset of the same draw
            ("std", "hq") => {
                let (_, hq) = hq_cuts_of(loaded)?;
                history::quality_selection_check(
                    &loaded.catalog,
                    &sample_rows_main,
                    hq,
                    source,
                    peak_bin_width,
                    age_threshold,
                    reps,
                    hist_seed,
                )?
            }
            ("low-bias", "high-bias") => {
                let split = match split_quantile {
                    Some(q) => history::StrataSplit::SQuantile(q),
                    None => history::StrataSplit::Classification,
                };
                let (_, grid) = build_base_grid(loaded, grid_args)?;
                let diags = compute_map(
                    loaded,
                    &grid,
                    map_args,
                    MapRef::Truth,
                    derive_seed(seed, SALT_MAP_TRUTH),
                    reps,
                    false,
                )?;
                history::bias_strata_check(
                    &loaded.catalog,
                    &grid,
                    &diags,
                    source,
                    split,
                    peak_bin_width,
                    age_threshold,
                    reps,
                    hist_seed,
                )?
            }
            ("hq", "std") | ("high-bias", "low-bias") => {
                return Err(usage(format!(
                    "deltas are defined as the paired sample minus --sample; \
                     use --sample {other} --paired-with {sample}"
                )));
            }
            _ => {
                let ages_a = loaded.catalog.ages(&sample_rows_main, source);
                let ages_b = loaded.catalog.ages(&other_rows, source);
                history::compare_histories(
                    &ages_a,
                    &ages_b,
                    history::CompareMode::Independent,
                    peak_bin_width,
                    age_threshold,
                    reps,
                    hist_seed,
                )?
            }
        };
        out.write_table(
            &format!("{prefix}_compare.csv"),
            &["tracer", "delta", "se", "z", "p"],
            &[
                sig_row("dt_form", &deltas.dt_form),
                sig_row("peak_age", &deltas.peak_age),
                sig_row("f_old", &deltas.f_old),
            ],
        )?;
    }

    out.write_table(
        &format!("{prefix}_tracers.csv"),
        &["sample", "ages", "n", "dt_form", "peak_age", "f_old"],
        &tracer_rows,
    )?;
    Ok(())
}

// ------------------------------------------------------------------ inject

fn parse_scan(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || {
        usage(format!(
            "cannot parse scan {s:?} (expected amplitudes=LO:HI:STEP or amplitudes=a,b,c)"
        ))
    };
    let (key, value) = s.split_once('=').ok_or_else(bad)?;
    if key.trim() != "amplitudes" {
        return Err(bad());
    }
    let value = value.trim();
    let amps: Vec<f64> = if value.contains(':') {
        let parts: Vec<&str> = value.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let step: f64 = parts[2].trim().parse().map_err(|_| bad())?;
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        (0..=n).map(|k| lo + step * k as f64).collect()
    } else {
        value
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if amps.len() < 2 {
        return Err(usage("a scan needs at least 2 amplitudes"));
    }
    Ok(amps)
}

#[allow(clippy::too_many_arguments)]
fn cmd_inject(
    g: &GlobalArgs,
    config_path: &Path,
    scan: Option<&str>,
    seeds: usize,
    emit_catalog: Option<&str>,
    tform_stat: &str,
    tau: f64,
    curve_bin_width: f64,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[config_path])?;
    let stat = parse_tform(tform_stat)?;
    if let Some(name) = emit_catalog {
        if name.contains('/') || name.contains('\\') {
            return Err(usage("--emit-catalog takes a bare file name"));
        }
    }
    let config = SimConfig::from_file(config_path)?;
    let params = [
        ("command", "inject".to_string()),
        ("config", inputs[0].1.clone()),
        ("scan", scan.unwrap_or("-").to_string()),
        ("seeds", seeds.to_string()),
        ("emit_catalog", emit_catalog.unwrap_or("-").to_string()),
        ("tform_stat", tform_stat.to_string()),
        ("tau", tau.to_string()),
        ("curve_bin_width", curve_bin_width.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
    ];
    // the simulation seed lives in the config file; the global seed plays
    // no role here
    let (mut out, digest) = start_run(g, config.seed, &params)?;

    let opts = LabOptions { stat, reps: g.bootstrap_reps, tau, eps: sbw::DEFAULT_EPS };
    let spec = config.grid_spec(2);

    if let Some(name) = emit_catalog {
        let synth = inject::synth_catalog(&config)?;
        synth.catalog.write_csv(&out.path(name))?;
        out.note(name);
        out.write_text("inject_grid.txt", &spec.to_text())?;
    }

    use std::fmt::Write as _;
    let mut summary = String::new();
    writeln!(summary, "config_seed: {}", config.seed).unwrap();
    writeln!(summary, "grid: {}x{}", config.grid_rows, config.grid_cols).unwrap();
    writeln!(summary, "n_per_cell: {}", config.n_per_cell).unwrap();

    match scan {
        None => {
            let result = inject::run_injection(&config, &opts)?;
            let grid = Grid {
                spec: spec.clone(),
                cells: Vec::new(),
                outside: Vec::new(),
            };
            // reuse the cell-table writer; it only reads the edge arrays
            out.write_table(
                "inject_map.csv",
                &map_cell_columns(),
                &map_cell_rows(&result.diags, &grid),
            )?;
            out.write_text(
                "inject_s.ppm",
                &ppm::render(&cell_matrix(&result.diags, |c| c.s), Palette::Sequential),
            )?;
            writeln!(summary, "bias_amp: {}", fmt_f64(config.bias_amp)).unwrap();
            writeln!(summary, "r_tilde_injected: {}", fmt_f64(result.r_tilde_injected)).unwrap();
            writeln!(summary, "r_tilde_measured: {}", fmt_f64(result.r_tilde)).unwrap();
            writeln!(summary, "sbw_fraction: {}", fmt_f64(result.sbw_fraction)).unwrap();
            writeln!(summary, "sbw_event: {}", result.sbw_event).unwrap();
            writeln!(summary, "n_clipped_true: {}", result.n_clipped_true).unwrap();
            writeln!(summary, "n_clipped_infer: {}", result.n_clipped_infer).unwrap();
        }
        Some(scan_str) => {
            let amplitudes = parse_scan(scan_str)?;
            let scan = inject::phase_scan(&config, &amplitudes, seeds, &opts, curve_bin_width)?;

            let point_rows: Vec<Vec<String>> = scan
                .points
                .iter()
                .map(|p| {
                    vec![
                        fmt_f64(p.amplitude),
                        p.run_seed.to_string(),
                        fmt_f64(p.r_tilde_injected),
                        fmt_f64(p.r_tilde),
                        fmt_f64(p.sbw_fraction),
                        p.sbw_event.to_string(),
                    ]
                })
                .collect();
            out.write_table(
                "inject_points.csv",
                &["amplitude", "run_seed", "r_tilde_injected", "r_tilde", "sbw_fraction", "sbw_event"],
                &point_rows,
            )?;

            let curve_rows: Vec<Vec<String>> = scan
                .curve
                .iter()
                .map(|b| {
                    vec![
                        fmt_f64(b.r_lo),
                        fmt_f64(b.r_hi),
                        b.n_runs.to_string(),
                        fmt_f64(b.event_rate),
                        fmt_f64(b.mean_fraction),
                    ]
                })
                .collect();
            out.write_table(
                "inject_curve.csv",
                &["r_lo", "r_hi", "n_runs", "event_rate", "mean_fraction"],
                &curve_rows,
            )?;

            let grid = Grid { spec: spec.clone(), cells: Vec::new(), outside: Vec::new() };
            for (k, (amp, diags)) in scan.representatives.iter().enumerate() {
                let mut rows = map_cell_rows(diags, &grid);
                for row in &mut rows {
                    row.insert(0, fmt_f64(*amp));
                }
                let mut columns = vec!["amplitude"];
                columns.extend_from_slice(&map_cell_columns());
                out.write_table(&format!("inject_rep_{k}.csv"), &columns, &rows)?;
            }

            // null calibration: amplitude-zero runs from the scan when
            // present, otherwise a dedicated batch
            let null_points: Vec<(f64, bool)> = if amplitudes.contains(&0.0) {
                scan.points
                    .iter()
                    .filter(|p| p.amplitude == 0.0)
                    .map(|p| (p.sbw_fraction, p.sbw_event))
                    .collect()
            } else {
                let mut v = Vec::with_capacity(seeds);
                for k in 0..seeds {
                    let mut null_cfg = config.clone();
                    null_cfg.bias_amp = 0.0;
                    null_cfg.seed =
                        derive_seed(config.seed, ((amplitudes.len() as u64) << 32) | k as u64);
                    let r = inject::run_injection(&null_cfg, &opts)?;
                    v.push((r.sbw_fraction, r.sbw_event));
                }
                v
            };
            let n = null_points.len() as f64;
            let event_rate = null_points.iter().filter(|p| p.1).count() as f64 / n;
            let mean_fraction = null_points.iter().map(|p| p.0).sum::<f64>() / n;
            let mut null_text = String::new();
            writeln!(null_text, "n_runs: {}", null_points.len()).unwrap();
            writeln!(null_text, "event_rate: {}", fmt_f64(event_rate)).unwrap();
            writeln!(null_text, "mean_fraction: {}", fmt_f64(mean_fraction)).unwrap();
            out.write_text("inject_null.txt", &null_text)?;

            writeln!(summary, "amplitudes: {}", amplitudes.len()).unwrap();
            writeln!(summary, "seeds_per_amplitude: {seeds}").unwrap();
            writeln!(summary, "runs: {}", scan.points.len()).unwrap();
            writeln!(summary, "curve_bins: {}", scan.curve.len()).unwrap();
        }
    }
    out.write_text("inject_summary.txt", &summary)?;
    finish_run(&mut out, cmdline, config.seed, &digest, &inputs)
}

// -------------------------------------------------------------- robustness

struct SweepAxis {
    axis: String,
    values: Vec<String>,
}

fn parse_sweeps(sweeps: &[String]) -> Result<Vec<SweepAxis>, CliError> {
    if sweeps.is_empty() {
        return Err(usage("robustness needs at least one --sweep axis=v1,v2,..."));
    }
    let mut out = Vec::new();
    for s in sweeps {
        let (axis, values) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("cannot parse sweep {s:?} (expected axis=v1,v2)")))?;
        let axis = axis.trim().to_string();
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.is_empty() || values.iter().any(String::is_empty) {
            return Err(usage(format!("sweep {s:?} has empty values")));
        }
        for v in &values {
            let ok = match axis.as_str() {
                "nbins" => matches!(v.parse::<usize>(), Ok(n) if (5..=7).contains(&n)),
                "nmin" => matches!(v.parse::<usize>(), Ok(n) if [30, 50, 80].contains(&n)),
                "sigma" => ["sd", "iqr_se", "mad_se"].contains(&v.as_str()),
                "tform" => ["median", "mean"].contains(&v.as_str()),
                "strategy" => ["quantile", "fixed"].contains(&v.as_str()),
                "ncoarse" => matches!(v.parse::<usize>(), Ok(n) if (2..=4).contains(&n)),
                other => return Err(usage(format!("unknown sweep axis {other:?}"))),
            };
            if !ok {
                return Err(usage(format!("sweep value {v:?} outside the {axis} domain")));
            }
        }
        out.push(SweepAxis { axis, values });
    }
    Ok(out)
}

/// Records living in high-bias cells.
fn high_bias_records(diags: &GridDiagnostics, grid: &Grid) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    for cell in &grid.cells {
        if diags.cell(cell.i, cell.j).classification == Classification::HighBias {
            set.extend(cell.members.iter().copied());
        }
    }
    set
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

struct VariantOutcome {
    axis: String,
    value: String,
    n_high_cells: usize,
    n_high_records: usize,
    jaccard: f64,
    r_tilde: Option<f64>,
    dabs: [Option<f64>; 3],
}

fn variant_outcome(
    axis: &str,
    value: &str,
    diags: &GridDiagnostics,
    grid: &Grid,
    base_records: &BTreeSet<usize>,
) -> Result<VariantOutcome, CliError> {
    let records = high_bias_records(diags, grid);
    let dabs_vals: Vec<f64> = diags
        .cells
        .iter()
        .filter(|c| c.classification == Classification::HighBias)
        .filter_map(|c| c.delta.map(f64::abs))
        .collect();
    let dabs = if dabs_vals.is_empty() {
        [None, None, None]
    } else {
        [
            Some(quantile(&dabs_vals, 0.25)?),
            Some(quantile(&dabs_vals, 0.5)?),
            Some(quantile(&dabs_vals, 0.75)?),
        ]
    };
    Ok(VariantOutcome {
        axis: axis.to_string(),
        value: value.to_string(),
        n_high_cells: diags.high_bias_cells().count(),
        n_high_records: records.len(),
        jaccard: jaccard(&records, base_records),
        r_tilde: diags.r_tilde,
        dabs,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_robustness(
    g: &GlobalArgs,
    input: &InputArgs,
    grid_args: &GridArgs,
    map_args: &MapArgs,
    sweeps: &[String],
    reference: &str,
    vars: &str,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let mut params = vec![
        ("command", "robustness".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
        ("seed", g.seed.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
        ("sweep", sweeps.join(";")),
        ("reference", reference.to_string()),
        ("vars", vars.to_string()),
        ("tform_stat", map_args.tform_stat.clone()),
        ("sigma_kind", map_args.sigma_kind.clone()),
        ("tau", map_args.tau.to_string()),
        ("include_small_cells", map_args.include_small_cells.to_string()),
    ];
    params.extend(grid_params(grid_args));
    let axes = parse_sweeps(sweeps)?;
    let map_ref = match reference {
        "truth" => MapRef::Truth,
        "internal" => MapRef::Internal,
        other => {
            return Err(usage(format!(
                "unknown reference {other:?} (expected truth or internal)"
            )))
        }
    };
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;

    let map_seed = derive_seed(
        g.seed,
        match map_ref {
            MapRef::Internal => SALT_MAP_INTERNAL,
            MapRef::Truth => SALT_MAP_TRUTH,
        },
    );
    let (rows, base_grid) = build_base_grid(&loaded, grid_args)?;
    // replicates are retained so the sigma axis reuses the base resampling
    let base_diags =
        compute_map(&loaded, &base_grid, map_args, map_ref, map_seed, g.bootstrap_reps, true)?;
    let base_records = high_bias_records(&base_diags, &base_grid);

    let mut outcomes = vec![variant_outcome(
        "base",
        "base",
        &base_diags,
        &base_grid,
        &base_records,
    )?];
    let mut cem_rows: Vec<Vec<String>> = Vec::new();

    for axis in &axes {
        for value in &axis.values {
            match axis.axis.as_str() {
                "nbins" => {
                    let n: usize = value.parse().unwrap();
                    let strategy = parse_strategy(&grid_args.strategy)?;
                    let grid =
                        build_grid(&loaded.catalog, &rows, n, n, strategy, grid_args.nmin)?;
                    let diags = compute_map(
                        &loaded, &grid, map_args, map_ref, map_seed, g.bootstrap_reps, false,
                    )?;
                    outcomes.push(variant_outcome("nbins", value, &diags, &grid, &base_records)?);
                }
                "nmin" => {
                    let n: usize = value.parse().unwrap();
                    let mut grid = base_grid.clone();
                    grid.rethreshold(n);
                    let diags = compute_map(
                        &loaded, &grid, map_args, map_ref, map_seed, g.bootstrap_reps, false,
                    )?;
                    outcomes.push(variant_outcome("nmin", value, &diags, &grid, &base_records)?);
                }
                "sigma" => {
                    let kind = parse_scale(value)?;
                    let diags = match kind {
                        ScaleKind::Sd => base_diags.clone(),
                        other => sbw::sigma_alt_map(&base_diags, other)?,
                    };
                    outcomes.push(variant_outcome(
                        "sigma", value, &diags, &base_grid, &base_records,
                    )?);
                }
                "tform" => {
                    let mut alt = map_args.clone();
                    alt.tform_stat = value.clone();
                    let diags = compute_map(
                        &loaded, &base_grid, &alt, map_ref, map_seed, g.bootstrap_reps, false,
                    )?;
                    outcomes.push(variant_outcome(
                        "tform", value, &diags, &base_grid, &base_records,
                    )?);
                }
                "strategy" => {
                    let strategy = parse_strategy(value)?;
                    let grid = build_grid(
                        &loaded.catalog,
                        &rows,
                        grid_args.nbins_snr,
                        grid_args.nbins_plx,
                        strategy,
                        grid_args.nmin,
                    )?;
                    let diags = compute_map(
                        &loaded, &grid, map_args, map_ref, map_seed, g.bootstrap_reps, false,
                    )?;
                    outcomes.push(variant_outcome(
                        "strategy", value, &diags, &grid, &base_records,
                    )?);
                }
                "ncoarse" => {
                    let n: usize = value.parse().unwrap();
                    let variables = parse_vars(vars)?;
                    let treated = sample_rows(&loaded, SampleSel::Hq)?;
                    let control = sample_rows(&loaded, SampleSel::Lq)?;
                    let spec = cem::CoarseningSpec { variables, n_coarse: n };
                    let coarsening =
                        cem::coarsen(&loaded.catalog, &treated, &control, &spec)?;
                    let matched = cem::cem(&loaded.catalog, &treated, &control, &coarsening)?;
                    let overall = cem::matched_overall_delta(
                        &loaded.catalog,
                        &matched,
                        AgeSource::Infer,
                        g.bootstrap_reps,
                        derive_seed(g.seed, SALT_CEM_OVERALL),
                    )?;
                    cem_rows.push(vec![
                        value.clone(),
                        matched.strata.len().to_string(),
                        matched.n_treated_matched.to_string(),
                        matched.n_control_matched.to_string(),
                        fmt_f64(matched.l1_before),
                        fmt_f64(matched.l1_after),
                        fmt_f64(overall.delta),
                        fmt_f64(overall.se),
                        fmt_f64(overall.z),
                        fmt_f64(overall.p_two_sided),
                    ]);
                }
                _ => unreachable!("axes validated in parse_sweeps"),
            }
        }
    }

    let rows_out: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.axis.clone(),
                o.value.clone(),
                o.n_high_cells.to_string(),
                o.n_high_records.to_string(),
                fmt_f64(o.jaccard),
                fmt_opt(o.r_tilde),
                fmt_opt(o.dabs[0]),
                fmt_opt(o.dabs[1]),
                fmt_opt(o.dabs[2]),
            ]
        })
        .collect();
    out.write_table(
        "robustness.csv",
        &[
            "axis",
            "value",
            "n_high_cells",
            "n_high_records",
            "jaccard_vs_base",
            "r_tilde",
            "dabs_p25",
            "dabs_p50",
            "dabs_p75",
        ],
        &rows_out,
    )?;
    if !cem_rows.is_empty() {
        out.write_table(
            "robustness_cem.csv",
            &[
                "ncoarse",
                "n_strata",
                "n_treated_matched",
                "n_control_matched",
                "l1_before",
                "l1_after",
                "delta",
                "se",
                "z",
                "p",
            ],
            &cem_rows,
        )?;
    }
    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

// ------------------------------------------------------------------ report

#[allow(clippy::too_many_arguments)]
fn cmd_report(
    g: &GlobalArgs,
    input: &InputArgs,
    grid_args: &GridArgs,
    map_args: &MapArgs,
    vars: &str,
    ncoarse: usize,
    bin_width: f64,
    fit_range: &str,
    cmdline: &str,
) -> CmdResult {
    let inputs = input_digests(&[&input.input, &input.schema])?;
    let mut params = vec![
        ("command", "report".to_string()),
        ("input", inputs[0].1.clone()),
        ("schema", inputs[1].1.clone()),
        ("lenient", input.lenient.to_string()),
        ("seed", g.seed.to_string()),
        ("bootstrap_reps", g.bootstrap_reps.to_string()),
        ("vars", vars.to_string()),
        ("ncoarse", ncoarse.to_string()),
        ("bin_width", bin_width.to_string()),
        ("fit_range", fit_range.to_string()),
        ("tform_stat", map_args.tform_stat.clone()),
        ("sigma_kind", map_args.sigma_kind.clone()),
        ("tau", map_args.tau.to_string()),
        ("include_small_cells", map_args.include_small_cells.to_string()),
    ];
    params.extend(grid_params(grid_args));
    let (mut out, digest) = start_run(g, g.seed, &params)?;
    let loaded = load_catalog(input)?;

    do_ingest(&mut out, &loaded, &input.input)?;
    let (rows, grid) = build_base_grid(&loaded, grid_args)?;
    do_grid(&mut out, &grid)?;

    let has_truth = !loaded.catalog.truth_rows(&rows).is_empty();
    let has_hq = loaded.schema.cuts.is_some() && loaded.schema.hq_cuts.is_some();

    if has_truth {
        let diags = compute_map(
            &loaded,
            &grid,
            map_args,
            MapRef::Truth,
            derive_seed(g.seed, SALT_MAP_TRUTH),
            g.bootstrap_reps,
            false,
        )?;
        do_map(&mut out, "struth", &diags, &grid, &map_args.sigma_kind)?;
    }
    if has_hq {
        let diags = compute_map(
            &loaded,
            &grid,
            map_args,
            MapRef::Internal,
            derive_seed(g.seed, SALT_MAP_INTERNAL),
            g.bootstrap_reps,
            false,
        )?;
        do_map(&mut out, "sbw", &diags, &grid, &map_args.sigma_kind)?;
        do_cem(
            &mut out,
            &loaded,
            vars,
            ncoarse,
            "hq",
            "lq",
            "infer",
            bin_width,
            g.seed,
            g.bootstrap_reps,
        )?;
    }

    do_amr(
        &mut out,
        "amr_infer",
        &loaded,
        "infer",
        "std",
        bin_width,
        fit_range,
        g.seed,
        g.bootstrap_reps,
    )?;
    if has_truth {
        do_amr(
            &mut out,
            "amr_seismo",
            &loaded,
            "seismo",
            "std",
            bin_width,
            fit_range,
            g.seed,
            g.bootstrap_reps,
        )?;
    }

    do_history(
        &mut out,
        "history",
        &loaded,
        "infer",
        "std",
        if has_hq { Some("hq") } else { None },
        0.5,
        history::DEFAULT_PEAK_BIN_WIDTH,
        history::DEFAULT_TAU_OLD,
        None,
        grid_args,
        map_args,
        g.seed,
        g.bootstrap_reps,
    )?;

    finish_run(&mut out, cmdline, g.seed, &digest, &inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parses_and_rejects_empty() {
        assert_eq!(parse_range("-1.0:-0.5").unwrap(), (-1.0, -0.5));
        assert_eq!(parse_range(" 0 : 2.5 ").unwrap(), (0.0, 2.5));
        assert!(matches!(parse_range("1:1"), Err(CliError::Usage(_))));
        assert!(matches!(parse_range("2:1"), Err(CliError::Usage(_))));
        assert!(matches!(parse_range("nope"), Err(CliError::Usage(_))));
    }

    #[test]
    fn scan_expands_ranges_inclusively() {
        let amps = parse_scan("amplitudes=0:2:0.5").unwrap();
        assert_eq!(amps.len(), 5);
        assert_eq!(amps[0], 0.0);
        assert!((amps[4] - 2.0).abs() < 1e-12);
        // step that does not land exactly on the endpoint keeps the last
        // point at or below it
        let amps = parse_scan("amplitudes=0:1:0.3").unwrap();
        assert_eq!(amps.len(), 4);
        assert!(amps.last().unwrap() <= &1.0);
    }

    #[test]
    fn scan_accepts_comma_lists() {
        let amps = parse_scan("amplitudes=0, 0.5 ,1.5").unwrap();
        assert_eq!(amps, vec![0.0, 0.5, 1.5]);
    }

    #[test]
    fn scan_rejects_malformed_specs() {
        for bad in [
            "amps=0:1:0.5",
            "amplitudes=0:1",
            "amplitudes=1:0:0.5",
            "amplitudes=0:1:0",
            "amplitudes=0.7",
            "amplitudes=a,b",
        ] {
            assert!(matches!(parse_scan(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn sweep_axes_validate_their_domains() {
        let axes = parse_sweeps(&["nbins=5,6,7".into(), "sigma=sd,mad_se".into()]).unwrap();
        assert_eq!(axes.len(), 2);
        assert_eq!(axes[0].values, vec!["5", "6", "7"]);

        for bad in [
            "nbins=4",
            "nbins=8",
            "nmin=40",
            "sigma=var",
            "tform=mode",
            "strategy=log",
            "ncoarse=5",
            "unknown=1",
            "nbins",
        ] {
            assert!(
                matches!(parse_sweeps(&[bad.to_string()]), Err(CliError::Usage(_))),
                "{bad}"
            );
        }
        assert!(parse_sweeps(&[]).is_err());
    }

    #[test]
    fn age_grid_spans_zero_to_twenty() {
        let grid = age_grid(0.5).unwrap();
        assert_eq!(grid.first(), Some(&0.0));
        assert_eq!(grid.last(), Some(&20.0));
        assert_eq!(grid.len(), 41);
        assert!(age_grid(0.0).is_err());
        assert!(age_grid(-1.0).is_err());
    }

    #[test]
    fn jaccard_handles_empty_and_disjoint_sets() {
        let a: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        let b: BTreeSet<usize> = [2, 3, 4].into_iter().collect();
        assert!((jaccard(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        let c: BTreeSet<usize> = [9].into_iter().collect();
        assert_eq!(jaccard(&a, &c), 0.0);
        assert_eq!(jaccard(&a, &a), 1.0);
    }
}
