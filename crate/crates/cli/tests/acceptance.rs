//! Acceptance checklist for the whole toolkit: nine checks, each printing
//! one `ACCEPT Ck ...: PASS/FAIL` line. Run them with
//!
//! ```text
//! cargo test --test acceptance -- --nocapture
//! ```
//!
//! C1-C3 pin the statistical arithmetic against closed-form values and an
//! independent oracle; C4-C7 are injection-recovery suites with explicit
//! effect sizes and null calibrations; C8 checks that flagged-cell sets
//! survive analysis-parameter sweeps; C9 checks byte-level determinism of
//! the command-line pipeline across worker counts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sbw_core::catalog::{AgeSource, Catalog, StarRecord};
use sbw_core::cem::{cem, coarsen, matched_overall_delta, CoarseningSpec, MatchVariable};
use sbw_core::history::{compare_histories, CompareMode};
use sbw_core::inject::{
    injected_r_tilde, phase_scan, run_injection, synth_catalog, LabOptions, ProfileSpec,
    SimConfig,
};
use sbw_core::sbw::Classification;
use sbw_core::stats::{
    bootstrap_stat, derive_seed, quantile, z_and_p, Stat,
};

/// Print the per-criterion verdict line, then enforce it.
fn verdict(id: &str, name: &str, ok: bool, detail: &str) {
    let state = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPT {id} {name}: {state} — {detail}");
    assert!(ok, "{id} {name}: {detail}");
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

// ------------------------------------------------------------------ C1

#[test]
fn c1_significance_arithmetic() {
    let a = z_and_p(1.43, 0.17).unwrap();
    let b = z_and_p(0.35, 0.20).unwrap();
    let ok = (8.36..=8.46).contains(&a.z)
        && (b.z - 1.75).abs() < 1e-12
        && (0.075..=0.085).contains(&b.p_two_sided);
    verdict(
        "C1",
        "significance arithmetic",
        ok,
        &format!(
            "z(1.43, 0.17) = {:.4}; z(0.35, 0.20) = {:.4} with p = {:.4}",
            a.z, b.z, b.p_two_sided
        ),
    );
}

// ------------------------------------------------------------------ C2

#[test]
fn c2_bootstrap_median_standard_error() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let draws: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng)).collect();
    let boot = bootstrap_stat(&draws, Stat::Median, 2000, 11).unwrap();
    // large-sample standard error of the median of n unit normals
    let expected = 1.2533 / (1000.0f64).sqrt();
    let rel = (boot.se - expected).abs() / expected;

    let constant = vec![3.25; 500];
    let flat = bootstrap_stat(&constant, Stat::Median, 2000, 12).unwrap();

    let ok = rel <= 0.10 && flat.se == 0.0;
    verdict(
        "C2",
        "bootstrap median standard error",
        ok,
        &format!(
            "se = {:.5} vs expected {:.5} ({:+.1}%); constant-input se = {}",
            boot.se,
            expected,
            100.0 * (boot.se - expected) / expected,
            flat.se
        ),
    );
}

// ------------------------------------------------------------------ C3

/// Independent re-implementation: sort, then interpolate at rank (n-1)q.
fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < s.len() {
        s[lo] + frac * (s[lo + 1] - s[lo])
    } else {
        s[lo]
    }
}

#[test]
fn c3_quantile_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=50);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let q: f64 = rng.gen_range(0.0..=1.0);
        let got = quantile(&values, q).unwrap();
        let want = quantile_oracle(&values, q);
        let rel = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(rel);
    }
    let ladder = [0.0, 1.0, 2.0, 3.0, 4.0];
    let spread = quantile(&ladder, 0.75).unwrap() - quantile(&ladder, 0.25).unwrap();

    let ok = worst <= 1e-12 && spread == 2.0;
    verdict(
        "C3",
        "quantile oracle equivalence",
        ok,
        &format!("worst relative gap {worst:.2e} over 1000 lists; ladder spread = {spread}"),
    );
}

// ------------------------------------------------------------------ C4

fn offset_config(seed: u64, amp: f64) -> SimConfig {
    SimConfig {
        seed,
        bias_amp: amp,
        bias_profile: ProfileSpec::LowQualityHalf { low: 1.0, high: 0.0 },
        noise_profile: ProfileSpec::Uniform(2.0),
        grid_rows: 4,
        grid_cols: 4,
        n_per_cell: 200,
        ..SimConfig::default()
    }
}

#[test]
fn c4_injected_offset_detection_and_null_rate() {
    let opts = LabOptions { reps: 300, ..LabOptions::default() };
    let n_seeds = 100u64;

    // +0.8 Gyr against sigma ~ 2 * 1.2533 / sqrt(200): expect s near 4.5
    let mut detected = 0;
    for k in 0..n_seeds {
        let result = run_injection(&offset_config(derive_seed(41_000, k), 0.8), &opts).unwrap();
        let mut s_vals = Vec::new();
        let mut high = 0usize;
        let mut total = 0usize;
        for cell in result.diags.diagnostic_cells() {
            if cell.i >= 2 {
                continue; // only the designated low-quality rows carry the offset
            }
            total += 1;
            high += (cell.classification == Classification::HighBias) as usize;
            if let Some(s) = cell.s {
                s_vals.push(s);
            }
        }
        let med = quantile(&s_vals, 0.5).unwrap();
        if (3.0..=6.5).contains(&med) && 2 * high > total {
            detected += 1;
        }
    }

    let mut null_fraction_sum = 0.0;
    for k in 0..n_seeds {
        let result = run_injection(&offset_config(derive_seed(42_000, k), 0.0), &opts).unwrap();
        null_fraction_sum += result.sbw_fraction;
    }
    let null_rate = null_fraction_sum / n_seeds as f64;

    let ok = detected >= 95 && null_rate <= 0.01;
    verdict(
        "C4",
        "offset detection and null rate",
        ok,
        &format!(
            "designated offset detected in {detected}/{n_seeds} seeds; \
             null flags {:.3}% of cells",
            100.0 * null_rate
        ),
    );
}

// ------------------------------------------------------------------ C5

#[test]
fn c5_detection_phase_transition() {
    let base = SimConfig { n_per_cell: 200, ..SimConfig::default() };
    let opts = LabOptions { reps: 300, ..LabOptions::default() };

    // amplitudes chosen so the designed ratio hits these targets exactly
    let targets =
        [0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 3.25, 3.6, 4.0];
    let per_unit = injected_r_tilde(&SimConfig { bias_amp: 1.0, ..base.clone() }, opts.stat);
    let amplitudes: Vec<f64> = targets.iter().map(|t| t / per_unit).collect();
    let seeds_per_amp = 40;

    let scan = phase_scan(&base, &amplitudes, seeds_per_amp, &opts, 0.4).unwrap();

    let rate_where = |pred: &dyn Fn(f64) -> bool| {
        let sel: Vec<_> = scan.points.iter().filter(|p| pred(p.r_tilde_injected)).collect();
        let events = sel.iter().filter(|p| p.sbw_event).count();
        (events as f64 / sel.len() as f64, sel.len())
    };
    let (rate_low, n_low) = rate_where(&|r| r < 0.5);
    let (rate_high, n_high) = rate_where(&|r| r > 3.0);

    let mut monotone = true;
    for w in scan.curve.windows(2) {
        if w[1].event_rate < w[0].event_rate - 0.05 {
            monotone = false;
        }
    }

    let span_ok = scan
        .points
        .iter()
        .map(|p| p.r_tilde_injected)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));

    let ok = rate_low < 0.1
        && rate_high > 0.9
        && monotone
        && span_ok.0 <= 0.2 + 1e-9
        && span_ok.1 >= 4.0 - 1e-9
        && seeds_per_amp >= 20;
    verdict(
        "C5",
        "detection phase transition",
        ok,
        &format!(
            "event rate {:.3} below ratio 0.5 (n={}), {:.3} above 3 (n={}); \
             curve monotone within 0.05: {}; ratio span [{:.2}, {:.2}]",
            rate_low, n_low, rate_high, n_high, monotone, span_ok.0, span_ok.1
        ),
    );
}

// ------------------------------------------------------------------ C6

/// Two groups with different quality and different metallicity mixes, ages
/// driven by metallicity alone, plus an optional extra offset added to the
/// low-quality group at fixed covariates.
fn confounded_catalog(
    seed: u64,
    n_per_group: usize,
    coupled_bias: f64,
) -> (Catalog, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut records = Vec::with_capacity(2 * n_per_group);
    for g in 0..2 {
        let treated = g == 0;
        for i in 0..n_per_group {
            let feh = ((if treated { -0.1_f64 } else { 0.1 }) + 0.3 * unit.sample(&mut rng))
                .clamp(-0.999, 0.9);
            let age_raw =
                8.0 - 2.0 * feh + unit.sample(&mut rng) + if treated { coupled_bias } else { 0.0 };
            records.push(StarRecord {
                id: format!("{}{}", if treated { "t" } else { "c" }, i),
                teff: 4400.0 + 800.0 * rng.gen::<f64>(),
                logg: 2.0 + rng.gen::<f64>(),
                feh,
                alpha_fe: 0.1,
                snr: if treated { 80.0 } else { 220.0 },
                plx: 2.0,
                plx_err: 0.1,
                distance: 0.5,
                gal_r: 8.0,
                gal_z: 0.2,
                age_infer: age_raw.clamp(0.3, 19.5),
                age_seismo: None,
            });
        }
    }
    let catalog = Catalog::new(records).unwrap();
    let treated: Vec<usize> = (0..n_per_group).collect();
    let control: Vec<usize> = (n_per_group..2 * n_per_group).collect();
    (catalog, treated, control)
}

#[test]
fn c6_matching_separates_confounding_from_coupling() {
    let spec = CoarseningSpec {
        variables: vec![MatchVariable::Feh, MatchVariable::Teff],
        n_coarse: 8,
    };
    let run = |seed: u64, bias: f64| {
        let (catalog, treated, control) = confounded_catalog(seed, 2000, bias);
        let coarsening = coarsen(&catalog, &treated, &control, &spec).unwrap();
        let matched = cem(&catalog, &treated, &control, &coarsening).unwrap();
        assert!(
            matched.l1_after <= matched.l1_before + 1e-12,
            "imbalance grew: {} -> {}",
            matched.l1_before,
            matched.l1_after
        );
        matched_overall_delta(&catalog, &matched, AgeSource::Infer, 300, derive_seed(seed, 1))
            .unwrap()
    };

    // selection confounding only: the matched contrast must be quiet
    let n_null = 50u64;
    let mut quiet = 0;
    for seed in 0..n_null {
        if run(derive_seed(60_000, seed), 0.0).z.abs() < 2.0 {
            quiet += 1;
        }
    }

    // a 0.3 Gyr offset at fixed covariates must survive the matching
    let n_coupled = 10u64;
    let mut deltas = Vec::new();
    let mut decisive = true;
    for seed in 0..n_coupled {
        let sig = run(derive_seed(61_000, seed), 0.3);
        deltas.push(sig.delta);
        decisive &= sig.z > 3.0;
    }
    let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;

    let ok = quiet * 10 >= n_null as usize * 9 && (mean - 0.3).abs() <= 0.1 && decisive;
    verdict(
        "C6",
        "matching separates confounding from coupling",
        ok,
        &format!(
            "null quiet in {quiet}/{n_null} seeds; coupled offset recovered as \
             {mean:.3} Gyr (all z > 3: {decisive})"
        ),
    );
}

// ------------------------------------------------------------------ C7

/// Paired age samples whose 25-75 spread is pinned exactly: the first at
/// `w_a`, the second affinely stretched around the shared median to `w_b`.
fn stretched_pair(seed: u64, n: usize, w_a: f64, w_b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(8.3, 2.0).unwrap();
    let base: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let med = quantile(&base, 0.5).unwrap();
    let spread = quantile(&base, 0.75).unwrap() - quantile(&base, 0.25).unwrap();
    let a: Vec<f64> = base.iter().map(|v| med + (v - med) * w_a / spread).collect();
    let b: Vec<f64> = a.iter().map(|v| med + (v - med) * (w_b / w_a)).collect();
    (a, b)
}

#[test]
fn c7_formation_width_stretch_recovery() {
    let n = 2834;

    // designed stretch 3.04 -> 3.55 Gyr
    let mut stretch_ok = true;
    let mut worst_gap: f64 = 0.0;
    let mut min_z = f64::INFINITY;
    for seed in 0..3u64 {
        let (a, b) = stretched_pair(derive_seed(70_000, seed), n, 3.04, 3.55);
        let d = compare_histories(&a, &b, CompareMode::Paired, 0.5, 10.0, 400, derive_seed(70_500, seed))
            .unwrap();
        worst_gap = worst_gap.max((d.dt_form.delta - 0.51).abs());
        min_z = min_z.min(d.dt_form.z);
        stretch_ok &= (d.dt_form.delta - 0.51).abs() <= 0.10 && d.dt_form.z > 3.0;
    }

    // null: same underlying ages on both sides, independent per-star noise.
    // The population has a sharp formation burst plus a broad old component,
    // so every tracer targets a stable feature of the true distribution.
    let n_null = 50u64;
    let mut quiet = 0;
    for seed in 0..n_null {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(71_000, seed));
        let burst = Normal::new(6.25, 0.35).unwrap();
        let old = Normal::new(12.5, 1.3).unwrap();
        let noise = Normal::new(0.0, 0.25).unwrap();
        let base: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.55) {
                    burst.sample(&mut rng)
                } else {
                    old.sample(&mut rng)
                }
            })
            .collect();
        let a: Vec<f64> = base.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let b: Vec<f64> = base.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let d = compare_histories(&a, &b, CompareMode::Paired, 0.5, 10.0, 400, derive_seed(71_500, seed))
            .unwrap();
        if d.dt_form.z.abs() < 2.0 && d.peak_age.z.abs() < 2.0 && d.f_old.z.abs() < 2.0 {
            quiet += 1;
        }
    }

    let ok = stretch_ok && quiet * 10 >= n_null as usize * 9;
    verdict(
        "C7",
        "formation width stretch recovery",
        ok,
        &format!(
            "stretch recovered within {worst_gap:.3} of 0.51 Gyr at n = {n} \
             (min z = {min_z:.1}); null quiet in {quiet}/{n_null} seeds"
        ),
    );
}

// ------------------------------------------------------------------ C8

fn sbw_bin() -> &'static str {
    env!("CARGO_BIN_EXE_sbw")
}

/// Parse one of our delimited tables: `#` preamble, header, rows.
fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> =
        lines.next().expect("header row").split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name} in {header:?}"))
}

const IDENTITY_SCHEMA: &str = "\
delimiter = \",\"

[columns]
id = \"id\"
teff = \"teff\"
logg = \"logg\"
feh = \"feh\"
alpha_fe = \"alpha_fe\"
snr = \"snr\"
plx = \"plx\"
plx_err = \"plx_err\"
distance = \"distance\"
gal_r = \"gal_r\"
gal_z = \"gal_z\"
age_infer = \"age_infer\"
age_seismo = \"age_seismo\"
";

#[test]
fn c8_sweep_stable_cell_sets() {
    // materialize the larger jittered experiment for the sweep
    let config = SimConfig::from_file(&fixture("inject_robustness.toml")).unwrap();
    let synth = synth_catalog(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let catalog_path = dir.path().join("catalog.csv");
    let schema_path = dir.path().join("schema.toml");
    synth.catalog.write_csv(&catalog_path).unwrap();
    std::fs::write(&schema_path, IDENTITY_SCHEMA).unwrap();

    let out = dir.path().join("sweep");
    let status = Command::new(sbw_bin())
        .args(["robustness", "--input"])
        .arg(&catalog_path)
        .arg("--schema")
        .arg(&schema_path)
        .args([
            "--reference",
            "truth",
            "--bootstrap-reps",
            "400",
            "--sweep",
            "nbins=5,6,7",
            "--sweep",
            "nmin=30,50,80",
            "--sweep",
            "sigma=sd,iqr_se,mad_se",
            "--sweep",
            "tform=median,mean",
            "--output-dir",
        ])
        .arg(&out)
        .status()
        .expect("spawn robustness run");
    assert!(status.success(), "robustness run failed: {status}");

    let (header, rows) = read_table(&out.join("robustness.csv"));
    let c_axis = column(&header, "axis");
    let c_value = column(&header, "value");
    let c_cells = column(&header, "n_high_cells");
    let c_jac = column(&header, "jaccard_vs_base");

    let base_cells: usize = rows
        .iter()
        .find(|r| r[c_axis] == "base")
        .expect("base row")[c_cells]
        .parse()
        .unwrap();
    let mut min_jac = f64::INFINITY;
    let mut worst = String::new();
    let mut n_variants = 0;
    for row in rows.iter().filter(|r| r[c_axis] != "base") {
        n_variants += 1;
        let j: f64 = row[c_jac].parse().unwrap();
        if j < min_jac {
            min_jac = j;
            worst = format!("{}={}", row[c_axis], row[c_value]);
        }
    }

    let ok = base_cells > 0 && n_variants == 11 && min_jac >= 0.6;
    verdict(
        "C8",
        "sweep-stable flagged sets",
        ok,
        &format!(
            "base flags {base_cells} cells; worst overlap {min_jac:.3} at {worst} \
             across {n_variants} variants"
        ),
    );
}

// ------------------------------------------------------------------ C9

/// Everything except the manifest, keyed by file name.
fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        if name == "manifest.txt" {
            continue;
        }
        out.insert(name, std::fs::read(entry.path()).unwrap());
    }
    out
}

#[test]
fn c9_byte_identical_outputs_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str, workers: &str| -> PathBuf {
        let out = dir.path().join(tag);
        let status = Command::new(sbw_bin())
            .args(["report", "--input"])
            .arg(fixture("synthetic_500.csv"))
            .arg("--schema")
            .arg(fixture("synthetic_schema.toml"))
            .args([
                "--nbins-snr",
                "5",
                "--nbins-plx",
                "5",
                "--nmin",
                "10",
                "--bootstrap-reps",
                "300",
                "--workers",
                workers,
                "--output-dir",
            ])
            .arg(&out)
            .status()
            .expect("spawn report run");
        assert!(status.success(), "report run failed: {status}");
        out
    };

    let a = dir_bytes(&run("a", "1"));
    let b = dir_bytes(&run("b", "4"));
    let c = dir_bytes(&run("c", "1"));

    let names_match = a.keys().eq(b.keys()) && a.keys().eq(c.keys());
    let mut diff = Vec::new();
    for (name, bytes) in &a {
        if b.get(name) != Some(bytes) {
            diff.push(format!("{name} (1 vs 4 workers)"));
        }
        if c.get(name) != Some(bytes) {
            diff.push(format!("{name} (repeat run)"));
        }
    }

    let ok = names_match && diff.is_empty() && !a.is_empty();
    verdict(
        "C9",
        "byte-identical outputs across workers",
        ok,
        &format!(
            "{} files compared across 1-worker, 4-worker, and repeat runs; diffs: {}",
            a.len(),
            if diff.is_empty() { "none".into() } else { diff.join(", ") }
        ),
    );
}
