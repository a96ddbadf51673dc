//! Coarsened exact matching between two quality classes.
//!
//! Covariates are coarsened onto pooled-sample quantile bins; records match
//! exactly on the tuple of bin labels. Matched treated records keep weight
//! one, matched controls are reweighted so the control distribution over
//! strata reproduces the treated one, and everything unmatched gets weight
//! zero. Ages are never matching variables: matching on the outcome would
//! erase the very bias the diagnostics look for.
//!
//! The whole module is deterministic: no randomness enters the matching
//! itself, and the bootstrap used for matched differences runs on per
//! replicate ChaCha streams.

use std::collections::BTreeMap;

use crate::catalog::{AgeSource, Catalog, StarRecord};
use crate::error::{Error, Result};
use crate::stats::{quantile, replicate_rng, significance_lenient, Significance};
use rand::Rng;

/// Covariates available for matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatchVariable {
    Teff,
    Logg,
    Feh,
    AlphaFe,
    Distance,
    GalR,
    GalZ,
}

impl MatchVariable {
    pub const ALL: [MatchVariable; 7] = [
        MatchVariable::Teff,
        MatchVariable::Logg,
        MatchVariable::Feh,
        MatchVariable::AlphaFe,
        MatchVariable::Distance,
        MatchVariable::GalR,
        MatchVariable::GalZ,
    ];

    pub fn value(self, rec: &StarRecord) -> f64 {
        match self {
            MatchVariable::Teff => rec.teff,
            MatchVariable::Logg => rec.logg,
            MatchVariable::Feh => rec.feh,
            MatchVariable::AlphaFe => rec.alpha_fe,
            MatchVariable::Distance => rec.distance,
            MatchVariable::GalR => rec.gal_r,
            MatchVariable::GalZ => rec.gal_z,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teff" => Ok(MatchVariable::Teff),
            "logg" => Ok(MatchVariable::Logg),
            "feh" => Ok(MatchVariable::Feh),
            "alpha_fe" => Ok(MatchVariable::AlphaFe),
            "distance" => Ok(MatchVariable::Distance),
            "gal_r" => Ok(MatchVariable::GalR),
            "gal_z" => Ok(MatchVariable::GalZ),
            other => Err(Error::Config(format!("unknown matching variable {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MatchVariable::Teff => "teff",
            MatchVariable::Logg => "logg",
            MatchVariable::Feh => "feh",
            MatchVariable::AlphaFe => "alpha_fe",
            MatchVariable::Distance => "distance",
            MatchVariable::GalR => "gal_r",
            MatchVariable::GalZ => "gal_z",
        }
    }
}

/// Coarsening request: which variables, how many quantile bins each.
#[derive(Debug, Clone)]
pub struct CoarseningSpec {
    pub variables: Vec<MatchVariable>,
    pub n_coarse: usize,
}

impl CoarseningSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::Config("no matching variables given".into()));
        }
        if !(1..=16).contains(&self.n_coarse) {
            return Err(Error::Config(format!(
                "n_coarse must be between 1 and 16, got {}",
                self.n_coarse
            )));
        }
        let mut seen = self.variables.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variables.len() {
            return Err(Error::Config("duplicate matching variable".into()));
        }
        Ok(())
    }
}

/// Stratum label: one coarse bin index per matching variable.
pub type Label = Vec<u8>;

/// Pooled-sample cut points per variable. Labels any record consistently.
#[derive(Debug, Clone)]
pub struct Coarsening {
    pub spec: CoarseningSpec,
    cuts: Vec<Vec<f64>>,
}

impl Coarsening {
    pub fn label(&self, rec: &StarRecord) -> Result<Label> {
        self.spec
            .variables
            .iter()
            .zip(&self.cuts)
            .map(|(var, cuts)| {
                let v = var.value(rec);
                if !v.is_finite() {
                    return Err(Error::BadRecord {
                        id: rec.id.clone(),
                        reason: format!("{} is not finite", var.name()),
                    });
                }
                // bin = number of cut points at or below the value
                Ok(cuts.iter().filter(|&&c| v >= c).count() as u8)
            })
            .collect()
    }
}

/// Place pooled-quantile cut points for the given variables over the union
/// of both groups. Errors when a variable is constant across the pool: it
/// cannot stratify anything.
pub fn coarsen(
    catalog: &Catalog,
    treated: &[usize],
    control: &[usize],
    spec: &CoarseningSpec,
) -> Result<Coarsening> {
    spec.validate()?;
    if treated.is_empty() {
        return Err(Error::EmptyGroup("treated".into()));
    }
    if control.is_empty() {
        return Err(Error::EmptyGroup("control".into()));
    }
    let pooled: Vec<usize> = treated.iter().chain(control.iter()).copied().collect();
    let mut cuts = Vec::with_capacity(spec.variables.len());
    for var in &spec.variables {
        let values: Vec<f64> = pooled
            .iter()
            .map(|&r| var.value(&catalog.records()[r]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            let bad = pooled
                .iter()
                .find(|&&r| !var.value(&catalog.records()[r]).is_finite())
                .unwrap();
            return Err(Error::BadRecord {
                id: catalog.records()[*bad].id.clone(),
                reason: format!("{} is not finite", var.name()),
            });
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            return Err(Error::ConstantVariable(var.name().to_string()));
        }
        let k = spec.n_coarse;
        let mut sorted = values;
        sorted.sort_unstable_by(f64::total_cmp);
        let var_cuts: Vec<f64> = (1..k)
            .map(|j| crate::stats::quantile(&sorted, j as f64 / k as f64))
            .collect::<Result<_>>()?;
        cuts.push(var_cuts);
    }
    Ok(Coarsening { spec: spec.clone(), cuts })
}

/// One retained stratum.
#[derive(Debug, Clone)]
pub struct Stratum {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
    /// Weight of each control record in this stratum.
    pub control_weight: f64,
}

/// Matching outcome.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Strata containing both groups, keyed by label.
    pub strata: BTreeMap<Label, Stratum>,
    pub n_treated_in: usize,
    pub n_control_in: usize,
    pub n_treated_matched: usize,
    pub n_control_matched: usize,
    /// Imbalance over the coarsened strata before matching (unweighted).
    pub l1_before: f64,
    /// Imbalance over the matched, weighted sample.
    pub l1_after: f64,
}

impl MatchResult {
    /// Weight of a matched record; unmatched records have weight zero.
    pub fn weights(&self) -> BTreeMap<usize, f64> {
        let mut w = BTreeMap::new();
        for stratum in self.strata.values() {
            for &r in &stratum.treated {
                w.insert(r, 1.0);
            }
            for &r in &stratum.control {
                w.insert(r, stratum.control_weight);
            }
        }
        w
    }
}

/// Exact matching on coarsened labels. Strata missing either group are
/// dropped (their records get weight zero). Matched control records in
/// stratum `s` receive weight `(m_T,s / m_C,s) * (M_C / M_T)`, which makes
/// the weighted control distribution over strata identical to the treated
/// one.
pub fn cem(
    catalog: &Catalog,
    treated: &[usize],
    control: &[usize],
    coarsening: &Coarsening,
) -> Result<MatchResult> {
    let treated_labels = label_rows(catalog, treated, coarsening)?;
    let control_labels = label_rows(catalog, control, coarsening)?;

    let l1_before = l1_from_labels(&treated_labels, &control_labels, None, None);

    let mut groups: BTreeMap<Label, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (row, label) in &treated_labels {
        groups.entry(label.clone()).or_default().0.push(*row);
    }
    for (row, label) in &control_labels {
        groups.entry(label.clone()).or_default().1.push(*row);
    }

    let retained: BTreeMap<Label, (Vec<usize>, Vec<usize>)> = groups
        .into_iter()
        .filter(|(_, (t, c))| !t.is_empty() && !c.is_empty())
        .collect();
    if retained.is_empty() {
        return Err(Error::ZeroOverlap);
    }

    let m_t: usize = retained.values().map(|(t, _)| t.len()).sum();
    let m_c: usize = retained.values().map(|(_, c)| c.len()).sum();

    let mut strata = BTreeMap::new();
    for (label, (t, c)) in retained {
        let control_weight = (t.len() as f64 / c.len() as f64) * (m_c as f64 / m_t as f64);
        strata.insert(label, Stratum { treated: t, control: c, control_weight });
    }

    let result = MatchResult {
        strata,
        n_treated_in: treated.len(),
        n_control_in: control.len(),
        n_treated_matched: m_t,
        n_control_matched: m_c,
        l1_before,
        l1_after: 0.0,
    };

    let weights = result.weights();
    let matched_t: Vec<(usize, Label)> = treated_labels
        .iter()
        .filter(|(r, _)| weights.contains_key(r))
        .cloned()
        .collect();
    let matched_c: Vec<(usize, Label)> = control_labels
        .iter()
        .filter(|(r, _)| weights.contains_key(r))
        .cloned()
        .collect();
    let l1_after = l1_from_labels(&matched_t, &matched_c, Some(&weights), Some(&weights));

    Ok(MatchResult { l1_after, ..result })
}

fn label_rows(
    catalog: &Catalog,
    rows: &[usize],
    coarsening: &Coarsening,
) -> Result<Vec<(usize, Label)>> {
    rows.iter()
        .map(|&r| Ok((r, coarsening.label(&catalog.records()[r])?)))
        .collect()
}

/// Multivariate L1 imbalance: half the sum over strata of the absolute
/// difference of the two groups' (optionally weighted) label frequencies.
pub fn l1_imbalance(
    catalog: &Catalog,
    treated: &[usize],
    control: &[usize],
    coarsening: &Coarsening,
    weights: Option<&BTreeMap<usize, f64>>,
) -> Result<f64> {
    let t = label_rows(catalog, treated, coarsening)?;
    let c = label_rows(catalog, control, coarsening)?;
    Ok(l1_from_labels(&t, &c, weights, weights))
}

fn l1_from_labels(
    treated: &[(usize, Label)],
    control: &[(usize, Label)],
    w_treated: Option<&BTreeMap<usize, f64>>,
    w_control: Option<&BTreeMap<usize, f64>>,
) -> f64 {
    let mut f_t: BTreeMap<&Label, f64> = BTreeMap::new();
    let mut f_c: BTreeMap<&Label, f64> = BTreeMap::new();
    let mut tot_t = 0.0;
    let mut tot_c = 0.0;
    for (row, label) in treated {
        let w = w_treated.map_or(1.0, |m| m.get(row).copied().unwrap_or(0.0));
        *f_t.entry(label).or_insert(0.0) += w;
        tot_t += w;
    }
    for (row, label) in control {
        let w = w_control.map_or(1.0, |m| m.get(row).copied().unwrap_or(0.0));
        *f_c.entry(label).or_insert(0.0) += w;
        tot_c += w;
    }
    if tot_t == 0.0 || tot_c == 0.0 {
        return 0.0;
    }
    let labels: std::collections::BTreeSet<&Label> = f_t.keys().chain(f_c.keys()).copied().collect();
    0.5 * labels
        .iter()
        .map(|l| {
            let a = f_t.get(*l).copied().unwrap_or(0.0) / tot_t;
            let b = f_c.get(*l).copied().unwrap_or(0.0) / tot_c;
            (a - b).abs()
        })
        .sum::<f64>()
}

/// Quantile of weighted values at midpoint positions `(S_i - w_i/2) / W`,
/// linear between neighbors, clamped at the extremes. Entries with zero
/// weight are ignored.
pub fn weighted_quantile(pairs: &[(f64, f64)], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::BadQuantileLevel(q));
    }
    let mut vw: Vec<(f64, f64)> = pairs.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    if vw.is_empty() {
        return Err(Error::EmptyInput);
    }
    if vw.iter().any(|&(v, w)| !v.is_finite() || !w.is_finite()) {
        return Err(Error::NonFinite);
    }
    vw.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = vw.iter().map(|&(_, w)| w).sum();
    let mut cum = 0.0;
    let mut pos = Vec::with_capacity(vw.len());
    for &(v, w) in &vw {
        pos.push(((cum + 0.5 * w) / total, v));
        cum += w;
    }
    if q <= pos[0].0 {
        return Ok(pos[0].1);
    }
    if q >= pos[pos.len() - 1].0 {
        return Ok(pos[pos.len() - 1].1);
    }
    let k = pos.partition_point(|&(p, _)| p <= q);
    let (p0, v0) = pos[k - 1];
    let (p1, v1) = pos[k];
    if p1 == p0 {
        return Ok(v0);
    }
    Ok(v0 + (q - p0) / (p1 - p0) * (v1 - v0))
}

fn weighted_median(pairs: &[(f64, f64)]) -> Result<f64> {
    weighted_quantile(pairs, 0.5)
}

/// One metallicity bin of the matched age comparison.
#[derive(Debug, Clone)]
pub struct MatchedBin {
    pub center: f64,
    /// Weighted median age, treated minus control. None when either side is
    /// empty in the bin.
    pub delta: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_treated: usize,
    pub n_control: usize,
    /// Both sides have at least two weighted members.
    pub robust: bool,
}

/// Per-metallicity-bin weighted median age differences over the matched
/// sample, with stratified-bootstrap confidence intervals (resampling
/// within strata, keeping stratum sizes and weights fixed). Bins with a
/// thin side are flagged, never dropped.
pub fn matched_amr_delta(
    catalog: &Catalog,
    matched: &MatchResult,
    source: AgeSource,
    bin_width: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<MatchedBin>> {
    if !(bin_width > 0.0) {
        return Err(Error::NonPositive { what: "bin width", value: bin_width });
    }
    if reps < 100 {
        return Err(Error::Config(format!(
            "bootstrap replicate count must be at least 100, got {reps}"
        )));
    }

    let age_of = |row: usize| -> Option<f64> {
        let rec = &catalog.records()[row];
        match source {
            AgeSource::Infer => Some(rec.age_infer),
            AgeSource::Seismo => rec.age_seismo,
        }
    };

    // bin index for every matched record that has the requested age
    let bin_of = |row: usize| -> Option<i64> {
        age_of(row)?;
        let feh = catalog.records()[row].feh;
        Some((feh / bin_width).floor() as i64)
    };

    let mut bins: BTreeMap<i64, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
    for stratum in matched.strata.values() {
        for &r in &stratum.treated {
            if let (Some(b), Some(a)) = (bin_of(r), age_of(r)) {
                bins.entry(b).or_default().0.push((a, 1.0));
            }
        }
        for &r in &stratum.control {
            if let (Some(b), Some(a)) = (bin_of(r), age_of(r)) {
                bins.entry(b).or_default().1.push((a, stratum.control_weight));
            }
        }
    }
    if bins.is_empty() {
        return Err(Error::EmptyInput);
    }

    // replicate deltas per bin
    let mut rep_deltas: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        let mut bin_sides: BTreeMap<i64, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
        for stratum in matched.strata.values() {
            for _ in 0..stratum.treated.len() {
                let r = stratum.treated[rng.gen_range(0..stratum.treated.len())];
                if let (Some(b), Some(a)) = (bin_of(r), age_of(r)) {
                    bin_sides.entry(b).or_default().0.push((a, 1.0));
                }
            }
            for _ in 0..stratum.control.len() {
                let r = stratum.control[rng.gen_range(0..stratum.control.len())];
                if let (Some(b), Some(a)) = (bin_of(r), age_of(r)) {
                    bin_sides.entry(b).or_default().1.push((a, stratum.control_weight));
                }
            }
        }
        for (b, (t, c)) in &bin_sides {
            if !t.is_empty() && !c.is_empty() {
                let d = weighted_median(t)? - weighted_median(c)?;
                rep_deltas.entry(*b).or_default().push(d);
            }
        }
    }

    let mut out = Vec::new();
    for (b, (t, c)) in &bins {
        let center = (*b as f64 + 0.5) * bin_width;
        let n_t = t.len();
        let n_c = c.len();
        let delta = if !t.is_empty() && !c.is_empty() {
            Some(weighted_median(t)? - weighted_median(c)?)
        } else {
            None
        };
        let (ci_low, ci_high) = match rep_deltas.get(b) {
            Some(reps_b) if reps_b.len() >= 2 => {
                let lo = quantile(reps_b, 0.025)?;
                let hi = quantile(reps_b, 0.975)?;
                (Some(lo), Some(hi))
            }
            _ => (None, None),
        };
        out.push(MatchedBin {
            center,
            delta,
            ci_low,
            ci_high,
            n_treated: n_t,
            n_control: n_c,
            robust: n_t >= 2 && n_c >= 2,
        });
    }
    Ok(out)
}

/// Overall weighted median age difference (treated minus control) across
/// the matched sample, with a stratified-bootstrap scale.
pub fn matched_overall_delta(
    catalog: &Catalog,
    matched: &MatchResult,
    source: AgeSource,
    reps: usize,
    seed: u64,
) -> Result<Significance> {
    if reps < 100 {
        return Err(Error::Config(format!(
            "bootstrap replicate count must be at least 100, got {reps}"
        )));
    }
    let age_of = |row: usize| -> Option<f64> {
        let rec = &catalog.records()[row];
        match source {
            AgeSource::Infer => Some(rec.age_infer),
            AgeSource::Seismo => rec.age_seismo,
        }
    };

    let mut t_all = Vec::new();
    let mut c_all = Vec::new();
    for stratum in matched.strata.values() {
        for &r in &stratum.treated {
            if let Some(a) = age_of(r) {
                t_all.push((a, 1.0));
            }
        }
        for &r in &stratum.control {
            if let Some(a) = age_of(r) {
                c_all.push((a, stratum.control_weight));
            }
        }
    }
    if t_all.len() < 2 || c_all.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: t_all.len().min(c_all.len()) });
    }
    let delta = weighted_median(&t_all)? - weighted_median(&c_all)?;

    let mut rep_deltas = Vec::with_capacity(reps);
    let mut t_buf: Vec<(f64, f64)> = Vec::with_capacity(t_all.len());
    let mut c_buf: Vec<(f64, f64)> = Vec::with_capacity(c_all.len());
    for k in 0..reps {
        let mut rng = replicate_rng(seed, k);
        t_buf.clear();
        c_buf.clear();
        for stratum in matched.strata.values() {
            for _ in 0..stratum.treated.len() {
                let r = stratum.treated[rng.gen_range(0..stratum.treated.len())];
                if let Some(a) = age_of(r) {
                    t_buf.push((a, 1.0));
                }
            }
            for _ in 0..stratum.control.len() {
                let r = stratum.control[rng.gen_range(0..stratum.control.len())];
                if let Some(a) = age_of(r) {
                    c_buf.push((a, stratum.control_weight));
                }
            }
        }
        if t_buf.is_empty() || c_buf.is_empty() {
            continue;
        }
        rep_deltas.push(weighted_median(&t_buf)? - weighted_median(&c_buf)?);
    }
    if rep_deltas.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: rep_deltas.len() });
    }
    let se = crate::stats::quantile(&rep_deltas, 0.5).map(|_| {
        let n = rep_deltas.len() as f64;
        let mean = rep_deltas.iter().sum::<f64>() / n;
        (rep_deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    })?;
    Ok(significance_lenient(delta, se))
}
