//! Catalog ingestion and sample selection.
//!
//! Input files are delimited text with a header row. Physical column names
//! are remapped to the fields below through a schema file, so the loader
//! never assumes a survey's naming. A catalog is immutable once loaded and
//! keeps its input row order.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// One star. Ages in Gyr, temperatures in K, distances in kpc.
#[derive(Debug, Clone, PartialEq)]
pub struct StarRecord {
    pub id: String,
    pub teff: f64,
    pub logg: f64,
    pub feh: f64,
    pub alpha_fe: f64,
    pub snr: f64,
    pub plx: f64,
    pub plx_err: f64,
    pub distance: f64,
    pub gal_r: f64,
    pub gal_z: f64,
    /// Age from the indirect inference pipeline.
    pub age_infer: f64,
    /// Independent age, present for the seismic subsample only.
    pub age_seismo: Option<f64>,
}

impl StarRecord {
    /// Parallax signal-to-noise. The loader guarantees `plx_err > 0`, but a
    /// hand-built record may not, so the check stays.
    pub fn plx_snr(&self) -> Result<f64> {
        if !(self.plx_err > 0.0) {
            return Err(Error::BadRecord {
                id: self.id.clone(),
                reason: format!("parallax error must be positive, got {}", self.plx_err),
            });
        }
        Ok(self.plx / self.plx_err)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let finite = [
            ("teff", self.teff),
            ("logg", self.logg),
            ("feh", self.feh),
            ("alpha_fe", self.alpha_fe),
            ("snr", self.snr),
            ("plx", self.plx),
            ("plx_err", self.plx_err),
            ("distance", self.distance),
            ("gal_r", self.gal_r),
            ("gal_z", self.gal_z),
            ("age_infer", self.age_infer),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !(self.plx_err > 0.0) {
            return Err(format!("plx_err must be positive, got {}", self.plx_err));
        }
        if self.snr < 0.0 {
            return Err(format!("snr must be non-negative, got {}", self.snr));
        }
        if !(self.age_infer > 0.0 && self.age_infer <= 20.0) {
            return Err(format!("age_infer {} outside (0, 20]", self.age_infer));
        }
        if let Some(a) = self.age_seismo {
            if !a.is_finite() || !(a > 0.0 && a <= 20.0) {
                return Err(format!("age_seismo {a} outside (0, 20]"));
            }
        }
        if !(-3.0..=1.0).contains(&self.feh) {
            return Err(format!("feh {} outside [-3, 1]", self.feh));
        }
        Ok(())
    }
}

pub const FIELD_NAMES: [&str; 13] = [
    "id", "teff", "logg", "feh", "alpha_fe", "snr", "plx", "plx_err", "distance", "gal_r",
    "gal_z", "age_infer", "age_seismo",
];

/// Maps the fields above to column names in a particular input file.
#[derive(Debug, Clone, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub teff: String,
    pub logg: String,
    pub feh: String,
    pub alpha_fe: String,
    pub snr: String,
    pub plx: String,
    pub plx_err: String,
    pub distance: String,
    pub gal_r: String,
    pub gal_z: String,
    pub age_infer: String,
    /// Omit when the file carries no independent ages.
    pub age_seismo: Option<String>,
}

impl ColumnMap {
    /// Column names equal to field names, as written by [`Catalog::write_csv`].
    pub fn identity() -> Self {
        ColumnMap {
            id: "id".into(),
            teff: "teff".into(),
            logg: "logg".into(),
            feh: "feh".into(),
            alpha_fe: "alpha_fe".into(),
            snr: "snr".into(),
            plx: "plx".into(),
            plx_err: "plx_err".into(),
            distance: "distance".into(),
            gal_r: "gal_r".into(),
            gal_z: "gal_z".into(),
            age_infer: "age_infer".into(),
            age_seismo: Some("age_seismo".into()),
        }
    }
}

/// Sample cuts. Ranges are closed on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct QualityCuts {
    pub snr_min: f64,
    pub plx_snr_min: f64,
    pub teff_range: (f64, f64),
    pub logg_range: (f64, f64),
}

impl QualityCuts {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.snr_min,
            self.plx_snr_min,
            self.teff_range.0,
            self.teff_range.1,
            self.logg_range.0,
            self.logg_range.1,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("quality cuts must be finite".into()));
        }
        if self.teff_range.0 > self.teff_range.1 || self.logg_range.0 > self.logg_range.1 {
            return Err(Error::Config("quality cut range is empty (low > high)".into()));
        }
        Ok(())
    }

    pub fn passes(&self, rec: &StarRecord) -> bool {
        let plx_snr = match rec.plx_snr() {
            Ok(v) => v,
            Err(_) => return false,
        };
        rec.snr >= self.snr_min
            && plx_snr >= self.plx_snr_min
            && rec.teff >= self.teff_range.0
            && rec.teff <= self.teff_range.1
            && rec.logg >= self.logg_range.0
            && rec.logg <= self.logg_range.1
    }
}

/// Schema file: delimiter, column mapping, and optionally the baseline and
/// high-quality cuts used by downstream commands.
#[derive(Debug, Clone, Deserialize)]
pub struct Schema {
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    pub columns: ColumnMap,
    pub cuts: Option<QualityCuts>,
    pub hq_cuts: Option<QualityCuts>,
}

fn default_delimiter() -> String {
    ",".into()
}

impl Schema {
    pub fn identity() -> Self {
        Schema {
            delimiter: ",".into(),
            columns: ColumnMap::identity(),
            cuts: None,
            hq_cuts: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = toml::from_str(&text)
            .map_err(|e| Error::BadFile { path: path.into(), reason: e.to_string() })?;
        schema.delimiter_byte()?;
        if let Some(c) = &schema.cuts {
            c.validate()?;
        }
        if let Some(c) = &schema.hq_cuts {
            c.validate()?;
        }
        Ok(schema)
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_str() {
            "," => Ok(b','),
            "\t" | "tab" => Ok(b'\t'),
            other => Err(Error::Config(format!(
                "delimiter must be \",\" or \"tab\", got {other:?}"
            ))),
        }
    }
}

/// How to treat rows that fail parsing or validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowPolicy {
    /// Abort on the first bad row, naming its line number.
    Strict,
    /// Skip bad rows and count them.
    Lenient,
}

/// Outcome of a load: the catalog plus what was skipped.
#[derive(Debug)]
pub struct LoadReport {
    pub catalog: Catalog,
    pub n_loaded: usize,
    pub n_skipped: usize,
}

/// Immutable, ordered star catalog with id lookup.
#[derive(Debug, Clone)]
pub struct Catalog {
    records: Vec<StarRecord>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    /// Build from records, enforcing id uniqueness.
    pub fn new(records: Vec<StarRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (idx, rec) in records.iter().enumerate() {
            if by_id.insert(rec.id.clone(), idx).is_some() {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
        }
        Ok(Catalog { records, by_id })
    }

    pub fn records(&self) -> &[StarRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&StarRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Load a delimited file through a schema.
    pub fn load(path: &Path, schema: &Schema, policy: RowPolicy) -> Result<LoadReport> {
        let delim = schema.delimiter_byte()?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delim)
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::BadFile { path: path.into(), reason: e.to_string() })?;

        let headers = reader
            .headers()
            .map_err(|e| Error::BadFile { path: path.into(), reason: e.to_string() })?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };

        let m = &schema.columns;
        let idx_id = col(&m.id)?;
        let idx = [
            col(&m.teff)?,
            col(&m.logg)?,
            col(&m.feh)?,
            col(&m.alpha_fe)?,
            col(&m.snr)?,
            col(&m.plx)?,
            col(&m.plx_err)?,
            col(&m.distance)?,
            col(&m.gal_r)?,
            col(&m.gal_z)?,
            col(&m.age_infer)?,
        ];
        let idx_seismo = match &m.age_seismo {
            Some(name) => Some(col(name)?),
            None => None,
        };

        let mut records = Vec::new();
        let mut by_id: HashMap<String, usize> = HashMap::new();
        let mut skipped = 0usize;

        for row in reader.records() {
            let row = row.map_err(|e| Error::BadFile { path: path.into(), reason: e.to_string() })?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            match parse_row(&row, idx_id, &idx, idx_seismo) {
                Ok(rec) => {
                    if by_id.contains_key(&rec.id) {
                        match policy {
                            RowPolicy::Strict => return Err(Error::DuplicateId(rec.id)),
                            RowPolicy::Lenient => {
                                skipped += 1;
                                continue;
                            }
                        }
                    }
                    by_id.insert(rec.id.clone(), records.len());
                    records.push(rec);
                }
                Err(reason) => match policy {
                    RowPolicy::Strict => return Err(Error::BadRow { line, reason }),
                    RowPolicy::Lenient => skipped += 1,
                },
            }
        }

        let n_loaded = records.len();
        Ok(LoadReport { catalog: Catalog { records, by_id }, n_loaded, n_skipped: skipped })
    }

    /// Write with canonical column names; readable back via the identity
    /// schema. Floats use the shortest round-trip form, so a load of the
    /// output reproduces every value bit for bit.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&FIELD_NAMES.join(","));
        out.push('\n');
        for r in &self.records {
            let seismo = r.age_seismo.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.id, r.teff, r.logg, r.feh, r.alpha_fe, r.snr, r.plx, r.plx_err, r.distance,
                r.gal_r, r.gal_z, r.age_infer, seismo
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Records passing the cuts, in input order.
    pub fn apply_cuts(&self, cuts: &QualityCuts) -> Result<Vec<usize>> {
        cuts.validate()?;
        Ok((0..self.records.len())
            .filter(|&i| cuts.passes(&self.records[i]))
            .collect())
    }

    /// Split into a high-quality subsample and its complement. The HQ cuts
    /// must be at least as strict as the baseline on both thresholds.
    pub fn select_hq(&self, base: &QualityCuts, hq: &QualityCuts) -> Result<HqSplit> {
        base.validate()?;
        hq.validate()?;
        if hq.snr_min < base.snr_min || hq.plx_snr_min < base.plx_snr_min {
            return Err(Error::Config(
                "high-quality cuts must be at least as strict as the baseline".into(),
            ));
        }
        let base_rows = self.apply_cuts(base)?;
        let mut hq_rows = Vec::new();
        let mut lq_rows = Vec::new();
        for i in base_rows {
            if hq.passes(&self.records[i]) {
                hq_rows.push(i);
            } else {
                lq_rows.push(i);
            }
        }
        Ok(HqSplit { hq: hq_rows, lq: lq_rows })
    }

    /// Ages of the given rows from one source. Rows without a seismic age
    /// are dropped when that source is selected.
    pub fn ages(&self, rows: &[usize], source: AgeSource) -> Vec<f64> {
        match source {
            AgeSource::Infer => rows.iter().map(|&i| self.records[i].age_infer).collect(),
            AgeSource::Seismo => rows
                .iter()
                .filter_map(|&i| self.records[i].age_seismo)
                .collect(),
        }
    }

    /// Rows holding both an inferred and a seismic age.
    pub fn truth_rows(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter()
            .copied()
            .filter(|&i| self.records[i].age_seismo.is_some())
            .collect()
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.records.len()).collect()
    }
}

/// Which age column an analysis reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeSource {
    Infer,
    Seismo,
}

impl AgeSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "infer" => Ok(AgeSource::Infer),
            "seismo" => Ok(AgeSource::Seismo),
            other => Err(Error::Config(format!("unknown age source {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgeSource::Infer => "infer",
            AgeSource::Seismo => "seismo",
        }
    }
}

/// Result of [`Catalog::select_hq`]: row indices of each half.
#[derive(Debug, Clone)]
pub struct HqSplit {
    pub hq: Vec<usize>,
    pub lq: Vec<usize>,
}

fn parse_row(
    row: &csv::StringRecord,
    idx_id: usize,
    idx: &[usize; 11],
    idx_seismo: Option<usize>,
) -> std::result::Result<StarRecord, String> {
    let field = |i: usize| row.get(i).unwrap_or("");
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let raw = field(i).trim();
        raw.parse::<f64>()
            .map_err(|_| format!("column {name}: cannot parse {raw:?} as a number"))
    };

    let age_seismo = match idx_seismo {
        Some(i) => {
            let raw = field(i).trim();
            if raw.is_empty() {
                None
            } else {
                Some(raw.parse::<f64>().map_err(|_| {
                    format!("column age_seismo: cannot parse {raw:?} as a number")
                })?)
            }
        }
        None => None,
    };

    let rec = StarRecord {
        id: field(idx_id).trim().to_string(),
        teff: num(idx[0], "teff")?,
        logg: num(idx[1], "logg")?,
        feh: num(idx[2], "feh")?,
        alpha_fe: num(idx[3], "alpha_fe")?,
        snr: num(idx[4], "snr")?,
        plx: num(idx[5], "plx")?,
        plx_err: num(idx[6], "plx_err")?,
        distance: num(idx[7], "distance")?,
        gal_r: num(idx[8], "gal_r")?,
        gal_z: num(idx[9], "gal_z")?,
        age_infer: num(idx[10], "age_infer")?,
        age_seismo,
    };
    rec.validate()?;
    Ok(rec)
}
