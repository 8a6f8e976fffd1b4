//! Input tables: serology bins, death bins, assay validation counts, location
//! assignments and binned population counts.
//!
//! Age bins are written in files as integer labels `(age_lo, age_hi)` in
//! completed years. A label pair maps to the half-open interval
//! `[age_lo, age_hi + 1)`; an empty `age_hi` is an open-ended top bin that
//! runs to [`AGE_CEILING`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Oldest age represented by any density or integral.
pub const AGE_CEILING: u32 = 100;

pub const SEROLOGY_FILE: &str = "serology.csv";
pub const DEATHS_FILE: &str = "deaths.csv";
pub const TESTS_FILE: &str = "tests.csv";
pub const LOCATIONS_FILE: &str = "locations.csv";
pub const POPULATION_FILE: &str = "population.csv";
pub const NATIONAL_POPULATION_FILE: &str = "national_population.csv";

const IN_MEMORY: &str = "<dataset>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing input file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{file}: cannot read: {message}")]
    Io { file: String, message: String },
    #[error("{file}: row {row}, column `{column}`: {message}")]
    SchemaViolation {
        file: String,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{file}: row {row}: {message}")]
    ReferentialIntegrity {
        file: String,
        row: usize,
        message: String,
    },
    #[error("{file}: row {row}: location `{location}` has overlapping bins {first} and {second}")]
    BinOverlap {
        file: String,
        row: usize,
        location: String,
        first: AgeBin,
        second: AgeBin,
    },
    #[error("{file}: location `{location}`: {message}")]
    Coverage {
        file: String,
        location: String,
        message: String,
    },
    #[error("{file}: row {row}: {message}")]
    CountViolation {
        file: String,
        row: usize,
        message: String,
    },
}

/// An age interval `[lo, hi)`, or `[lo, 100]` when open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgeBin {
    lo: u32,
    hi: u32,
    open: bool,
}

impl AgeBin {
    /// Half-open interval `[lo, hi)` in years.
    pub fn span(lo: u32, hi: u32) -> Result<Self, String> {
        if lo >= hi {
            return Err(format!("bin start {lo} must be below bin end {hi}"));
        }
        if hi > AGE_CEILING {
            return Err(format!("bin end {hi} exceeds the age ceiling {AGE_CEILING}"));
        }
        Ok(Self { lo, hi, open: false })
    }

    /// Open-ended bin `lo+`, resolved to `[lo, 100]`.
    pub fn open(lo: u32) -> Result<Self, String> {
        if lo >= AGE_CEILING {
            return Err(format!("open bin start {lo} must be below {AGE_CEILING}"));
        }
        Ok(Self {
            lo,
            hi: AGE_CEILING,
            open: true,
        })
    }

    /// Bin from file labels: `(lo, Some(hi))` is `[lo, hi + 1)`, `(lo, None)` is open.
    pub fn from_labels(lo: u32, hi: Option<u32>) -> Result<Self, String> {
        match hi {
            Some(hi) if hi < lo => Err(format!("age_hi {hi} is below age_lo {lo}")),
            Some(hi) => Self::span(lo, hi + 1),
            None => Self::open(lo),
        }
    }

    /// Inverse of [`AgeBin::from_labels`].
    pub fn labels(&self) -> (u32, Option<u32>) {
        if self.open {
            (self.lo, None)
        } else {
            (self.lo, Some(self.hi - 1))
        }
    }

    pub fn start(&self) -> f64 {
        f64::from(self.lo)
    }

    pub fn end(&self) -> f64 {
        f64::from(self.hi)
    }

    pub fn lo(&self) -> u32 {
        self.lo
    }

    pub fn hi(&self) -> u32 {
        self.hi
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn width(&self) -> f64 {
        self.end() - self.start()
    }

    /// Integer ages `a` with `lo <= a < hi`.
    pub fn integer_ages(&self) -> std::ops::Range<u32> {
        self.lo..self.hi
    }

    pub fn overlaps(&self, other: &AgeBin) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }
}

impl fmt::Display for AgeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.open {
            write!(f, "[{},{}]", self.lo, self.hi)
        } else {
            write!(f, "[{},{})", self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerologyBinObs {
    pub bin: AgeBin,
    pub n_tested: u64,
    pub n_positive: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeathBinObs {
    pub bin: AgeBin,
    pub deaths: u64,
}

/// Lab validation counts for one antibody assay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestValidation {
    pub test_id: String,
    pub n_sens: u64,
    pub x_sens: u64,
    pub n_spec: u64,
    pub x_spec: u64,
}

impl TestValidation {
    fn check(&self) -> Result<(), String> {
        if self.n_sens == 0 || self.n_spec == 0 {
            return Err(format!(
                "test `{}` needs at least one positive and one negative control",
                self.test_id
            ));
        }
        if self.x_sens > self.n_sens {
            return Err(format!(
                "test `{}`: x_sens {} exceeds n_sens {}",
                self.test_id, self.x_sens, self.n_sens
            ));
        }
        if self.x_spec > self.n_spec {
            return Err(format!(
                "test `{}`: x_spec {} exceeds n_spec {}",
                self.test_id, self.x_spec, self.n_spec
            ));
        }
        Ok(())
    }
}

/// Plug-in sensitivity and specificity, `x_sens / n_sens` and `x_spec / n_spec`.
pub fn crude_rates(v: &TestValidation) -> (f64, f64) {
    (
        v.x_sens as f64 / v.n_sens as f64,
        v.x_spec as f64 / v.n_spec as f64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub location_id: String,
    pub country_id: String,
    pub test_id: String,
    pub total_population: f64,
    pub serology: Vec<SerologyBinObs>,
    pub deaths: Vec<DeathBinObs>,
    pub population_bins: Vec<(AgeBin, f64)>,
}

impl LocationRecord {
    /// Population proportions per bin.
    pub fn population_proportions(&self) -> Vec<(AgeBin, f64)> {
        self.population_bins
            .iter()
            .map(|&(bin, count)| (bin, count / self.total_population))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDataset {
    pub locations: Vec<LocationRecord>,
    pub tests: Vec<TestValidation>,
    pub national_populations: BTreeMap<String, Vec<(AgeBin, f64)>>,
}

impl StudyDataset {
    /// Validates an in-memory dataset and normalizes bin order within each
    /// location. `total_population` is recomputed from the population bins.
    pub fn new(
        mut locations: Vec<LocationRecord>,
        tests: Vec<TestValidation>,
        mut national_populations: BTreeMap<String, Vec<(AgeBin, f64)>>,
    ) -> Result<Self, DataError> {
        for loc in &mut locations {
            loc.serology.sort_by_key(|o| o.bin);
            loc.deaths.sort_by_key(|o| o.bin);
            loc.population_bins.sort_by_key(|b| b.0);
            loc.total_population = loc.population_bins.iter().map(|b| b.1).sum();
        }
        for bins in national_populations.values_mut() {
            bins.sort_by_key(|b| b.0);
        }
        let ds = Self {
            locations,
            tests,
            national_populations,
        };
        ds.validate(IN_MEMORY)?;
        Ok(ds)
    }

    pub fn test_index(&self, test_id: &str) -> Option<usize> {
        self.tests.iter().position(|t| t.test_id == test_id)
    }

    /// Countries referenced by locations, in sorted order.
    pub fn countries(&self) -> Vec<String> {
        self.locations
            .iter()
            .map(|l| l.country_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn location_index(&self, location_id: &str) -> Option<usize> {
        self.locations.iter().position(|l| l.location_id == location_id)
    }

    fn validate(&self, file: &str) -> Result<(), DataError> {
        let mut seen = HashMap::new();
        for (i, t) in self.tests.iter().enumerate() {
            if seen.insert(t.test_id.as_str(), i).is_some() {
                return Err(DataError::SchemaViolation {
                    file: file.into(),
                    row: i + 1,
                    column: "test_id".into(),
                    message: format!("duplicate test_id `{}`", t.test_id),
                });
            }
            t.check().map_err(|message| DataError::CountViolation {
                file: file.into(),
                row: i + 1,
                message,
            })?;
        }
        for (country, bins) in &self.national_populations {
            let rows: Vec<_> = bins.iter().enumerate().map(|(i, b)| (i + 1, b.0)).collect();
            check_disjoint(file, country, &rows)?;
            check_full_coverage(file, country, &rows, "national population")?;
            check_population_counts(file, bins)?;
        }
        let mut seen = HashSet::new();
        for (i, loc) in self.locations.iter().enumerate() {
            if !seen.insert(loc.location_id.as_str()) {
                return Err(DataError::SchemaViolation {
                    file: file.into(),
                    row: i + 1,
                    column: "location_id".into(),
                    message: format!("duplicate location_id `{}`", loc.location_id),
                });
            }
            if self.test_index(&loc.test_id).is_none() {
                return Err(DataError::ReferentialIntegrity {
                    file: file.into(),
                    row: i + 1,
                    message: format!(
                        "location `{}` uses unknown test_id `{}`",
                        loc.location_id, loc.test_id
                    ),
                });
            }
            if !self.national_populations.contains_key(&loc.country_id) {
                return Err(DataError::ReferentialIntegrity {
                    file: file.into(),
                    row: i + 1,
                    message: format!(
                        "country `{}` of location `{}` has no national population table",
                        loc.country_id, loc.location_id
                    ),
                });
            }
            for (j, obs) in loc.serology.iter().enumerate() {
                check_serology_counts(file, j + 1, obs)?;
            }
            let rows: Vec<_> = loc.serology.iter().enumerate().map(|(j, o)| (j + 1, o.bin)).collect();
            check_disjoint(file, &loc.location_id, &rows)?;
            let rows: Vec<_> = loc.deaths.iter().enumerate().map(|(j, o)| (j + 1, o.bin)).collect();
            check_disjoint(file, &loc.location_id, &rows)?;
            if !rows.is_empty() {
                check_full_coverage(file, &loc.location_id, &rows, "death")?;
            }
            let rows: Vec<_> = loc
                .population_bins
                .iter()
                .enumerate()
                .map(|(j, b)| (j + 1, b.0))
                .collect();
            check_disjoint(file, &loc.location_id, &rows)?;
            check_full_coverage(file, &loc.location_id, &rows, "population")?;
            check_population_counts(file, &loc.population_bins)?;
            if loc.total_population <= 0.0 {
                return Err(DataError::CountViolation {
                    file: file.into(),
                    row: i + 1,
                    message: format!("location `{}` has zero total population", loc.location_id),
                });
            }
        }
        Ok(())
    }
}


fn check_serology_counts(file: &str, row: usize, obs: &SerologyBinObs) -> Result<(), DataError> {
    if obs.n_tested == 0 {
        return Err(DataError::CountViolation {
            file: file.into(),
            row,
            message: "n_tested must be at least 1".into(),
        });
    }
    if obs.n_positive > obs.n_tested {
        return Err(DataError::CountViolation {
            file: file.into(),
            row,
            message: format!(
                "n_positive {} exceeds n_tested {}",
                obs.n_positive, obs.n_tested
            ),
        });
    }
    Ok(())
}

fn check_population_counts(file: &str, bins: &[(AgeBin, f64)]) -> Result<(), DataError> {
    for (i, &(bin, count)) in bins.iter().enumerate() {
        if !count.is_finite() || count < 0.0 {
            return Err(DataError::CountViolation {
                file: file.into(),
                row: i + 1,
                message: format!("population count {count} for bin {bin} is not a nonnegative number"),
            });
        }
    }
    Ok(())
}

/// `rows` pairs a citation row with each bin; bins need not be sorted.
fn check_disjoint(file: &str, location: &str, rows: &[(usize, AgeBin)]) -> Result<(), DataError> {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.1);
    for pair in sorted.windows(2) {
        if pair[0].1.overlaps(&pair[1].1) {
            return Err(DataError::BinOverlap {
                file: file.into(),
                row: pair[0].0.max(pair[1].0),
                location: location.into(),
                first: pair[0].1,
                second: pair[1].1,
            });
        }
    }
    Ok(())
}

/// Bins must tile `[0, 100]` with no gaps. Assumes disjointness was checked.
fn check_full_coverage(
    file: &str,
    location: &str,
    rows: &[(usize, AgeBin)],
    what: &str,
) -> Result<(), DataError> {
    let mut bins: Vec<AgeBin> = rows.iter().map(|r| r.1).collect();
    bins.sort();
    let mut cursor = 0;
    for bin in &bins {
        if bin.lo() != cursor {
            return Err(DataError::Coverage {
                file: file.into(),
                location: location.into(),
                message: format!("{what} bins leave ages [{cursor},{}) uncovered", bin.lo()),
            });
        }
        cursor = bin.hi();
    }
    if cursor != AGE_CEILING {
        return Err(DataError::Coverage {
            file: file.into(),
            location: location.into(),
            message: format!("{what} bins stop at age {cursor}, expected {AGE_CEILING}"),
        });
    }
    Ok(())
}

/// Locations of the six input tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub serology: PathBuf,
    pub deaths: PathBuf,
    pub tests: PathBuf,
    pub locations: PathBuf,
    pub population: PathBuf,
    pub national_population: PathBuf,
}

impl DatasetPaths {
    /// The standard file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            serology: dir.join(SEROLOGY_FILE),
            deaths: dir.join(DEATHS_FILE),
            tests: dir.join(TESTS_FILE),
            locations: dir.join(LOCATIONS_FILE),
            population: dir.join(POPULATION_FILE),
            national_population: dir.join(NATIONAL_POPULATION_FILE),
        }
    }
}

struct Table {
    file: String,
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path, required: &[&str]) -> Result<Self, DataError> {
        let file = path.display().to_string();
        if !path.exists() {
            return Err(DataError::MissingFile(path.to_path_buf()));
        }
        let handle = File::open(path).map_err(|e| DataError::Io {
            file: file.clone(),
            message: e.to_string(),
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(handle);
        let headers = reader.headers().map_err(|e| DataError::Io {
            file: file.clone(),
            message: e.to_string(),
        })?;
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(DataError::SchemaViolation {
                    file,
                    row: 1,
                    column: (*col).into(),
                    message: "required column missing from header".into(),
                });
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| DataError::SchemaViolation {
                file: file.clone(),
                row: i + 2,
                column: String::new(),
                message: e.to_string(),
            })?;
            rows.push(rec);
        }
        Ok(Self { file, columns, rows })
    }

    /// Iterates `(file row number, record)`; the header is row 1.
    fn records(&self) -> impl Iterator<Item = (usize, &csv::StringRecord)> {
        self.rows.iter().enumerate().map(|(i, r)| (i + 2, r))
    }

    fn field<'a>(&self, rec: &'a csv::StringRecord, row: usize, col: &str) -> Result<&'a str, DataError> {
        rec.get(self.columns[col]).ok_or_else(|| DataError::SchemaViolation {
            file: self.file.clone(),
            row,
            column: col.into(),
            message: "field missing".into(),
        })
    }

    fn id(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<String, DataError> {
        let v = self.field(rec, row, col)?;
        if v.is_empty() {
            return Err(self.violation(row, col, "identifier must not be empty"));
        }
        Ok(v.to_string())
    }

    fn count(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<u64, DataError> {
        let v = self.field(rec, row, col)?;
        v.parse::<u64>()
            .map_err(|_| self.violation(row, col, &format!("`{v}` is not a nonnegative integer")))
    }

    fn real(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<f64, DataError> {
        let v = self.field(rec, row, col)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
            _ => Err(self.violation(row, col, &format!("`{v}` is not a nonnegative number"))),
        }
    }

    fn bin(&self, rec: &csv::StringRecord, row: usize) -> Result<AgeBin, DataError> {
        let lo = self.field(rec, row, "age_lo")?;
        let lo: u32 = lo
            .parse()
            .map_err(|_| self.violation(row, "age_lo", &format!("`{lo}` is not an integer age")))?;
        let hi = self.field(rec, row, "age_hi")?;
        let hi = if hi.is_empty() {
            None
        } else {
            Some(hi.parse::<u32>().map_err(|_| {
                self.violation(row, "age_hi", &format!("`{hi}` is not an integer age"))
            })?)
        };
        AgeBin::from_labels(lo, hi).map_err(|m| self.violation(row, "age_hi", &m))
    }

    fn violation(&self, row: usize, col: &str, message: &str) -> DataError {
        DataError::SchemaViolation {
            file: self.file.clone(),
            row,
            column: col.into(),
            message: message.into(),
        }
    }

    fn unknown(&self, row: usize, message: String) -> DataError {
        DataError::ReferentialIntegrity {
            file: self.file.clone(),
            row,
            message,
        }
    }
}

const BIN_COLUMNS: [&str; 2] = ["age_lo", "age_hi"];

fn with_bins(extra: &[&'static str], id: &'static str) -> Vec<&'static str> {
    let mut cols = vec![id];
    cols.extend(BIN_COLUMNS);
    cols.extend(extra);
    cols
}

/// Reads, validates and assembles the six input tables.
pub fn load_dataset(paths: &DatasetPaths) -> Result<StudyDataset, DataError> {
    let tests_t = Table::read(&paths.tests, &["test_id", "n_sens", "x_sens", "n_spec", "x_spec"])?;
    let locations_t = Table::read(&paths.locations, &["location_id", "country_id", "test_id"])?;
    let serology_t = Table::read(&paths.serology, &with_bins(&["n_tested", "n_positive"], "location_id"))?;
    let deaths_t = Table::read(&paths.deaths, &with_bins(&["deaths"], "location_id"))?;
    let population_t = Table::read(&paths.population, &with_bins(&["count"], "location_id"))?;
    let national_t = Table::read(&paths.national_population, &with_bins(&["count"], "country_id"))?;

    let mut tests = Vec::new();
    let mut test_ids = HashSet::new();
    for (row, rec) in tests_t.records() {
        let t = TestValidation {
            test_id: tests_t.id(rec, row, "test_id")?,
            n_sens: tests_t.count(rec, row, "n_sens")?,
            x_sens: tests_t.count(rec, row, "x_sens")?,
            n_spec: tests_t.count(rec, row, "n_spec")?,
            x_spec: tests_t.count(rec, row, "x_spec")?,
        };
        if !test_ids.insert(t.test_id.clone()) {
            return Err(tests_t.violation(row, "test_id", &format!("duplicate test_id `{}`", t.test_id)));
        }
        t.check().map_err(|message| DataError::CountViolation {
            file: tests_t.file.clone(),
            row,
            message,
        })?;
        tests.push(t);
    }

    let mut national: BTreeMap<String, Vec<(usize, AgeBin, f64)>> = BTreeMap::new();
    for (row, rec) in national_t.records() {
        let country = national_t.id(rec, row, "country_id")?;
        let bin = national_t.bin(rec, row)?;
        let count = national_t.real(rec, row, "count")?;
        national.entry(country).or_default().push((row, bin, count));
    }
    for (country, rows) in &national {
        let cited: Vec<_> = rows.iter().map(|r| (r.0, r.1)).collect();
        check_disjoint(&national_t.file, country, &cited)?;
        check_full_coverage(&national_t.file, country, &cited, "national population")?;
    }

    let mut locations = Vec::new();
    let mut index = HashMap::new();
    for (row, rec) in locations_t.records() {
        let location_id = locations_t.id(rec, row, "location_id")?;
        let country_id = locations_t.id(rec, row, "country_id")?;
        let test_id = locations_t.id(rec, row, "test_id")?;
        if index.contains_key(&location_id) {
            return Err(locations_t.violation(
                row,
                "location_id",
                &format!("duplicate location_id `{location_id}`"),
            ));
        }
        if !test_ids.contains(&test_id) {
            return Err(locations_t.unknown(row, format!("unknown test_id `{test_id}`")));
        }
        if !national.contains_key(&country_id) {
            return Err(locations_t.unknown(
                row,
                format!("country_id `{country_id}` has no rows in the national population table"),
            ));
        }
        index.insert(location_id.clone(), locations.len());
        locations.push(LocationRecord {
            location_id,
            country_id,
            test_id,
            total_population: 0.0,
            serology: Vec::new(),
            deaths: Vec::new(),
            population_bins: Vec::new(),
        });
    }
    let n = locations.len();
    let lookup = |t: &Table, row: usize, rec: &csv::StringRecord| -> Result<usize, DataError> {
        let id = t.id(rec, row, "location_id")?;
        index
            .get(&id)
            .copied()
            .ok_or_else(|| t.unknown(row, format!("unknown location_id `{id}`")))
    };

    let mut sero_rows = vec![Vec::new(); n];
    for (row, rec) in serology_t.records() {
        let li = lookup(&serology_t, row, rec)?;
        let obs = SerologyBinObs {
            bin: serology_t.bin(rec, row)?,
            n_tested: serology_t.count(rec, row, "n_tested")?,
            n_positive: serology_t.count(rec, row, "n_positive")?,
        };
        check_serology_counts(&serology_t.file, row, &obs)?;
        sero_rows[li].push((row, obs));
    }
    let mut death_rows = vec![Vec::new(); n];
    for (row, rec) in deaths_t.records() {
        let li = lookup(&deaths_t, row, rec)?;
        let obs = DeathBinObs {
            bin: deaths_t.bin(rec, row)?,
            deaths: deaths_t.count(rec, row, "deaths")?,
        };
        death_rows[li].push((row, obs));
    }
    let mut pop_rows = vec![Vec::new(); n];
    for (row, rec) in population_t.records() {
        let li = lookup(&population_t, row, rec)?;
        let bin = population_t.bin(rec, row)?;
        let count = population_t.real(rec, row, "count")?;
        pop_rows[li].push((row, bin, count));
    }

    for (li, loc) in locations.iter_mut().enumerate() {
        let id = loc.location_id.clone();
        let cited: Vec<_> = sero_rows[li].iter().map(|r| (r.0, r.1.bin)).collect();
        check_disjoint(&serology_t.file, &id, &cited)?;
        let cited: Vec<_> = death_rows[li].iter().map(|r| (r.0, r.1.bin)).collect();
        check_disjoint(&deaths_t.file, &id, &cited)?;
        if !cited.is_empty() {
            check_full_coverage(&deaths_t.file, &id, &cited, "death")?;
        }
        let cited: Vec<_> = pop_rows[li].iter().map(|r| (r.0, r.1)).collect();
        if cited.is_empty() {
            return Err(DataError::Coverage {
                file: population_t.file.clone(),
                location: id,
                message: "no population rows".into(),
            });
        }
        check_disjoint(&population_t.file, &id, &cited)?;
        check_full_coverage(&population_t.file, &id, &cited, "population")?;
        loc.serology = sero_rows[li].iter().map(|r| r.1).collect();
        loc.deaths = death_rows[li].iter().map(|r| r.1).collect();
        loc.population_bins = pop_rows[li].iter().map(|r| (r.1, r.2)).collect();
    }

    let national = national
        .into_iter()
        .map(|(c, rows)| (c, rows.into_iter().map(|r| (r.1, r.2)).collect()))
        .collect();
    StudyDataset::new(locations, tests, national)
}

fn bin_fields(bin: &AgeBin) -> [String; 2] {
    let (lo, hi) = bin.labels();
    [lo.to_string(), hi.map(|h| h.to_string()).unwrap_or_default()]
}

fn write_csv<F>(path: &Path, header: &[&str], mut fill: F) -> Result<(), DataError>
where
    F: FnMut(&mut csv::Writer<File>) -> csv::Result<()>,
{
    let io = |e: &dyn fmt::Display| DataError::Io {
        file: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(header).map_err(|e| io(&e))?;
    fill(&mut w).map_err(|e| io(&e))?;
    w.flush().map_err(|e| io(&e))
}

/// Writes the dataset back out in the input schemas.
pub fn write_dataset(ds: &StudyDataset, paths: &DatasetPaths) -> Result<(), DataError> {
    write_csv(&paths.tests, &["test_id", "n_sens", "x_sens", "n_spec", "x_spec"], |w| {
        for t in &ds.tests {
            w.write_record([
                t.test_id.clone(),
                t.n_sens.to_string(),
                t.x_sens.to_string(),
                t.n_spec.to_string(),
                t.x_spec.to_string(),
            ])?;
        }
        Ok(())
    })?;
    write_csv(&paths.locations, &["location_id", "country_id", "test_id"], |w| {
        for l in &ds.locations {
            w.write_record([&l.location_id, &l.country_id, &l.test_id])?;
        }
        Ok(())
    })?;
    write_csv(
        &paths.serology,
        &["location_id", "age_lo", "age_hi", "n_tested", "n_positive"],
        |w| {
            for l in &ds.locations {
                for o in &l.serology {
                    let [lo, hi] = bin_fields(&o.bin);
                    w.write_record([
                        l.location_id.clone(),
                        lo,
                        hi,
                        o.n_tested.to_string(),
                        o.n_positive.to_string(),
                    ])?;
                }
            }
            Ok(())
        },
    )?;
    write_csv(&paths.deaths, &["location_id", "age_lo", "age_hi", "deaths"], |w| {
        for l in &ds.locations {
            for o in &l.deaths {
                let [lo, hi] = bin_fields(&o.bin);
                w.write_record([l.location_id.clone(), lo, hi, o.deaths.to_string()])?;
            }
        }
        Ok(())
    })?;
    write_csv(&paths.population, &["location_id", "age_lo", "age_hi", "count"], |w| {
        for l in &ds.locations {
            for (bin, count) in &l.population_bins {
                let [lo, hi] = bin_fields(bin);
                w.write_record([l.location_id.clone(), lo, hi, count.to_string()])?;
            }
        }
        Ok(())
    })?;
    write_csv(
        &paths.national_population,
        &["country_id", "age_lo", "age_hi", "count"],
        |w| {
            for (country, bins) in &ds.national_populations {
                for (bin, count) in bins {
                    let [lo, hi] = bin_fields(bin);
                    w.write_record([country.clone(), lo, hi, count.to_string()])?;
                }
            }
            Ok(())
        },
    )
}
