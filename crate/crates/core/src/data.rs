//! Censored datasets: CSV ingestion, standardization, and cross-validation splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};

/// One observation `(T, δ, Z)` with `T = min(event time, censoring time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredSample {
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl CensoredSample {
    pub fn new(time: f64, event: bool, covariates: Vec<f64>) -> Self {
        CensoredSample { time, event, covariates }
    }

    pub fn delta(&self) -> f64 {
        if self.event {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    Continuous,
    /// Declared levels, or `None` to take the sorted distinct values of the file.
    Categorical(Option<Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

/// Column mapping for CSV input.
///
/// Schema files are plain `key = value` lines; `#` starts a comment:
///
/// ```text
/// time_column = duration
/// event_column = status
/// age = continuous
/// grade = categorical
/// stage = categorical: I, II, III
/// ```
///
/// With no feature lines every non time/event column is continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub time_column: String,
    pub event_column: String,
    pub features: Vec<FeatureSpec>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { time_column: "time".into(), event_column: "event".into(), features: Vec::new() }
    }
}

impl CsvSchema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = CsvSchema::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NfmError::Config(format!("schema line {}: expected 'key = value'", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "time_column" => schema.time_column = value.to_string(),
                "event_column" => schema.event_column = value.to_string(),
                _ => {
                    let kind = if value == "continuous" {
                        FeatureKind::Continuous
                    } else if value == "categorical" {
                        FeatureKind::Categorical(None)
                    } else if let Some(levels) = value.strip_prefix("categorical:") {
                        let levels: Vec<String> =
                            levels.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                        if levels.is_empty() {
                            return Err(NfmError::Config(format!("schema line {}: empty level list", lineno + 1)));
                        }
                        FeatureKind::Categorical(Some(levels))
                    } else {
                        return Err(NfmError::Config(format!(
                            "schema line {}: unknown feature kind '{value}'",
                            lineno + 1
                        )));
                    };
                    schema.features.push(FeatureSpec { name: key.to_string(), kind });
                }
            }
        }
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NfmError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Per-column standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    /// Covariate indices that are scaled (the continuous ones).
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<CensoredSample>,
    covariate_names: Vec<String>,
    /// Whether each expanded covariate column is continuous (one-hot columns are not).
    continuous: Vec<bool>,
    scaler: Option<Scaler>,
}

impl Dataset {
    /// A dataset whose covariates are all continuous.
    pub fn new(samples: Vec<CensoredSample>, covariate_names: Vec<String>) -> Result<Self> {
        let continuous = vec![true; covariate_names.len()];
        Self::with_kinds(samples, covariate_names, continuous)
    }

    pub fn with_kinds(samples: Vec<CensoredSample>, covariate_names: Vec<String>, continuous: Vec<bool>) -> Result<Self> {
        if continuous.len() != covariate_names.len() {
            return Err(NfmError::Dataset("column kind list does not match covariate names".into()));
        }
        let dim = covariate_names.len();
        for (i, s) in samples.iter().enumerate() {
            if !(s.time >= 0.0) || !s.time.is_finite() {
                return Err(NfmError::Dataset(format!("sample {i}: time must be finite and >= 0, got {}", s.time)));
            }
            if s.covariates.len() != dim {
                return Err(NfmError::Dataset(format!(
                    "sample {i}: expected {dim} covariates, got {}",
                    s.covariates.len()
                )));
            }
            if s.covariates.iter().any(|v| !v.is_finite()) {
                return Err(NfmError::Dataset(format!("sample {i}: non-finite covariate")));
            }
        }
        Ok(Dataset { samples, covariate_names, continuous, scaler: None })
    }

    pub fn samples(&self) -> &[CensoredSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn continuous_columns(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&j| self.continuous[j]).collect()
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    pub fn events(&self) -> usize {
        self.samples.iter().filter(|s| s.event).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        1.0 - self.events() as f64 / self.len() as f64
    }

    pub fn max_time(&self) -> f64 {
        self.samples.iter().map(|s| s.time).fold(0.0, f64::max)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            continuous: self.continuous.clone(),
            scaler: self.scaler.clone(),
        }
    }
}

fn parse_field(row: usize, column: &str, raw: &str) -> Result<f64> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
        return Err(NfmError::Parse { row, column: column.into(), msg: "missing value".into() });
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| NfmError::Parse { row, column: column.into(), msg: format!("not a number: '{raw}'") })?;
    if !v.is_finite() {
        return Err(NfmError::Parse { row, column: column.into(), msg: format!("non-finite value '{raw}'") });
    }
    Ok(v)
}

/// Reads a CSV with a header row. Categorical features are one-hot expanded
/// into columns named `feature=level`; row order is preserved.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let csv_err = |e| NfmError::Csv { path: path.to_path_buf(), source: e };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| NfmError::Dataset(format!("{}: missing column '{name}'", path.display())))
    };
    let time_idx = col(&schema.time_column)?;
    let event_idx = col(&schema.event_column)?;

    let features: Vec<FeatureSpec> = if schema.features.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != time_idx && i != event_idx)
            .map(|(_, h)| FeatureSpec { name: h.clone(), kind: FeatureKind::Continuous })
            .collect()
    } else {
        schema.features.clone()
    };
    let feature_idx: Vec<usize> = features.iter().map(|f| col(&f.name)).collect::<Result<_>>()?;

    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>().map_err(csv_err)?;

    // resolve categorical levels
    let mut levels: Vec<Option<Vec<String>>> = Vec::with_capacity(features.len());
    for (f, &ci) in features.iter().zip(&feature_idx) {
        levels.push(match &f.kind {
            FeatureKind::Continuous => None,
            FeatureKind::Categorical(Some(declared)) => Some(declared.clone()),
            FeatureKind::Categorical(None) => {
                let set: BTreeSet<String> = records.iter().map(|r| r.get(ci).unwrap_or("").trim().to_string()).collect();
                Some(set.into_iter().collect())
            }
        });
    }

    let mut names = Vec::new();
    let mut continuous = Vec::new();
    for (f, lv) in features.iter().zip(&levels) {
        match lv {
            None => {
                names.push(f.name.clone());
                continuous.push(true);
            }
            Some(lv) => {
                for l in lv {
                    names.push(format!("{}={}", f.name, l));
                    continuous.push(false);
                }
            }
        }
    }

    let mut samples = Vec::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let row = r + 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let time = parse_field(row, &schema.time_column, field(time_idx))?;
        if time < 0.0 {
            return Err(NfmError::Parse { row, column: schema.time_column.clone(), msg: format!("negative time {time}") });
        }
        let ev = parse_field(row, &schema.event_column, field(event_idx))?;
        let event = if ev == 1.0 {
            true
        } else if ev == 0.0 {
            false
        } else {
            return Err(NfmError::Parse {
                row,
                column: schema.event_column.clone(),
                msg: format!("event indicator must be 0 or 1, got {ev}"),
            });
        };
        let mut z = Vec::with_capacity(names.len());
        for ((f, &ci), lv) in features.iter().zip(&feature_idx).zip(&levels) {
            match lv {
                None => z.push(parse_field(row, &f.name, field(ci))?),
                Some(lv) => {
                    let value = field(ci).trim();
                    if value.is_empty() {
                        return Err(NfmError::Parse { row, column: f.name.clone(), msg: "missing value".into() });
                    }
                    let hit = lv.iter().position(|l| l == value).ok_or_else(|| NfmError::Parse {
                        row,
                        column: f.name.clone(),
                        msg: format!("unknown level '{value}'"),
                    })?;
                    z.extend((0..lv.len()).map(|k| if k == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        samples.push(CensoredSample { time, event, covariates: z });
    }
    Dataset::with_kinds(samples, names, continuous)
}

/// Writes `time,event,<covariates...>` with shortest round-trip float formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let csv_err = |e| NfmError::Csv { path: path.to_path_buf(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["time".to_string(), "event".to_string()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for s in &ds.samples {
        let mut rec = vec![s.time.to_string(), if s.event { "1" } else { "0" }.to_string()];
        rec.extend(s.covariates.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| NfmError::io(path, e))
}

/// Mean and population standard deviation (denominator `n`) of every
/// continuous column of `train`. Constant columns get `std = 1`.
pub fn fit_scaler(train: &Dataset) -> Result<Scaler> {
    if train.is_empty() {
        return Err(NfmError::Dataset("cannot fit a scaler on an empty dataset".into()));
    }
    let columns = train.continuous_columns();
    let n = train.len() as f64;
    let mut means = Vec::with_capacity(columns.len());
    let mut stds = Vec::with_capacity(columns.len());
    for &j in &columns {
        let mean = train.samples.iter().map(|s| s.covariates[j]).sum::<f64>() / n;
        let var = train.samples.iter().map(|s| (s.covariates[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        means.push(mean);
        stds.push(if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 });
    }
    Ok(Scaler { columns, means, stds })
}

pub fn apply_scaler(ds: &Dataset, scaler: &Scaler) -> Result<Dataset> {
    if let Some(&bad) = scaler.columns.iter().find(|&&j| j >= ds.dim()) {
        return Err(NfmError::Dataset(format!("scaler column {bad} out of range for dimension {}", ds.dim())));
    }
    let mut out = ds.clone();
    for s in &mut out.samples {
        scaler.apply_in_place(&mut s.covariates);
    }
    out.scaler = Some(scaler.clone());
    Ok(out)
}

impl Scaler {
    pub fn apply_in_place(&self, z: &mut [f64]) {
        for ((&j, &m), &sd) in self.columns.iter().zip(&self.means).zip(&self.stds) {
            z[j] = (z[j] - m) / sd;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvParams {
    pub n_folds: usize,
    pub holdout_fraction: f64,
    pub n_repeats: usize,
}

impl Default for CvParams {
    fn default() -> Self {
        CvParams { n_folds: 5, holdout_fraction: 0.2, n_repeats: 10 }
    }
}

/// Index sets of one fold within one repeat. All three are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub params: CvParams,
    pub seed: u64,
    /// `runs[repeat][fold]`.
    pub runs: Vec<Vec<FoldSplit>>,
}

/// Repeated k-fold plan: each repeat reshuffles, cuts `n_folds` test folds of
/// size `⌊n/k⌋` or `⌊n/k⌋ + 1`, and holds out a fraction of the remaining
/// indices for validation.
pub fn make_cv_plan(n: usize, params: CvParams, seed: u64) -> Result<CvPlan> {
    if params.n_folds < 2 {
        return Err(NfmError::Config(format!("need at least 2 folds, got {}", params.n_folds)));
    }
    if !(0.0..1.0).contains(&params.holdout_fraction) {
        return Err(NfmError::Config(format!("holdout fraction must lie in [0, 1), got {}", params.holdout_fraction)));
    }
    if n < params.n_folds {
        return Err(NfmError::TooSmall { n, needed: params.n_folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.n_folds;
    let mut runs = Vec::with_capacity(params.n_repeats);
    for _ in 0..params.n_repeats {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = n / k;
        let extra = n % k;
        let mut folds = Vec::with_capacity(k);
        let mut start = 0;
        for f in 0..k {
            let size = base + usize::from(f < extra);
            folds.push(perm[start..start + size].to_vec());
            start += size;
        }
        let mut splits = Vec::with_capacity(k);
        for f in 0..k {
            let mut rest: Vec<usize> = folds.iter().enumerate().filter(|&(g, _)| g != f).flat_map(|(_, v)| v.iter().copied()).collect();
            rest.shuffle(&mut rng);
            let n_valid = ((rest.len() as f64) * params.holdout_fraction).round() as usize;
            let n_valid = n_valid.min(rest.len().saturating_sub(1));
            let mut valid = rest[..n_valid].to_vec();
            let mut train = rest[n_valid..].to_vec();
            let mut test = folds[f].clone();
            valid.sort_unstable();
            train.sort_unstable();
            test.sort_unstable();
            splits.push(FoldSplit { train, valid, test });
        }
        runs.push(splits);
    }
    Ok(CvPlan { params, seed, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn one_hot_expansion() {
        let f = write_tmp("time,event,age,stage\n1.5,1,60,b\n2.0,0,45,a\n0.5,1,70,c\n");
        let schema = CsvSchema::parse("age = continuous\nstage = categorical\n").unwrap();
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.dim(), 1 + 3);
        assert_eq!(ds.covariate_names(), &["age", "stage=a", "stage=b", "stage=c"]);
        assert_eq!(ds.samples()[0].covariates, vec![60.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.samples()[2].time, 0.5);
        assert!(!ds.samples()[1].event);
        assert_eq!(ds.continuous_columns(), vec![0]);
    }

    #[test]
    fn declared_levels_and_custom_columns() {
        let f = write_tmp("dur,status,g\n1,1,II\n2,0,I\n");
        let schema = CsvSchema::parse("time_column = dur\nevent_column = status\ng = categorical: I, II, III # three levels\n").unwrap();
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.samples()[0].covariates, vec![0.0, 1.0, 0.0]);

        let bad = write_tmp("dur,status,g\n1,1,IV\n");
        assert!(matches!(load_csv(bad.path(), &schema), Err(NfmError::Parse { row: 1, .. })));
    }

    #[test]
    fn rejects_bad_rows() {
        let schema = CsvSchema::default();
        let f = write_tmp("time,event,x\n1,1,0.2\n2,2,0.3\n");
        match load_csv(f.path(), &schema) {
            Err(NfmError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "event");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let neg = write_tmp("time,event,x\n-1,1,0.2\n");
        assert!(matches!(load_csv(neg.path(), &schema), Err(NfmError::Parse { .. })));
        let missing = write_tmp("time,event,x\n1,1,\n");
        assert!(matches!(load_csv(missing.path(), &schema), Err(NfmError::Parse { .. })));
        let no_col = write_tmp("t,event,x\n1,1,2\n");
        assert!(matches!(load_csv(no_col.path(), &schema), Err(NfmError::Dataset(_))));
        assert!(CsvSchema::parse("x = ordinal").is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let samples = vec![
            CensoredSample::new(0.123456789012345, true, vec![1.0 / 3.0, -2.5e-8]),
            CensoredSample::new(7.0, false, vec![0.1, 1e300]),
            CensoredSample::new(0.0, true, vec![-0.0, 42.0]),
        ];
        let ds = Dataset::new(samples, vec!["a".into(), "b".into()]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let back = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.covariate_names(), ds.covariate_names());
    }

    #[test]
    fn scaler_hand_values() {
        let samples = (1..=3).map(|v| CensoredSample::new(1.0, true, vec![v as f64, 5.0])).collect();
        let ds = Dataset::new(samples, vec!["x".into(), "c".into()]).unwrap();
        let sc = fit_scaler(&ds).unwrap();
        assert_eq!(sc.means, vec![2.0, 5.0]);
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((sc.stds[0] - sd).abs() < 1e-15);
        assert_eq!(sc.stds[1], 1.0);
        let scaled = apply_scaler(&ds, &sc).unwrap();
        let col: Vec<f64> = scaled.samples().iter().map(|s| s.covariates[0]).collect();
        for (got, want) in col.iter().zip([-1.224744871391589, 0.0, 1.224744871391589]) {
            assert!((got - want).abs() < 1e-12);
        }
        // constant column shifts to zero but is not rescaled
        assert!(scaled.samples().iter().all(|s| s.covariates[1] == 0.0));
    }

    #[test]
    fn scaler_uses_train_statistics_only() {
        let train = Dataset::new(
            (0..4).map(|v| CensoredSample::new(1.0, true, vec![v as f64])).collect(),
            vec!["x".into()],
        )
        .unwrap();
        let sentinel = 1e9;
        let test = Dataset::new(vec![CensoredSample::new(1.0, false, vec![sentinel])], vec!["x".into()]).unwrap();
        let sc = fit_scaler(&train).unwrap();
        let before = sc.clone();
        let out = apply_scaler(&test, &sc).unwrap();
        assert_eq!(sc, before);
        assert_eq!(out.samples()[0].covariates[0], (sentinel - 1.5) / before.stds[0]);
        assert_eq!(out.scaler(), Some(&before));
    }

    #[test]
    fn one_hot_columns_are_not_scaled() {
        let f = write_tmp("time,event,age,g\n1,1,60,a\n2,0,40,b\n");
        let ds = load_csv(f.path(), &CsvSchema::parse("age = continuous\ng = categorical").unwrap()).unwrap();
        let out = apply_scaler(&ds, &fit_scaler(&ds).unwrap()).unwrap();
        assert_eq!(out.samples()[0].covariates, vec![1.0, 1.0, 0.0]);
    }

    fn check_plan(n: usize, seed: u64) {
        let plan = make_cv_plan(n, CvParams::default(), seed).unwrap();
        assert_eq!(plan.runs.len(), 10);
        for run in &plan.runs {
            assert_eq!(run.len(), 5);
            let mut seen = vec![false; n];
            for split in run {
                assert!(split.test.len() == n / 5 || split.test.len() == n / 5 + 1);
                for &i in &split.test {
                    assert!(!seen[i], "index {i} in two test folds");
                    seen[i] = true;
                }
                let mut all: Vec<usize> = split.train.iter().chain(&split.valid).chain(&split.test).copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
                for i in &split.valid {
                    assert!(!split.test.contains(i));
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
        assert_eq!(plan, make_cv_plan(n, CvParams::default(), seed).unwrap());
    }

    #[test]
    fn cv_plan_partitions() {
        for n in [10, 101, 1000] {
            check_plan(n, 7);
        }
        let plan = make_cv_plan(10, CvParams::default(), 1).unwrap();
        assert!(plan.runs[0].iter().all(|s| s.test.len() == 2));
        assert_ne!(plan.runs[0], make_cv_plan(10, CvParams::default(), 2).unwrap().runs[0]);
    }

    #[test]
    fn cv_plan_validation_fraction() {
        let plan = make_cv_plan(1000, CvParams::default(), 3).unwrap();
        for s in &plan.runs[0] {
            assert_eq!(s.valid.len(), 160);
            assert_eq!(s.train.len(), 640);
        }
    }

    #[test]
    fn cv_plan_too_small() {
        assert!(matches!(make_cv_plan(4, CvParams::default(), 0), Err(NfmError::TooSmall { n: 4, needed: 5 })));
    }
}
