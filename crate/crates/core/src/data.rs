//! The two-dataset representation of a joint-model problem: long-format
//! longitudinal measurements and counting-process survival rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::Derivative;
use crate::error::{invalid, JmError, Result};
use crate::longitudinal::DesignColumns;
use crate::spec::{Family, ModelSpec, RECURRENT_STRATUM};

pub const MISSING: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub subject: String,
    pub time: f64,
    pub values: Vec<Option<f64>>,
}

/// Repeated measurements, one row per visit, `None` where an outcome was not
/// observed at that visit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongitudinalDataset {
    pub outcomes: Vec<String>,
    pub rows: Vec<LongRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvRow {
    pub subject: String,
    pub tstart: f64,
    pub tstop: f64,
    pub status: u8,
    pub stratum: String,
    pub covariates: Vec<f64>,
}

/// Counting-process rows for the recurrent process (`R`) and for each
/// competing cause (`CR1`, `CR2`, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurvivalDataset {
    pub covariates: Vec<String>,
    pub rows: Vec<SurvRow>,
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| JmError::Schema(format!("line {line}: cannot parse {what} from {s:?}")))
}

fn fmt_f64(v: f64) -> String {
    // both forms round-trip; the exponent keeps tiny beta draws readable
    if v != 0.0 && (v.abs() < 1e-5 || v.abs() >= 1e16) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

impl LongitudinalDataset {
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let pos = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| JmError::Schema(format!("longitudinal data is missing column {name}")))
        };
        let id = pos("id")?;
        let time = pos("time")?;
        let value_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != id && c != time).collect();
        let outcomes = value_cols.iter().map(|&c| headers[c].to_string()).collect();
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let mut values = Vec::with_capacity(value_cols.len());
            for &c in &value_cols {
                let raw = rec.get(c).unwrap_or(MISSING);
                values.push(if raw == MISSING || raw.is_empty() {
                    None
                } else {
                    Some(parse_f64(raw, &headers[c], line)?)
                });
            }
            rows.push(LongRow {
                subject: rec[id].to_string(),
                time: parse_f64(&rec[time], "time", line)?,
                values,
            });
        }
        Ok(Self { outcomes, rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "time".to_string()];
        header.extend(self.outcomes.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.subject.clone(), fmt_f64(r.time)];
            rec.extend(r.values.iter().map(|v| v.map_or_else(|| MISSING.to_string(), fmt_f64)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcomes.iter().position(|o| o == name)
    }
}

impl SurvivalDataset {
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let pos = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| JmError::Schema(format!("survival data is missing column {name}")))
        };
        let id = pos("id")?;
        let tstart = pos("tstart")?;
        let tstop = pos("tstop")?;
        let status = pos("status")?;
        let strata = pos("strata")?;
        let fixed = [id, tstart, tstop, status, strata];
        let cov_cols: Vec<usize> = (0..headers.len()).filter(|c| !fixed.contains(c)).collect();
        let covariates = cov_cols.iter().map(|&c| headers[c].to_string()).collect();
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let status = match rec[status].trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(JmError::Schema(format!("line {line}: status must be 0 or 1, got {other:?}")))
                }
            };
            let mut covs = Vec::with_capacity(cov_cols.len());
            for &c in &cov_cols {
                covs.push(parse_f64(&rec[c], &headers[c], line)?);
            }
            rows.push(SurvRow {
                subject: rec[id].to_string(),
                tstart: parse_f64(&rec[tstart], "tstart", line)?,
                tstop: parse_f64(&rec[tstop], "tstop", line)?,
                status,
                stratum: rec[strata].to_string(),
                covariates: covs,
            });
        }
        Ok(Self { covariates, rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> =
            ["id", "tstart", "tstop", "status", "strata"].iter().map(|s| s.to_string()).collect();
        header.extend(self.covariates.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.subject.clone(),
                fmt_f64(r.tstart),
                fmt_f64(r.tstop),
                r.status.to_string(),
                r.stratum.clone(),
            ];
            rec.extend(r.covariates.iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c == name)
    }
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub subject: Option<String>,
    /// Zero-based data row, with the dataset it refers to.
    pub row: Option<(Dataset, usize)>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Dataset {
    Longitudinal,
    Survival,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = &self.subject {
            write!(f, "subject {s}: ")?;
        }
        if let Some((d, r)) = self.row {
            write!(f, "{d:?} row {r}: ")?;
        }
        write!(f, "{}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_pass() {
            Ok(self)
        } else {
            Err(JmError::Validation(self.violations.len()))
        }
    }

    fn push(&mut self, subject: Option<&str>, row: Option<(Dataset, usize)>, message: impl Into<String>) {
        self.violations.push(Violation {
            subject: subject.map(str::to_string),
            row,
            message: message.into(),
        });
    }
}

/// Maps a value from `[a, b]` strictly into `(0, 1)`:
/// `y** = {y*(N−1) + 0.5}/N` with `y* = (y−a)/(b−a)`.
pub fn rescale_bounded(y: f64, a: f64, b: f64, n: usize) -> Result<f64> {
    if !(a < b) {
        return Err(invalid(format!("empty interval [{a}, {b}]")));
    }
    if n < 2 {
        return Err(invalid("rescaling needs N >= 2"));
    }
    if !(y >= a && y <= b) {
        return Err(JmError::OutOfRange(y, a, b));
    }
    let ys = (y - a) / (b - a);
    let n = n as f64;
    Ok((ys * (n - 1.0) + 0.5) / n)
}

/// Checks both datasets against each other and against the model.
pub fn validate(long: &LongitudinalDataset, surv: &SurvivalDataset, spec: &ModelSpec) -> ValidationReport {
    let mut rep = ValidationReport::default();
    if let Err(e) = spec.check() {
        rep.push(None, None, format!("model: {e}"));
    }
    if long.rows.is_empty() && surv.rows.is_empty() {
        rep.warnings.push("no subjects".to_string());
    }

    // schema
    let mut outcome_cols = Vec::new();
    for o in &spec.outcomes {
        match long.outcome_index(&o.name) {
            Some(c) => outcome_cols.push(Some(c)),
            None => {
                rep.push(None, None, format!("schema: longitudinal data has no column {}", o.name));
                outcome_cols.push(None);
            }
        }
    }
    for h in &spec.hazards {
        for c in &h.covariates {
            if surv.covariate_index(c).is_none() {
                rep.push(None, None, format!("schema: survival data has no covariate column {c}"));
            }
        }
    }
    let long_covs: Vec<String> = spec.longitudinal_covariates().into_iter().collect();
    for c in &long_covs {
        if surv.covariate_index(c).is_none() {
            rep.push(None, None, format!("schema: survival data has no covariate column {c}"));
        }
    }
    if long.rows.iter().any(|r| r.values.len() != long.outcomes.len()) {
        rep.push(None, None, "schema: ragged longitudinal rows");
    }
    if surv.rows.iter().any(|r| r.covariates.len() != surv.covariates.len()) {
        rep.push(None, None, "schema: ragged survival rows");
    }

    // longitudinal rows
    for (k, r) in long.rows.iter().enumerate() {
        let loc = Some((Dataset::Longitudinal, k));
        if !(r.time.is_finite() && r.time >= 0.0) {
            rep.push(Some(&r.subject), loc, format!("invalid time {}", r.time));
        }
        for (o, col) in spec.outcomes.iter().zip(&outcome_cols) {
            let Some(v) = col.and_then(|c| r.values.get(c).copied().flatten()) else { continue };
            if !v.is_finite() {
                rep.push(Some(&r.subject), loc, format!("{}: non-finite value", o.name));
            } else if o.family == Family::Beta {
                match o.bounds {
                    Some([a, b]) if !(v >= a && v <= b) => rep.push(
                        Some(&r.subject),
                        loc,
                        format!("{}: value {v} outside [{a}, {b}]", o.name),
                    ),
                    None if !(v > 0.0 && v < 1.0) => rep.push(
                        Some(&r.subject),
                        loc,
                        format!("{}: value {v} not strictly inside (0, 1)", o.name),
                    ),
                    _ => {}
                }
            }
        }
    }
    for (o, col) in spec.outcomes.iter().zip(&outcome_cols) {
        if let (Some(_), Some(c)) = (o.bounds, col) {
            let n = long.rows.iter().filter(|r| r.values.get(*c).copied().flatten().is_some()).count();
            if n == 1 {
                rep.push(None, None, format!("{}: rescaling needs at least 2 observations", o.name));
            }
        }
    }

    // survival rows
    let strata: BTreeSet<&str> = spec.hazards.iter().map(|h| h.stratum.as_str()).collect();
    let causes: Vec<&str> = spec
        .hazards
        .iter()
        .filter(|h| !h.is_recurrent())
        .map(|h| h.stratum.as_str())
        .collect();
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, r) in surv.rows.iter().enumerate() {
        let loc = Some((Dataset::Survival, k));
        by_subject.entry(r.subject.as_str()).or_default().push(k);
        if !(r.tstart.is_finite() && r.tstop.is_finite()) {
            rep.push(Some(&r.subject), loc, "non-finite interval bound");
        } else if r.tstart >= r.tstop {
            rep.push(Some(&r.subject), loc, "degenerate interval");
        }
        if r.tstart < 0.0 {
            rep.push(Some(&r.subject), loc, "negative start time");
        }
        if !strata.contains(r.stratum.as_str()) {
            rep.push(Some(&r.subject), loc, format!("unknown stratum {}", r.stratum));
        }
        if r.covariates.iter().any(|v| !v.is_finite()) {
            rep.push(Some(&r.subject), loc, "non-finite covariate");
        }
    }
    for (subject, rows) in &by_subject {
        let mut events = 0;
        let mut exit: Option<f64> = None;
        for cause in &causes {
            let mine: Vec<usize> = rows.iter().copied().filter(|&k| surv.rows[k].stratum == *cause).collect();
            if mine.len() != 1 {
                rep.push(
                    Some(subject),
                    None,
                    format!("expected exactly one {cause} row, found {}", mine.len()),
                );
            }
            for &k in &mine {
                let r = &surv.rows[k];
                events += r.status as usize;
                match exit {
                    None => exit = Some(r.tstop),
                    Some(t) if t != r.tstop => rep.push(
                        Some(subject),
                        Some((Dataset::Survival, k)),
                        "cause rows disagree on the exit time",
                    ),
                    _ => {}
                }
            }
        }
        if events > 1 {
            rep.push(Some(subject), None, "more than one competing cause has status 1");
        }
        let mut rec: Vec<usize> =
            rows.iter().copied().filter(|&k| surv.rows[k].stratum == RECURRENT_STRATUM).collect();
        rec.sort_by(|&a, &b| surv.rows[a].tstart.total_cmp(&surv.rows[b].tstart));
        for w in rec.windows(2) {
            if surv.rows[w[1]].tstart < surv.rows[w[0]].tstop {
                rep.push(Some(subject), Some((Dataset::Survival, w[1])), "interval overlap");
            }
        }
        if let (Some(t), Some(&last)) = (exit, rec.last()) {
            if surv.rows[last].tstop > t {
                rep.push(
                    Some(subject),
                    Some((Dataset::Survival, last)),
                    "recurrent interval extends past the exit time",
                );
            }
        }
        for c in &long_covs {
            if let Some(ci) = surv.covariate_index(c) {
                let first = surv.rows[rows[0]].covariates.get(ci).copied();
                if rows.iter().any(|&k| surv.rows[k].covariates.get(ci).copied() != first) {
                    rep.push(
                        Some(subject),
                        None,
                        format!("covariate {c} used by a longitudinal term varies within subject"),
                    );
                }
            }
        }
    }
    let mut long_subjects: Vec<&str> = long.rows.iter().map(|r| r.subject.as_str()).collect();
    long_subjects.sort_unstable();
    long_subjects.dedup();
    for s in long_subjects {
        if !by_subject.contains_key(s) {
            rep.push(Some(s), None, "subject has longitudinal rows but no survival rows");
        }
    }
    let without_long = by_subject
        .keys()
        .filter(|s| !long.rows.iter().any(|r| r.subject == **s))
        .count();
    if without_long > 0 {
        rep.warnings.push(format!("{without_long} subject(s) have no longitudinal rows"));
    }
    rep.violations.sort();
    rep.violations.dedup();
    rep
}

/// Design matrices for one outcome, rows aligned to its non-missing
/// observations (sorted by subject, then time).
#[derive(Debug, Clone)]
pub struct OutcomeView {
    pub name: String,
    pub subject: Vec<usize>,
    pub time: Vec<f64>,
    /// Responses, rescaled into (0, 1) for bounded outcomes.
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub subject: usize,
    pub tstart: f64,
    pub tstop: f64,
    pub status: bool,
    pub w: Vec<f64>,
}

/// Risk intervals of one hazard with its covariate vectors.
#[derive(Debug, Clone)]
pub struct HazardView {
    pub stratum: String,
    pub covariate_names: Vec<String>,
    pub rows: Vec<IntervalRow>,
}

/// Everything the likelihood needs, indexed by dense subject number.
#[derive(Debug, Clone)]
pub struct DesignViews {
    /// Subject identifiers in first-appearance order (longitudinal rows
    /// first, then survival rows).
    pub subjects: Vec<String>,
    pub baseline_names: Vec<String>,
    /// Subject-level covariates used by longitudinal terms.
    pub baseline: Vec<Vec<f64>>,
    pub outcomes: Vec<OutcomeView>,
    pub hazards: Vec<HazardView>,
}

impl DesignViews {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }
}

pub fn build_design_views(
    long: &LongitudinalDataset,
    surv: &SurvivalDataset,
    spec: &ModelSpec,
) -> Result<DesignViews> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut subjects = Vec::new();
    for s in long.rows.iter().map(|r| &r.subject).chain(surv.rows.iter().map(|r| &r.subject)) {
        if !index.contains_key(s.as_str()) {
            index.insert(s, subjects.len());
            subjects.push(s.clone());
        }
    }
    let baseline_names: Vec<String> = spec.longitudinal_covariates().into_iter().collect();
    let cov_idx: Vec<usize> = baseline_names
        .iter()
        .map(|c| {
            surv.covariate_index(c)
                .ok_or_else(|| JmError::Schema(format!("formula references unknown column {c}")))
        })
        .collect::<Result<_>>()?;
    let mut baseline = vec![vec![f64::NAN; baseline_names.len()]; subjects.len()];
    let mut seen = vec![false; subjects.len()];
    for r in &surv.rows {
        let i = index[r.subject.as_str()];
        if !seen[i] {
            seen[i] = true;
            for (k, &c) in cov_idx.iter().enumerate() {
                baseline[i][k] = r.covariates[c];
            }
        }
    }

    let mut outcomes = Vec::new();
    for o in &spec.outcomes {
        let col = long
            .outcome_index(&o.name)
            .ok_or_else(|| JmError::Schema(format!("longitudinal data has no column {}", o.name)))?;
        let fixed = DesignColumns::compile(&o.fixed, &baseline_names)?;
        let random = DesignColumns::compile(&o.random, &baseline_names)?;
        let mut obs: Vec<(usize, f64, f64)> = long
            .rows
            .iter()
            .filter_map(|r| r.values[col].map(|v| (index[r.subject.as_str()], r.time, v)))
            .collect();
        obs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let n = obs.len();
        if n > 0 && baseline_names.iter().enumerate().any(|(k, _)| obs.iter().any(|o| baseline[o.0][k].is_nan())) {
            return Err(invalid("a longitudinal subject is missing baseline covariates"));
        }
        let mut y = Vec::with_capacity(n);
        for &(_, _, v) in &obs {
            y.push(match o.bounds {
                Some([a, b]) => rescale_bounded(v, a, b, n)?,
                None => v,
            });
        }
        let mut x = DMatrix::zeros(n, fixed.len());
        let mut z = DMatrix::zeros(n, random.len());
        for (r, &(i, t, _)) in obs.iter().enumerate() {
            let xr = fixed.eval(t, &baseline[i], Derivative::Value);
            let zr = random.eval(t, &baseline[i], Derivative::Value);
            for (c, v) in xr.into_iter().enumerate() {
                x[(r, c)] = v;
            }
            for (c, v) in zr.into_iter().enumerate() {
                z[(r, c)] = v;
            }
        }
        outcomes.push(OutcomeView {
            name: o.name.clone(),
            subject: obs.iter().map(|o| o.0).collect(),
            time: obs.iter().map(|o| o.1).collect(),
            y,
            x,
            z,
            fixed_names: fixed.names().to_vec(),
            random_names: random.names().to_vec(),
        });
    }

    let mut hazards = Vec::new();
    for h in &spec.hazards {
        let cidx: Vec<usize> = h
            .covariates
            .iter()
            .map(|c| {
                surv.covariate_index(c)
                    .ok_or_else(|| JmError::Schema(format!("formula references unknown column {c}")))
            })
            .collect::<Result<_>>()?;
        let mut rows: Vec<IntervalRow> = surv
            .rows
            .iter()
            .filter(|r| r.stratum == h.stratum)
            .map(|r| IntervalRow {
                subject: index[r.subject.as_str()],
                tstart: r.tstart,
                tstop: r.tstop,
                status: r.status == 1,
                w: cidx.iter().map(|&c| r.covariates[c]).collect(),
            })
            .collect();
        rows.sort_by(|a, b| a.subject.cmp(&b.subject).then(a.tstart.total_cmp(&b.tstart)));
        hazards.push(HazardView {
            stratum: h.stratum.clone(),
            covariate_names: h.covariates.clone(),
            rows,
        });
    }
    Ok(DesignViews { subjects, baseline_names, baseline, outcomes, hazards })
}
