//! Subject-level study data: ingestion, validation and normalization.
//!
//! A [`Cohort`] is the immutable input to every analysis in this crate. All
//! times are fractional years since enrolment. Time-varying covariates are
//! right-continuous step functions of their measurement times; gaps in the
//! measured values are filled at load time by last-observation-carried-forward.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Names and kinds of the covariates every subject must conform to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CovariateSchema {
    pub time_constant: Vec<String>,
    pub time_varying: Vec<String>,
}

impl CovariateSchema {
    pub fn has_time_constant(&self, name: &str) -> bool {
        self.time_constant.iter().any(|n| n == name)
    }

    pub fn has_time_varying(&self, name: &str) -> bool {
        self.time_varying.iter().any(|n| n == name)
    }
}

/// One study participant.
///
/// `followup_end` is the end of observed follow-up; when `died` is true it is
/// also the observed survival time. `event_times` are outcome events (not
/// deaths). `exposure_start` is absorbing: once exposed, exposed until
/// follow-up ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub followup_end: f64,
    pub died: bool,
    pub event_times: Vec<f64>,
    pub exposure_start: Option<f64>,
    pub tc_covariates: BTreeMap<String, f64>,
    pub tv_covariates: BTreeMap<String, Vec<(f64, f64)>>,
}

impl SubjectRecord {
    /// Checks the per-subject invariants: positive follow-up, events inside
    /// the follow-up window, exposure inside the window, measurement times
    /// strictly increasing and inside the window.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::InvalidSubject {
                id: self.subject_id.clone(),
                msg,
            })
        };
        if !self.followup_end.is_finite() || self.followup_end <= 0.0 {
            return fail(format!(
                "follow-up must be positive, got {}",
                self.followup_end
            ));
        }
        for &t in &self.event_times {
            if !t.is_finite() || t < 0.0 || t > self.followup_end {
                return fail(format!(
                    "event time {t} outside follow-up [0, {}]",
                    self.followup_end
                ));
            }
        }
        if self.event_times.windows(2).any(|w| w[0] > w[1]) {
            return fail("event times are not sorted".into());
        }
        if let Some(e) = self.exposure_start {
            if !e.is_finite() || e < 0.0 || e > self.followup_end {
                return fail(format!(
                    "exposure start {e} outside follow-up [0, {}]",
                    self.followup_end
                ));
            }
        }
        for (name, traj) in &self.tv_covariates {
            for &(t, v) in traj {
                if !t.is_finite() || t < 0.0 || t > self.followup_end {
                    return fail(format!(
                        "covariate `{name}` measured at {t}, outside [0, {}]",
                        self.followup_end
                    ));
                }
                if !v.is_finite() {
                    return fail(format!("covariate `{name}` has non-finite value at {t}"));
                }
            }
            if traj.windows(2).any(|w| w[0].0 >= w[1].0) {
                return fail(format!(
                    "covariate `{name}` measurement times are not strictly increasing"
                ));
            }
        }
        for (name, v) in &self.tc_covariates {
            if !v.is_finite() {
                return fail(format!("time-constant covariate `{name}` is not finite"));
            }
        }
        Ok(())
    }
}

/// A validated set of subjects that share one covariate schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub schema: CovariateSchema,
}

impl Cohort {
    /// Builds a cohort from records, validating the shared invariants.
    pub fn new(subjects: Vec<SubjectRecord>, schema: CovariateSchema) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            s.validate()?;
            if !seen.insert(s.subject_id.clone()) {
                return Err(Error::InvalidSubject {
                    id: s.subject_id.clone(),
                    msg: "duplicate subject id".into(),
                });
            }
            for name in s.tc_covariates.keys() {
                if !schema.has_time_constant(name) {
                    return Err(Error::UnknownCovariate {
                        name: name.clone(),
                        context: format!(" on subject `{}` (not in schema)", s.subject_id),
                    });
                }
            }
            for name in schema.time_constant.iter() {
                if !s.tc_covariates.contains_key(name) {
                    return Err(Error::InvalidSubject {
                        id: s.subject_id.clone(),
                        msg: format!("missing time-constant covariate `{name}`"),
                    });
                }
            }
            for name in s.tv_covariates.keys() {
                if !schema.has_time_varying(name) {
                    return Err(Error::UnknownCovariate {
                        name: name.clone(),
                        context: format!(" on subject `{}` (not in schema)", s.subject_id),
                    });
                }
            }
        }
        Ok(Cohort { subjects, schema })
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// The sub-cohort of subjects whose death was observed.
    pub fn decedents(&self) -> Cohort {
        Cohort {
            subjects: self.subjects.iter().filter(|s| s.died).cloned().collect(),
            schema: self.schema.clone(),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }
}

/// Conventional file names for the cohort CSV quartet inside one directory.
#[derive(Debug, Clone)]
pub struct CohortPaths {
    pub subjects: PathBuf,
    pub events: PathBuf,
    pub exposures: PathBuf,
    pub covariates: PathBuf,
}

impl CohortPaths {
    pub fn in_dir<P: AsRef<Path>>(dir: P) -> Self {
        let d = dir.as_ref();
        CohortPaths {
            subjects: d.join("subjects.csv"),
            events: d.join("events.csv"),
            exposures: d.join("exposures.csv"),
            covariates: d.join("covariates.csv"),
        }
    }
}

/// Fills gaps in a measured trajectory by carrying the most recent observed
/// value forward. Observed values are left untouched.
pub fn locf_fill(trajectory: &[(f64, Option<f64>)]) -> Result<Vec<(f64, f64)>> {
    let mut filled = Vec::with_capacity(trajectory.len());
    let mut last: Option<f64> = None;
    for &(t, v) in trajectory {
        let value = match v {
            Some(v) => {
                last = Some(v);
                v
            }
            None => last.ok_or_else(|| {
                Error::Locf(format!(
                    "first measurement at t={t} is missing; no predecessor to carry"
                ))
            })?,
        };
        filled.push((t, value));
    }
    Ok(filled)
}

/// Value of a covariate at time `t` under the right-continuous step
/// convention: the most recent measurement at or before `t`.
pub fn covariate_value_at(subject: &SubjectRecord, name: &str, t: f64) -> Result<f64> {
    if let Some(v) = subject.tc_covariates.get(name) {
        return Ok(*v);
    }
    let traj = subject
        .tv_covariates
        .get(name)
        .ok_or_else(|| Error::UnknownCovariate {
            name: name.to_string(),
            context: format!(" on subject `{}`", subject.subject_id),
        })?;
    let first = traj
        .first()
        .ok_or_else(|| Error::UnknownCovariate {
            name: name.to_string(),
            context: format!(" (no measurements on subject `{}`)", subject.subject_id),
        })?
        .0;
    if t < first {
        return Err(Error::BeforeFirstMeasurement {
            name: name.to_string(),
            t,
            first,
        });
    }
    // partition_point gives the count of measurement times <= t
    let idx = traj.partition_point(|&(mt, _)| mt <= t);
    Ok(traj[idx - 1].1)
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct RawSubject {
    followup_end: f64,
    died: bool,
    tc: BTreeMap<String, f64>,
    events: Vec<f64>,
    exposure: Option<f64>,
    // file order per covariate; missing values pending LOCF
    tv: BTreeMap<String, Vec<(f64, Option<f64>)>>,
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn parse_f64(field: &str, file: &str, row: usize, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        row,
        msg: format!("malformed numeric {what}: `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: file.to_string(),
            row,
            msg: format!("non-finite {what}: `{field}`"),
        });
    }
    Ok(v)
}

/// Loads and validates a cohort from the four-file CSV layout.
///
/// Row numbers in errors count from 1 and include the header row, matching
/// what a text editor displays.
pub fn load_cohort(
    subjects_file: &Path,
    events_file: &Path,
    exposures_file: &Path,
    covariates_file: &Path,
) -> Result<Cohort> {
    // subjects.csv: subject_id, followup_end_years, died, <tc covariates...>
    let sfile = file_name(subjects_file);
    let mut reader = open_reader(subjects_file)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            file: sfile.clone(),
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    let cols: Vec<String> = headers.iter().map(|s| s.trim().to_string()).collect();
    if cols.len() < 3 || cols[0] != "subject_id" || cols[1] != "followup_end_years" || cols[2] != "died"
    {
        return Err(Error::Parse {
            file: sfile.clone(),
            row: 1,
            msg: "expected header subject_id,followup_end_years,died[,<covariate>...]".into(),
        });
    }
    let tc_names: Vec<String> = cols[3..].to_vec();

    let mut order: Vec<String> = Vec::new();
    let mut raw: BTreeMap<String, RawSubject> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: sfile.clone(),
            row,
            msg: e.to_string(),
        })?;
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                file: sfile.clone(),
                row,
                msg: "empty subject_id".into(),
            });
        }
        if raw.contains_key(&id) {
            return Err(Error::DuplicateSubject {
                id,
                file: sfile.clone(),
                row,
            });
        }
        let followup_end = parse_f64(&rec[1], &sfile, row, "followup_end_years")?;
        if followup_end <= 0.0 {
            return Err(Error::Parse {
                file: sfile.clone(),
                row,
                msg: format!("subject `{id}` has non-positive follow-up {followup_end}"),
            });
        }
        let died = match rec[2].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    file: sfile.clone(),
                    row,
                    msg: format!("died must be 0 or 1, got `{other}`"),
                })
            }
        };
        let mut tc = BTreeMap::new();
        for (j, name) in tc_names.iter().enumerate() {
            let v = parse_f64(&rec[3 + j], &sfile, row, &format!("covariate `{name}`"))?;
            tc.insert(name.clone(), v);
        }
        order.push(id.clone());
        raw.insert(
            id,
            RawSubject {
                followup_end,
                died,
                tc,
                events: Vec::new(),
                exposure: None,
                tv: BTreeMap::new(),
            },
        );
    }

    // events.csv: subject_id, event_time_years
    let efile = file_name(events_file);
    let mut reader = open_reader(events_file)?;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: efile.clone(),
            row,
            msg: e.to_string(),
        })?;
        let id = rec[0].trim().to_string();
        let t = parse_f64(&rec[1], &efile, row, "event_time_years")?;
        let subj = raw.get_mut(&id).ok_or_else(|| Error::UnknownSubject {
            id: id.clone(),
            file: efile.clone(),
            row,
        })?;
        if t < 0.0 || t > subj.followup_end {
            return Err(Error::Parse {
                file: efile.clone(),
                row,
                msg: format!(
                    "event at {t} outside follow-up [0, {}] of subject `{id}`",
                    subj.followup_end
                ),
            });
        }
        subj.events.push(t);
    }

    // exposures.csv: subject_id, exposure_start_years (at most one row per subject)
    let xfile = file_name(exposures_file);
    let mut reader = open_reader(exposures_file)?;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: xfile.clone(),
            row,
            msg: e.to_string(),
        })?;
        let id = rec[0].trim().to_string();
        let t = parse_f64(&rec[1], &xfile, row, "exposure_start_years")?;
        let subj = raw.get_mut(&id).ok_or_else(|| Error::UnknownSubject {
            id: id.clone(),
            file: xfile.clone(),
            row,
        })?;
        if subj.exposure.is_some() {
            return Err(Error::Parse {
                file: xfile.clone(),
                row,
                msg: format!("subject `{id}` has more than one exposure row"),
            });
        }
        if t < 0.0 || t > subj.followup_end {
            return Err(Error::Parse {
                file: xfile.clone(),
                row,
                msg: format!(
                    "exposure start {t} outside follow-up [0, {}] of subject `{id}`",
                    subj.followup_end
                ),
            });
        }
        subj.exposure = Some(t);
    }

    // covariates.csv: subject_id, time_years, covariate_name, value ("" = missing)
    let cfile = file_name(covariates_file);
    let mut tv_names: BTreeSet<String> = BTreeSet::new();
    let mut reader = open_reader(covariates_file)?;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: cfile.clone(),
            row,
            msg: e.to_string(),
        })?;
        let id = rec[0].trim().to_string();
        let t = parse_f64(&rec[1], &cfile, row, "time_years")?;
        let name = rec[2].trim().to_string();
        if tc_names.iter().any(|n| *n == name) || name == "exposed" {
            return Err(Error::UnknownCovariate {
                name,
                context: format!(
                    " ({cfile}:{row}: name collides with a time-constant or reserved column)"
                ),
            });
        }
        let value = {
            let f = rec[3].trim();
            if f.is_empty() {
                None
            } else {
                Some(parse_f64(f, &cfile, row, &format!("covariate `{name}`"))?)
            }
        };
        let subj = raw.get_mut(&id).ok_or_else(|| Error::UnknownSubject {
            id: id.clone(),
            file: cfile.clone(),
            row,
        })?;
        if t < 0.0 || t > subj.followup_end {
            return Err(Error::Parse {
                file: cfile.clone(),
                row,
                msg: format!(
                    "measurement at {t} outside follow-up [0, {}] of subject `{id}`",
                    subj.followup_end
                ),
            });
        }
        tv_names.insert(name.clone());
        subj.tv.entry(name).or_default().push((t, value));
    }

    // Assemble records; measurement rows may arrive in any order.
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let r = raw.remove(&id).expect("id came from the map");
        let mut events = r.events;
        events.sort_by(|a, b| a.total_cmp(b));
        let mut tv_covariates = BTreeMap::new();
        for (name, mut traj) in r.tv {
            traj.sort_by(|a, b| a.0.total_cmp(&b.0));
            if traj.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidSubject {
                    id: id.clone(),
                    msg: format!("covariate `{name}` has duplicate measurement times"),
                });
            }
            let filled = locf_fill(&traj).map_err(|e| match e {
                Error::Locf(msg) => Error::Locf(format!("subject `{id}`, covariate `{name}`: {msg}")),
                other => other,
            })?;
            tv_covariates.insert(name, filled);
        }
        subjects.push(SubjectRecord {
            subject_id: id,
            followup_end: r.followup_end,
            died: r.died,
            event_times: events,
            exposure_start: r.exposure,
            tc_covariates: r.tc,
            tv_covariates,
        });
    }

    let schema = CovariateSchema {
        time_constant: tc_names,
        time_varying: tv_names.into_iter().collect(),
    };
    Cohort::new(subjects, schema)
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

fn create_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn werr(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    }
}

/// Writes a cohort back to the four-file CSV layout.
///
/// Numbers are written in the shortest form that parses back to the same
/// `f64`, so a save/load round trip is exact.
pub fn save_cohort(cohort: &Cohort, paths: &CohortPaths) -> Result<()> {
    let mut w = create_writer(&paths.subjects)?;
    let mut header = vec!["subject_id".to_string(), "followup_end_years".into(), "died".into()];
    header.extend(cohort.schema.time_constant.iter().cloned());
    w.write_record(&header).map_err(|e| werr(&paths.subjects, e))?;
    for s in &cohort.subjects {
        let mut rec = vec![
            s.subject_id.clone(),
            format!("{}", s.followup_end),
            if s.died { "1".into() } else { "0".into() },
        ];
        for name in &cohort.schema.time_constant {
            rec.push(format!("{}", s.tc_covariates[name]));
        }
        w.write_record(&rec).map_err(|e| werr(&paths.subjects, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: paths.subjects.display().to_string(),
        source: e,
    })?;

    let mut w = create_writer(&paths.events)?;
    w.write_record(["subject_id", "event_time_years"])
        .map_err(|e| werr(&paths.events, e))?;
    for s in &cohort.subjects {
        for &t in &s.event_times {
            w.write_record([s.subject_id.as_str(), &format!("{t}")])
                .map_err(|e| werr(&paths.events, e))?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: paths.events.display().to_string(),
        source: e,
    })?;

    let mut w = create_writer(&paths.exposures)?;
    w.write_record(["subject_id", "exposure_start_years"])
        .map_err(|e| werr(&paths.exposures, e))?;
    for s in &cohort.subjects {
        if let Some(t) = s.exposure_start {
            w.write_record([s.subject_id.as_str(), &format!("{t}")])
                .map_err(|e| werr(&paths.exposures, e))?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: paths.exposures.display().to_string(),
        source: e,
    })?;

    let mut w = create_writer(&paths.covariates)?;
    w.write_record(["subject_id", "time_years", "covariate_name", "value"])
        .map_err(|e| werr(&paths.covariates, e))?;
    for s in &cohort.subjects {
        for (name, traj) in &s.tv_covariates {
            for &(t, v) in traj {
                w.write_record([s.subject_id.as_str(), &format!("{t}"), name, &format!("{v}")])
                    .map_err(|e| werr(&paths.covariates, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: paths.covariates.display().to_string(),
        source: e,
    })?;
    Ok(())
}
