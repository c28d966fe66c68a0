//! Time-scale mapping and counting-process expansion.
//!
//! A cohort is analysed on one of two time-scales: time-on-study (TOS),
//! where every subject enters at 0, or reverse time-to-death (rTTD), where a
//! subject with total survival time `ttd` enters at `ttd_max - ttd` and
//! everyone is aligned on remaining lifetime. Expansion cuts each subject's
//! follow-up into risk intervals at event times, the exposure start and
//! covariate measurement times, producing the start-stop rows consumed by the
//! model fitter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::cohort::{covariate_value_at, Cohort};
use crate::error::{Error, Result};

/// Reserved name for the exposure indicator column in expanded data.
pub const EXPOSURE_COVARIATE: &str = "exposed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    Tos,
    Rttd,
}

impl std::fmt::Display for ScaleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleKind::Tos => write!(f, "tos"),
            ScaleKind::Rttd => write!(f, "rttd"),
        }
    }
}

/// A concrete time-scale. `ttd_max` is only meaningful for rTTD and must
/// dominate every subject's time-to-death in the analysis sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScale {
    pub kind: ScaleKind,
    pub ttd_max: f64,
}

impl TimeScale {
    pub fn tos() -> Self {
        TimeScale {
            kind: ScaleKind::Tos,
            ttd_max: 0.0,
        }
    }

    pub fn rttd(ttd_max: f64) -> Self {
        TimeScale {
            kind: ScaleKind::Rttd,
            ttd_max,
        }
    }

    /// rTTD scale with `ttd_max` taken from the analysis sample itself.
    pub fn rttd_from(ttds: &BTreeMap<String, f64>) -> Result<Self> {
        let ttd_max = ttds
            .values()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if !ttd_max.is_finite() {
            return Err(Error::Invalid(
                "cannot derive ttd_max from an empty sample".into(),
            ));
        }
        Ok(TimeScale::rttd(ttd_max))
    }
}

/// One counting-process row: the subject is at risk on `(entry, exit]` with
/// the given covariate values; `event` marks an outcome event at `exit`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskInterval {
    pub subject_id: String,
    pub entry: f64,
    pub exit: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Expanded cohort: intervals plus the covariate column names, in order.
/// Column 0 is always the exposure indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    pub scale: ScaleKind,
    pub covariate_names: Vec<String>,
    pub intervals: Vec<RiskInterval>,
}

impl IntervalSet {
    pub fn n_events(&self) -> usize {
        self.intervals.iter().filter(|iv| iv.event).count()
    }

    pub fn n_subjects(&self) -> usize {
        self.intervals
            .iter()
            .map(|iv| iv.subject_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }
}

/// The subjects at risk when one outcome event happens.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSet {
    pub event_time: f64,
    pub at_risk: BTreeSet<String>,
    pub case: String,
}

/// Resolves every subject's time-to-death: observed follow-up for decedents,
/// the supplied imputed value for censored subjects.
pub fn resolve_ttd(
    cohort: &Cohort,
    imputed: Option<&BTreeMap<String, f64>>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for s in &cohort.subjects {
        let ttd = if s.died {
            s.followup_end
        } else {
            let v = imputed
                .and_then(|m| m.get(&s.subject_id))
                .copied()
                .ok_or_else(|| Error::MissingTtd {
                    id: s.subject_id.clone(),
                })?;
            if v < s.followup_end {
                return Err(Error::ImputedBelowFollowup {
                    id: s.subject_id.clone(),
                    imputed: v,
                    followup: s.followup_end,
                });
            }
            v
        };
        out.insert(s.subject_id.clone(), ttd);
    }
    Ok(out)
}

/// Maps years since enrolment to the time-scale coordinate. Slope-1 affine in
/// `u` on both scales.
pub fn to_scale(u: f64, subject_ttd: f64, scale: &TimeScale) -> Result<f64> {
    match scale.kind {
        ScaleKind::Tos => Ok(u),
        ScaleKind::Rttd => {
            if subject_ttd > scale.ttd_max {
                return Err(Error::TtdExceedsMax {
                    id: String::new(),
                    ttd: subject_ttd,
                    ttd_max: scale.ttd_max,
                });
            }
            Ok(scale.ttd_max - (subject_ttd - u))
        }
    }
}

/// Expands a cohort into risk intervals, resolving time-to-death internally.
/// `imputed` supplies survival times for censored subjects and is required
/// for rTTD unless the cohort is decedents-only.
pub fn expand(
    cohort: &Cohort,
    kind: ScaleKind,
    imputed: Option<&BTreeMap<String, f64>>,
    covariate_spec: &[String],
) -> Result<IntervalSet> {
    let scale = match kind {
        ScaleKind::Tos => TimeScale::tos(),
        ScaleKind::Rttd => {
            let ttds = resolve_ttd(cohort, imputed)?;
            TimeScale::rttd_from(&ttds)?
        }
    };
    let ttds = match kind {
        ScaleKind::Tos => BTreeMap::new(),
        ScaleKind::Rttd => resolve_ttd(cohort, imputed)?,
    };
    expand_with_scale(cohort, &scale, &ttds, covariate_spec)
}

/// Expansion against an explicit scale and time-to-death map. Exposed so
/// callers can pin `ttd_max` (shift experiments, bootstrap replicates).
pub fn expand_with_scale(
    cohort: &Cohort,
    scale: &TimeScale,
    ttds: &BTreeMap<String, f64>,
    covariate_spec: &[String],
) -> Result<IntervalSet> {
    // Split the requested covariates by kind up front so unknown names fail
    // before any work happens.
    enum Kind {
        TimeConstant,
        TimeVarying,
    }
    let mut kinds = Vec::with_capacity(covariate_spec.len());
    for name in covariate_spec {
        if name == EXPOSURE_COVARIATE {
            return Err(Error::UnknownCovariate {
                name: name.clone(),
                context: " (the exposure indicator is always included; do not list it)".into(),
            });
        }
        if cohort.schema.has_time_constant(name) {
            kinds.push(Kind::TimeConstant);
        } else if cohort.schema.has_time_varying(name) {
            kinds.push(Kind::TimeVarying);
        } else {
            return Err(Error::UnknownCovariate {
                name: name.clone(),
                context: " in covariate spec".into(),
            });
        }
    }

    let mut names = vec![EXPOSURE_COVARIATE.to_string()];
    names.extend(covariate_spec.iter().cloned());

    let mut intervals = Vec::new();
    for s in &cohort.subjects {
        let ttd = match scale.kind {
            ScaleKind::Tos => 0.0,
            ScaleKind::Rttd => {
                let t = *ttds.get(&s.subject_id).ok_or_else(|| Error::MissingTtd {
                    id: s.subject_id.clone(),
                })?;
                if t > scale.ttd_max {
                    return Err(Error::TtdExceedsMax {
                        id: s.subject_id.clone(),
                        ttd: t,
                        ttd_max: scale.ttd_max,
                    });
                }
                t
            }
        };

        for w in s.event_times.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateEventTime {
                    id: s.subject_id.clone(),
                    time: w[0],
                });
            }
        }
        if s.event_times.first() == Some(&0.0) {
            return Err(Error::EventAtOrigin {
                id: s.subject_id.clone(),
            });
        }

        // Cut points: event times, exposure start, measurement times of the
        // requested time-varying covariates, and the end of follow-up.
        let mut cuts: Vec<f64> = Vec::new();
        cuts.extend(s.event_times.iter().cloned());
        if let Some(e) = s.exposure_start {
            if e > 0.0 && e < s.followup_end {
                cuts.push(e);
            }
        }
        for (name, kind) in covariate_spec.iter().zip(&kinds) {
            if matches!(kind, Kind::TimeVarying) {
                if let Some(traj) = s.tv_covariates.get(name) {
                    cuts.extend(
                        traj.iter()
                            .map(|&(t, _)| t)
                            .filter(|&t| t > 0.0 && t < s.followup_end),
                    );
                }
            }
        }
        cuts.push(s.followup_end);
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.dedup();

        let mut start = 0.0;
        for &end in &cuts {
            if end <= start {
                continue;
            }
            let event = s.event_times.binary_search_by(|t| t.total_cmp(&end)).is_ok();
            let mut covs = Vec::with_capacity(names.len());
            let exposed = match s.exposure_start {
                Some(e) => start >= e,
                None => false,
            };
            covs.push(if exposed { 1.0 } else { 0.0 });
            for (name, kind) in covariate_spec.iter().zip(&kinds) {
                let v = match kind {
                    Kind::TimeConstant => s.tc_covariates[name],
                    Kind::TimeVarying => covariate_value_at(s, name, start)?,
                };
                covs.push(v);
            }
            intervals.push(RiskInterval {
                subject_id: s.subject_id.clone(),
                entry: to_scale(start, ttd, scale)?,
                exit: to_scale(end, ttd, scale)?,
                event,
                covariates: covs,
            });
            start = end;
        }
    }

    Ok(IntervalSet {
        scale: scale.kind,
        covariate_names: names,
        intervals,
    })
}

fn validate_intervals(intervals: &[RiskInterval]) -> Result<()> {
    for iv in intervals {
        if !iv.entry.is_finite() || !iv.exit.is_finite() || iv.entry >= iv.exit {
            return Err(Error::Invalid(format!(
                "subject `{}`: bad interval ({}, {}]",
                iv.subject_id, iv.entry, iv.exit
            )));
        }
        if iv.covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "subject `{}`: non-finite covariate value",
                iv.subject_id
            )));
        }
    }
    Ok(())
}

/// Builds the risk set for every outcome event: subjects with an interval
/// `(entry, exit]` covering the event time.
pub fn risk_sets(intervals: &[RiskInterval]) -> Result<Vec<RiskSet>> {
    validate_intervals(intervals)?;
    let mut sets = Vec::new();
    for iv in intervals.iter().filter(|iv| iv.event) {
        let e = iv.exit;
        let at_risk: BTreeSet<String> = intervals
            .iter()
            .filter(|j| j.entry < e && e <= j.exit)
            .map(|j| j.subject_id.clone())
            .collect();
        if !at_risk.contains(&iv.subject_id) {
            return Err(Error::EmptyRiskSet { time: e });
        }
        sets.push(RiskSet {
            event_time: e,
            at_risk,
            case: iv.subject_id.clone(),
        });
    }
    sets.sort_by(|a, b| a.event_time.total_cmp(&b.event_time).then(a.case.cmp(&b.case)));
    Ok(sets)
}

/// One cell of the incidence table: event count, person-years and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IncidenceCell {
    pub events: u64,
    pub person_years: f64,
    pub rate: Option<f64>,
}

impl IncidenceCell {
    fn new(events: u64, person_years: f64) -> Self {
        let rate = if person_years > 0.0 {
            Some(events as f64 / person_years)
        } else {
            None
        };
        IncidenceCell {
            events,
            person_years,
            rate,
        }
    }
}

/// Events and person-years overall, for never-exposed subjects, and for
/// ever-exposed subjects split at the exposure start.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IncidenceTable {
    pub overall: IncidenceCell,
    pub never_exposed: IncidenceCell,
    pub ever_exposed: IncidenceCell,
    pub before_exposure: IncidenceCell,
    pub after_exposure: IncidenceCell,
}

/// Tabulates incidence rates by exposure, in events per person-year.
///
/// An event at exactly the exposure start belongs to the unexposed
/// person-time, matching the interval convention used by `expand`.
pub fn person_time_table(cohort: &Cohort) -> IncidenceTable {
    let mut overall = (0u64, 0.0f64);
    let mut never = (0u64, 0.0f64);
    let mut ever = (0u64, 0.0f64);
    let mut before = (0u64, 0.0f64);
    let mut after = (0u64, 0.0f64);
    for s in &cohort.subjects {
        let n_events = s.event_times.len() as u64;
        overall.0 += n_events;
        overall.1 += s.followup_end;
        match s.exposure_start {
            None => {
                never.0 += n_events;
                never.1 += s.followup_end;
            }
            Some(e) => {
                ever.0 += n_events;
                ever.1 += s.followup_end;
                let n_before = s.event_times.iter().filter(|&&t| t <= e).count() as u64;
                before.0 += n_before;
                before.1 += e;
                after.0 += n_events - n_before;
                after.1 += s.followup_end - e;
            }
        }
    }
    IncidenceTable {
        overall: IncidenceCell::new(overall.0, overall.1),
        never_exposed: IncidenceCell::new(never.0, never.1),
        ever_exposed: IncidenceCell::new(ever.0, ever.1),
        before_exposure: IncidenceCell::new(before.0, before.1),
        after_exposure: IncidenceCell::new(after.0, after.1),
    }
}

/// Writes expanded intervals as CSV for cross-validation against external
/// survival software: subject_id, entry, exit, event, then covariates.
pub fn write_intervals_csv(set: &IntervalSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![
        "subject_id".to_string(),
        "entry".into(),
        "exit".into(),
        "event".into(),
    ];
    header.extend(set.covariate_names.iter().cloned());
    let io_err = |e: csv::Error| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    };
    w.write_record(&header).map_err(io_err)?;
    for iv in &set.intervals {
        let mut rec = vec![
            iv.subject_id.clone(),
            format!("{}", iv.entry),
            format!("{}", iv.exit),
            if iv.event { "1".into() } else { "0".into() },
        ];
        rec.extend(iv.covariates.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}
