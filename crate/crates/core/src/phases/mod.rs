//! Treatment-phase reconstruction and labeling.
//!
//! A phase is a run of intakes of one therapy (a study molecule, or a
//! chemotherapy / radiotherapy hospitalization kind) with no gap longer than
//! `median + gap_margin_days`. Its theoretical last dose is the last intake
//! plus the cohort median interval for the therapy. The phase end is then
//! classified by looking for a legitimate stop between the last intake and
//! `theoretical_last_dose + stop_window_days`; a phase with none, whose
//! window closed inside the extraction, is an illegitimate stop.

pub mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{
    add_days, days_between, parse_date, ClaimsStore, ClinicalKind, Date, HospitalizationKind, PatientRecord,
    StudyMolecule,
};
use crate::provenance::Provenance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Therapy {
    Molecule(StudyMolecule),
    Chemotherapy,
    Radiotherapy,
}

impl Therapy {
    pub fn all() -> impl Iterator<Item = Therapy> {
        StudyMolecule::ALL
            .into_iter()
            .map(Therapy::Molecule)
            .chain([Therapy::Chemotherapy, Therapy::Radiotherapy])
    }

    pub fn is_hospitalization(self) -> bool {
        !matches!(self, Therapy::Molecule(_))
    }

    pub fn code(self) -> &'static str {
        match self {
            Therapy::Molecule(m) => m.name(),
            Therapy::Chemotherapy => "CHEMO",
            Therapy::Radiotherapy => "RADIO",
        }
    }

    pub fn from_hospitalization(kind: HospitalizationKind) -> Option<Therapy> {
        match kind {
            HospitalizationKind::Chemotherapy => Some(Therapy::Chemotherapy),
            HospitalizationKind::Radiotherapy => Some(Therapy::Radiotherapy),
            HospitalizationKind::Other => None,
        }
    }
}

impl fmt::Display for Therapy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Therapy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "CHEMO" => Ok(Therapy::Chemotherapy),
            "RADIO" => Ok(Therapy::Radiotherapy),
            other => StudyMolecule::from_name(other)
                .map(Therapy::Molecule)
                .ok_or_else(|| format!("unknown therapy {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EndType {
    Switch,
    Death,
    PalliativeCare,
    CardiacIssue,
    RightCensored,
    IllegitimateStop,
}

impl EndType {
    pub fn code(self) -> &'static str {
        match self {
            EndType::Switch => "SWITCH",
            EndType::Death => "DEATH",
            EndType::PalliativeCare => "PALLIATIVE",
            EndType::CardiacIssue => "CARDIAC",
            EndType::RightCensored => "CENSORED",
            EndType::IllegitimateStop => "ILLEGITIMATE",
        }
    }

    pub fn is_legitimate(self) -> bool {
        self != EndType::IllegitimateStop
    }
}

impl FromStr for EndType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "SWITCH" => EndType::Switch,
            "DEATH" => EndType::Death,
            "PALLIATIVE" => EndType::PalliativeCare,
            "CARDIAC" => EndType::CardiacIssue,
            "CENSORED" => EndType::RightCensored,
            "ILLEGITIMATE" => EndType::IllegitimateStop,
            other => return Err(format!("unknown end type {other:?}")),
        })
    }
}

/// Legitimate stop causes in the order they are checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegitStop {
    Death,
    Palliative,
    Cardiac,
    Switch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianMode {
    /// One pooled median per therapy across the cohort.
    #[default]
    Cohort,
    /// Each phase uses the median of its own gaps, falling back to the
    /// cohort median for single-intake phases. Segmentation always uses the
    /// cohort median.
    PerPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    /// A gap longer than `median + gap_margin_days` closes the phase.
    pub gap_margin_days: i64,
    /// Legitimate stops are searched up to this many days past the
    /// theoretical last dose.
    pub stop_window_days: i64,
    pub horizons: Vec<i64>,
    pub mastectomy_lookback_days: i64,
    pub median_mode: MedianMode,
    pub stop_priority: Vec<LegitStop>,
    /// Count a chemotherapy/radiotherapy onset as a change of treatment.
    pub switch_includes_hospitalization: bool,
    pub default_oral_interval_days: i64,
    pub default_chemo_interval_days: i64,
    pub default_radio_interval_days: i64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            gap_margin_days: 60,
            stop_window_days: 60,
            horizons: vec![90, 180, 360],
            mastectomy_lookback_days: 90,
            median_mode: MedianMode::Cohort,
            stop_priority: vec![LegitStop::Death, LegitStop::Palliative, LegitStop::Cardiac, LegitStop::Switch],
            switch_includes_hospitalization: true,
            default_oral_interval_days: 30,
            default_chemo_interval_days: 21,
            default_radio_interval_days: 1,
        }
    }
}

impl PhaseConfig {
    pub fn default_interval(&self, therapy: Therapy) -> i64 {
        match therapy {
            Therapy::Molecule(_) => self.default_oral_interval_days,
            Therapy::Chemotherapy => self.default_chemo_interval_days,
            Therapy::Radiotherapy => self.default_radio_interval_days,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.gap_margin_days < 0 {
            errors.push("phases.gap_margin_days must be >= 0".into());
        }
        if self.stop_window_days < 1 {
            errors.push("phases.stop_window_days must be >= 1".into());
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h < 1) {
            errors.push("phases.horizons must be a nonempty list of positive day counts".into());
        }
        let mut seen = self.stop_priority.clone();
        seen.sort_by_key(|s| *s as u8);
        seen.dedup();
        if seen.len() != 4 || self.stop_priority.len() != 4 {
            errors.push("phases.stop_priority must list death, palliative, cardiac and switch exactly once".into());
        }
        for (key, v) in [
            ("default_oral_interval_days", self.default_oral_interval_days),
            ("default_chemo_interval_days", self.default_chemo_interval_days),
            ("default_radio_interval_days", self.default_radio_interval_days),
        ] {
            if v < 1 {
                errors.push(format!("phases.{key} must be >= 1"));
            }
        }
        errors
    }
}

/// One intake: a dispensing day (same-day purchases merged) or a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Intake {
    pub date: Date,
    pub quantity: u64,
}

/// Per-therapy, date-sorted intakes of one patient.
pub fn therapy_intakes(record: &PatientRecord) -> BTreeMap<Therapy, Vec<Intake>> {
    let mut out: BTreeMap<Therapy, Vec<Intake>> = BTreeMap::new();
    let mut push = |therapy: Therapy, date: Date, quantity: u64| {
        let list = out.entry(therapy).or_default();
        match list.iter_mut().find(|i| i.date == date) {
            Some(existing) => existing.quantity += quantity,
            None => list.push(Intake { date, quantity }),
        }
    };
    for d in &record.dispensings {
        if let Some(m) = d.molecule.study() {
            push(Therapy::Molecule(m), d.date, d.doses());
        }
    }
    for h in &record.hospitalizations {
        if let Some(t) = Therapy::from_hospitalization(h.kind) {
            push(t, h.start_date, h.stay_days() as u64);
        }
    }
    for list in out.values_mut() {
        list.sort_by_key(|i| i.date);
    }
    out
}

/// Median with the even-count rule: mean of the two middle values,
/// rounded half up.
pub fn median_days(values: &mut [i64]) -> Option<i64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        Some(values[n / 2])
    } else {
        let sum = values[n / 2 - 1] + values[n / 2];
        Some(sum.div_euclid(2) + sum.rem_euclid(2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianEstimate {
    pub days: i64,
    pub n_gaps: usize,
    /// No gap was observed; `days` is the configured protocol default.
    pub fallback: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CohortMedians {
    estimates: BTreeMap<Therapy, MedianEstimate>,
}

impl CohortMedians {
    pub fn get(&self, therapy: Therapy, cfg: &PhaseConfig) -> MedianEstimate {
        self.estimates
            .get(&therapy)
            .copied()
            .unwrap_or(MedianEstimate { days: cfg.default_interval(therapy), n_gaps: 0, fallback: true })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Therapy, &MedianEstimate)> {
        self.estimates.iter()
    }
}

fn gaps(intakes: &[Intake]) -> impl Iterator<Item = i64> + '_ {
    intakes.windows(2).map(|w| days_between(w[0].date, w[1].date))
}

/// Pooled per-therapy medians of consecutive same-patient intake gaps.
pub fn cohort_medians(store: &ClaimsStore, cfg: &PhaseConfig) -> CohortMedians {
    let mut pooled: BTreeMap<Therapy, Vec<i64>> = BTreeMap::new();
    for record in store.records() {
        for (therapy, intakes) in therapy_intakes(record) {
            pooled.entry(therapy).or_default().extend(gaps(&intakes));
        }
    }
    let estimates = Therapy::all()
        .map(|t| {
            let mut g = pooled.remove(&t).unwrap_or_default();
            let n_gaps = g.len();
            let est = match median_days(&mut g) {
                Some(days) if days > 0 => MedianEstimate { days, n_gaps, fallback: false },
                _ => MedianEstimate { days: cfg.default_interval(t), n_gaps, fallback: true },
            };
            (t, est)
        })
        .collect();
    CohortMedians { estimates }
}

pub fn cohort_median_interval(store: &ClaimsStore, therapy: Therapy, cfg: &PhaseConfig) -> MedianEstimate {
    cohort_medians(store, cfg).get(therapy, cfg)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseSpan {
    pub first: usize,
    /// Exclusive.
    pub last: usize,
    pub start_date: Date,
    pub last_event_date: Date,
}

impl PhaseSpan {
    pub fn n_intakes(&self) -> usize {
        self.last - self.first
    }
}

/// Splits date-sorted intakes into phases: a gap above
/// `median + gap_margin_days` starts a new phase.
pub fn segment_phases(intakes: &[Intake], median: i64, cfg: &PhaseConfig) -> Vec<PhaseSpan> {
    let threshold = median + cfg.gap_margin_days;
    let mut spans = Vec::new();
    let mut first = 0;
    for i in 1..=intakes.len() {
        let closes = i == intakes.len() || days_between(intakes[i - 1].date, intakes[i].date) > threshold;
        if closes && i > first {
            spans.push(PhaseSpan {
                first,
                last: i,
                start_date: intakes[first].date,
                last_event_date: intakes[i - 1].date,
            });
            first = i;
        }
    }
    spans
}

pub fn theoretical_last_dose(last_event_date: Date, median: i64) -> Date {
    add_days(last_event_date, median)
}

/// Classifies how a phase ended.
///
/// Legitimate causes are searched in `(last_event_date, tld + stop_window]`
/// in `cfg.stop_priority` order; failing that the phase is right-censored if
/// the extraction ends before the window closes, else an illegitimate stop.
pub fn classify_phase_end(
    therapy: Therapy,
    last_event_date: Date,
    theoretical_last_dose: Date,
    record: &PatientRecord,
    intakes: &BTreeMap<Therapy, Vec<Intake>>,
    extraction_end: Date,
    cfg: &PhaseConfig,
) -> EndType {
    let window_end = add_days(theoretical_last_dose, cfg.stop_window_days);
    let in_window = |d: Date| d > last_event_date && d <= window_end;
    let clinical = |kind: ClinicalKind| record.clinical.iter().any(|c| c.kind == kind && in_window(c.date));
    for cause in &cfg.stop_priority {
        let hit = match cause {
            LegitStop::Death => record.patient.death_date.is_some_and(in_window),
            LegitStop::Palliative => clinical(ClinicalKind::PalliativeCareStart),
            LegitStop::Cardiac => clinical(ClinicalKind::SeriousCardiacIssue),
            LegitStop::Switch => intakes.iter().any(|(other, list)| {
                *other != therapy
                    && (cfg.switch_includes_hospitalization || !(other.is_hospitalization() || therapy.is_hospitalization()))
                    && list.iter().any(|i| in_window(i.date))
            }),
        };
        if hit {
            return match cause {
                LegitStop::Death => EndType::Death,
                LegitStop::Palliative => EndType::PalliativeCare,
                LegitStop::Cardiac => EndType::CardiacIssue,
                LegitStop::Switch => EndType::Switch,
            };
        }
    }
    if extraction_end < window_end {
        EndType::RightCensored
    } else {
        EndType::IllegitimateStop
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub patient_id: String,
    pub therapy: Therapy,
    pub start_date: Date,
    pub last_event_date: Date,
    pub n_intakes: usize,
    pub median_interval_days: i64,
    pub theoretical_last_dose: Date,
    pub end_type: EndType,
    pub mastectomy_recent: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    NonAdherent,
    Adherent,
    Excluded,
}

impl Outcome {
    pub fn code(self) -> &'static str {
        match self {
            Outcome::NonAdherent => "NONADHERENT",
            Outcome::Adherent => "ADHERENT",
            Outcome::Excluded => "EXCLUDED",
        }
    }

    /// 1 for non-adherent, 0 for adherent, `None` when excluded.
    pub fn as_label(self) -> Option<u8> {
        match self {
            Outcome::NonAdherent => Some(1),
            Outcome::Adherent => Some(0),
            Outcome::Excluded => None,
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "NONADHERENT" => Ok(Outcome::NonAdherent),
            "ADHERENT" => Ok(Outcome::Adherent),
            "EXCLUDED" => Ok(Outcome::Excluded),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonLabel {
    pub horizon_days: i64,
    pub outcome: Outcome,
}

/// Horizon outcomes of a classified phase. The illegitimate stop is dated
/// at the theoretical last dose.
pub fn label_horizons(phase: &Phase, extraction_end: Date, horizons: &[i64]) -> Vec<HorizonLabel> {
    horizons
        .iter()
        .map(|&h| {
            let horizon_date = add_days(phase.start_date, h);
            let outcome = if phase.end_type == EndType::IllegitimateStop && phase.theoretical_last_dose <= horizon_date {
                Outcome::NonAdherent
            } else if phase.end_type == EndType::RightCensored && extraction_end < horizon_date {
                Outcome::Excluded
            } else {
                Outcome::Adherent
            };
            HorizonLabel { horizon_days: h, outcome }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPhase {
    pub phase: Phase,
    pub labels: Vec<HorizonLabel>,
}

impl LabeledPhase {
    pub fn label(&self, horizon_days: i64) -> Option<Outcome> {
        self.labels.iter().find(|l| l.horizon_days == horizon_days).map(|l| l.outcome)
    }
}

fn mastectomy_recent(record: &PatientRecord, start: Date, lookback: i64) -> bool {
    record.clinical.iter().any(|c| {
        c.kind == ClinicalKind::Mastectomy && (0..=lookback).contains(&days_between(c.date, start))
    })
}

/// Segments, classifies and labels every phase of one patient, ordered by
/// start date then therapy.
pub fn label_patient(
    record: &PatientRecord,
    medians: &CohortMedians,
    extraction_end: Date,
    cfg: &PhaseConfig,
) -> Vec<LabeledPhase> {
    let intakes = therapy_intakes(record);
    let mut out = Vec::new();
    for (&therapy, list) in &intakes {
        let cohort = medians.get(therapy, cfg).days;
        for span in segment_phases(list, cohort, cfg) {
            let median = match cfg.median_mode {
                MedianMode::Cohort => cohort,
                MedianMode::PerPhase => {
                    let mut own: Vec<i64> = gaps(&list[span.first..span.last]).collect();
                    median_days(&mut own).filter(|&d| d > 0).unwrap_or(cohort)
                }
            };
            let tld = theoretical_last_dose(span.last_event_date, median);
            let end_type = classify_phase_end(therapy, span.last_event_date, tld, record, &intakes, extraction_end, cfg);
            let phase = Phase {
                patient_id: record.id().to_string(),
                therapy,
                start_date: span.start_date,
                last_event_date: span.last_event_date,
                n_intakes: span.n_intakes(),
                median_interval_days: median,
                theoretical_last_dose: tld,
                end_type,
                mastectomy_recent: mastectomy_recent(record, span.start_date, cfg.mastectomy_lookback_days),
            };
            let labels = label_horizons(&phase, extraction_end, &cfg.horizons);
            out.push(LabeledPhase { phase, labels });
        }
    }
    out.sort_by(|a, b| a.phase.start_date.cmp(&b.phase.start_date).then(a.phase.therapy.cmp(&b.phase.therapy)));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseTable {
    pub medians: CohortMedians,
    pub phases: Vec<LabeledPhase>,
}

impl PhaseTable {
    /// Number of phases with a non-excluded label at `horizon_days`.
    pub fn eligible(&self, horizon_days: i64) -> usize {
        self.phases.iter().filter(|p| p.label(horizon_days).is_some_and(|o| o != Outcome::Excluded)).count()
    }

    pub fn positives(&self, horizon_days: i64) -> usize {
        self.phases.iter().filter(|p| p.label(horizon_days) == Some(Outcome::NonAdherent)).count()
    }
}

/// Runs the phase pipeline over the whole store. Medians are computed in
/// one pass, then patients are labeled independently.
pub fn label_cohort(store: &ClaimsStore, cfg: &PhaseConfig) -> PhaseTable {
    let medians = cohort_medians(store, cfg);
    let end = store.extraction_end();
    let records: Vec<&PatientRecord> = store.records().collect();
    let phases = records
        .par_iter()
        .map(|r| label_patient(r, &medians, end, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    PhaseTable { medians, phases }
}

#[derive(Debug, Error)]
pub enum PhaseFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: u64, reason: String },
}

pub fn write_phases_csv(phases: &[LabeledPhase], horizons: &[i64], path: &Path, provenance: &Provenance) -> Result<(), PhaseFileError> {
    let io = |source| PhaseFileError::Io { path: path.display().to_string(), source };
    let mut body = provenance.comment_line();
    body.push_str("patient_id,therapy,start_date,last_event_date,n_intakes,median_interval_days,theoretical_last_dose,end_type,mastectomy_recent");
    for h in horizons {
        body.push_str(&format!(",label_{h}"));
    }
    body.push('\n');
    for lp in phases {
        let p = &lp.phase;
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            p.patient_id,
            p.therapy,
            p.start_date,
            p.last_event_date,
            p.n_intakes,
            p.median_interval_days,
            p.theoretical_last_dose,
            p.end_type.code(),
            u8::from(p.mastectomy_recent)
        ));
        for &h in horizons {
            body.push(',');
            body.push_str(lp.label(h).map(Outcome::code).unwrap_or(""));
        }
        body.push('\n');
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io)
}

pub fn read_phases_csv(path: &Path) -> Result<Vec<LabeledPhase>, PhaseFileError> {
    let p = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| PhaseFileError::Malformed { path: p.clone(), line: 0, reason: e.to_string() })?;
    let headers = reader.headers().map_err(|e| PhaseFileError::Malformed { path: p.clone(), line: 1, reason: e.to_string() })?.clone();
    let horizons: Vec<(usize, i64)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("label_").and_then(|d| d.parse().ok()).map(|d| (i, d)))
        .collect();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| PhaseFileError::Malformed { path: p.clone(), line: e.position().map(|q| q.line()).unwrap_or(0), reason: e.to_string() })?;
        let line = rec.position().map(|q| q.line()).unwrap_or(0);
        let bad = |reason: String| PhaseFileError::Malformed { path: p.clone(), line, reason };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let date = |i: usize| parse_date(field(i)).ok_or_else(|| bad(format!("bad date {:?}", field(i))));
        let phase = Phase {
            patient_id: field(0).to_string(),
            therapy: field(1).parse().map_err(bad)?,
            start_date: date(2)?,
            last_event_date: date(3)?,
            n_intakes: field(4).parse().map_err(|_| bad(format!("bad n_intakes {:?}", field(4))))?,
            median_interval_days: field(5).parse().map_err(|_| bad(format!("bad median {:?}", field(5))))?,
            theoretical_last_dose: date(6)?,
            end_type: field(7).parse().map_err(bad)?,
            mastectomy_recent: field(8) == "1",
        };
        let labels = horizons
            .iter()
            .map(|&(i, h)| Ok(HorizonLabel { horizon_days: h, outcome: field(i).parse().map_err(bad)? }))
            .collect::<Result<Vec<_>, PhaseFileError>>()?;
        out.push(LabeledPhase { phase, labels });
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::claims::{ClinicalEvent, DispensingEvent, HospitalizationEvent, Molecule, Patient, Sex, Window};
    use std::collections::BTreeSet;

    pub(crate) fn day(n: i64) -> Date {
        add_days(Window::default().start, n)
    }

    pub(crate) fn patient(id: &str) -> PatientRecord {
        PatientRecord::new(Patient {
            patient_id: id.into(),
            birth_year: Some(1950),
            sex: Sex::Female,
            department: "75".into(),
            ald_start_date: None,
            death_date: None,
            copathology_codes: BTreeSet::new(),
        })
    }

    pub(crate) fn buy(r: &mut PatientRecord, m: StudyMolecule, d: i64) {
        r.dispensings.push(DispensingEvent {
            patient_id: r.id().into(),
            date: day(d),
            molecule: Molecule::Study(m),
            boxes: 1,
            doses_per_box: 30,
        });
    }

    fn intakes(days: &[i64]) -> Vec<Intake> {
        days.iter().map(|&d| Intake { date: day(d), quantity: 30 }).collect()
    }

    #[test]
    fn median_rules() {
        assert_eq!(median_days(&mut [30, 28, 32]), Some(30));
        assert_eq!(median_days(&mut [28, 30, 32, 60]), Some(31));
        assert_eq!(median_days(&mut [29, 30]), Some(30)); // 29.5 rounds up
        assert_eq!(median_days(&mut []), None);
    }

    #[test]
    fn cohort_median_of_tamoxifen_schedule() {
        let mut r = patient("P1");
        for d in (0..=360).step_by(30) {
            buy(&mut r, StudyMolecule::Tamoxifen, d);
        }
        let store = ClaimsStore::from_records(Window::default(), [r]);
        let cfg = PhaseConfig::default();
        let est = cohort_median_interval(&store, Therapy::Molecule(StudyMolecule::Tamoxifen), &cfg);
        assert_eq!(est, MedianEstimate { days: 30, n_gaps: 12, fallback: false });
        let fallback = cohort_median_interval(&store, Therapy::Molecule(StudyMolecule::Letrozole), &cfg);
        assert!(fallback.fallback);
        assert_eq!(fallback.days, 30);
        assert_eq!(cohort_median_interval(&store, Therapy::Chemotherapy, &cfg).days, 21);
    }

    #[test]
    fn gap_rule_splits_phases() {
        let cfg = PhaseConfig::default();
        let spans = segment_phases(&intakes(&[0, 30, 61, 92, 240]), 30, &cfg);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start_date, spans[0].last_event_date, spans[0].n_intakes()), (day(0), day(92), 4));
        assert_eq!((spans[1].start_date, spans[1].n_intakes()), (day(240), 1));

        let single = segment_phases(&intakes(&[10]), 30, &cfg);
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].n_intakes(), 1);

        assert_eq!(segment_phases(&intakes(&[0, 21, 42]), 21, &cfg).len(), 1);
        assert!(segment_phases(&[], 30, &cfg).is_empty());
        // a gap of exactly median + 60 stays in the phase
        assert_eq!(segment_phases(&intakes(&[0, 90]), 30, &cfg).len(), 1);
        assert_eq!(segment_phases(&intakes(&[0, 91]), 30, &cfg).len(), 2);
    }

    #[test]
    fn theoretical_last_dose_adds_median() {
        assert_eq!(theoretical_last_dose(day(92), 30), day(122));
        assert_eq!(theoretical_last_dose(day(10), 30), day(40));
    }

    fn classify(r: &PatientRecord, last: i64, extraction_end: i64) -> EndType {
        let cfg = PhaseConfig::default();
        let intakes = therapy_intakes(r);
        classify_phase_end(
            Therapy::Molecule(StudyMolecule::Tamoxifen),
            day(last),
            day(last + 30),
            r,
            &intakes,
            day(extraction_end),
            &cfg,
        )
    }

    #[test]
    fn end_classification() {
        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 92);
        r.patient.death_date = Some(day(150));
        assert_eq!(classify(&r, 92, 1000), EndType::Death);

        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 92);
        assert_eq!(classify(&r, 92, 140), EndType::RightCensored);
        assert_eq!(classify(&r, 92, 1000), EndType::IllegitimateStop);
        // window closes exactly at extraction end: observed
        assert_eq!(classify(&r, 92, 182), EndType::IllegitimateStop);
        assert_eq!(classify(&r, 92, 181), EndType::RightCensored);

        // death after the stop window does not rescue the phase
        r.patient.death_date = Some(day(183));
        assert_eq!(classify(&r, 92, 1000), EndType::IllegitimateStop);
    }

    #[test]
    fn priority_order_and_switch() {
        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 92);
        buy(&mut r, StudyMolecule::Letrozole, 130);
        assert_eq!(classify(&r, 92, 1000), EndType::Switch);
        r.clinical.push(ClinicalEvent { patient_id: "P1".into(), date: day(160), kind: ClinicalKind::SeriousCardiacIssue });
        assert_eq!(classify(&r, 92, 1000), EndType::CardiacIssue);
        r.clinical.push(ClinicalEvent { patient_id: "P1".into(), date: day(170), kind: ClinicalKind::PalliativeCareStart });
        assert_eq!(classify(&r, 92, 1000), EndType::PalliativeCare);
        r.patient.death_date = Some(day(175));
        assert_eq!(classify(&r, 92, 1000), EndType::Death);
        // mastectomy is not a stop cause
        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 92);
        r.clinical.push(ClinicalEvent { patient_id: "P1".into(), date: day(130), kind: ClinicalKind::Mastectomy });
        assert_eq!(classify(&r, 92, 1000), EndType::IllegitimateStop);
    }

    #[test]
    fn chemo_onset_switch_is_configurable() {
        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 92);
        r.hospitalizations.push(HospitalizationEvent {
            patient_id: "P1".into(),
            start_date: day(140),
            end_date: day(140),
            kind: HospitalizationKind::Chemotherapy,
            diagnosis_code: "C50".into(),
        });
        assert_eq!(classify(&r, 92, 1000), EndType::Switch);
        let cfg = PhaseConfig { switch_includes_hospitalization: false, ..PhaseConfig::default() };
        let intakes = therapy_intakes(&r);
        let end = classify_phase_end(Therapy::Molecule(StudyMolecule::Tamoxifen), day(92), day(122), &r, &intakes, day(1000), &cfg);
        assert_eq!(end, EndType::IllegitimateStop);
    }

    fn phase(end_type: EndType, tld: i64) -> Phase {
        Phase {
            patient_id: "P1".into(),
            therapy: Therapy::Molecule(StudyMolecule::Tamoxifen),
            start_date: day(0),
            last_event_date: day(tld - 30),
            n_intakes: 1,
            median_interval_days: 30,
            theoretical_last_dose: day(tld),
            end_type,
            mastectomy_recent: false,
        }
    }

    fn outcomes(p: &Phase, end: i64) -> Vec<Outcome> {
        label_horizons(p, day(end), &[90, 180, 360]).into_iter().map(|l| l.outcome).collect()
    }

    #[test]
    fn horizon_labels() {
        use Outcome::*;
        assert_eq!(outcomes(&phase(EndType::IllegitimateStop, 122), 1000), [Adherent, NonAdherent, NonAdherent]);
        assert_eq!(outcomes(&phase(EndType::Death, 50), 1000), [Adherent, Adherent, Adherent]);
        assert_eq!(outcomes(&phase(EndType::RightCensored, 210), 200), [Adherent, Adherent, Excluded]);
        // boundary: stop dated exactly at the horizon counts
        assert_eq!(outcomes(&phase(EndType::IllegitimateStop, 90), 1000), [NonAdherent, NonAdherent, NonAdherent]);
    }

    #[test]
    fn same_day_purchases_merge() {
        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 0);
        buy(&mut r, StudyMolecule::Tamoxifen, 0);
        buy(&mut r, StudyMolecule::Tamoxifen, 30);
        let intakes = therapy_intakes(&r);
        let list = &intakes[&Therapy::Molecule(StudyMolecule::Tamoxifen)];
        assert_eq!(list.len(), 2);
        assert_eq!(list[0].quantity, 60);
    }

    #[test]
    fn mastectomy_lookback() {
        let mut r = patient("P1");
        buy(&mut r, StudyMolecule::Tamoxifen, 100);
        r.clinical.push(ClinicalEvent { patient_id: "P1".into(), date: day(60), kind: ClinicalKind::Mastectomy });
        let store = ClaimsStore::from_records(Window::default(), [r.clone()]);
        let table = label_cohort(&store, &PhaseConfig::default());
        assert!(table.phases[0].phase.mastectomy_recent);

        r.clinical[0].date = day(5);
        let store = ClaimsStore::from_records(Window::default(), [r]);
        assert!(!label_cohort(&store, &PhaseConfig::default()).phases[0].phase.mastectomy_recent);
    }

    #[test]
    fn per_phase_median_mode() {
        let mut r = patient("P1");
        for d in [0, 40, 80, 120] {
            buy(&mut r, StudyMolecule::Tamoxifen, d);
        }
        let mut other = patient("P2");
        for d in (0..=300).step_by(30) {
            buy(&mut other, StudyMolecule::Tamoxifen, d);
        }
        let store = ClaimsStore::from_records(Window::default(), [r, other]);
        let cfg = PhaseConfig { median_mode: MedianMode::PerPhase, ..PhaseConfig::default() };
        let table = label_cohort(&store, &cfg);
        let p1 = table.phases.iter().find(|p| p.phase.patient_id == "P1").unwrap();
        assert_eq!(p1.phase.median_interval_days, 40);
        assert_eq!(p1.phase.theoretical_last_dose, day(160));
    }

    #[test]
    fn phases_csv_round_trip() {
        let mut r = patient("P1");
        for d in [0, 30, 61, 92, 240] {
            buy(&mut r, StudyMolecule::Tamoxifen, d);
        }
        let store = ClaimsStore::from_records(Window::default(), [r]);
        let cfg = PhaseConfig::default();
        let table = label_cohort(&store, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phases.csv");
        write_phases_csv(&table.phases, &cfg.horizons, &path, &Provenance::unconfigured(0)).unwrap();
        assert_eq!(read_phases_csv(&path).unwrap(), table.phases);
    }
}
