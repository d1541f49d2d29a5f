//! Model inputs: one fixed-width vector per treatment phase, and padded
//! windows over each patient's event stream for the per-transaction study.
//!
//! Event windows are built on demand from compact per-patient streams so a
//! cohort of a few hundred thousand transactions stays small in memory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{days_between, ClaimsStore, Date, HospitalizationKind, Molecule, Patient, PatientRecord, StudyMolecule};
use crate::phases::{EndType, HorizonLabel, LabeledPhase, Outcome, Phase, Therapy};
use crate::provenance::{fingerprint, Provenance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
    /// Member of a one-hot group; exactly one column per group is set.
    OneHot(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    pub columns: Vec<FeatureColumn>,
}

impl FeatureDictionary {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn fingerprint(&self) -> String {
        let tagged: Vec<String> = self
            .columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Continuous => format!("{}:c", c.name),
                ColumnKind::Binary => format!("{}:b", c.name),
                ColumnKind::OneHot(g) => format!("{}:o:{g}", c.name),
            })
            .collect();
        fingerprint(&tagged)
    }

    /// Columns kept under reference coding: every one-hot group loses its
    /// first member so that an intercept stays identifiable.
    pub fn reference_coded(&self) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        (0..self.columns.len())
            .filter(|&i| match &self.columns[i].kind {
                ColumnKind::OneHot(g) => !seen.insert(g.clone()),
                _ => true,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    #[default]
    #[serde(rename = "zero")]
    ZeroFill,
    #[serde(rename = "first")]
    FirstDuplicate,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::ZeroFill => "zero",
            Padding::FirstDuplicate => "first",
        })
    }
}

impl FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" => Ok(Padding::ZeroFill),
            "first" => Ok(Padding::FirstDuplicate),
            other => Err(format!("unknown padding '{other}' (expected zero or first)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub padding: Padding,
    pub sequence_length: usize,
    /// Restrict event streams to study drugs and long hospital stays.
    pub baseline_events: bool,
    pub long_stay_min_days: i64,
    pub days_since_cap: i64,
    pub n_regions: usize,
    /// Department code to region group; unlisted departments go to the
    /// last group.
    pub regions: BTreeMap<String, usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let groups: [(&[&str], usize); 4] = [
            (&["59", "75", "76", "92", "14"], 0),
            (&["29", "35", "44", "33"], 1),
            (&["01", "21", "63", "67", "69"], 2),
            (&["06", "13", "2A", "31", "83"], 3),
        ];
        let regions = groups
            .iter()
            .flat_map(|(codes, g)| codes.iter().map(move |c| (c.to_string(), *g)))
            .collect();
        FeatureConfig {
            padding: Padding::ZeroFill,
            sequence_length: 10,
            baseline_events: false,
            long_stay_min_days: 2,
            days_since_cap: 365,
            n_regions: 5,
            regions,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.sequence_length < 1 {
            errors.push("features.sequence_length must be >= 1".into());
        }
        if self.days_since_cap < 1 {
            errors.push("features.days_since_cap must be >= 1".into());
        }
        if self.n_regions < 1 {
            errors.push("features.n_regions must be >= 1".into());
        }
        for (dep, &g) in &self.regions {
            if g >= self.n_regions {
                errors.push(format!("features.regions.{dep}: group {g} out of range"));
            }
        }
        errors
    }

    fn region(&self, department: &str) -> usize {
        self.regions.get(department).copied().unwrap_or(self.n_regions - 1)
    }
}

/// Therapy slot: one per study molecule, chemotherapy and radiotherapy share
/// the hospitalization slot.
pub fn therapy_slot(therapy: Therapy) -> usize {
    match therapy {
        Therapy::Molecule(m) => m.index(),
        Therapy::Chemotherapy | Therapy::Radiotherapy => StudyMolecule::ALL.len(),
    }
}

pub fn feature_dictionary(cfg: &FeatureConfig) -> FeatureDictionary {
    let mut columns = Vec::new();
    let mut push = |name: String, kind: ColumnKind| columns.push(FeatureColumn { name, kind });
    push("age".into(), ColumnKind::Continuous);
    push("age_imputed".into(), ColumnKind::Binary);
    for m in StudyMolecule::ALL {
        push(format!("therapy_{}", m.name().to_uppercase()), ColumnKind::OneHot("therapy".into()));
    }
    push("therapy_HOSPITALIZATION".into(), ColumnKind::OneHot("therapy".into()));
    push("ald".into(), ColumnKind::Binary);
    push("days_since_ald".into(), ColumnKind::Continuous);
    push("copathology_count".into(), ColumnKind::Continuous);
    push("mastectomy_recent".into(), ColumnKind::Binary);
    push("prior_phases".into(), ColumnKind::Continuous);
    for r in 0..cfg.n_regions {
        push(format!("region_{r}"), ColumnKind::OneHot("region".into()));
    }
    for month in 1..=12 {
        push(format!("start_month_{month:02}"), ColumnKind::OneHot("start_month".into()));
    }
    FeatureDictionary { columns }
}

/// Cohort-level values needed to encode a single phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureContext {
    pub median_age: f64,
}

impl FeatureContext {
    /// Median age at phase start over phases whose patient has a birth year.
    pub fn from_cohort(store: &ClaimsStore, phases: &[LabeledPhase]) -> Self {
        let mut ages: Vec<f64> = phases
            .iter()
            .filter_map(|p| {
                let by = store.patient(&p.phase.patient_id)?.patient.birth_year?;
                Some(f64::from(p.phase.start_date.year() - by))
            })
            .collect();
        ages.sort_by(f64::total_cmp);
        let median_age = match ages.len() {
            0 => 60.0,
            n if n % 2 == 1 => ages[n / 2],
            n => (ages[n / 2 - 1] + ages[n / 2]) / 2.0,
        };
        FeatureContext { median_age }
    }
}

/// Encodes one phase. `prior_phases` counts the patient's phases that
/// started before this one.
pub fn phase_features(phase: &Phase, patient: &Patient, prior_phases: usize, ctx: &FeatureContext, cfg: &FeatureConfig) -> Vec<f64> {
    let width = 2 + StudyMolecule::ALL.len() + 1 + 5 + cfg.n_regions + 12;
    let mut x = vec![0.0; width];
    match patient.birth_year {
        Some(by) => x[0] = f64::from(phase.start_date.year() - by),
        None => {
            x[0] = ctx.median_age;
            x[1] = 1.0;
        }
    }
    let mut i = 2;
    x[i + therapy_slot(phase.therapy)] = 1.0;
    i += StudyMolecule::ALL.len() + 1;
    if let Some(ald) = patient.ald_start_date.filter(|&d| d <= phase.start_date) {
        x[i] = 1.0;
        x[i + 1] = days_between(ald, phase.start_date) as f64;
    }
    x[i + 2] = patient.copathology_codes.len() as f64;
    x[i + 3] = f64::from(u8::from(phase.mastectomy_recent));
    x[i + 4] = prior_phases as f64;
    i += 5;
    x[i + cfg.region(&patient.department)] = 1.0;
    i += cfg.n_regions;
    x[i + phase.start_date.month0() as usize] = 1.0;
    x
}

/// Row-major dense matrix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(cols: usize, rows: &[R]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged matrix row");
            data.extend_from_slice(r.as_ref());
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend(cols.iter().map(|&c| r[c]));
        }
        Matrix { rows: self.rows, cols: cols.len(), data }
    }
}

/// Tabular dataset for one horizon; excluded phases are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dictionary: FeatureDictionary,
    pub x: Matrix,
    pub y: Vec<u8>,
    pub groups: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dictionary: self.dictionary.clone(),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            groups: idx.iter().map(|&i| self.groups[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub patient_id: String,
    pub therapy: Therapy,
    pub start_date: Date,
    pub labels: Vec<HorizonLabel>,
}

impl PhaseRow {
    pub fn label(&self, horizon: i64) -> Option<u8> {
        self.labels.iter().find(|l| l.horizon_days == horizon).and_then(|l| l.outcome.as_label())
    }
}

/// Encoded phases, one matrix row per phase, in phase-table order.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFeatureTable {
    pub dictionary: FeatureDictionary,
    pub horizons: Vec<i64>,
    pub rows: Vec<PhaseRow>,
    pub x: Matrix,
}

impl PhaseFeatureTable {
    pub fn dataset(&self, horizon: i64) -> Dataset {
        let idx: Vec<usize> = (0..self.rows.len()).filter(|&i| self.rows[i].label(horizon).is_some()).collect();
        Dataset {
            dictionary: self.dictionary.clone(),
            x: self.x.select_rows(&idx),
            y: idx.iter().map(|&i| self.rows[i].label(horizon).unwrap()).collect(),
            groups: idx.iter().map(|&i| self.rows[i].patient_id.clone()).collect(),
        }
    }
}

/// Encodes every phase; phases must be grouped by patient and ordered by
/// start date within a patient, as the phase engine emits them.
pub fn build_phase_features(store: &ClaimsStore, phases: &[LabeledPhase], cfg: &FeatureConfig) -> PhaseFeatureTable {
    let dictionary = feature_dictionary(cfg);
    let ctx = FeatureContext::from_cohort(store, phases);
    let horizons: Vec<i64> = phases.first().map(|p| p.labels.iter().map(|l| l.horizon_days).collect()).unwrap_or_default();
    let mut x = Matrix::zeros(0, dictionary.len());
    let mut rows = Vec::with_capacity(phases.len());
    let mut i = 0;
    while i < phases.len() {
        let pid = &phases[i].phase.patient_id;
        let j = i + phases[i..].iter().take_while(|p| &p.phase.patient_id == pid).count();
        let record = store.patient(pid).expect("phase patient present in store");
        for lp in &phases[i..j] {
            let prior = phases[i..j].iter().filter(|q| q.phase.start_date < lp.phase.start_date).count();
            x.data.extend(phase_features(&lp.phase, &record.patient, prior, &ctx, cfg));
            x.rows += 1;
            rows.push(PhaseRow {
                patient_id: lp.phase.patient_id.clone(),
                therapy: lp.phase.therapy,
                start_date: lp.phase.start_date,
                labels: lp.labels.clone(),
            });
        }
        i = j;
    }
    PhaseFeatureTable { dictionary, horizons, rows, x }
}

pub const EVENT_KINDS: usize = StudyMolecule::ALL.len() + 4;
pub const EVENT_WIDTH: usize = EVENT_KINDS + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Study(StudyMolecule),
    OtherDrug,
    Chemotherapy,
    Radiotherapy,
    OtherHospitalization,
}

impl EventKind {
    pub fn slot(self) -> usize {
        let n = StudyMolecule::ALL.len();
        match self {
            EventKind::Study(m) => m.index(),
            EventKind::OtherDrug => n,
            EventKind::Chemotherapy => n + 1,
            EventKind::Radiotherapy => n + 2,
            EventKind::OtherHospitalization => n + 3,
        }
    }

    pub fn from_slot(slot: usize) -> Option<Self> {
        let n = StudyMolecule::ALL.len();
        match slot {
            s if s < n => Some(EventKind::Study(StudyMolecule::ALL[s])),
            s if s == n => Some(EventKind::OtherDrug),
            s if s == n + 1 => Some(EventKind::Chemotherapy),
            s if s == n + 2 => Some(EventKind::Radiotherapy),
            s if s == n + 3 => Some(EventKind::OtherHospitalization),
            _ => None,
        }
    }

    fn column_name(self) -> String {
        match self {
            EventKind::Study(m) => format!("kind_{}", m.name().to_uppercase()),
            EventKind::OtherDrug => "kind_OTHER_DRUG".into(),
            EventKind::Chemotherapy => "kind_CHEMO".into(),
            EventKind::Radiotherapy => "kind_RADIO".into(),
            EventKind::OtherHospitalization => "kind_OTHER_HOSPITALIZATION".into(),
        }
    }
}

pub fn event_columns() -> Vec<String> {
    let mut cols = vec!["days_since_previous".to_string()];
    cols.extend((0..EVENT_KINDS).map(|s| EventKind::from_slot(s).unwrap().column_name()));
    cols.push("quantity".into());
    cols
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub date: Date,
    pub kind: EventKind,
    pub quantity: f64,
}

/// A patient's dispensings and hospital stays in date order. Events of the
/// same kind on the same day are merged with their quantities summed.
pub fn event_stream(record: &PatientRecord, cfg: &FeatureConfig) -> Vec<StreamEvent> {
    let mut merged: BTreeMap<(Date, EventKind), f64> = BTreeMap::new();
    for d in &record.dispensings {
        let kind = match &d.molecule {
            Molecule::Study(m) => EventKind::Study(*m),
            Molecule::Other(_) if cfg.baseline_events => continue,
            Molecule::Other(_) => EventKind::OtherDrug,
        };
        *merged.entry((d.date, kind)).or_default() += d.doses() as f64;
    }
    for h in &record.hospitalizations {
        if cfg.baseline_events && h.stay_days() < cfg.long_stay_min_days {
            continue;
        }
        let kind = match h.kind {
            HospitalizationKind::Chemotherapy => EventKind::Chemotherapy,
            HospitalizationKind::Radiotherapy => EventKind::Radiotherapy,
            HospitalizationKind::Other => EventKind::OtherHospitalization,
        };
        *merged.entry((h.start_date, kind)).or_default() += h.stay_days() as f64;
    }
    merged.into_iter().map(|((date, kind), quantity)| StreamEvent { date, kind, quantity }).collect()
}

/// Encodes `events[..=end]` as a fixed-length window, most recent last.
pub fn encode_window(events: &[StreamEvent], end: usize, length: usize, padding: Padding, cap: i64) -> Vec<[f64; EVENT_WIDTH]> {
    let first = (end + 1).saturating_sub(length);
    let mut rows = Vec::with_capacity(length);
    for k in first..=end {
        let mut row = [0.0; EVENT_WIDTH];
        if k > 0 {
            row[0] = days_between(events[k - 1].date, events[k].date).min(cap) as f64 / cap as f64;
        }
        row[1 + events[k].kind.slot()] = 1.0;
        row[EVENT_WIDTH - 1] = events[k].quantity;
        rows.push(row);
    }
    pad_rows(rows, length, padding)
}

fn pad_rows(rows: Vec<[f64; EVENT_WIDTH]>, length: usize, padding: Padding) -> Vec<[f64; EVENT_WIDTH]> {
    let missing = length - rows.len();
    let fill = match padding {
        Padding::ZeroFill => [0.0; EVENT_WIDTH],
        Padding::FirstDuplicate => rows[0],
    };
    let mut out = vec![fill; missing];
    out.extend(rows);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub patient_id: String,
    /// Index into the table's event streams.
    pub stream: usize,
    /// Position of this transaction in its stream.
    pub event_index: usize,
    /// Index of the owning phase in the phase feature table.
    pub phase_row: usize,
    pub date: Date,
    /// Days of treatment one intake covers in the owning phase, so that
    /// `date + coverage_days` is when this intake would run out.
    pub coverage_days: i64,
    /// 1 when this is the final purchase of an illegitimately stopped phase.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub patient_id: String,
    pub events: Vec<StreamEvent>,
}

/// Per-transaction samples plus everything needed to materialize them.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTable {
    pub length: usize,
    pub padding: Padding,
    pub days_since_cap: i64,
    pub streams: Vec<EventStream>,
    pub samples: Vec<SequenceSample>,
    pub phases: PhaseFeatureTable,
}

impl SequenceTable {
    pub fn window(&self, sample: &SequenceSample) -> Vec<[f64; EVENT_WIDTH]> {
        encode_window(&self.streams[sample.stream].events, sample.event_index, self.length, self.padding, self.days_since_cap)
    }

    pub fn static_features(&self, sample: &SequenceSample) -> &[f64] {
        self.phases.x.row(sample.phase_row)
    }

    /// Number of real (non-padding) rows in the sample's window.
    pub fn n_events(&self, sample: &SequenceSample) -> usize {
        (sample.event_index + 1).min(self.length)
    }

    pub fn with_padding(&self, padding: Padding) -> SequenceTable {
        SequenceTable { padding, ..self.clone() }
    }

    /// Samples for one horizon: transactions dated within the horizon of
    /// phases whose label is observed there. Positive only when the
    /// transaction ends its phase and the phase is non-adherent at the
    /// horizon.
    pub fn dataset(&self, horizon: i64) -> SequenceDataset<'_> {
        let mut samples = Vec::new();
        for s in &self.samples {
            let row = &self.phases.rows[s.phase_row];
            let Some(phase_label) = row.label(horizon) else { continue };
            // Keep only transactions that could still be the last one of a
            // phase stopping within the horizon; later ones are negative by
            // construction and their position alone would give that away.
            if days_between(row.start_date, s.date) + s.coverage_days > horizon {
                continue;
            }
            samples.push(SequenceSample { label: s.label & phase_label, ..s.clone() });
        }
        SequenceDataset { table: self, samples }
    }
}

/// A horizon-specific selection of samples over a table.
#[derive(Clone, Debug)]
pub struct SequenceDataset<'a> {
    pub table: &'a SequenceTable,
    pub samples: Vec<SequenceSample>,
}

impl SequenceDataset<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.patient_id.clone()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        SequenceDataset { table: self.table, samples: idx.iter().map(|&i| self.samples[i].clone()).collect() }
    }
}

/// One sample per study-drug transaction, labeled from its phase.
pub fn transaction_sequences(store: &ClaimsStore, phases: &[LabeledPhase], table: PhaseFeatureTable, cfg: &FeatureConfig) -> SequenceTable {
    let mut by_patient: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, lp) in phases.iter().enumerate() {
        by_patient.entry(lp.phase.patient_id.as_str()).or_default().push(i);
    }
    let mut streams = Vec::new();
    let mut samples = Vec::new();
    for record in store.records() {
        let events = event_stream(record, cfg);
        let mine = by_patient.get(record.id()).map(Vec::as_slice).unwrap_or(&[]);
        let stream = streams.len();
        for (k, e) in events.iter().enumerate() {
            let EventKind::Study(m) = e.kind else { continue };
            let therapy = Therapy::Molecule(m);
            let Some(&pi) = mine.iter().find(|&&pi| {
                let p = &phases[pi].phase;
                p.therapy == therapy && p.start_date <= e.date && e.date <= p.last_event_date
            }) else {
                continue;
            };
            let p = &phases[pi].phase;
            let label = u8::from(p.end_type == EndType::IllegitimateStop && e.date == p.last_event_date);
            let coverage_days = days_between(p.last_event_date, p.theoretical_last_dose);
            samples.push(SequenceSample { patient_id: record.id().to_string(), stream, event_index: k, phase_row: pi, date: e.date, coverage_days, label });
        }
        streams.push(EventStream { patient_id: record.id().to_string(), events });
    }
    SequenceTable { length: cfg.sequence_length, padding: cfg.padding, days_since_cap: cfg.days_since_cap, streams, samples, phases: table }
}

/// Mean/std standardization of continuous columns, fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub scaled: Vec<bool>,
    /// Continuous columns left unscaled because they were constant.
    pub flagged: Vec<String>,
}

impl Scaler {
    pub fn identity(cols: usize) -> Self {
        Scaler { means: vec![0.0; cols], stds: vec![1.0; cols], scaled: vec![false; cols], flagged: Vec::new() }
    }

    pub fn fit(x: &Matrix, dictionary: &FeatureDictionary) -> Self {
        assert!(x.rows > 0, "scaler needs a nonempty training split");
        let n = x.rows as f64;
        let mut s = Scaler::identity(x.cols);
        for c in 0..x.cols {
            if dictionary.columns[c].kind != ColumnKind::Continuous {
                continue;
            }
            let mean = (0..x.rows).map(|i| x.row(i)[c]).sum::<f64>() / n;
            let var = (0..x.rows).map(|i| (x.row(i)[c] - mean).powi(2)).sum::<f64>() / n;
            if var > 1e-12 {
                s.means[c] = mean;
                s.stds[c] = var.sqrt();
                s.scaled[c] = true;
            } else {
                s.flagged.push(dictionary.columns[c].name.clone());
            }
        }
        s
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for (c, v) in row.iter_mut().enumerate() {
            if self.scaled[c] {
                *v = (*v - self.means[c]) / self.stds[c];
            }
        }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows {
            self.transform_row(out.row_mut(i));
        }
        out
    }
}

pub fn standardize(train: &Dataset) -> (Dataset, Scaler) {
    let scaler = Scaler::fit(&train.x, &train.dictionary);
    (Dataset { x: scaler.transform(&train.x), ..train.clone() }, scaler)
}

/// Scaling for sequence inputs: static features as in [`Scaler`]; event
/// gaps and quantities divided by their training standard deviation without
/// centering so that padding rows stay zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScaler {
    pub statics: Scaler,
    pub gap_scale: f64,
    pub quantity_scale: f64,
}

fn spread(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len().max(1) as f64).sqrt();
    if sd > 1e-12 {
        sd
    } else {
        1.0
    }
}

impl SequenceScaler {
    pub fn fit(data: &SequenceDataset) -> Self {
        let table = data.table;
        let rows: Vec<&[f64]> = data.samples.iter().map(|s| table.static_features(s)).collect();
        let statics = Scaler::fit(&Matrix::from_rows(table.phases.dictionary.len(), &rows), &table.phases.dictionary);
        let (mut gaps, mut quantities) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
        for s in &data.samples {
            let last = table.window(s)[table.length - 1];
            gaps.push(last[0]);
            quantities.push(last[EVENT_WIDTH - 1]);
        }
        SequenceScaler { statics, gap_scale: spread(&gaps), quantity_scale: spread(&quantities) }
    }

    pub fn transform_window(&self, window: &mut [[f64; EVENT_WIDTH]]) {
        for row in window {
            row[0] /= self.gap_scale;
            row[EVENT_WIDTH - 1] /= self.quantity_scale;
        }
    }
}

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FeatureFileError + '_ {
    move |source| FeatureFileError::Io { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> FeatureFileError {
    FeatureFileError::Malformed { path: path.to_path_buf(), line, reason: reason.into() }
}

fn fmt_num(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

/// Writes `features.csv`: provenance, dictionary comment, then one row per
/// phase with its horizon labels (blank when excluded) and features.
pub fn write_features_csv(table: &PhaseFeatureTable, path: &Path, provenance: &Provenance) -> Result<(), FeatureFileError> {
    let mut out = provenance.comment_line();
    out.push_str(&format!("# dictionary {}\n", serde_json::to_string(&table.dictionary).expect("dictionary serializes")));
    let mut header = vec!["patient_id".to_string(), "therapy".into(), "start_date".into()];
    header.extend(table.horizons.iter().map(|h| format!("label_{h}")));
    header.extend(table.dictionary.columns.iter().map(|c| c.name.clone()));
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, r) in table.rows.iter().enumerate() {
        let mut fields = vec![r.patient_id.clone(), r.therapy.to_string(), r.start_date.to_string()];
        for &h in &table.horizons {
            let l = r.labels.iter().find(|l| l.horizon_days == h).map(|l| l.outcome);
            fields.push(match l {
                Some(Outcome::NonAdherent) => "1".into(),
                Some(Outcome::Adherent) => "0".into(),
                _ => String::new(),
            });
        }
        fields.extend(table.x.row(i).iter().map(|&v| fmt_num(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_features_csv(path: &Path) -> Result<PhaseFeatureTable, FeatureFileError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut dictionary: Option<FeatureDictionary> = None;
    let mut horizons = Vec::new();
    let mut header_seen = false;
    let mut rows = Vec::new();
    let mut x = Matrix::zeros(0, 0);
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = n + 1;
        if let Some(rest) = line.strip_prefix("# dictionary ") {
            let d: FeatureDictionary = serde_json::from_str(rest).map_err(|e| malformed(path, lineno, e.to_string()))?;
            x.cols = d.len();
            dictionary = Some(d);
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let dict = dictionary.as_ref().ok_or_else(|| malformed(path, lineno, "missing dictionary comment"))?;
        let fields: Vec<&str> = line.split(',').collect();
        if !header_seen {
            header_seen = true;
            for f in &fields[3..] {
                match f.strip_prefix("label_") {
                    Some(h) => horizons.push(h.parse().map_err(|_| malformed(path, lineno, format!("bad horizon column {f}")))?),
                    None => break,
                }
            }
            let names: Vec<&str> = fields[3 + horizons.len()..].to_vec();
            if names != dict.names() {
                return Err(malformed(path, lineno, "header does not match dictionary"));
            }
            continue;
        }
        if fields.len() != 3 + horizons.len() + dict.len() {
            return Err(malformed(path, lineno, format!("expected {} fields, found {}", 3 + horizons.len() + dict.len(), fields.len())));
        }
        let therapy: Therapy = fields[1].parse().map_err(|e: String| malformed(path, lineno, e))?;
        let start_date = crate::claims::parse_date(fields[2]).ok_or_else(|| malformed(path, lineno, "bad start_date"))?;
        let labels = horizons
            .iter()
            .zip(&fields[3..])
            .map(|(&h, f)| {
                let outcome = match *f {
                    "1" => Outcome::NonAdherent,
                    "0" => Outcome::Adherent,
                    "" => Outcome::Excluded,
                    other => return Err(malformed(path, lineno, format!("bad label {other}"))),
                };
                Ok(HorizonLabel { horizon_days: h, outcome })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for f in &fields[3 + horizons.len()..] {
            x.data.push(f.parse().map_err(|_| malformed(path, lineno, format!("bad number {f}")))?);
        }
        x.rows += 1;
        rows.push(PhaseRow { patient_id: fields[0].to_string(), therapy, start_date, labels });
    }
    let dictionary = dictionary.ok_or_else(|| malformed(path, 0, "missing dictionary comment"))?;
    Ok(PhaseFeatureTable { dictionary, horizons, rows, x })
}

#[derive(Serialize, Deserialize)]
struct SequenceHeader {
    length: usize,
    padding: Padding,
    days_since_cap: i64,
    event_columns: Vec<String>,
    phase_features: String,
}

#[derive(Serialize, Deserialize)]
struct StreamLine {
    patient_id: String,
    events: Vec<(Date, usize, f64)>,
    /// (event index, phase row, coverage days, label)
    samples: Vec<(usize, usize, i64, u8)>,
}

/// Writes `sequences.jsonl`: a provenance comment, a JSON header naming the
/// event columns and the phase feature file, then one line per patient
/// holding the event stream and the transaction samples drawn from it.
pub fn write_sequences_jsonl(table: &SequenceTable, features_file: &str, path: &Path, provenance: &Provenance) -> Result<(), FeatureFileError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut body = provenance.comment_line();
    let header = SequenceHeader {
        length: table.length,
        padding: table.padding,
        days_since_cap: table.days_since_cap,
        event_columns: event_columns(),
        phase_features: features_file.to_string(),
    };
    body.push_str(&serde_json::to_string(&header).expect("header serializes"));
    body.push('\n');
    let mut by_stream: Vec<Vec<(usize, usize, i64, u8)>> = vec![Vec::new(); table.streams.len()];
    for s in &table.samples {
        by_stream[s.stream].push((s.event_index, s.phase_row, s.coverage_days, s.label));
    }
    for (stream, samples) in table.streams.iter().zip(by_stream) {
        let line = StreamLine {
            patient_id: stream.patient_id.clone(),
            events: stream.events.iter().map(|e| (e.date, e.kind.slot(), e.quantity)).collect(),
            samples,
        };
        body.push_str(&serde_json::to_string(&line).expect("stream serializes"));
        body.push('\n');
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Reads `sequences.jsonl`; the phase feature file named in its header is
/// resolved relative to the same directory.
pub fn read_sequences_jsonl(path: &Path) -> Result<SequenceTable, FeatureFileError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header: Option<SequenceHeader> = None;
    let mut streams = Vec::new();
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = n + 1;
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if header.is_none() {
            let h: SequenceHeader = serde_json::from_str(&line).map_err(|e| malformed(path, lineno, e.to_string()))?;
            if h.event_columns != event_columns() {
                return Err(malformed(path, lineno, "event columns differ from this build"));
            }
            header = Some(h);
            continue;
        }
        let s: StreamLine = serde_json::from_str(&line).map_err(|e| malformed(path, lineno, e.to_string()))?;
        let stream = streams.len();
        let events = s
            .events
            .iter()
            .map(|&(date, slot, quantity)| {
                let kind = EventKind::from_slot(slot).ok_or_else(|| malformed(path, lineno, format!("bad event kind {slot}")))?;
                Ok(StreamEvent { date, kind, quantity })
            })
            .collect::<Result<Vec<_>, FeatureFileError>>()?;
        for (event_index, phase_row, coverage_days, label) in s.samples {
            let date = events.get(event_index).ok_or_else(|| malformed(path, lineno, "sample index out of range"))?.date;
            samples.push(SequenceSample { patient_id: s.patient_id.clone(), stream, event_index, phase_row, date, coverage_days, label });
        }
        streams.push(EventStream { patient_id: s.patient_id, events });
    }
    let header = header.ok_or_else(|| malformed(path, 0, "missing header"))?;
    let features_path = path.parent().unwrap_or(Path::new(".")).join(&header.phase_features);
    let phases = read_features_csv(&features_path)?;
    if let Some(s) = samples.iter().find(|s| s.phase_row >= phases.rows.len()) {
        return Err(malformed(path, 0, format!("sample of {} points past the phase table", s.patient_id)));
    }
    Ok(SequenceTable { length: header.length, padding: header.padding, days_since_cap: header.days_since_cap, streams, samples, phases })
}
