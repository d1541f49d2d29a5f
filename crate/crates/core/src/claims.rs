//! Reimbursement-claims domain model.
//!
//! A [`ClaimsStore`] holds the three record categories of a national
//! reimbursement extraction (pharmacy transactions, hospital stays, patient
//! information) plus the clinical events that can legitimately end a
//! treatment. Stores are built once by [`load_claims`] (or by the cohort
//! simulator) and are read-only afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::Provenance;

pub type Date = NaiveDate;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn parse_date(s: &str) -> Option<Date> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

/// Signed number of days from `from` to `to`.
pub fn days_between(from: Date, to: Date) -> i64 {
    (to - from).num_days()
}

pub fn add_days(d: Date, days: i64) -> Date {
    d + chrono::Duration::days(days)
}

/// Closed extraction interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Date,
    pub end: Date,
}

impl Window {
    pub fn new(start: Date, end: Date) -> Result<Self, ClaimsError> {
        if start >= end {
            return Err(ClaimsError::InvalidWindow { start, end });
        }
        Ok(Window { start, end })
    }

    pub fn contains(&self, d: Date) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn len_days(&self) -> i64 {
        days_between(self.start, self.end)
    }
}

impl Default for Window {
    fn default() -> Self {
        Window {
            start: NaiveDate::from_ymd_opt(2013, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2015, 12, 31).unwrap(),
        }
    }
}

/// The thirteen breast-cancer molecules followed by the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StudyMolecule {
    Anastrozole,
    Capecitabine,
    Cyclophosphamide,
    Etoposide,
    Everolimus,
    Exemestane,
    Lapatinib,
    Letrozole,
    Megestrol,
    Melphalan,
    Tamoxifen,
    Toremifene,
    Vinorelbine,
}

impl StudyMolecule {
    pub const ALL: [StudyMolecule; 13] = [
        StudyMolecule::Anastrozole,
        StudyMolecule::Capecitabine,
        StudyMolecule::Cyclophosphamide,
        StudyMolecule::Etoposide,
        StudyMolecule::Everolimus,
        StudyMolecule::Exemestane,
        StudyMolecule::Lapatinib,
        StudyMolecule::Letrozole,
        StudyMolecule::Megestrol,
        StudyMolecule::Melphalan,
        StudyMolecule::Tamoxifen,
        StudyMolecule::Toremifene,
        StudyMolecule::Vinorelbine,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StudyMolecule::Anastrozole => "Anastrozole",
            StudyMolecule::Capecitabine => "Capecitabine",
            StudyMolecule::Cyclophosphamide => "Cyclophosphamide",
            StudyMolecule::Etoposide => "Etoposide",
            StudyMolecule::Everolimus => "Everolimus",
            StudyMolecule::Exemestane => "Exemestane",
            StudyMolecule::Lapatinib => "Lapatinib",
            StudyMolecule::Letrozole => "Letrozole",
            StudyMolecule::Megestrol => "Megestrol",
            StudyMolecule::Melphalan => "Melphalan",
            StudyMolecule::Tamoxifen => "Tamoxifen",
            StudyMolecule::Toremifene => "Toremifene",
            StudyMolecule::Vinorelbine => "Vinorelbine",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        StudyMolecule::ALL.iter().copied().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for StudyMolecule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A dispensed drug: one of the study molecules, or any other drug
/// identified by an opaque code.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Molecule {
    Study(StudyMolecule),
    Other(String),
}

impl Molecule {
    pub fn study(&self) -> Option<StudyMolecule> {
        match self {
            Molecule::Study(m) => Some(*m),
            Molecule::Other(_) => None,
        }
    }
}

impl fmt::Display for Molecule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Molecule::Study(m) => f.write_str(m.name()),
            Molecule::Other(code) => write!(f, "OTHER:{code}"),
        }
    }
}

impl FromStr for Molecule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(code) = s.strip_prefix("OTHER:") {
            if code.is_empty() {
                return Err("empty OTHER drug code".into());
            }
            return Ok(Molecule::Other(code.to_string()));
        }
        StudyMolecule::from_name(s)
            .map(Molecule::Study)
            .ok_or_else(|| format!("unknown molecule code {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "F" | "f" | "female" | "FEMALE" | "2" => Ok(Sex::Female),
            "M" | "m" | "male" | "MALE" | "1" => Ok(Sex::Male),
            other => Err(format!("unknown sex code {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HospitalizationKind {
    Chemotherapy,
    Radiotherapy,
    Other,
}

impl HospitalizationKind {
    pub fn code(self) -> &'static str {
        match self {
            HospitalizationKind::Chemotherapy => "CHEMO",
            HospitalizationKind::Radiotherapy => "RADIO",
            HospitalizationKind::Other => "OTHER",
        }
    }
}

impl FromStr for HospitalizationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "CHEMO" => Ok(HospitalizationKind::Chemotherapy),
            "RADIO" => Ok(HospitalizationKind::Radiotherapy),
            "OTHER" => Ok(HospitalizationKind::Other),
            other => Err(format!("unknown hospitalization kind {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClinicalKind {
    PalliativeCareStart,
    SeriousCardiacIssue,
    Mastectomy,
}

impl ClinicalKind {
    pub fn code(self) -> &'static str {
        match self {
            ClinicalKind::PalliativeCareStart => "PALLIATIVE",
            ClinicalKind::SeriousCardiacIssue => "CARDIAC",
            ClinicalKind::Mastectomy => "MASTECTOMY",
        }
    }
}

impl FromStr for ClinicalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "PALLIATIVE" => Ok(ClinicalKind::PalliativeCareStart),
            "CARDIAC" => Ok(ClinicalKind::SeriousCardiacIssue),
            "MASTECTOMY" => Ok(ClinicalKind::Mastectomy),
            other => Err(format!("unknown clinical event kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub birth_year: Option<i32>,
    pub sex: Sex,
    pub department: String,
    pub ald_start_date: Option<Date>,
    pub death_date: Option<Date>,
    pub copathology_codes: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispensingEvent {
    pub patient_id: String,
    pub date: Date,
    pub molecule: Molecule,
    pub boxes: u32,
    pub doses_per_box: u32,
}

impl DispensingEvent {
    pub fn doses(&self) -> u64 {
        self.boxes as u64 * self.doses_per_box as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HospitalizationEvent {
    pub patient_id: String,
    pub start_date: Date,
    pub end_date: Date,
    pub kind: HospitalizationKind,
    pub diagnosis_code: String,
}

impl HospitalizationEvent {
    /// Stay length in days; a same-day session counts as one day.
    pub fn stay_days(&self) -> i64 {
        days_between(self.start_date, self.end_date).max(0) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub patient_id: String,
    pub date: Date,
    pub kind: ClinicalKind,
}

/// One patient with date-sorted event lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient: Patient,
    pub dispensings: Vec<DispensingEvent>,
    pub hospitalizations: Vec<HospitalizationEvent>,
    pub clinical: Vec<ClinicalEvent>,
}

impl PatientRecord {
    pub fn new(patient: Patient) -> Self {
        PatientRecord { patient, dispensings: Vec::new(), hospitalizations: Vec::new(), clinical: Vec::new() }
    }

    pub fn id(&self) -> &str {
        &self.patient.patient_id
    }

    /// Restores the canonical order: by date, then by kind/molecule, then
    /// by insertion order (the sorts are stable).
    pub fn sort_events(&mut self) {
        self.dispensings.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.molecule.cmp(&b.molecule)));
        self.hospitalizations
            .sort_by(|a, b| a.start_date.cmp(&b.start_date).then_with(|| a.kind.cmp(&b.kind)));
        self.clinical.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.kind.cmp(&b.kind)));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClaimsStore {
    window: Window,
    patients: BTreeMap<String, PatientRecord>,
}

impl ClaimsStore {
    /// Builds a store from records, sorting every event list and dropping
    /// nothing. Callers are expected to have applied the window already.
    pub fn from_records(window: Window, records: impl IntoIterator<Item = PatientRecord>) -> Self {
        let patients = records
            .into_iter()
            .map(|mut r| {
                r.sort_events();
                (r.patient.patient_id.clone(), r)
            })
            .collect();
        ClaimsStore { window, patients }
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn extraction_start(&self) -> Date {
        self.window.start
    }

    pub fn extraction_end(&self) -> Date {
        self.window.end
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.get(id)
    }

    /// Records in ascending patient-id order.
    pub fn records(&self) -> impl Iterator<Item = &PatientRecord> {
        self.patients.values()
    }

    pub fn n_dispensings(&self) -> usize {
        self.patients.values().map(|r| r.dispensings.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum ClaimsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {source}")]
    Csv {
        file: String,
        line: u64,
        #[source]
        source: csv::Error,
    },
    #[error("{file}:{line}: column {column:?}: {reason}")]
    Malformed { file: String, line: u64, column: String, reason: String },
    #[error("{file}:{line}: unknown molecule code {code:?}")]
    UnknownMolecule { file: String, line: u64, code: String },
    #[error("{file}:{line}: patient {patient_id} is not listed in the patient file")]
    UnknownPatient { file: String, line: u64, patient_id: String },
    #[error("{file}:{line}: duplicate patient {patient_id}")]
    DuplicatePatient { file: String, line: u64, patient_id: String },
    #[error("{file}: missing required column {column:?}")]
    MissingColumn { file: String, column: String },
    #[error("invalid extraction window {start}..{end}")]
    InvalidWindow { start: Date, end: Date },
}

/// Counts of rows discarded because they fall outside the window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadSummary {
    pub patients: usize,
    pub dispensings: usize,
    pub hospitalizations: usize,
    pub clinical_events: usize,
    pub dropped_dispensings: usize,
    pub dropped_hospitalizations: usize,
    pub dropped_clinical: usize,
    /// Deaths recorded after the window end; treated as unobserved.
    pub deaths_after_window: usize,
}

impl LoadSummary {
    pub fn dropped(&self) -> usize {
        self.dropped_dispensings + self.dropped_hospitalizations + self.dropped_clinical
    }
}

pub const PATIENTS_FILE: &str = "patients.csv";
pub const DISPENSING_FILE: &str = "dispensing.csv";
pub const HOSPITALIZATIONS_FILE: &str = "hospitalizations.csv";
pub const CLINICAL_FILE: &str = "clinical.csv";

#[derive(Clone, Debug)]
pub struct ClaimsPaths {
    pub patients: PathBuf,
    pub dispensing: PathBuf,
    pub hospitalizations: PathBuf,
    pub clinical: PathBuf,
}

impl ClaimsPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        ClaimsPaths {
            patients: dir.join(PATIENTS_FILE),
            dispensing: dir.join(DISPENSING_FILE),
            hospitalizations: dir.join(HOSPITALIZATIONS_FILE),
            clinical: dir.join(CLINICAL_FILE),
        }
    }
}

pub fn load_claims(paths: &ClaimsPaths, window: Window) -> Result<(ClaimsStore, LoadSummary), ClaimsError> {
    let open = |p: &PathBuf| File::open(p).map_err(|source| ClaimsError::Io { path: p.clone(), source });
    let name = |p: &PathBuf| p.display().to_string();
    load_claims_from_readers(
        (&name(&paths.patients), open(&paths.patients)?),
        (&name(&paths.dispensing), open(&paths.dispensing)?),
        (&name(&paths.hospitalizations), open(&paths.hospitalizations)?),
        (&name(&paths.clinical), open(&paths.clinical)?),
        window,
    )
}

/// Loads a store from four named CSV streams (name is used in errors).
pub fn load_claims_from_readers<P: Read, D: Read, H: Read, C: Read>(
    patients: (&str, P),
    dispensing: (&str, D),
    hospitalizations: (&str, H),
    clinical: (&str, C),
    window: Window,
) -> Result<(ClaimsStore, LoadSummary), ClaimsError> {
    let window = Window::new(window.start, window.end)?;
    let mut summary = LoadSummary::default();
    let mut records: BTreeMap<String, PatientRecord> = BTreeMap::new();

    let mut table = Table::open(patients.0, patients.1, &["patient_id", "birth_year", "sex", "department", "ald_start_date", "death_date"])?;
    let copath_col = table.optional_column("copathology_codes");
    while let Some(row) = table.next_row()? {
        let patient_id = row.required("patient_id")?.to_string();
        let birth_year = row.optional_parse::<i32>("birth_year")?;
        if let Some(y) = birth_year {
            if !(1900..=window.end.year()).contains(&y) {
                return Err(row.malformed("birth_year", format!("{y} outside [1900, {}]", window.end.year())));
            }
        }
        let sex = row.parse_with("sex", Sex::from_str)?;
        let department = row.get("department").trim().to_string();
        let ald_start_date = row.optional_date("ald_start_date")?;
        let mut death_date = row.optional_date("death_date")?;
        if let Some(d) = death_date {
            if d > window.end {
                summary.deaths_after_window += 1;
                death_date = None;
            }
        }
        let copathology_codes = match copath_col {
            Some(idx) => row
                .at(idx)
                .split(';')
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .map(str::to_string)
                .collect(),
            None => BTreeSet::new(),
        };
        if records.contains_key(&patient_id) {
            return Err(ClaimsError::DuplicatePatient { file: row.file.to_string(), line: row.line, patient_id });
        }
        let patient = Patient { patient_id: patient_id.clone(), birth_year, sex, department, ald_start_date, death_date, copathology_codes };
        records.insert(patient_id, PatientRecord::new(patient));
    }

    let mut table = Table::open(dispensing.0, dispensing.1, &["patient_id", "date", "molecule", "boxes", "doses_per_box"])?;
    while let Some(row) = table.next_row()? {
        let patient_id = row.required("patient_id")?;
        let date = row.date("date")?;
        let code = row.get("molecule");
        let molecule = Molecule::from_str(code).map_err(|_| ClaimsError::UnknownMolecule {
            file: row.file.to_string(),
            line: row.line,
            code: code.trim().to_string(),
        })?;
        let boxes = row.parse::<u32>("boxes")?;
        let doses_per_box = row.parse::<u32>("doses_per_box")?;
        let record = row.patient_record(&mut records, patient_id)?;
        if !window.contains(date) {
            summary.dropped_dispensings += 1;
            continue;
        }
        record.dispensings.push(DispensingEvent { patient_id: patient_id.to_string(), date, molecule, boxes, doses_per_box });
    }

    let mut table = Table::open(hospitalizations.0, hospitalizations.1, &["patient_id", "start_date", "end_date", "kind", "diagnosis_code"])?;
    while let Some(row) = table.next_row()? {
        let patient_id = row.required("patient_id")?;
        let start_date = row.date("start_date")?;
        let end_date = row.date("end_date")?;
        if end_date < start_date {
            return Err(row.malformed("end_date", format!("{end_date} precedes start_date {start_date}")));
        }
        let kind = row.parse_with("kind", HospitalizationKind::from_str)?;
        let diagnosis_code = row.get("diagnosis_code").trim().to_string();
        let record = row.patient_record(&mut records, patient_id)?;
        if !(window.contains(start_date) && window.contains(end_date)) {
            summary.dropped_hospitalizations += 1;
            continue;
        }
        record.hospitalizations.push(HospitalizationEvent { patient_id: patient_id.to_string(), start_date, end_date, kind, diagnosis_code });
    }

    let mut table = Table::open(clinical.0, clinical.1, &["patient_id", "date", "kind"])?;
    while let Some(row) = table.next_row()? {
        let patient_id = row.required("patient_id")?;
        let date = row.date("date")?;
        let kind = row.parse_with("kind", ClinicalKind::from_str)?;
        let record = row.patient_record(&mut records, patient_id)?;
        if !window.contains(date) {
            summary.dropped_clinical += 1;
            continue;
        }
        record.clinical.push(ClinicalEvent { patient_id: patient_id.to_string(), date, kind });
    }

    let store = ClaimsStore::from_records(window, records.into_values());
    summary.patients = store.len();
    for r in store.records() {
        summary.dispensings += r.dispensings.len();
        summary.hospitalizations += r.hospitalizations.len();
        summary.clinical_events += r.clinical.len();
    }
    Ok((store, summary))
}

/// Header-indexed CSV reader that reports errors by line and column.
struct Table<R: Read> {
    file: String,
    reader: csv::Reader<R>,
    columns: HashMap<String, usize>,
    record: csv::StringRecord,
}

impl<R: Read> Table<R> {
    fn open(file: &str, input: R, required: &[&str]) -> Result<Self, ClaimsError> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(false).from_reader(input);
        let headers = reader
            .headers()
            .map_err(|source| ClaimsError::Csv { file: file.to_string(), line: 1, source })?
            .clone();
        let columns: HashMap<String, usize> =
            headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(ClaimsError::MissingColumn { file: file.to_string(), column: col.to_string() });
            }
        }
        Ok(Table { file: file.to_string(), reader, columns, record: csv::StringRecord::new() })
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.columns.get(name).copied()
    }

    fn next_row(&mut self) -> Result<Option<Row<'_>>, ClaimsError> {
        let more = self.reader.read_record(&mut self.record).map_err(|source| ClaimsError::Csv {
            file: self.file.clone(),
            line: source.position().map(|p| p.line()).unwrap_or(0),
            source,
        })?;
        if !more {
            return Ok(None);
        }
        let line = self.record.position().map(|p| p.line()).unwrap_or(0);
        Ok(Some(Row { file: &self.file, line, columns: &self.columns, record: &self.record }))
    }
}

struct Row<'a> {
    file: &'a str,
    line: u64,
    columns: &'a HashMap<String, usize>,
    record: &'a csv::StringRecord,
}

impl<'a> Row<'a> {
    fn at(&self, idx: usize) -> &'a str {
        self.record.get(idx).unwrap_or("")
    }

    fn get(&self, column: &str) -> &'a str {
        self.columns.get(column).map(|&i| self.at(i)).unwrap_or("")
    }

    fn malformed(&self, column: &str, reason: impl Into<String>) -> ClaimsError {
        ClaimsError::Malformed { file: self.file.to_string(), line: self.line, column: column.to_string(), reason: reason.into() }
    }

    fn required(&self, column: &str) -> Result<&'a str, ClaimsError> {
        let v = self.get(column).trim();
        if v.is_empty() {
            Err(self.malformed(column, "empty value"))
        } else {
            Ok(v)
        }
    }

    fn parse<T: FromStr>(&self, column: &str) -> Result<T, ClaimsError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.required(column)?;
        raw.parse::<T>().map_err(|e| self.malformed(column, format!("{raw:?}: {e}")))
    }

    fn parse_with<T>(&self, column: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ClaimsError> {
        f(self.get(column)).map_err(|e| self.malformed(column, e))
    }

    fn optional_parse<T: FromStr>(&self, column: &str) -> Result<Option<T>, ClaimsError>
    where
        T::Err: fmt::Display,
    {
        if self.get(column).trim().is_empty() {
            Ok(None)
        } else {
            self.parse(column).map(Some)
        }
    }

    fn date(&self, column: &str) -> Result<Date, ClaimsError> {
        let raw = self.required(column)?;
        parse_date(raw).ok_or_else(|| self.malformed(column, format!("{raw:?} is not a YYYY-MM-DD date")))
    }

    fn optional_date(&self, column: &str) -> Result<Option<Date>, ClaimsError> {
        if self.get(column).trim().is_empty() {
            Ok(None)
        } else {
            self.date(column).map(Some)
        }
    }

    fn patient_record<'m>(
        &self,
        records: &'m mut BTreeMap<String, PatientRecord>,
        patient_id: &str,
    ) -> Result<&'m mut PatientRecord, ClaimsError> {
        records.get_mut(patient_id).ok_or_else(|| ClaimsError::UnknownPatient {
            file: self.file.to_string(),
            line: self.line,
            patient_id: patient_id.to_string(),
        })
    }
}

fn fmt_opt_date(d: Option<Date>) -> String {
    d.map(|d| d.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, body: &str) -> Result<(), ClaimsError> {
    let mut w = BufWriter::new(File::create(path).map_err(|source| ClaimsError::Io { path: path.to_path_buf(), source })?);
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|source| ClaimsError::Io { path: path.to_path_buf(), source })
}

/// Writes the four claims CSVs into `dir`, each preceded by a provenance
/// comment line. Output is a pure function of the store and provenance.
pub fn write_claims(store: &ClaimsStore, dir: &Path, provenance: &Provenance) -> Result<Vec<PathBuf>, ClaimsError> {
    std::fs::create_dir_all(dir).map_err(|source| ClaimsError::Io { path: dir.to_path_buf(), source })?;
    let paths = ClaimsPaths::in_dir(dir);

    let mut body = String::new();
    body.push_str(&provenance.comment_line());
    body.push_str("patient_id,birth_year,sex,department,ald_start_date,death_date,copathology_codes\n");
    for r in store.records() {
        let p = &r.patient;
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.patient_id,
            p.birth_year.map(|y| y.to_string()).unwrap_or_default(),
            p.sex.code(),
            p.department,
            fmt_opt_date(p.ald_start_date),
            fmt_opt_date(p.death_date),
            p.copathology_codes.iter().cloned().collect::<Vec<_>>().join(";"),
        ));
    }
    write_file(&paths.patients, &body)?;

    let mut body = provenance.comment_line();
    body.push_str("patient_id,date,molecule,boxes,doses_per_box\n");
    for r in store.records() {
        for e in &r.dispensings {
            body.push_str(&format!("{},{},{},{},{}\n", e.patient_id, e.date, e.molecule, e.boxes, e.doses_per_box));
        }
    }
    write_file(&paths.dispensing, &body)?;

    let mut body = provenance.comment_line();
    body.push_str("patient_id,start_date,end_date,kind,diagnosis_code\n");
    for r in store.records() {
        for e in &r.hospitalizations {
            body.push_str(&format!("{},{},{},{},{}\n", e.patient_id, e.start_date, e.end_date, e.kind.code(), e.diagnosis_code));
        }
    }
    write_file(&paths.hospitalizations, &body)?;

    let mut body = provenance.comment_line();
    body.push_str("patient_id,date,kind\n");
    for r in store.records() {
        for e in &r.clinical {
            body.push_str(&format!("{},{},{}\n", e.patient_id, e.date, e.kind.code()));
        }
    }
    write_file(&paths.clinical, &body)?;

    Ok(vec![paths.patients, paths.dispensing, paths.hospitalizations, paths.clinical])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    EventAfterDeath,
    AldAfterDeath,
    ZeroDoses,
    BirthYearOutOfRange,
    HospitalizationReversed,
    EventOutsideWindow,
    UnsortedEvents,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub patient_id: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every invariant violation in the store; empty iff consistent.
pub fn validate_store(store: &ClaimsStore) -> ValidationReport {
    let mut violations = Vec::new();
    let window = store.window();
    for r in store.records() {
        let p = &r.patient;
        let mut push = |kind: ViolationKind, detail: String| {
            violations.push(Violation { patient_id: p.patient_id.clone(), kind, detail });
        };
        if let Some(y) = p.birth_year {
            if !(1900..=window.end.year()).contains(&y) {
                push(ViolationKind::BirthYearOutOfRange, format!("birth year {y}"));
            }
        }
        if let (Some(ald), Some(death)) = (p.ald_start_date, p.death_date) {
            if ald > death {
                push(ViolationKind::AldAfterDeath, format!("ALD start {ald} after death {death}"));
            }
        }
        if let Some(death) = p.death_date {
            if death > window.end {
                push(ViolationKind::EventOutsideWindow, format!("death {death} after window end"));
            }
        }
        let mut dated: Vec<(Date, String)> = Vec::new();
        for e in &r.dispensings {
            if e.boxes == 0 || e.doses_per_box == 0 {
                push(ViolationKind::ZeroDoses, format!("{} on {}: {} boxes x {} doses", e.molecule, e.date, e.boxes, e.doses_per_box));
            }
            dated.push((e.date, format!("dispensing of {}", e.molecule)));
        }
        for h in &r.hospitalizations {
            if h.end_date < h.start_date {
                push(ViolationKind::HospitalizationReversed, format!("stay {}..{}", h.start_date, h.end_date));
            }
            dated.push((h.start_date, format!("{} stay", h.kind.code())));
            dated.push((h.end_date, format!("{} stay end", h.kind.code())));
        }
        for c in &r.clinical {
            dated.push((c.date, format!("{} event", c.kind.code())));
        }
        for (date, what) in &dated {
            if !window.contains(*date) {
                push(ViolationKind::EventOutsideWindow, format!("{what} on {date}"));
            }
            if let Some(death) = p.death_date {
                if *date > death {
                    push(ViolationKind::EventAfterDeath, format!("{what} on {date} after death on {death}"));
                }
            }
        }
        if r.dispensings.windows(2).any(|w| w[0].date > w[1].date)
            || r.hospitalizations.windows(2).any(|w| w[0].start_date > w[1].start_date)
            || r.clinical.windows(2).any(|w| w[0].date > w[1].date)
        {
            push(ViolationKind::UnsortedEvents, "event list not sorted by date".into());
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATIENTS: &str = "patient_id,birth_year,sex,department,ald_start_date,death_date\n\
        P1,1950,F,75,2012-05-01,\n\
        P2,1962,F,13,,2014-01-01\n";
    const DISPENSING: &str = "patient_id,date,molecule,boxes,doses_per_box\n\
        P1,2013-03-01,Tamoxifen,1,30\n\
        P1,2013-01-30,Tamoxifen,1,30\n\
        P1,2013-01-30,OTHER:A10BA02,2,28\n\
        P2,2013-02-01,Letrozole,1,30\n";
    const HOSP: &str = "patient_id,start_date,end_date,kind,diagnosis_code\nP2,2013-05-01,2013-05-01,CHEMO,C50\n";
    const CLINICAL: &str = "patient_id,date,kind\nP1,2013-01-10,MASTECTOMY\n";

    fn load(p: &str, d: &str, h: &str, c: &str) -> Result<(ClaimsStore, LoadSummary), ClaimsError> {
        load_claims_from_readers(
            ("patients.csv", p.as_bytes()),
            ("dispensing.csv", d.as_bytes()),
            ("hospitalizations.csv", h.as_bytes()),
            ("clinical.csv", c.as_bytes()),
            Window::default(),
        )
    }

    #[test]
    fn loads_and_sorts() {
        let (store, summary) = load(PATIENTS, DISPENSING, HOSP, CLINICAL).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(summary.dropped(), 0);
        let p1 = store.patient("P1").unwrap();
        let dates: Vec<_> = p1.dispensings.iter().map(|e| e.date.to_string()).collect();
        assert_eq!(dates, ["2013-01-30", "2013-01-30", "2013-03-01"]);
        // study molecules order before other drugs on the same day
        assert_eq!(p1.dispensings[0].molecule, Molecule::Study(StudyMolecule::Tamoxifen));
        assert_eq!(p1.patient.ald_start_date, parse_date("2012-05-01"));
        assert!(validate_store(&store).is_empty());
    }

    #[test]
    fn drops_events_outside_window() {
        let d = format!("{DISPENSING}P1,2016-02-01,Tamoxifen,1,30\n");
        let (store, summary) = load(PATIENTS, &d, HOSP, CLINICAL).unwrap();
        assert_eq!(summary.dropped_dispensings, 1);
        assert_eq!(store.patient("P1").unwrap().dispensings.len(), 3);
    }

    #[test]
    fn window_bounds_are_inclusive() {
        let d = format!("{DISPENSING}P1,2015-12-31,Tamoxifen,1,30\nP1,2013-01-01,Tamoxifen,1,30\n");
        let (_, summary) = load(PATIENTS, &d, HOSP, CLINICAL).unwrap();
        assert_eq!(summary.dropped_dispensings, 0);
    }

    #[test]
    fn unknown_patient_is_reported_with_line() {
        let d = format!("{DISPENSING}P999,2013-04-01,Tamoxifen,1,30\n");
        let err = load(PATIENTS, &d, HOSP, CLINICAL).unwrap_err();
        match &err {
            ClaimsError::UnknownPatient { patient_id, line, .. } => {
                assert_eq!(patient_id, "P999");
                assert_eq!(*line, 6);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("P999"));
    }

    #[test]
    fn unknown_molecule_and_malformed_rows() {
        let d = "patient_id,date,molecule,boxes,doses_per_box\nP1,2013-03-01,Aspirinex,1,30\n";
        assert!(matches!(load(PATIENTS, d, HOSP, CLINICAL), Err(ClaimsError::UnknownMolecule { line: 2, .. })));

        let d = "patient_id,date,molecule,boxes,doses_per_box\nP1,2013-13-01,Tamoxifen,1,30\n";
        match load(PATIENTS, d, HOSP, CLINICAL) {
            Err(ClaimsError::Malformed { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, "date");
            }
            other => panic!("unexpected {other:?}"),
        }

        let d = "patient_id,date,molecule,boxes,doses_per_box\nP1,2013-03-01,Tamoxifen,x,30\n";
        assert!(matches!(load(PATIENTS, d, HOSP, CLINICAL), Err(ClaimsError::Malformed { ref column, .. }) if column == "boxes"));
    }

    #[test]
    fn comment_lines_are_skipped() {
        let p = format!("# generated\n{PATIENTS}");
        let (store, _) = load(&p, DISPENSING, HOSP, CLINICAL).unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn validation_flags_event_after_death() {
        let d = format!("{DISPENSING}P2,2014-06-01,Letrozole,1,30\n");
        let (store, _) = load(PATIENTS, &d, HOSP, CLINICAL).unwrap();
        let report = validate_store(&store);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::EventAfterDeath);
        assert_eq!(report.violations[0].patient_id, "P2");
    }

    #[test]
    fn validation_flags_ald_after_death_and_zero_doses() {
        let p = "patient_id,birth_year,sex,department,ald_start_date,death_date\nP1,1950,F,75,2014-05-01,2014-01-01\n";
        let d = "patient_id,date,molecule,boxes,doses_per_box\nP1,2013-03-01,Tamoxifen,0,30\n";
        let (store, _) = load(p, d, "patient_id,start_date,end_date,kind,diagnosis_code\n", "patient_id,date,kind\n").unwrap();
        let kinds: Vec<_> = validate_store(&store).violations.into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::AldAfterDeath));
        assert!(kinds.contains(&ViolationKind::ZeroDoses));
    }

    #[test]
    fn row_order_within_patient_does_not_matter() {
        let shuffled = "patient_id,date,molecule,boxes,doses_per_box\n\
            P2,2013-02-01,Letrozole,1,30\n\
            P1,2013-01-30,Tamoxifen,1,30\n\
            P1,2013-03-01,Tamoxifen,1,30\n\
            P1,2013-01-30,OTHER:A10BA02,2,28\n";
        let (a, _) = load(PATIENTS, DISPENSING, HOSP, CLINICAL).unwrap();
        let (b, _) = load(PATIENTS, shuffled, HOSP, CLINICAL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn molecule_codes_round_trip() {
        for m in StudyMolecule::ALL {
            assert_eq!(Molecule::from_str(m.name()).unwrap(), Molecule::Study(m));
        }
        assert_eq!(Molecule::from_str("OTHER:N02BE01").unwrap().to_string(), "OTHER:N02BE01");
    }
}
