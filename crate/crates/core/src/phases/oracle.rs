//! Reference labeler used to cross-check the phase pipeline.
//!
//! Everything here is recomputed from the raw event lists by day-by-day
//! scanning, sharing no code with the pipeline beyond the domain types.

use std::collections::BTreeSet;

use serde::Serialize;

use super::{EndType, HorizonLabel, LabeledPhase, LegitStop, MedianMode, Outcome, Phase, PhaseConfig, Therapy};
use crate::claims::{ClaimsStore, ClinicalKind, Date, HospitalizationKind, Molecule, PatientRecord};

fn intake_dates(record: &PatientRecord, therapy: Therapy) -> Vec<Date> {
    let mut dates = BTreeSet::new();
    for d in &record.dispensings {
        if let (Therapy::Molecule(m), Molecule::Study(bought)) = (therapy, &d.molecule) {
            if m == *bought {
                dates.insert(d.date);
            }
        }
    }
    for h in &record.hospitalizations {
        let matches = matches!(
            (therapy, h.kind),
            (Therapy::Chemotherapy, HospitalizationKind::Chemotherapy) | (Therapy::Radiotherapy, HospitalizationKind::Radiotherapy)
        );
        if matches {
            dates.insert(h.start_date);
        }
    }
    dates.into_iter().collect()
}

fn naive_median(mut values: Vec<i64>) -> Option<i64> {
    if values.is_empty() {
        return None;
    }
    // insertion sort
    for i in 1..values.len() {
        let mut j = i;
        while j > 0 && values[j - 1] > values[j] {
            values.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = values.len();
    if n % 2 == 1 {
        Some(values[n / 2])
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        // half-up rounding of (a + b) / 2 for non-negative gaps
        Some((a + b + 1) / 2)
    }
}

fn gaps_of(dates: &[Date]) -> Vec<i64> {
    let mut out = Vec::new();
    for i in 1..dates.len() {
        out.push((dates[i] - dates[i - 1]).num_days());
    }
    out
}

/// Cohort median for one therapy, or the configured default when no gap
/// exists anywhere.
pub fn brute_force_median(store: &ClaimsStore, therapy: Therapy, cfg: &PhaseConfig) -> i64 {
    let mut all = Vec::new();
    for r in store.records() {
        all.extend(gaps_of(&intake_dates(r, therapy)));
    }
    match naive_median(all) {
        Some(m) if m > 0 => m,
        _ => cfg.default_interval(therapy),
    }
}

fn shift(d: Date, days: i64) -> Date {
    d + chrono::Duration::days(days)
}

/// Labels the phases of one therapy for one patient given the cohort
/// median, by walking the calendar one day at a time.
pub fn brute_force_label(
    record: &PatientRecord,
    therapy: Therapy,
    cohort_median: i64,
    extraction_end: Date,
    cfg: &PhaseConfig,
) -> Vec<LabeledPhase> {
    let dates = intake_dates(record, therapy);
    if dates.is_empty() {
        return Vec::new();
    }
    let intake_days: BTreeSet<Date> = dates.iter().copied().collect();
    let threshold = cohort_median + cfg.gap_margin_days;

    // day-by-day segmentation
    let mut groups: Vec<Vec<Date>> = Vec::new();
    let mut current: Vec<Date> = Vec::new();
    let mut idle = 0i64;
    let mut day = dates[0];
    let last_day = *dates.last().unwrap();
    while day <= last_day {
        if intake_days.contains(&day) {
            if !current.is_empty() && idle > threshold {
                groups.push(std::mem::take(&mut current));
            }
            current.push(day);
            idle = 0;
        }
        idle += 1;
        day = shift(day, 1);
    }
    groups.push(current);

    let other_therapy_days: BTreeSet<Date> = Therapy::all()
        .filter(|&t| t != therapy)
        .filter(|&t| cfg.switch_includes_hospitalization || !(t.is_hospitalization() || therapy.is_hospitalization()))
        .flat_map(|t| intake_dates(record, t))
        .collect();

    let mut out = Vec::new();
    for group in groups {
        let start = group[0];
        let last = *group.last().unwrap();
        let median = match cfg.median_mode {
            MedianMode::Cohort => cohort_median,
            MedianMode::PerPhase => naive_median(gaps_of(&group)).filter(|&m| m > 0).unwrap_or(cohort_median),
        };
        let tld = shift(last, median);
        let close = shift(tld, cfg.stop_window_days);

        let mut found: Vec<LegitStop> = Vec::new();
        let mut d = shift(last, 1);
        while d <= close {
            if record.patient.death_date == Some(d) {
                found.push(LegitStop::Death);
            }
            for c in &record.clinical {
                if c.date == d && c.kind == ClinicalKind::PalliativeCareStart {
                    found.push(LegitStop::Palliative);
                }
                if c.date == d && c.kind == ClinicalKind::SeriousCardiacIssue {
                    found.push(LegitStop::Cardiac);
                }
            }
            if other_therapy_days.contains(&d) {
                found.push(LegitStop::Switch);
            }
            d = shift(d, 1);
        }
        let end_type = match cfg.stop_priority.iter().find(|s| found.contains(s)) {
            Some(LegitStop::Death) => EndType::Death,
            Some(LegitStop::Palliative) => EndType::PalliativeCare,
            Some(LegitStop::Cardiac) => EndType::CardiacIssue,
            Some(LegitStop::Switch) => EndType::Switch,
            None if extraction_end < close => EndType::RightCensored,
            None => EndType::IllegitimateStop,
        };

        let mut mastectomy_recent = false;
        for k in 0..=cfg.mastectomy_lookback_days {
            let probe = shift(start, -k);
            if record.clinical.iter().any(|c| c.kind == ClinicalKind::Mastectomy && c.date == probe) {
                mastectomy_recent = true;
            }
        }

        let mut labels = Vec::new();
        for &h in &cfg.horizons {
            let stop_offset = (tld - start).num_days();
            let observed_days = (extraction_end - start).num_days();
            let outcome = match end_type {
                EndType::IllegitimateStop if stop_offset <= h => Outcome::NonAdherent,
                EndType::RightCensored if observed_days < h => Outcome::Excluded,
                _ => Outcome::Adherent,
            };
            labels.push(HorizonLabel { horizon_days: h, outcome });
        }

        out.push(LabeledPhase {
            phase: Phase {
                patient_id: record.patient.patient_id.clone(),
                therapy,
                start_date: start,
                last_event_date: last,
                n_intakes: group.len(),
                median_interval_days: median,
                theoretical_last_dose: tld,
                end_type,
                mastectomy_recent,
            },
            labels,
        });
    }
    out
}

/// Reference output for a whole store, in pipeline order.
pub fn brute_force_cohort(store: &ClaimsStore, cfg: &PhaseConfig) -> Vec<LabeledPhase> {
    let medians: Vec<(Therapy, i64)> = Therapy::all().map(|t| (t, brute_force_median(store, t, cfg))).collect();
    let mut out = Vec::new();
    for r in store.records() {
        let mut mine = Vec::new();
        for &(t, m) in &medians {
            mine.extend(brute_force_label(r, t, m, store.extraction_end(), cfg));
        }
        mine.sort_by(|a, b| a.phase.start_date.cmp(&b.phase.start_date).then(a.phase.therapy.cmp(&b.phase.therapy)));
        out.extend(mine);
    }
    out
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleReport {
    pub pipeline_phases: usize,
    pub oracle_phases: usize,
    pub matching_rows: usize,
    pub mismatches: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.pipeline_phases == self.oracle_phases
    }
}

/// Compares pipeline phases against the reference, row by row.
pub fn oracle_check(store: &ClaimsStore, cfg: &PhaseConfig) -> OracleReport {
    let pipeline = super::label_cohort(store, cfg).phases;
    let reference = brute_force_cohort(store, cfg);
    let mut report = OracleReport { pipeline_phases: pipeline.len(), oracle_phases: reference.len(), ..Default::default() };
    for (i, (a, b)) in pipeline.iter().zip(&reference).enumerate() {
        if a == b {
            report.matching_rows += 1;
        } else if report.mismatches.len() < 20 {
            report.mismatches.push(format!("row {i}: pipeline {a:?} != oracle {b:?}"));
        }
    }
    if pipeline.len() != reference.len() {
        report.mismatches.push(format!("row count {} != {}", pipeline.len(), reference.len()));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{StudyMolecule, Window};
    use crate::phases::tests::{buy, day, patient};

    #[test]
    fn empty_history_gives_nothing() {
        let r = patient("P1");
        let out = brute_force_label(&r, Therapy::Molecule(StudyMolecule::Tamoxifen), 30, day(1000), &PhaseConfig::default());
        assert!(out.is_empty());
    }

    #[test]
    fn boundary_gap_agrees_with_pipeline() {
        let mut r = patient("P1");
        // gap of exactly median + 60 = 90, then 91
        for d in [0, 30, 60, 90, 120, 210, 240, 270, 361] {
            buy(&mut r, StudyMolecule::Tamoxifen, d);
        }
        let store = ClaimsStore::from_records(Window::default(), [r]);
        let report = oracle_check(&store, &PhaseConfig::default());
        assert!(report.passed(), "{:?}", report.mismatches);
        assert_eq!(report.pipeline_phases, 2);
    }

    #[test]
    fn naive_median_matches_rule() {
        assert_eq!(naive_median(vec![60, 28, 32, 30]), Some(31));
        assert_eq!(naive_median(vec![32, 30, 28]), Some(30));
    }
}
