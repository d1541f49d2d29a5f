//! Synthetic claims cohorts with planted adherence behavior.
//!
//! Each patient draws covariates (age band, copathologies, recent
//! mastectomy, financial support through the long-term-illness scheme), then
//! a behavior for the first treatment phase. The dropout probability is the
//! configured mix weight shifted on the logit scale by the planted
//! covariate effects; the other behaviors share the remaining mass in
//! proportion to their weights.
//!
//! Stopping behaviors end after a geometric number of days (one hazard for
//! every behavior and therapy) so that, absent covariate effects, neither
//! position in the care path nor calendar time carries information about
//! the outcome. A stop whose classification window would run past the
//! extraction end is realized as censored, and the ground truth records
//! what the claims actually show.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::Datelike;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{
    add_days, write_claims, ClaimsError, ClaimsStore, ClinicalEvent, ClinicalKind, Date, DispensingEvent,
    HospitalizationEvent, HospitalizationKind, Molecule, Patient, PatientRecord, Sex, StudyMolecule, Window,
};
use crate::phases::{EndType, LabeledPhase, Therapy};
use crate::provenance::Provenance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviorTag {
    FullyAdherent,
    IllegitimateDropout,
    Switcher,
    DeathStop,
    PalliativeStop,
    CardiacStop,
    Censored,
}

impl BehaviorTag {
    pub const ALL: [BehaviorTag; 7] = [
        BehaviorTag::FullyAdherent,
        BehaviorTag::IllegitimateDropout,
        BehaviorTag::Switcher,
        BehaviorTag::DeathStop,
        BehaviorTag::PalliativeStop,
        BehaviorTag::CardiacStop,
        BehaviorTag::Censored,
    ];

    fn stops(self) -> bool {
        !matches!(self, BehaviorTag::FullyAdherent | BehaviorTag::Censored)
    }
}

/// Planned behavior of a phase with its realized day offsets (days from
/// the window start).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BehaviorKind {
    FullyAdherent,
    IllegitimateDropout { drop_day: i64 },
    Switcher { switch_day: i64, new_therapy: Therapy },
    DeathStop { death_day: i64 },
    PalliativeStop { day: i64 },
    CardiacStop { day: i64 },
    Censored,
}

impl BehaviorKind {
    pub fn tag(&self) -> BehaviorTag {
        match self {
            BehaviorKind::FullyAdherent => BehaviorTag::FullyAdherent,
            BehaviorKind::IllegitimateDropout { .. } => BehaviorTag::IllegitimateDropout,
            BehaviorKind::Switcher { .. } => BehaviorTag::Switcher,
            BehaviorKind::DeathStop { .. } => BehaviorTag::DeathStop,
            BehaviorKind::PalliativeStop { .. } => BehaviorTag::PalliativeStop,
            BehaviorKind::CardiacStop { .. } => BehaviorTag::CardiacStop,
            BehaviorKind::Censored => BehaviorTag::Censored,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    pub kind: BehaviorKind,
    pub purchase_jitter_days: i64,
    pub protocol_interval_days: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMix {
    pub fully_adherent: f64,
    pub illegitimate_dropout: f64,
    pub switcher: f64,
    pub death: f64,
    pub palliative: f64,
    pub cardiac: f64,
    pub censored: f64,
}

impl BehaviorMix {
    pub fn weight(&self, tag: BehaviorTag) -> f64 {
        match tag {
            BehaviorTag::FullyAdherent => self.fully_adherent,
            BehaviorTag::IllegitimateDropout => self.illegitimate_dropout,
            BehaviorTag::Switcher => self.switcher,
            BehaviorTag::DeathStop => self.death,
            BehaviorTag::PalliativeStop => self.palliative,
            BehaviorTag::CardiacStop => self.cardiac,
            BehaviorTag::Censored => self.censored,
        }
    }

    pub fn only(tag: BehaviorTag) -> Self {
        let mut mix = BehaviorMix {
            fully_adherent: 0.0,
            illegitimate_dropout: 0.0,
            switcher: 0.0,
            death: 0.0,
            palliative: 0.0,
            cardiac: 0.0,
            censored: 0.0,
        };
        match tag {
            BehaviorTag::FullyAdherent => mix.fully_adherent = 1.0,
            BehaviorTag::IllegitimateDropout => mix.illegitimate_dropout = 1.0,
            BehaviorTag::Switcher => mix.switcher = 1.0,
            BehaviorTag::DeathStop => mix.death = 1.0,
            BehaviorTag::PalliativeStop => mix.palliative = 1.0,
            BehaviorTag::CardiacStop => mix.cardiac = 1.0,
            BehaviorTag::Censored => mix.censored = 1.0,
        }
        mix
    }

    fn total(&self) -> f64 {
        BehaviorTag::ALL.iter().map(|&t| self.weight(t)).sum()
    }
}

/// Log-odds shifts of the dropout probability, centered on the cohort mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSignal {
    /// Per age band step (under 50, 50 to 69, 70 and over).
    pub age_band: f64,
    /// Per copathology.
    pub copathology: f64,
    pub mastectomy: f64,
    pub financial_support: f64,
}

impl RiskSignal {
    pub fn zero() -> Self {
        RiskSignal { age_band: 0.0, copathology: 0.0, mastectomy: 0.0, financial_support: 0.0 }
    }

    fn shift(&self, c: &Covariates, mastectomy_recent: bool) -> f64 {
        self.age_band * c.age_band as f64
            + self.copathology * c.copathology_count as f64
            + self.mastectomy * f64::from(u8::from(mastectomy_recent))
            + self.financial_support * f64::from(u8::from(c.financial_support))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateMix {
    pub age_band_weights: [f64; 3],
    /// Index = number of copathologies.
    pub copathology_count_weights: Vec<f64>,
    pub mastectomy_rate: f64,
    pub financial_support_rate: f64,
}

impl CovariateMix {
    fn mean_shift(&self, signal: &RiskSignal) -> f64 {
        let band: f64 = self.age_band_weights.iter().enumerate().map(|(i, w)| i as f64 * w).sum();
        let cop: f64 = self.copathology_count_weights.iter().enumerate().map(|(i, w)| i as f64 * w).sum();
        signal.age_band * band
            + signal.copathology * cop
            + signal.mastectomy * self.mastectomy_rate
            + signal.financial_support * self.financial_support_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariates {
    pub age_band: u8,
    pub age: i32,
    pub copathology_count: u8,
    pub mastectomy: bool,
    pub financial_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_patients: usize,
    /// Set from the run's seed and extraction window rather than read from
    /// configuration files.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub window: Window,
    pub behavior_mix: BehaviorMix,
    pub risk_signal: RiskSignal,
    pub covariates: CovariateMix,
    pub molecule_mix: BTreeMap<StudyMolecule, f64>,
    /// Probability that a therapy is a chemotherapy course rather than an
    /// oral molecule.
    pub chemo_weight: f64,
    pub protocol_interval_days: i64,
    pub chemo_interval_days: i64,
    pub purchase_jitter_days: i64,
    pub stop_hazard_per_day: f64,
    /// Extra days added per step to the final gaps before a dropout.
    pub late_gap_days: i64,
    pub late_gap_steps: usize,
    /// First-phase start, in days after the window start (inclusive).
    pub first_start_days: [i64; 2],
    /// Late-start range for censored patients, in days before window end.
    pub censored_start_before_end_days: [i64; 2],
    /// Days after the theoretical last dose within which legitimate stops
    /// are classified; planted stop events fall strictly inside it.
    pub stop_window_days: i64,
    pub max_phases_per_patient: usize,
    pub other_drug_mean_gap_days: f64,
    pub other_hospitalizations_per_year: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::realistic(20_000, 42)
    }
}

fn default_molecule_mix() -> BTreeMap<StudyMolecule, f64> {
    use StudyMolecule::*;
    [
        (Tamoxifen, 0.34),
        (Letrozole, 0.20),
        (Anastrozole, 0.16),
        (Exemestane, 0.10),
        (Capecitabine, 0.06),
        (Cyclophosphamide, 0.03),
        (Vinorelbine, 0.03),
        (Everolimus, 0.02),
        (Lapatinib, 0.02),
        (Megestrol, 0.01),
        (Toremifene, 0.01),
        (Etoposide, 0.01),
        (Melphalan, 0.01),
    ]
    .into_iter()
    .collect()
}

impl SimConfig {
    /// Cohort with a planted covariate signal and dropout rates in the
    /// neighborhood of 11% / 17% / 26% at 90 / 180 / 360 days.
    pub fn realistic(n_patients: usize, seed: u64) -> Self {
        SimConfig {
            n_patients,
            seed,
            window: Window::default(),
            behavior_mix: BehaviorMix {
                fully_adherent: 0.08,
                illegitimate_dropout: 0.30,
                switcher: 0.33,
                death: 0.07,
                palliative: 0.10,
                cardiac: 0.10,
                censored: 0.02,
            },
            risk_signal: RiskSignal { age_band: 1.0, copathology: 0.9, mastectomy: 1.0, financial_support: -1.4 },
            covariates: CovariateMix {
                age_band_weights: [0.25, 0.5, 0.25],
                copathology_count_weights: vec![0.35, 0.30, 0.20, 0.10, 0.05],
                mastectomy_rate: 0.35,
                financial_support_rate: 0.5,
            },
            molecule_mix: default_molecule_mix(),
            chemo_weight: 0.12,
            protocol_interval_days: 30,
            chemo_interval_days: 21,
            purchase_jitter_days: 3,
            stop_hazard_per_day: 0.007,
            late_gap_days: 5,
            late_gap_steps: 3,
            first_start_days: [90, 455],
            censored_start_before_end_days: [100, 300],
            stop_window_days: 60,
            max_phases_per_patient: 5,
            other_drug_mean_gap_days: 90.0,
            other_hospitalizations_per_year: 0.3,
        }
    }

    /// Same cohort shape with every planted effect switched off.
    pub fn null_signal(n_patients: usize, seed: u64) -> Self {
        SimConfig { risk_signal: RiskSignal::zero(), late_gap_days: 0, ..SimConfig::realistic(n_patients, seed) }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.n_patients < 1 {
            errors.push("simulation.n_patients must be >= 1".into());
        }
        let check_weights = |name: &str, ws: &mut dyn Iterator<Item = f64>, errors: &mut Vec<String>| {
            let ws: Vec<f64> = ws.collect();
            if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
                errors.push(format!("simulation.{name}: weights must be finite and nonnegative"));
            }
            let total: f64 = ws.iter().sum();
            if total <= 0.0 {
                errors.push(format!("simulation.{name}: all weights are zero"));
            } else if (total - 1.0).abs() > 1e-6 {
                errors.push(format!("simulation.{name}: weights sum to {total}, expected 1"));
            }
        };
        check_weights("behavior_mix", &mut BehaviorTag::ALL.iter().map(|&t| self.behavior_mix.weight(t)), &mut errors);
        check_weights("molecule_mix", &mut self.molecule_mix.values().copied(), &mut errors);
        check_weights("covariates.age_band_weights", &mut self.covariates.age_band_weights.iter().copied(), &mut errors);
        check_weights(
            "covariates.copathology_count_weights",
            &mut self.covariates.copathology_count_weights.iter().copied(),
            &mut errors,
        );
        if self.covariates.copathology_count_weights.len() > COPATHOLOGY_CODES.len() + 1 {
            errors.push(format!("simulation.covariates.copathology_count_weights: at most {} copathologies", COPATHOLOGY_CODES.len()));
        }
        for (name, p) in [
            ("covariates.mastectomy_rate", self.covariates.mastectomy_rate),
            ("covariates.financial_support_rate", self.covariates.financial_support_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errors.push(format!("simulation.{name} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.chemo_weight) {
            errors.push("simulation.chemo_weight must lie in [0, 1)".into());
        }
        if !(self.stop_hazard_per_day > 0.0 && self.stop_hazard_per_day < 1.0) {
            errors.push("simulation.stop_hazard_per_day must lie in (0, 1)".into());
        }
        let min_interval = self.protocol_interval_days.min(self.chemo_interval_days);
        if min_interval < 1 {
            errors.push("simulation intervals must be >= 1 day".into());
        }
        if self.purchase_jitter_days < 0 || self.purchase_jitter_days >= min_interval {
            errors.push("simulation.purchase_jitter_days must be >= 0 and below the protocol intervals".into());
        }
        if self.stop_window_days < 2 * self.purchase_jitter_days + 12 {
            errors.push("simulation.stop_window_days too small for the configured jitter".into());
        }
        if self.late_gap_days < 0 {
            errors.push("simulation.late_gap_days must be >= 0".into());
        }
        let len = self.window.len_days();
        let [a, b] = self.first_start_days;
        if a < 0 || b < a || b > len {
            errors.push("simulation.first_start_days must be an increasing range inside the window".into());
        }
        let [a, b] = self.censored_start_before_end_days;
        if a < 0 || b < a || b > len {
            errors.push("simulation.censored_start_before_end_days must be an increasing range inside the window".into());
        }
        if self.max_phases_per_patient < 1 {
            errors.push("simulation.max_phases_per_patient must be >= 1".into());
        }
        if self.other_drug_mean_gap_days <= 0.0 || self.other_hospitalizations_per_year < 0.0 {
            errors.push("simulation noise rates must be positive".into());
        }
        errors
    }

    fn dropout_probability(&self, c: &Covariates, mastectomy_recent: bool) -> f64 {
        let w = self.behavior_mix.illegitimate_dropout / self.behavior_mix.total();
        if w <= 0.0 || w >= 1.0 {
            return w.clamp(0.0, 1.0);
        }
        let logit = (w / (1.0 - w)).ln() + self.risk_signal.shift(c, mastectomy_recent)
            - self.covariates.mean_shift(&self.risk_signal);
        1.0 / (1.0 + (-logit).exp())
    }

    /// Exact expected first-phase dropout rate, enumerating the discrete
    /// covariate distribution.
    pub fn expected_dropout_rate(&self) -> f64 {
        let cov = &self.covariates;
        let mut total = 0.0;
        for (band, wb) in cov.age_band_weights.iter().enumerate() {
            for (count, wc) in cov.copathology_count_weights.iter().enumerate() {
                for (mast, wm) in [(false, 1.0 - cov.mastectomy_rate), (true, cov.mastectomy_rate)] {
                    for (fin, wf) in [(false, 1.0 - cov.financial_support_rate), (true, cov.financial_support_rate)] {
                        let c = Covariates {
                            age_band: band as u8,
                            age: 0,
                            copathology_count: count as u8,
                            mastectomy: mast,
                            financial_support: fin,
                        };
                        total += wb * wc * wm * wf * self.dropout_probability(&c, mast);
                    }
                }
            }
        }
        total
    }

    /// Behavior weights for one phase after the dropout shift.
    fn phase_weights(&self, c: &Covariates, mastectomy_recent: bool, follow_on: bool, allow_switch: bool) -> Vec<(BehaviorTag, f64)> {
        let total = self.behavior_mix.total();
        let base_drop = self.behavior_mix.illegitimate_dropout / total;
        let p_drop = self.dropout_probability(c, mastectomy_recent);
        let others: Vec<(BehaviorTag, f64)> = BehaviorTag::ALL
            .iter()
            .copied()
            .filter(|&t| t != BehaviorTag::IllegitimateDropout)
            .filter(|&t| !(follow_on && t == BehaviorTag::Censored))
            .filter(|&t| allow_switch || t != BehaviorTag::Switcher)
            .map(|t| (t, self.behavior_mix.weight(t) / total))
            .collect();
        let other_mass: f64 = others.iter().map(|(_, w)| w).sum();
        let mut out = vec![(BehaviorTag::IllegitimateDropout, p_drop)];
        if other_mass > 0.0 {
            out.extend(others.into_iter().map(|(t, w)| (t, w / other_mass * (1.0 - p_drop))));
        } else if base_drop < 1.0 {
            out.push((BehaviorTag::FullyAdherent, 1.0 - p_drop));
        }
        out
    }
}

pub const COPATHOLOGY_CODES: [&str; 6] = ["DIAB", "HTA", "DEPR", "COPD", "CKD", "ARTH"];
const OTHER_DIAGNOSES: [&str; 6] = ["I10", "E11", "F32", "J44", "N18", "M17"];
const CHEMO_DIAGNOSIS: &str = "C50";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TruthEnd {
    Illegitimate,
    Switch,
    Death,
    Palliative,
    Cardiac,
    Censored,
}

impl TruthEnd {
    pub fn code(self) -> &'static str {
        match self {
            TruthEnd::Illegitimate => "ILLEGITIMATE",
            TruthEnd::Switch => "SWITCH",
            TruthEnd::Death => "DEATH",
            TruthEnd::Palliative => "PALLIATIVE",
            TruthEnd::Cardiac => "CARDIAC",
            TruthEnd::Censored => "CENSORED",
        }
    }

    /// The phase end type the claims should show.
    pub fn expected_end_type(self) -> EndType {
        match self {
            TruthEnd::Illegitimate => EndType::IllegitimateStop,
            TruthEnd::Switch => EndType::Switch,
            TruthEnd::Death => EndType::Death,
            TruthEnd::Palliative => EndType::PalliativeCare,
            TruthEnd::Cardiac => EndType::CardiacIssue,
            TruthEnd::Censored => EndType::RightCensored,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub patient_id: String,
    pub phase_index: usize,
    pub therapy: Therapy,
    pub start_date: Date,
    pub planned_end_kind: TruthEnd,
    pub planned_end_date: Date,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub covariates: Covariates,
    /// First-phase behavior as drawn from the mix.
    pub behavior: BehaviorProfile,
    pub dropout_probability: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub phases: Vec<TruthRecord>,
    pub patients: Vec<PatientTruth>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Claims(#[from] ClaimsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-patient stream seed derived from the cohort seed and index.
pub fn patient_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 ^ 0xA5A5_5A5A_0F0F_F0F0))
}

pub fn patient_id(index: usize) -> String {
    format!("P{:06}", index + 1)
}

/// One phase as realized in the claims.
struct RealizedPhase {
    therapy: Therapy,
    intakes: Vec<i64>,
    end: TruthEnd,
    end_day: i64,
    kind: BehaviorKind,
}

struct PhaseSchedule<'a> {
    cfg: &'a SimConfig,
    window_days: i64,
}

impl PhaseSchedule<'_> {
    fn interval(&self, therapy: Therapy) -> i64 {
        if therapy == Therapy::Chemotherapy {
            self.cfg.chemo_interval_days
        } else {
            self.cfg.protocol_interval_days
        }
    }

    fn jitter(&self, rng: &mut ChaCha8Rng) -> i64 {
        let j = self.cfg.purchase_jitter_days;
        if j == 0 {
            0
        } else {
            rng.gen_range(-j..=j)
        }
    }

    /// Realizes one phase from its behavior tag.
    fn realize(&self, therapy: Therapy, start: i64, tag: BehaviorTag, new_therapy: Option<Therapy>, rng: &mut ChaCha8Rng) -> RealizedPhase {
        let cfg = self.cfg;
        let interval = self.interval(therapy);
        let last_day = self.window_days;
        // Stop day for stopping behaviors: geometric in days.
        let stop_after = if tag.stops() {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            Some(1 + (u.ln() / (1.0 - cfg.stop_hazard_per_day).ln()).floor() as i64)
        } else {
            None
        };
        let mut intakes = vec![start];
        let mut ran_to_end = true;
        loop {
            let next = intakes.last().unwrap() + interval + self.jitter(rng);
            if next > last_day {
                break;
            }
            if let Some(d) = stop_after {
                if next - start >= d {
                    ran_to_end = false;
                    break;
                }
            }
            intakes.push(next);
        }
        if ran_to_end && stop_after.is_some() {
            // stop day falls beyond the last feasible intake
            ran_to_end = stop_after.unwrap() > last_day - start;
        }

        if tag == BehaviorTag::IllegitimateDropout && !ran_to_end && cfg.late_gap_days > 0 {
            let n = intakes.len();
            let steps = cfg.late_gap_steps.min(n.saturating_sub(1));
            let mut extra = 0;
            for (rank, i) in ((n - steps)..n).enumerate() {
                extra += cfg.late_gap_days * (rank as i64 + 1);
                intakes[i] += extra;
            }
            while intakes.len() > 1 && *intakes.last().unwrap() > last_day {
                intakes.pop();
            }
        }

        let last = *intakes.last().unwrap();
        let tld = last + interval;
        let censored = |intakes: Vec<i64>, kind: BehaviorKind| RealizedPhase { therapy, intakes, end: TruthEnd::Censored, end_day: last_day, kind };
        if !tag.stops() || ran_to_end {
            let kind = match tag {
                BehaviorTag::Censored => BehaviorKind::Censored,
                _ => BehaviorKind::FullyAdherent,
            };
            return censored(intakes, kind);
        }
        if tag == BehaviorTag::IllegitimateDropout {
            let kind = BehaviorKind::IllegitimateDropout { drop_day: last };
            if tld + cfg.stop_window_days > last_day {
                return censored(intakes, kind);
            }
            return RealizedPhase { therapy, intakes, end: TruthEnd::Illegitimate, end_day: last, kind };
        }
        let j = cfg.purchase_jitter_days;
        let lo = j + 5;
        let hi = (cfg.stop_window_days - 5 - j).max(lo);
        let event = tld + rng.gen_range(lo..=hi);
        let (end, kind) = match tag {
            BehaviorTag::Switcher => (
                TruthEnd::Switch,
                BehaviorKind::Switcher { switch_day: event, new_therapy: new_therapy.expect("switch target") },
            ),
            BehaviorTag::DeathStop => (TruthEnd::Death, BehaviorKind::DeathStop { death_day: event }),
            BehaviorTag::PalliativeStop => (TruthEnd::Palliative, BehaviorKind::PalliativeStop { day: event }),
            BehaviorTag::CardiacStop => (TruthEnd::Cardiac, BehaviorKind::CardiacStop { day: event }),
            _ => unreachable!("non-stopping tags handled above"),
        };
        if event > last_day {
            return censored(intakes, kind);
        }
        RealizedPhase { therapy, intakes, end, end_day: event, kind }
    }
}

fn sample_tag(weights: &[(BehaviorTag, f64)], rng: &mut ChaCha8Rng) -> BehaviorTag {
    let dist = WeightedIndex::new(weights.iter().map(|(_, w)| w.max(0.0))).expect("behavior weights");
    weights[dist.sample(rng)].0
}

fn sample_therapy(cfg: &SimConfig, exclude: &BTreeSet<Therapy>, rng: &mut ChaCha8Rng) -> Option<Therapy> {
    let mut options: Vec<(Therapy, f64)> = cfg
        .molecule_mix
        .iter()
        .map(|(&m, &w)| (Therapy::Molecule(m), w * (1.0 - cfg.chemo_weight)))
        .collect();
    options.push((Therapy::Chemotherapy, cfg.chemo_weight));
    options.retain(|(t, w)| *w > 0.0 && !exclude.contains(t));
    if options.is_empty() {
        return None;
    }
    let dist = WeightedIndex::new(options.iter().map(|(_, w)| *w)).ok()?;
    Some(options[dist.sample(rng)].0)
}

fn exp_gap(rng: &mut ChaCha8Rng, mean: f64) -> i64 {
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    (-u.ln() * mean).ceil().max(1.0) as i64
}

const DEPARTMENTS: [&str; 20] = [
    "01", "06", "13", "14", "21", "2A", "29", "31", "33", "35", "44", "59", "63", "67", "69", "75", "76", "83", "92", "974",
];

fn simulate_patient(index: usize, cfg: &SimConfig) -> (PatientRecord, Vec<TruthRecord>, PatientTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(cfg.seed, index));
    let id = patient_id(index);
    let window = cfg.window;
    let window_days = window.len_days();
    let date = |d: i64| add_days(window.start, d);
    let cov_mix = &cfg.covariates;

    let age_band = WeightedIndex::new(cov_mix.age_band_weights).map(|d| d.sample(&mut rng)).unwrap_or(1);
    let age = match age_band {
        0 => rng.gen_range(30..=49),
        1 => rng.gen_range(50..=69),
        _ => rng.gen_range(70..=89),
    };
    let copathology_count = WeightedIndex::new(&cov_mix.copathology_count_weights).map(|d| d.sample(&mut rng)).unwrap_or(0);
    let copathologies: Vec<&str> = COPATHOLOGY_CODES.choose_multiple(&mut rng, copathology_count).copied().collect();
    let mastectomy = rng.gen_bool(cov_mix.mastectomy_rate);
    let financial_support = rng.gen_bool(cov_mix.financial_support_rate);
    let covariates = Covariates { age_band: age_band as u8, age, copathology_count: copathology_count as u8, mastectomy, financial_support };

    let first_weights = cfg.phase_weights(&covariates, mastectomy, false, cfg.max_phases_per_patient > 1);
    let dropout_probability = first_weights[0].1;
    let first_tag = sample_tag(&first_weights, &mut rng);
    let first_start = if first_tag == BehaviorTag::Censored {
        let [a, b] = cfg.censored_start_before_end_days;
        window_days - rng.gen_range(a..=b)
    } else {
        let [a, b] = cfg.first_start_days;
        rng.gen_range(a..=b)
    };
    let birth_year = date(first_start).year() - age;
    let department = DEPARTMENTS.choose(&mut rng).unwrap().to_string();

    let mut record = PatientRecord::new(Patient {
        patient_id: id.clone(),
        birth_year: Some(birth_year),
        sex: Sex::Female,
        department,
        ald_start_date: None,
        death_date: None,
        copathology_codes: copathologies.iter().map(|s| s.to_string()).collect(),
    });
    if financial_support {
        record.patient.ald_start_date = Some(date(first_start - rng.gen_range(0..=365)));
    }
    if mastectomy {
        let d = first_start - rng.gen_range(10..=80);
        if d >= 0 {
            record.clinical.push(ClinicalEvent { patient_id: id.clone(), date: date(d), kind: ClinicalKind::Mastectomy });
        }
    }

    let schedule = PhaseSchedule { cfg, window_days };
    let mut used = BTreeSet::new();
    let mut therapy = sample_therapy(cfg, &used, &mut rng).expect("validated therapy mix");
    let mut start = first_start;
    let mut tag = first_tag;
    let mut truth: Vec<TruthRecord> = Vec::new();
    let mut first_profile = None;
    let mut life_end = window_days;
    let mut previous_close = None;
    for phase_index in 0..cfg.max_phases_per_patient {
        used.insert(therapy);
        let mut next_therapy = None;
        if tag == BehaviorTag::Switcher {
            next_therapy = sample_therapy(cfg, &used, &mut rng);
            if next_therapy.is_none() {
                tag = BehaviorTag::FullyAdherent;
            }
        }
        let phase = schedule.realize(therapy, start, tag, next_therapy, &mut rng);
        if first_profile.is_none() {
            first_profile = Some(BehaviorProfile {
                kind: phase.kind.clone(),
                purchase_jitter_days: cfg.purchase_jitter_days,
                protocol_interval_days: schedule.interval(therapy),
            });
        }
        for &d in &phase.intakes {
            match phase.therapy {
                Therapy::Molecule(m) => record.dispensings.push(DispensingEvent {
                    patient_id: id.clone(),
                    date: date(d),
                    molecule: Molecule::Study(m),
                    boxes: 1,
                    doses_per_box: cfg.protocol_interval_days as u32,
                }),
                _ => record.hospitalizations.push(HospitalizationEvent {
                    patient_id: id.clone(),
                    start_date: date(d),
                    end_date: date(d),
                    kind: if phase.therapy == Therapy::Chemotherapy { HospitalizationKind::Chemotherapy } else { HospitalizationKind::Radiotherapy },
                    diagnosis_code: CHEMO_DIAGNOSIS.into(),
                }),
            }
        }
        // A stop event of this phase inside the previous phase's window
        // outranks that phase's switch.
        if let (Some(close), Some(prev)) = (previous_close, truth.last_mut()) {
            let outranks = matches!(phase.end, TruthEnd::Death | TruthEnd::Palliative | TruthEnd::Cardiac);
            if outranks && phase.end_day <= close {
                prev.planned_end_kind = phase.end;
                prev.planned_end_date = date(phase.end_day);
            }
        }
        truth.push(TruthRecord {
            patient_id: id.clone(),
            phase_index,
            therapy,
            start_date: date(start),
            planned_end_kind: phase.end,
            planned_end_date: date(phase.end_day),
        });
        match phase.end {
            TruthEnd::Death => {
                record.patient.death_date = Some(date(phase.end_day));
                life_end = phase.end_day;
            }
            TruthEnd::Palliative => record.clinical.push(ClinicalEvent {
                patient_id: id.clone(),
                date: date(phase.end_day),
                kind: ClinicalKind::PalliativeCareStart,
            }),
            TruthEnd::Cardiac => record.clinical.push(ClinicalEvent {
                patient_id: id.clone(),
                date: date(phase.end_day),
                kind: ClinicalKind::SeriousCardiacIssue,
            }),
            _ => {}
        }
        if phase.end != TruthEnd::Switch || phase_index + 1 == cfg.max_phases_per_patient {
            break;
        }
        therapy = next_therapy.expect("switch target drawn");
        previous_close = Some(phase.intakes.last().unwrap() + schedule.interval(phase.therapy) + cfg.stop_window_days);
        start = phase.end_day;
        let allow_switch = phase_index + 2 < cfg.max_phases_per_patient;
        let weights = cfg.phase_weights(&covariates, false, true, allow_switch);
        tag = sample_tag(&weights, &mut rng);
    }

    // Background events: other-drug purchases per copathology and unrelated stays.
    for code in &copathologies {
        let mut d = exp_gap(&mut rng, cfg.other_drug_mean_gap_days) - 1;
        while d <= life_end {
            record.dispensings.push(DispensingEvent {
                patient_id: id.clone(),
                date: date(d),
                molecule: Molecule::Other(code.to_string()),
                boxes: 1,
                doses_per_box: 30,
            });
            d += exp_gap(&mut rng, cfg.other_drug_mean_gap_days);
        }
    }
    if cfg.other_hospitalizations_per_year > 0.0 {
        let mean_gap = 365.0 / cfg.other_hospitalizations_per_year;
        let mut d = exp_gap(&mut rng, mean_gap);
        while d <= life_end {
            let stay = rng.gen_range(0..=6);
            if d + stay <= life_end {
                record.hospitalizations.push(HospitalizationEvent {
                    patient_id: id.clone(),
                    start_date: date(d),
                    end_date: date(d + stay),
                    kind: HospitalizationKind::Other,
                    diagnosis_code: OTHER_DIAGNOSES.choose(&mut rng).unwrap().to_string(),
                });
            }
            d += exp_gap(&mut rng, mean_gap);
        }
    }
    record.sort_events();

    let patient_truth = PatientTruth {
        patient_id: id,
        covariates,
        behavior: first_profile.expect("at least one phase"),
        dropout_probability,
    };
    (record, truth, patient_truth)
}

/// Generates a cohort. The result is a pure function of `config`; patients
/// are generated from independent per-index seeds and kept in index order.
pub fn simulate_cohort(config: &SimConfig) -> Result<(ClaimsStore, GroundTruth), SimError> {
    let errors = config.validate();
    if !errors.is_empty() {
        return Err(SimError::InvalidConfig(errors));
    }
    let results: Vec<_> = (0..config.n_patients).into_par_iter().map(|i| simulate_patient(i, config)).collect();
    let mut truth = GroundTruth::default();
    let mut records = Vec::with_capacity(results.len());
    for (record, phases, patient) in results {
        records.push(record);
        truth.phases.extend(phases);
        truth.patients.push(patient);
    }
    Ok((ClaimsStore::from_records(config.window, records), truth))
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

/// Writes the four claims CSVs and `ground_truth.csv` into `out_dir`.
pub fn emit_claims(store: &ClaimsStore, truth: &GroundTruth, out_dir: &Path, provenance: &Provenance) -> Result<Vec<PathBuf>, SimError> {
    let mut files = write_claims(store, out_dir, provenance)?;
    let path = out_dir.join(GROUND_TRUTH_FILE);
    let io = |source| SimError::Io { path: path.clone(), source };
    let mut body = provenance.comment_line();
    body.push_str("patient_id,phase_index,therapy,start_date,planned_end_kind,planned_end_date\n");
    for t in &truth.phases {
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.patient_id,
            t.phase_index,
            t.therapy,
            t.start_date,
            t.planned_end_kind.code(),
            t.planned_end_date
        ));
    }
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io)?;
    files.push(path);
    Ok(files)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RecoveryStats {
    pub planted: usize,
    pub detected: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of detected illegitimate stops against planted
/// dropouts. Phases are matched on patient, therapy and start date.
pub fn recovery_stats(truth: &GroundTruth, phases: &[LabeledPhase]) -> RecoveryStats {
    let planted: BTreeSet<(&str, Therapy, Date)> = truth
        .phases
        .iter()
        .filter(|t| t.planned_end_kind == TruthEnd::Illegitimate)
        .map(|t| (t.patient_id.as_str(), t.therapy, t.start_date))
        .collect();
    let detected: BTreeSet<(&str, Therapy, Date)> = phases
        .iter()
        .filter(|p| p.phase.end_type == EndType::IllegitimateStop)
        .map(|p| (p.phase.patient_id.as_str(), p.phase.therapy, p.phase.start_date))
        .collect();
    let tp = planted.intersection(&detected).count();
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    RecoveryStats {
        planted: planted.len(),
        detected: detected.len(),
        true_positives: tp,
        precision: ratio(tp, detected.len()),
        recall: ratio(tp, planted.len()),
    }
}
