//! Audit report assembly and emission (JSON document plus flat CSV
//! tables).

use std::collections::BTreeSet;
use std::path::Path;

use crate::attacks::{AttackKind, AttackVariant};
use crate::defenses::RestrictionPolicy;
use crate::fairness::FairnessReport;
use crate::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Which deployment model an attack ran against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    Biased,
    Fair,
    /// FD variants consume both models at once.
    Pair,
}

impl AttackTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackTarget::Biased => "biased",
            AttackTarget::Fair => "fair",
            AttackTarget::Pair => "pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackMetrics {
    pub kind: AttackKind,
    pub variant: AttackVariant,
    pub target: AttackTarget,
    pub acc_a: f64,
    pub auc_a: f64,
    /// TPR at 1% FPR; absent when too few negatives resolve it.
    pub tpr_at_1pct: Option<f64>,
    /// TPR at 0.1% FPR; reported only with >= 10000 negatives.
    pub tpr_at_01pct: Option<f64>,
    /// Held-out AUC of the raw top probability, recorded for
    /// score_single attacks to expose threshold degradation.
    pub raw_score_auc: Option<f64>,
}

impl AttackMetrics {
    pub fn key(&self) -> (AttackKind, AttackVariant, AttackTarget) {
        (self.kind, self.variant, self.target)
    }
}

/// Target quality plus attack results for the DP / restriction phase.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DefenseReport {
    /// Accounted privacy budget when DP-SGD is active.
    pub epsilon: Option<f64>,
    pub restriction: RestrictionPolicy,
    pub target_biased: Option<FairnessReport>,
    pub target_fair: Option<FairnessReport>,
    pub attacks: Vec<AttackMetrics>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SeedStatus {
    Completed,
    Failed { stage: String, message: String },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub status: SeedStatus,
    pub target_biased: Option<FairnessReport>,
    pub target_fair: Option<FairnessReport>,
    pub attacks: Vec<AttackMetrics>,
    pub defense: Option<DefenseReport>,
}

impl SeedReport {
    pub fn completed(&self) -> bool {
        matches!(self.status, SeedStatus::Completed)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical JSON encoding of the experiment config.
    pub config_hash: String,
    /// Wall-clock time of report assembly; the only field excluded from
    /// determinism comparisons.
    pub timestamp: String,
    pub seeds: Vec<u64>,
    pub quick: bool,
    /// How per-stage seeds derive from each experiment seed.
    pub stage_seed_scheme: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MedianReport {
    /// Seeds the medians aggregate over; failed seeds are excluded.
    pub completed_seeds: usize,
    pub target_biased: Option<FairnessReport>,
    pub target_fair: Option<FairnessReport>,
    pub attacks: Vec<AttackMetrics>,
    pub defense: Option<DefenseReport>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuditReport {
    pub format_version: u32,
    pub provenance: Provenance,
    pub per_seed: Vec<SeedReport>,
    pub medians: MedianReport,
}

/// One prediction-interface observation, keyed by example and model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictionLogEntry {
    pub example_id: usize,
    /// "biased" or "fair".
    pub model_tag: String,
    pub probs: [f64; 2],
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PredictionLog {
    pub seed: u64,
    pub entries: Vec<PredictionLogEntry>,
}

pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_of<T, F: Fn(&T) -> f64>(items: &[&T], f: F) -> Option<f64> {
    let mut v: Vec<f64> = items.iter().map(|t| f(t)).collect();
    median(&mut v)
}

fn median_opt<T, F: Fn(&T) -> Option<f64>>(items: &[&T], f: F) -> Option<f64> {
    let mut v: Vec<f64> = items.iter().filter_map(|t| f(t)).collect();
    median(&mut v)
}

fn median_fairness(reports: &[&FairnessReport]) -> Option<FairnessReport> {
    if reports.is_empty() {
        return None;
    }
    Some(FairnessReport {
        acc_t: median_of(reports, |r| r.acc_t).unwrap(),
        ba: median_of(reports, |r| r.ba).unwrap(),
        deo: median_of(reports, |r| r.deo).unwrap(),
        tpr: [
            median_of(reports, |r| r.tpr[0]).unwrap(),
            median_of(reports, |r| r.tpr[1]).unwrap(),
        ],
        fpr: [
            median_of(reports, |r| r.fpr[0]).unwrap(),
            median_of(reports, |r| r.fpr[1]).unwrap(),
        ],
        tp_counts: [0, 0],
    })
}

fn median_attacks(per_seed: &[&Vec<AttackMetrics>]) -> Vec<AttackMetrics> {
    let keys: BTreeSet<_> = per_seed
        .iter()
        .flat_map(|v| v.iter().map(|a| a.key()))
        .collect();
    keys.into_iter()
        .map(|key| {
            let entries: Vec<&AttackMetrics> = per_seed
                .iter()
                .flat_map(|v| v.iter().filter(|a| a.key() == key))
                .collect();
            AttackMetrics {
                kind: key.0,
                variant: key.1,
                target: key.2,
                acc_a: median_of(&entries, |a| a.acc_a).unwrap(),
                auc_a: median_of(&entries, |a| a.auc_a).unwrap(),
                tpr_at_1pct: median_opt(&entries, |a| a.tpr_at_1pct),
                tpr_at_01pct: median_opt(&entries, |a| a.tpr_at_01pct),
                raw_score_auc: median_opt(&entries, |a| a.raw_score_auc),
            }
        })
        .collect()
}

/// Seed-median aggregation over completed seeds only.
pub fn aggregate_medians(per_seed: &[SeedReport]) -> MedianReport {
    let done: Vec<&SeedReport> = per_seed.iter().filter(|s| s.completed()).collect();
    let biased: Vec<&FairnessReport> = done.iter().filter_map(|s| s.target_biased.as_ref()).collect();
    let fair: Vec<&FairnessReport> = done.iter().filter_map(|s| s.target_fair.as_ref()).collect();
    let attacks: Vec<&Vec<AttackMetrics>> = done.iter().map(|s| &s.attacks).collect();
    let defense = {
        let defs: Vec<&DefenseReport> = done.iter().filter_map(|s| s.defense.as_ref()).collect();
        if defs.is_empty() {
            None
        } else {
            let d_attacks: Vec<&Vec<AttackMetrics>> = defs.iter().map(|d| &d.attacks).collect();
            Some(DefenseReport {
                epsilon: median_opt(&defs, |d| d.epsilon),
                restriction: defs[0].restriction,
                target_biased: median_fairness(
                    &defs.iter().filter_map(|d| d.target_biased.as_ref()).collect::<Vec<_>>(),
                ),
                target_fair: median_fairness(
                    &defs.iter().filter_map(|d| d.target_fair.as_ref()).collect::<Vec<_>>(),
                ),
                attacks: median_attacks(&d_attacks),
            })
        }
    };
    MedianReport {
        completed_seeds: done.len(),
        target_biased: median_fairness(&biased),
        target_fair: median_fairness(&fair),
        attacks: median_attacks(&attacks),
        defense,
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// Flat attack table: one row per seed x target x attack, plus the
/// defense-phase rows marked by the phase column.
pub fn attacks_csv(report: &AuditReport) -> String {
    let mut out = String::from(
        "seed,phase,attack_kind,variant,target,acc_a,auc_a,tpr_at_1pct,tpr_at_01pct,raw_score_auc\n",
    );
    for seed in &report.per_seed {
        let mut push = |phase: &str, a: &AttackMetrics| {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                seed.seed,
                phase,
                serde_plain_kind(a.kind),
                serde_plain_variant(a.variant),
                a.target.as_str(),
                fmt(a.acc_a),
                fmt(a.auc_a),
                fmt_opt(a.tpr_at_1pct),
                fmt_opt(a.tpr_at_01pct),
                fmt_opt(a.raw_score_auc),
            ));
        };
        for a in &seed.attacks {
            push("main", a);
        }
        if let Some(d) = &seed.defense {
            for a in &d.attacks {
                push("defense", a);
            }
        }
    }
    out
}

/// Flat target table: one row per seed x model.
pub fn targets_csv(report: &AuditReport) -> String {
    let mut out = String::from("seed,phase,model,acc_t,ba,deo\n");
    for seed in &report.per_seed {
        let mut push = |phase: &str, model: &str, r: &FairnessReport| {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                seed.seed,
                phase,
                model,
                fmt(r.acc_t),
                fmt(r.ba),
                fmt(r.deo)
            ));
        };
        if let Some(r) = &seed.target_biased {
            push("main", "biased", r);
        }
        if let Some(r) = &seed.target_fair {
            push("main", "fair", r);
        }
        if let Some(d) = &seed.defense {
            if let Some(r) = &d.target_biased {
                push("defense", "biased", r);
            }
            if let Some(r) = &d.target_fair {
                push("defense", "fair", r);
            }
        }
    }
    out
}

pub fn serde_plain_kind(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::MiaScore => "mia_score",
        AttackKind::MiaLira => "mia_lira",
        AttackKind::AiaBlack => "aia_black",
        AttackKind::AiaWhite => "aia_white",
    }
}

pub fn serde_plain_variant(variant: AttackVariant) -> &'static str {
    match variant {
        AttackVariant::Naive => "naive",
        AttackVariant::Fd => "fd",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes report.json (versioned, checksummed) and/or tables/*.csv
/// under `dir`.
pub fn emit_report(report: &AuditReport, formats: &[ReportFormat], dir: &Path) -> Result<()> {
    if formats.is_empty() {
        return Err(Error::Validation("no report formats requested".into()));
    }
    for f in formats {
        match f {
            ReportFormat::Json => {
                crate::artifacts::save_artifact(&dir.join("report.json"), report)?;
            }
            ReportFormat::Csv => {
                let tables = dir.join("tables");
                std::fs::create_dir_all(&tables)?;
                std::fs::write(tables.join("attacks.csv"), attacks_csv(report))?;
                std::fs::write(tables.join("targets.csv"), targets_csv(report))?;
            }
        }
    }
    Ok(())
}
