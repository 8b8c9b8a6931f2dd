//! Isolation Forest over posting groups.
//!
//! Each posting is turned into a feature row (see [`Feature`]), a forest of
//! random isolation trees is grown on subsamples, and every posting gets the
//! score `s = 2^(−E[h]/c(ψ))`. Shorter expected isolation depth ⇒ score
//! closer to 1 ⇒ more anomalous.

mod tree;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::ledger::{Dataset, LedgerError, PostingGroup};

pub use tree::{score_from_path_length, IsolationForest};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IForestError {
    #[error("cannot fit an isolation forest on an empty dataset")]
    EmptyDataset,
    #[error("average path normalizer undefined for n = {0} (< 2)")]
    DomainError(usize),
    #[error("feature {feature:?} is not finite for posting `{posting_id}`")]
    NonFiniteFeature { feature: Feature, posting_id: String },
    #[error("invalid isolation forest config: {0}")]
    InvalidConfig(String),
}

/// `c(n) = 2·H(n−1) − 2(n−1)/n`, the normalizer in the anomaly score.
pub fn average_path_normalizer(n: usize) -> Result<f64, IForestError> {
    if n < 2 {
        return Err(IForestError::DomainError(n));
    }
    Ok(tree::path_normalizer(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// `ln(1 + largest line amount)`
    LogMaxAmount,
    /// Longest posting − transaction gap in days.
    PaymentPeriod,
    /// Fractional hour of the lead line (12.0 when the time is unknown).
    PostingHour,
    /// 0 = Monday … 6 = Sunday.
    Weekday,
    /// `ln(1 + postings by the lead line's user)`
    LogUserPostings,
    /// `ln(1 + postings touching the rarest account in the group)`
    LogAccountPostings,
    /// Highest tax rate in the group (0 when absent).
    TaxRate,
}

impl Feature {
    pub const ALL: [Feature; 7] = [
        Feature::LogMaxAmount,
        Feature::PaymentPeriod,
        Feature::PostingHour,
        Feature::Weekday,
        Feature::LogUserPostings,
        Feature::LogAccountPostings,
        Feature::TaxRate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contamination {
    /// Flag exactly `round(fraction · n)` postings.
    Fraction(f64),
    /// Flag every posting whose score reaches this value.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IForestConfig {
    pub n_trees: usize,
    pub subsample_size: usize,
    pub seed: u64,
    pub contamination: Contamination,
    pub feature_spec: Vec<Feature>,
}

impl Default for IForestConfig {
    fn default() -> Self {
        IForestConfig {
            n_trees: 100,
            subsample_size: 256,
            seed: 42,
            contamination: Contamination::Fraction(0.05),
            feature_spec: Feature::ALL.to_vec(),
        }
    }
}

impl IForestConfig {
    pub fn validate(&self) -> Result<(), IForestError> {
        if self.n_trees == 0 {
            return Err(IForestError::InvalidConfig("n_trees must be positive".into()));
        }
        if self.subsample_size == 0 {
            return Err(IForestError::InvalidConfig("subsample_size must be positive".into()));
        }
        if self.feature_spec.is_empty() {
            return Err(IForestError::InvalidConfig("feature_spec is empty".into()));
        }
        match self.contamination {
            Contamination::Fraction(f) if !(f > 0.0 && f < 1.0) => Err(IForestError::InvalidConfig(format!(
                "contamination fraction {f} outside (0,1)"
            ))),
            Contamination::Threshold(t) if !t.is_finite() => Err(IForestError::InvalidConfig(
                "contamination threshold must be finite".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IfDecision {
    Normal,
    Anomaly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IForestResult {
    pub scores: BTreeMap<String, f64>,
    pub decisions: BTreeMap<String, IfDecision>,
    pub threshold_used: f64,
    pub features_used: Vec<Feature>,
    pub subsample_size_used: usize,
    pub warnings: Vec<String>,
}

impl IForestResult {
    pub fn anomaly_count(&self) -> usize {
        self.decisions.values().filter(|d| **d == IfDecision::Anomaly).count()
    }

    pub fn is_anomaly(&self, posting_id: &str) -> Option<bool> {
        self.decisions.get(posting_id).map(|d| *d == IfDecision::Anomaly)
    }
}

struct FeatureContext {
    user_postings: HashMap<String, usize>,
    account_postings: HashMap<String, usize>,
}

impl FeatureContext {
    fn new(dataset: &Dataset) -> Self {
        let mut user_postings = HashMap::new();
        let mut account_postings = HashMap::new();
        for g in dataset.groups().values() {
            let mut users: Vec<&str> = g.entries.iter().map(|e| e.user_id.as_str()).collect();
            users.sort_unstable();
            users.dedup();
            for u in users {
                *user_postings.entry(u.to_string()).or_insert(0) += 1;
            }
            let mut accounts: Vec<&str> = g.entries.iter().map(|e| e.account_id.as_str()).collect();
            accounts.sort_unstable();
            accounts.dedup();
            for a in accounts {
                *account_postings.entry(a.to_string()).or_insert(0) += 1;
            }
        }
        FeatureContext {
            user_postings,
            account_postings,
        }
    }

    fn extract(&self, group: &PostingGroup, feature: Feature) -> f64 {
        let Some(lead) = group.lead_entry() else {
            return 0.0;
        };
        match feature {
            Feature::LogMaxAmount => lead.amount.to_f64().ln_1p(),
            Feature::PaymentPeriod => group.entries.iter().map(|e| e.payment_period_days()).max().unwrap_or(0) as f64,
            Feature::PostingHour => lead
                .posting_time
                .map_or(12.0, |t| t.hour() as f64 + t.minute() as f64 / 60.0),
            Feature::Weekday => lead.posting_date.weekday().num_days_from_monday() as f64,
            Feature::LogUserPostings => (self.user_postings.get(&lead.user_id).copied().unwrap_or(0) as f64).ln_1p(),
            Feature::LogAccountPostings => {
                let rarest = group
                    .entries
                    .iter()
                    .map(|e| self.account_postings.get(&e.account_id).copied().unwrap_or(0))
                    .min()
                    .unwrap_or(0);
                (rarest as f64).ln_1p()
            }
            Feature::TaxRate => group.entries.iter().filter_map(|e| e.tax_rate).fold(0.0, f64::max),
        }
    }
}

/// Feature rows for every posting group, in posting_id order.
pub fn feature_matrix(dataset: &Dataset, features: &[Feature]) -> Result<Vec<(String, Vec<f64>)>, IForestError> {
    let ctx = FeatureContext::new(dataset);
    dataset
        .groups()
        .values()
        .map(|g| {
            let row = features
                .iter()
                .map(|&f| {
                    let v = ctx.extract(g, f);
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(IForestError::NonFiniteFeature {
                            feature: f,
                            posting_id: g.posting_id.clone(),
                        })
                    }
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((g.posting_id.clone(), row))
        })
        .collect()
}

pub fn fit_score(dataset: &Dataset, config: &IForestConfig) -> Result<IForestResult, IForestError> {
    config.validate()?;
    if dataset.groups().is_empty() {
        return Err(IForestError::EmptyDataset);
    }
    let rows = feature_matrix(dataset, &config.feature_spec)?;
    let mut warnings = Vec::new();

    // Drop features that are constant across every posting.
    let keep: Vec<usize> = (0..config.feature_spec.len())
        .filter(|&f| {
            let first = rows[0].1[f];
            let varies = rows.iter().any(|(_, r)| r[f] != first);
            if !varies {
                let msg = format!(
                    "feature {:?} is constant across all postings; dropped",
                    config.feature_spec[f]
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            varies
        })
        .collect();
    let features_used: Vec<Feature> = keep.iter().map(|&f| config.feature_spec[f]).collect();
    let data: Vec<Vec<f64>> = rows.iter().map(|(_, r)| keep.iter().map(|&f| r[f]).collect()).collect();

    if config.subsample_size > data.len() {
        let msg = format!(
            "subsample_size {} exceeds {} postings; clamped",
            config.subsample_size,
            data.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let forest = IsolationForest::fit(&data, config.n_trees, config.subsample_size, config.seed);
    let scores: Vec<f64> = forest.score_all(&data);

    let ids: Vec<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
    let (decisions, threshold_used) = decide(&ids, &scores, config.contamination);

    Ok(IForestResult {
        scores: ids.iter().map(|s| s.to_string()).zip(scores).collect(),
        decisions,
        threshold_used,
        features_used,
        subsample_size_used: forest.subsample_size(),
        warnings,
    })
}

/// Applies the contamination rule. For a fraction, exactly `round(f·n)`
/// postings are flagged: highest score first, ties to the smaller posting_id.
fn decide(ids: &[&str], scores: &[f64], contamination: Contamination) -> (BTreeMap<String, IfDecision>, f64) {
    match contamination {
        Contamination::Threshold(t) => {
            let decisions = ids
                .iter()
                .zip(scores)
                .map(|(id, &s)| {
                    let d = if s >= t {
                        IfDecision::Anomaly
                    } else {
                        IfDecision::Normal
                    };
                    (id.to_string(), d)
                })
                .collect();
            (decisions, t)
        }
        Contamination::Fraction(f) => {
            let k = ((f * ids.len() as f64).round() as usize).min(ids.len());
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
            let mut decisions: BTreeMap<String, IfDecision> =
                ids.iter().map(|id| (id.to_string(), IfDecision::Normal)).collect();
            for &i in &order[..k] {
                decisions.insert(ids[i].to_string(), IfDecision::Anomaly);
            }
            let threshold = if k == 0 { 1.0 } else { scores[order[k - 1]] };
            (decisions, threshold)
        }
    }
}

/// Writes `posting_id,score,decision` rows plus a JSON metadata sidecar.
pub fn write_result(
    result: &IForestResult,
    config: &IForestConfig,
    csv_path: &Path,
    meta_path: &Path,
) -> Result<(), LedgerError> {
    let ser = |e: csv::Error| LedgerError::Serialize(e.to_string());
    let mut w = csv::Writer::from_path(csv_path).map_err(ser)?;
    w.write_record(["posting_id", "score", "decision"]).map_err(ser)?;
    for (id, score) in &result.scores {
        let decision = match result.decisions[id] {
            IfDecision::Anomaly => "Anomaly",
            IfDecision::Normal => "Normal",
        };
        w.write_record([id.as_str(), &format!("{score:.6}"), decision])
            .map_err(ser)?;
    }
    w.flush().map_err(|e| LedgerError::IoFailure {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    let meta = serde_json::json!({
        "config": config,
        "threshold_used": result.threshold_used,
        "features_used": result.features_used,
        "subsample_size_used": result.subsample_size_used,
        "anomaly_count": result.anomaly_count(),
        "warnings": result.warnings,
    });
    crate::ledger::write_report(&meta, meta_path)
}
