//! Dataset-wide context: amount statistics, percentiles and per-user /
//! per-account frequencies, computed over ledger lines.
//!
//! Quantiles use the nearest-rank rule on sorted amounts: the level-`p`
//! quantile of `n` values is the element at index `ceil(p·n) − 1`. Levels are
//! handled in basis points so the index arithmetic is exact.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::iforest::IForestResult;
use crate::ledger::{Amount, Dataset};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("cannot compute statistics over an empty dataset")]
    EmptyDataset,
    #[error("statistics hold no amounts")]
    EmptyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_transactions: usize,
    pub amount_mean: f64,
    pub amount_median: Amount,
    pub amount_q95: Amount,
    pub amount_q99: Amount,
    pub amount_min: Amount,
    pub amount_max: Amount,
    pub payment_period_max: i64,
    pub total_users: usize,
    pub total_accounts: usize,
    pub user_tx_counts: BTreeMap<String, usize>,
    /// Account frequency table; exposed for inspection, not interpolated into prompts.
    pub account_tx_counts: BTreeMap<String, usize>,
    pub sorted_abs_amounts: Vec<Amount>,
    pub if_present: bool,
    pub if_anomaly_count: usize,
    /// Fraction of isolation-forest-scored units decided anomalous.
    pub if_anomaly_rate: f64,
}

/// Index of the nearest-rank quantile at `basis_points / 10_000` among `n` sorted values.
pub fn nearest_rank_index(n: usize, basis_points: u32) -> usize {
    debug_assert!(n > 0);
    let bp = u128::from(basis_points.min(10_000));
    let rank = (bp * n as u128).div_ceil(10_000) as usize;
    rank.saturating_sub(1).min(n - 1)
}

/// Converts a fraction in [0,1] to basis points (rounded).
pub fn fraction_to_basis_points(p: f64) -> u32 {
    (p.clamp(0.0, 1.0) * 10_000.0).round() as u32
}

pub fn compute_stats(dataset: &Dataset, iforest: Option<&IForestResult>) -> Result<DatasetStats, StatsError> {
    let entries = dataset.entries();
    if entries.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let mut sorted: Vec<Amount> = entries.iter().map(|e| e.amount).collect();
    sorted.sort_unstable();
    let n = sorted.len();
    let total_cents: i128 = sorted.iter().map(|a| i128::from(a.cents())).sum();

    let mut user_tx_counts = BTreeMap::new();
    let mut account_tx_counts = BTreeMap::new();
    for e in entries {
        *user_tx_counts.entry(e.user_id.clone()).or_insert(0) += 1;
        *account_tx_counts.entry(e.account_id.clone()).or_insert(0) += 1;
    }
    let accounts: BTreeSet<&str> = entries.iter().map(|e| e.account_id.as_str()).collect();

    let (if_present, if_anomaly_count, if_anomaly_rate) = match iforest {
        Some(r) if !r.scores.is_empty() => {
            let k = r.anomaly_count();
            (true, k, k as f64 / r.scores.len() as f64)
        }
        Some(_) => (true, 0, 0.0),
        None => (false, 0, 0.0),
    };

    Ok(DatasetStats {
        total_transactions: n,
        amount_mean: total_cents as f64 / (n as f64 * 100.0),
        amount_median: sorted[nearest_rank_index(n, 5_000)],
        amount_q95: sorted[nearest_rank_index(n, 9_500)],
        amount_q99: sorted[nearest_rank_index(n, 9_900)],
        amount_min: sorted[0],
        amount_max: sorted[n - 1],
        payment_period_max: entries.iter().map(|e| e.payment_period_days()).max().unwrap_or(0),
        total_users: user_tx_counts.len(),
        total_accounts: accounts.len(),
        user_tx_counts,
        account_tx_counts,
        sorted_abs_amounts: sorted,
        if_present,
        if_anomaly_count,
        if_anomaly_rate,
    })
}

impl DatasetStats {
    /// Nearest-rank quantile at a fraction in [0,1].
    pub fn quantile(&self, p: f64) -> Result<Amount, StatsError> {
        let n = self.sorted_abs_amounts.len();
        if n == 0 {
            return Err(StatsError::EmptyStats);
        }
        Ok(self.sorted_abs_amounts[nearest_rank_index(n, fraction_to_basis_points(p))])
    }

    pub fn user_tx_count(&self, user_id: &str) -> usize {
        self.user_tx_counts.get(user_id).copied().unwrap_or(0)
    }

    /// Prompt placeholders for the dataset-context block, rendered as they
    /// appear in prompt text.
    pub fn placeholders(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("total_transactions", self.total_transactions.to_string()),
            ("total_if_anomalies", self.if_anomaly_count.to_string()),
            ("if_anomaly_rate", format!("{:.1}%", self.if_anomaly_rate * 100.0)),
            ("amount_mean", format!("{:.2}", self.amount_mean)),
            ("amount_median", self.amount_median.to_string()),
            ("amount_q95", self.amount_q95.to_string()),
            ("amount_q99", self.amount_q99.to_string()),
            ("amount_min", self.amount_min.to_string()),
            ("amount_max", self.amount_max.to_string()),
            ("payment_period_max", self.payment_period_max.to_string()),
            ("total_users", self.total_users.to_string()),
            ("total_accounts", self.total_accounts.to_string()),
        ])
    }
}

/// Rank of `amount` as `floor(100 · #{v ≤ amount} / n)`.
pub fn percentile_of(amount: Amount, stats: &DatasetStats) -> Result<u8, StatsError> {
    let n = stats.sorted_abs_amounts.len();
    if n == 0 {
        return Err(StatsError::EmptyStats);
    }
    let at_or_below = stats.sorted_abs_amounts.partition_point(|v| *v <= amount);
    Ok((100 * at_or_below / n) as u8)
}
