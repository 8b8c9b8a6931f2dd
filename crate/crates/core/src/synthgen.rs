//! Seeded synthetic double-entry ledger with injected anomalies.
//!
//! Every injected anomaly carries two archetypes from distinct JET flag
//! families, so the two-or-more-flags rule fires on it. Normal postings
//! trigger at most one flag. After planning, the generator runs the JET
//! rules over its own output and repairs any normal posting that picked up a
//! second flag. It fails with [`SynthError::InfeasibleConfig`] if the
//! labels and the rule still disagree.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, Duration, NaiveDate, NaiveTime, Timelike, Weekday};
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::jet::{self, JetConfig, WorkingHours};
use crate::ledger::{Amount, CdFlag, Dataset, JournalEntry, LabelProvenance, LabelRow, PostingGroup};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),
}

fn infeasible(msg: impl Into<String>) -> SynthError {
    SynthError::InfeasibleConfig(msg.into())
}

/// Anomaly archetypes, one per JET flag family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Archetype {
    LatePayment,
    WeekendPosting,
    OffHoursPosting,
    TopAmount,
    HighCash,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::LatePayment,
        Archetype::WeekendPosting,
        Archetype::OffHoursPosting,
        Archetype::TopAmount,
        Archetype::HighCash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::LatePayment => "LatePayment",
            Archetype::WeekendPosting => "WeekendPosting",
            Archetype::OffHoursPosting => "OffHoursPosting",
            Archetype::TopAmount => "TopAmount",
            Archetype::HighCash => "HighCash",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeWeight {
    pub archetype: Archetype,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_postings: usize,
    pub anomaly_rate: f64,
    pub n_users: usize,
    pub n_accounts: usize,
    pub date_range: DateRange,
    pub amount_lognormal: LogNormalParams,
    pub working_hours: WorkingHours,
    pub anomaly_archetypes: Vec<ArchetypeWeight>,
    /// Must match the JET config used to judge the output.
    pub top_n_count: usize,
    pub high_cash_percentile: f64,
    pub cash_account_ids: BTreeSet<String>,
    /// Probability that a normal posting carries one weekend or off-hours flag.
    pub single_flag_noise: f64,
    pub currency: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        let jet = JetConfig::default();
        GenConfig {
            seed: 42,
            n_postings: 5000,
            anomaly_rate: 0.01,
            n_users: 25,
            n_accounts: 30,
            date_range: DateRange {
                start: NaiveDate::from_ymd_opt(2023, 1, 1).unwrap(),
                end: NaiveDate::from_ymd_opt(2023, 12, 31).unwrap(),
            },
            amount_lognormal: LogNormalParams { mu: 5.0, sigma: 1.0 },
            working_hours: jet.working_hours,
            anomaly_archetypes: Archetype::ALL
                .iter()
                .map(|&archetype| ArchetypeWeight { archetype, weight: 0.2 })
                .collect(),
            top_n_count: jet.top_n_count,
            high_cash_percentile: jet.high_cash_percentile,
            cash_account_ids: jet.cash_account_ids,
            single_flag_noise: 0.05,
            currency: "EUR".to_string(),
        }
    }
}

impl GenConfig {
    /// The JET configuration under which the generated labels hold.
    pub fn jet_config(&self) -> JetConfig {
        JetConfig {
            working_hours: self.working_hours,
            top_n_count: self.top_n_count,
            high_cash_percentile: self.high_cash_percentile,
            cash_account_ids: self.cash_account_ids.clone(),
        }
    }

    pub fn anomaly_count(&self) -> usize {
        (self.n_postings as f64 * self.anomaly_rate).round() as usize
    }

    pub fn account_ids(&self) -> Vec<String> {
        (0..self.n_accounts).map(|i| (1000 + 10 * i).to_string()).collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_postings == 0 {
            return Err(infeasible("n_postings must be positive"));
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return Err(infeasible("anomaly_rate must lie in [0,1)"));
        }
        if self.n_users == 0 {
            return Err(infeasible("n_users must be positive"));
        }
        if !self.working_hours.is_valid() {
            return Err(infeasible("working_hours window is empty"));
        }
        if self.date_range.start > self.date_range.end {
            return Err(infeasible("date_range start is after end"));
        }
        if !(self.amount_lognormal.sigma >= 0.0 && self.amount_lognormal.mu.is_finite()) {
            return Err(infeasible("amount_lognormal needs finite mu and sigma >= 0"));
        }
        if self.top_n_count == 0 || self.top_n_count > self.n_postings {
            return Err(infeasible("top_n_count must lie in [1, n_postings]"));
        }
        if !(0.0..=1.0).contains(&self.single_flag_noise) {
            return Err(infeasible("single_flag_noise must lie in [0,1]"));
        }
        let accounts = self.account_ids();
        if !accounts.iter().any(|a| !self.cash_account_ids.contains(a)) {
            return Err(infeasible("need at least one non-cash account"));
        }
        let total: f64 = self.anomaly_archetypes.iter().map(|w| w.weight).sum();
        if self
            .anomaly_archetypes
            .iter()
            .any(|w| w.weight.is_nan() || w.weight < 0.0)
            || (total - 1.0).abs() > 1e-9
        {
            return Err(infeasible("archetype weights must be non-negative and sum to 1"));
        }
        let mut distinct: BTreeSet<Archetype> = BTreeSet::new();
        for w in &self.anomaly_archetypes {
            if w.weight > 0.0 && !distinct.insert(w.archetype) {
                return Err(infeasible(format!("archetype {} listed twice", w.archetype.name())));
            }
        }
        if self.anomaly_count() > 0 {
            if distinct.len() < 2 {
                return Err(infeasible(
                    "anomalies need at least two archetypes with positive weight",
                ));
            }
            if distinct.contains(&Archetype::HighCash) && !accounts.iter().any(|a| self.cash_account_ids.contains(a)) {
                return Err(infeasible("HighCash archetype needs a generated cash account"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    pub injected_archetypes: BTreeMap<String, BTreeSet<Archetype>>,
}

impl LabeledDataset {
    /// Sidecar rows in posting_id order.
    pub fn label_rows(&self) -> Vec<LabelRow> {
        let labels = self.dataset.labels().cloned().unwrap_or_default();
        labels
            .into_iter()
            .map(|(posting_id, label)| {
                let archetypes = self
                    .injected_archetypes
                    .get(&posting_id)
                    .map(|set| set.iter().map(|a| a.name()).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default();
                LabelRow {
                    posting_id,
                    label,
                    archetypes,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSummary {
    pub postings: usize,
    pub entries: usize,
    pub anomalies: usize,
    pub users: usize,
    pub accounts: usize,
    pub archetype_histogram: BTreeMap<Archetype, usize>,
}

pub fn describe(data: &LabeledDataset) -> GenSummary {
    let ds = &data.dataset;
    let users: BTreeSet<&str> = ds.entries().iter().map(|e| e.user_id.as_str()).collect();
    let accounts: BTreeSet<&str> = ds.entries().iter().map(|e| e.account_id.as_str()).collect();
    let mut archetype_histogram = BTreeMap::new();
    for set in data.injected_archetypes.values() {
        for a in set {
            *archetype_histogram.entry(*a).or_insert(0) += 1;
        }
    }
    GenSummary {
        postings: ds.groups().len(),
        entries: ds.entries().len(),
        anomalies: ds.labels().map_or(0, |l| l.values().filter(|&&v| v == 1).count()),
        users: users.len(),
        accounts: accounts.len(),
        archetype_histogram,
    }
}

/// Everything needed to emit one posting's lines.
#[derive(Debug, Clone)]
struct PostingPlan {
    posting_id: String,
    anomalous: bool,
    archetypes: BTreeSet<Archetype>,
    user: String,
    posting_date: NaiveDate,
    period_days: i64,
    time: NaiveTime,
    amount: Amount,
    lines: Vec<(CdFlag, Amount, String)>,
    tax_rate: f64,
    memo: &'static str,
}

const MEMOS: [&str; 8] = [
    "office supplies",
    "consulting fee",
    "monthly rent",
    "travel expenses",
    "customer invoice",
    "vendor payment",
    "software license",
    "utility bill",
];
const TAX_RATES: [f64; 3] = [0.0, 7.0, 19.0];

struct Calendar {
    weekdays: Vec<NaiveDate>,
    weekends: Vec<NaiveDate>,
}

impl Calendar {
    fn new(range: DateRange) -> Self {
        let mut weekdays = Vec::new();
        let mut weekends = Vec::new();
        let mut d = range.start;
        while d <= range.end {
            match d.weekday() {
                Weekday::Sat | Weekday::Sun => weekends.push(d),
                _ => weekdays.push(d),
            }
            d = d.succ_opt().expect("date in range");
        }
        Calendar { weekdays, weekends }
    }
}

fn minute_to_time(m: u32) -> NaiveTime {
    NaiveTime::from_hms_opt(m / 60, m % 60, 0).expect("minute of day")
}

fn minute_of(t: NaiveTime) -> u32 {
    t.hour() * 60 + t.minute()
}

fn working_time(rng: &mut ChaCha8Rng, wh: &WorkingHours) -> NaiveTime {
    minute_to_time(rng.random_range(minute_of(wh.start)..minute_of(wh.end)))
}

fn off_hours_time(rng: &mut ChaCha8Rng, wh: &WorkingHours) -> NaiveTime {
    let (start, end) = (minute_of(wh.start), minute_of(wh.end));
    let off = start + (24 * 60 - end);
    let k = rng.random_range(0..off);
    minute_to_time(if k < start { k } else { end + (k - start) })
}

fn cents(x: f64) -> Amount {
    Amount::from_cents((x * 100.0).round().max(1.0) as i64).expect("positive cents")
}

pub fn generate(config: &GenConfig) -> Result<LabeledDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let calendar = Calendar::new(config.date_range);
    if calendar.weekdays.is_empty() {
        return Err(infeasible("date_range contains no weekday"));
    }
    let accounts = config.account_ids();
    let cash: Vec<&String> = accounts
        .iter()
        .filter(|a| config.cash_account_ids.contains(*a))
        .collect();
    let non_cash: Vec<&String> = accounts
        .iter()
        .filter(|a| !config.cash_account_ids.contains(*a))
        .collect();
    let users: Vec<String> = (0..config.n_users).map(|i| format!("U{:03}", i + 1)).collect();
    // Skewed activity: user k posts with weight 1/(k+1).
    let user_weights: Vec<(usize, f64)> = (0..users.len()).map(|k| (k, 1.0 / (k as f64 + 1.0))).collect();
    let lognormal = LogNormal::new(config.amount_lognormal.mu, config.amount_lognormal.sigma)
        .map_err(|e| infeasible(format!("amount_lognormal: {e}")))?;
    let weighted: Vec<ArchetypeWeight> = config
        .anomaly_archetypes
        .iter()
        .copied()
        .filter(|w| w.weight > 0.0)
        .collect();
    if weighted.iter().any(|w| w.archetype == Archetype::WeekendPosting)
        && calendar.weekends.is_empty()
        && config.anomaly_count() > 0
    {
        return Err(infeasible("WeekendPosting archetype needs a weekend inside date_range"));
    }

    let n = config.n_postings;
    let n_anomalies = config.anomaly_count();
    let anomalous: BTreeSet<usize> = index::sample(&mut rng, n, n_anomalies).into_iter().collect();

    // Pass 1: archetypes, timing and base amounts.
    let mut plans = Vec::with_capacity(n);
    for i in 0..n {
        let is_anomaly = anomalous.contains(&i);
        let archetypes: BTreeSet<Archetype> = if is_anomaly {
            weighted
                .choose_multiple_weighted(&mut rng, 2, |w| w.weight)
                .map_err(|e| infeasible(format!("archetype sampling: {e}")))?
                .map(|w| w.archetype)
                .collect()
        } else {
            BTreeSet::new()
        };
        let noise = if !is_anomaly && rng.random_bool(config.single_flag_noise) {
            if calendar.weekends.is_empty() || rng.random_bool(0.5) {
                Some(Archetype::OffHoursPosting)
            } else {
                Some(Archetype::WeekendPosting)
            }
        } else {
            None
        };
        let has = |a: Archetype| archetypes.contains(&a) || noise == Some(a);

        let posting_date = if has(Archetype::WeekendPosting) {
            *calendar.weekends.choose(&mut rng).expect("weekend available")
        } else {
            *calendar.weekdays.choose(&mut rng).expect("weekday available")
        };
        let period_days = if has(Archetype::LatePayment) {
            rng.random_range(10..=90)
        } else {
            rng.random_range(0..=9)
        };
        let time = if has(Archetype::OffHoursPosting) {
            off_hours_time(&mut rng, &config.working_hours)
        } else {
            working_time(&mut rng, &config.working_hours)
        };
        let user_idx = user_weights
            .choose_weighted(&mut rng, |(_, w)| *w)
            .map(|(k, _)| *k)
            .expect("users non-empty");
        let amount = cents(lognormal.sample(&mut rng));
        plans.push(PostingPlan {
            posting_id: format!("P{:06}", i + 1),
            anomalous: is_anomaly,
            archetypes,
            user: users[user_idx].clone(),
            posting_date,
            period_days,
            time,
            amount,
            lines: Vec::new(),
            tax_rate: *TAX_RATES.choose(&mut rng).expect("non-empty"),
            memo: MEMOS.choose(&mut rng).expect("non-empty"),
        });
    }

    // Pass 2: amount archetypes sit above every base draw; TopAmount above HighCash.
    let max_base = plans.iter().map(|p| p.amount).max().unwrap_or(Amount::ZERO).to_f64();
    let top_amount_count = plans
        .iter()
        .filter(|p| p.archetypes.contains(&Archetype::TopAmount))
        .count();
    if top_amount_count > config.top_n_count {
        return Err(infeasible(format!(
            "{top_amount_count} TopAmount anomalies exceed top_n_count {}",
            config.top_n_count
        )));
    }
    for p in &mut plans {
        if p.archetypes.contains(&Archetype::TopAmount) {
            p.amount = cents(max_base * rng.random_range(3.0..5.0));
        } else if p.archetypes.contains(&Archetype::HighCash) {
            p.amount = cents(max_base * rng.random_range(1.05..1.5));
        }
    }

    // Pass 3: lines. Debit carries the full amount; credit may be split.
    for p in &mut plans {
        let debit_account = if p.archetypes.contains(&Archetype::HighCash) || (!cash.is_empty() && rng.random_bool(0.2))
        {
            cash.choose(&mut rng).copied().unwrap_or(non_cash[0]).clone()
        } else {
            (*non_cash.choose(&mut rng).expect("non-cash account")).clone()
        };
        let credit_accounts: Vec<String> = non_cash
            .iter()
            .filter(|a| ***a != debit_account)
            .map(|a| (*a).clone())
            .collect();
        let pick_credit = |rng: &mut ChaCha8Rng| {
            credit_accounts
                .choose(rng)
                .cloned()
                .unwrap_or_else(|| non_cash[0].clone())
        };
        let mut lines = vec![(CdFlag::Debit, p.amount, debit_account)];
        if p.amount.cents() >= 2 && rng.random_bool(0.25) {
            let first = rng.random_range(1..p.amount.cents());
            lines.push((
                CdFlag::Credit,
                Amount::from_cents(first).unwrap(),
                pick_credit(&mut rng),
            ));
            lines.push((
                CdFlag::Credit,
                Amount::from_cents(p.amount.cents() - first).unwrap(),
                pick_credit(&mut rng),
            ));
        } else {
            lines.push((CdFlag::Credit, p.amount, pick_credit(&mut rng)));
        }
        p.lines = lines;
    }

    // Pass 4: make normals satisfy the ≤ 1 flag rule under the final amounts.
    let jet_config = config.jet_config();
    let mut dataset = build(&plans, &config.currency)?;
    let mut flags = jet::flag_all(&dataset, &jet_config);
    let mut repaired = false;
    for p in plans.iter_mut().filter(|p| !p.anomalous) {
        if flags[&p.posting_id].triggered_count >= 2 {
            p.posting_date = *calendar.weekdays.choose(&mut rng).expect("weekday available");
            p.period_days = rng.random_range(0..=9);
            p.time = working_time(&mut rng, &config.working_hours);
            repaired = true;
        }
    }
    if repaired {
        dataset = build(&plans, &config.currency)?;
        flags = jet::flag_all(&dataset, &jet_config);
        repaired = false;
    }
    for p in plans.iter_mut().filter(|p| !p.anomalous) {
        if flags[&p.posting_id].triggered_count >= 2 {
            // Remaining conflict is top_n together with high_cash.
            for line in &mut p.lines {
                if config.cash_account_ids.contains(&line.2) {
                    line.2 = non_cash[0].clone();
                }
            }
            repaired = true;
        }
    }
    if repaired {
        dataset = build(&plans, &config.currency)?;
        flags = jet::flag_all(&dataset, &jet_config);
    }

    for p in &plans {
        let f = &flags[&p.posting_id];
        if p.anomalous && f.verdict != 1 {
            return Err(infeasible(format!(
                "anomaly {} triggers only {} flag(s); amount archetypes too dense for the percentile thresholds",
                p.posting_id, f.triggered_count
            )));
        }
        if !p.anomalous && f.triggered_count > 1 {
            return Err(infeasible(format!(
                "normal posting {} triggers {} flags",
                p.posting_id, f.triggered_count
            )));
        }
    }

    let labels: BTreeMap<String, u8> = plans
        .iter()
        .map(|p| (p.posting_id.clone(), u8::from(p.anomalous)))
        .collect();
    let injected_archetypes = plans
        .iter()
        .filter(|p| p.anomalous)
        .map(|p| (p.posting_id.clone(), p.archetypes.clone()))
        .collect();
    let dataset = dataset
        .with_labels(labels, LabelProvenance::GroundTruth)
        .expect("labels cover generated postings");
    Ok(LabeledDataset {
        dataset,
        injected_archetypes,
    })
}

fn build(plans: &[PostingPlan], currency: &str) -> Result<Dataset, SynthError> {
    let mut entries = Vec::with_capacity(plans.len() * 2);
    let mut next_id = 1usize;
    for p in plans {
        let transaction_date = p.posting_date - Duration::days(p.period_days);
        for (cd, amount, account) in &p.lines {
            entries.push(JournalEntry {
                entry_id: format!("E{next_id:07}"),
                posting_id: p.posting_id.clone(),
                posting_date: p.posting_date,
                posting_time: Some(p.time),
                transaction_date,
                cd_flag: *cd,
                amount: *amount,
                currency: currency.to_string(),
                tax_rate: Some(p.tax_rate),
                account_id: account.clone(),
                user_id: p.user.clone(),
                memo: p.memo.to_string(),
            });
            next_id += 1;
        }
    }
    let ds = Dataset::from_entries(entries).map_err(|e| infeasible(e.to_string()))?;
    debug_assert!(ds.groups().values().all(PostingGroup::is_balanced));
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, rate: f64, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            n_postings: n,
            anomaly_rate: rate,
            top_n_count: 10.min(n),
            ..GenConfig::default()
        }
    }

    #[test]
    fn exact_anomaly_count_and_balance() {
        let out = generate(&small(100, 0.05, 11)).unwrap();
        let summary = describe(&out);
        assert_eq!(summary.postings, 100);
        assert_eq!(summary.anomalies, 5);
        assert!(out.dataset.groups().values().all(|g| g.is_balanced()));
        assert!(summary.archetype_histogram.values().sum::<usize>() >= 10);
    }

    #[test]
    fn zero_rate_has_no_anomalies() {
        let cfg = small(200, 0.0, 5);
        let out = generate(&cfg).unwrap();
        assert!(out.dataset.labels().unwrap().values().all(|&l| l == 0));
        let flags = jet::flag_all(&out.dataset, &cfg.jet_config());
        assert!(flags.values().all(|f| f.triggered_count <= 1));
    }

    #[test]
    fn anomalies_have_two_distinct_archetypes() {
        let out = generate(&small(300, 0.05, 2)).unwrap();
        assert!(out.injected_archetypes.values().all(|s| s.len() == 2));
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate(&small(150, 0.04, 9)).unwrap();
        let b = generate(&small(150, 0.04, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(150, 0.04, 10)).unwrap();
        assert_ne!(a.dataset.entries(), c.dataset.entries());
    }

    #[test]
    fn infeasible_configs() {
        let mut cfg = small(50, 0.1, 1);
        cfg.working_hours = WorkingHours::new(cfg.working_hours.end, cfg.working_hours.start);
        assert!(matches!(generate(&cfg), Err(SynthError::InfeasibleConfig(_))));

        let mut cfg = small(50, 0.1, 1);
        cfg.anomaly_archetypes = vec![ArchetypeWeight {
            archetype: Archetype::LatePayment,
            weight: 1.0,
        }];
        assert!(matches!(generate(&cfg), Err(SynthError::InfeasibleConfig(_))));

        let mut cfg = small(50, 0.1, 1);
        cfg.anomaly_archetypes[0].weight = 0.5;
        assert!(matches!(generate(&cfg), Err(SynthError::InfeasibleConfig(_))));
    }

    #[test]
    fn empty_summary() {
        let empty = LabeledDataset {
            dataset: Dataset::from_entries(vec![]).unwrap(),
            injected_archetypes: BTreeMap::new(),
        };
        let s = describe(&empty);
        assert_eq!(
            (s.postings, s.entries, s.anomalies, s.users, s.accounts),
            (0, 0, 0, 0, 0)
        );
    }

    #[test]
    fn off_hours_times_are_outside_window() {
        let wh = WorkingHours::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert!(!wh.contains(off_hours_time(&mut rng, &wh)));
            assert!(wh.contains(working_time(&mut rng, &wh)));
        }
    }
}
