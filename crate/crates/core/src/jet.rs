//! Journal-entry testing (JET): five engineered flags per posting group and
//! the two-or-more-flags decision rule.
//!
//! | flag        | values                                                  |
//! |-------------|---------------------------------------------------------|
//! | `promptly`  | 1 = 0–9 days, 2 = 10–29 days, 3 = ≥ 30 days             |
//! | `weekend`   | 0 = Mon–Fri, 1 = Saturday, 2 = Sunday                   |
//! | `nwh`       | 1 = posted outside working hours                        |
//! | `top_n`     | 1 = among the `top_n_count` largest postings            |
//! | `high_cash` | 1 = a cash-account line above the high-cash percentile  |
//!
//! A group triggers a flag when any of its lines does.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{NaiveTime, Weekday};
use serde::{Deserialize, Serialize};

use crate::ledger::{Amount, Dataset, LabelProvenance, LedgerError, PostingGroup};
use crate::stats::{compute_stats, DatasetStats};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum JetError {
    #[error("top_n / high_cash flags need dataset context")]
    MissingContext,
    #[error("invalid JET config: {0}")]
    InvalidConfig(String),
}

pub(crate) mod hhmm {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%H:%M").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let s = String::deserialize(d)?;
        NaiveTime::parse_from_str(&s, "%H:%M").map_err(serde::de::Error::custom)
    }
}

/// Half-open window `[start, end)` of the working day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingHours {
    #[serde(with = "hhmm")]
    pub start: NaiveTime,
    #[serde(with = "hhmm")]
    pub end: NaiveTime,
}

impl WorkingHours {
    pub fn new(start: NaiveTime, end: NaiveTime) -> Self {
        WorkingHours { start, end }
    }

    pub fn contains(&self, t: NaiveTime) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_valid(&self) -> bool {
        self.start < self.end
    }
}

impl Default for WorkingHours {
    fn default() -> Self {
        WorkingHours {
            start: NaiveTime::from_hms_opt(8, 0, 0).unwrap(),
            end: NaiveTime::from_hms_opt(18, 0, 0).unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JetConfig {
    pub working_hours: WorkingHours,
    pub top_n_count: usize,
    pub high_cash_percentile: f64,
    pub cash_account_ids: BTreeSet<String>,
}

impl Default for JetConfig {
    fn default() -> Self {
        JetConfig {
            working_hours: WorkingHours::default(),
            top_n_count: 50,
            high_cash_percentile: 0.95,
            cash_account_ids: BTreeSet::from(["1000".to_string()]),
        }
    }
}

impl JetConfig {
    pub fn validate(&self) -> Result<(), JetError> {
        if !self.working_hours.is_valid() {
            return Err(JetError::InvalidConfig("working_hours start must precede end".into()));
        }
        if self.top_n_count == 0 {
            return Err(JetError::InvalidConfig("top_n_count must be positive".into()));
        }
        if !(self.high_cash_percentile > 0.0 && self.high_cash_percentile < 1.0) {
            return Err(JetError::InvalidConfig("high_cash_percentile must lie in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JetFlags {
    pub promptly: u8,
    pub weekend: u8,
    pub nwh: u8,
    pub top_n: u8,
    pub high_cash: u8,
    pub triggered_count: u8,
    pub verdict: u8,
    /// Some line had no posting time, so `nwh` could not fire for it.
    #[serde(default)]
    pub time_missing: bool,
}

impl JetFlags {
    pub fn new(promptly: u8, weekend: u8, nwh: u8, top_n: u8, high_cash: u8) -> Self {
        let triggered_count = u8::from(promptly >= 2)
            + u8::from(weekend >= 1)
            + u8::from(nwh == 1)
            + u8::from(top_n == 1)
            + u8::from(high_cash == 1);
        JetFlags {
            promptly,
            weekend,
            nwh,
            top_n,
            high_cash,
            triggered_count,
            verdict: u8::from(triggered_count >= 2),
            time_missing: false,
        }
    }

    /// Names of the triggered flags, in table order.
    pub fn triggered_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.promptly >= 2 {
            out.push("promptly");
        }
        if self.weekend >= 1 {
            out.push("weekend");
        }
        if self.nwh == 1 {
            out.push("nwh");
        }
        if self.top_n == 1 {
            out.push("top_n");
        }
        if self.high_cash == 1 {
            out.push("high_cash");
        }
        out
    }
}

pub fn promptly_bucket(payment_period_days: i64) -> u8 {
    match payment_period_days {
        d if d >= 30 => 3,
        d if d >= 10 => 2,
        _ => 1,
    }
}

pub fn weekend_code(day: Weekday) -> u8 {
    match day {
        Weekday::Sat => 1,
        Weekday::Sun => 2,
        _ => 0,
    }
}

/// Dataset-level inputs for the amount-based flags.
#[derive(Debug, Clone, PartialEq)]
pub struct JetContext {
    top_n: BTreeSet<String>,
    high_cash_threshold: Amount,
}

impl JetContext {
    /// Ranks postings by their largest line (ties: smaller lead entry_id first)
    /// and fixes the high-cash threshold from `stats`.
    pub fn new(dataset: &Dataset, stats: &DatasetStats, config: &JetConfig) -> Self {
        let mut ranked: Vec<(Amount, &str, &str)> = dataset
            .groups()
            .values()
            .filter_map(|g| {
                g.lead_entry()
                    .map(|e| (e.amount, e.entry_id.as_str(), g.posting_id.as_str()))
            })
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let top_n = ranked
            .iter()
            .take(config.top_n_count)
            .map(|(_, _, p)| p.to_string())
            .collect();
        let high_cash_threshold = stats.quantile(config.high_cash_percentile).unwrap_or(Amount::ZERO);
        JetContext {
            top_n,
            high_cash_threshold,
        }
    }

    pub fn in_top_n(&self, posting_id: &str) -> bool {
        self.top_n.contains(posting_id)
    }

    pub fn high_cash_threshold(&self) -> Amount {
        self.high_cash_threshold
    }
}

pub fn compute_flags(
    group: &PostingGroup,
    config: &JetConfig,
    context: Option<&JetContext>,
) -> Result<JetFlags, JetError> {
    let context = context.ok_or(JetError::MissingContext)?;
    let mut promptly = 1;
    let mut weekend = 0;
    let mut nwh = 0;
    let mut high_cash = 0;
    let mut time_missing = false;
    for e in &group.entries {
        promptly = promptly.max(promptly_bucket(e.payment_period_days()));
        weekend = weekend.max(weekend_code(e.posting_weekday()));
        match e.posting_time {
            Some(t) if !config.working_hours.contains(t) => nwh = 1,
            Some(_) => {}
            None => time_missing = true,
        }
        if config.cash_account_ids.contains(&e.account_id) && e.amount > context.high_cash_threshold {
            high_cash = 1;
        }
    }
    let top_n = u8::from(context.in_top_n(&group.posting_id));
    let mut flags = JetFlags::new(promptly, weekend, nwh, top_n, high_cash);
    flags.time_missing = time_missing;
    Ok(flags)
}

/// Flags every posting group of a dataset. Empty datasets yield an empty map.
pub fn flag_all(dataset: &Dataset, config: &JetConfig) -> BTreeMap<String, JetFlags> {
    let Ok(stats) = compute_stats(dataset, None) else {
        return BTreeMap::new();
    };
    let context = JetContext::new(dataset, &stats, config);
    dataset
        .groups()
        .values()
        .map(|g| {
            let flags = compute_flags(g, config, Some(&context)).expect("context supplied");
            (g.posting_id.clone(), flags)
        })
        .collect()
}

/// Replaces any labels with JET verdicts.
pub fn pseudo_label(dataset: &Dataset, config: &JetConfig) -> Dataset {
    let labels: BTreeMap<String, u8> = flag_all(dataset, config)
        .into_iter()
        .map(|(id, f)| (id, f.verdict))
        .collect();
    dataset
        .clone()
        .with_labels(labels, LabelProvenance::JetPseudoLabel)
        .expect("labels come from the dataset's own groups")
}

/// Writes `posting_id,promptly,weekend,nwh,top_n,high_cash,triggered,verdict`.
pub fn write_flags<W: std::io::Write>(flags: &BTreeMap<String, JetFlags>, out: W) -> Result<(), LedgerError> {
    let ser = |e: csv::Error| LedgerError::Serialize(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "posting_id",
        "promptly",
        "weekend",
        "nwh",
        "top_n",
        "high_cash",
        "triggered",
        "verdict",
    ])
    .map_err(ser)?;
    for (id, f) in flags {
        w.write_record([
            id.clone(),
            f.promptly.to_string(),
            f.weekend.to_string(),
            f.nwh.to_string(),
            f.top_n.to_string(),
            f.high_cash.to_string(),
            f.triggered_count.to_string(),
            f.verdict.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| LedgerError::Serialize(e.to_string()))
}

pub fn write_flags_csv(flags: &BTreeMap<String, JetFlags>, path: &Path) -> Result<(), LedgerError> {
    let file = std::fs::File::create(path).map_err(|e| LedgerError::IoFailure {
        path: path.display().to_string(),
        source: e,
    })?;
    write_flags(flags, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::test_support::entry;
    use crate::ledger::{CdFlag, JournalEntry};
    use chrono::NaiveDate;

    fn posting(id: &str, period: i64, date: NaiveDate, time: (u32, u32), amount: &str) -> Vec<JournalEntry> {
        let mk = |suffix: &str, cd| {
            let mut e = entry(&format!("{id}{suffix}"), id, cd, amount);
            e.posting_date = date;
            e.transaction_date = date - chrono::Duration::days(period);
            e.posting_time = NaiveTime::from_hms_opt(time.0, time.1, 0);
            e.account_id = "4000".into();
            e
        };
        vec![mk("-D", CdFlag::Debit), mk("-C", CdFlag::Credit)]
    }

    fn flags_for(target: &str, entries: Vec<JournalEntry>, config: &JetConfig) -> JetFlags {
        let ds = Dataset::from_entries(entries).unwrap();
        flag_all(&ds, config)[target]
    }

    fn tuesday() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 3, 5).unwrap()
    }

    fn sunday() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 3, 10).unwrap()
    }

    /// Larger filler postings keep the target out of top_n.
    fn filler(n: usize) -> Vec<JournalEntry> {
        (0..n)
            .flat_map(|i| posting(&format!("F{i:03}"), 1, tuesday(), (10, 0), "5000"))
            .collect()
    }

    fn config() -> JetConfig {
        JetConfig {
            top_n_count: 3,
            ..JetConfig::default()
        }
    }

    #[test]
    fn normal_weekday_posting() {
        let mut e = posting("P", 5, tuesday(), (14, 0), "100");
        e.extend(filler(5));
        let f = flags_for("P", e, &config());
        assert_eq!((f.promptly, f.weekend, f.nwh, f.top_n, f.high_cash), (1, 0, 0, 0, 0));
        assert_eq!(f.triggered_count, 0);
        assert_eq!(f.verdict, 0);
    }

    #[test]
    fn late_sunday_posting_is_anomalous() {
        let mut e = posting("P", 35, sunday(), (14, 0), "100");
        e.extend(filler(5));
        let f = flags_for("P", e, &config());
        assert_eq!((f.promptly, f.weekend), (3, 2));
        assert_eq!(f.triggered_count, 2);
        assert_eq!(f.verdict, 1);
    }

    #[test]
    fn single_flag_stays_below_threshold() {
        let mut e = posting("P", 15, tuesday(), (14, 0), "100");
        e.extend(filler(5));
        let f = flags_for("P", e, &config());
        assert_eq!(f.promptly, 2);
        assert_eq!(f.triggered_count, 1);
        assert_eq!(f.verdict, 0);
    }

    #[test]
    fn promptly_boundaries() {
        assert_eq!(promptly_bucket(-3), 1);
        assert_eq!(promptly_bucket(0), 1);
        assert_eq!(promptly_bucket(9), 1);
        assert_eq!(promptly_bucket(10), 2);
        assert_eq!(promptly_bucket(29), 2);
        assert_eq!(promptly_bucket(30), 3);
    }

    #[test]
    fn working_hours_are_half_open() {
        let wh = WorkingHours::default();
        assert!(wh.contains(NaiveTime::from_hms_opt(8, 0, 0).unwrap()));
        assert!(wh.contains(NaiveTime::from_hms_opt(17, 59, 0).unwrap()));
        assert!(!wh.contains(NaiveTime::from_hms_opt(18, 0, 0).unwrap()));
        assert!(!wh.contains(NaiveTime::from_hms_opt(7, 59, 0).unwrap()));
    }

    #[test]
    fn missing_time_never_triggers_nwh() {
        let mut e = posting("P", 1, tuesday(), (3, 0), "100");
        for line in &mut e {
            line.posting_time = None;
        }
        e.extend(filler(5));
        let f = flags_for("P", e, &config());
        assert_eq!(f.nwh, 0);
        assert!(f.time_missing);
    }

    #[test]
    fn top_n_ties_break_on_entry_id() {
        let mut e = Vec::new();
        for id in ["P3", "P1", "P2"] {
            e.extend(posting(id, 1, tuesday(), (10, 0), "700"));
        }
        let cfg = JetConfig {
            top_n_count: 2,
            ..JetConfig::default()
        };
        let ds = Dataset::from_entries(e).unwrap();
        let flags = flag_all(&ds, &cfg);
        assert_eq!(flags["P1"].top_n, 1);
        assert_eq!(flags["P2"].top_n, 1);
        assert_eq!(flags["P3"].top_n, 0);
    }

    #[test]
    fn high_cash_needs_cash_account_and_large_amount() {
        let mut e = filler(30);
        let mut big = posting("P", 1, tuesday(), (10, 0), "9000");
        big[0].account_id = "1000".into();
        let mut small_cash = posting("Q", 1, tuesday(), (10, 0), "10");
        small_cash[0].account_id = "1000".into();
        e.extend(big);
        e.extend(small_cash);
        let flags = flag_all(&Dataset::from_entries(e).unwrap(), &config());
        assert_eq!(flags["P"].high_cash, 1);
        assert_eq!(flags["Q"].high_cash, 0);
        assert_eq!(flags["F000"].high_cash, 0);
    }

    #[test]
    fn missing_context_is_an_error() {
        let g = PostingGroup::new("P", posting("P", 1, tuesday(), (10, 0), "1"));
        assert_eq!(compute_flags(&g, &config(), None), Err(JetError::MissingContext));
    }

    #[test]
    fn pseudo_label_marks_three_flag_posting() {
        let mut e = posting("P", 40, sunday(), (23, 0), "1");
        e.extend(filler(5));
        let labeled = pseudo_label(&Dataset::from_entries(e).unwrap(), &config());
        assert_eq!(labeled.labels().unwrap()["P"], 1);
        assert_eq!(labeled.label_provenance(), LabelProvenance::JetPseudoLabel);
        let again = pseudo_label(&labeled, &config());
        assert_eq!(again.labels(), labeled.labels());
    }

    #[test]
    fn config_validation() {
        let mut c = JetConfig::default();
        assert!(c.validate().is_ok());
        c.working_hours = WorkingHours::new(c.working_hours.end, c.working_hours.start);
        assert!(c.validate().is_err());
    }
}
