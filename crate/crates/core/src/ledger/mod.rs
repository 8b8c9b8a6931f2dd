//! Journal-entry domain types and ledger file ingestion.
//!
//! A [`JournalEntry`] is one ledger line. Lines sharing a posting ID form a
//! [`PostingGroup`], the unit most detectors score. A [`Dataset`] owns the
//! lines, the derived groups and optional per-posting labels.

mod amount;
mod io;

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, NaiveTime, Weekday};
use serde::{Deserialize, Serialize};

pub use amount::{Amount, AmountParseError};
pub(crate) use io::{decimal_number, EntryRecord};
pub use io::{load_dataset, read_labels, write_dataset, write_labels, write_report, DataFormat, LabelRow, ParseMode};

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: duplicate entry_id `{entry_id}`")]
    DuplicateEntryId { line: u64, entry_id: String },
    #[error("unknown column `{0}` (strict mode)")]
    UnknownColumn(String),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("label refers to unknown posting `{0}`")]
    UnknownLabelPosting(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failure: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CdFlag {
    #[serde(rename = "D")]
    Debit,
    #[serde(rename = "C")]
    Credit,
}

impl CdFlag {
    pub fn code(self) -> &'static str {
        match self {
            CdFlag::Debit => "D",
            CdFlag::Credit => "C",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s.trim() {
            "D" => Some(CdFlag::Debit),
            "C" => Some(CdFlag::Credit),
            _ => None,
        }
    }
}

/// One ledger line.
///
/// `amount` is a magnitude; the direction lives in `cd_flag`. `posting_time`
/// and `tax_rate` are optional because some ledgers (notably anonymized
/// exports) omit them.
#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry {
    pub entry_id: String,
    pub posting_id: String,
    pub posting_date: NaiveDate,
    pub posting_time: Option<NaiveTime>,
    pub transaction_date: NaiveDate,
    pub cd_flag: CdFlag,
    pub amount: Amount,
    pub currency: String,
    pub tax_rate: Option<f64>,
    pub account_id: String,
    pub user_id: String,
    pub memo: String,
}

impl JournalEntry {
    /// Days between transaction and posting; negative for back-dated postings.
    pub fn payment_period_days(&self) -> i64 {
        (self.posting_date - self.transaction_date).num_days()
    }

    pub fn posting_weekday(&self) -> Weekday {
        self.posting_date.weekday()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostingGroup {
    pub posting_id: String,
    pub entries: Vec<JournalEntry>,
    pub debit_total: Amount,
    pub credit_total: Amount,
}

impl PostingGroup {
    /// Builds a group, recomputing both totals from the lines.
    pub fn new(posting_id: impl Into<String>, entries: Vec<JournalEntry>) -> Self {
        let mut debit_total = Amount::ZERO;
        let mut credit_total = Amount::ZERO;
        for e in &entries {
            match e.cd_flag {
                CdFlag::Debit => debit_total = debit_total + e.amount,
                CdFlag::Credit => credit_total = credit_total + e.amount,
            }
        }
        PostingGroup {
            posting_id: posting_id.into(),
            entries,
            debit_total,
            credit_total,
        }
    }

    pub fn is_balanced(&self) -> bool {
        self.debit_total == self.credit_total
    }

    /// The line with the largest amount; ties go to the smallest entry_id.
    pub fn lead_entry(&self) -> Option<&JournalEntry> {
        self.entries
            .iter()
            .min_by(|a, b| b.amount.cmp(&a.amount).then_with(|| a.entry_id.cmp(&b.entry_id)))
    }

    pub fn max_amount(&self) -> Amount {
        self.entries.iter().map(|e| e.amount).max().unwrap_or_default()
    }
}

/// Groups lines by posting ID. Totals are recomputed; line order inside each
/// group follows input order.
pub fn group_by_posting(entries: &[JournalEntry]) -> BTreeMap<String, PostingGroup> {
    let mut buckets: BTreeMap<String, Vec<JournalEntry>> = BTreeMap::new();
    for e in entries {
        buckets.entry(e.posting_id.clone()).or_default().push(e.clone());
    }
    buckets
        .into_iter()
        .map(|(id, lines)| {
            let group = PostingGroup::new(id.clone(), lines);
            (id, group)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelProvenance {
    GroundTruth,
    JetPseudoLabel,
    #[default]
    None,
}

/// Unit of analysis: one request and one label per posting group, or one per
/// ledger line when posting IDs are missing or meaningless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Posting,
    Transaction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    entries: Vec<JournalEntry>,
    groups: BTreeMap<String, PostingGroup>,
    labels: Option<BTreeMap<String, u8>>,
    label_provenance: LabelProvenance,
}

impl Dataset {
    /// Builds an unlabeled dataset; entry IDs must be unique.
    pub fn from_entries(entries: Vec<JournalEntry>) -> Result<Self, LedgerError> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.entry_id.as_str()) {
                return Err(LedgerError::DuplicateEntryId {
                    line: i as u64 + 1,
                    entry_id: e.entry_id.clone(),
                });
            }
        }
        let groups = group_by_posting(&entries);
        Ok(Dataset {
            entries,
            groups,
            labels: None,
            label_provenance: LabelProvenance::None,
        })
    }

    pub fn with_labels(
        mut self,
        labels: BTreeMap<String, u8>,
        provenance: LabelProvenance,
    ) -> Result<Self, LedgerError> {
        if let Some(unknown) = labels.keys().find(|k| !self.groups.contains_key(*k)) {
            return Err(LedgerError::UnknownLabelPosting(unknown.clone()));
        }
        self.labels = Some(labels);
        self.label_provenance = provenance;
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self.label_provenance = LabelProvenance::None;
        self
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn groups(&self) -> &BTreeMap<String, PostingGroup> {
        &self.groups
    }

    pub fn labels(&self) -> Option<&BTreeMap<String, u8>> {
        self.labels.as_ref()
    }

    pub fn label_provenance(&self) -> LabelProvenance {
        self.label_provenance
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Re-keys every line into its own single-line group (posting_id becomes
    /// entry_id). Labels carry over from the line's original posting.
    pub fn at_granularity(&self, granularity: Granularity) -> Dataset {
        match granularity {
            Granularity::Posting => self.clone(),
            Granularity::Transaction => {
                let entries: Vec<JournalEntry> = self
                    .entries
                    .iter()
                    .map(|e| JournalEntry {
                        posting_id: e.entry_id.clone(),
                        ..e.clone()
                    })
                    .collect();
                let labels = self.labels.as_ref().map(|labels| {
                    self.entries
                        .iter()
                        .filter_map(|e| labels.get(&e.posting_id).map(|&l| (e.entry_id.clone(), l)))
                        .collect()
                });
                Dataset {
                    groups: group_by_posting(&entries),
                    entries,
                    labels,
                    label_provenance: self.label_provenance,
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn entry(id: &str, posting: &str, cd: CdFlag, amount: &str) -> JournalEntry {
        JournalEntry {
            entry_id: id.to_string(),
            posting_id: posting.to_string(),
            posting_date: NaiveDate::from_ymd_opt(2024, 3, 5).unwrap(),
            posting_time: NaiveTime::from_hms_opt(14, 0, 0),
            transaction_date: NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(),
            cd_flag: cd,
            amount: amount.parse().unwrap(),
            currency: "EUR".to_string(),
            tax_rate: Some(19.0),
            account_id: "4000".to_string(),
            user_id: "U01".to_string(),
            memo: String::new(),
        }
    }
}
