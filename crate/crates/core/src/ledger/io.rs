use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{Amount, CdFlag, Dataset, JournalEntry, LedgerError};

/// Column order of the ledger schema, shared by CSV and JSONL.
pub const COLUMNS: [&str; 12] = [
    "entry_id",
    "posting_id",
    "posting_date",
    "posting_time",
    "transaction_date",
    "cd_flag",
    "amount",
    "currency",
    "tax_rate",
    "account_id",
    "user_id",
    "memo",
];

const OPTIONAL_COLUMNS: [&str; 3] = ["posting_time", "tax_rate", "memo"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Csv,
    Jsonl,
}

impl DataFormat {
    /// Guesses the format from a file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DataFormat::Jsonl,
            _ => DataFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

fn io_err(path: &Path, source: std::io::Error) -> LedgerError {
    LedgerError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

fn malformed(line: u64, reason: impl Into<String>) -> LedgerError {
    LedgerError::MalformedRow {
        line,
        reason: reason.into(),
    }
}

/// Reads a ledger file. Row order is preserved; groups are derived.
pub fn load_dataset(path: &Path, format: DataFormat, mode: ParseMode) -> Result<Dataset, LedgerError> {
    let entries = match format {
        DataFormat::Csv => read_csv(path, mode)?,
        DataFormat::Jsonl => read_jsonl(path, mode)?,
    };
    let mut seen = HashSet::with_capacity(entries.len());
    for (line, e) in &entries {
        if !seen.insert(e.entry_id.clone()) {
            return Err(LedgerError::DuplicateEntryId {
                line: *line,
                entry_id: e.entry_id.clone(),
            });
        }
    }
    Dataset::from_entries(entries.into_iter().map(|(_, e)| e).collect())
}

fn check_columns<'a>(names: impl Iterator<Item = &'a str>, mode: ParseMode) -> Result<(), LedgerError> {
    let present: HashSet<&str> = names.collect();
    if mode == ParseMode::Strict {
        if let Some(unknown) = present.iter().find(|c| !COLUMNS.contains(c)) {
            return Err(LedgerError::UnknownColumn(unknown.to_string()));
        }
    }
    for col in COLUMNS {
        if !OPTIONAL_COLUMNS.contains(&col) && !present.contains(col) {
            return Err(LedgerError::MissingColumn(col.to_string()));
        }
    }
    Ok(())
}

fn read_csv(path: &Path, mode: ParseMode) -> Result<Vec<(u64, JournalEntry)>, LedgerError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    if file.metadata().map_err(|e| io_err(path, e))?.len() == 0 {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    check_columns(headers.iter().map(str::trim), mode)?;
    let index: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |name: &str| index.get(name).and_then(|&i| record.get(i)).map(str::to_string);
        out.push((line, parse_entry(line, &field)?));
    }
    Ok(out)
}

fn read_jsonl(path: &Path, mode: ParseMode) -> Result<Vec<(u64, JournalEntry)>, LedgerError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: BTreeMap<String, Box<RawValue>> =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        check_columns(obj.keys().map(String::as_str), mode).map_err(|e| match e {
            LedgerError::MissingColumn(c) => malformed(line_no, format!("missing field `{c}`")),
            other => other,
        })?;
        let mut values = BTreeMap::new();
        for (k, raw) in &obj {
            let text = raw.get();
            let value = if text == "null" {
                None
            } else if text.starts_with('"') {
                Some(
                    serde_json::from_str::<String>(text)
                        .map_err(|e| malformed(line_no, format!("field `{k}`: {e}")))?,
                )
            } else if text.starts_with('{') || text.starts_with('[') {
                return Err(malformed(line_no, format!("field `{k}` must be a scalar")));
            } else {
                Some(text.to_string())
            };
            values.insert(k.as_str(), value);
        }
        let field = |name: &str| values.get(name).cloned().flatten();
        out.push((line_no, parse_entry(line_no, &field)?));
    }
    Ok(out)
}

fn parse_entry(line: u64, field: &dyn Fn(&str) -> Option<String>) -> Result<JournalEntry, LedgerError> {
    let required = |name: &str| -> Result<String, LedgerError> {
        match field(name) {
            Some(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(malformed(line, format!("`{name}` is empty"))),
        }
    };
    let optional = |name: &str| field(name).filter(|v| !v.trim().is_empty());
    let date = |name: &str| -> Result<NaiveDate, LedgerError> {
        let v = required(name)?;
        NaiveDate::parse_from_str(v.trim(), "%Y-%m-%d")
            .map_err(|_| malformed(line, format!("`{name}` is not YYYY-MM-DD: `{v}`")))
    };

    let posting_time = optional("posting_time")
        .map(|v| {
            NaiveTime::parse_from_str(v.trim(), "%H:%M")
                .map_err(|_| malformed(line, format!("`posting_time` is not HH:MM: `{v}`")))
        })
        .transpose()?;
    let cd_raw = required("cd_flag")?;
    let cd_flag = CdFlag::from_code(&cd_raw)
        .ok_or_else(|| malformed(line, format!("`cd_flag` must be D or C, got `{cd_raw}`")))?;
    let amount: Amount = required("amount")?
        .parse()
        .map_err(|e| malformed(line, format!("`amount`: {e}")))?;
    let tax_rate = optional("tax_rate")
        .map(|v| {
            let rate: f64 = v
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("`tax_rate` is not a number: `{v}`")))?;
            if !(0.0..=100.0).contains(&rate) {
                return Err(malformed(line, format!("`tax_rate` {rate} outside [0,100]")));
            }
            Ok(rate)
        })
        .transpose()?;

    Ok(JournalEntry {
        entry_id: required("entry_id")?,
        posting_id: required("posting_id")?,
        posting_date: date("posting_date")?,
        posting_time,
        transaction_date: date("transaction_date")?,
        cd_flag,
        amount,
        currency: required("currency")?.trim().to_string(),
        tax_rate,
        account_id: required("account_id")?,
        user_id: required("user_id")?,
        memo: field("memo").unwrap_or_default(),
    })
}

fn format_time(t: &Option<NaiveTime>) -> String {
    t.map(|t| t.format("%H:%M").to_string()).unwrap_or_default()
}

/// Serializes entries in the ledger schema, in the dataset's line order.
pub fn write_dataset(dataset: &Dataset, path: &Path, format: DataFormat) -> Result<(), LedgerError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    match format {
        DataFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            let ser = |e: csv::Error| LedgerError::Serialize(e.to_string());
            w.write_record(COLUMNS).map_err(ser)?;
            for e in dataset.entries() {
                w.write_record([
                    e.entry_id.as_str(),
                    &e.posting_id,
                    &e.posting_date.to_string(),
                    &format_time(&e.posting_time),
                    &e.transaction_date.to_string(),
                    e.cd_flag.code(),
                    &e.amount.to_string(),
                    &e.currency,
                    &e.tax_rate.map(|r| r.to_string()).unwrap_or_default(),
                    &e.account_id,
                    &e.user_id,
                    &e.memo,
                ])
                .map_err(ser)?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
        DataFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for e in dataset.entries() {
                let line =
                    serde_json::to_string(&EntryRecord::from(e)).map_err(|e| LedgerError::Serialize(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

/// JSON view of an entry in schema field order, amounts as plain decimal numbers.
#[derive(Serialize)]
pub(crate) struct EntryRecord<'a> {
    entry_id: &'a str,
    posting_id: &'a str,
    posting_date: String,
    posting_time: Option<String>,
    transaction_date: String,
    cd_flag: &'static str,
    amount: Box<RawValue>,
    currency: &'a str,
    tax_rate: Option<f64>,
    account_id: &'a str,
    user_id: &'a str,
    memo: &'a str,
}

pub(crate) fn decimal_number(amount: Amount) -> Box<RawValue> {
    RawValue::from_string(amount.to_string()).expect("formatted amount is a JSON number")
}

impl<'a> From<&'a JournalEntry> for EntryRecord<'a> {
    fn from(e: &'a JournalEntry) -> Self {
        EntryRecord {
            entry_id: &e.entry_id,
            posting_id: &e.posting_id,
            posting_date: e.posting_date.to_string(),
            posting_time: e.posting_time.map(|t| t.format("%H:%M").to_string()),
            transaction_date: e.transaction_date.to_string(),
            cd_flag: e.cd_flag.code(),
            amount: decimal_number(e.amount),
            currency: &e.currency,
            tax_rate: e.tax_rate,
            account_id: &e.account_id,
            user_id: &e.user_id,
            memo: &e.memo,
        }
    }
}

/// Sidecar label row: `posting_id,label,archetypes` (archetypes `;`-joined).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub posting_id: String,
    pub label: u8,
    #[serde(default)]
    pub archetypes: String,
}

pub fn write_labels(rows: &[LabelRow], path: &Path) -> Result<(), LedgerError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let ser = |e: csv::Error| LedgerError::Serialize(e.to_string());
    if rows.is_empty() {
        w.write_record(["posting_id", "label", "archetypes"]).map_err(ser)?;
    }
    for r in rows {
        w.serialize(r).map_err(ser)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a label sidecar; only `posting_id` and `label` are required.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>, LedgerError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        if row.label > 1 {
            return Err(malformed(0, format!("label for `{}` must be 0 or 1", row.posting_id)));
        }
        out.insert(row.posting_id, row.label);
    }
    Ok(out)
}

/// Writes any serializable report as pretty JSON with sorted object keys.
pub fn write_report<T: Serialize + ?Sized>(report: &T, path: &Path) -> Result<(), LedgerError> {
    // Round-tripping through Value sorts keys (serde_json's Map is a BTreeMap).
    let value = serde_json::to_value(report).map_err(|e| LedgerError::Serialize(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| LedgerError::Serialize(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
