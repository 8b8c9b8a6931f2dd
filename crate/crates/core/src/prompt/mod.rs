//! Prompt assembly.
//!
//! Templates live in `templates/` as plain text with `{snake_case}`
//! placeholders. Each file holds a system part and a per-instance part,
//! separated by [`template::INSTANCE_MARKER`]. The system part carries the
//! guidelines and dataset context; the instance part carries the transaction
//! record and its per-instance hints.

mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::iforest::IForestResult;
use crate::jet::JetFlags;
use crate::ledger::{decimal_number, Amount, EntryRecord, JournalEntry, PostingGroup};
use crate::stats::{percentile_of, DatasetStats};

pub use template::{placeholders, render, Template, INSTANCE_MARKER};

pub const TEMPLATE_VERSION: &str = "v1";

const AUDIT_COPILOT_V1: &str = include_str!("../../templates/audit_copilot.v1.txt");
const NO_IF_V1: &str = include_str!("../../templates/no_if.v1.txt");
const NO_STATS_NO_IF_V1: &str = include_str!("../../templates/no_stats_no_if.v1.txt");
const SYNTHETIC_FLAGS_V1: &str = include_str!("../../templates/synthetic_flags.v1.txt");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("variant {variant:?} needs `{field}`")]
    MissingInput { variant: VariantKind, field: String },
    #[error("placeholder `{{{0}}}` has no value")]
    PlaceholderUnresolved(String),
    #[error("unknown template version `{0}`")]
    UnknownTemplateVersion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Full prompt: dataset statistics plus isolation-forest hints.
    AuditCopilot,
    /// Statistics without isolation-forest hints.
    NoIf,
    /// Neither statistics nor isolation-forest hints.
    NoStatsNoIf,
    /// Engineered JET flags with the two-or-more-flags decision rule.
    SyntheticFlags,
}

impl VariantKind {
    pub const ABLATION: [VariantKind; 3] = [VariantKind::AuditCopilot, VariantKind::NoIf, VariantKind::NoStatsNoIf];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::AuditCopilot => "audit_copilot",
            VariantKind::NoIf => "no_if",
            VariantKind::NoStatsNoIf => "no_stats_no_if",
            VariantKind::SyntheticFlags => "synthetic_flags",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            VariantKind::AuditCopilot,
            VariantKind::NoIf,
            VariantKind::NoStatsNoIf,
            VariantKind::SyntheticFlags,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }

    pub fn needs_stats(self) -> bool {
        matches!(self, VariantKind::AuditCopilot | VariantKind::NoIf)
    }

    pub fn needs_iforest(self) -> bool {
        self == VariantKind::AuditCopilot
    }

    pub fn needs_flags(self) -> bool {
        self == VariantKind::SyntheticFlags
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub kind: VariantKind,
    #[serde(default = "default_version")]
    pub template_version: String,
}

fn default_version() -> String {
    TEMPLATE_VERSION.to_string()
}

impl PromptVariant {
    pub fn new(kind: VariantKind) -> Self {
        PromptVariant {
            kind,
            template_version: TEMPLATE_VERSION.to_string(),
        }
    }

    pub fn template(&self) -> Result<Template, PromptError> {
        if self.template_version != TEMPLATE_VERSION {
            return Err(PromptError::UnknownTemplateVersion(self.template_version.clone()));
        }
        let source = match self.kind {
            VariantKind::AuditCopilot => AUDIT_COPILOT_V1,
            VariantKind::NoIf => NO_IF_V1,
            VariantKind::NoStatsNoIf => NO_STATS_NO_IF_V1,
            VariantKind::SyntheticFlags => SYNTHETIC_FLAGS_V1,
        };
        Ok(Template::from_source(self.kind.name(), TEMPLATE_VERSION, source))
    }
}

/// What a prompt describes: a whole posting group or a single ledger line.
#[derive(Debug, Clone, Copy)]
pub enum Instance<'a> {
    Group(&'a PostingGroup),
    Entry(&'a JournalEntry),
}

impl Instance<'_> {
    /// Key used to look up per-instance results (posting_id or entry_id).
    pub fn key(&self) -> &str {
        match self {
            Instance::Group(g) => &g.posting_id,
            Instance::Entry(e) => &e.entry_id,
        }
    }

    fn lead(&self) -> Option<&JournalEntry> {
        match self {
            Instance::Group(g) => g.lead_entry(),
            Instance::Entry(e) => Some(e),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInputs<'a> {
    pub stats: Option<&'a DatasetStats>,
    pub iforest: Option<&'a IForestResult>,
    pub flags: Option<&'a JetFlags>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub posting_id: String,
    pub variant: PromptVariant,
    pub system_text: String,
    pub instance_text: String,
    pub interpolation_record: BTreeMap<String, String>,
}

impl PromptBundle {
    /// System and instance parts joined as one prompt.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.instance_text)
    }

    /// The compact JSON record of the instance.
    pub fn record(&self) -> &str {
        self.interpolation_record
            .get("transaction_data")
            .map(String::as_str)
            .unwrap_or("")
    }
}

#[derive(Serialize)]
struct GroupRecord<'a> {
    posting_id: &'a str,
    debit_total: Box<serde_json::value::RawValue>,
    credit_total: Box<serde_json::value::RawValue>,
    entries: Vec<EntryRecord<'a>>,
}

#[derive(Serialize)]
struct FeatureRecord {
    promptly: u8,
    weekend: u8,
    nwh: u8,
    top_n: u8,
    high_cash: u8,
}

#[derive(Serialize)]
struct FlaggedRecord<R: Serialize> {
    #[serde(flatten)]
    record: R,
    features: FeatureRecord,
}

fn number(amount: Amount) -> Box<serde_json::value::RawValue> {
    decimal_number(amount)
}

fn group_record(g: &PostingGroup) -> GroupRecord<'_> {
    GroupRecord {
        posting_id: &g.posting_id,
        debit_total: number(g.debit_total),
        credit_total: number(g.credit_total),
        entries: g.entries.iter().map(EntryRecord::from).collect(),
    }
}

/// Single-line JSON record of the instance in schema field order.
pub fn render_instance_record(instance: Instance<'_>) -> String {
    let out = match instance {
        Instance::Group(g) => serde_json::to_string(&group_record(g)),
        Instance::Entry(e) => serde_json::to_string(&EntryRecord::from(e)),
    };
    out.expect("records serialize")
}

fn render_flagged_record(instance: Instance<'_>, flags: &JetFlags) -> String {
    let features = FeatureRecord {
        promptly: flags.promptly,
        weekend: flags.weekend,
        nwh: flags.nwh,
        top_n: flags.top_n,
        high_cash: flags.high_cash,
    };
    let out = match instance {
        Instance::Group(g) => serde_json::to_string(&FlaggedRecord {
            record: group_record(g),
            features,
        }),
        Instance::Entry(e) => serde_json::to_string(&FlaggedRecord {
            record: EntryRecord::from(e),
            features,
        }),
    };
    out.expect("records serialize")
}

fn missing(variant: VariantKind, field: &str) -> PromptError {
    PromptError::MissingInput {
        variant,
        field: field.to_string(),
    }
}

pub fn build_prompt(
    instance: Instance<'_>,
    inputs: PromptInputs<'_>,
    variant: &PromptVariant,
) -> Result<PromptBundle, PromptError> {
    let kind = variant.kind;
    let template = variant.template()?;
    let key = instance.key();

    let mut values: BTreeMap<String, String> = BTreeMap::new();
    if kind.needs_flags() {
        let flags = inputs.flags.ok_or_else(|| missing(kind, "flags"))?;
        values.insert("transaction_data".into(), render_flagged_record(instance, flags));
    } else {
        values.insert("transaction_data".into(), render_instance_record(instance));
    }
    if kind.needs_stats() {
        let stats = inputs.stats.ok_or_else(|| missing(kind, "stats"))?;
        for (k, v) in stats.placeholders() {
            values.insert(k.to_string(), v);
        }
        if let Some(lead) = instance.lead() {
            values.insert("user_id".into(), lead.user_id.clone());
            values.insert("user_tx_count".into(), stats.user_tx_count(&lead.user_id).to_string());
            values.insert("abs_amount".into(), lead.amount.to_string());
            let pct = percentile_of(lead.amount, stats).map_err(|_| missing(kind, "stats.sorted_abs_amounts"))?;
            values.insert("amount_percentile".into(), pct.to_string());
        }
    }
    if kind.needs_iforest() {
        let forest = inputs.iforest.ok_or_else(|| missing(kind, "iforest"))?;
        let score = forest
            .scores
            .get(key)
            .ok_or_else(|| missing(kind, &format!("iforest.scores[{key}]")))?;
        let status = match forest.is_anomaly(key) {
            Some(true) => "Anomaly",
            Some(false) => "Normal",
            None => return Err(missing(kind, &format!("iforest.decisions[{key}]"))),
        };
        values.insert("if_status".into(), status.to_string());
        values.insert("if_score".into(), format!("{score:.4}"));
    }

    let system_text = render(template.system, &values)?;
    let instance_text = render(template.instance, &values)?;
    let used = template.placeholders();
    values.retain(|k, _| used.contains(k));

    Ok(PromptBundle {
        posting_id: key.to_string(),
        variant: variant.clone(),
        system_text,
        instance_text,
        interpolation_record: values,
    })
}
