use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::eval::Averaging;
use crate::gateway::BackendConfig;
use crate::iforest::IForestConfig;
use crate::jet::JetConfig;
use crate::ledger::{DataFormat, Granularity};
use crate::prompt::{PromptVariant, VariantKind};
use crate::synthgen::GenConfig;

/// Everything a run needs, as one JSON document. Command-line flags override
/// fields after loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ledger file to analyse; ignored when `gen` is set.
    pub dataset_path: Option<PathBuf>,
    /// Defaults to a guess from the dataset extension.
    pub format: Option<DataFormat>,
    /// Optional `posting_id,label` sidecar with ground-truth labels.
    pub labels_path: Option<PathBuf>,
    /// Generate a synthetic ledger instead of loading one.
    pub gen: Option<GenConfig>,
    /// Label an unlabeled dataset with JET verdicts before evaluation.
    pub pseudo_label: bool,
    pub granularity: Granularity,
    pub jet: JetConfig,
    pub iforest: IForestConfig,
    pub variant: PromptVariant,
    /// Variants run by `ablate`.
    pub ablation_variants: Vec<VariantKind>,
    pub backend: BackendConfig,
    pub output_dir: PathBuf,
    pub metric_averaging: Averaging,
    /// Strict ledger parsing and strict label matching.
    pub strict: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: None,
            format: None,
            labels_path: None,
            gen: None,
            pseudo_label: false,
            granularity: Granularity::Posting,
            jet: JetConfig::default(),
            iforest: IForestConfig::default(),
            variant: PromptVariant::new(VariantKind::AuditCopilot),
            ablation_variants: VariantKind::ABLATION.to_vec(),
            backend: BackendConfig::default(),
            output_dir: PathBuf::from("runs"),
            metric_averaging: Averaging::PositiveClass,
            strict: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Pins every stochastic component to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.iforest.seed = seed;
        if let Some(gen) = &mut self.gen {
            gen.seed = seed;
        }
    }

    /// Generator settings aligned with the run's JET configuration, so the
    /// injected labels hold under the rules the run applies.
    pub fn effective_gen(&self) -> Option<GenConfig> {
        self.gen.clone().map(|mut g| {
            g.working_hours = self.jet.working_hours;
            g.top_n_count = self.jet.top_n_count;
            g.high_cash_percentile = self.jet.high_cash_percentile;
            g.cash_account_ids = self.jet.cash_account_ids.clone();
            g
        })
    }

    pub fn data_format(&self) -> DataFormat {
        self.format
            .or_else(|| self.dataset_path.as_deref().map(DataFormat::from_path))
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let config = |m: String| Err(PipelineError::Config(m));
        self.jet.validate()?;
        self.iforest.validate()?;
        self.backend.validate()?;
        if let Some(gen) = &self.effective_gen() {
            gen.validate()?;
        } else {
            match &self.dataset_path {
                None => return config("either dataset_path or gen must be set".into()),
                Some(p) if !p.is_file() => return config(format!("dataset `{}` does not exist", p.display())),
                Some(_) => {}
            }
        }
        if let Some(p) = &self.labels_path {
            if !p.is_file() {
                return config(format!("labels file `{}` does not exist", p.display()));
            }
        }
        if self.ablation_variants.is_empty() {
            return config("ablation_variants is empty".into());
        }
        Ok(())
    }
}
