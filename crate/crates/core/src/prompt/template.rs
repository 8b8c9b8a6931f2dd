use std::collections::{BTreeMap, BTreeSet};

use super::PromptError;

/// Line separating the system part of a template file from its per-instance part.
pub const INSTANCE_MARKER: &str = "=== instance ===\n";

#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub name: &'static str,
    pub version: &'static str,
    pub system: &'static str,
    pub instance: &'static str,
}

impl Template {
    pub(crate) fn from_source(name: &'static str, version: &'static str, source: &'static str) -> Self {
        let (system, instance) = source
            .split_once(INSTANCE_MARKER)
            .expect("template carries an instance marker");
        Template {
            name,
            version,
            system: system.trim_end_matches('\n'),
            instance: instance.trim_end_matches('\n'),
        }
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut out = placeholders(self.system);
        out.extend(placeholders(self.instance));
        out
    }
}

fn is_name_start(b: u8) -> bool {
    b.is_ascii_lowercase() || b == b'_'
}

fn is_name_char(b: u8) -> bool {
    b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_'
}

/// Finds `{snake_case}` placeholders; other braces (JSON examples) are text.
fn scan(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' && i + 1 < bytes.len() && is_name_start(bytes[i + 1]) {
            let mut j = i + 1;
            while j < bytes.len() && is_name_char(bytes[j]) {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' {
                spans.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

pub fn placeholders(text: &str) -> BTreeSet<String> {
    scan(text)
        .into_iter()
        .map(|(a, b)| text[a + 1..b - 1].to_string())
        .collect()
}

/// Single-pass substitution: interpolated values are never rescanned.
pub fn render(text: &str, values: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (a, b) in scan(text) {
        let name = &text[a + 1..b - 1];
        let value = values
            .get(name)
            .ok_or_else(|| PromptError::PlaceholderUnresolved(name.to_string()))?;
        out.push_str(&text[last..a]);
        out.push_str(value);
        last = b;
    }
    out.push_str(&text[last..]);
    Ok(out)
}
