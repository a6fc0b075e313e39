use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionError, CaptionRequest};

pub const DEFAULT_TEMPLATE_ID: &str = "region-caption-v1";

const DEFAULT_TEMPLATE: &str = "The screenshot shows {count} UI elements marked with numbered boxes.\n\
For each mark, write one short caption naming the element type, any visible text in quotes, and notable attributes such as color or state.\n\
Marks:\n{marks}";

/// Prompt text with `{count}` and `{marks}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

/// Id-addressed prompt templates, loaded from configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(DEFAULT_TEMPLATE_ID.to_string(), DEFAULT_TEMPLATE.to_string());
        PromptTemplates { templates }
    }
}

impl PromptTemplates {
    /// Reads a JSON array of `{id, text}` objects; entries override the
    /// built-in defaults.
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let raw = std::fs::read_to_string(path)?;
        let list: Vec<PromptTemplate> = serde_json::from_str(&raw).map_err(std::io::Error::other)?;
        let mut out = PromptTemplates::default();
        for t in list {
            out.templates.insert(t.id, t.text);
        }
        Ok(out)
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.id, template.text);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn render(&self, request: &CaptionRequest) -> Result<String, CaptionError> {
        let text = self
            .templates
            .get(&request.prompt_template_id)
            .ok_or_else(|| {
                CaptionError::InvalidRequest(format!(
                    "unknown prompt template {}",
                    request.prompt_template_id
                ))
            })?;
        let marks = request
            .elements
            .iter()
            .map(|e| {
                let [x1, y1, x2, y2] = e.bbox.to_array();
                format!("{}: [{x1}, {y1}, {x2}, {y2}] ({})", e.mark_id, e.kind)
            })
            .collect::<Vec<_>>()
            .join("\n");
        Ok(text
            .replace("{count}", &request.elements.len().to_string())
            .replace("{marks}", &marks))
    }
}
