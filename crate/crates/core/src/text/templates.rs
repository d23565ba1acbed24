use std::path::Path;

use super::embed::QueryText;
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{object}";
pub const DEFAULT_TEMPLATE: &str = "A photo of a {object}";

/// Prompt templates; index 0 is always [`DEFAULT_TEMPLATE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateList {
    templates: Vec<String>,
}

impl Default for TemplateList {
    fn default() -> Self {
        Self {
            templates: vec![DEFAULT_TEMPLATE.to_string()],
        }
    }
}

impl TemplateList {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.first().map(String::as_str) != Some(DEFAULT_TEMPLATE) {
            return Err(Error::Config(format!(
                "template list must start with \"{DEFAULT_TEMPLATE}\""
            )));
        }
        for (i, t) in templates.iter().enumerate() {
            let count = t.matches(PLACEHOLDER).count();
            if count != 1 {
                return Err(Error::Config(format!(
                    "template {i} (\"{t}\") has {count} {PLACEHOLDER} placeholders, expected 1"
                )));
            }
        }
        Ok(Self { templates })
    }

    /// One template per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self::new(templates)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.templates
    }
}

/// Substitutes `class_name` into every template, index-aligned.
pub fn render_templates(class_name: &str, templates: &TemplateList) -> Result<Vec<QueryText>> {
    if class_name.trim().is_empty() {
        return Err(Error::Input("class name is empty".into()));
    }
    templates
        .templates
        .iter()
        .enumerate()
        .map(|(i, t)| Ok(QueryText::new(t.replacen(PLACEHOLDER, class_name, 1))?.with_template(i)))
        .collect()
}

/// Per-class mean over template rows of class probabilities.
pub fn average_template_scores(rows: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Input("no template scores to average".into()))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Input("template score rows differ in length".into()));
    }
    let n = rows.len() as f64;
    Ok((0..first.len())
        .map(|c| (rows.iter().map(|r| f64::from(r[c])).sum::<f64>() / n) as f32)
        .collect())
}
