//! Prompt templates with `{name}` placeholders, bundled or loaded from disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read prompt template {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{template} template lacks the `{{{placeholder}}}` placeholder")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
}

/// Optional overrides for the bundled templates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptPaths {
    pub viewpoint: Option<PathBuf>,
    pub arbitration: Option<PathBuf>,
    pub coherence: Option<PathBuf>,
    /// One persona instruction per line.
    pub personas: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompts {
    pub viewpoint: String,
    pub arbitration: String,
    pub coherence: String,
    pub personas: Vec<String>,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            viewpoint: include_str!("../prompts/viewpoint.txt").to_string(),
            arbitration: include_str!("../prompts/arbitration.txt").to_string(),
            coherence: include_str!("../prompts/coherence.txt").to_string(),
            personas: persona_lines(include_str!("../prompts/personas.txt")),
        }
    }
}

fn persona_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

fn read(path: &Path) -> Result<String, PromptError> {
    std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Prompts {
    pub fn load(paths: &PromptPaths) -> Result<Self, PromptError> {
        let mut p = Self::default();
        if let Some(path) = &paths.viewpoint {
            p.viewpoint = read(path)?;
        }
        if let Some(path) = &paths.arbitration {
            p.arbitration = read(path)?;
        }
        if let Some(path) = &paths.coherence {
            p.coherence = read(path)?;
        }
        if let Some(path) = &paths.personas {
            p.personas = persona_lines(&read(path)?);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let required: [(&'static str, &str, &[&'static str]); 3] = [
            ("viewpoint", &self.viewpoint, &["question"]),
            ("arbitration", &self.arbitration, &["question", "viewpoints"]),
            ("coherence", &self.coherence, &["conclusion"]),
        ];
        for (template, text, names) in required {
            for &placeholder in names {
                if !text.contains(&format!("{{{placeholder}}}")) {
                    return Err(PromptError::MissingPlaceholder { template, placeholder });
                }
            }
        }
        Ok(())
    }
}

/// Substitutes each `{name}` in `template`; unknown placeholders are left as is.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
