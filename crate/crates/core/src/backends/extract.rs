//! Extraction of remediation and justification from a combined generator
//! reply such as
//!
//! ```text
//! Remediation: Could you please send it today?
//! Justification: A direct command can sound rude to the listener.
//! ```
//!
//! Labels are matched case-insensitively at the start of a line, in any
//! order, followed by `:` or a full-width `：`. A body runs until the next
//! label or the end of the text and may span several lines.

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("generation output is empty")]
    Empty,
    #[error("no {0} section found")]
    MissingSection(&'static str),
    #[error("{0} section is empty")]
    EmptySection(&'static str),
    #[error("invalid label alias: {0}")]
    BadAlias(String),
}

/// Accepted label spellings for each section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationLabels {
    pub remediation: Vec<String>,
    pub justification: Vec<String>,
}

impl Default for GenerationLabels {
    fn default() -> Self {
        GenerationLabels {
            remediation: vec!["remediation".into()],
            justification: vec!["justification".into()],
        }
    }
}

impl GenerationLabels {
    fn pattern(&self) -> Result<Regex, ParseError> {
        let alt = |aliases: &[String]| -> Result<String, ParseError> {
            if aliases.is_empty() || aliases.iter().any(|a| a.trim().is_empty()) {
                return Err(ParseError::BadAlias(format!("{aliases:?}")));
            }
            Ok(aliases
                .iter()
                .map(|a| regex::escape(a.trim()))
                .collect::<Vec<_>>()
                .join("|"))
        };
        let src = format!(
            r"^[ \t]*(?:(?P<rem>{})|(?P<just>{}))[ \t]*[:：]",
            alt(&self.remediation)?,
            alt(&self.justification)?
        );
        RegexBuilder::new(&src)
            .case_insensitive(true)
            .multi_line(true)
            .build()
            .map_err(|e| ParseError::BadAlias(e.to_string()))
    }

    /// True if `raw` contains at least one section label.
    pub fn is_labeled(&self, raw: &str) -> bool {
        self.pattern().map(|re| re.is_match(raw)).unwrap_or(false)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Remediation,
    Justification,
}

/// Splits a combined generation into `(remediation, justification)` using
/// the default labels.
pub fn parse_generation(raw: &str) -> Result<(String, String), ParseError> {
    parse_generation_with(raw, &GenerationLabels::default())
}

pub fn parse_generation_with(
    raw: &str,
    labels: &GenerationLabels,
) -> Result<(String, String), ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let re = labels.pattern()?;
    let marks: Vec<(Section, usize, usize)> = re
        .captures_iter(raw)
        .map(|c| {
            let whole = c.get(0).expect("match");
            let section = if c.name("rem").is_some() {
                Section::Remediation
            } else {
                Section::Justification
            };
            (section, whole.start(), whole.end())
        })
        .collect();

    let body = |want: Section| -> Option<&str> {
        let idx = marks.iter().position(|m| m.0 == want)?;
        let start = marks[idx].2;
        let end = marks.get(idx + 1).map_or(raw.len(), |m| m.1);
        Some(raw[start..end].trim())
    };

    let remediation =
        body(Section::Remediation).ok_or(ParseError::MissingSection("remediation"))?;
    let justification =
        body(Section::Justification).ok_or(ParseError::MissingSection("justification"))?;
    if remediation.is_empty() {
        return Err(ParseError::EmptySection("remediation"));
    }
    if justification.is_empty() {
        return Err(ParseError::EmptySection("justification"));
    }
    Ok((remediation.to_string(), justification.to_string()))
}
