//! Deterministic local adapters. All of them are pure functions of the
//! request, so replays through them are reproducible.

use std::collections::{BTreeMap, HashMap};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, BackendReply, BackendRequest, Task};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("lexicon line {line}: {reason}")]
pub struct LexiconError {
    pub line: usize,
    pub reason: String,
}

/// Reads `key<TAB>value` lines as written, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, LexiconError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |reason: &str| LexiconError {
            line: i + 1,
            reason: reason.to_string(),
        };
        let (key, value) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
        if key.is_empty() {
            return Err(err("empty pattern"));
        }
        if value.trim().is_empty() || value.contains('\t') {
            return Err(err("label must be a single non-empty field"));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Ordered `pattern -> label` rules; the first pattern found in the text wins.
/// Matching is a case-insensitive substring test.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    rules: Vec<(String, String)>,
}

impl Lexicon {
    pub fn new<I, P, L>(rules: I) -> Self
    where
        I: IntoIterator<Item = (P, L)>,
        P: Into<String>,
        L: Into<String>,
    {
        Lexicon {
            rules: rules
                .into_iter()
                .map(|(p, l)| (p.into().to_lowercase(), l.into()))
                .collect(),
        }
    }

    /// Parses `pattern<TAB>label` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        Ok(Lexicon::new(parse_pairs(text)?))
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn first_match(&self, text: &str) -> Option<&str> {
        let text = text.to_lowercase();
        self.rules
            .iter()
            .find(|(p, _)| text.contains(p.as_str()))
            .map(|(_, l)| l.as_str())
    }
}

/// Speech payloads are already text in desk-scale mode; pass them through.
#[derive(Debug, Default)]
pub struct IdentityAsr;

#[async_trait]
impl Backend for IdentityAsr {
    fn name(&self) -> &str {
        "identity-asr"
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        Ok(BackendReply::text(request.current.clone()))
    }
}

/// Bidirectional phrase/word dictionary. Whole-sentence entries are tried
/// first, then word by word; unknown words pass through unchanged.
#[derive(Debug, Default)]
pub struct DictionaryMt {
    table: HashMap<String, String>,
}

impl DictionaryMt {
    pub fn new<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut table = HashMap::new();
        for (a, b) in pairs {
            let (a, b) = (a.into(), b.into());
            table.entry(b.to_lowercase()).or_insert_with(|| a.clone());
            table.insert(a.to_lowercase(), b);
        }
        DictionaryMt { table }
    }

    pub fn translate(&self, text: &str) -> String {
        let key = text.trim().to_lowercase();
        if let Some(hit) = self.table.get(&key) {
            return hit.clone();
        }
        text.split_whitespace()
            .map(|word| {
                let core = word.trim_end_matches(|c: char| c.is_ascii_punctuation());
                let tail = &word[core.len()..];
                match self.table.get(&core.to_lowercase()) {
                    Some(t) => format!("{t}{tail}"),
                    None => word.to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[async_trait]
impl Backend for DictionaryMt {
    fn name(&self) -> &str {
        "dictionary-mt"
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        Ok(BackendReply::text(self.translate(&request.current)))
    }
}

/// Which texts a lexicon classifier scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    Current,
    Window,
}

impl MatchScope {
    pub fn for_task(task: Task) -> Self {
        if task == Task::ImpactCls {
            MatchScope::Window
        } else {
            MatchScope::Current
        }
    }
}

fn default_label(task: Task) -> &'static str {
    match task {
        Task::CategoryCls => crate::model::OTHER_CATEGORY,
        Task::ViolationCls => super::VIOLATION_LABELS[0],
        Task::ImpactCls => super::IMPACT_LABELS[0],
        _ => "",
    }
}

fn scan<'a>(lexicon: &'a Lexicon, scope: MatchScope, request: &BackendRequest) -> Option<&'a str> {
    match scope {
        MatchScope::Current => lexicon.first_match(&request.current),
        MatchScope::Window => request.window().find_map(|t| lexicon.first_match(t)),
    }
}

/// Rule-based discrete classifier: replies with a label only.
#[derive(Debug)]
pub struct LexiconClassifier {
    lexicon: Lexicon,
    default_label: String,
    scope: MatchScope,
}

impl LexiconClassifier {
    pub fn new(task: Task, lexicon: Lexicon) -> Self {
        LexiconClassifier {
            lexicon,
            default_label: default_label(task).to_string(),
            scope: MatchScope::for_task(task),
        }
    }

    pub fn with_default(mut self, label: impl Into<String>) -> Self {
        self.default_label = label.into();
        self
    }
}

#[async_trait]
impl Backend for LexiconClassifier {
    fn name(&self) -> &str {
        "lexicon"
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let label = scan(&self.lexicon, self.scope, request).unwrap_or(&self.default_label);
        Ok(BackendReply::label(label))
    }
}

/// Lexicon classifier that answers with a probability vector: `confidence`
/// on the matched class and the remainder spread evenly over the others.
#[derive(Debug)]
pub struct ProbabilisticLexicon {
    lexicon: Lexicon,
    labels: Vec<String>,
    default_label: String,
    confidence: f64,
    scope: MatchScope,
}

impl ProbabilisticLexicon {
    pub fn new(
        task: Task,
        lexicon: Lexicon,
        labels: Vec<String>,
        confidence: f64,
    ) -> Result<Self, BackendError> {
        if labels.len() < 2 {
            return Err(BackendError::Config("need at least two labels".into()));
        }
        if !(confidence > 0.0 && confidence <= 1.0) {
            return Err(BackendError::Config(format!(
                "confidence {confidence} outside (0, 1]"
            )));
        }
        let p = ProbabilisticLexicon {
            lexicon,
            labels,
            default_label: default_label(task).to_string(),
            confidence,
            scope: MatchScope::for_task(task),
        };
        if p.index_of(&p.default_label).is_none() {
            return Err(BackendError::Config(format!(
                "default label {:?} is not one of {:?}",
                p.default_label, p.labels
            )));
        }
        Ok(p)
    }

    fn index_of(&self, label: &str) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(label))
            .or_else(|| {
                label
                    .parse::<usize>()
                    .ok()
                    .filter(|&i| i < self.labels.len())
            })
    }
}

#[async_trait]
impl Backend for ProbabilisticLexicon {
    fn name(&self) -> &str {
        "probabilistic-lexicon"
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let label = scan(&self.lexicon, self.scope, request).unwrap_or(&self.default_label);
        let hit = self.index_of(label).ok_or_else(|| {
            BackendError::invalid(self.name(), format!("unknown label {label:?}"))
        })?;
        let k = self.labels.len();
        let rest = (1.0 - self.confidence) / (k - 1) as f64;
        let probs = (0..k)
            .map(|i| if i == hit { self.confidence } else { rest })
            .collect();
        Ok(BackendReply::probs(probs))
    }
}

/// Per-language remediation template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
    /// `{category}` and `{remediation}` are substituted.
    pub justification: String,
}

pub fn default_templates() -> BTreeMap<String, Template> {
    let mut t = BTreeMap::new();
    t.insert(
        "en".to_string(),
        Template {
            prefix: "Could you please ".into(),
            suffix: "?".into(),
            justification:
                "A blunt request can breach the {category} norm and offend the listener; \
                            phrasing it as \"{remediation}\" keeps the meaning and stays polite."
                    .into(),
        },
    );
    t.insert(
        "zh".to_string(),
        Template {
            prefix: "请您".into(),
            suffix: "，好吗？".into(),
            justification: "直接的说法可能违反“{category}”规范并冒犯对方；改为“{remediation}”既保留原意又更礼貌。".into(),
        },
    );
    t
}

/// Template-driven remediation and justification generator.
#[derive(Debug)]
pub struct TemplateGenerator {
    templates: BTreeMap<String, Template>,
    /// Emit a single `Remediation: ... / Justification: ...` blob.
    combined: bool,
}

impl TemplateGenerator {
    pub fn new(templates: BTreeMap<String, Template>, combined: bool) -> Self {
        TemplateGenerator {
            templates,
            combined,
        }
    }

    fn template(&self, lang: Option<&str>) -> Option<&Template> {
        let lang = lang.unwrap_or("en");
        let base = lang.split(['-', '_']).next().unwrap_or(lang);
        self.templates
            .get(lang)
            .or_else(|| self.templates.get(base))
            .or_else(|| self.templates.get("en"))
            .or_else(|| self.templates.values().next())
    }

    pub fn soften(template: &Template, text: &str) -> String {
        let trimmed = text
            .trim()
            .trim_end_matches(['.', '!', '?', '。', '！', '？', '，', ',']);
        let mut clause = trimmed.to_string();
        if clause
            .get(..7)
            .is_some_and(|p| p.eq_ignore_ascii_case("please "))
        {
            clause = clause[7..].to_string();
        }
        if template.prefix.ends_with(' ') {
            let mut chars = clause.chars();
            if let Some(first) = chars.next() {
                // Keep "I" and acronyms as they are.
                let second = chars.clone().next();
                if first.is_ascii_uppercase()
                    && !second.is_some_and(|c| c.is_ascii_uppercase())
                    && first != 'I'
                {
                    clause = first.to_ascii_lowercase().to_string() + chars.as_str();
                }
            }
        }
        format!("{}{}{}", template.prefix, clause, template.suffix)
    }

    fn justify(template: &Template, category: Option<&str>, remediation: &str) -> String {
        template
            .justification
            .replace("{category}", category.unwrap_or("social"))
            .replace("{remediation}", remediation)
    }
}

impl Default for TemplateGenerator {
    fn default() -> Self {
        TemplateGenerator::new(default_templates(), false)
    }
}

#[async_trait]
impl Backend for TemplateGenerator {
    fn name(&self) -> &str {
        "template-generator"
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let template = self
            .template(request.target_lang.as_deref())
            .ok_or_else(|| BackendError::Config("no templates configured".into()))?;
        let category = request.category.as_deref();
        match request.task {
            Task::RemediationGen => {
                let remediation = Self::soften(template, &request.current);
                if self.combined {
                    let justification = Self::justify(template, category, &remediation);
                    Ok(BackendReply::text(format!(
                        "Remediation: {remediation}\nJustification: {justification}"
                    )))
                } else {
                    Ok(BackendReply::text(remediation))
                }
            }
            Task::JustificationGen => {
                let remediation = request.remediation.as_deref().unwrap_or(&request.current);
                Ok(BackendReply::text(Self::justify(
                    template,
                    category,
                    remediation,
                )))
            }
            other => Err(BackendError::Config(format!(
                "template generator cannot serve task {other}"
            ))),
        }
    }
}
