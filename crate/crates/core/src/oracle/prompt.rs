use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Utterance;

/// Answer-format constraint every regulations text must carry.
pub const REGULATION_PHRASE: &str = "just answer yes or no";
const SLOT_A: &str = "{utterance_a}";
const SLOT_B: &str = "{utterance_b}";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("regulations must contain the phrase {REGULATION_PHRASE:?}")]
    MissingRegulation,
    #[error("pair slot format needs exactly one {SLOT_A} and one {SLOT_B} and no other placeholders")]
    BadPlaceholders,
    #[error("template file is missing the [{0}] section")]
    MissingSection(&'static str),
    #[error("unknown template section [{0}]")]
    UnknownSection(String),
    #[error("utterance {0} has empty text")]
    EmptyText(usize),
    #[error("prompt for pair ({a}, {b}) is {len} chars, limit is {max}")]
    TooLong { a: usize, b: usize, len: usize, max: usize },
}

/// Three-part prompt: task framing, answer-format regulations and the
/// sentence input slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub schema_text: String,
    pub regulations_text: String,
    pub pair_slot_format: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            schema_text: "Do the following two user utterances express the same intent?".into(),
            regulations_text: REGULATION_PHRASE.into(),
            pair_slot_format: format!("Utterance 1: {SLOT_A}\nUtterance 2: {SLOT_B}"),
        }
    }
}

fn count_placeholders(format: &str) -> usize {
    let mut count = 0;
    let mut rest = format;
    while let Some(start) = rest.find('{') {
        match rest[start..].find('}') {
            Some(end) => {
                count += 1;
                rest = &rest[start + end + 1..];
            }
            None => break,
        }
    }
    count
}

impl PromptTemplate {
    pub fn new(schema: impl Into<String>, regulations: impl Into<String>, slot: impl Into<String>) -> Result<Self, PromptError> {
        let template = Self {
            schema_text: schema.into(),
            regulations_text: regulations.into(),
            pair_slot_format: slot.into(),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if !self.regulations_text.contains(REGULATION_PHRASE) {
            return Err(PromptError::MissingRegulation);
        }
        let slot = &self.pair_slot_format;
        if slot.matches(SLOT_A).count() != 1 || slot.matches(SLOT_B).count() != 1 || count_placeholders(slot) != 2 {
            return Err(PromptError::BadPlaceholders);
        }
        Ok(())
    }

    /// Parse a plain-text template made of `[schema]`, `[regulations]` and
    /// `[input]` sections; section bodies are trimmed.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut schema = None;
        let mut regulations = None;
        let mut input = None;
        let mut current: Option<&mut Option<String>> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                current = Some(match &trimmed[1..trimmed.len() - 1] {
                    "schema" => &mut schema,
                    "regulations" => &mut regulations,
                    "input" => &mut input,
                    other => return Err(PromptError::UnknownSection(other.to_string())),
                });
                if let Some(slot) = current.as_deref_mut() {
                    *slot = Some(String::new());
                }
                continue;
            }
            if let Some(Some(body)) = current.as_deref_mut() {
                body.push_str(line);
                body.push('\n');
            }
        }
        let take = |section: Option<String>, name| {
            section.map(|s| s.trim().to_string()).ok_or(PromptError::MissingSection(name))
        };
        Self::new(take(schema, "schema")?, take(regulations, "regulations")?, take(input, "input")?)
    }

    pub fn render(&self) -> String {
        format!(
            "[schema]\n{}\n[regulations]\n{}\n[input]\n{}\n",
            self.schema_text, self.regulations_text, self.pair_slot_format
        )
    }

    /// Stable hex digest of all three parts.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [&self.schema_text, &self.regulations_text, &self.pair_slot_format] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Schema, regulations and the filled pair slot, newline separated.
pub fn build_prompt(
    template: &PromptTemplate,
    a: &Utterance,
    b: &Utterance,
    max_chars: usize,
) -> Result<String, PromptError> {
    for u in [a, b] {
        if u.text.trim().is_empty() {
            return Err(PromptError::EmptyText(u.id));
        }
    }
    let input = template.pair_slot_format.replace(SLOT_A, &a.text).replace(SLOT_B, &b.text);
    let prompt = format!("{}\n{}\n{}", template.schema_text, template.regulations_text, input);
    let len = prompt.chars().count();
    if len > max_chars {
        return Err(PromptError::TooLong { a: a.id, b: b.id, len, max: max_chars });
    }
    Ok(prompt)
}

/// 1 when the response contains the word "yes" (any case), else 0.
pub fn parse_response(raw: &str) -> u8 {
    let affirmed = raw
        .split(|c: char| !c.is_alphanumeric())
        .any(|token| token.eq_ignore_ascii_case("yes"));
    u8::from(affirmed)
}
