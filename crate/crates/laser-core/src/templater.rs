//! Prompt rendering and word-level tokenization.
//!
//! User histories and single items share one template: a fixed instruction
//! preamble followed by one numbered `>>` line per item. Tokenization is
//! word-level (alphanumeric runs plus single punctuation characters) against
//! a corpus-built vocabulary with reserved ids for PAD, UNK, the L prefix
//! slots, and the suffix slot.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ItemRecord;
use crate::error::{Error, Result};

/// Canonical instruction preamble (bit-exact).
pub const PREAMBLE: &str = "You are an intelligent recommendation assistant. Please summarize the user's characteristics into a single token based on the browsing history.\nIn chronological order, the user has browsed the following items:\n";

/// Preamble with the "into a single token" phrase removed (experimental).
pub const PREAMBLE_NO_PHRASE: &str = "You are an intelligent recommendation assistant. Please summarize the user's characteristics based on the browsing history.\nIn chronological order, the user has browsed the following items:\n";

/// Separate item-side instruction (experimental two-instruction variant).
pub const ITEM_PREAMBLE: &str = "You are an intelligent recommendation assistant. Please summarize the item characteristics into a single token:\n";

/// Hard-template variants. `Original` is the supported configuration; the
/// others exist to probe template sensitivity and are expected to do worse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateVariant {
    #[default]
    Original,
    NoSpecifiedPhrase,
    NoInstruction,
    TwoInstructions,
}

impl std::str::FromStr for TemplateVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "no-specified-phrase" => Ok(Self::NoSpecifiedPhrase),
            "no-instruction" => Ok(Self::NoInstruction),
            "two-instructions" => Ok(Self::TwoInstructions),
            other => Err(Error::Config(format!("unknown template variant '{other}'"))),
        }
    }
}

impl TemplateVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::NoSpecifiedPhrase => "no-specified-phrase",
            Self::NoInstruction => "no-instruction",
            Self::TwoInstructions => "two-instructions",
        }
    }

    fn user_preamble(&self) -> &'static str {
        match self {
            Self::Original | Self::TwoInstructions => PREAMBLE,
            Self::NoSpecifiedPhrase => PREAMBLE_NO_PHRASE,
            Self::NoInstruction => "",
        }
    }

    fn item_preamble(&self) -> &'static str {
        match self {
            Self::TwoInstructions => ITEM_PREAMBLE,
            _ => self.user_preamble(),
        }
    }
}

/// Rendered prompt text before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub text: String,
}

fn item_line(k: usize, item: &ItemRecord) -> String {
    let title = item.attribute("title").unwrap_or("unknown");
    let brand = item.attribute("brand").unwrap_or("unknown");
    let category = item.attribute("category").unwrap_or("unknown");
    format!(">> {k}. {title} (brand: {brand}, category: {category})")
}

fn render(preamble: &str, items: &[&ItemRecord]) -> PromptText {
    let mut text = String::from(preamble);
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&item_line(i + 1, item));
    }
    PromptText { text }
}

/// Render a user's chronological history with the unified template.
pub fn format_user_history(items: &[ItemRecord], variant: TemplateVariant) -> Result<PromptText> {
    if items.is_empty() {
        return Err(Error::Data(
            "cannot render a user with an empty history".to_string(),
        ));
    }
    let refs: Vec<&ItemRecord> = items.iter().collect();
    Ok(render(variant.user_preamble(), &refs))
}

/// Render a single item as a length-1 history with the same template.
pub fn format_item(item: &ItemRecord, variant: TemplateVariant) -> PromptText {
    render(variant.item_preamble(), &[item])
}

/// Word-level tokens: maximal alphanumeric runs, plus every other
/// non-whitespace character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token-to-id mapping with reserved ids appended after all corpus tokens:
/// PAD, UNK, the L prefix slots, and one suffix slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    prefix_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyJson {
    /// token -> id for corpus tokens (reserved ids are derived).
    tokens: std::collections::BTreeMap<String, usize>,
    prefix_len: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, prefix_len: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            prefix_len,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Total id space: corpus tokens + PAD + UNK + L prefix slots + suffix.
    pub fn size(&self) -> usize {
        self.tokens.len() + 2 + self.prefix_len + 1
    }

    pub fn pad_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn prefix_slot_id(&self, slot: usize) -> usize {
        assert!(slot < self.prefix_len);
        self.tokens.len() + 2 + slot
    }

    pub fn suffix_slot_id(&self) -> usize {
        self.tokens.len() + 2 + self.prefix_len
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> String {
        if id < self.tokens.len() {
            self.tokens[id].clone()
        } else if id == self.pad_id() {
            "<pad>".to_string()
        } else if id == self.unk_id() {
            "<unk>".to_string()
        } else if id == self.suffix_slot_id() {
            "<suffix>".to_string()
        } else {
            format!("<prefix-{}>", id - self.tokens.len() - 2)
        }
    }

    pub fn to_json(&self) -> String {
        let json = VocabularyJson {
            tokens: self
                .index
                .iter()
                .map(|(t, &i)| (t.clone(), i))
                .collect(),
            prefix_len: self.prefix_len,
        };
        serde_json::to_string_pretty(&json).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: VocabularyJson = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); json.tokens.len()];
        for (t, i) in json.tokens {
            if i >= tokens.len() {
                return Err(Error::Data(format!("vocabulary id {i} out of range")));
            }
            tokens[i] = t;
        }
        Ok(Self::from_tokens(tokens, json.prefix_len))
    }

    /// SHA-256 of the serialized vocabulary; used to detect mismatches
    /// between a checkpoint and the current corpus.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Build a vocabulary over every renderable prompt: each catalog item's
/// prompt, a maximal-length history (so all line numbers are covered), and
/// any extra template strings. Ids are assigned by first occurrence.
pub fn build_vocab(
    catalog: &[ItemRecord],
    extra_texts: &[String],
    prefix_len: usize,
    max_history: usize,
    variant: TemplateVariant,
) -> Result<Vocabulary> {
    if catalog.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty catalog".into()));
    }
    let mut tokens: Vec<String> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    let absorb = |text: &str, tokens: &mut Vec<String>, seen: &mut HashMap<String, ()>| {
        for tok in tokenize(text) {
            if !seen.contains_key(&tok) {
                seen.insert(tok.clone(), ());
                tokens.push(tok);
            }
        }
    };
    for item in catalog {
        absorb(&format_item(item, variant).text, &mut tokens, &mut seen);
    }
    // Cover the numbered lines of the longest renderable history.
    let dummy: Vec<ItemRecord> = std::iter::repeat(catalog[0].clone())
        .take(max_history.max(1))
        .collect();
    absorb(
        &format_user_history(&dummy, variant)?.text,
        &mut tokens,
        &mut seen,
    );
    absorb(variant.user_preamble(), &mut tokens, &mut seen);
    for text in extra_texts {
        absorb(text, &mut tokens, &mut seen);
    }
    Ok(Vocabulary::from_tokens(tokens, prefix_len))
}

/// Token ids with injection markers: prefix slots at 0..L-1, the suffix slot
/// at the final position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub prefix_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of text tokens W.
    pub fn text_len(&self) -> usize {
        self.ids.len() - self.prefix_len - 1
    }

    pub fn text_ids(&self) -> &[usize] {
        &self.ids[self.prefix_len..self.ids.len() - 1]
    }

    pub fn suffix_pos(&self) -> usize {
        self.ids.len() - 1
    }
}

fn is_item_line(line: &str) -> bool {
    line.starts_with(">> ")
}

/// Drop the `drop` earliest `>>` item lines from a prompt.
fn drop_oldest_lines(text: &str, drop: usize) -> String {
    let mut dropped = 0;
    let kept: Vec<&str> = text
        .lines()
        .filter(|line| {
            if is_item_line(line) && dropped < drop {
                dropped += 1;
                false
            } else {
                true
            }
        })
        .collect();
    kept.join("\n")
}

/// Tokenize a prompt into `[L prefix slots] ++ text ++ [suffix slot]`,
/// truncating the oldest whole item lines when the total would exceed
/// `max_len`. The most recent item line always survives.
pub fn encode(prompt: &PromptText, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let prefix_len = vocab.prefix_len();
    let item_lines = prompt.text.lines().filter(|l| is_item_line(l)).count();
    let mut drop = 0;
    loop {
        let text = if drop == 0 {
            prompt.text.clone()
        } else {
            drop_oldest_lines(&prompt.text, drop)
        };
        let words = tokenize(&text);
        let total = prefix_len + words.len() + 1;
        if total <= max_len {
            let mut ids = Vec::with_capacity(total);
            for slot in 0..prefix_len {
                ids.push(vocab.prefix_slot_id(slot));
            }
            for w in &words {
                ids.push(vocab.id_of(w).unwrap_or_else(|| vocab.unk_id()));
            }
            ids.push(vocab.suffix_slot_id());
            return Ok(TokenSequence { ids, prefix_len });
        }
        if item_lines == 0 || drop + 1 >= item_lines {
            return Err(Error::Config(format!(
                "prompt cannot fit the context cap of {max_len} tokens even \
                 with only the most recent item line{}",
                if item_lines == 0 {
                    " (the preamble alone exceeds the cap)"
                } else {
                    ""
                }
            )));
        }
        drop += 1;
    }
}

/// Map ids back to tokens, skipping reserved slots; joined with spaces.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.text_ids()
        .iter()
        .map(|&id| vocab.token_of(id))
        .collect::<Vec<_>>()
        .join(" ")
}
