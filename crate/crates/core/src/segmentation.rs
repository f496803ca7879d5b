//! Sentence segmentation, word-level vocabulary and tokenization.
//!
//! Prose is split with a fixed rule set so the result never depends on an
//! external sentence model. E2E meaning representations are split into their
//! `key[value]` groups, each of which becomes one synthesis unit.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Words after which a period never ends a sentence. Compared case-insensitively.
pub const ABBREVIATIONS: [&str; 8] = ["mr", "mrs", "dr", "st", "vs", "etc", "e.g", "i.e"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("malformed meaning representation: {0}")]
    MalformedMr(String),
    #[error("vocabulary corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {0} leaves no room beyond the reserved tokens")]
    VocabTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMode {
    Prose,
    E2eMr,
}

impl std::str::FromStr for SegmentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prose" => Ok(Self::Prose),
            "e2e_mr" | "e2e-mr" => Ok(Self::E2eMr),
            other => Err(format!("unknown segment mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceUnit {
    pub text: String,
    /// Byte offsets into the document's raw text.
    pub char_span: Range<usize>,
    /// Positions in the tokenized sequence; empty until [`tokenize`] runs.
    pub token_span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedDocument {
    pub raw_text: String,
    pub units: Vec<SentenceUnit>,
    pub mode: SegmentMode,
}

impl SegmentedDocument {
    /// Rebuilds the raw text from unit texts and the separators between them.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.raw_text.len());
        let mut cursor = 0;
        for u in &self.units {
            out.push_str(&self.raw_text[cursor..u.char_span.start]);
            out.push_str(&u.text);
            cursor = u.char_span.end;
        }
        out.push_str(&self.raw_text[cursor..]);
        out
    }
}

pub fn segment_text(text: &str, mode: SegmentMode) -> Result<SegmentedDocument, SegmentError> {
    if text.trim().is_empty() {
        return Err(SegmentError::EmptyInput);
    }
    let spans = match mode {
        SegmentMode::Prose => prose_spans(text),
        SegmentMode::E2eMr => mr_spans(text)?,
    };
    let units = spans
        .into_iter()
        .map(|span| SentenceUnit {
            text: text[span.clone()].to_string(),
            char_span: span,
            token_span: 0..0,
        })
        .collect();
    Ok(SegmentedDocument {
        raw_text: text.to_string(),
        units,
        mode,
    })
}

/// Trims whitespace off a byte range of `text`.
fn trimmed(text: &str, range: Range<usize>) -> Option<Range<usize>> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    let (start, end) = (range.start + lead, range.end - trail);
    (start < end).then_some(start..end)
}

fn prose_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut unit_start = 0;
    for (i, &(pos, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let Some(&(_, next)) = chars.get(i + 1) else { continue };
        if !next.is_whitespace() {
            continue;
        }
        let Some(&(_, first)) = chars[i + 1..].iter().find(|(_, c)| !c.is_whitespace()) else {
            continue;
        };
        if !(first.is_uppercase() || first.is_ascii_digit()) {
            continue;
        }
        if ch == '.' && ends_with_abbreviation(&text[unit_start..pos]) {
            continue;
        }
        let end = pos + ch.len_utf8();
        if let Some(span) = trimmed(text, unit_start..end) {
            spans.push(span);
        }
        unit_start = end;
    }
    if let Some(span) = trimmed(text, unit_start..text.len()) {
        spans.push(span);
    }
    spans
}

fn ends_with_abbreviation(before_period: &str) -> bool {
    let word = before_period
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("");
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.iter().any(|a| a.eq_ignore_ascii_case(word))
}

fn mr_spans(text: &str) -> Result<Vec<Range<usize>>, SegmentError> {
    let mut spans = Vec::new();
    let mut depth = 0i32;
    let mut group_start = 0;
    for (pos, ch) in text.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth < 0 {
                    return Err(SegmentError::MalformedMr(format!("unmatched ']' at byte {pos}")));
                }
            }
            ',' if depth == 0 => {
                let span = trimmed(text, group_start..pos)
                    .ok_or_else(|| SegmentError::MalformedMr(format!("empty group before byte {pos}")))?;
                spans.push(span);
                group_start = pos + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(SegmentError::MalformedMr("unclosed '['".into()));
    }
    let span = trimmed(text, group_start..text.len())
        .ok_or_else(|| SegmentError::MalformedMr("trailing empty group".into()))?;
    spans.push(span);
    Ok(spans)
}

/// Lowercased word pieces: maximal alphanumeric runs, and every other
/// non-whitespace character on its own.
pub fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.extend(std::iter::once(ch.to_lowercase().collect::<String>()));
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list (reserved tokens must come first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token '{t}'"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Encodes plain text as `<bos> pieces... <eos>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(word_pieces(text).iter().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Joins non-special tokens with single spaces, stopping at the first `<eos>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Frequency-ranked vocabulary; ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab, SegmentError> {
    if corpus.is_empty() {
        return Err(SegmentError::EmptyCorpus);
    }
    if max_size <= RESERVED.len() {
        return Err(SegmentError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in word_pieces(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w))
        .take(max_size)
        .collect();
    Ok(Vocab::from_tokens(tokens).expect("reserved prefix and unique tokens"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDocument {
    /// The segmented document with every unit's `token_span` filled.
    pub doc: SegmentedDocument,
    pub ids: Vec<u32>,
    /// Surface piece per position (`<bos>`/`<eos>` at the ends), before `<unk>` mapping.
    pub pieces: Vec<String>,
}

impl TokenizedDocument {
    /// Index of the unit owning token position `pos`, if any.
    pub fn unit_of(&self, pos: usize) -> Option<usize> {
        self.doc.units.iter().position(|u| u.token_span.contains(&pos))
    }
}

pub fn tokenize(doc: &SegmentedDocument, vocab: &Vocab) -> TokenizedDocument {
    let mut doc = doc.clone();
    let mut ids = vec![BOS];
    let mut pieces = vec![RESERVED[BOS as usize].to_string()];
    for unit in &mut doc.units {
        let start = ids.len();
        for w in word_pieces(&unit.text) {
            ids.push(vocab.id(&w));
            pieces.push(w);
        }
        unit.token_span = start..ids.len();
    }
    ids.push(EOS);
    pieces.push(RESERVED[EOS as usize].to_string());
    TokenizedDocument { doc, ids, pieces }
}
