//! Visuality gating and the token → image fusion assignment.

use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

use crate::segmentation::TokenizedDocument;

pub const DEFAULT_THETA: f64 = 0.27;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("expected {expected} image embeddings, got {actual}")]
    EmbeddingCountMismatch { expected: usize, actual: usize },
    #[error("theta {0} outside [0, 1]")]
    ThetaOutOfRange(f64),
    #[error("nouns_only scope needs a non-empty noun lexicon")]
    MissingLexicon,
    #[error("noun lexicon {0}: {1}")]
    Lexicon(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Doc,
    Sent,
    Word,
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "doc" => Ok(Self::Doc),
            "sent" => Ok(Self::Sent),
            "word" => Ok(Self::Word),
            other => Err(format!("unknown granularity '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionScope {
    AllTokens,
    NounsOnly,
}

impl std::str::FromStr for FusionScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_tokens" => Ok(Self::AllTokens),
            "nouns_only" => Ok(Self::NounsOnly),
            other => Err(format!("unknown fusion scope '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub theta: f64,
    pub granularity: Granularity,
    pub scope: FusionScope,
    pub noun_lexicon: Option<HashSet<String>>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            granularity: Granularity::Sent,
            scope: FusionScope::AllTokens,
            noun_lexicon: None,
        }
    }
}

impl GateConfig {
    pub fn with_theta(theta: f64) -> Self {
        Self {
            theta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(GateError::ThetaOutOfRange(self.theta));
        }
        if self.scope == FusionScope::NounsOnly && self.noun_lexicon.as_ref().is_none_or(HashSet::is_empty) {
            return Err(GateError::MissingLexicon);
        }
        Ok(())
    }
}

/// One lowercase word per line; blank lines ignored.
pub fn load_noun_lexicon(path: &Path) -> Result<HashSet<String>, GateError> {
    let err = |e: std::io::Error| GateError::Lexicon(path.display().to_string(), e.to_string());
    let file = std::fs::File::open(path).map_err(err)?;
    let mut out = HashSet::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(err)?;
        let w = line.trim();
        if !w.is_empty() {
            out.insert(w.to_lowercase());
        }
    }
    Ok(out)
}

/// Inclusive at the boundary: `gamma == theta` gates in.
#[inline]
pub fn gate(gamma: f64, theta: f64) -> bool {
    gamma >= theta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionEntry {
    Skip,
    Attend(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionAssignment {
    pub entries: Vec<FusionEntry>,
    pub image_count: usize,
}

impl FusionAssignment {
    pub fn all_skip(tokens: usize, image_count: usize) -> Self {
        Self {
            entries: vec![FusionEntry::Skip; tokens],
            image_count,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_all_skip(&self) -> bool {
        self.entries.iter().all(|e| *e == FusionEntry::Skip)
    }

    /// Image indices attended by at least one token, ascending.
    pub fn used_images(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                FusionEntry::Attend(k) => Some(*k),
                FusionEntry::Skip => None,
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Token positions attending each used image, in `used_images` order.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (pos, e) in self.entries.iter().enumerate() {
            if let FusionEntry::Attend(k) = e {
                groups.entry(*k).or_default().push(pos);
            }
        }
        groups.into_iter().collect()
    }

    /// Checks the structural invariants against the document it was built from.
    pub fn check(&self, doc: &TokenizedDocument, granularity: Granularity) -> Result<(), String> {
        if self.entries.len() != doc.ids.len() {
            return Err(format!("{} entries for {} tokens", self.entries.len(), doc.ids.len()));
        }
        let last = doc.ids.len() - 1;
        for (pos, e) in self.entries.iter().enumerate() {
            let FusionEntry::Attend(k) = *e else { continue };
            if k >= self.image_count {
                return Err(format!("token {pos} references image {k} of {}", self.image_count));
            }
            if pos == 0 || pos == last || doc.ids[pos] == crate::segmentation::PAD {
                return Err(format!("special token {pos} attends"));
            }
        }
        if granularity != Granularity::Word {
            for unit in &doc.doc.units {
                let attended: BTreeSet<usize> = unit
                    .token_span
                    .clone()
                    .filter_map(|p| match self.entries[p] {
                        FusionEntry::Attend(k) => Some(k),
                        FusionEntry::Skip => None,
                    })
                    .collect();
                if attended.len() > 1 {
                    return Err(format!("unit '{}' attends to {} images", unit.text, attended.len()));
                }
            }
        }
        Ok(())
    }
}

/// Texts sent to the augmenter for one document at the given granularity.
pub fn synthesis_texts(doc: &TokenizedDocument, granularity: Granularity) -> Vec<String> {
    match granularity {
        Granularity::Doc => vec![doc.doc.raw_text.clone()],
        Granularity::Sent => doc.doc.units.iter().map(|u| u.text.clone()).collect(),
        Granularity::Word => doc.pieces[1..doc.pieces.len() - 1].to_vec(),
    }
}

/// Maps every token to at most one image.
///
/// `gammas` lines up with [`synthesis_texts`]: one per document, per unit, or
/// per content token depending on granularity.
pub fn build_fusion_assignment(
    doc: &TokenizedDocument,
    gammas: &[f32],
    cfg: &GateConfig,
) -> Result<FusionAssignment, GateError> {
    let tokens = doc.ids.len();
    let content = tokens.saturating_sub(2);
    let expected = match cfg.granularity {
        Granularity::Doc => 1,
        Granularity::Sent => doc.doc.units.len(),
        Granularity::Word => content,
    };
    if gammas.len() != expected {
        return Err(GateError::EmbeddingCountMismatch {
            expected,
            actual: gammas.len(),
        });
    }
    let in_scope = |pos: usize| match cfg.scope {
        FusionScope::AllTokens => true,
        FusionScope::NounsOnly => cfg
            .noun_lexicon
            .as_ref()
            .is_some_and(|lex| lex.contains(&doc.pieces[pos])),
    };
    let mut entries = vec![FusionEntry::Skip; tokens];
    for pos in 1..tokens.saturating_sub(1) {
        if doc.ids[pos] == crate::segmentation::PAD {
            continue;
        }
        let image = match cfg.granularity {
            Granularity::Doc => Some(0),
            Granularity::Sent => doc.unit_of(pos),
            Granularity::Word => Some(pos - 1),
        };
        if let Some(k) = image {
            if gate(gammas[k] as f64, cfg.theta) && in_scope(pos) {
                entries[pos] = FusionEntry::Attend(k);
            }
        }
    }
    Ok(FusionAssignment {
        entries,
        image_count: expected,
    })
}

/// Fraction of scores at or above `theta`. Zero for an empty corpus.
pub fn gated_fraction<I>(gammas: I, theta: f64) -> f64
where
    I: IntoIterator<Item = f32>,
{
    let (mut gated, mut total) = (0usize, 0usize);
    for g in gammas {
        total += 1;
        if gate(g as f64, theta) {
            gated += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        gated as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{build_vocab, segment_text, tokenize, SegmentMode};
    use proptest::prelude::*;

    fn doc(text: &str) -> TokenizedDocument {
        let vocab = build_vocab(&[text], 64).unwrap();
        tokenize(&segment_text(text, SegmentMode::Prose).unwrap(), &vocab)
    }

    #[test]
    fn gate_boundary_is_inclusive() {
        assert!(gate(0.30, 0.27));
        assert!(gate(0.27, 0.27));
        assert!(!gate(-0.50, 0.27));
    }

    #[test]
    fn low_visuality_sentence_skips() {
        let d = doc("A rule applies. The red cat sleeps.");
        let a = build_fusion_assignment(&d, &[0.10, 0.80], &GateConfig::with_theta(0.27)).unwrap();
        for pos in d.doc.units[0].token_span.clone() {
            assert_eq!(a.entries[pos], FusionEntry::Skip);
        }
        for pos in d.doc.units[1].token_span.clone() {
            assert_eq!(a.entries[pos], FusionEntry::Attend(1));
        }
        assert_eq!(a.entries[0], FusionEntry::Skip);
        assert_eq!(*a.entries.last().unwrap(), FusionEntry::Skip);
        a.check(&d, Granularity::Sent).unwrap();
    }

    #[test]
    fn theta_one_skips_everything() {
        let d = doc("One. Two three.");
        let a = build_fusion_assignment(&d, &[0.99, 0.5], &GateConfig::with_theta(1.0)).unwrap();
        assert!(a.is_all_skip());
    }

    #[test]
    fn doc_granularity_single_image() {
        let d = doc("One. Two three.");
        let cfg = GateConfig {
            granularity: Granularity::Doc,
            ..GateConfig::default()
        };
        let a = build_fusion_assignment(&d, &[0.5], &cfg).unwrap();
        let n = d.ids.len();
        assert!(a.entries[1..n - 1].iter().all(|e| *e == FusionEntry::Attend(0)));
        assert_eq!(a.image_count, 1);
    }

    #[test]
    fn word_granularity_one_image_per_token() {
        let d = doc("Red cat. Dog.");
        let n = d.ids.len() - 2;
        let cfg = GateConfig {
            granularity: Granularity::Word,
            theta: 0.5,
            ..GateConfig::default()
        };
        let mut gammas = vec![0.9f32; n];
        gammas[1] = 0.1;
        let a = build_fusion_assignment(&d, &gammas, &cfg).unwrap();
        assert_eq!(a.entries[1], FusionEntry::Attend(0));
        assert_eq!(a.entries[2], FusionEntry::Skip);
        assert_eq!(a.entries[3], FusionEntry::Attend(2));
        a.check(&d, Granularity::Word).unwrap();
        assert_eq!(synthesis_texts(&d, Granularity::Word), vec!["red", "cat", ".", "dog", "."]);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let d = doc("One. Two.");
        assert_eq!(
            build_fusion_assignment(&d, &[0.5], &GateConfig::default()),
            Err(GateError::EmbeddingCountMismatch { expected: 2, actual: 1 })
        );
    }

    #[test]
    fn nouns_only_requires_lexicon() {
        let cfg = GateConfig {
            scope: FusionScope::NounsOnly,
            ..GateConfig::default()
        };
        assert_eq!(cfg.validate(), Err(GateError::MissingLexicon));
        assert_eq!(GateConfig::with_theta(1.2).validate(), Err(GateError::ThetaOutOfRange(1.2)));
    }

    #[test]
    fn gated_fraction_examples() {
        assert!((gated_fraction([0.1, 0.3, 0.5], 0.27) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(gated_fraction([0.0, 0.2, 0.9], 0.0), 1.0);
        // Median of an odd list is itself gated in.
        assert!(gated_fraction([0.1, 0.3, 0.5], 0.3) > 0.5);
        assert_eq!(gated_fraction(std::iter::empty(), 0.3), 0.0);
    }

    proptest! {
        #[test]
        fn assignments_are_exclusive_and_noun_scope_is_a_subset(
            n_units in 1usize..6,
            words in prop::collection::vec(prop::sample::select(vec!["cat", "dog", "runs", "red", "sky", "is"]), 30),
            gammas in prop::collection::vec(0.0f32..1.0, 6),
            theta in 0.0f64..1.0,
        ) {
            let mut text = String::new();
            for u in 0..n_units {
                let w = &words[u * 5..u * 5 + 1 + u % 4];
                text.push_str(&format!("{} {}. ", if u % 2 == 0 { "The" } else { "A" }, w.join(" ")));
            }
            let d = doc(&text);
            let g = &gammas[..d.doc.units.len()];
            let all = build_fusion_assignment(&d, g, &GateConfig::with_theta(theta)).unwrap();
            all.check(&d, Granularity::Sent).unwrap();

            let lex: HashSet<String> = ["cat", "dog", "sky"].iter().map(|s| s.to_string()).collect();
            let nouns = GateConfig { theta, scope: FusionScope::NounsOnly, noun_lexicon: Some(lex), ..GateConfig::default() };
            let sub = build_fusion_assignment(&d, g, &nouns).unwrap();
            sub.check(&d, Granularity::Sent).unwrap();
            for (a, b) in sub.entries.iter().zip(&all.entries) {
                if *a != FusionEntry::Skip {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn gated_fraction_non_increasing(gammas in prop::collection::vec(-1.0f32..1.0, 1..50), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(gated_fraction(gammas.iter().copied(), lo) >= gated_fraction(gammas.iter().copied(), hi));
        }
    }
}
