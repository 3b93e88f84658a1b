//! Rule-based prompt parsing: tokenization, noun/verb tagging and the
//! noun-verb pair set with per-pair negative token sets.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("../../resources/lexicon.txt");
const DETERMINERS: &[&str] = &["a", "an", "the", "one", "two"];
const COPULAS: &[&str] = &["is", "are"];
const CLAUSE_SEPARATOR: &str = "and";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tag {
    Noun,
    Verb,
    Other,
    /// Begin/end/padding positions added by the text encoder.
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub index: usize,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.iter().enumerate().any(|(k, t)| t.index != k) {
            return Err(Error::Input("token indices must be consecutive from 0".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(|t| t.text.as_str())
    }

    /// Words joined by single spaces; tokenizing this again reproduces the
    /// same words.
    pub fn to_prompt(&self) -> String {
        self.tokens
            .iter()
            .filter(|t| t.tag != Tag::Special)
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Index ranges of the clauses, split on the separator word.
    fn clauses(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in &self.tokens {
            if t.text == CLAUSE_SEPARATOR {
                out.push(start..t.index);
                start = t.index + 1;
            }
        }
        out.push(start..self.tokens.len());
        out
    }

    fn clause_text(&self, range: std::ops::Range<usize>) -> String {
        self.tokens[range]
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(prompt: &str) -> Result<TokenSequence> {
    if !prompt.is_ascii() {
        return Err(Error::Input("prompt must be ASCII".into()));
    }
    let words: Vec<String> = prompt
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .map(|c| c.to_ascii_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    Ok(TokenSequence {
        tokens: words
            .into_iter()
            .enumerate()
            .map(|(index, text)| Token {
                text,
                index,
                tag: Tag::Other,
            })
            .collect(),
    })
}

/// Word lists under `[subjects]` and `[actions]` headers, one word per line.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    subjects: HashSet<String>,
    actions: HashSet<String>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("built-in lexicon is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        let mut section: Option<bool> = None; // Some(true) = subjects
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[subjects]" => section = Some(true),
                "[actions]" => section = Some(false),
                word => {
                    let word = word.to_ascii_lowercase();
                    match section {
                        Some(true) => lex.subjects.insert(word),
                        Some(false) => lex.actions.insert(word),
                        None => return Err(Error::parse(n + 1, "word before any section header")),
                    };
                }
            }
        }
        Ok(lex)
    }

    pub fn is_subject(&self, word: &str) -> bool {
        self.subjects.contains(word)
    }

    pub fn is_action(&self, word: &str) -> bool {
        self.actions.contains(word)
    }
}

/// Assigns NOUN/VERB to one subject and one head verb per clause.
///
/// Resolution order per clause: the `<det> noun is verb` template, then the
/// lexicon, then the `is <word>ing` heuristic. Everything else becomes OTHER,
/// including the object of a verb phrase ("guitar" in "playing guitar").
pub fn tag_tokens(tokens: &TokenSequence, lexicon: &Lexicon) -> Result<TokenSequence> {
    let mut out = tokens.clone();
    for t in out.tokens.iter_mut().filter(|t| t.tag != Tag::Special) {
        t.tag = Tag::Other;
    }
    for clause in tokens.clauses() {
        let (noun, verb) = resolve_clause(tokens, clause.clone(), lexicon).ok_or_else(|| {
            Error::Extraction {
                clause: tokens.clause_text(clause.clone()),
            }
        })?;
        out.tokens[noun].tag = Tag::Noun;
        out.tokens[verb].tag = Tag::Verb;
    }
    Ok(out)
}

fn resolve_clause(tokens: &TokenSequence, clause: std::ops::Range<usize>, lexicon: &Lexicon) -> Option<(usize, usize)> {
    let words = &tokens.tokens[clause.clone()];
    let base = clause.start;
    let text = |k: usize| words[k].text.as_str();

    // template: det* noun copula verb ...
    if let Some(cop) = (1..words.len().saturating_sub(1)).find(|&k| COPULAS.contains(&text(k))) {
        if (0..cop - 1).all(|k| DETERMINERS.contains(&text(k))) {
            return Some((base + cop - 1, base + cop + 1));
        }
    }

    let noun = (0..words.len()).find(|&k| lexicon.is_subject(text(k)));
    if let Some(noun) = noun {
        let verb = (noun + 1..words.len()).find(|&k| lexicon.is_action(text(k))).or_else(|| {
            (noun + 1..words.len())
                .find(|&k| text(k).ends_with("ing") && k > 0 && COPULAS.contains(&text(k - 1)))
        });
        if let Some(verb) = verb {
            return Some((base + noun, base + verb));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub noun: usize,
    pub verb: usize,
}

/// Which words count as negatives for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Every non-special word outside the pair, including other pairs' words.
    #[default]
    AllOtherWords,
    /// As above, minus the members of other pairs.
    ExcludeOtherPairs,
}

impl FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_other_words" | "literal" => Ok(Self::AllOtherWords),
            "exclude_other_pairs" => Ok(Self::ExcludeOtherPairs),
            other => Err(Error::Input(format!("unknown negative mode {other:?}"))),
        }
    }
}

impl fmt::Display for NegativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllOtherWords => "all_other_words",
            Self::ExcludeOtherPairs => "exclude_other_pairs",
        })
    }
}

/// Noun-verb pairs in clause order, with the negative index set of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxPairs {
    pub pairs: Vec<Pair>,
    pub negatives: Vec<Vec<usize>>,
}

impl SyntaxPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Pair, &[usize])> {
        self.pairs.iter().zip(self.negatives.iter().map(Vec::as_slice))
    }

    pub fn max_index(&self) -> Option<usize> {
        self.pairs
            .iter()
            .flat_map(|p| [p.noun, p.verb])
            .chain(self.negatives.iter().flatten().copied())
            .max()
    }
}

/// One pair per clause from a tagged sequence.
pub fn extract_pairs(tokens: &TokenSequence, mode: NegativeMode) -> Result<SyntaxPairs> {
    let mut pairs = Vec::new();
    for clause in tokens.clauses() {
        let words = &tokens.tokens[clause.clone()];
        let noun = words.iter().find(|t| t.tag == Tag::Noun);
        let verb = noun.and_then(|n| words.iter().find(|t| t.tag == Tag::Verb && t.index > n.index));
        match (noun, verb) {
            (Some(n), Some(v)) => pairs.push(Pair {
                noun: n.index,
                verb: v.index,
            }),
            _ => {
                return Err(Error::Extraction {
                    clause: tokens.clause_text(clause),
                })
            }
        }
    }
    let members: HashSet<usize> = pairs.iter().flat_map(|p| [p.noun, p.verb]).collect();
    let negatives = pairs
        .iter()
        .map(|p| {
            tokens
                .tokens
                .iter()
                .filter(|t| t.tag != Tag::Special && t.index != p.noun && t.index != p.verb)
                .filter(|t| mode == NegativeMode::AllOtherWords || !members.contains(&t.index))
                .map(|t| t.index)
                .collect()
        })
        .collect();
    Ok(SyntaxPairs { pairs, negatives })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrompt {
    pub tokens: TokenSequence,
    pub pairs: SyntaxPairs,
}

pub fn parse_prompt(prompt: &str, lexicon: &Lexicon, mode: NegativeMode) -> Result<ParsedPrompt> {
    let tokens = tag_tokens(&tokenize(prompt)?, lexicon)?;
    let pairs = extract_pairs(&tokens, mode)?;
    Ok(ParsedPrompt { tokens, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(p: &str) -> ParsedPrompt {
        parse_prompt(p, &Lexicon::builtin(), NegativeMode::default()).unwrap()
    }

    fn words(seq: &TokenSequence) -> Vec<&str> {
        seq.tokens().iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("a man is walking").unwrap();
        assert_eq!(words(&t), ["a", "man", "is", "walking"]);
        assert_eq!(t.tokens().iter().map(|t| t.index).collect::<Vec<_>>(), [0, 1, 2, 3]);

        assert_eq!(tokenize("A man is walking and a dog is running").unwrap().len(), 9);
        let t = tokenize("a boy is walking and a dog is sitting").unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t.word(1), Some("boy"));
    }

    #[test]
    fn tokenize_strips_punctuation_and_rejects_empty() {
        let t = tokenize("A dog, running!").unwrap();
        assert_eq!(words(&t), ["a", "dog", "running"]);
        assert!(matches!(tokenize("   \t "), Err(Error::Input(_))));
        assert!(tokenize("...").is_err());
    }

    #[test]
    fn two_clause_template() {
        let p = parse("a man is walking and a dog is running");
        assert_eq!(
            p.pairs.pairs,
            [Pair { noun: 1, verb: 3 }, Pair { noun: 6, verb: 8 }]
        );
        assert_eq!(p.pairs.negatives[0], [0, 2, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn single_clause_negatives() {
        let p = parse("a cat is sitting");
        assert_eq!(p.pairs.pairs, [Pair { noun: 1, verb: 3 }]);
        assert_eq!(p.pairs.negatives[0], [0, 2]);
    }

    #[test]
    fn compound_verb_object_is_a_negative() {
        let p = parse("a woman is jumping and a boy is playing guitar");
        assert_eq!(p.pairs.len(), 2);
        let guitar = p.tokens.tokens().iter().position(|t| t.text == "guitar").unwrap();
        assert_eq!(p.tokens.tokens()[guitar].tag, Tag::Other);
        for negs in &p.pairs.negatives {
            assert!(negs.contains(&guitar));
        }
    }

    #[test]
    fn lexicon_and_heuristic_fallbacks() {
        // no copula directly after the noun: lexicon route
        let p = parse("a small dog running");
        assert_eq!(p.pairs.pairs, [Pair { noun: 2, verb: 3 }]);
        // unknown verb: -ing after "is"
        let p = parse("the big robot is juggling");
        assert_eq!(p.pairs.pairs, [Pair { noun: 2, verb: 4 }]);
    }

    #[test]
    fn unresolvable_clause_is_reported() {
        let err = parse_prompt("a man is walking and blue sky", &Lexicon::builtin(), NegativeMode::default())
            .unwrap_err();
        match err {
            Error::Extraction { clause } => assert_eq!(clause, "blue sky"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn exclusive_negatives_drop_other_pairs() {
        let p = parse_prompt(
            "a man is walking and a dog is running",
            &Lexicon::builtin(),
            NegativeMode::ExcludeOtherPairs,
        )
        .unwrap();
        assert_eq!(p.pairs.negatives[0], [0, 2, 4, 5, 7]);
    }

    #[test]
    fn lexicon_parse_requires_header() {
        assert!(Lexicon::parse("dog\n").is_err());
        let lex = Lexicon::parse("[subjects]\nYak\n[actions]\ngrazing\n").unwrap();
        assert!(lex.is_subject("yak") && lex.is_action("grazing"));
    }

    const SUBJECTS: &[&str] = &["man", "woman", "dog", "cat", "boy", "girl", "robot", "horse", "car", "kite"];
    const ACTIONS: &[&str] = &["walking", "running", "jumping", "sitting", "flying", "swimming", "dancing"];

    fn template_prompt() -> impl Strategy<Value = (String, usize)> {
        prop::collection::vec((0..SUBJECTS.len(), 0..ACTIONS.len(), any::<bool>()), 1..5).prop_map(|clauses| {
            let parts: Vec<String> = clauses
                .iter()
                .map(|&(s, a, an)| format!("{} {} is {}", if an { "an" } else { "a" }, SUBJECTS[s], ACTIONS[a]))
                .collect();
            (parts.join(" and "), clauses.len())
        })
    }

    proptest! {
        #[test]
        fn k_clauses_give_k_pairs_and_a_partition((prompt, k) in template_prompt()) {
            let p = parse(&prompt);
            prop_assert_eq!(p.pairs.len(), k);
            let mut seen = HashSet::new();
            for (pair, negs) in p.pairs.iter() {
                prop_assert_ne!(pair.noun, pair.verb);
                prop_assert!(seen.insert(pair.noun) && seen.insert(pair.verb));
                let mut all: Vec<usize> = negs.to_vec();
                prop_assert!(!all.contains(&pair.noun) && !all.contains(&pair.verb));
                all.push(pair.noun);
                all.push(pair.verb);
                all.sort_unstable();
                prop_assert_eq!(all, (0..p.tokens.len()).collect::<Vec<_>>());
            }
        }

        #[test]
        fn reparsing_the_serialized_prompt_is_idempotent((prompt, _k) in template_prompt()) {
            let first = parse(&prompt);
            let second = parse(&first.tokens.to_prompt());
            prop_assert_eq!(first, second);
        }
    }
}
