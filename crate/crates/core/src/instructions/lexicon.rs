use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::sections;
use crate::world::LandmarkLibrary;

pub const DEFAULT_LEXICON: &str = include_str!("../../data/lexicon.txt");

/// Word lists driving the noun-phrase tagger and the blacklist filter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterLexicon {
    /// Nominal entries; multiword entries are stored space-joined.
    pub nouns: HashSet<String>,
    /// Words that are nominal only right after a licensor.
    pub contextual: HashSet<String>,
    pub licensors: HashSet<String>,
    pub blacklist: HashSet<String>,
    /// Longest multiword entry, in tokens.
    max_len: usize,
    landmark_words: HashSet<String>,
}

impl FilterLexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let secs = sections::parse(text)?;
        let collect = |name: &str| sections::lines(&secs, name).map(|l| l.to_lowercase()).collect::<HashSet<_>>();
        let mut lex = Self {
            nouns: HashSet::new(),
            contextual: collect("contextual"),
            licensors: collect("licensors"),
            blacklist: collect("blacklist"),
            max_len: 1,
            landmark_words: HashSet::new(),
        };
        for n in collect("nouns") {
            lex.add_noun(&n);
        }
        Ok(lex)
    }

    pub fn default_with(library: &LandmarkLibrary) -> Result<Self> {
        let mut lex = Self::parse(DEFAULT_LEXICON)?;
        lex.add_landmarks(library)?;
        Ok(lex)
    }

    fn add_noun(&mut self, phrase: &str) {
        let norm = phrase.split_whitespace().collect::<Vec<_>>().join(" ");
        self.max_len = self.max_len.max(norm.split(' ').count());
        self.nouns.insert(norm);
    }

    /// Adds every landmark phrase as a noun entry. Fails if a landmark word
    /// is blacklisted.
    pub fn add_landmarks(&mut self, library: &LandmarkLibrary) -> Result<()> {
        for c in &library.classes {
            for w in &c.phrase {
                if self.blacklist.contains(w) {
                    return Err(Error::Config(format!("landmark word {w:?} is blacklisted")));
                }
                self.landmark_words.insert(w.clone());
            }
            self.add_noun(&c.phrase_text());
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty() && self.blacklist.is_empty()
    }

    /// Number of tokens of the nominal unit starting at `i`, if any.
    fn nominal_at(&self, tokens: &[String], i: usize) -> Option<usize> {
        for len in (2..=self.max_len.min(tokens.len() - i)).rev() {
            if self.nouns.contains(&tokens[i..i + len].join(" ")) {
                return Some(len);
            }
        }
        let w = tokens[i].as_str();
        if self.contextual.contains(w) {
            let licensed = i > 0 && self.licensors.contains(tokens[i - 1].as_str());
            return licensed.then_some(1);
        }
        (self.nouns.contains(w) || self.blacklist.contains(w)).then_some(1)
    }

    /// Maximal runs of nominal units in `tokens`, as half-open token spans.
    pub fn noun_phrase_spans(&self, tokens: &[String]) -> Vec<(usize, usize)> {
        let mut spans: Vec<(usize, usize)> = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.nominal_at(tokens, i) {
                Some(len) => {
                    match spans.last_mut() {
                        Some(last) if last.1 == i => last.1 = i + len,
                        _ => spans.push((i, i + len)),
                    }
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }

    /// A phrase is rooted on its last word.
    pub fn is_blacklisted(&self, phrase: &[String]) -> bool {
        phrase.last().is_some_and(|h| self.blacklist.contains(h))
    }

    pub fn is_landmark_word(&self, w: &str) -> bool {
        self.landmark_words.contains(w)
    }
}
