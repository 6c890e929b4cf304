//! Templated instructions, delimiter segmentation and the noun-phrase filter
//! that decides which sub-instructions get an imagination.

mod lexicon;
mod templates;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use lexicon::{FilterLexicon, DEFAULT_LEXICON};
pub use templates::{classify_turn, TemplateSet, Turn, Vocab, DEFAULT_TEMPLATES, LANDMARK_SLOT, UNK, UNK_ID};

use crate::error::{Error, Result};
use crate::rng;
use crate::world::{Episode, LandmarkLibrary, Mode, World};

pub const MAX_TOKENS: usize = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub id: usize,
    pub episode: usize,
    pub tokens: Vec<String>,
    pub gold_segments: Vec<(usize, usize)>,
    /// Landmark class referenced by each gold segment's template, if any.
    pub gold_classes: Vec<Option<usize>>,
    pub mode: Mode,
}

impl Instruction {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Kept,
    NoNoun,
    Blacklisted,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Kept => "kept",
            Verdict::NoNoun => "no_noun",
            Verdict::Blacklisted => "blacklisted",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kept" => Ok(Verdict::Kept),
            "no_noun" => Ok(Verdict::NoNoun),
            "blacklisted" => Ok(Verdict::Blacklisted),
            _ => Err(Error::Format(format!("unknown verdict {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubInstruction {
    pub index: usize,
    /// Half-open token span within the instruction.
    pub span: (usize, usize),
    pub tokens: Vec<String>,
    /// Noun phrases as half-open spans within the instruction.
    pub noun_phrases: Vec<(usize, usize)>,
    pub landmark_class: Option<usize>,
    pub verdict: Verdict,
}

impl SubInstruction {
    pub fn phrase_texts(&self) -> Vec<String> {
        self.noun_phrases
            .iter()
            .map(|&(a, b)| self.tokens[a - self.span.0..b - self.span.0].join(" "))
            .collect()
    }

    /// Token positions (within the instruction) of non-blacklisted noun
    /// phrases; the tokens whose encodings are averaged into the phrase
    /// embedding.
    pub fn noun_token_positions(&self, lexicon: &FilterLexicon) -> Vec<usize> {
        self.noun_phrases
            .iter()
            .filter(|&&(a, b)| !lexicon.is_blacklisted(&self.tokens[a - self.span.0..b - self.span.0]))
            .flat_map(|&(a, b)| a..b)
            .collect()
    }
}

/// Splits after every delimiter token. Trailing tokens without a delimiter
/// form a final segment.
pub fn segment(tokens: &[String], templates: &TemplateSet) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if templates.is_delimiter(t) {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push((start, tokens.len()));
    }
    spans
}

pub fn extract_noun_phrases(tokens: &[String], lexicon: &FilterLexicon) -> Vec<String> {
    lexicon.noun_phrase_spans(tokens).into_iter().map(|(a, b)| tokens[a..b].join(" ")).collect()
}

fn judge(tokens: &[String], spans: &[(usize, usize)], lexicon: &FilterLexicon) -> Verdict {
    if spans.is_empty() {
        Verdict::NoNoun
    } else if spans.iter().all(|&(a, b)| lexicon.is_blacklisted(&tokens[a..b])) {
        Verdict::Blacklisted
    } else {
        Verdict::Kept
    }
}

/// Builds a sub-instruction for one span: noun phrases and verdict.
pub fn analyze_span(tokens: &[String], span: (usize, usize), index: usize, lexicon: &FilterLexicon) -> SubInstruction {
    let local = tokens[span.0..span.1].to_vec();
    let rel = lexicon.noun_phrase_spans(&local);
    let verdict = judge(&local, &rel, lexicon);
    SubInstruction {
        index,
        span,
        noun_phrases: rel.into_iter().map(|(a, b)| (a + span.0, b + span.0)).collect(),
        tokens: local,
        landmark_class: None,
        verdict,
    }
}

/// Segments an instruction and tags every segment. Gold landmark classes are
/// attached to segments whose span matches a gold span.
pub fn sub_instructions(instr: &Instruction, templates: &TemplateSet, lexicon: &FilterLexicon) -> Vec<SubInstruction> {
    segment(&instr.tokens, templates)
        .into_iter()
        .enumerate()
        .map(|(i, span)| {
            let mut sub = analyze_span(&instr.tokens, span, i, lexicon);
            sub.landmark_class = instr
                .gold_segments
                .iter()
                .position(|&g| g == span)
                .and_then(|g| instr.gold_classes[g]);
            sub
        })
        .collect()
}

/// Re-tags each segment with `lexicon` and keeps those with a noun phrase
/// not rooted on a blacklisted word, in order.
pub fn filter_sub_instructions(subs: &[SubInstruction], lexicon: &FilterLexicon) -> Vec<SubInstruction> {
    subs.iter()
        .filter_map(|s| {
            let mut t = analyze_span_local(s, lexicon);
            t.landmark_class = s.landmark_class;
            (t.verdict == Verdict::Kept).then_some(t)
        })
        .collect()
}

fn analyze_span_local(s: &SubInstruction, lexicon: &FilterLexicon) -> SubInstruction {
    let rel = lexicon.noun_phrase_spans(&s.tokens);
    SubInstruction {
        index: s.index,
        span: s.span,
        tokens: s.tokens.clone(),
        verdict: judge(&s.tokens, &rel, lexicon),
        noun_phrases: rel.into_iter().map(|(a, b)| (a + s.span.0, b + s.span.0)).collect(),
        landmark_class: s.landmark_class,
    }
}

/// Renders instructions for episodes from templates.
#[derive(Clone, Debug)]
pub struct InstructionGenerator<'a> {
    pub templates: &'a TemplateSet,
    pub vocab: &'a Vocab,
    pub library: &'a LandmarkLibrary,
    /// Probability that a step whose view shows a landmark is described by
    /// that landmark rather than by its turn direction.
    pub p_landmark: f64,
}

impl InstructionGenerator<'_> {
    pub fn generate(&self, episode: &Episode, world: &World, id: usize, seed: u64) -> Result<Instruction> {
        let mut r = rng::stream(seed, "instruction", id as u64);
        let t = self.templates;
        let mut tokens = Vec::new();
        let mut gold_segments = Vec::new();
        let mut gold_classes = Vec::new();
        let mut push = |seg: Vec<String>, class: Option<usize>, delim: &str| {
            let start = tokens.len();
            tokens.extend(seg);
            tokens.push(delim.to_string());
            gold_segments.push((start, tokens.len()));
            gold_classes.push(class);
        };
        match episode.mode {
            Mode::Coarse => {
                let target = episode
                    .target
                    .ok_or_else(|| Error::Contract(format!("coarse episode {} has no target", episode.id)))?;
                let phrase = &self.library.class(target)?.phrase;
                push(templates::render(templates::pick(&t.coarse, &mut r), Some(phrase)), Some(target), &t.delimiters[0]);
            }
            Mode::Fine => {
                let classes = world.step_classes(&episode.path);
                let steps = episode.path.len() - 1;
                for s in 0..steps {
                    let delim = if s + 1 == steps { &t.delimiters[0] } else { &t.delimiters[r.random_range(0..t.delimiters.len())] };
                    let use_landmark = classes[s].is_some() && r.random::<f64>() < self.p_landmark;
                    if use_landmark {
                        let c = classes[s].expect("checked");
                        let phrase = &self.library.class(c)?.phrase;
                        push(templates::render(templates::pick(&t.landmark, &mut r), Some(phrase)), Some(c), delim);
                    } else {
                        let turn = step_turn(world, &episode.path, s);
                        let list = match turn {
                            Turn::Straight => &t.straight,
                            Turn::Left => &t.left,
                            Turn::Right => &t.right,
                        };
                        push(templates::render(templates::pick(list, &mut r), None), None, delim);
                    }
                }
            }
        }
        for tok in &tokens {
            if self.vocab.id(tok).is_none() {
                return Err(Error::Vocabulary(format!("token {tok:?} is not in the vocabulary")));
            }
        }
        if tokens.len() > MAX_TOKENS {
            return Err(Error::Contract(format!("instruction has {} tokens, limit {MAX_TOKENS}", tokens.len())));
        }
        Ok(Instruction { id, episode: episode.id, tokens, gold_segments, gold_classes, mode: episode.mode })
    }
}

/// Turn taken at step `s` of `path`, relative to the heading of arrival.
/// The first step has no heading and counts as straight.
pub fn step_turn(world: &World, path: &[usize], s: usize) -> Turn {
    if s == 0 {
        return Turn::Straight;
    }
    let heading = |a: usize, b: usize| {
        let (p, q) = (world.positions[a], world.positions[b]);
        (q[1] - p[1]).atan2(q[0] - p[0])
    };
    classify_turn(heading(path[s - 1], path[s]), heading(path[s], path[s + 1]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub instructions: usize,
    pub avg_segments: f64,
    pub avg_kept: f64,
    pub vocab_size: usize,
}

pub fn corpus_stats(instructions: &[Instruction], templates: &TemplateSet, lexicon: &FilterLexicon) -> Result<CorpusStats> {
    if instructions.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    let mut segs = 0usize;
    let mut kept = 0usize;
    let mut words = HashSet::new();
    for ins in instructions {
        let subs = sub_instructions(ins, templates, lexicon);
        segs += subs.len();
        kept += subs.iter().filter(|s| s.verdict == Verdict::Kept).count();
        words.extend(ins.tokens.iter().map(String::as_str));
    }
    let n = instructions.len() as f64;
    Ok(CorpusStats { instructions: instructions.len(), avg_segments: segs as f64 / n, avg_kept: kept as f64 / n, vocab_size: words.len() })
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}
