//! CoNLL-style word/tag files and their subword-level examples.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ner::bio::{bio_decode, EntitySpan, LabelSet, Tag};
use crate::tokenizer::{TokenSequence, Vocab};

/// One annotated document at word level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordExample {
    pub words: Vec<String>,
    pub tags: Vec<Tag>,
}

/// Parses `word<TAB>tag` lines; blank lines separate examples.
pub fn parse_conll(text: &str) -> Result<Vec<WordExample>> {
    let mut out = Vec::new();
    let mut cur = WordExample {
        words: Vec::new(),
        tags: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.words.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    WordExample {
                        words: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let (w, t) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {}: expected word<TAB>tag", n + 1)))?;
        let tag: Tag = t
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        cur.words.push(w.to_string());
        cur.tags.push(tag);
    }
    if !cur.words.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn write_conll(examples: &[WordExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        for (w, t) in ex.words.iter().zip(&ex.tags) {
            let _ = writeln!(s, "{w}\t{t}");
        }
        s.push('\n');
    }
    s
}

/// Subword-level training example. Continuation pieces of a `B-X` or `I-X`
/// word are tagged `I-X`.
#[derive(Clone, Debug, PartialEq)]
pub struct NerExample {
    pub tokens: TokenSequence,
    pub tags: Vec<Tag>,
    /// Index of the word each token came from.
    pub word_of: Vec<usize>,
    pub source_id: String,
}

impl NerExample {
    pub fn from_words(words: &[String], word_tags: &[Tag], vocab: &Vocab, source_id: &str) -> Result<Self> {
        if words.len() != word_tags.len() {
            return Err(Error::Shape(format!("{} words but {} tags", words.len(), word_tags.len())));
        }
        let mut ex = NerExample {
            tokens: TokenSequence::default(),
            tags: Vec::new(),
            word_of: Vec::new(),
            source_id: source_id.to_string(),
        };
        let mut offset = 0;
        for (wi, (w, &t)) in words.iter().zip(word_tags).enumerate() {
            let seq = vocab.encode(w, false);
            for (k, (id, off)) in seq.ids.iter().zip(&seq.offsets).enumerate() {
                ex.tokens.ids.push(*id);
                ex.tokens.offsets.push(off.map(|(a, b)| (a + offset, b + offset)));
                ex.tags.push(match (k, t) {
                    (0, t) => t,
                    (_, Tag::B(l) | Tag::I(l)) => Tag::I(l),
                    (_, Tag::O) => Tag::O,
                });
                ex.word_of.push(wi);
            }
            offset += w.chars().count() + 1;
        }
        Ok(ex)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn spans(&self) -> Vec<EntitySpan> {
        bio_decode(&self.tags).spans
    }

    /// Tag indices under `labels`; a tag outside the set is a configuration error.
    pub fn tag_indices(&self, labels: LabelSet) -> Result<Vec<usize>> {
        self.tags
            .iter()
            .map(|&t| {
                labels.tag_index(t).ok_or_else(|| {
                    Error::config("labels", format!("tag {t} of {} is not in the {labels} label set", self.source_id))
                })
            })
            .collect()
    }
}

/// Converts word examples into subword examples, ids `prefix0`, `prefix1`, ….
pub fn to_examples(words: &[WordExample], vocab: &Vocab, prefix: &str) -> Result<Vec<NerExample>> {
    words
        .iter()
        .enumerate()
        .map(|(i, w)| NerExample::from_words(&w.words, &w.tags, vocab, &format!("{prefix}{i}")))
        .collect()
}
