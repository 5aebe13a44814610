//! String-matching annotation of party names and case-type phrases.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ner::bio::{EntityLabel, EntitySpan};

/// Phrases that signal one case type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordList {
    pub case_type: String,
    pub phrases: Vec<String>,
}

/// Parses `#TYPE <case type>` sections with one phrase per line. Rejects a
/// phrase listed under two case types.
pub fn parse_wordlists(text: &str) -> Result<Vec<WordList>> {
    let mut lists: Vec<WordList> = Vec::new();
    let mut owner: HashMap<String, String> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#TYPE") {
            let name = rest.trim();
            if name.is_empty() {
                return Err(Error::Data(format!("line {}: #TYPE needs a case type", n + 1)));
            }
            lists.push(WordList {
                case_type: name.to_string(),
                phrases: Vec::new(),
            });
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let list = lists
            .last_mut()
            .ok_or_else(|| Error::Data(format!("line {}: phrase before any #TYPE header", n + 1)))?;
        let key = normalize_phrase(line);
        match owner.get(&key) {
            Some(other) if *other != list.case_type => {
                return Err(Error::Annotation(format!(
                    "phrase {line:?} is listed under both {other} and {}",
                    list.case_type
                )))
            }
            _ => {
                owner.insert(key, list.case_type.clone());
            }
        }
        list.phrases.push(line.to_string());
    }
    Ok(lists)
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn normalize_phrase(p: &str) -> String {
    p.split_whitespace().map(normalize_word).collect::<Vec<_>>().join(" ")
}

/// Whitespace words of `text` with character offsets `[start, end)`.
pub fn words_with_offsets(text: &str) -> Vec<(usize, usize, String)> {
    crate::tokenizer::split_words(text)
}

/// Names of the parties from a case header.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parties {
    pub plaintiffs: Vec<String>,
    pub defendants: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    span: EntitySpan,
    exact: bool,
}

/// Annotates whitespace words of `text`; span indices are word positions.
///
/// Party names match case-insensitively and exactly (every occurrence).
/// Word-list phrases match word by word with at most `max_edit` character
/// edits per word. Overlaps are resolved exact matches first, then longest,
/// then leftmost, so raising `max_edit` only ever adds spans.
pub fn auto_annotate(text: &str, parties: &Parties, wordlists: &[WordList], max_edit: usize) -> Vec<EntitySpan> {
    let words: Vec<String> = words_with_offsets(text).into_iter().map(|w| normalize_word(&w.2)).collect();
    let mut cands = Vec::new();

    let mut find = |phrase: &str, label: EntityLabel, edits: usize| {
        let pw: Vec<String> = phrase.split_whitespace().map(normalize_word).filter(|w| !w.is_empty()).collect();
        if pw.is_empty() || pw.len() > words.len() {
            return;
        }
        for start in 0..=words.len() - pw.len() {
            let mut exact = true;
            let ok = pw.iter().zip(&words[start..]).all(|(p, w)| {
                if p == w {
                    return true;
                }
                exact = false;
                edits > 0 && !w.is_empty() && strsim::levenshtein(p, w) <= edits
            });
            if ok {
                cands.push(Candidate {
                    span: EntitySpan::new(label, start, start + pw.len()),
                    exact,
                });
            }
        }
    };
    for name in &parties.plaintiffs {
        find(name, EntityLabel::Plt, 0);
    }
    for name in &parties.defendants {
        find(name, EntityLabel::Def, 0);
    }
    for list in wordlists {
        for phrase in &list.phrases {
            find(phrase, EntityLabel::Type, max_edit);
        }
    }

    cands.sort_by(|a, b| {
        b.exact
            .cmp(&a.exact)
            .then(b.span.len().cmp(&a.span.len()))
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.label.cmp(&b.span.label))
    });
    let mut taken = vec![false; words.len()];
    let mut chosen = Vec::new();
    for c in cands {
        let s = c.span;
        if taken[s.start..s.end].iter().any(|&t| t) {
            continue;
        }
        taken[s.start..s.end].iter_mut().for_each(|t| *t = true);
        chosen.push(s);
    }
    chosen.sort_by_key(|s| (s.start, s.end));
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists() -> Vec<WordList> {
        parse_wordlists("#TYPE premises liability\nslip and fall\nwet floor\n#TYPE auto\nrear end collision\n").unwrap()
    }

    #[test]
    fn parse_and_disjointness() {
        let l = lists();
        assert_eq!(l.len(), 2);
        assert_eq!(l[0].phrases, vec!["slip and fall", "wet floor"]);
        assert!(matches!(
            parse_wordlists("#TYPE a\nwet floor\n#TYPE b\nWet Floor\n"),
            Err(Error::Annotation(_))
        ));
    }

    #[test]
    fn party_matching() {
        let p = Parties {
            plaintiffs: vec!["John Smith".into()],
            defendants: vec![],
        };
        let s = auto_annotate("Yesterday John Smith slipped .", &p, &[], 1);
        assert_eq!(s, vec![EntitySpan::new(EntityLabel::Plt, 1, 3)]);
        let s = auto_annotate("Nobody slipped here", &p, &[], 1);
        assert!(s.is_empty());
        // names never match fuzzily
        assert!(auto_annotate("Jon Smith slipped", &p, &[], 1).is_empty());
    }

    #[test]
    fn fuzzy_phrases() {
        let s = auto_annotate("a slipp and fall case", &Parties::default(), &lists(), 1);
        assert_eq!(s, vec![EntitySpan::new(EntityLabel::Type, 1, 4)]);
        assert!(auto_annotate("a slipp and fall case", &Parties::default(), &lists(), 0).is_empty());
    }

    #[test]
    fn exact_subset_of_fuzzy() {
        let text = "the slip and fall on a wet flor caused a rear end collision slip an fall";
        let p = Parties::default();
        let e0 = auto_annotate(text, &p, &lists(), 0);
        let e1 = auto_annotate(text, &p, &lists(), 1);
        assert!(e0.iter().all(|s| e1.contains(s)));
        assert!(e1.len() > e0.len());
    }
}
