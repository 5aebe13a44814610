//! Entity labels, BIO tags and span <-> tag conversion.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityLabel {
    /// Case type, e.g. "slip and fall".
    Type,
    /// Plaintiff.
    Plt,
    /// Defendant.
    Def,
    /// Medical problem.
    Prob,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 4] = [EntityLabel::Type, EntityLabel::Plt, EntityLabel::Def, EntityLabel::Prob];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Type => "TYPE",
            EntityLabel::Plt => "PLT",
            EntityLabel::Def => "DEF",
            EntityLabel::Prob => "PROB",
        }
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Annotation(format!("unknown entity label {s:?}")))
    }
}

/// Half-open token span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub label: EntityLabel,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(label: EntityLabel, start: usize, end: usize) -> Self {
        EntitySpan { label, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(EntityLabel),
    I(EntityLabel),
}

impl Tag {
    pub fn label(self) -> Option<EntityLabel> {
        match self {
            Tag::O => None,
            Tag::B(l) | Tag::I(l) => Some(l),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(l) => write!(f, "B-{l}"),
            Tag::I(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::O);
        }
        match s.split_once('-') {
            Some(("B", l)) => Ok(Tag::B(l.parse()?)),
            Some(("I", l)) => Ok(Tag::I(l.parse()?)),
            _ => Err(Error::Annotation(format!("malformed tag {s:?}"))),
        }
    }
}

/// Entity inventory of a task: legal (TYPE, PLT, DEF) or mixed (+ PROB).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSet {
    Legal,
    Mixed,
}

impl LabelSet {
    pub fn labels(self) -> &'static [EntityLabel] {
        match self {
            LabelSet::Legal => &EntityLabel::ALL[..3],
            LabelSet::Mixed => &EntityLabel::ALL,
        }
    }

    /// `O`, then `B-X`, `I-X` for each label in order.
    pub fn tags(self) -> Vec<Tag> {
        let mut t = vec![Tag::O];
        for &l in self.labels() {
            t.push(Tag::B(l));
            t.push(Tag::I(l));
        }
        t
    }

    pub fn num_tags(self) -> usize {
        1 + 2 * self.labels().len()
    }

    pub fn tag_index(self, tag: Tag) -> Option<usize> {
        match tag {
            Tag::O => Some(0),
            Tag::B(l) => self.labels().iter().position(|&x| x == l).map(|i| 1 + 2 * i),
            Tag::I(l) => self.labels().iter().position(|&x| x == l).map(|i| 2 + 2 * i),
        }
    }

    pub fn tag_at(self, index: usize) -> Option<Tag> {
        self.tags().get(index).copied()
    }
}

impl FromStr for LabelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "legal" => Ok(LabelSet::Legal),
            "mixed" => Ok(LabelSet::Mixed),
            _ => Err(Error::config("labels", format!("expected legal or mixed, got {s:?}"))),
        }
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSet::Legal => "legal",
            LabelSet::Mixed => "mixed",
        })
    }
}

pub fn bio_encode(spans: &[EntitySpan], length: usize) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::O; length];
    let mut taken = vec![false; length];
    for s in spans {
        if s.is_empty() || s.end > length {
            return Err(Error::Annotation(format!(
                "span {}[{}, {}) is empty or outside a sequence of {length}",
                s.label, s.start, s.end
            )));
        }
        if taken[s.start..s.end].iter().any(|&t| t) {
            return Err(Error::Annotation(format!("span {}[{}, {}) overlaps another span", s.label, s.start, s.end)));
        }
        taken[s.start..s.end].iter_mut().for_each(|t| *t = true);
        tags[s.start] = Tag::B(s.label);
        for t in &mut tags[s.start + 1..s.end] {
            *t = Tag::I(s.label);
        }
    }
    Ok(tags)
}

/// Decoded spans plus the number of orphan `I-X` tags that were repaired by
/// treating them as `B-X`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decoded {
    pub spans: Vec<EntitySpan>,
    pub warnings: usize,
}

pub fn bio_decode(tags: &[Tag]) -> Decoded {
    let mut out = Decoded::default();
    let mut open: Option<(EntityLabel, usize)> = None;
    let close = |open: &mut Option<(EntityLabel, usize)>, end: usize, spans: &mut Vec<EntitySpan>| {
        if let Some((label, start)) = open.take() {
            spans.push(EntitySpan { label, start, end });
        }
    };
    for (i, &t) in tags.iter().enumerate() {
        match t {
            Tag::O => close(&mut open, i, &mut out.spans),
            Tag::B(l) => {
                close(&mut open, i, &mut out.spans);
                open = Some((l, i));
            }
            Tag::I(l) => match open {
                Some((cur, _)) if cur == l => {}
                _ => {
                    close(&mut open, i, &mut out.spans);
                    out.warnings += 1;
                    open = Some((l, i));
                }
            },
        }
    }
    close(&mut open, tags.len(), &mut out.spans);
    out
}

/// True when every `I-X` follows `B-X` or `I-X`.
pub fn is_well_formed(tags: &[Tag]) -> bool {
    bio_decode(tags).warnings == 0
}
