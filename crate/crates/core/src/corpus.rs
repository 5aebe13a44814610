//! Corpus ingestion: cleaning, weighted domain mixing and batch assembly.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use regex::Regex;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::Vocab;

/// Lines with an uppercase letter and no lowercase one ("IN THE SUPERIOR COURT
/// OF ...", docket captions) and bare page numbers.
pub const DEFAULT_HEADER_PATTERNS: [&str; 2] = [r"^[^\p{Ll}]*\p{Lu}[^\p{Ll}]*$", r"^(?i:page\s+)?\d+(\s+(?i:of)\s+\d+)?$"];

#[derive(Clone, Debug)]
pub struct CleanOptions {
    /// A line (after whitespace collapsing) matching any pattern is dropped.
    pub header_patterns: Vec<Regex>,
    /// Paragraphs whose letters are less than this fraction basic-Latin are dropped.
    pub min_latin_ratio: f64,
}

impl Default for CleanOptions {
    fn default() -> Self {
        CleanOptions {
            header_patterns: DEFAULT_HEADER_PATTERNS
                .iter()
                .map(|p| Regex::new(p).expect("built-in pattern"))
                .collect(),
            min_latin_ratio: 0.6,
        }
    }
}

impl CleanOptions {
    pub fn with_patterns(patterns: &[&str]) -> Result<Self> {
        let header_patterns = patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::config("header_patterns", e.to_string())))
            .collect::<Result<_>>()?;
        Ok(CleanOptions {
            header_patterns,
            ..Self::default()
        })
    }
}

fn is_invisible(c: char) -> bool {
    (c.is_control() && c != '\n' && c != '\t')
        || matches!(c, '\u{200B}'..='\u{200F}' | '\u{2028}'..='\u{202E}' | '\u{2060}'..='\u{2064}' | '\u{FEFF}')
}

fn latin_ratio(text: &str) -> Option<f64> {
    let (mut letters, mut latin) = (0usize, 0usize);
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        letters += 1;
        if c.is_ascii_alphabetic() {
            latin += 1;
        }
    }
    (letters > 0).then(|| latin as f64 / letters as f64)
}

/// Removes control characters, header lines and mostly non-Latin paragraphs,
/// and collapses whitespace. Paragraphs are separated by one blank line.
///
/// Idempotent: lines keep their structure, so a second pass makes the same
/// decisions as the first.
pub fn clean_text(raw: &str, opts: &CleanOptions) -> String {
    let stripped: String = raw.chars().filter(|&c| !is_invisible(c)).collect();
    let mut paragraphs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, paragraphs: &mut Vec<String>| {
        if current.is_empty() {
            return;
        }
        let para = current.join("\n");
        current.clear();
        if latin_ratio(&para).is_none_or(|r| r >= opts.min_latin_ratio) {
            paragraphs.push(para);
        }
    };
    for line in stripped.lines() {
        let collapsed = line.split_whitespace().collect::<Vec<_>>().join(" ");
        if collapsed.is_empty() {
            flush(&mut current, &mut paragraphs);
            continue;
        }
        if opts.header_patterns.iter().any(|p| p.is_match(&collapsed)) {
            continue;
        }
        current.push(collapsed);
    }
    flush(&mut current, &mut paragraphs);
    paragraphs.join("\n\n")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Legal,
    Medical,
    Mixed,
}

impl Domain {
    /// Default mixing weight (6:3:3 legal : medical : mixed).
    pub fn default_weight(self) -> f64 {
        match self {
            Domain::Legal => 0.5,
            Domain::Medical | Domain::Mixed => 0.25,
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "legal" => Ok(Domain::Legal),
            "medical" => Ok(Domain::Medical),
            "mixed" => Ok(Domain::Mixed),
            _ => Err(Error::config("domain", format!("expected legal, medical or mixed, got {s:?}"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Legal => "legal",
            Domain::Medical => "medical",
            Domain::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSource {
    pub name: String,
    pub domain: Domain,
    pub path: PathBuf,
    pub weight: f64,
}

/// Parses a source manifest: stanzas of `key = value` lines separated by blank
/// lines, keys `name`, `domain`, `path`, `weight` (optional, domain default).
/// Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<CorpusSource>> {
    let mut sources = Vec::new();
    let mut fields: Vec<(String, String)> = Vec::new();
    let finish = |fields: &mut Vec<(String, String)>, sources: &mut Vec<CorpusSource>| -> Result<()> {
        if fields.is_empty() {
            return Ok(());
        }
        let get = |k: &str| fields.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
        let name = get("name").ok_or_else(|| Error::config("name", "source stanza without a name"))?;
        let domain: Domain = get("domain")
            .ok_or_else(|| Error::config("domain", format!("source {name} has no domain")))?
            .parse()?;
        let path = get("path").ok_or_else(|| Error::config("path", format!("source {name} has no path")))?;
        let weight = match get("weight") {
            Some(w) => w
                .parse::<f64>()
                .ok()
                .filter(|w| *w >= 0.0 && w.is_finite())
                .ok_or_else(|| Error::config("weight", format!("source {name}: bad weight {w:?}")))?,
            None => domain.default_weight(),
        };
        let path = PathBuf::from(path);
        sources.push(CorpusSource {
            name,
            domain,
            path: if path.is_relative() { base.join(path) } else { path },
            weight,
        });
        fields.clear();
        Ok(())
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            finish(&mut fields, &mut sources)?;
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config("manifest", format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if !matches!(k, "name" | "domain" | "path" | "weight") {
            return Err(Error::config(k, format!("line {}: unknown manifest key", n + 1)));
        }
        if fields.iter().any(|(key, _)| key == k) {
            finish(&mut fields, &mut sources)?;
        }
        fields.push((k.to_string(), v.trim().to_string()));
    }
    finish(&mut fields, &mut sources)?;
    Ok(sources)
}

/// Reads documents: a directory yields one document per file (sorted by
/// name); a file yields its blank-line-separated blocks.
pub fn load_documents(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::Data(format!("corpus path {} does not exist", path.display())));
    }
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut docs = Vec::new();
        for f in files {
            let text = fs::read_to_string(&f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
            if !text.trim().is_empty() {
                docs.push(text);
            }
        }
        Ok(docs)
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(split_blocks(&text))
    }
}

/// Splits text into blank-line-separated blocks.
pub fn split_blocks(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out
}

/// Endless weighted stream over several document collections.
///
/// Each draw picks a source with probability proportional to its weight, then
/// takes that source's next document from a shuffled order; an exhausted
/// source is reshuffled and starts over.
pub struct DocumentMixer {
    docs: Vec<Vec<String>>,
    order: Vec<Vec<usize>>,
    pos: Vec<usize>,
    active: Vec<usize>,
    picker: WeightedIndex<f64>,
    rng: Rng,
}

impl DocumentMixer {
    pub fn new(sources: Vec<(f64, Vec<String>)>, mut rng: Rng) -> Result<Self> {
        let active: Vec<usize> = sources
            .iter()
            .enumerate()
            .filter(|(_, (w, d))| *w > 0.0 && !d.is_empty())
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            return Err(Error::Data("no source with documents and positive weight".into()));
        }
        let picker = WeightedIndex::new(active.iter().map(|&i| sources[i].0))
            .map_err(|e| Error::Data(format!("bad mixing weights: {e}")))?;
        let mut order = Vec::new();
        for (_, d) in &sources {
            let mut o: Vec<usize> = (0..d.len()).collect();
            o.shuffle(&mut rng);
            order.push(o);
        }
        Ok(DocumentMixer {
            pos: vec![0; sources.len()],
            docs: sources.into_iter().map(|(_, d)| d).collect(),
            order,
            active,
            picker,
            rng,
        })
    }

    /// Next document and the index of the source it came from.
    pub fn draw(&mut self) -> (usize, &str) {
        let s = self.active[self.picker.sample(&mut self.rng)];
        if self.pos[s] == self.order[s].len() {
            self.order[s].shuffle(&mut self.rng);
            self.pos[s] = 0;
        }
        let d = self.order[s][self.pos[s]];
        self.pos[s] += 1;
        (s, &self.docs[s][d])
    }
}

impl Iterator for DocumentMixer {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        Some(self.draw().1.to_string())
    }
}

pub fn mix_corpora(sources: &[CorpusSource], rng: Rng, opts: &CleanOptions) -> Result<DocumentMixer> {
    let mut loaded = Vec::new();
    for s in sources {
        let docs = load_documents(&s.path)?
            .iter()
            .map(|d| clean_text(d, opts))
            .filter(|d| !d.is_empty())
            .collect();
        loaded.push((s.weight, docs));
    }
    DocumentMixer::new(loaded, rng)
}

/// Rows of token ids padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    /// `true` on real tokens, `false` on `[PAD]`.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    /// Pads rows (each already wrapped in `[CLS] … [SEP]`) to the longest one.
    pub fn from_rows(rows: Vec<Vec<u32>>, pad: u32) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut mask = Vec::with_capacity(rows.len());
        for mut r in rows {
            let n = r.len();
            r.resize(width, pad);
            let mut m = vec![true; n];
            m.resize(width, false);
            ids.push(r);
            mask.push(m);
        }
        Batch { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Splits one document into `[CLS] … [SEP]` segments of at most `max_seq_len` tokens.
pub fn segment_document(text: &str, vocab: &Vocab, max_seq_len: usize) -> Vec<Vec<u32>> {
    let body = max_seq_len.saturating_sub(2).max(1);
    let ids = vocab.encode(text, false).ids;
    let sp = vocab.specials();
    ids.chunks(body)
        .map(|c| {
            let mut row = Vec::with_capacity(c.len() + 2);
            row.push(sp.cls);
            row.extend_from_slice(c);
            row.push(sp.sep);
            row
        })
        .collect()
}

/// Turns a document stream into padded batches. Segments are buffered in a
/// pool of `batch_size * POOL_BATCHES` and grouped by length before padding.
pub struct Batcher<'v, I> {
    docs: I,
    vocab: &'v Vocab,
    batch_size: usize,
    max_seq_len: usize,
    pending: VecDeque<Batch>,
    done: bool,
}

const POOL_BATCHES: usize = 8;

impl<'v, I: Iterator<Item = String>> Batcher<'v, I> {
    fn refill(&mut self) {
        let mut pool: Vec<Vec<u32>> = Vec::new();
        let target = self.batch_size * POOL_BATCHES;
        while pool.len() < target {
            match self.docs.next() {
                Some(d) => pool.extend(segment_document(&d, self.vocab, self.max_seq_len)),
                None => {
                    self.done = true;
                    break;
                }
            }
        }
        pool.sort_by_key(Vec::len);
        let pad = self.vocab.specials().pad;
        let mut rest = pool.into_iter().peekable();
        while rest.peek().is_some() {
            let rows: Vec<_> = rest.by_ref().take(self.batch_size).collect();
            self.pending.push_back(Batch::from_rows(rows, pad));
        }
    }
}

impl<I: Iterator<Item = String>> Iterator for Batcher<'_, I> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pending.is_empty() && !self.done {
            self.refill();
        }
        self.pending.pop_front()
    }
}

pub fn make_batches<I: Iterator<Item = String>>(docs: I, vocab: &Vocab, batch_size: usize, max_seq_len: usize) -> Batcher<'_, I> {
    Batcher {
        docs,
        vocab,
        batch_size: batch_size.max(1),
        max_seq_len,
        pending: VecDeque::new(),
        done: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tokenizer::{train_bpe, TrainOptions};

    #[test]
    fn clean_basics() {
        let o = CleanOptions::default();
        let s = "The plaintiff slipped on a wet floor.";
        assert_eq!(clean_text(s, &o), s);
        assert_eq!(clean_text("The\u{7}re was\u{0} a fall.", &o), "There was a fall.");
        let mixed = "Ordinary text here.\n\nЭто предложение написано по-русски полностью.";
        assert_eq!(clean_text(mixed, &o), "Ordinary text here.");
        let hdr = "SUPERIOR COURT OF CALIFORNIA\nCase No. 12-345\nThe   defendant  denied it.\nPage 3 of 9";
        assert_eq!(clean_text(hdr, &o), "Case No. 12-345\nThe defendant denied it.");
    }

    #[test]
    fn clean_is_idempotent_on_samples() {
        let o = CleanOptions::default();
        for s in [
            "A\tB  c\r\n\r\n\r\nD E F\nx",
            "ÉCOLE école\n\n\n  12 \n γράμμα latin latin",
            "\u{feff}hello\u{200b} world\n\nWORLD\nthe end",
        ] {
            let once = clean_text(s, &o);
            assert_eq!(clean_text(&once, &o), once);
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = "name = a\ndomain = legal\npath = docs/a\n\nname = b\ndomain = medical\npath = /abs/b\nweight = 0.1\n";
        let s = parse_manifest(m, Path::new("/base")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].path, PathBuf::from("/base/docs/a"));
        assert_eq!(s[0].weight, 0.5);
        assert_eq!(s[1].weight, 0.1);
        assert!(matches!(parse_manifest("colour = red", Path::new(".")), Err(Error::Config { key, .. }) if key == "colour"));
    }

    #[test]
    fn mixer_fractions_and_zero_weight() {
        let src = |n: usize, tag: &str| (0..n).map(|i| format!("{tag}{i}")).collect::<Vec<_>>();
        let mut m = DocumentMixer::new(
            vec![(0.5, src(7, "l")), (0.25, src(3, "m")), (0.25, src(5, "x")), (0.0, src(4, "z"))],
            rng_for(1, "mix"),
        )
        .unwrap();
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[m.draw().0] += 1;
        }
        assert_eq!(counts[3], 0);
        for (c, w) in counts.iter().zip([0.5, 0.25, 0.25]) {
            assert!((*c as f64 / 10_000.0 - w).abs() <= 0.02, "{counts:?}");
        }
        assert!(DocumentMixer::new(vec![(1.0, vec![])], rng_for(1, "mix")).is_err());
    }

    #[test]
    fn single_source_is_shuffled_pass() {
        let docs: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let mut m = DocumentMixer::new(vec![(1.0, docs.clone())], rng_for(2, "mix")).unwrap();
        let mut first: Vec<String> = (0..6).map(|_| m.next().unwrap()).collect();
        first.sort();
        assert_eq!(first, docs);
    }

    #[test]
    fn batching_contracts() {
        let v = train_bpe(["a a b b c c"], &TrainOptions { vocab_size: 40, ..Default::default() }).unwrap();
        let batches: Vec<_> = make_batches(vec!["a b c".to_string()].into_iter(), &v, 1, 16).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].mask[0].iter().filter(|m| !**m).count(), 0);

        let long = vec!["a"; 10_000].join(" ");
        assert_eq!(segment_document(&long, &v, 8192).len(), 2);

        let docs: Vec<String> = (1..12).map(|n| vec!["b"; n].join(" ")).collect();
        for b in make_batches(docs.into_iter(), &v, 4, 8) {
            assert!(b.width() <= 8);
            for (row, mask) in b.ids.iter().zip(&b.mask) {
                let real = mask.iter().filter(|m| **m).count();
                assert_eq!(row[real - 1], v.specials().sep);
                for (id, m) in row.iter().zip(mask) {
                    assert_eq!(!m, *id == v.specials().pad);
                }
            }
        }
    }
}
