//! Character-level byte-pair-encoding tokenizer with a `</w>` word-end marker.
//!
//! Training pre-tokenizes on whitespace, appends `</w>` to every word and
//! greedily merges the most frequent adjacent symbol pair. Equal counts are
//! broken by the lexicographically smallest `(left, right)` pair, so training
//! is fully deterministic.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const WORD_END: &str = "</w>";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const DEFAULT_SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const DEFAULT_VOCAB_SIZE: usize = 30_522;

/// Ids of the five special tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl SpecialIds {
    /// Layout used by a vocabulary whose specials come first in default order.
    pub const DEFAULT: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
        mask: 4,
    };

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// Positions that masking must never select.
    pub fn is_structural(&self, id: u32) -> bool {
        id == self.pad || id == self.cls || id == self.sep
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub vocab_size: usize,
    pub specials: Vec<String>,
    pub lowercase: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            vocab_size: DEFAULT_VOCAB_SIZE,
            specials: DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect(),
            lowercase: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    merges: Vec<(String, String)>,
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    special_tokens: Vec<String>,
    alphabet: Vec<String>,
    specials: SpecialIds,
    vocab_size: usize,
    lowercase: bool,
    /// (left id, right id) -> (rank, merged id)
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    word_end: u32,
}

/// Encoded text: ids plus per-token character offsets into the source.
/// Special tokens carry no offset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<Option<(usize, usize)>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn normalize_char(c: char, lowercase: bool) -> char {
    if !lowercase {
        return c;
    }
    let mut it = c.to_lowercase();
    match (it.next(), it.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Whitespace words with their character span in the source text.
pub(crate) fn split_words(text: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push((start, i, std::mem::take(&mut cur)));
            }
        } else {
            if cur.is_empty() {
                start = i;
            }
            cur.push(c);
        }
        n = i + 1;
    }
    if !cur.is_empty() {
        out.push((start, n, cur));
    }
    out
}

impl Vocab {
    fn build(special_tokens: Vec<String>, alphabet: Vec<String>, merges: Vec<(String, String)>, vocab_size: usize, lowercase: bool) -> Result<Self> {
        for req in DEFAULT_SPECIALS {
            if !special_tokens.iter().any(|s| s == req) {
                return Err(Error::config("specials", format!("missing required special token {req}")));
            }
        }
        let mut id_to_token: Vec<String> = Vec::new();
        let mut token_to_id = HashMap::new();
        for t in special_tokens.iter().chain(&alphabet) {
            if token_to_id.insert(t.clone(), id_to_token.len() as u32).is_some() {
                return Err(Error::Format(format!("duplicate token {t}")));
            }
            id_to_token.push(t.clone());
        }
        let mut merge_rank = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (token_to_id.get(l), token_to_id.get(r)) else {
                return Err(Error::Format(format!("merge {l} {r} references an unknown symbol")));
            };
            let joined = format!("{l}{r}");
            let id = match token_to_id.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = id_to_token.len() as u32;
                    token_to_id.insert(joined.clone(), id);
                    id_to_token.push(joined);
                    id
                }
            };
            merge_rank.entry((li, ri)).or_insert((rank, id));
        }
        if id_to_token.len() > vocab_size {
            return Err(Error::config(
                "vocab_size",
                format!("{} tokens exceed vocab_size {vocab_size}", id_to_token.len()),
            ));
        }
        let id = |t: &str| token_to_id[t];
        let specials = SpecialIds {
            pad: id(PAD),
            unk: id(UNK),
            cls: id(CLS),
            sep: id(SEP),
            mask: id(MASK),
        };
        let word_end = *token_to_id
            .get(WORD_END)
            .ok_or_else(|| Error::Format("alphabet lacks the word-end marker".into()))?;
        Ok(Vocab {
            merges,
            token_to_id,
            id_to_token,
            special_tokens,
            alphabet,
            specials,
            vocab_size,
            lowercase,
            merge_rank,
            word_end,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn normalize(&self, word: &str) -> String {
        word.chars().map(|c| normalize_char(c, self.lowercase)).collect()
    }

    /// Encodes one whitespace-free word; returns (id, start, end) with
    /// offsets relative to the word.
    fn encode_word(&self, word: &str) -> Vec<(u32, usize, usize)> {
        let mut syms: Vec<(u32, usize, usize)> = word
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let mut buf = [0u8; 4];
                let s = normalize_char(c, self.lowercase).encode_utf8(&mut buf);
                (self.id(s).unwrap_or(self.specials.unk), i, i + 1)
            })
            .collect();
        let n = syms.len();
        syms.push((self.word_end, n, n));
        loop {
            let mut best: Option<(usize, u32, u32)> = None;
            for w in syms.windows(2) {
                if let Some(&(rank, _)) = self.merge_rank.get(&(w[0].0, w[1].0)) {
                    if best.is_none_or(|b| rank < b.0) {
                        best = Some((rank, w[0].0, w[1].0));
                    }
                }
            }
            let Some((_, l, r)) = best else { break };
            let merged = self.merge_rank[&(l, r)].1;
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i].0 == l && syms[i + 1].0 == r {
                    out.push((merged, syms[i].1, syms[i + 1].2));
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    pub fn encode(&self, text: &str, add_specials: bool) -> TokenSequence {
        let mut seq = TokenSequence::default();
        if add_specials {
            seq.ids.push(self.specials.cls);
            seq.offsets.push(None);
        }
        for (start, _, word) in split_words(text) {
            for (id, s, e) in self.encode_word(&word) {
                seq.ids.push(id);
                seq.offsets.push(Some((start + s, start + e)));
            }
        }
        if add_specials {
            seq.ids.push(self.specials.sep);
            seq.offsets.push(None);
        }
        seq
    }

    /// Encodes a single pre-split word (no whitespace handling).
    pub fn encode_single_word(&self, word: &str) -> Vec<u32> {
        self.encode_word(word).into_iter().map(|t| t.0).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Index(format!("token id {id} not in vocabulary of {}", self.len())))?;
            if self.specials.is_special(id) {
                continue;
            }
            out.push_str(tok);
        }
        let out = out.replace(WORD_END, " ");
        Ok(out.trim_end().to_string())
    }

    /// Line-oriented text form: `#OPTIONS`, `#SPECIALS`, `#ALPHABET`, `#MERGES`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("#OPTIONS\n");
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "lowercase={}", self.lowercase);
        s.push_str("#SPECIALS\n");
        for t in &self.special_tokens {
            let _ = writeln!(s, "{t}");
        }
        s.push_str("#ALPHABET\n");
        for t in &self.alphabet {
            let _ = writeln!(s, "{t}");
        }
        s.push_str("#MERGES\n");
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l}\t{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Options,
            Specials,
            Alphabet,
            Merges,
        }
        let mut section = Section::None;
        let mut vocab_size = DEFAULT_VOCAB_SIZE;
        let mut lowercase = true;
        let mut specials = Vec::new();
        let mut alphabet = Vec::new();
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            match line {
                "#OPTIONS" => section = Section::Options,
                "#SPECIALS" => section = Section::Specials,
                "#ALPHABET" => section = Section::Alphabet,
                "#MERGES" => section = Section::Merges,
                "" => {}
                _ => match section {
                    Section::None => {
                        return Err(Error::Format(format!("line {}: content before a section header", n + 1)))
                    }
                    Section::Options => {
                        let (k, v) = line
                            .split_once('=')
                            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
                        match k {
                            "vocab_size" => {
                                vocab_size = v
                                    .parse()
                                    .map_err(|_| Error::Format(format!("line {}: bad vocab_size", n + 1)))?
                            }
                            "lowercase" => {
                                lowercase = v
                                    .parse()
                                    .map_err(|_| Error::Format(format!("line {}: bad lowercase flag", n + 1)))?
                            }
                            _ => return Err(Error::Format(format!("line {}: unknown option {k}", n + 1))),
                        }
                    }
                    Section::Specials => specials.push(line.to_string()),
                    Section::Alphabet => alphabet.push(line.to_string()),
                    Section::Merges => {
                        let (l, r) = line
                            .split_once('\t')
                            .ok_or_else(|| Error::Format(format!("line {}: merge needs a tab", n + 1)))?;
                        merges.push((l.to_string(), r.to_string()));
                    }
                },
            }
        }
        Vocab::build(specials, alphabet, merges, vocab_size, lowercase)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&fs::read_to_string(path)?)
    }
}

/// Counts whitespace words of a corpus after normalization.
fn count_words<I, S>(corpus: I, lowercase: bool) -> HashMap<String, u64>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts = HashMap::new();
    for doc in corpus {
        for w in doc.as_ref().split_whitespace() {
            let w: String = w.chars().map(|c| normalize_char(c, lowercase)).collect();
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

type PairKey = (u64, Reverse<(String, String)>, u32, u32);

/// Trains a BPE vocabulary on a stream of documents.
pub fn train_bpe<I, S>(corpus: I, opts: &TrainOptions) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let counts = count_words(corpus, opts.lowercase);
    if counts.is_empty() {
        return Err(Error::Training("corpus contains no words".into()));
    }
    // Deterministic word order.
    let mut words: Vec<(String, u64)> = counts.into_iter().collect();
    words.sort();

    let mut alphabet: Vec<String> = words
        .iter()
        .flat_map(|(w, _)| w.chars().map(String::from))
        .chain(std::iter::once(WORD_END.to_string()))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    alphabet.sort();
    let base = alphabet.len() + opts.specials.len();
    if opts.vocab_size < base {
        return Err(Error::config(
            "vocab_size",
            format!(
                "{} is smaller than the {} specials plus {} base symbols",
                opts.vocab_size,
                opts.specials.len(),
                alphabet.len()
            ),
        ));
    }

    let mut sym_str: Vec<String> = alphabet.clone();
    let mut sym_id: HashMap<String, u32> = sym_str.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
    let word_end = sym_id[WORD_END];
    let mut seqs: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| {
            w.chars()
                .map(|c| sym_id[c.to_string().as_str()])
                .chain(std::iter::once(word_end))
                .collect()
        })
        .collect();
    let freq: Vec<u64> = words.iter().map(|(_, c)| *c).collect();

    let mut pair_count: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, s) in seqs.iter().enumerate() {
        for p in s.windows(2) {
            *pair_count.entry((p[0], p[1])).or_insert(0) += freq[wi];
            pair_words.entry((p[0], p[1])).or_default().insert(wi);
        }
    }
    let key = |sym_str: &Vec<String>, (l, r): (u32, u32), c: u64| -> PairKey {
        (c, Reverse((sym_str[l as usize].clone(), sym_str[r as usize].clone())), l, r)
    };
    let mut heap: BinaryHeap<PairKey> = pair_count.iter().map(|(&p, &c)| key(&sym_str, p, c)).collect();

    let mut merges = Vec::new();
    let mut vocab_len = base;
    while vocab_len < opts.vocab_size {
        let Some((c, _, l, r)) = heap.pop() else { break };
        if pair_count.get(&(l, r)).copied() != Some(c) {
            continue; // stale entry
        }
        if c < 2 {
            break;
        }
        let joined = format!("{}{}", sym_str[l as usize], sym_str[r as usize]);
        let new_id = match sym_id.get(&joined) {
            Some(&id) => id,
            None => {
                let id = sym_str.len() as u32;
                sym_str.push(joined.clone());
                sym_id.insert(joined, id);
                vocab_len += 1;
                id
            }
        };
        merges.push((sym_str[l as usize].clone(), sym_str[r as usize].clone()));

        let mut affected: Vec<usize> = pair_words.remove(&(l, r)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let old = &seqs[wi];
            for p in old.windows(2) {
                let k = (p[0], p[1]);
                if let Some(cnt) = pair_count.get_mut(&k) {
                    *cnt -= freq[wi];
                }
                touched.insert(k);
            }
            let mut next = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == l && old[i + 1] == r {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(old[i]);
                    i += 1;
                }
            }
            for p in next.windows(2) {
                let k = (p[0], p[1]);
                *pair_count.entry(k).or_insert(0) += freq[wi];
                pair_words.entry(k).or_default().insert(wi);
                touched.insert(k);
            }
            seqs[wi] = next;
        }
        pair_count.remove(&(l, r));
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for k in touched {
            match pair_count.get(&k).copied() {
                Some(0) => {
                    pair_count.remove(&k);
                }
                Some(cnt) => heap.push(key(&sym_str, k, cnt)),
                None => {}
            }
        }
    }
    log::debug!("trained BPE: {} merges, {} tokens", merges.len(), vocab_len);
    Vocab::build(opts.specials.clone(), alphabet, merges, opts.vocab_size, opts.lowercase)
}

/// Outcome of checking how a vocabulary splits the words of a text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenizerReport {
    pub word_count: usize,
    pub total_errors: usize,
    pub legal_errors: usize,
    pub medical_errors: usize,
    pub error_words: Vec<String>,
}

fn strip_punct(w: &str) -> &str {
    w.trim_matches(|c: char| c.is_ascii_punctuation())
}

/// Counts words that a vocabulary splits into more than one token.
///
/// Words are whitespace-separated with surrounding ASCII punctuation removed.
/// Each distinct word form is counted once; words in `abbreviations` are
/// never errors.
pub fn evaluate_tokenization(
    text: &str,
    vocab: &Vocab,
    abbreviations: &HashSet<String>,
    legal_lexicon: &HashSet<String>,
    medical_lexicon: &HashSet<String>,
) -> TokenizerReport {
    let mut report = TokenizerReport::default();
    let mut seen = HashSet::new();
    for raw in text.split_whitespace() {
        report.word_count += 1;
        let word = vocab.normalize(strip_punct(raw));
        if word.is_empty() || !seen.insert(word.clone()) {
            continue;
        }
        let pieces = vocab
            .encode_single_word(&word)
            .into_iter()
            .filter(|&id| !vocab.specials().is_special(id) || id == vocab.specials().unk)
            .count();
        if pieces > 1 && !abbreviations.contains(&word) {
            report.total_errors += 1;
            if legal_lexicon.contains(&word) {
                report.legal_errors += 1;
            }
            if medical_lexicon.contains(&word) {
                report.medical_errors += 1;
            }
            report.error_words.push(word);
        }
    }
    report
}
