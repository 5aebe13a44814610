//! A small synthetic personal-injury world: templated case descriptions over a
//! fixed 200-word vocabulary, with planted party, case-type and medical
//! problem spans. Used for toy pretraining, NER benchmarks and the tokenizer
//! comparison.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::ner::bio::{EntityLabel, Tag};
use crate::ner::data::WordExample;
use crate::rng::{rng_for, Rng};

pub const PLAINTIFF_FIRST: &[&str] = &[
    "john", "mary", "robert", "linda", "james", "susan", "michael", "karen", "david", "nancy", "thomas", "laura",
];
pub const PLAINTIFF_LAST: &[&str] = &[
    "smith", "johnson", "garcia", "miller", "davis", "martinez", "wilson", "anderson", "taylor", "moore", "jackson",
    "white",
];
pub const DEFENDANT_FIRST: &[&str] = &[
    "acme", "northwind", "summit", "harbor", "pioneer", "granite", "atlas", "beacon", "crescent", "evergreen",
];
pub const DEFENDANT_SUFFIX: &[&str] = &["corporation", "logistics", "markets", "properties", "industries"];

pub const CASE_TYPES: &[&str] = &[
    "motor vehicle collision",
    "premises liability",
    "wet floor incident",
    "wrongful termination",
    "medical malpractice",
    "workplace negligence",
    "dog bite",
    "product defect",
];

pub const PROBLEMS: &[&str] = &[
    "orthopnea",
    "concussion",
    "whiplash",
    "fractured wrist",
    "lumbar strain",
    "torn ligament",
    "herniated disc",
    "chronic back pain",
    "palpitations",
    "neurologic changes",
    "rashes",
    "gastrointestinal complaints",
];

/// `{P}` plaintiff, `{D}` defendant, `{T}` case type, `{B}` medical problem.
const TEMPLATES: &[&str] = &[
    "{P} filed a complaint against {D} alleging {T} .",
    "the plaintiff {P} suffered {B} after the {T} .",
    "{D} denies that the {T} caused {B} .",
    "the court found that {D} was liable for the damages .",
    "{P} was treated for {B} at the emergency room .",
    "the expert testified that {P} had {B} before the trial .",
    "counsel for {D} filed a motion to dismiss the case .",
    "the jury returned a verdict in favor of {P} .",
    "the record shows that the physician diagnosed {B} .",
    "the defendant argued that the claims of {P} were not supported by evidence .",
    "{P} seeks compensation from {D} for lost wages and {B} .",
    "an attorney for {D} disputed the extent of the {B} .",
    "the court granted the motion for summary judgment .",
    "the witness gave testimony during the trial .",
    "damages were awarded for hospital expenses and lost wages .",
    "the parties agreed to mediation in the spring .",
    "the judge denied the request for a new trial .",
    "the insurance company refused to pay the claim .",
    "she received physical therapy for several weeks .",
    "he returned to work three months later .",
    "the appeal was heard by a panel of judges .",
    "the settlement conference is scheduled for next month .",
    "discovery closed and the deposition transcripts were sealed .",
    "an independent examiner reviewed the imaging studies .",
    "the surgeon recommended rest and medication .",
    "the statute of limitations had not yet expired .",
];

/// Every distinct word of the synthetic world.
pub fn world_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let all = PLAINTIFF_FIRST
        .iter()
        .chain(PLAINTIFF_LAST)
        .chain(DEFENDANT_FIRST)
        .chain(DEFENDANT_SUFFIX)
        .chain(CASE_TYPES)
        .chain(PROBLEMS)
        .chain(TEMPLATES);
    for phrase in all {
        for w in phrase.split_whitespace() {
            if !w.starts_with('{') && !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    }
    words.sort();
    words
}

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("nonempty list")
}

/// One synthetic case: parties, case type and problems, then 4–8 sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCase {
    pub plaintiff: String,
    pub defendant: String,
    pub case_type: String,
    pub example: WordExample,
}

impl SynthCase {
    pub fn text(&self) -> String {
        self.example.words.join(" ")
    }
}

fn push_phrase(ex: &mut WordExample, phrase: &str, label: Option<EntityLabel>) {
    for (k, w) in phrase.split_whitespace().enumerate() {
        ex.words.push(w.to_string());
        ex.tags.push(match (label, k) {
            (None, _) => Tag::O,
            (Some(l), 0) => Tag::B(l),
            (Some(l), _) => Tag::I(l),
        });
    }
}

pub fn generate_case(rng: &mut Rng) -> SynthCase {
    let plaintiff = format!("{} {}", pick(rng, PLAINTIFF_FIRST), pick(rng, PLAINTIFF_LAST));
    let defendant = format!("{} {}", pick(rng, DEFENDANT_FIRST), pick(rng, DEFENDANT_SUFFIX));
    let case_type = pick(rng, CASE_TYPES).to_string();
    let problems = [pick(rng, PROBLEMS), pick(rng, PROBLEMS)];
    let n = rng.random_range(4..=8);
    let mut ex = WordExample {
        words: Vec::new(),
        tags: Vec::new(),
    };
    for _ in 0..n {
        let t = pick(rng, TEMPLATES);
        for piece in t.split_whitespace() {
            match piece {
                "{P}" => push_phrase(&mut ex, &plaintiff, Some(EntityLabel::Plt)),
                "{D}" => push_phrase(&mut ex, &defendant, Some(EntityLabel::Def)),
                "{T}" => push_phrase(&mut ex, &case_type, Some(EntityLabel::Type)),
                "{B}" => {
                    let p = problems[rng.random_range(0..2)];
                    push_phrase(&mut ex, p, Some(EntityLabel::Prob))
                }
                w => push_phrase(&mut ex, w, None),
            }
        }
    }
    SynthCase {
        plaintiff,
        defendant,
        case_type,
        example: ex,
    }
}

pub fn generate_cases(seed: u64, stream: &str, n: usize) -> Vec<SynthCase> {
    let mut rng = rng_for(seed, stream);
    (0..n).map(|_| generate_case(&mut rng)).collect()
}

/// Plain documents for pretraining, one case description each.
pub fn pretraining_documents(seed: u64, n: usize) -> Vec<String> {
    generate_cases(seed, "synth.pretrain", n).iter().map(SynthCase::text).collect()
}

/// Word-level NER splits `(train, dev, test)` drawn from independent streams.
pub fn ner_splits(seed: u64, train: usize, dev: usize, test: usize) -> (Vec<WordExample>, Vec<WordExample>, Vec<WordExample>) {
    let f = |stream: &str, n: usize| generate_cases(seed, stream, n).into_iter().map(|c| c.example).collect();
    (f("synth.ner.train", train), f("synth.ner.dev", dev), f("synth.ner.test", test))
}

/// A word-level document of exactly `words` words made of concatenated cases.
pub fn long_document(seed: u64, words: usize) -> WordExample {
    let mut rng = rng_for(seed, "synth.long");
    let mut doc = WordExample {
        words: Vec::new(),
        tags: Vec::new(),
    };
    while doc.words.len() < words {
        let c = generate_case(&mut rng);
        doc.words.extend(c.example.words);
        doc.tags.extend(c.example.tags);
    }
    doc.words.truncate(words);
    doc.tags.truncate(words);
    // a truncated span may leave a dangling I- tag at the end; that is still
    // well formed because it follows its B-.
    doc
}

/// Case-type word lists matching [`CASE_TYPES`] in `#TYPE` file syntax.
pub fn wordlist_text() -> String {
    let mut s = String::new();
    for t in CASE_TYPES {
        s.push_str(&format!("#TYPE {t}\n{t}\n"));
    }
    s
}

// --- tokenizer comparison material -------------------------------------

const MEDICAL_TERMS: &[&str] = &[
    "gastrointestinal", "complaints", "neurologic", "changes", "rashes", "palpitations", "orthopnea", "dyspnea",
    "tachycardia", "hypertension", "radiculopathy", "contusion", "laceration", "fracture", "cervical", "lumbar",
    "thoracic", "abdominal", "cardiac", "pulmonary", "diagnosis", "prognosis", "symptoms", "physician", "surgery",
    "therapy", "medication", "hospital", "patient", "chronic", "acute", "bilateral", "edema", "syncope",
];

const LEGAL_TERMS: &[&str] = &[
    "adjudications", "erroneous", "subsequent", "proceedings", "plaintiff", "defendant", "negligence", "liability",
    "tortious", "indemnification", "jurisdiction", "appellate", "affidavit", "deposition", "testimony", "verdict",
    "judgment", "statute", "limitations", "damages", "complaint", "motion", "summary", "dismissal", "counsel",
    "litigation", "stipulation", "remand", "precedent", "nature", "upon", "which", "rest", "court",
];

const COMMON_WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "was", "for", "that", "with", "on", "as", "by", "at", "from", "his", "her",
    "after", "before", "were", "had", "has", "this", "which", "not", "also", "been", "their", "there", "more",
];

const GENERAL_WORDS: &[&str] = &[
    "weather", "market", "season", "football", "music", "festival", "garden", "kitchen", "recipe", "travel",
    "mountain", "river", "morning", "evening", "family", "friends", "school", "teacher", "student", "library",
    "concert", "movie", "theater", "city", "village", "island", "summer", "winter", "holiday", "coffee", "bakery",
    "bicycle", "train", "station", "airport", "museum", "painting", "camera", "phone", "computer", "weekend",
    "birthday", "dinner", "breakfast", "chocolate", "vegetables", "shopping", "neighbors", "parade", "election",
    "community", "volunteers", "company", "workers", "prices", "economy", "business", "stadium", "players",
    "coach", "championship", "tournament", "tickets", "fans", "streets", "traffic", "buses", "local", "national",
];

fn sentences(rng: &mut Rng, pools: &[&[&str]], n: usize) -> String {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(6..=14);
        let mut words = Vec::with_capacity(len);
        for k in 0..len {
            // alternate function words with content words
            let pool = if k % 2 == 0 { COMMON_WORDS } else { pools[rng.random_range(0..pools.len())] };
            words.push(pick(rng, pool));
        }
        out.push(words.join(" "));
    }
    out.join("\n")
}

/// Legal and medical text for training a domain tokenizer.
pub fn domain_corpus(seed: u64, sentences_n: usize) -> String {
    sentences(&mut rng_for(seed, "synth.domain"), &[LEGAL_TERMS, MEDICAL_TERMS], sentences_n)
}

/// Everyday text without domain terminology.
pub fn general_corpus(seed: u64, sentences_n: usize) -> String {
    sentences(&mut rng_for(seed, "synth.general"), &[GENERAL_WORDS], sentences_n)
}

/// Evaluation sample mixing the legal and medical example phrases with
/// ordinary case prose.
pub const TOKENIZER_SAMPLE: &str = "the patient reported gastrointestinal complaints, neurologic changes, rashes, palpitations, orthopnea \
and chronic lumbar pain after the accident. the nature of adjudications upon which erroneous subsequent proceedings rest \
was disputed by counsel for the defendant. the plaintiff filed a complaint alleging negligence and sought damages; \
the court considered the affidavit, the deposition testimony and the statute of limitations before the verdict.";

pub fn medical_lexicon() -> Vec<String> {
    MEDICAL_TERMS.iter().map(|s| s.to_string()).collect()
}

pub fn legal_lexicon() -> Vec<String> {
    LEGAL_TERMS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ner::bio::is_well_formed;

    #[test]
    fn world_has_200_words() {
        let v = world_vocabulary();
        assert_eq!(v.len(), 200, "{}", v.len());
        let docs = pretraining_documents(3, 300);
        let mut seen: Vec<&str> = docs.iter().flat_map(|d| d.split_whitespace()).collect();
        seen.sort();
        seen.dedup();
        assert!(seen.iter().all(|w| v.iter().any(|x| x == w)));
    }

    #[test]
    fn entity_words_are_not_filler() {
        let filler: Vec<&str> = TEMPLATES
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !w.starts_with('{'))
            .collect();
        for phrase in PLAINTIFF_FIRST
            .iter()
            .chain(PLAINTIFF_LAST)
            .chain(DEFENDANT_FIRST)
            .chain(DEFENDANT_SUFFIX)
            .chain(CASE_TYPES)
            .chain(PROBLEMS)
        {
            for w in phrase.split_whitespace() {
                assert!(!filler.contains(&w), "{w} is used outside its entity");
            }
        }
    }

    #[test]
    fn cases_are_deterministic_and_well_formed() {
        let a = generate_cases(5, "x", 20);
        assert_eq!(a, generate_cases(5, "x", 20));
        for c in &a {
            assert!(is_well_formed(&c.example.tags));
            assert!(c.text().contains(&c.plaintiff) || c.text().contains(&c.defendant) || !c.example.words.is_empty());
        }
        assert_eq!(long_document(1, 5000).words.len(), 5000);
    }
}
