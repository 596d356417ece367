//! Seeded generator of short tagged English sentences.
//!
//! Every template is reachable by at least one catalog rule, so a toy corpus
//! exercises the whole catalog. Sentences also carry a binary label (does the
//! sentence mention an animal) for the downstream probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TokenSentence;

const ANIMALS: &[&str] = &["dog", "cat", "bird", "horse", "goat", "cow"];
const THINGS: &[&str] = &["car", "book", "house", "phone", "table", "song", "letter", "garden", "river", "market"];
const PEOPLE: &[&str] = &["man", "woman", "teacher", "friend", "girlfriend", "brother", "doctor", "farmer"];
const ADJECTIVES: &[&str] = &["big", "small", "happy", "tired", "real", "old", "new", "beautiful", "quiet", "busy"];
const PLACES: &[&str] = &["house", "school", "market", "garden", "city", "office"];
const PREPS: &[&str] = &["in", "at", "near"];
const NUMBERS: &[&str] = &["two", "three", "four", "many", "several"];
const DEGREE: &[&str] = &["very", "really", "so"];
// base, past, progressive, third person singular
const VERBS: &[[&str; 4]] = &[
    ["read", "read", "reading", "reads"],
    ["see", "saw", "seeing", "sees"],
    ["buy", "bought", "buying", "buys"],
    ["find", "found", "finding", "finds"],
    ["like", "liked", "liking", "likes"],
    ["meet", "met", "meeting", "meets"],
    ["want", "wanted", "wanting", "wants"],
    ["follow", "followed", "following", "follows"],
];
const SINGULAR_PRONOUNS: &[&str] = &["he", "she"];

/// A generated sentence and its probe label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSentence {
    pub sentence: TokenSentence,
    pub label: bool,
}

struct Builder {
    toks: Vec<(String, &'static str)>,
}

impl Builder {
    fn new() -> Self {
        Self { toks: Vec::new() }
    }

    fn w(&mut self, word: &str, tag: &'static str) -> &mut Self {
        self.toks.push((word.to_string(), tag));
        self
    }

    fn finish(&mut self) -> TokenSentence {
        let (tokens, tags) = self.toks.drain(..).map(|(w, t)| (w, t.to_string())).unzip();
        TokenSentence { tokens, tags: Some(tags) }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn noun<R: Rng>(rng: &mut R) -> &'static str {
    match rng.random_range(0..3) {
        0 => pick(rng, ANIMALS),
        1 => pick(rng, THINGS),
        _ => pick(rng, PEOPLE),
    }
}

fn object_noun<R: Rng>(rng: &mut R) -> &'static str {
    if rng.random_bool(0.5) {
        pick(rng, ANIMALS)
    } else {
        pick(rng, THINGS)
    }
}

fn article(b: &mut Builder, rng: &mut impl Rng, next: &str) {
    if rng.random_bool(0.5) {
        b.w("the", "DET");
    } else if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        b.w("an", "DET");
    } else {
        b.w("a", "DET");
    }
}

fn noun_phrase(b: &mut Builder, rng: &mut impl Rng, n: &str) {
    if rng.random_bool(0.3) {
        let adj = pick(rng, ADJECTIVES);
        article(b, rng, adj);
        b.w(adj, "ADJ");
    } else {
        article(b, rng, n);
    }
    b.w(n, "NOUN");
}

fn object_phrase(b: &mut Builder, rng: &mut impl Rng) {
    let n = object_noun(rng);
    noun_phrase(b, rng, n);
}

fn subject(b: &mut Builder, rng: &mut impl Rng) {
    if rng.random_bool(0.4) {
        let p = pick(rng, SINGULAR_PRONOUNS);
        b.w(p, "PRON");
    } else {
        b.w("the", "DET").w(noun(rng), "NOUN");
    }
}

fn verb<R: Rng>(rng: &mut R) -> [&'static str; 4] {
    VERBS[rng.random_range(0..VERBS.len())]
}

/// One sentence from the template grammar.
pub fn toy_sentence<R: Rng>(rng: &mut R) -> TokenSentence {
    let mut b = Builder::new();
    match rng.random_range(0..12) {
        0 => {
            subject(&mut b, rng);
            b.w("is", "AUX");
            object_phrase(&mut b, rng);
        }
        1 => {
            subject(&mut b, rng);
            b.w("is", "AUX");
            if rng.random_bool(0.4) {
                b.w(pick(rng, DEGREE), "ADV");
            }
            b.w(pick(rng, ADJECTIVES), "ADJ");
        }
        2 => {
            subject(&mut b, rng);
            b.w("is", "AUX").w(pick(rng, PREPS), "ADP").w("the", "DET").w(pick(rng, PLACES), "NOUN");
        }
        3 => {
            subject(&mut b, rng);
            b.w("is", "AUX").w(verb(rng)[2], "VERB");
            object_phrase(&mut b, rng);
        }
        4 => {
            b.w("there", "PRON").w("is", "AUX");
            object_phrase(&mut b, rng);
            b.w(pick(rng, PREPS), "ADP").w("the", "DET").w(pick(rng, PLACES), "NOUN");
        }
        5 => {
            subject(&mut b, rng);
            b.w("didn't", "AUX").w(verb(rng)[0], "VERB").w("any", "DET").w(pick(rng, THINGS), "NOUN");
        }
        6 => {
            subject(&mut b, rng);
            b.w("doesn't", "AUX").w(verb(rng)[0], "VERB").w("anything", "PRON");
        }
        7 => {
            let head = pick(rng, PEOPLE);
            b.w("the", "DET").w(head, "NOUN").w("of", "ADP").w("the", "DET").w(pick(rng, PEOPLE), "NOUN");
            b.w("I", "PRON").w(verb(rng)[1], "VERB").w("is", "AUX");
            object_phrase(&mut b, rng);
        }
        8 => {
            subject(&mut b, rng);
            let plural = format!("{}s", object_noun(rng));
            b.w(verb(rng)[1], "VERB").w(pick(rng, NUMBERS), "NUM").w(&plural, "NOUN");
        }
        9 => {
            b.w("the", "DET").w(object_noun(rng), "NOUN").w("is", "AUX").w(pick(rng, ADJECTIVES), "ADJ");
            b.w(",", "PUNCT").w("isn't", "AUX").w("it", "PRON").w("?", "PUNCT");
        }
        10 => {
            let p = pick(rng, SINGULAR_PRONOUNS);
            b.w(p, "PRON").w(verb(rng)[3], "VERB");
            object_phrase(&mut b, rng);
            b.w(",", "PUNCT").w("doesn't", "AUX").w(p, "PRON").w("?", "PUNCT");
        }
        _ => {
            b.w("they", "PRON").w("are", "AUX").w(verb(rng)[2], "VERB");
            b.w(pick(rng, PREPS), "ADP").w("the", "DET").w(pick(rng, PLACES), "NOUN");
        }
    }
    if !matches!(b.toks.last(), Some((w, _)) if w == "?") {
        b.w(".", "PUNCT");
    }
    b.finish()
}

/// Whether a sentence mentions an animal.
pub fn animal_label(s: &TokenSentence) -> bool {
    s.tokens.iter().any(|t| {
        let w = t.to_lowercase();
        ANIMALS.iter().any(|a| w == *a || w.strip_suffix('s') == Some(a))
    })
}

/// `n` sentences from a seeded stream.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<TokenSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_sentence(&mut rng)).collect()
}

pub fn labeled_toy_corpus(n: usize, seed: u64) -> Vec<LabeledSentence> {
    toy_corpus(n, seed)
        .into_iter()
        .map(|sentence| LabeledSentence { label: animal_label(&sentence), sentence })
        .collect()
}

/// Every word the grammar can emit, in a fixed order. Useful for building a
/// closed vocabulary.
pub fn toy_lexicon() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let closed = [
        "the", "a", "an", "one", "is", "are", "isn't", "didn't", "doesn't", "never", "innit", "there", "it",
        "i", "he", "she", "they", "of", "'s", "any", "no", "anything", "nothing", ".", ",", "?",
    ];
    words.extend(closed.iter().map(|s| s.to_string()));
    for list in [ANIMALS, THINGS, PEOPLE, PLACES] {
        for w in list {
            words.push(w.to_string());
            words.push(format!("{w}s"));
        }
    }
    for list in [ADJECTIVES, PREPS, NUMBERS, DEGREE] {
        words.extend(list.iter().map(|s| s.to_string()));
    }
    for forms in VERBS {
        words.extend(forms.iter().map(|s| s.to_string()));
    }
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(w.clone()));
    words
}
