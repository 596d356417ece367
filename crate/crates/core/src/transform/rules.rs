//! Miniature catalog of morphosyntactic rewrite rules.
//!
//! Rule ids are eWAVE feature ids, so a real feature vector drives the
//! catalog directly. Each rule rewrites every match in a sentence and is run
//! to a fixpoint, which makes it idempotent on its own output.

use super::TokenSentence;

/// A deterministic token-level rewrite.
#[derive(Clone, Copy)]
pub struct RewriteRule {
    /// eWAVE feature id.
    pub id: &'static str,
    pub name: &'static str,
    step: fn(&TokenSentence) -> Option<TokenSentence>,
}

impl std::fmt::Debug for RewriteRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewriteRule")
            .field("id", &self.id)
            .field("name", &self.name)
            .finish()
    }
}

impl RewriteRule {
    pub fn applicable(&self, s: &TokenSentence) -> bool {
        (self.step)(s).is_some()
    }

    /// Rewrites all matches; returns the sentence unchanged when the rule
    /// does not apply.
    pub fn rewrite(&self, s: &TokenSentence) -> TokenSentence {
        let mut cur = s.clone();
        // Every step strictly shrinks the sentence or the set of matchable
        // tokens, so this terminates well before the bound.
        for _ in 0..=4 * s.len() + 4 {
            match (self.step)(&cur) {
                Some(next) => cur = next,
                None => return cur,
            }
        }
        cur
    }
}

/// The catalog in application order.
pub fn catalog() -> &'static [RewriteRule] {
    &CATALOG
}

pub fn rule_by_id(id: &str) -> Option<&'static RewriteRule> {
    CATALOG.iter().find(|r| r.id == id)
}

static CATALOG: [RewriteRule; 12] = [
    RewriteRule { id: "72", name: "group genitive", step: group_genitive },
    RewriteRule { id: "154", name: "negative concord", step: negative_concord },
    RewriteRule { id: "159", name: "never as past negator", step: never_negator },
    RewriteRule { id: "173", name: "existential it", step: existential_it },
    RewriteRule { id: "174", name: "drop aux be before progressive", step: drop_be_progressive },
    RewriteRule { id: "176", name: "drop copula before NP", step: drop_copula_np },
    RewriteRule { id: "177", name: "drop copula before AdjP", step: drop_copula_ap },
    RewriteRule { id: "178", name: "drop copula before locative", step: drop_copula_locative },
    RewriteRule { id: "62", name: "zero for definite article", step: zero_definite },
    RewriteRule { id: "66", name: "indefinite one", step: indefinite_one },
    RewriteRule { id: "56", name: "zero plural after quantifier", step: zero_plural_after_quantifier },
    RewriteRule { id: "165", name: "invariant tag innit", step: invariant_tag },
];

const DETERMINERS: &[&str] = &["the", "a", "an", "my", "his", "her", "their", "our", "your", "this", "that"];
const BE_PRESENT: &[&str] = &["is", "are", "am"];
const AUXILIARIES: &[&str] = &["is", "are", "am", "was", "were", "has", "have", "had", "will", "can"];
const NEGATED_AUX: &[&str] = &["don't", "doesn't", "didn't", "won't", "can't", "isn't", "aren't"];
const LOCATIVE: &[&str] = &["in", "at", "on", "near", "inside", "outside", "home", "here"];
const QUANTIFIERS: &[&str] = &["two", "three", "four", "five", "ten", "many", "several"];
const DEGREE: &[&str] = &["very", "really", "so", "too", "quite"];
const PRONOUNS: &[&str] = &["i", "you", "he", "she", "it", "we", "they"];

fn word(s: &TokenSentence, i: usize) -> Option<String> {
    s.tokens.get(i).map(|t| t.to_lowercase())
}

fn is_word(s: &TokenSentence, i: usize, set: &[&str]) -> bool {
    word(s, i).is_some_and(|w| set.contains(&w.as_str()))
}

fn tag(s: &TokenSentence, i: usize) -> Option<&str> {
    s.tags.as_ref().and_then(|t| t.get(i)).map(String::as_str)
}

fn is_punct(s: &TokenSentence, i: usize) -> bool {
    s.tokens
        .get(i)
        .is_some_and(|t| t.chars().all(|c| c.is_ascii_punctuation()))
}

fn is_noun(s: &TokenSentence, i: usize) -> bool {
    match tag(s, i) {
        Some(t) => t == "NOUN",
        None => {
            i < s.len()
                && !is_punct(s, i)
                && !is_word(s, i, DETERMINERS)
                && !is_word(s, i, AUXILIARIES)
                && !is_word(s, i, PRONOUNS)
                && !is_word(s, i, &["of"])
        }
    }
}

fn is_adjective(s: &TokenSentence, i: usize) -> bool {
    tag(s, i) == Some("ADJ")
}

fn is_progressive(s: &TokenSentence, i: usize) -> bool {
    let ing = word(s, i).is_some_and(|w| w.len() > 4 && w.ends_with("ing"));
    match tag(s, i) {
        Some(t) => t == "VERB" && ing,
        None => ing,
    }
}

fn is_aux_tok(s: &TokenSentence, i: usize) -> bool {
    match tag(s, i) {
        Some(t) => t == "AUX",
        None => is_word(s, i, AUXILIARIES),
    }
}

fn delete(s: &TokenSentence, i: usize) -> TokenSentence {
    let mut out = s.clone();
    out.tokens.remove(i);
    if let Some(t) = out.tags.as_mut() {
        t.remove(i);
    }
    out
}

fn replace(s: &TokenSentence, i: usize, with: &str) -> TokenSentence {
    let mut out = s.clone();
    out.tokens[i] = with.to_string();
    out
}

/// `the girlfriend of the man I met is …` → `the man I met 's girlfriend is …`
fn group_genitive(s: &TokenSentence) -> Option<TokenSentence> {
    let n = s.len();
    for i in 0..n.saturating_sub(4) {
        if !(is_word(s, i, DETERMINERS) && is_noun(s, i + 1) && is_word(s, i + 2, &["of"])) {
            continue;
        }
        let start = i + 3;
        if !is_word(s, start, DETERMINERS) {
            continue;
        }
        let Some(end) = (start + 1..n).find(|&j| is_aux_tok(s, j)) else {
            continue;
        };
        if end <= start + 1 || (start..end).any(|j| is_punct(s, j) || is_word(s, j, &["of"])) {
            continue;
        }
        let mut tokens: Vec<String> = s.tokens[..i].to_vec();
        tokens.extend_from_slice(&s.tokens[start..end]);
        tokens.push("'s".into());
        tokens.push(s.tokens[i + 1].clone());
        tokens.extend_from_slice(&s.tokens[end..]);
        let tags = s.tags.as_ref().map(|t| {
            let mut out: Vec<String> = t[..i].to_vec();
            out.extend_from_slice(&t[start..end]);
            out.push("PART".into());
            out.push(t[i + 1].clone());
            out.extend_from_slice(&t[end..]);
            out
        });
        return Some(TokenSentence { tokens, tags });
    }
    None
}

/// `he didn't see anything` → `he didn't see nothing`
fn negative_concord(s: &TokenSentence) -> Option<TokenSentence> {
    let neg = (0..s.len()).find(|&i| is_word(s, i, NEGATED_AUX))?;
    for j in neg + 1..s.len() {
        let w = word(s, j)?;
        let sub = match w.as_str() {
            "any" => "no",
            "anything" => "nothing",
            "anybody" | "anyone" => "nobody",
            "anywhere" => "nowhere",
            _ => continue,
        };
        return Some(replace(s, j, sub));
    }
    None
}

/// `she didn't come` → `she never come`
fn never_negator(s: &TokenSentence) -> Option<TokenSentence> {
    (0..s.len().saturating_sub(1))
        .find(|&i| is_word(s, i, &["didn't"]) && !is_punct(s, i + 1))
        .map(|i| replace(s, i, "never"))
}

/// `there is a dog in the garden` → `it is a dog in the garden`
fn existential_it(s: &TokenSentence) -> Option<TokenSentence> {
    (0..s.len().saturating_sub(1))
        .find(|&i| is_word(s, i, &["there"]) && is_word(s, i + 1, &["is", "are", "was", "were"]))
        .filter(|&i| i == 0 || !is_word(s, i - 1, BE_PRESENT))
        .map(|i| {
            let mut out = replace(s, i, if s.tokens[i].starts_with('T') { "It" } else { "it" });
            if let Some(t) = out.tags.as_mut() {
                t[i] = "PRON".into();
            }
            out
        })
}

fn drop_copula_when(s: &TokenSentence, next: impl Fn(&TokenSentence, usize) -> bool) -> Option<TokenSentence> {
    (1..s.len().saturating_sub(1))
        .find(|&i| is_word(s, i, BE_PRESENT) && next(s, i + 1))
        .map(|i| delete(s, i))
}

fn drop_be_progressive(s: &TokenSentence) -> Option<TokenSentence> {
    drop_copula_when(s, is_progressive)
}

fn drop_copula_np(s: &TokenSentence) -> Option<TokenSentence> {
    drop_copula_when(s, |s, j| is_word(s, j, DETERMINERS) && !is_word(s, j, &["that", "this"]))
}

fn drop_copula_ap(s: &TokenSentence) -> Option<TokenSentence> {
    drop_copula_when(s, |s, j| {
        is_adjective(s, j) || (is_word(s, j, DEGREE) && is_adjective(s, j + 1))
    })
}

fn drop_copula_locative(s: &TokenSentence) -> Option<TokenSentence> {
    drop_copula_when(s, |s, j| is_word(s, j, LOCATIVE))
}

/// Deletes `the` in front of a noun phrase.
fn zero_definite(s: &TokenSentence) -> Option<TokenSentence> {
    (0..s.len().saturating_sub(1))
        .find(|&i| is_word(s, i, &["the"]) && !is_punct(s, i + 1))
        .map(|i| {
            let mut out = delete(s, i);
            if i == 0 {
                capitalize_first(&mut out, &s.tokens[0]);
            }
            out
        })
}

fn capitalize_first(s: &mut TokenSentence, removed: &str) {
    if removed.starts_with(char::is_uppercase) {
        if let Some(t) = s.tokens.first_mut() {
            let mut c = t.chars();
            if let Some(f) = c.next() {
                *t = f.to_uppercase().chain(c).collect();
            }
        }
    }
}

/// `a dog` → `one dog`
fn indefinite_one(s: &TokenSentence) -> Option<TokenSentence> {
    (0..s.len().saturating_sub(1))
        .find(|&i| is_word(s, i, &["a", "an"]) && !is_punct(s, i + 1))
        .map(|i| {
            let mut out = replace(s, i, "one");
            if let Some(t) = out.tags.as_mut() {
                t[i] = "NUM".into();
            }
            out
        })
}

/// `two books` → `two book`
fn zero_plural_after_quantifier(s: &TokenSentence) -> Option<TokenSentence> {
    (0..s.len().saturating_sub(1))
        .find(|&i| {
            is_word(s, i, QUANTIFIERS)
                && tag(s, i + 1) == Some("NOUN")
                && word(s, i + 1).is_some_and(|w| w.len() > 2 && w.ends_with('s') && !w.ends_with("ss"))
        })
        .map(|i| {
            let mut out = s.clone();
            out.tokens[i + 1].pop();
            out
        })
}

/// `…, isn't it ?` → `…, innit ?`
fn invariant_tag(s: &TokenSentence) -> Option<TokenSentence> {
    let n = s.len();
    if n < 4 || s.tokens[n - 1] != "?" || s.tokens[n - 4] != "," {
        return None;
    }
    if !(is_word(s, n - 3, NEGATED_AUX) && is_word(s, n - 2, PRONOUNS)) {
        return None;
    }
    let mut out = delete(s, n - 2);
    out.tokens[n - 3] = "innit".into();
    if let Some(t) = out.tags.as_mut() {
        t[n - 3] = "PART".into();
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(s: &str) -> TokenSentence {
        TokenSentence::parse(s).unwrap()
    }

    fn apply(id: &str, s: &str) -> String {
        rule_by_id(id).unwrap().rewrite(&tagged(s)).text()
    }

    #[test]
    fn catalog_ids_are_unique() {
        let mut ids: Vec<_> = catalog().iter().map(|r| r.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), catalog().len());
    }

    #[test]
    fn group_genitive_example() {
        let s = "the|DET girlfriend|NOUN of|ADP the|DET man|NOUN I|PRON met|VERB is|AUX a|DET real|ADJ beauty|NOUN";
        assert_eq!(apply("72", s), "the man I met 's girlfriend is a real beauty");
        let untagged = "the girlfriend of the man I met is a real beauty";
        assert_eq!(apply("72", untagged), "the man I met 's girlfriend is a real beauty");
    }

    #[test]
    fn copula_rules() {
        assert_eq!(apply("176", "he|PRON is|AUX a|DET teacher|NOUN"), "he a teacher");
        assert_eq!(apply("177", "she|PRON is|AUX very|ADV smart|ADJ"), "she very smart");
        assert_eq!(apply("178", "she|PRON is|AUX at|ADP home|NOUN"), "she at home");
        assert_eq!(apply("174", "you|PRON are|AUX thinking|VERB"), "you thinking");
        // Copula before an adjective is not a noun phrase.
        assert_eq!(apply("176", "she|PRON is|AUX smart|ADJ"), "she is smart");
    }

    #[test]
    fn negation_rules() {
        assert_eq!(apply("154", "he won't do any harm"), "he won't do no harm");
        assert_eq!(apply("159", "he didn't come"), "he never come");
        assert_eq!(apply("165", "it is cold , isn't it ?"), "it is cold , innit ?");
    }

    #[test]
    fn article_and_plural_rules() {
        assert_eq!(apply("62", "The|DET dog|NOUN ate|VERB the|DET bone|NOUN"), "Dog ate bone");
        assert_eq!(apply("66", "I|PRON saw|VERB a|DET bird|NOUN"), "I saw one bird");
        assert_eq!(apply("56", "she|PRON bought|VERB two|NUM books|NOUN"), "she bought two book");
        assert_eq!(apply("173", "there|PRON is|AUX a|DET dog|NOUN"), "it is a dog");
    }
}
