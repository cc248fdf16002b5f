//! Verb/object diversity statistics over generated instructions.
//!
//! This is a heuristic, not a parser. The verb is the first token found in a
//! closed list of common imperative verbs. The object is the short run of
//! tokens right after it, cut at punctuation, prepositions, conjunctions and
//! participles. Instructions without a listed verb land in `"other"`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::index::term_spans;

pub const OTHER_VERB: &str = "other";
pub const MAX_OBJECT_TOKENS: usize = 3;
pub const DEFAULT_TOP_KEYWORDS: usize = 50;

const VERBS: &[&str] = &[
    "accept", "add", "adjust", "advise", "allocate", "analyse", "analyze", "annotate", "answer",
    "apply", "approximate", "argue", "arrange", "ask", "assess", "assign", "assume", "build",
    "calculate", "categorise", "categorize", "change", "check", "choose", "cite", "clarify",
    "classify", "cluster", "code", "collect", "combine", "compare", "compile", "complete",
    "compose", "compute", "conclude", "condense", "confirm", "connect", "consider", "construct",
    "contrast", "convert", "correct", "count", "create", "critique", "decide", "decode",
    "deduce", "define", "delete", "demonstrate", "derive", "describe", "design", "detect",
    "determine", "develop", "diagnose", "differentiate", "discover", "discuss", "distinguish",
    "divide", "document", "draft", "draw", "edit", "elaborate", "eliminate", "emphasize",
    "encode", "enumerate", "estimate", "evaluate", "examine", "explain", "explore", "express",
    "extract", "fill", "filter", "find", "fix", "flag", "focus", "forecast", "formulate",
    "gather", "generate", "give", "group", "guess", "highlight", "hypothesize", "identify",
    "illustrate", "improve", "include", "indicate", "infer", "inform", "insert", "interpret",
    "investigate", "judge", "justify", "label", "link", "list", "locate", "make", "map",
    "mark", "match", "measure", "mention", "merge", "modify", "name", "normalize", "note",
    "obtain", "offer", "order", "organize", "outline", "paraphrase", "parse", "pick", "pinpoint",
    "plan", "point", "predict", "prepare", "prescribe", "present", "prioritize", "produce",
    "propose", "provide", "rank", "rate", "read", "recall", "recognize", "recommend", "record",
    "reduce", "refine", "reformulate", "relate", "remove", "rephrase", "replace", "report",
    "represent", "resolve", "respond", "restate", "retrieve", "review", "revise", "rewrite",
    "say", "score", "select", "separate", "show", "simplify", "solve", "sort", "specify",
    "spot", "state", "suggest", "summarise", "summarize", "supply", "tag", "tell", "test",
    "transcribe", "transform", "translate", "underline", "understand", "use", "validate",
    "verify", "write",
];

const OBJECT_BREAKS: &[&str] = &[
    "about", "above", "across", "after", "against", "along", "among", "and", "around", "as",
    "at", "based", "because", "before", "below", "between", "but", "by", "for", "from", "given",
    "if", "in", "into", "is", "are", "of", "on", "onto", "or", "over", "per", "so", "such",
    "than", "that", "then", "through", "to", "toward", "towards", "under", "using", "via",
    "was", "were", "what", "when", "where", "whether", "which", "while", "who", "whose", "why",
    "with", "within", "without",
];

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "been",
    "being", "between", "both", "but", "by", "can", "could", "did", "do", "does", "during",
    "each", "for", "from", "had", "has", "have", "he", "her", "his", "how", "i", "if", "in",
    "into", "is", "it", "its", "may", "more", "most", "no", "not", "of", "on", "one", "or",
    "other", "our", "over", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "through", "to", "two",
    "under", "up", "was", "we", "were", "what", "when", "which", "while", "who", "will", "with",
    "within", "would", "you", "your",
];

static VERB_SET: LazyLock<BTreeSet<&'static str>> = LazyLock::new(|| VERBS.iter().copied().collect());
static BREAK_SET: LazyLock<BTreeSet<&'static str>> =
    LazyLock::new(|| OBJECT_BREAKS.iter().copied().collect());
static STOP_SET: LazyLock<BTreeSet<&'static str>> = LazyLock::new(|| STOPWORDS.iter().copied().collect());

pub fn verb_list() -> &'static [&'static str] {
    VERBS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbCount {
    pub verb: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    pub verb: String,
    pub object: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordCount {
    pub term: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub num_instructions: usize,
    pub verbs: Vec<VerbCount>,
    pub pairs: Vec<PairCount>,
    pub context_keywords: Vec<KeywordCount>,
}

fn looks_like_participle(word: &str) -> bool {
    word.len() > 4 && (word.ends_with("ed") || word.ends_with("ing"))
}

/// Returns `(verb, object)`; the verb is [`OTHER_VERB`] when none is listed.
pub fn extract_verb_object(instruction: &str) -> (String, String) {
    let spans = term_spans(instruction);
    let words: Vec<String> = spans
        .iter()
        .map(|&(s, e)| instruction[s..e].to_lowercase())
        .collect();
    let Some(vi) = words.iter().position(|w| VERB_SET.contains(w.as_str())) else {
        return (OTHER_VERB.to_string(), String::new());
    };
    let mut object = Vec::new();
    for j in vi + 1..words.len() {
        // Anything but whitespace between two terms ends the chunk.
        let gap = &instruction[spans[j - 1].1..spans[j].0];
        if !gap.chars().all(char::is_whitespace) {
            break;
        }
        let w = words[j].as_str();
        if BREAK_SET.contains(w) || looks_like_participle(w) {
            break;
        }
        object.push(w);
        if object.len() == MAX_OBJECT_TOKENS {
            break;
        }
    }
    (words[vi].clone(), object.join(" "))
}

fn ranked<K: Ord + Clone>(counts: HashMap<K, usize>) -> Vec<(K, usize)> {
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// `items` yields `(instruction, context)` pairs.
pub fn compute_stats<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>, top_keywords: usize) -> StatsReport {
    let mut n = 0;
    let mut verbs: HashMap<String, usize> = HashMap::new();
    let mut pairs: HashMap<(String, String), usize> = HashMap::new();
    let mut keywords: HashMap<String, usize> = HashMap::new();
    for (instruction, context) in items {
        n += 1;
        let (verb, object) = extract_verb_object(instruction);
        *verbs.entry(verb.clone()).or_default() += 1;
        *pairs.entry((verb, object)).or_default() += 1;
        for (s, e) in term_spans(context) {
            let term = context[s..e].to_lowercase();
            if term.len() > 1 && !STOP_SET.contains(term.as_str()) && !term.chars().all(|c| c.is_ascii_digit()) {
                *keywords.entry(term).or_default() += 1;
            }
        }
    }
    let mut context_keywords: Vec<KeywordCount> = ranked(keywords)
        .into_iter()
        .map(|(term, count)| KeywordCount { term, count })
        .collect();
    context_keywords.truncate(top_keywords);
    StatsReport {
        num_instructions: n,
        verbs: ranked(verbs)
            .into_iter()
            .map(|(verb, count)| VerbCount { verb, count })
            .collect(),
        pairs: ranked(pairs)
            .into_iter()
            .map(|((verb, object), count)| PairCount { verb, object, count })
            .collect(),
        context_keywords,
    }
}

impl StatsReport {
    /// `verb,object,count` rows, ranked, for sunburst-style plots.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("verb,object,count\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{},{}\n", p.verb, p.object, p.count));
        }
        out
    }

    /// Number of distinct objects per verb.
    pub fn object_diversity(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for p in &self.pairs {
            *m.entry(p.verb.as_str()).or_default() += 1;
        }
        m
    }
}
