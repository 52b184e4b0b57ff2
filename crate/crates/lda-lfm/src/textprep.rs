//! Review text preparation: tokenization pipeline, vocabulary building, and
//! per-item document aggregation (the topic-model corpus).
//!
//! Documents are built from TRAIN-set reviews only; one document per train
//! item, so the corpus index space equals the dense item index space.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ingest::Interaction;

/// Bundled English stopword list (one word per line).
pub const STOPWORDS_TEXT: &str = include_str!("data/stopwords.txt");

/// Bundled irregular-form lemma table (surface TAB lemma per line).
pub const LEMMAS_TEXT: &str = include_str!("data/lemmas.tsv");

/// The stopword set shipped with the crate.
pub fn standard_stopwords() -> HashSet<String> {
    STOPWORDS_TEXT.lines().map(|w| w.to_string()).collect()
}

/// Dictionary of irregular forms plus rule-based suffix stripping for
/// plural -s/-es, -ing, and -ed.
pub struct Lemmatizer {
    irregular: HashMap<String, String>,
}

impl Lemmatizer {
    /// The lemmatizer shipped with the crate.
    pub fn bundled() -> Self {
        let irregular = LEMMAS_TEXT
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let mut parts = l.splitn(2, '\t');
                let surface = parts.next().unwrap_or_default().to_string();
                let lemma = parts.next().unwrap_or_default().trim().to_string();
                (surface, lemma)
            })
            .collect();
        Lemmatizer { irregular }
    }

    /// Reduce a lowercase token to its lemma.
    pub fn lemma(&self, token: &str) -> String {
        if let Some(l) = self.irregular.get(token) {
            return l.clone();
        }
        if let Some(stripped) = strip_plural(token) {
            return stripped;
        }
        if let Some(stripped) = strip_suffix(token, "ing", 6) {
            return stripped;
        }
        if let Some(stripped) = strip_ed(token) {
            return stripped;
        }
        token.to_string()
    }
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn has_vowel(s: &str) -> bool {
    s.chars().any(is_vowel)
}

/// Plural rules: -ies -> -y, -sses/-xes/-zes/-ches/-shes -> drop "es",
/// plain -s dropped unless the word ends in -ss/-us/-is or is too short.
fn strip_plural(token: &str) -> Option<String> {
    if token.len() > 4 && token.ends_with("ies") {
        return Some(format!("{}y", &token[..token.len() - 3]));
    }
    if token.len() > 4 && token.ends_with("es") {
        let stem = &token[..token.len() - 2];
        if stem.ends_with('s') || stem.ends_with('x') || stem.ends_with('z')
            || stem.ends_with("ch") || stem.ends_with("sh")
        {
            return Some(stem.to_string());
        }
    }
    if token.len() > 3
        && token.ends_with('s')
        && !token.ends_with("ss")
        && !token.ends_with("us")
        && !token.ends_with("is")
    {
        return Some(token[..token.len() - 1].to_string());
    }
    None
}

/// Shared guards for -ing/-ed stripping: undouble a doubled final consonant,
/// or restore a dropped final 'e' after a consonant-vowel-consonant stem.
fn fix_stem(stem: &str) -> Option<String> {
    if !has_vowel(stem) {
        return None; // "str" from "string" and friends: leave the token alone
    }
    let chars: Vec<char> = stem.chars().collect();
    let n = chars.len();
    if n >= 2 && chars[n - 1] == chars[n - 2] {
        let c = chars[n - 1];
        if matches!(c, 'b' | 'd' | 'g' | 'm' | 'n' | 'p' | 'r' | 't') {
            return Some(stem[..stem.len() - 1].to_string());
        }
    }
    if n >= 3 {
        let (a, b, c) = (chars[n - 3], chars[n - 2], chars[n - 1]);
        if !is_vowel(a) && is_vowel(b) && !is_vowel(c) && !matches!(c, 'w' | 'x' | 'y') {
            return Some(format!("{stem}e"));
        }
    }
    Some(stem.to_string())
}

fn strip_suffix(token: &str, suffix: &str, min_len: usize) -> Option<String> {
    if token.len() >= min_len && token.ends_with(suffix) {
        let stem = &token[..token.len() - suffix.len()];
        return fix_stem(stem);
    }
    None
}

fn strip_ed(token: &str) -> Option<String> {
    if token.len() > 4 && token.ends_with("ied") {
        return Some(format!("{}y", &token[..token.len() - 3]));
    }
    strip_suffix(token, "ed", 5)
}

/// Split into maximal runs of alphanumeric characters and runs of other
/// non-whitespace characters (whitespace is discarded).
fn segment(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    let mut word = false;
    for (idx, c) in raw.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(&raw[s..idx]);
            }
            continue;
        }
        let w = c.is_alphanumeric();
        match start {
            Some(s) if w != word => {
                out.push(&raw[s..idx]);
                start = Some(idx);
                word = w;
            }
            Some(_) => {}
            None => {
                start = Some(idx);
                word = w;
            }
        }
    }
    if let Some(s) = start {
        out.push(&raw[s..]);
    }
    out
}

/// The cleaning pipeline, in this exact order: tokenize, lowercase, drop
/// stopwords and one-character tokens, strip non-letter characters (dropping
/// tokens that become empty), lemmatize.
pub fn preprocess_text(
    raw: &str,
    stopwords: &HashSet<String>,
    lemmatizer: &Lemmatizer,
) -> Vec<String> {
    segment(raw)
        .into_iter()
        .map(|t| t.to_lowercase())
        .filter(|t| t.chars().count() > 1 && !stopwords.contains(t.as_str()))
        .filter_map(|t| {
            let letters: String = t.chars().filter(|c| c.is_alphabetic()).collect();
            if letters.chars().count() > 1 {
                Some(letters)
            } else {
                None
            }
        })
        .map(|t| lemmatizer.lemma(&t))
        .collect()
}

/// Token -> index map over the most frequent train tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Top-`v_target` tokens by total corpus frequency; ties break
/// lexicographically so two builds over the same corpus are identical.
pub fn build_vocabulary<'a, I>(docs: I, v_target: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a [String]>,
{
    assert!(v_target >= 1, "vocabulary target must be >= 1");
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for tok in doc {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(v_target);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// All in-vocabulary words of one item's train reviews, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDocument {
    /// Dense item id; doubles as the document index.
    pub item: usize,
    /// Vocabulary indices in (timestamp, review-internal) order.
    pub words: Vec<usize>,
    pub source_review_count: usize,
}

/// One preprocessed train review, tagged with where it came from.
#[derive(Debug, Clone)]
pub struct PreparedReview {
    pub item: usize,
    pub timestamp: i64,
    /// Position in the train list, the tie-break for equal timestamps.
    pub position: usize,
    pub tokens: Vec<String>,
}

/// Run the cleaning pipeline over every train review.
pub fn preprocess_train_reviews(
    train: &[Interaction],
    item_index: &IndexMap<String, usize>,
    stopwords: &HashSet<String>,
    lemmatizer: &Lemmatizer,
) -> Vec<PreparedReview> {
    train
        .iter()
        .enumerate()
        .map(|(position, x)| PreparedReview {
            item: item_index[x.item_id.as_str()],
            timestamp: x.timestamp,
            position,
            tokens: preprocess_text(&x.review_text, stopwords, lemmatizer),
        })
        .collect()
}

/// One document per train item: reviews sorted by (timestamp, position),
/// words mapped to vocabulary indices, out-of-vocabulary words dropped.
/// Items whose reviews yield no in-vocabulary word keep an empty document.
pub fn aggregate_item_documents(
    reviews: &[PreparedReview],
    n_items: usize,
    vocab: &Vocabulary,
) -> Vec<ItemDocument> {
    let mut per_item: Vec<Vec<&PreparedReview>> = vec![Vec::new(); n_items];
    for r in reviews {
        per_item[r.item].push(r);
    }
    per_item
        .into_iter()
        .enumerate()
        .map(|(item, mut rs)| {
            rs.sort_by_key(|r| (r.timestamp, r.position));
            let words = rs
                .iter()
                .flat_map(|r| r.tokens.iter())
                .filter_map(|t| vocab.get(t))
                .collect();
            ItemDocument {
                item,
                words,
                source_review_count: rs.len(),
            }
        })
        .collect()
}

/// The full text-preparation step the CLI runs after splitting.
pub fn prepare_corpus(
    train: &[Interaction],
    item_index: &IndexMap<String, usize>,
    v_target: usize,
) -> (Vocabulary, Vec<ItemDocument>) {
    let stopwords = standard_stopwords();
    let lemmatizer = Lemmatizer::bundled();
    let reviews = preprocess_train_reviews(train, item_index, &stopwords, &lemmatizer);
    let vocab = build_vocabulary(reviews.iter().map(|r| r.tokens.as_slice()), v_target);
    let docs = aggregate_item_documents(&reviews, item_index.len(), &vocab);
    (vocab, docs)
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const DOCS_FILE: &str = "docs.txt";

/// Write the vocabulary, one token per line in rank order.
pub fn write_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in vocab.tokens() {
        writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.is_empty() {
            tokens.push(line);
        }
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// Write documents as `item_id w0 w1 ...`, one line per item.
pub fn write_documents(docs: &[ItemDocument], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        write!(w, "{}", d.item).map_err(|e| Error::io(path, e))?;
        for word in &d.words {
            write!(w, " {word}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_documents(path: &Path) -> Result<Vec<ItemDocument>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let item: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format(path, format!("line {}: bad item id", lineno + 1)))?;
        let words = fields
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| Error::format(path, format!("line {}: bad word index", lineno + 1)))
            })
            .collect::<Result<Vec<usize>>>()?;
        docs.push(ItemDocument {
            item,
            words,
            // Not stored on disk; the corpus file only carries word indices.
            source_review_count: 0,
        });
    }
    Ok(docs)
}
