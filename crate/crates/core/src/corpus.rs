//! Tokenisation, vocabularies, windowed co-occurrence counting and the PMI
//! word-pair lexicon.
//!
//! PMI uses natural logs with `p(w1 w2) = pair(w1, w2) / total_pairs` and
//! `p(w) = unigram(w) / total_tokens`. Pairs are ordered: `(w1, w2)` counts
//! occurrences of `w2` within `window` tokens after `w1` in one sentence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Function words never admitted as concepts.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "by",
    "from", "up", "down", "into", "onto", "over", "under", "near", "next", "is", "are", "was",
    "were", "be", "been", "being", "has", "have", "had", "do", "does", "it", "its", "this",
    "that", "these", "those", "there", "their", "his", "her", "some", "while", "as", "very",
    "other", "who", "which",
];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

/// Lowercases, strips punctuation from every whitespace-separated token and
/// drops tokens that were pure punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| {
            tok.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Word <-> id map. The four special tokens hold ids 0..4; the rest follow
/// in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from tokenised sentences, keeping words seen at least
    /// `min_count` times.
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Self {
        let counts = word_counts(corpus);
        let words = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count as u64)
            .map(|(w, _)| w.to_string());
        Self::with_words(words).expect("corpus tokens never collide with special tokens")
    }

    /// Specials followed by `words` in the given order.
    pub fn with_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return invalid(format!("duplicate vocabulary entry {w:?}"));
            }
        }
        Ok(Self { words: all, index })
    }

    /// Parses the one-word-per-line format written by [`Vocabulary::write`].
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if lines.len() < 4 || lines[..4] != SPECIAL_TOKENS {
            return Err(Error::Parse("vocabulary must start with the special tokens".into()));
        }
        Self::with_words(lines.into_iter().skip(4))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// `BOS tokens.. EOS`
    pub fn encode_caption(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    /// Joins the non-special tokens with spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i) || i == UNK)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn word_counts(corpus: &[Vec<String>]) -> BTreeMap<&str, u64> {
    let mut counts = BTreeMap::new();
    for tok in corpus.iter().flatten() {
        *counts.entry(tok.as_str()).or_insert(0) += 1;
    }
    counts
}

/// The subset of the vocabulary that can be predicted as a concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    concept_ids: Vec<usize>,
    position: HashMap<usize, usize>,
    min_freq: usize,
}

impl ConceptVocabulary {
    /// Words with corpus frequency `>= min_freq` that are neither stop words
    /// nor special tokens, ordered by word id.
    pub fn build(corpus: &[Vec<String>], vocab: &Vocabulary, min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        if min_freq == 0 {
            return invalid("min_freq must be at least 1");
        }
        let ids: BTreeSet<usize> = word_counts(corpus)
            .into_iter()
            .filter(|(w, c)| *c >= min_freq as u64 && !is_stop_word(w))
            .filter_map(|(w, _)| vocab.get(w))
            .filter(|&id| !Vocabulary::is_special(id))
            .collect();
        if ids.is_empty() {
            return Err(Error::Empty("concept vocabulary"));
        }
        Ok(Self::from_ids(ids.into_iter().collect(), min_freq))
    }

    pub fn from_ids(mut concept_ids: Vec<usize>, min_freq: usize) -> Self {
        concept_ids.sort_unstable();
        concept_ids.dedup();
        let position = concept_ids.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Self {
            concept_ids,
            position,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_ids.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Word ids, ascending; concept index `i` is `ids()[i]`.
    pub fn ids(&self) -> &[usize] {
        &self.concept_ids
    }

    pub fn word_id(&self, concept: usize) -> usize {
        self.concept_ids[concept]
    }

    pub fn index_of(&self, word_id: usize) -> Option<usize> {
        self.position.get(&word_id).copied()
    }

    pub fn contains(&self, word_id: usize) -> bool {
        self.position.contains_key(&word_id)
    }
}

/// Multi-hot vector over the concept vocabulary marking the concepts that
/// occur in `caption`.
pub fn extract_concept_labels(caption: &[usize], cv: &ConceptVocabulary) -> Vec<f64> {
    let mut labels = vec![0.0; cv.len()];
    for &id in caption {
        if let Some(i) = cv.index_of(id) {
            labels[i] = 1.0;
        }
    }
    labels
}

/// Unigram and ordered windowed pair counts over a corpus of id sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CooccurrenceTable {
    pub unigram: BTreeMap<usize, u64>,
    pub pair: BTreeMap<(usize, usize), u64>,
    pub total_tokens: u64,
    pub total_pairs: u64,
    pub window: usize,
}

impl CooccurrenceTable {
    pub fn unigram(&self, w: usize) -> u64 {
        self.unigram.get(&w).copied().unwrap_or(0)
    }

    pub fn pair(&self, w1: usize, w2: usize) -> u64 {
        self.pair.get(&(w1, w2)).copied().unwrap_or(0)
    }

    /// Adds another table's counts (same window).
    pub fn merge(&mut self, other: &CooccurrenceTable) {
        debug_assert_eq!(self.window, other.window);
        for (&w, &c) in &other.unigram {
            *self.unigram.entry(w).or_insert(0) += c;
        }
        for (&p, &c) in &other.pair {
            *self.pair.entry(p).or_insert(0) += c;
        }
        self.total_tokens += other.total_tokens;
        self.total_pairs += other.total_pairs;
    }
}

/// For each position `i`, counts the ordered pair `(s[i], s[j])` for every
/// `j` in `(i, i + window]` within the same sentence.
pub fn count_cooccurrence(corpus: &[Vec<usize>], window: usize) -> Result<CooccurrenceTable> {
    if window == 0 {
        return invalid("co-occurrence window must be at least 1");
    }
    let mut t = CooccurrenceTable {
        window,
        ..Default::default()
    };
    for sentence in corpus {
        for (i, &w1) in sentence.iter().enumerate() {
            *t.unigram.entry(w1).or_insert(0) += 1;
            t.total_tokens += 1;
            for &w2 in sentence.iter().skip(i + 1).take(window) {
                *t.pair.entry((w1, w2)).or_insert(0) += 1;
                t.total_pairs += 1;
            }
        }
    }
    Ok(t)
}

/// Counts `shards` contiguous slices of the corpus on separate threads and
/// merges them. Identical to [`count_cooccurrence`].
pub fn count_cooccurrence_sharded(
    corpus: &[Vec<usize>],
    window: usize,
    shards: usize,
) -> Result<CooccurrenceTable> {
    let shards = shards.clamp(1, corpus.len().max(1));
    if shards == 1 {
        return count_cooccurrence(corpus, window);
    }
    let chunk = corpus.len().div_ceil(shards);
    let parts: Vec<Result<CooccurrenceTable>> = std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|c| s.spawn(move || count_cooccurrence(c, window)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("counting thread panicked"))
            .collect()
    });
    let mut table = CooccurrenceTable {
        window,
        ..Default::default()
    };
    for part in parts {
        table.merge(&part?);
    }
    Ok(table)
}

/// `ln(p(w1 w2) / (p(w1) p(w2)))`; negative infinity when the pair never
/// occurs.
pub fn pmi(table: &CooccurrenceTable, w1: usize, w2: usize) -> Result<f64> {
    let (u1, u2) = (table.unigram(w1), table.unigram(w2));
    if u1 == 0 {
        return Err(Error::UnseenWord(w1));
    }
    if u2 == 0 {
        return Err(Error::UnseenWord(w2));
    }
    let joint = table.pair(w1, w2);
    if joint == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let n = table.total_tokens as f64;
    let p12 = joint as f64 / table.total_pairs as f64;
    let p1 = u1 as f64 / n;
    let p2 = u2 as f64 / n;
    Ok((p12 / (p1 * p2)).ln())
}

/// Ordered word pairs whose PMI reaches the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PmiLexicon {
    entries: BTreeMap<(usize, usize), f64>,
    pub threshold: f64,
    pub window: usize,
}

impl PmiLexicon {
    pub fn from_entries(
        entries: BTreeMap<(usize, usize), f64>,
        threshold: f64,
        window: usize,
    ) -> Self {
        Self {
            entries,
            threshold,
            window,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, w1: usize, w2: usize) -> Option<f64> {
        self.entries.get(&(w1, w2)).copied()
    }

    pub fn contains(&self, w1: usize, w2: usize) -> bool {
        self.entries.contains_key(&(w1, w2))
    }

    /// Entries in `(w1, w2)` id order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Drops pairs involving a word for which `keep` is false.
    pub fn retain_words(&mut self, mut keep: impl FnMut(usize) -> bool) {
        self.entries.retain(|&(a, b), _| keep(a) && keep(b));
    }

    /// TSV with header `w1\tw2\tpmi`, rows sorted by the word strings, scores
    /// printed with six decimals.
    pub fn write_tsv<W: Write>(&self, vocab: &Vocabulary, mut w: W) -> Result<()> {
        let mut rows: Vec<(&str, &str, f64)> = self
            .entries
            .iter()
            .map(|(&(a, b), &s)| (vocab.word(a), vocab.word(b), s))
            .collect();
        rows.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        writeln!(w, "w1\tw2\tpmi")?;
        for (a, b, s) in rows {
            writeln!(w, "{a}\t{b}\t{s:.6}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(
        r: R,
        vocab: &Vocabulary,
        threshold: f64,
        window: usize,
    ) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h == "w1\tw2\tpmi" => {}
            _ => return Err(Error::Parse("lexicon header must be w1\\tw2\\tpmi".into())),
        }
        let mut entries = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [a, b, s] = cols[..] else {
                return Err(Error::Parse(format!("lexicon line {}: expected 3 columns", n + 2)));
            };
            let lookup = |w: &str| {
                vocab
                    .get(w)
                    .ok_or_else(|| Error::Parse(format!("lexicon word {w:?} not in vocabulary")))
            };
            let score: f64 = s
                .parse()
                .map_err(|_| Error::Parse(format!("lexicon line {}: bad score {s:?}", n + 2)))?;
            entries.insert((lookup(a)?, lookup(b)?), score);
        }
        Ok(Self::from_entries(entries, threshold, window))
    }
}

/// Keeps every counted pair whose PMI is at least `threshold`.
pub fn build_lexicon(table: &CooccurrenceTable, threshold: f64) -> Result<PmiLexicon> {
    if threshold.is_nan() {
        return invalid("lexicon threshold is NaN");
    }
    let mut entries = BTreeMap::new();
    for &(w1, w2) in table.pair.keys() {
        let score = pmi(table, w1, w2)?;
        if score >= threshold {
            entries.insert((w1, w2), score);
        }
    }
    Ok(PmiLexicon::from_entries(entries, threshold, table.window))
}

/// Tokenises, indexes and counts a caption corpus, returning the vocabulary,
/// the concept vocabulary and the lexicon. Pairs touching a word seen fewer
/// than `min_freq` times are left out of the lexicon.
pub fn lexicon_from_captions(
    captions: &[String],
    window: usize,
    threshold: f64,
    min_freq: usize,
) -> Result<(Vocabulary, ConceptVocabulary, PmiLexicon)> {
    let tokens: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let vocab = Vocabulary::build(&tokens, 1);
    let concepts = ConceptVocabulary::build(&tokens, &vocab, min_freq)?;
    let ids: Vec<Vec<usize>> = tokens.iter().map(|t| vocab.encode(t)).collect();
    let table = count_cooccurrence(&ids, window)?;
    let mut lexicon = build_lexicon(&table, threshold)?;
    lexicon.retain_words(|w| table.unigram(w) >= min_freq as u64);
    Ok((vocab, concepts, lexicon))
}
