//! Line-delimited JSON datasets and the vocabularies built from them.

use std::io::{BufRead, Write};

use super::synthetic::Record;
use crate::autodiff::Tensor;
use crate::captioner::io::roundtrip_lexicon;
use crate::captioner::CaptionSample;
use crate::corpus::{lexicon_from_captions, tokenize, ConceptVocabulary, PmiLexicon, Vocabulary};
use crate::error::{Error, Result};

pub fn write_jsonl<W: Write>(records: &[Record], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("dataset line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(out)
}

/// Vocabulary, concept vocabulary and lexicon learned from the captions of
/// `records`. The lexicon is passed through its TSV form.
pub fn build_artifacts(
    records: &[Record],
    window: usize,
    threshold: f64,
    min_freq: usize,
) -> Result<(Vocabulary, ConceptVocabulary, PmiLexicon)> {
    let captions: Vec<String> = records.iter().map(|r| r.caption.clone()).collect();
    let (vocab, cv, lex) = lexicon_from_captions(&captions, window, threshold, min_freq)?;
    let lex = roundtrip_lexicon(&lex, &vocab, threshold, window)?;
    Ok((vocab, cv, lex))
}

pub fn record_features(r: &Record) -> Result<Tensor> {
    let s = r.features.len();
    let d = r.features.first().map_or(0, Vec::len);
    if s == 0 || d == 0 || r.features.iter().any(|row| row.len() != d) {
        return Err(Error::Parse("features must be a non-empty rectangular array".into()));
    }
    Tensor::new(&[s, d], r.features.concat())
}

pub fn to_samples(records: &[Record], vocab: &Vocabulary, cv: &ConceptVocabulary) -> Result<Vec<CaptionSample>> {
    records
        .iter()
        .map(|r| {
            let caption = vocab.encode_caption(&tokenize(&r.caption));
            Ok(CaptionSample::new(record_features(r)?, caption, cv))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{generate_dataset, SyntheticSpec};

    #[test]
    fn jsonl_round_trip_is_byte_stable() {
        let data = generate_dataset(&SyntheticSpec {
            n_samples: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut a = Vec::new();
        write_jsonl(&data.records, &mut a).unwrap();
        let back = read_jsonl(&a[..]).unwrap();
        assert_eq!(back, data.records);
        let mut b = Vec::new();
        write_jsonl(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_ragged_and_empty_input() {
        assert!(read_jsonl(&b""[..]).is_err());
        assert!(read_jsonl(&b"{\"features\": 1}\n"[..]).is_err());
        let r = Record {
            features: vec![vec![1.0, 2.0], vec![3.0]],
            caption: "a dog".into(),
        };
        assert!(record_features(&r).is_err());
    }
}
