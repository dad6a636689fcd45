//! Model directories: parameters, config, vocabularies and lexicon.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::model::Captioner;
use crate::atomic::write_atomic;
use crate::corpus::{ConceptVocabulary, PmiLexicon, Vocabulary};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "model.config";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONCEPTS_FILE: &str = "concepts.txt";
pub const LEXICON_FILE: &str = "lexicon.tsv";

pub fn write_concepts<W: Write>(cv: &ConceptVocabulary, vocab: &Vocabulary, mut w: W) -> Result<()> {
    for &id in cv.ids() {
        writeln!(w, "{}", vocab.word(id))?;
    }
    Ok(())
}

pub fn read_concepts<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<ConceptVocabulary> {
    let mut ids = Vec::new();
    for line in r.lines() {
        let line = line?;
        let word = line.trim();
        if word.is_empty() {
            continue;
        }
        ids.push(
            vocab
                .get(word)
                .ok_or_else(|| Error::Parse(format!("concept {word:?} not in vocabulary")))?,
        );
    }
    if ids.is_empty() {
        return Err(Error::Empty("concept vocabulary"));
    }
    Ok(ConceptVocabulary::from_ids(ids, 1))
}

/// The lexicon as it reads back from its TSV form, so a model sees the same
/// scores in training and after loading.
pub fn roundtrip_lexicon(lexicon: &PmiLexicon, vocab: &Vocabulary, threshold: f64, window: usize) -> Result<PmiLexicon> {
    let mut buf = Vec::new();
    lexicon.write_tsv(vocab, &mut buf)?;
    PmiLexicon::read_tsv(&buf[..], vocab, threshold, window)
}

pub fn save(model: &Captioner, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CHECKPOINT_FILE), |w| model.store.write_checkpoint(w))?;
    write_atomic(&dir.join(CONFIG_FILE), |w| model.config.write(w))?;
    write_atomic(&dir.join(VOCAB_FILE), |w| model.vocab().write(w))?;
    write_atomic(&dir.join(CONCEPTS_FILE), |w| {
        write_concepts(model.concept_vocab(), model.vocab(), w)
    })?;
    write_atomic(&dir.join(LEXICON_FILE), |w| model.lexicon().write_tsv(model.vocab(), w))?;
    Ok(())
}

fn open(dir: &Path, name: &str) -> Result<BufReader<File>> {
    let path = dir.join(name);
    File::open(&path)
        .map(BufReader::new)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load(dir: &Path) -> Result<Captioner> {
    let config = ModelConfig::read(open(dir, CONFIG_FILE)?)?;
    let vocab = Vocabulary::read(open(dir, VOCAB_FILE)?)?;
    let concepts = read_concepts(open(dir, CONCEPTS_FILE)?, &vocab)?;
    let lexicon =
        PmiLexicon::read_tsv(open(dir, LEXICON_FILE)?, &vocab, config.threshold, config.window)?;
    let mut model = Captioner::new(config, vocab, concepts, lexicon)?;
    model.store.read_checkpoint(open(dir, CHECKPOINT_FILE)?)?;
    Ok(model)
}
