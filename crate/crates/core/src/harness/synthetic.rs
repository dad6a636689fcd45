//! Synthetic captioning data with planted concepts.
//!
//! A small closed grammar produces captions such as "a little baby is
//! drinking milk". Every content word is a concept with a fixed prototype
//! vector; an image is a grid where each planted concept occupies one cell.
//! Each verb has a frequent default object ("drinking water") and rarer
//! alternatives ("drinking milk"), and objects of the same verb have similar
//! prototypes, so a decoder leaning on word statistics picks the default
//! where the image shows something else.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Upper bound on the number of distinct concept words.
    pub n_concepts: usize,
    /// How many caption templates are in use (1 to 3).
    pub n_templates: usize,
    pub n_samples: usize,
    pub feature_dim: usize,
    /// Cells in the flattened visual grid.
    pub grid_size: usize,
    pub noise_std: f64,
    /// Probability of each verb's default object.
    pub prior_weight: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_concepts: 25,
            n_templates: 3,
            n_samples: 200,
            feature_dim: 32,
            grid_size: 9,
            noise_std: 0.3,
            prior_weight: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return invalid("n_samples must be at least 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return invalid("noise_std must be a finite value >= 0");
        }
        if !(1..=TEMPLATES.len()).contains(&self.n_templates) {
            return invalid(format!("n_templates must be in 1..={}", TEMPLATES.len()));
        }
        if self.grid_size < 4 {
            return invalid("grid_size must hold four planted concepts");
        }
        if self.feature_dim == 0 {
            return invalid("feature_dim must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.prior_weight) {
            return invalid("prior_weight must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<Vec<f64>>,
    pub caption: String,
}

const ADJECTIVES: [&str; 4] = ["little", "young", "old", "happy"];
const AGENTS: [&str; 6] = ["baby", "girl", "boy", "dog", "man", "woman"];
/// Each verb with its objects; the first object is the frequent default.
const VERBS: [(&str, &[&str]); 4] = [
    ("drinking", &["water", "milk", "juice"]),
    ("eating", &["food", "apple", "pizza"]),
    ("holding", &["bag", "umbrella", "kite"]),
    ("riding", &["bike", "horse"]),
];
/// Words dropped, in order, when fewer concepts are requested. A verb goes
/// with its last object.
const TRIM_ORDER: [&str; 12] = [
    "happy", "woman", "juice", "pizza", "kite", "old", "man", "horse", "umbrella", "boy", "bike",
    "bag",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Template {
    /// a ADJ AGENT is VERB OBJ
    Full,
    /// a AGENT is VERB OBJ
    NoAdjective,
    /// a AGENT is VERB
    NoObject,
}

const TEMPLATES: [Template; 3] = [Template::Full, Template::NoAdjective, Template::NoObject];

/// The active word lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub adjectives: Vec<&'static str>,
    pub agents: Vec<&'static str>,
    pub verbs: Vec<(&'static str, Vec<&'static str>)>,
}

impl Grammar {
    /// The full grammar trimmed to about `n_concepts` words (at least 11, at
    /// most 25; one fewer when a verb leaves with its last object).
    pub fn with_size(n_concepts: usize) -> Self {
        let mut g = Self {
            adjectives: ADJECTIVES.to_vec(),
            agents: AGENTS.to_vec(),
            verbs: VERBS.iter().map(|(v, o)| (*v, o.to_vec())).collect(),
        };
        for word in TRIM_ORDER {
            if g.concepts().len() <= n_concepts {
                break;
            }
            g.adjectives.retain(|w| *w != word);
            g.agents.retain(|w| *w != word);
            for (_, objects) in &mut g.verbs {
                objects.retain(|w| *w != word);
            }
            g.verbs.retain(|(_, objects)| !objects.is_empty());
        }
        g
    }

    pub fn concepts(&self) -> Vec<&'static str> {
        let mut all: Vec<&str> = self.adjectives.clone();
        all.extend(&self.agents);
        for (v, objects) in &self.verbs {
            all.push(v);
            all.extend(objects);
        }
        all
    }

    /// Ordered word pairs that sit next to each other (ignoring stop words)
    /// in some template.
    pub fn adjacent_pairs(&self, n_templates: usize) -> BTreeSet<(String, String)> {
        let active = &TEMPLATES[..n_templates];
        let mut pairs = BTreeSet::new();
        let mut add = |a: &str, b: &str| pairs.insert((a.to_string(), b.to_string()));
        if active.contains(&Template::Full) {
            for a in &self.adjectives {
                for g in &self.agents {
                    add(a, g);
                }
            }
        }
        for g in &self.agents {
            for (v, objects) in &self.verbs {
                add(g, v);
                if active.iter().any(|t| *t != Template::NoObject) {
                    for o in objects {
                        add(v, o);
                    }
                }
            }
        }
        pairs
    }
}

struct Prototypes {
    words: Vec<&'static str>,
    vectors: Vec<Vec<f64>>,
}

impl Prototypes {
    /// Unit-variance random vectors; objects of one verb share a common
    /// component.
    fn new(grammar: &Grammar, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| normal.sample(rng)).collect() };
        let mut words = Vec::new();
        let mut vectors = Vec::new();
        for w in grammar.adjectives.iter().chain(&grammar.agents) {
            words.push(*w);
            vectors.push(draw(rng));
        }
        for (v, objects) in &grammar.verbs {
            words.push(*v);
            vectors.push(draw(rng));
            let shared = draw(rng);
            for o in objects {
                let own = draw(rng);
                words.push(*o);
                vectors.push(shared.iter().zip(&own).map(|(s, o)| 0.8 * s + 0.6 * o).collect());
            }
        }
        Self { words, vectors }
    }

    fn get(&self, word: &str) -> &[f64] {
        let i = self.words.iter().position(|w| *w == word).expect("word in grammar");
        &self.vectors[i]
    }
}

/// Samples and the caption corpus, one caption per line.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<Record>,
    pub grammar: Grammar,
}

impl SyntheticData {
    pub fn corpus(&self) -> String {
        self.records.iter().map(|r| format!("{}\n", r.caption)).collect()
    }

    pub fn captions(&self) -> Vec<String> {
        self.records.iter().map(|r| r.caption.clone()).collect()
    }
}

fn pick_object<R: Rng>(objects: &[&'static str], prior_weight: f64, rng: &mut R) -> &'static str {
    if objects.len() == 1 || rng.random_bool(prior_weight) {
        objects[0]
    } else {
        objects[1..].choose(rng).copied().expect("non-empty")
    }
}

/// Deterministic in `spec`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let grammar = Grammar::with_size(spec.n_concepts);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = Prototypes::new(&grammar, spec.feature_dim, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let templates = &TEMPLATES[..spec.n_templates];

    let mut records = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let template = *templates.choose(&mut rng).expect("non-empty");
        let agent = *grammar.agents.choose(&mut rng).expect("non-empty");
        let (verb, objects) = grammar.verbs.choose(&mut rng).expect("non-empty");
        let mut words = Vec::with_capacity(4);
        let caption = match template {
            Template::Full => {
                let adj = *grammar.adjectives.choose(&mut rng).expect("non-empty");
                let obj = pick_object(objects, spec.prior_weight, &mut rng);
                words.extend([adj, agent, verb, obj]);
                format!("a {adj} {agent} is {verb} {obj}")
            }
            Template::NoAdjective => {
                let obj = pick_object(objects, spec.prior_weight, &mut rng);
                words.extend([agent, verb, obj]);
                format!("a {agent} is {verb} {obj}")
            }
            Template::NoObject => {
                words.extend([agent, verb]);
                format!("a {agent} is {verb}")
            }
        };
        let mut cells: Vec<usize> = (0..spec.grid_size).collect();
        cells.shuffle(&mut rng);
        let mut features = vec![vec![0.0; spec.feature_dim]; spec.grid_size];
        for (w, &cell) in words.iter().zip(&cells) {
            features[cell].copy_from_slice(protos.get(w));
        }
        if spec.noise_std > 0.0 {
            for v in features.iter_mut().flatten() {
                *v += noise.sample(&mut rng);
            }
        }
        records.push(Record { features, caption });
    }
    Ok(SyntheticData { records, grammar })
}
