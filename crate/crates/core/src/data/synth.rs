//! Desk-scale stand-in corpus: each phoneme has a fixed unit-norm visual
//! signature, words realize their phonemes as runs of that signature with
//! linear cross-fades at joints, and clips concatenate random words.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureSequence};
use super::manifest::{write_manifest, Clip, ClipRecord, WordSpan};
use crate::error::{Error, Result};
use crate::phonetics::{Lexicon, PhonemeVocabulary, ARPABET};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Frames each phoneme occupies (`r`).
    pub frames_per_phoneme: usize,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Frames on each side of a phoneme joint that are cross-faded.
    pub blend_width: usize,
    /// Trailing words are dropped from clips that would exceed this length.
    pub max_frames: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    /// Word pairs whose pronunciations differ but look identical.
    pub homopheme_pairs: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            min_phonemes: 2,
            max_phonemes: 6,
            frames_per_phoneme: 3,
            noise_sigma: 0.1,
            feature_dim: 64,
            min_words: 4,
            max_words: 9,
            blend_width: 1,
            max_frames: 160,
            train_clips: 500,
            test_clips: 100,
            homopheme_pairs: 0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.vocab_size == 0 || self.feature_dim == 0 || self.frames_per_phoneme == 0 {
            return bad("vocab_size, feature_dim and frames_per_phoneme must be positive");
        }
        if self.min_phonemes == 0 || self.max_phonemes < self.min_phonemes {
            return bad("need 1 <= min_phonemes <= max_phonemes");
        }
        if self.min_words == 0 || self.max_words < self.min_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if 2 * self.blend_width > self.frames_per_phoneme {
            return bad("blend_width may cover at most half a phoneme on each side");
        }
        if self.max_frames < self.max_phonemes * self.frames_per_phoneme {
            return bad("max_frames must fit the longest word");
        }
        if 2 * self.homopheme_pairs > self.vocab_size {
            return bad("vocab_size must hold both words of every homopheme pair");
        }
        if self.homopheme_pairs + 4 > ARPABET.len() {
            return bad("too many homopheme pairs for the phoneme inventory");
        }
        Ok(())
    }
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub lexicon: Lexicon,
    /// Vocabulary words, lowercase, in generation order.
    pub words: Vec<String>,
    /// Index into `ARPABET` of the signature each phoneme is rendered with.
    pub viseme_of: Vec<usize>,
    pub signatures: Vec<Vec<f32>>,
    pub train: Vec<Clip>,
    pub test: Vec<Clip>,
    pub homophemes: Vec<(String, String)>,
}

const CONSONANTS: &[u8] = b"BDFGKLMNPRSTVZ";
const LETTER_VOWELS: &[u8] = b"AEIOU";

fn spell(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut s = String::new();
    for _ in 0..syllables {
        s.push(*CONSONANTS.choose(rng).unwrap() as char);
        s.push(*LETTER_VOWELS.choose(rng).unwrap() as char);
    }
    if rng.random_bool(0.5) {
        s.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    s
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

impl SyntheticDataset {
    fn pronunciation(&self, word: &str) -> Vec<usize> {
        self.lexicon.pronunciations(word).expect("generated word")[0]
            .iter()
            .map(|p| ARPABET.iter().position(|a| a == p).unwrap())
            .collect()
    }

    /// Renders a word sequence to features with exact alignments.
    fn render(&self, id: &str, words: &[String], rng: &mut ChaCha8Rng) -> Result<Clip> {
        let cfg = &self.config;
        let r = cfg.frames_per_phoneme;
        let mut phones = Vec::new();
        let mut spans = Vec::new();
        for w in words {
            let start = phones.len() * r;
            phones.extend(self.pronunciation(w));
            spans.push(WordSpan {
                w: w.clone(),
                start,
                end: phones.len() * r,
            });
        }
        let t_total = phones.len() * r;
        let d = cfg.feature_dim;
        let mut values = vec![0f32; t_total * d];
        for (k, &ph) in phones.iter().enumerate() {
            let sig = &self.signatures[self.viseme_of[ph]];
            for f in k * r..(k + 1) * r {
                values[f * d..(f + 1) * d].copy_from_slice(sig);
            }
        }
        let b = cfg.blend_width;
        if b > 0 {
            for k in 0..phones.len().saturating_sub(1) {
                let prev = &self.signatures[self.viseme_of[phones[k]]];
                let next = &self.signatures[self.viseme_of[phones[k + 1]]];
                let joint = (k + 1) * r;
                for f in joint - b..joint + b {
                    let w = ((f + b - joint) as f32 + 0.5) / (2 * b) as f32;
                    for c in 0..d {
                        values[f * d + c] = (1.0 - w) * prev[c] + w * next[c];
                    }
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
            for v in &mut values {
                *v += noise.sample(rng) as f32;
            }
        }
        let record = ClipRecord {
            id: id.to_string(),
            features: format!("features/{id}.tpft"),
            words: spans,
        };
        let features = FeatureSequence::new(t_total, d, values)?;
        Ok(Clip { record, features })
    }

    fn draw_clip(&self, id: &str, rng: &mut ChaCha8Rng) -> Result<Clip> {
        let cfg = &self.config;
        let n = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut words = Vec::with_capacity(n);
        let mut frames = 0;
        for i in 0..n {
            let w = self.words.choose(rng).unwrap().clone();
            let len = self.pronunciation(&w).len() * cfg.frames_per_phoneme;
            if i > 0 && frames + len > cfg.max_frames {
                break;
            }
            frames += len;
            words.push(w);
        }
        self.render(id, &words, rng)
    }

    /// Writes `train.jsonl`, `test.jsonl`, `lexicon.dict`, `homophemes.json`
    /// and one TPFT file per clip under `features/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let fdir = dir.join("features");
        fs::create_dir_all(&fdir).map_err(|e| Error::from(e).at(&fdir))?;
        for (name, clips) in [("train.jsonl", &self.train), ("test.jsonl", &self.test)] {
            for c in clips {
                write_features(dir.join(&c.record.features), &c.features)?;
            }
            let recs: Vec<ClipRecord> = clips.iter().map(|c| c.record.clone()).collect();
            write_manifest(dir.join(name), &recs)?;
        }
        let lex = dir.join("lexicon.dict");
        fs::write(&lex, self.lexicon.serialize()).map_err(|e| Error::from(e).at(&lex))?;
        let hp = dir.join("homophemes.json");
        let pairs = serde_json::to_string_pretty(&self.homophemes)?;
        fs::write(&hp, pairs + "\n").map_err(|e| Error::from(e).at(&hp))?;
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|c| c.features.frames())
            .sum()
    }
}

/// Generates vocabulary, lexicon and train/test clips from `cfg.seed`.
const HOMOPHEME_MIN_PHONEMES: usize = 3;

pub fn synthesize_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let signatures: Vec<Vec<f32>> = (0..ARPABET.len())
        .map(|_| unit_vector(&mut rng, cfg.feature_dim))
        .collect();
    let mut viseme_of: Vec<usize> = (0..ARPABET.len()).collect();

    let mut order: Vec<usize> = (0..ARPABET.len()).collect();
    order.shuffle(&mut rng);
    let reserved: Vec<usize> = order[..cfg.homopheme_pairs].to_vec();
    let usable: Vec<usize> = order[cfg.homopheme_pairs..].to_vec();

    let base_count = cfg.vocab_size - cfg.homopheme_pairs;
    let mut spellings = BTreeSet::new();
    let mut prons = BTreeSet::new();
    let mut entries: Vec<(String, Vec<usize>)> = Vec::with_capacity(cfg.vocab_size);
    while entries.len() < base_count {
        let w = spell(&mut rng);
        // Homopheme bases must be long enough to be queried at the default filter.
        let lo = if entries.len() < cfg.homopheme_pairs {
            cfg.min_phonemes.max(HOMOPHEME_MIN_PHONEMES).min(cfg.max_phonemes)
        } else {
            cfg.min_phonemes
        };
        let n = rng.random_range(lo..=cfg.max_phonemes);
        let p: Vec<usize> = (0..n).map(|_| *usable.choose(&mut rng).unwrap()).collect();
        if spellings.contains(&w) || prons.contains(&p) {
            continue;
        }
        spellings.insert(w.clone());
        prons.insert(p.clone());
        entries.push((w, p));
    }

    let mut homophemes = Vec::new();
    for (i, &twin) in reserved.iter().enumerate() {
        let (base_word, base_pron) = entries[i].clone();
        let swapped = base_pron[rng.random_range(0..base_pron.len())];
        viseme_of[twin] = swapped;
        let pron: Vec<usize> = base_pron
            .iter()
            .map(|&p| if p == swapped { twin } else { p })
            .collect();
        let word = loop {
            let w = spell(&mut rng);
            if spellings.insert(w.clone()) {
                break w;
            }
        };
        homophemes.push((base_word.to_lowercase(), word.to_lowercase()));
        entries.push((word, pron));
    }

    let mut lexicon = Lexicon::empty(PhonemeVocabulary::arpabet());
    for (w, p) in &entries {
        let phones: Vec<&str> = p.iter().map(|&i| ARPABET[i]).collect();
        lexicon.insert(w, &phones)?;
    }

    let mut ds = SyntheticDataset {
        config: cfg.clone(),
        lexicon,
        words: entries.iter().map(|(w, _)| w.to_lowercase()).collect(),
        viseme_of,
        signatures,
        train: Vec::new(),
        test: Vec::new(),
        homophemes,
    };
    for i in 0..cfg.train_clips {
        let clip = ds.draw_clip(&format!("train-{i:04}"), &mut rng)?;
        ds.train.push(clip);
    }
    for i in 0..cfg.test_clips {
        let clip = ds.draw_clip(&format!("test-{i:04}"), &mut rng)?;
        ds.test.push(clip);
    }
    Ok(ds)
}
