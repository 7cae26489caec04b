use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingPair;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::phonetics::Lexicon;

/// How training pairs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Keywords shorter than this many phonemes are never queried.
    pub min_phonemes: usize,
    /// Probability of cropping; otherwise the widest admissible window is used.
    pub crop_prob: f64,
    /// Probability that the query is a two-word phrase instead of a word.
    pub phrase_prob: f64,
    /// Query redraws allowed when no negative clip exists for a query.
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            min_phonemes: 3,
            crop_prob: 0.5,
            phrase_prob: 0.0,
            max_retries: 100,
        }
    }
}

/// Draws balanced positive/negative `(clip, query)` pairs from aligned clips.
pub struct Sampler<'a> {
    clips: &'a [Clip],
    lexicon: &'a Lexicon,
    cfg: SamplerConfig,
    /// Per clip, the word indices that start an eligible unit, by unit length.
    words: Vec<Vec<usize>>,
    phrases: Vec<Vec<usize>>,
    with_words: Vec<usize>,
    with_phrases: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(clips: &'a [Clip], lexicon: &'a Lexicon, cfg: SamplerConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.crop_prob) || !(0.0..=1.0).contains(&cfg.phrase_prob) {
            return Err(Error::Config("sampler probabilities must lie in [0, 1]".into()));
        }
        let len = |w: &str| lexicon.phoneme_len(w);
        let mut words = Vec::with_capacity(clips.len());
        let mut phrases = Vec::with_capacity(clips.len());
        for c in clips {
            let ws = &c.record.words;
            words.push(
                (0..ws.len())
                    .filter(|&i| len(&ws[i].w).is_some_and(|n| n >= cfg.min_phonemes))
                    .collect::<Vec<_>>(),
            );
            phrases.push(
                (0..ws.len().saturating_sub(1))
                    .filter(|&i| match (len(&ws[i].w), len(&ws[i + 1].w)) {
                        (Some(a), Some(b)) => a + b >= cfg.min_phonemes,
                        _ => false,
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let nonempty = |v: &[Vec<usize>]| -> Vec<usize> {
            (0..v.len()).filter(|&i| !v[i].is_empty()).collect()
        };
        let with_words = nonempty(&words);
        let with_phrases = nonempty(&phrases);
        if with_words.is_empty() {
            return Err(Error::domain(format!(
                "no clip has an in-lexicon word of at least {} phonemes",
                cfg.min_phonemes
            )));
        }
        if cfg.phrase_prob > 0.0 && with_phrases.is_empty() {
            return Err(Error::domain("phrase sampling requested but no clip has an eligible phrase"));
        }
        Ok(Self {
            clips,
            lexicon,
            cfg,
            words,
            phrases,
            with_words,
            with_phrases,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// One pair: positive or negative with probability 1/2 each.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
        let positive = rng.random_bool(0.5);
        let n = if self.cfg.phrase_prob > 0.0 && rng.random_bool(self.cfg.phrase_prob) {
            2
        } else {
            1
        };
        if positive {
            let (c, i) = self.draw_unit(n, rng);
            Ok(self.positive(c, i, n, rng))
        } else {
            self.negative(n, rng)
        }
    }

    /// A clip uniformly among those with an eligible unit, then a unit in it.
    fn draw_unit(&self, n: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let (pool, starts) = if n == 1 {
            (&self.with_words, &self.words)
        } else {
            (&self.with_phrases, &self.phrases)
        };
        let c = *pool.choose(rng).expect("checked non-empty");
        let i = *starts[c].choose(rng).expect("checked non-empty");
        (c, i)
    }

    fn unit<'c>(&self, c: usize, i: usize, n: usize) -> Vec<String> {
        self.clips[c].record.words[i..i + n]
            .iter()
            .map(|s| s.w.clone())
            .collect()
    }

    fn crop(&self, lo: usize, s: usize, e: usize, hi: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        if rng.random_bool(self.cfg.crop_prob) {
            (rng.random_range(lo..=s), rng.random_range(e..=hi))
        } else {
            (lo, hi)
        }
    }

    fn positive(&self, c: usize, i: usize, n: usize, rng: &mut ChaCha8Rng) -> TrainingPair {
        let clip = &self.clips[c];
        let ws = &clip.record.words;
        let phrase = self.unit(c, i, n);
        let (s, e) = (ws[i].start, ws[i + n - 1].end);
        let occurrences: Vec<(usize, usize)> = clip
            .record
            .phrase_occurrences(&phrase)
            .map(|j| (ws[j].start, ws[j + n - 1].end))
            .collect();
        let (mut cs, mut ce) = self.crop(0, s, e, clip.features.frames(), rng);
        // Widen rather than cut another occurrence; every one inside is labeled.
        for &(os, oe) in &occurrences {
            if os < cs && cs < oe {
                cs = os;
            }
            if os < ce && ce < oe {
                ce = oe;
            }
        }
        let mut y_loc = vec![0u8; ce - cs];
        for &(os, oe) in occurrences.iter().filter(|o| o.0 >= cs && o.1 <= ce) {
            y_loc[os - cs..oe - cs].iter_mut().for_each(|y| *y = 1);
        }
        TrainingPair {
            clip: clip.record.id.clone(),
            crop: (cs, ce),
            features: clip.features.crop(cs, ce),
            query: self.lexicon.phonemize_phrase(&phrase).expect("eligible units are in-lexicon"),
            y_cls: 1,
            y_loc,
        }
    }

    fn negative(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
        for _ in 0..=self.cfg.max_retries {
            let (c, i) = self.draw_unit(n, rng);
            let phrase = self.unit(c, i, n);
            let Some(k) = self.absent_clip(&phrase, rng) else {
                continue;
            };
            let clip = &self.clips[k];
            let t = clip.features.frames();
            let (s, e) = match clip.record.words.choose(rng) {
                Some(a) => (a.start, a.end),
                None => {
                    let s = rng.random_range(0..t);
                    (s, s + 1)
                }
            };
            let (cs, ce) = self.crop(0, s, e, t, rng);
            return Ok(TrainingPair {
                clip: clip.record.id.clone(),
                crop: (cs, ce),
                features: clip.features.crop(cs, ce),
                query: self.lexicon.phonemize_phrase(&phrase)?,
                y_cls: 0,
                y_loc: vec![0; ce - cs],
            });
        }
        Err(Error::domain(format!(
            "no clip without the query found after {} redraws",
            self.cfg.max_retries
        )))
    }

    /// A uniformly random clip whose transcript lacks `phrase`.
    fn absent_clip(&self, phrase: &[String], rng: &mut ChaCha8Rng) -> Option<usize> {
        let lacks = |k: usize| {
            let r = &self.clips[k].record;
            if phrase.len() == 1 {
                !r.contains_word(&phrase[0])
            } else {
                r.phrase_occurrences(phrase).next().is_none()
            }
        };
        for _ in 0..64 {
            let k = rng.random_range(0..self.clips.len());
            if lacks(k) {
                return Some(k);
            }
        }
        let all: Vec<usize> = (0..self.clips.len()).filter(|&k| lacks(k)).collect();
        all.choose(rng).copied()
    }
}

/// Draws one pair; see [`Sampler`].
pub fn sample_pair(
    clips: &[Clip],
    lexicon: &Lexicon,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    Sampler::new(clips, lexicon, cfg.clone())?.sample(rng)
}
