use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{Clip, ClipRecord};
use crate::error::{Error, Result};
use crate::model::{encode_text, encode_video, forward, joint_forward, Localization, Parameters, Prediction};
use crate::phonetics::{Lexicon, Query};
use crate::Tensor;

/// A keyword or phrase searched for in every clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GridQuery {
    pub words: Vec<String>,
    pub query: Query,
}

impl GridQuery {
    pub fn phonemes(&self) -> usize {
        self.query.ids.len()
    }

    pub fn label(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridClip {
    pub id: String,
    pub word_count: usize,
    pub frames: usize,
}

/// One (query, clip) result with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub cls: f64,
    pub loc: Option<Localization<f64>>,
    pub present: bool,
    /// Union of the query's occurrence spans, ascending.
    pub gt: Vec<usize>,
}

/// Results of every query against every clip, query-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    pub queries: Vec<GridQuery>,
    pub clips: Vec<GridClip>,
    pub cells: Vec<Cell>,
}

impl ScoreGrid {
    pub fn new(queries: Vec<GridQuery>, clips: Vec<GridClip>, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != queries.len() * clips.len() {
            return Err(Error::shape(format!(
                "{} cells for {} queries × {} clips",
                cells.len(),
                queries.len(),
                clips.len()
            )));
        }
        if let Some(c) = cells.iter().find(|c| c.present == c.gt.is_empty()) {
            return Err(Error::Contract(format!(
                "ground truth frames {:?} disagree with presence {}",
                c.gt, c.present
            )));
        }
        Ok(Self { queries, clips, cells })
    }

    pub fn cell(&self, q: usize, c: usize) -> &Cell {
        &self.cells[q * self.clips.len() + c]
    }

    /// Queries present in at least one clip; only these enter the metrics.
    pub fn scored_queries(&self) -> Vec<usize> {
        (0..self.queries.len())
            .filter(|&q| (0..self.clips.len()).any(|c| self.cell(q, c).present))
            .collect()
    }

    /// The grid restricted to the given queries and clips.
    pub fn subset(&self, queries: &[usize], clips: &[usize]) -> ScoreGrid {
        let cells = queries
            .iter()
            .flat_map(|&q| clips.iter().map(move |&c| (q, c)))
            .map(|(q, c)| self.cell(q, c).clone())
            .collect();
        ScoreGrid {
            queries: queries.iter().map(|&q| self.queries[q].clone()).collect(),
            clips: clips.iter().map(|&c| self.clips[c].clone()).collect(),
            cells,
        }
    }
}

/// Distinct in-lexicon transcript units of `n_words` words with at least
/// `min_phonemes` phonemes, sorted, plus the out-of-lexicon words skipped.
pub fn build_query_vocabulary(
    records: &[ClipRecord],
    lexicon: &Lexicon,
    min_phonemes: usize,
    n_words: usize,
) -> (Vec<GridQuery>, Vec<String>) {
    let mut units: BTreeMap<Vec<String>, ()> = BTreeMap::new();
    let mut skipped: BTreeMap<String, ()> = BTreeMap::new();
    for r in records {
        for s in &r.words {
            if !lexicon.contains(&s.w) {
                skipped.insert(s.w.to_lowercase(), ());
            }
        }
        if n_words == 0 {
            continue;
        }
        for win in r.words.windows(n_words) {
            let words: Vec<String> = win.iter().map(|s| s.w.to_lowercase()).collect();
            units.insert(words, ());
        }
    }
    let queries = units
        .into_keys()
        .filter_map(|words| {
            let query = lexicon.phonemize_phrase(&words).ok()?;
            (query.ids.len() >= min_phonemes).then_some(GridQuery { words, query })
        })
        .collect();
    (queries, skipped.into_keys().collect())
}

fn ground_truth(record: &ClipRecord, words: &[String]) -> Vec<usize> {
    let n = words.len();
    let mut frames: Vec<usize> = record
        .phrase_occurrences(words)
        .flat_map(|i| record.words[i].start..record.words[i + n - 1].end)
        .collect();
    frames.sort_unstable();
    frames.dedup();
    frames
}

fn widen(p: Prediction<f32>) -> (f64, Option<Localization<f64>>) {
    let v = |x: Vec<f32>| x.into_iter().map(f64::from).collect();
    let loc = p.loc.map(|l| match l {
        Localization::Frames(f) => Localization::Frames(v(f)),
        Localization::Span { start, end } => Localization::Span {
            start: v(start),
            end: v(end),
        },
    });
    (f64::from(p.cls), loc)
}

/// Worker count from `TRANSPOTTER_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("TRANSPOTTER_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Scores every query against every clip on `threads` workers. Encoder
/// outputs are computed once per query and per clip where the variant
/// allows; results do not depend on the worker count.
pub fn score_grid(
    params: &Parameters<f32>,
    queries: &[GridQuery],
    clips: &[Clip],
    threads: usize,
) -> Result<ScoreGrid> {
    let cfg = params.config();
    if let Some(c) = clips.iter().find(|c| c.features.dim() != cfg.input_dim) {
        return Err(Error::Config(format!(
            "clip {} has {}-dim features but the model expects {}",
            c.record.id,
            c.features.dim(),
            cfg.input_dim
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let nq = queries.len();
    let context = |q: usize, c: usize| {
        move |e: Error| {
            Error::Validation {
                clip: clips[c].record.id.clone(),
                msg: format!("query {}: {e}", queries[q].label()),
            }
        }
    };
    let cells: Vec<Cell> = pool.install(|| -> Result<Vec<Cell>> {
        let feats: Vec<Tensor<f32>> = clips.par_iter().map(|c| c.features.to_tensor()).collect();
        let scored: Vec<(f64, Option<Localization<f64>>)> = if cfg.variant.is_decoder() {
            (0..nq * clips.len())
                .into_par_iter()
                .map(|i| {
                    let (q, c) = (i / clips.len(), i % clips.len());
                    forward(params, &feats[c], &queries[q].query.ids)
                        .map(widen)
                        .map_err(context(q, c))
                })
                .collect::<Result<_>>()?
        } else {
            let venc: Vec<Tensor<f32>> = feats
                .par_iter()
                .map(|f| encode_video(params, f, f.rows()))
                .collect::<Result<_>>()?;
            let qenc: Vec<Tensor<f32>> = queries
                .par_iter()
                .map(|q| encode_text(params, &q.query.ids, q.query.ids.len()))
                .collect::<Result<_>>()?;
            (0..nq * clips.len())
                .into_par_iter()
                .map(|i| {
                    let (q, c) = (i / clips.len(), i % clips.len());
                    let (v, t) = (&venc[c], &qenc[q]);
                    joint_forward(params, v, v.rows(), t, t.rows())
                        .map(widen)
                        .map_err(context(q, c))
                })
                .collect::<Result<_>>()?
        };
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (cls, loc))| {
                let (q, c) = (i / clips.len(), i % clips.len());
                let gt = ground_truth(&clips[c].record, &queries[q].words);
                Cell {
                    cls,
                    loc,
                    present: !gt.is_empty(),
                    gt,
                }
            })
            .collect())
    })?;
    let grid_clips = clips
        .iter()
        .map(|c| GridClip {
            id: c.record.id.clone(),
            word_count: c.record.word_count(),
            frames: c.features.frames(),
        })
        .collect();
    ScoreGrid::new(queries.to_vec(), grid_clips, cells)
}
