use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::grid::ScoreGrid;
use super::metrics::{acc_at_k, map_cls, map_loc};
use super::EvalConfig;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::model::{forward, Localization, Parameters};
use crate::phonetics::Query;

/// Headline metrics; `map_loc` is `None` for classification-only models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    pub clips: usize,
    pub acc: Vec<(usize, f64)>,
    pub map_cls: f64,
    pub map_loc: Option<f64>,
}

impl EvalReport {
    /// `metric,value` rows; unavailable metrics print as `-`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.acc {
            let _ = writeln!(s, "acc@{k},{v:.6}");
        }
        let _ = writeln!(s, "map_cls,{:.6}", self.map_cls);
        match self.map_loc {
            Some(v) => {
                let _ = writeln!(s, "map_loc,{v:.6}");
            }
            None => s.push_str("map_loc,-\n"),
        }
        let _ = writeln!(s, "queries,{}", self.queries);
        let _ = writeln!(s, "clips,{}", self.clips);
        s
    }
}

pub fn evaluate(grid: &ScoreGrid, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let acc = cfg
        .ks
        .iter()
        .map(|&k| Ok((k, acc_at_k(grid, k)?)))
        .collect::<Result<_>>()?;
    let localizes = !grid.cells.is_empty() && grid.cells.iter().all(|c| c.loc.is_some());
    Ok(EvalReport {
        queries: grid.scored_queries().len(),
        clips: grid.clips.len(),
        acc,
        map_cls: map_cls(grid),
        map_loc: if localizes { Some(map_loc(grid, cfg)?) } else { None },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumAxis {
    KeywordPhonemeLength,
    ClipWordCount,
}

impl StratumAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::KeywordPhonemeLength => "keyword_phoneme_length",
            Self::ClipWordCount => "clip_word_count",
        }
    }
}

/// `Cumulative` buckets hold everything at or above the bucket value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketMode {
    #[default]
    Cumulative,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub bucket: usize,
    pub queries: usize,
    pub clips: usize,
    pub map_cls: f64,
    pub map_loc: Option<f64>,
}

/// Metrics per bucket of keyword length (queries) or transcript length
/// (clips).
pub fn stratified_report(
    grid: &ScoreGrid,
    axis: StratumAxis,
    mode: BucketMode,
    cfg: &EvalConfig,
) -> Result<Vec<StratumRow>> {
    let all_q: Vec<usize> = (0..grid.queries.len()).collect();
    let all_c: Vec<usize> = (0..grid.clips.len()).collect();
    let key = |i: usize| match axis {
        StratumAxis::KeywordPhonemeLength => grid.queries[i].phonemes(),
        StratumAxis::ClipWordCount => grid.clips[i].word_count,
    };
    let n = match axis {
        StratumAxis::KeywordPhonemeLength => grid.queries.len(),
        StratumAxis::ClipWordCount => grid.clips.len(),
    };
    let buckets: BTreeSet<usize> = (0..n).map(key).collect();
    let localizes = !grid.cells.is_empty() && grid.cells.iter().all(|c| c.loc.is_some());
    let mut rows = Vec::new();
    for b in buckets {
        let members: Vec<usize> = (0..n)
            .filter(|&i| match mode {
                BucketMode::Cumulative => key(i) >= b,
                BucketMode::Exact => key(i) == b,
            })
            .collect();
        let sub = match axis {
            StratumAxis::KeywordPhonemeLength => grid.subset(&members, &all_c),
            StratumAxis::ClipWordCount => grid.subset(&all_q, &members),
        };
        let queries = sub.scored_queries().len();
        if queries == 0 {
            continue;
        }
        rows.push(StratumRow {
            bucket: b,
            queries,
            clips: sub.clips.len(),
            map_cls: map_cls(&sub),
            map_loc: if localizes { Some(map_loc(&sub, cfg)?) } else { None },
        });
    }
    Ok(rows)
}

/// CSV with one row per bucket.
pub fn strata_csv(axis: StratumAxis, mode: BucketMode, rows: &[StratumRow]) -> String {
    let cmp = match mode {
        BucketMode::Cumulative => ">=",
        BucketMode::Exact => "==",
    };
    let mut s = format!("{},bucket,queries,clips,map_cls,map_loc\n", axis.name());
    for r in rows {
        let loc = r.map_loc.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{cmp},{},{},{},{:.6},{loc}", r.bucket, r.queries, r.clips, r.map_cls);
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_frame(title: &str, x_label: &str, y_label: &str, x_max: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", W / 2.0, escape(title));
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD / 2.0 + 8.0);
    let _ = writeln!(
        s,
        "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y0 - v * (y0 - y1);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>", x0 - 4.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        "<text x=\"{x1}\" y=\"{}\" text-anchor=\"end\">{} (max {x_max})</text>",
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(s, "<text x=\"{x0}\" y=\"{}\">{}</text>", y1 - 6.0, escape(y_label));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(s: &mut String, points: &[(f64, f64)], x_range: (f64, f64), color: &str, label: &str, slot: usize) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD / 2.0 + 8.0);
    let span = (x_range.1 - x_range.0).max(1e-9);
    let pts: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            let px = x0 + (x - x_range.0) / span * (x1 - x0);
            let py = y0 - y.clamp(0.0, 1.0) * (y0 - y1);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
        pts.join(" ")
    );
    let ly = y1 + 14.0 * slot as f64;
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{ly:.1}\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
        x1 - 4.0,
        escape(label)
    );
}

/// mAP against minimum keyword length, one curve per metric.
pub fn length_curve_svg(rows: &[StratumRow]) -> String {
    let xs: Vec<f64> = rows.iter().map(|r| r.bucket as f64).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if xs.is_empty() { (0.0, 1.0) } else { (lo, hi) };
    let mut s = svg_frame("mAP by keyword length", "phonemes", "mAP", range.1);
    let cls: Vec<(f64, f64)> = rows.iter().map(|r| (r.bucket as f64, r.map_cls)).collect();
    polyline(&mut s, &cls, range, COLORS[0], "mAP cls", 0);
    let loc: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.map_loc.map(|v| (r.bucket as f64, v)))
        .collect();
    if !loc.is_empty() {
        polyline(&mut s, &loc, range, COLORS[1], "mAP loc", 1);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCurve {
    pub label: String,
    pub cls: f64,
    /// Per-frame keyword probability.
    pub probs: Vec<f64>,
}

impl ProbeCurve {
    /// First frame of maximal probability.
    pub fn argmax(&self) -> Option<usize> {
        (0..self.probs.len()).reduce(|a, b| if self.probs[b] > self.probs[a] { b } else { a })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub clip: String,
    pub curves: Vec<ProbeCurve>,
}

impl ProbeResult {
    /// `query,frame,prob,cls` with one row per frame and query.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query,frame,prob,cls\n");
        for c in &self.curves {
            for (t, p) in c.probs.iter().enumerate() {
                let _ = writeln!(s, "{},{t},{p:.6},{:.6}", c.label, c.cls);
            }
        }
        s
    }

    /// Overlay of every query's curve over the clip's frames.
    pub fn to_svg(&self) -> String {
        let t = self.curves.iter().map(|c| c.probs.len()).max().unwrap_or(1);
        let range = (0.0, (t.max(2) - 1) as f64);
        let mut s = svg_frame(&format!("clip {}", self.clip), "frame", "probability", range.1);
        for (i, c) in self.curves.iter().enumerate() {
            let pts: Vec<(f64, f64)> = c.probs.iter().enumerate().map(|(t, &p)| (t as f64, p)).collect();
            let label = format!("{} (cls {:.2})", c.label, c.cls);
            polyline(&mut s, &pts, range, COLORS[i % COLORS.len()], &label, i);
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Frame probability curves of each query on one clip. A span head reports
/// the probability that a frame lies between independent start and end draws.
pub fn probe(params: &Parameters<f32>, clip: &Clip, queries: &[(String, Query)]) -> Result<ProbeResult> {
    let feats = clip.features.to_tensor::<f32>();
    let mut curves = Vec::with_capacity(queries.len());
    for (label, q) in queries {
        let pred = forward(params, &feats, &q.ids)?;
        let probs = match pred.loc {
            Some(Localization::Frames(p)) => p.into_iter().map(f64::from).collect(),
            Some(Localization::Span { start, end }) => {
                let n = start.len();
                let mut before = vec![0.0; n];
                let mut after = vec![0.0; n];
                let mut acc = 0.0;
                for t in 0..n {
                    acc += f64::from(start[t]);
                    before[t] = acc;
                }
                acc = 0.0;
                for t in (0..n).rev() {
                    acc += f64::from(end[t]);
                    after[t] = acc;
                }
                (0..n).map(|t| before[t] * after[t]).collect()
            }
            None => {
                return Err(Error::Capability(format!(
                    "{} produces no frame curve",
                    params.config().variant
                )))
            }
        };
        curves.push(ProbeCurve {
            label: label.clone(),
            cls: f64::from(pred.cls),
            probs,
        });
    }
    Ok(ProbeResult {
        clip: clip.record.id.clone(),
        curves,
    })
}
