use std::cmp::Ordering;

use super::grid::{Cell, ScoreGrid};
use super::EvalConfig;
use crate::error::{Error, Result};
use crate::model::Localization;

/// Clip indices of query `q`, highest presence score first; ties go to the
/// smaller clip id.
pub fn ranking(grid: &ScoreGrid, q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grid.clips.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (grid.cell(q, a).cls, grid.cell(q, b).cls);
        sb.total_cmp(&sa)
            .then_with(|| grid.clips[a].id.cmp(&grid.clips[b].id))
            .then(Ordering::Equal)
    });
    order
}

/// Fraction of queries with a relevant clip among the `k` best-scored.
pub fn acc_at_k(grid: &ScoreGrid, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::domain("k must be at least 1"));
    }
    let qs = grid.scored_queries();
    if qs.is_empty() {
        return Ok(0.0);
    }
    let hits = qs
        .iter()
        .filter(|&&q| ranking(grid, q).iter().take(k).any(|&c| grid.cell(q, c).present))
        .count();
    Ok(hits as f64 / qs.len() as f64)
}

/// Mean precision at the ranks of relevant items, over `denominator`
/// relevant items in total.
pub fn average_precision_over(relevance: &[bool], denominator: usize) -> Result<f64> {
    if denominator == 0 {
        return Err(Error::domain("average precision needs at least one relevant item"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / denominator as f64)
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    average_precision_over(relevance, relevance.iter().filter(|&&r| r).count())
}

/// Mean over queries of the presence-ranked average precision.
pub fn map_cls(grid: &ScoreGrid) -> f64 {
    mean_ap(grid, |_, _, cell| cell.present)
}

fn mean_ap(grid: &ScoreGrid, relevant: impl Fn(usize, usize, &Cell) -> bool) -> f64 {
    let qs = grid.scored_queries();
    if qs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &q in &qs {
        let order = ranking(grid, q);
        let rel: Vec<bool> = order.iter().map(|&c| relevant(q, c, grid.cell(q, c))).collect();
        let p = (0..grid.clips.len()).filter(|&c| grid.cell(q, c).present).count();
        total += average_precision_over(&rel, p).expect("scored queries have a relevant clip");
    }
    total / qs.len() as f64
}

/// Frames whose probability reaches `tau`.
pub fn binarize_loc(probs: &[f64], tau: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&t| probs[t] >= tau).collect()
}

/// Most probable `[start, end]` pair with `start <= end` under independent
/// start and end distributions, as a frame list.
pub fn decode_span(start: &[f64], end: &[f64]) -> Vec<usize> {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    // Running argmax of the start distribution up to each end frame.
    let mut arg = 0;
    for e in 0..end.len().min(start.len()) {
        if start[e] > start[arg] {
            arg = e;
        }
        let score = start[arg] * end[e];
        if score > best.0 {
            best = (score, arg, e);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Vec::new();
    }
    (best.1..=best.2).collect()
}

/// Intersection over union of two frame sets; 0 when both are empty.
pub fn iou(pred: &[usize], gt: &[usize]) -> f64 {
    let a: std::collections::BTreeSet<usize> = pred.iter().copied().collect();
    let b: std::collections::BTreeSet<usize> = gt.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Frames the cell's localization output marks as the keyword.
pub fn detected_frames(cell: &Cell, tau: f64) -> Result<Vec<usize>> {
    match &cell.loc {
        Some(Localization::Frames(p)) => Ok(binarize_loc(p, tau)),
        Some(Localization::Span { start, end }) => Ok(decode_span(start, end)),
        None => Err(Error::Capability("grid has no localization output".into())),
    }
}

/// Presence-ranked mean AP where a clip only counts if its detection also
/// overlaps the ground truth by at least the IOU threshold.
pub fn map_loc(grid: &ScoreGrid, cfg: &EvalConfig) -> Result<f64> {
    if grid.cells.iter().any(|c| c.loc.is_none()) {
        return Err(Error::Capability("grid has no localization output".into()));
    }
    let mut ok = vec![false; grid.cells.len()];
    for (i, cell) in grid.cells.iter().enumerate() {
        ok[i] = cell.present && iou(&detected_frames(cell, cfg.tau)?, &cell.gt) >= cfg.iou_threshold;
    }
    let n = grid.clips.len();
    Ok(mean_ap(grid, |q, c, _| ok[q * n + c]))
}
