use super::TrainingPair;
use crate::error::{Error, Result};
use crate::model::{Heads, Localization, LocNodes, Prediction};
use crate::numerics::{NodeId, Tape, LOG_FLOOR};
use crate::{Scalar, Tensor};

/// Binary cross-entropy with the prediction clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce(y: f64, y_hat: f64) -> f64 {
    let p = y_hat.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Presence term of one sample.
pub fn sample_loss_cls<F: Scalar>(pred: &Prediction<F>, pair: &TrainingPair) -> f64 {
    bce(pair.y_cls as f64, pred.cls.to_f64().unwrap_or(f64::NAN))
}

/// Localization term of one sample, already gated by `y_cls`.
pub fn sample_loss_loc<F: Scalar>(pred: &Prediction<F>, pair: &TrainingPair) -> Result<f64> {
    let loc = pred.loc.as_ref().ok_or_else(|| {
        Error::Capability("variant has no localization output".into())
    })?;
    let t = pair.y_loc.len();
    let check = |n: usize| {
        if n == t {
            Ok(())
        } else {
            Err(Error::shape(format!("{n} predicted frames for {t} labels")))
        }
    };
    match loc {
        Localization::Frames(p) => {
            check(p.len())?;
            if pair.y_cls == 0 {
                return Ok(0.0);
            }
            let s: f64 = p
                .iter()
                .zip(&pair.y_loc)
                .map(|(&q, &y)| bce(y as f64, q.to_f64().unwrap_or(f64::NAN)))
                .sum();
            Ok(s / t as f64)
        }
        Localization::Span { start, end } => {
            check(start.len())?;
            check(end.len())?;
            let Some((s, e)) = pair.span() else {
                return Ok(0.0);
            };
            let ls = clamped_ln(start[s].to_f64().unwrap_or(f64::NAN));
            let le = clamped_ln(end[e - 1].to_f64().unwrap_or(f64::NAN));
            Ok(-(ls + le) / 2.0)
        }
    }
}

fn non_empty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::domain("empty batch"))
    } else {
        Ok(())
    }
}

/// Batch mean of the presence BCE.
pub fn loss_cls<F: Scalar>(batch: &[(&Prediction<F>, &TrainingPair)]) -> Result<f64> {
    non_empty(batch)?;
    let s: f64 = batch.iter().map(|(p, y)| sample_loss_cls(p, y)).sum();
    Ok(s / batch.len() as f64)
}

/// Batch mean of the gated per-frame term; negatives count as zeros.
pub fn loss_loc<F: Scalar>(batch: &[(&Prediction<F>, &TrainingPair)]) -> Result<f64> {
    non_empty(batch)?;
    let mut s = 0.0;
    for (p, y) in batch {
        s += sample_loss_loc(p, y)?;
    }
    Ok(s / batch.len() as f64)
}

/// `λ·L_cls + (1−λ)·L_loc`, or `L_cls` alone when the predictions carry no
/// localization output.
pub fn total_loss<F: Scalar>(batch: &[(&Prediction<F>, &TrainingPair)], lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!("lambda {lambda} outside [0, 1]")));
    }
    let cls = loss_cls(batch)?;
    if batch.iter().any(|(p, _)| p.loc.is_none()) {
        return Ok(cls);
    }
    let loc = loss_loc(batch)?;
    Ok(lambda * cls + (1.0 - lambda) * loc)
}

/// `−mean(ln(ŷ·(2y−1) + (1−y)))`, i.e. mean BCE against binary targets.
fn bce_node<F: Scalar>(tape: &mut Tape<F>, probs: NodeId, targets: &[u8]) -> Result<NodeId> {
    let shape = tape.value(probs).shape().to_vec();
    let sign = Tensor::new(
        shape.clone(),
        targets.iter().map(|&y| F::lit(2.0 * y as f64 - 1.0)).collect(),
    )?;
    let offset = Tensor::new(shape, targets.iter().map(|&y| F::lit(1.0 - y as f64)).collect())?;
    let sign = tape.constant(sign);
    let offset = tape.constant(offset);
    let flipped = tape.mul(probs, sign)?;
    let p = tape.add(flipped, offset)?;
    let l = tape.log(p);
    let m = tape.mean(l);
    Ok(tape.scale(m, F::lit(-1.0)))
}

/// Per-sample training objective on the tape; its batch mean is the total
/// loss.
pub fn sample_loss_node<F: Scalar>(
    tape: &mut Tape<F>,
    heads: &Heads,
    pair: &TrainingPair,
    lambda: f64,
) -> Result<NodeId> {
    let cls = bce_node(tape, heads.cls, &[pair.y_cls])?;
    let Some(loc) = heads.loc else {
        return Ok(cls);
    };
    let loc = match loc {
        LocNodes::Frames(p) => {
            if tape.value(p).len() != pair.y_loc.len() {
                return Err(Error::shape("frame labels do not match predictions"));
            }
            if pair.y_cls == 0 {
                None
            } else {
                Some(bce_node(tape, p, &pair.y_loc)?)
            }
        }
        LocNodes::Span { start, end } => match pair.span() {
            None => None,
            Some((s, e)) => {
                let ps = tape.slice_rows(start, s, s + 1)?;
                let pe = tape.slice_rows(end, e - 1, e)?;
                let both = tape.concat_rows(&[ps, pe])?;
                let l = tape.log(both);
                let m = tape.mean(l);
                Some(tape.scale(m, F::lit(-1.0)))
            }
        },
    };
    let weighted = tape.scale(cls, F::lit(lambda));
    match loc {
        None => Ok(weighted),
        Some(l) => {
            let l = tape.scale(l, F::lit(1.0 - lambda));
            tape.add(weighted, l)
        }
    }
}
