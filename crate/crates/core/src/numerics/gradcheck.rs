use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Same maximum, per parameter tensor.
    pub per_param: Vec<f64>,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<L>(loss: &L, params: &[Tensor<f64>]) -> Result<(Tape<f64>, NodeId)>
where
    L: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p.clone()))
        .collect();
    let root = loss(&mut tape, &ids)?;
    Ok((tape, root))
}

/// Central-difference check of `loss` over every coordinate of `params`.
///
/// `loss` receives a fresh tape with the parameters registered in order and
/// must return a scalar node.
pub fn grad_check<L>(loss: L, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::domain(format!("grad_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let (tape, root) = evaluate(&loss, params)?;
    let analytic = tape.backward(root, params)?;
    drop(tape);

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_param = vec![0.0f64; params.len()];
    let mut worst = (0, 0);
    let mut max_rel = 0.0f64;
    let mut coordinates = 0;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            let mut probe = |x: f64| -> Result<f64> {
                work[p].data_mut()[i] = x;
                let (t, r) = evaluate(&loss, &work)?;
                let v = t.value(r).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at parameter {p} coordinate {i} perturbed to {x}"
                    )));
                }
                Ok(v)
            };
            let plus = probe(orig + eps)?;
            let minus = probe(orig - eps)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.grads[p].data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > per_param[p] {
                per_param[p] = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = (p, i);
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_param,
        worst,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, p| Ok(t.sum(p[0])), &[x], 1e-2).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        let x = Tensor::scalar(0.0);
        let err = grad_check(
            |t, p| {
                let v = t.value(p[0]).item();
                let c = t.constant(Tensor::scalar(if v > 0.0 { f64::NAN } else { 0.0 }));
                let s = t.add(p[0], c)?;
                Ok(t.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    /// Every op in the set, one seed at a time.
    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random(&mut rng, 3, 4),                  // x
                random(&mut rng, 4, 4),                  // w
                random(&mut rng, 1, 4),                  // bias / gain
                random(&mut rng, 5, 4),                  // embedding table
                random(&mut rng, 2, 4),                  // keys
            ];
            let ids = [4usize, 0, 2];
            let report = grad_check(
                |t, p| {
                    let h = t.matmul(p[0], p[1], false)?;
                    let h = t.add_row(h, p[2])?;
                    let e = t.gather(p[3], &ids)?;
                    let h = t.mul(h, e)?;
                    let kt = t.matmul(h, p[4], true)?; // 3×2
                    let sm = t.softmax(kt)?;
                    let bias = t.constant(Tensor::zeros(&[4]));
                    let n = t.layer_norm(h, p[2], bias, 1e-5)?;
                    let top = t.slice_rows(n, 0, 2)?;
                    let cat = t.concat_rows(&[top, p[4]])?;
                    let r = t.activation(cat, Activation::Gelu);
                    let r2 = t.activation(cat, Activation::Relu);
                    let att = t.attention(n, p[4], p[4], 2, &[true, true, false], &[true, true])?;
                    let s = t.sigmoid(att);
                    let l = t.log(s);
                    let one_minus = t.affine(s, -1.0, 1.0);
                    let l2 = t.log(one_minus);
                    let parts = [t.mean(l), t.mean(l2), t.sum(sm), t.mean(r), t.mean(r2)];
                    let mut acc = parts[0];
                    for &q in &parts[1..] {
                        acc = t.add(acc, q)?;
                    }
                    Ok(acc)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
