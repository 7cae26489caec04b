use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{sample_loss_node, total_loss};
use super::optim::{adam_step, OptimizerState};
use super::sampler::Sampler;
use super::{TrainConfig, TrainingPair};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::model::{
    decode_container, encode_container, forward, init_parameters, load_checkpoint, save_checkpoint,
    Graph, ModelConfig, Parameters,
};
use crate::numerics::Tape;
use crate::phonetics::Lexicon;
use crate::{GradientRecord, Tensor};

const STATE_MAGIC: &[u8; 4] = b"TPST";

/// RNG streams reserved outside the per-epoch range.
const SPLIT_STREAM: u64 = u64::MAX;
const VAL_STREAM: u64 = u64::MAX - 1;
const PROBE_STREAM: u64 = u64::MAX - 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Receives `metrics.csv`, `best.ckpt`, `last.ckpt` and `state.tpst`.
    pub out_dir: Option<&'a Path>,
    /// Continue from the last completed epoch found in `out_dir`.
    pub resume: bool,
}

pub struct TrainOutcome {
    pub best: Parameters<f32>,
    pub last: Parameters<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Seeded train/validation split of clip indices.
pub fn split_clips(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

fn mean_loss(params: &Parameters<f32>, pairs: &[TrainingPair], lambda: f64) -> Result<f64> {
    let mut preds = Vec::with_capacity(pairs.len());
    for p in pairs {
        preds.push(forward(params, &p.features.to_tensor(), &p.query.ids)?);
    }
    let batch: Vec<_> = preds.iter().zip(pairs).collect();
    total_loss(&batch, lambda)
}

/// Renders a metrics log as CSV text.
pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    s
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    best_epoch: usize,
    step: u64,
    lr: f64,
    plateau_count: usize,
    best_val: Option<f64>,
    log: Vec<EpochLog>,
}

/// Writes optimizer moments and schedule state next to a checkpoint.
pub fn save_optimizer_state(
    path: &Path,
    state: &OptimizerState<f32>,
    epoch: usize,
    best_epoch: usize,
    log: &[EpochLog],
) -> Result<()> {
    let header = StateHeader {
        epoch,
        best_epoch,
        step: state.step,
        lr: state.lr,
        plateau_count: state.plateau_count,
        best_val: state.best_val,
        log: log.to_vec(),
    };
    let names: Vec<String> = (0..state.m.len())
        .flat_map(|i| [format!("m.{i}"), format!("v.{i}")])
        .collect();
    let tensors: Vec<(&str, &Tensor<f32>)> = names
        .iter()
        .zip(state.m.iter().zip(&state.v).flat_map(|(m, v)| [m, v]))
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let bytes = encode_container(STATE_MAGIC, &serde_json::to_string(&header)?, &tensors);
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

/// Returns the state, the last completed epoch, the best epoch and the log.
pub fn load_optimizer_state(path: &Path) -> Result<(OptimizerState<f32>, usize, usize, Vec<EpochLog>)> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    let (header, tensors) = decode_container::<f32>(STATE_MAGIC, &bytes).map_err(|e| e.at(path))?;
    let h: StateHeader = serde_json::from_str(&header)?;
    if tensors.len() % 2 != 0 {
        return Err(Error::Format {
            offset: 0,
            msg: "odd moment count".into(),
        }
        .at(path));
    }
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (i, (_, t)) in tensors.into_iter().enumerate() {
        if i % 2 == 0 { m.push(t) } else { v.push(t) }
    }
    let state = OptimizerState {
        m,
        v,
        step: h.step,
        lr: h.lr,
        plateau_count: h.plateau_count,
        best_val: h.best_val,
    };
    Ok((state, h.epoch, h.best_epoch, h.log))
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
}

impl Outputs<'_> {
    fn write(&self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        match self.dir {
            Some(d) => f(&d.join(name)),
            None => Ok(()),
        }
    }
}

/// Trains a model from `cfg.seed` (or resumes one) on `clips`.
///
/// Each epoch draws `samples_per_epoch` pairs from its own RNG stream, so an
/// interrupted run resumes onto the same trajectory. Epoch 0 records the
/// losses of the initial parameters.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    clips: &[Clip],
    lexicon: &Lexicon,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if let Some(c) = clips.iter().find(|c| c.features.dim() != model.input_dim) {
        return Err(Error::Config(format!(
            "clip {} has {}-dim features but the model expects {}",
            c.record.id,
            c.features.dim(),
            model.input_dim
        )));
    }
    let out = Outputs { dir: opts.out_dir };
    if let Some(d) = opts.out_dir {
        fs::create_dir_all(d).map_err(|e| Error::from(e).at(d))?;
    }

    let (tr, va) = split_clips(clips.len(), cfg.val_fraction, cfg.seed);
    let train_clips: Vec<Clip> = tr.iter().map(|&i| clips[i].clone()).collect();
    let val_clips: Vec<Clip> = va.iter().map(|&i| clips[i].clone()).collect();
    let sampler = Sampler::new(&train_clips, lexicon, cfg.sampler())?;
    let draw = |s: &Sampler, n: usize, rng_stream: u64| -> Result<Vec<TrainingPair>> {
        let mut rng = stream(cfg.seed, rng_stream);
        (0..n).map(|_| s.sample(&mut rng)).collect()
    };
    let n_val = if cfg.val_pairs > 0 { cfg.val_pairs } else { 4 * val_clips.len() };
    let val_pairs = if val_clips.is_empty() {
        Vec::new()
    } else {
        draw(&Sampler::new(&val_clips, lexicon, cfg.sampler())?, n_val, VAL_STREAM)?
    };
    let per_epoch = if cfg.samples_per_epoch > 0 {
        cfg.samples_per_epoch
    } else {
        train_clips.len()
    };
    let probe_pairs = draw(&sampler, n_val.clamp(1, per_epoch), PROBE_STREAM)?;
    let schedule = cfg.schedule();

    let (mut params, mut state, mut best, first, mut best_epoch, mut log) = match (opts.resume, opts.out_dir) {
        (true, Some(d)) => {
            let params = load_checkpoint::<f32>(d.join("last.ckpt"), Some(model))?;
            let best = load_checkpoint::<f32>(d.join("best.ckpt"), Some(model))?;
            let (state, epoch, best_epoch, log) = load_optimizer_state(&d.join("state.tpst"))?;
            if state.m.len() != params.tensors().len() {
                return Err(Error::Config("optimizer state does not match the checkpoint".into()));
            }
            (params, state, best, epoch + 1, best_epoch, log)
        }
        (true, None) => return Err(Error::Config("resume needs an output directory".into())),
        (false, _) => {
            let params = init_parameters::<f32>(model, cfg.seed)?;
            let state = OptimizerState::new(params.tensors(), cfg.lr);
            let best = params.clone();
            (params, state, best, 0, 0, Vec::new())
        }
    };

    let lambda = cfg.lambda;
    let mut grads = GradientRecord::zeros_like(params.tensors());
    for epoch in first..=cfg.epochs {
        let train_loss = if epoch == 0 {
            mean_loss(&params, &probe_pairs, lambda)?
        } else {
            let mut rng = stream(cfg.seed, epoch as u64);
            let mut sum = 0.0;
            let mut done = 0;
            while done < per_epoch {
                let b = cfg.batch_size.min(per_epoch - done);
                grads.scale(0.0);
                for _ in 0..b {
                    let pair = sampler.sample(&mut rng)?;
                    let mut tape = Tape::new();
                    let feats = pair.features.to_tensor::<f32>();
                    let mut graph = Graph::new(&mut tape, &params).with_dropout(&mut rng);
                    let heads = graph.forward(&feats, &pair.query.ids)?;
                    let root = sample_loss_node(&mut tape, &heads, &pair, lambda)?;
                    let value = tape.value(root).item() as f64;
                    if !value.is_finite() {
                        out.write("diagnostic.ckpt", |p| save_checkpoint(p, &params))?;
                        return Err(Error::NonFinite(format!(
                            "training loss at epoch {epoch} on clip {} / query {}",
                            pair.clip, pair.query.text
                        )));
                    }
                    sum += value;
                    tape.backward_into(root, &mut grads, 1.0 / b as f32)?;
                }
                done += b;
                let norm = grads.global_norm() as f64;
                if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                    grads.scale((cfg.clip_norm / norm) as f32);
                }
                if let Err(e) = adam_step(params.tensors_mut(), &grads, &mut state, &cfg.adam) {
                    out.write("diagnostic.ckpt", |p| save_checkpoint(p, &params))?;
                    return Err(e);
                }
            }
            sum / per_epoch as f64
        };
        let val_loss = if val_pairs.is_empty() {
            train_loss
        } else {
            mean_loss(&params, &val_pairs, lambda)?
        };
        if !val_loss.is_finite() || !params.is_finite() {
            out.write("diagnostic.ckpt", |p| save_checkpoint(p, &params))?;
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let row = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: state.lr,
        };
        if schedule.observe(&mut state, val_loss) {
            best = params.clone();
            best_epoch = epoch;
            out.write("best.ckpt", |p| save_checkpoint(p, &best))?;
        }
        log.push(row);
        out.write("metrics.csv", |p| {
            fs::write(p, metrics_csv(&log)).map_err(|e| Error::from(e).at(p))
        })?;
        out.write("last.ckpt", |p| save_checkpoint(p, &params))?;
        out.write("state.tpst", |p| save_optimizer_state(p, &state, epoch, best_epoch, &log))?;
        on_epoch(&row);
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions_and_repeats() {
        let (tr, va) = split_clips(50, 0.1, 3);
        assert_eq!((tr.len(), va.len()), (45, 5));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_clips(50, 0.1, 3), (tr, va));
        assert_ne!(split_clips(50, 0.1, 4).1, split_clips(50, 0.1, 3).1);
        assert_eq!(split_clips(3, 0.01, 0).1.len(), 1);
        assert!(split_clips(10, 0.0, 0).1.is_empty());
    }

    #[test]
    fn csv_layout() {
        let log = [EpochLog { epoch: 0, train_loss: 0.5, val_loss: 0.25, lr: 1e-3 }];
        assert_eq!(metrics_csv(&log), "epoch,train_loss,val_loss,lr\n0,0.500000,0.250000,0.001\n");
    }
}
