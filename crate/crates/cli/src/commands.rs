use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use transpotter::data::{load_dataset, read_features, synthesize_dataset};
use transpotter::evaluation::{
    build_query_vocabulary, decode_span, evaluate, length_curve_svg, probe, score_grid, strata_csv,
    stratified_report, worker_threads, BucketMode, StratumAxis,
};
use transpotter::model::{forward, load_checkpoint, Localization, Parameters};
use transpotter::phonetics::Lexicon;
use transpotter::training::{train, TrainOptions};

use crate::config::{sha256_hex, RunConfig};
use crate::{Command, Common};

pub fn run(command: Command, common: &Common, overrides: &[(String, String)]) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref(), overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.propagate_seed();
    }
    match command {
        Command::Synth => synth(&cfg, common),
        Command::Train { variant, lambda, data } => {
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            train_cmd(&cfg, common)
        }
        Command::Eval {
            checkpoint,
            manifest,
            lexicon,
            min_phonemes,
            tau,
            ngram,
        } => {
            if let Some(n) = min_phonemes {
                cfg.eval.min_phonemes = n;
            }
            if let Some(t) = tau {
                cfg.eval.tau = t;
            }
            eval(&cfg, common, &checkpoint, manifest, lexicon, ngram)
        }
        Command::Spot {
            checkpoint,
            features,
            lexicon,
            tau,
            curve,
            keyword,
        } => {
            if let Some(t) = tau {
                cfg.eval.tau = t;
            }
            spot(&cfg, common, &checkpoint, &features, lexicon, curve, &keyword)
        }
        Command::Probe {
            checkpoint,
            manifest,
            lexicon,
            clip,
            queries,
        } => probe_cmd(&cfg, common, &checkpoint, manifest, lexicon, &clip, &queries),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            bail!("{} exists and is not empty; pass --force to overwrite", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(cfg: &RunConfig, common: &Common) -> Result<()> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    cfg.synth.validate()?;
    fresh_dir(&dir, common.force)?;
    let ds = synthesize_dataset(&cfg.synth)?;
    ds.write(&dir)?;
    let frames = ds.total_frames();
    let summary = json!({
        "train_clips": ds.train.len(),
        "test_clips": ds.test.len(),
        "vocabulary": ds.words.len(),
        "homophemes": ds.homophemes,
        "frames": frames,
        "hours_at_25fps": frames as f64 / 25.0 / 3600.0,
    });
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write(&dir.join("config.json"), cfg.to_pretty_json())?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn train_cmd(cfg: &RunConfig, common: &Common) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data = &cfg.paths.data;
    let clips = load_dataset(data.join(&cfg.paths.train_manifest))?;
    let lexicon = Lexicon::load(data.join(&cfg.paths.lexicon))?;
    let echoed = cfg.to_pretty_json();
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => cfg.paths.runs.join(format!(
            "{}-{}",
            cfg.model.variant,
            &sha256_hex(echoed.as_bytes())[..12]
        )),
    };
    if common.resume {
        let previous = fs::read_to_string(dir.join("config.json")).unwrap_or_default();
        if previous != echoed {
            bail!("{} was trained with a different config; cannot resume", dir.display());
        }
    } else {
        fresh_dir(&dir, common.force)?;
        write(&dir.join("config.json"), &echoed)?;
    }
    let opts = TrainOptions {
        out_dir: Some(&dir),
        resume: common.resume,
    };
    let outcome = train(&cfg.model, &cfg.train, &clips, &lexicon, &opts, |r| {
        eprintln!(
            "epoch {:>4}  train {:.4}  val {:.4}  lr {:.2e}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        );
    })?;
    println!(
        "{}",
        json!({
            "run": dir.display().to_string(),
            "best_epoch": outcome.best_epoch,
            "best_checkpoint": dir.join("best.ckpt").display().to_string(),
        })
    );
    Ok(())
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn lexicon_beside(manifest: &Path, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join(name))
}

fn eval(
    cfg: &RunConfig,
    common: &Common,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    ngram: usize,
) -> Result<()> {
    cfg.eval.validate()?;
    if ngram == 0 {
        bail!("--ngram must be at least 1");
    }
    let manifest = manifest.unwrap_or_else(|| cfg.paths.data.join(&cfg.paths.test_manifest));
    let lexicon = Lexicon::load(lexicon_beside(&manifest, lexicon, &cfg.paths.lexicon))?;
    let params: Parameters<f32> = load_checkpoint(checkpoint, None)?;
    let clips = load_dataset(&manifest)?;
    let records: Vec<_> = clips.iter().map(|c| c.record.clone()).collect();
    let (queries, skipped) = build_query_vocabulary(&records, &lexicon, cfg.eval.min_phonemes, ngram);
    if queries.is_empty() {
        bail!("no test keyword has {} or more phonemes", cfg.eval.min_phonemes);
    }
    let grid = score_grid(&params, &queries, &clips, worker_threads())?;
    let rep = evaluate(&grid, &cfg.eval)?;

    let dir = common.out.clone().unwrap_or_else(|| checkpoint_dir(checkpoint).join("eval"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut headline = serde_json::Map::new();
    for (k, v) in &rep.acc {
        headline.insert(format!("acc@{k}"), json!(v));
    }
    headline.insert("map_cls".into(), json!(rep.map_cls));
    headline.insert("map_loc".into(), rep.map_loc.map_or(json!("-"), |v| json!(v)));
    headline.insert("queries".into(), json!(rep.queries));
    headline.insert("clips".into(), json!(rep.clips));
    headline.insert("out_of_lexicon".into(), json!(skipped.len()));
    let text = serde_json::to_string_pretty(&headline)? + "\n";
    write(&dir.join("report.json"), &text)?;
    write(&dir.join("metrics.csv"), rep.to_csv())?;
    for axis in [StratumAxis::KeywordPhonemeLength, StratumAxis::ClipWordCount] {
        let rows = stratified_report(&grid, axis, cfg.eval.bucket_mode, &cfg.eval)?;
        write(
            &dir.join(format!("strata_{}.csv", axis.name())),
            strata_csv(axis, cfg.eval.bucket_mode, &rows),
        )?;
        if axis == StratumAxis::KeywordPhonemeLength {
            let cumulative = stratified_report(&grid, axis, BucketMode::Cumulative, &cfg.eval)?;
            write(&dir.join("map_by_length.svg"), length_curve_svg(&cumulative))?;
        }
    }
    write(&dir.join("config.json"), cfg.to_pretty_json())?;
    print!("{text}");
    Ok(())
}

/// Maximal runs of consecutive frames as `[start,end)` strings.
fn runs(frames: &[usize]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < frames.len() {
        let mut j = i;
        while j + 1 < frames.len() && frames[j + 1] == frames[j] + 1 {
            j += 1;
        }
        out.push(format!("[{},{})", frames[i], frames[j] + 1));
        i = j + 1;
    }
    out
}

fn spot(
    cfg: &RunConfig,
    common: &Common,
    checkpoint: &Path,
    features: &Path,
    lexicon: Option<PathBuf>,
    curve: Option<PathBuf>,
    keyword: &[String],
) -> Result<()> {
    cfg.eval.validate()?;
    let words: Vec<String> = keyword.iter().flat_map(|k| k.split_whitespace()).map(str::to_string).collect();
    let lexicon = Lexicon::load(lexicon.unwrap_or_else(|| cfg.paths.data.join(&cfg.paths.lexicon)))?;
    let query = lexicon.phonemize_phrase(&words)?;
    let params: Parameters<f32> = load_checkpoint(checkpoint, None)?;
    let feats = read_features(features)?;
    let pred = forward(&params, &feats.to_tensor(), &query.ids)?;
    let (frames, probs): (Option<Vec<usize>>, Option<Vec<f64>>) = match &pred.loc {
        Some(Localization::Frames(p)) => {
            let p: Vec<f64> = p.iter().map(|&v| f64::from(v)).collect();
            let on = (0..p.len()).filter(|&t| p[t] >= cfg.eval.tau).collect();
            (Some(on), Some(p))
        }
        Some(Localization::Span { start, end }) => {
            let w = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
            (Some(decode_span(&w(start), &w(end))), None)
        }
        None => (None, None),
    };
    let mut out = String::new();
    let _ = writeln!(out, "query\t{}", query.text);
    let _ = writeln!(out, "presence\t{:.6}", pred.cls);
    let spans = frames.map_or("-".to_string(), |f| runs(&f).join(" "));
    let _ = writeln!(out, "spans\t{spans}");
    print!("{out}");
    if let Some(path) = curve {
        let Some(p) = probs else {
            bail!(transpotter::Error::Capability(format!(
                "{} has no per-frame curve",
                params.config().variant
            )));
        };
        let mut csv = String::from("frame,prob\n");
        for (t, v) in p.iter().enumerate() {
            let _ = writeln!(csv, "{t},{v:.6}");
        }
        write(&path, csv)?;
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("config.json"), cfg.to_pretty_json())?;
    }
    Ok(())
}

fn probe_cmd(
    cfg: &RunConfig,
    common: &Common,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    clip: &str,
    queries: &[String],
) -> Result<()> {
    let manifest = manifest.unwrap_or_else(|| cfg.paths.data.join(&cfg.paths.test_manifest));
    let lexicon = Lexicon::load(lexicon_beside(&manifest, lexicon, &cfg.paths.lexicon))?;
    let params: Parameters<f32> = load_checkpoint(checkpoint, None)?;
    let clips = load_dataset(&manifest)?;
    let Some(target) = clips.iter().find(|c| c.record.id == clip) else {
        let ids: Vec<&str> = clips.iter().map(|c| c.record.id.as_str()).collect();
        bail!(transpotter::Error::Config(format!(
            "unknown clip id {clip:?}; available: {}",
            ids.join(", ")
        )));
    };
    let mut qs = Vec::with_capacity(queries.len());
    for q in queries {
        let words: Vec<&str> = q.split_whitespace().collect();
        qs.push((q.clone(), lexicon.phonemize_phrase(&words)?));
    }
    let result = probe(&params, target, &qs)?;
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| checkpoint_dir(checkpoint).join(format!("probe-{clip}")));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("probe.csv"), result.to_csv())?;
    write(&dir.join("probe.svg"), result.to_svg())?;
    write(&dir.join("config.json"), cfg.to_pretty_json())?;
    for c in &result.curves {
        println!(
            "{}\tpresence {:.6}\targmax {}",
            c.label,
            c.cls,
            c.argmax().map_or("-".into(), |t| t.to_string())
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}
