use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use tsets_core::baselines::Baseline;
use tsets_core::data::{build_dataset, load_jsonl, subsample_train, write_jsonl, PrepOptions};
use tsets_core::synth::{gen_cooccur, gen_repeat, CooccurConfig, RepeatConfig};
use tsets_core::training::{self, evaluate_baseline, evaluate_model, run_grad_audit, TrainConfig};
use tsets_core::{Ablation, Checkpoint, Dataset, MetricsReport};

use crate::{ConfigFlags, EvalArgs, GradcheckArgs, PredictArgs, PreprocessArgs, SynthArgs, SynthKind, TrainArgs};

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn preprocess(args: PreprocessArgs) -> Result<ExitCode> {
    let records = load_jsonl(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let opts = PrepOptions {
        coverage: args.coverage,
        min_history: args.min_history,
        t_max: args.t_max,
        ratios: [args.split[0], args.split[1], args.split[2]],
        seed: args.seed,
    };
    let ds = build_dataset(&records, &opts)?;
    ds.save(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    log::info!(
        "{} records -> {} elements, {}/{}/{} train/valid/test users",
        records.len(),
        ds.num_elements(),
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn resolve_config(flags: &ConfigFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$( if let Some(v) = flags.$f { cfg.$f = v; } )*};
    }
    set!(epochs, lr, batch_size, lambda, embed_dim, conv_dim, conv_layers, heads, seed, ablation, graph_mode, select_k, workers);
    cfg.standardize |= flags.standardize;
    cfg.normalized_aggregation |= flags.normalized_aggregation;
    if flags.embed_dim.is_some() && flags.conv_dim.is_none() && flags.config.is_none() {
        cfg.conv_dim = cfg.embed_dim;
    }
    if flags.embed_dim.is_some() {
        cfg.attn_dim = None;
    }
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = resolve_config(&args.flags)?;
    if let Some(f) = args.train_fraction {
        cfg.train_fraction = f;
    }
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("config.json"), &cfg)?;

    let out = training::train(&ds, &cfg)?;
    fs::write(args.out.join("train_log.csv"), out.log_csv())?;
    out.checkpoint(&ds)
        .save(args.out.join("checkpoint.json"))
        .context("writing checkpoint")?;
    log::info!(
        "best epoch {} with validation recall@{} = {:.4}",
        out.best_epoch,
        cfg.select_k,
        out.best_score()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let ds = load_dataset(&args.data)?;
    let users = if args.split == "valid" { &ds.valid } else { &ds.test };
    ensure!(!users.is_empty(), "the {} split is empty", args.split);
    let m = ds.num_elements();
    let keep = args.per_user.is_some();
    let report: MetricsReport = if let Some(kind) = args.baseline {
        let train_users = match args.train_fraction {
            Some(f) => subsample_train(&ds, f, args.seed)?.train,
            None => ds.train.clone(),
        };
        let baseline = Baseline::fit(kind, &train_users, m)?;
        evaluate_baseline(&baseline, users, m, &args.k, keep)?
    } else {
        let path = args.checkpoint.as_deref().expect("clap requires a checkpoint");
        let ck = load_checkpoint(path)?;
        ck.expect_elements(m)?;
        if let Some(vocab) = &ck.vocab {
            if vocab.as_slice() != ds.vocab.raw_ids() {
                bail!("checkpoint vocabulary does not match the dataset's");
            }
        }
        let ablation = args.ablation.unwrap_or(ck.ablation);
        let params = ck.params()?;
        params.config().validate(ablation)?;
        evaluate_model(&params, users, ablation, &args.k, keep)?
    };

    match &args.csv {
        Some(p) => {
            let mut w = create(p)?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
        None => report.write_csv(io::stdout().lock())?,
    }
    if let Some(p) = &args.json {
        write_json(p, &report)?;
    }
    if let (Some(p), Some(rows)) = (&args.per_user, &report.per_user) {
        let mut w = create(p)?;
        writeln!(w, "user,k,recall,ndcg,hit")?;
        for r in rows {
            writeln!(w, "{},{},{},{},{}", users[r.user].user, r.k, r.recall, r.ndcg, r.hit as u8)?;
        }
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Ranked {
    element: String,
    probability: f64,
}

pub fn predict(args: PredictArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let params = ck.params()?;
    let text = match (&args.history, &args.history_file) {
        (Some(h), _) => h.clone(),
        (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => bail!("pass --history or --history-file"),
    };
    let raw: Vec<Vec<String>> = serde_json::from_str(&text).context("history must be a JSON array of arrays of ids")?;
    let m = params.config().num_elements;
    let lookup = |id: &str| -> Option<usize> {
        match &ck.vocab {
            Some(v) => v.iter().position(|x| x == id),
            None => id.parse().ok().filter(|&i| i < m),
        }
    };
    let mut history = Vec::new();
    let mut unknown = 0;
    for set in &raw {
        let mut s: Vec<usize> = set
            .iter()
            .filter_map(|id| {
                let i = lookup(id);
                unknown += i.is_none() as usize;
                i
            })
            .collect();
        s.sort_unstable();
        s.dedup();
        if !s.is_empty() {
            history.push(s);
        }
    }
    if unknown > 0 {
        log::warn!("dropped {unknown} ids outside the model vocabulary");
    }
    ensure!(!history.is_empty(), "history has no known elements");
    ensure!(args.k >= 1 && args.k <= m, "k must be in 1..={m}");

    let probs = params.predict_history(&history, ck.ablation)?;
    let top = tsets_core::metrics::topk(&probs, args.k)?;
    let ranked: Vec<Ranked> = top
        .into_iter()
        .map(|i| Ranked {
            element: ck.vocab.as_ref().map_or_else(|| i.to_string(), |v| v[i].clone()),
            probability: probs[i],
        })
        .collect();
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &ranked)?;
    writeln!(out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn synth(args: SynthArgs) -> Result<ExitCode> {
    let records = match args.kind {
        SynthKind::Repeat {
            users,
            elements,
            steps,
            basket_size,
            p_repeat,
            noise,
            seed,
        } => gen_repeat(&RepeatConfig {
            users,
            num_elements: elements,
            steps,
            basket_size,
            p_repeat,
            noise,
            seed,
        })?,
        SynthKind::Cooccur {
            users,
            elements,
            steps,
            cues_per_set,
            pair_strength,
            noise,
            seed,
        } => gen_cooccur(&CooccurConfig {
            users,
            num_elements: elements,
            steps,
            cues_per_set,
            pair_strength,
            noise,
            seed,
        })?,
    };
    match &args.output {
        Some(p) => write_jsonl(p, &records).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = io::stdout().lock();
            for r in &records {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AuditEntry {
    ablation: Ablation,
    heads: usize,
    report: tsets_core::autodiff::GradCheckReport,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let base = resolve_config(&args.flags)?;
    let runs: Vec<TrainConfig> = if args.all {
        Ablation::ALL
            .into_iter()
            .flat_map(|ablation| {
                let base = base.clone();
                [1, 2].map(move |heads| TrainConfig {
                    ablation,
                    heads,
                    ..base.clone()
                })
            })
            .collect()
    } else {
        vec![base]
    };
    let mut entries = Vec::new();
    let mut ok = true;
    for cfg in runs {
        let report = run_grad_audit(&cfg)?;
        println!(
            "{} H={}: max rel err {:.3e} (tol {:.0e}) {}",
            cfg.ablation,
            cfg.heads,
            report.max_rel_error,
            report.tolerance,
            if report.passed { "ok" } else { "FAILED" }
        );
        for t in report.tensors.iter().filter(|t| !t.passed) {
            println!("  {}: rel {:.3e} abs {:.3e}", t.name, t.max_rel_error, t.max_abs_error);
        }
        ok &= report.passed;
        entries.push(AuditEntry {
            ablation: cfg.ablation,
            heads: cfg.heads,
            report,
        });
    }
    if let Some(p) = &args.json {
        write_json(p, &entries)?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
