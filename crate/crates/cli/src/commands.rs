use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use binet_core::checks::{self, CheckOutcome};
use binet_core::data::{generate_corpus, Corpus, CUE_FILE, MANIFEST_FILE, SPEC_FILE};
use binet_core::metrics::{count_params, mean_std};
use binet_core::nn::{load_params, save_params, write_tensors};
use binet_core::train::{self, trace_csv};
use binet_core::{BinModel, Variant};
use log::info;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{check_compatible, RunConfig};
use crate::record::{prepare_out, sha256_file, RunRecord};
use crate::{AblateArgs, Command, Common, ConfigError, EvalArgs, ModelArgs, TraceArgs, TrainArgs, ValidationFailure};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const GRAD_CHECK_FILE: &str = "grad_check.csv";
pub const COUNT_FILE: &str = "count.json";
pub const MASK_DIR: &str = "masks";
pub const MODEL_DIR: &str = "models";

/// Runs one subcommand and returns the summary stored in `run.json`.
pub fn execute(cmd: Command) -> Result<Value> {
    match cmd {
        Command::SynthData(a) => synth_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::Count(a) => cmd_count(&a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref()).with_context(|| match &common.config {
        Some(p) => format!("loading config {}", p.display()),
        None => "default config".into(),
    })
}

fn apply_model_args(run: &mut RunConfig, a: &ModelArgs) {
    if let Some(s) = a.common.seed {
        run.train.seed = s;
    }
    if let Some(v) = a.variant {
        run.model.variant = v;
    }
    if let Some(r) = a.iterations {
        run.model.iterations = r;
    }
}

fn require_out(common: &Common) -> Result<PathBuf> {
    let Some(out) = common.out.clone() else {
        bail!(ConfigError("--out is required for this command".into()));
    };
    prepare_out(&out, common.force)?;
    Ok(out)
}

/// Digest of the files that define a corpus (the WAVs are derived from them).
pub fn corpus_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [SPEC_FILE, MANIFEST_FILE, CUE_FILE] {
        h.update(f.as_bytes());
        h.update(sha256_file(&dir.join(f))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn open_corpus(run: &RunConfig, out: &Path, rec: &mut RunRecord) -> Result<Corpus> {
    let dir = match &run.corpus_dir {
        Some(d) => d.clone(),
        None => {
            let d = out.join("corpus");
            fs::create_dir_all(&d)?;
            info!("generating corpus into {}", d.display());
            generate_corpus(&run.corpus, &d)?;
            d
        }
    };
    let corpus = Corpus::open(&dir).with_context(|| format!("opening corpus {}", dir.display()))?;
    check_compatible(&run.model, corpus.spec())?;
    rec.input("corpus", &dir, corpus_digest(&dir)?);
    Ok(corpus)
}

fn load_model(run: &RunConfig, checkpoint: Option<&Path>, rec: &mut RunRecord) -> Result<BinModel> {
    let mut model = BinModel::build(run.model.clone(), run.train.seed)?;
    if let Some(p) = checkpoint {
        load_params(model.store_mut(), p).with_context(|| format!("loading checkpoint {}", p.display()))?;
        rec.input("checkpoint", p, sha256_file(p)?);
    }
    Ok(model)
}

fn validated(run: &RunConfig) -> Result<()> {
    run.validate().context("invalid configuration")?;
    Ok(())
}

pub fn synth_data(a: &Common) -> Result<Value> {
    let mut run = load_config(a)?;
    if let Some(s) = a.seed {
        run.corpus.seed = s;
    }
    run.corpus.validate().context("invalid corpus configuration")?;
    let out = require_out(a)?;
    let entries = generate_corpus(&run.corpus, &out)?;
    let summary = json!({
        "examples": entries.len(),
        "train": run.corpus.n_train,
        "val": run.corpus.n_val,
        "test": run.corpus.n_test,
        "corpus_sha256": corpus_digest(&out)?,
    });
    println!("wrote {} examples to {}", entries.len(), out.display());
    let mut rec = RunRecord::new("synth-data", run.corpus.to_kv());
    rec.arg("seed", a.seed);
    rec.summary = summary.clone();
    rec.write(&out)?;
    Ok(summary)
}

pub fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let mut run = load_config(&a.model.common)?;
    apply_model_args(&mut run, &a.model);
    validated(&run)?;
    let out = require_out(&a.model.common)?;
    let mut rec = RunRecord::new("train", run.to_kv());
    let corpus = open_corpus(&run, &out, &mut rec)?;
    let mut model = BinModel::build(run.model.clone(), run.train.seed)?;
    let log = match &a.checkpoint {
        Some(dir) => {
            rec.input("resume", dir, sha256_file(&dir.join(train::CHECKPOINT_FILE))?);
            rec.arg("checkpoint", dir.display().to_string());
            train::resume(&mut model, &corpus, &run.train, dir, Some(&out))?
        }
        None => train::train(&mut model, &corpus, &run.train, Some(&out))?,
    };
    fs::write(out.join(TRAIN_LOG_FILE), log.to_csv())?;
    let last = log.rows.last();
    let summary = json!({
        "steps": last.map_or(0, |r| r.step),
        "final_loss": last.map(|r| r.loss),
        "best_val_si_sdri": log.best_val_si_sdri,
        "epoch_seeds": log.epoch_seeds,
        "skipped": log.skipped,
        "wall_seconds": log.wall_seconds,
        "params": model.count_params(),
    });
    println!(
        "trained {} steps; best validation SI-SDRi {}",
        last.map_or(0, |r| r.step),
        log.best_val_si_sdri.map_or("n/a".into(), |v| format!("{v:.3} dB"))
    );
    rec.summary = summary.clone();
    rec.write(&out)?;
    Ok(summary)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let mut run = load_config(&a.model.common)?;
    apply_model_args(&mut run, &a.model);
    validated(&run)?;
    if !a.mixture && a.checkpoint.is_none() {
        bail!(ConfigError("eval needs --checkpoint or --mixture".into()));
    }
    let out = require_out(&a.model.common)?;
    let mut rec = RunRecord::new("eval", run.to_kv());
    rec.arg("split", a.split).arg("mixture", a.mixture);
    let corpus = open_corpus(&run, &out, &mut rec)?;
    let report = if a.mixture {
        train::evaluate_mixture(&corpus, a.split, run.eval_limit)?
    } else {
        let ckpt = a.checkpoint.as_deref().expect("checked above");
        rec.arg("checkpoint", ckpt.display().to_string());
        let model = load_model(&run, Some(ckpt), &mut rec)?;
        train::evaluate(&model, &corpus, a.split, run.eval_limit)?
    };
    fs::write(out.join(EVAL_FILE), report.to_csv())?;
    let (sdr, _) = report.si_sdr();
    let (sdri, sdri_std) = report.si_sdri();
    println!("{}: {} scores, SI-SDR {sdr:.3} dB, SI-SDRi {sdri:.3} ± {sdri_std:.3} dB", a.split, report.scores.len());
    let summary = json!({
        "split": a.split,
        "scores": report.scores.len(),
        "si_sdr_mean": sdr,
        "si_sdri_mean": sdri,
        "si_sdri_std": sdri_std,
    });
    rec.summary = summary.clone();
    rec.write(&out)?;
    Ok(summary)
}

pub fn ablation_csv(rows: &[(Variant, u64, f64, f64)]) -> String {
    let mut s = String::from("variant,si_sdri_mean,si_sdri_std,seed\n");
    for (v, seed, mean, std) in rows {
        s.push_str(&format!("{v},{mean},{std},{seed}\n"));
    }
    s
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Value> {
    let mut run = load_config(&a.common)?;
    if let Some(s) = a.common.seed {
        run.ablation_seeds = vec![s];
    }
    if let Some(v) = a.variant {
        run.ablation_variants = vec![v];
    }
    if let Some(r) = a.iterations {
        run.model.iterations = r;
    }
    validated(&run)?;
    for &v in &run.ablation_variants {
        run.model.clone().with_variant(v).validate()?;
    }
    let out = require_out(&a.common)?;
    let mut rec = RunRecord::new("ablate", run.to_kv());
    rec.arg("split", a.split);
    let corpus = open_corpus(&run, &out, &mut rec)?;
    fs::create_dir_all(out.join(MODEL_DIR))?;
    let mut rows = Vec::new();
    for &seed in &run.ablation_seeds {
        for &variant in &run.ablation_variants {
            let mut model = BinModel::build(run.model.clone().with_variant(variant), seed)?;
            let cfg = train::TrainConfig { seed, ..run.train.clone() };
            train::train(&mut model, &corpus, &cfg, None)?;
            save_params(model.store(), &out.join(MODEL_DIR).join(format!("{variant}_seed{seed}.ckpt")))?;
            let (mean, std) = train::evaluate(&model, &corpus, a.split, run.eval_limit)?.si_sdri();
            info!("seed {seed} {variant}: SI-SDRi {mean:.3} ± {std:.3} dB");
            println!("{variant:<14} seed {seed}: {mean:8.3} dB");
            rows.push((variant, seed, mean, std));
        }
    }
    fs::write(out.join(ABLATION_FILE), ablation_csv(&rows))?;
    let per_variant: serde_json::Map<String, Value> = run
        .ablation_variants
        .iter()
        .map(|v| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.0 == *v).map(|r| r.2).collect();
            let (m, s) = mean_std(&vals);
            (v.to_string(), json!({ "mean_over_seeds": m, "std_over_seeds": s, "per_seed": vals }))
        })
        .collect();
    let summary = json!({ "split": a.split, "seeds": run.ablation_seeds, "variants": per_variant });
    rec.summary = summary.clone();
    rec.write(&out)?;
    Ok(summary)
}

pub fn cmd_trace(a: &TraceArgs) -> Result<Value> {
    let mut run = load_config(&a.model.common)?;
    apply_model_args(&mut run, &a.model);
    validated(&run)?;
    let out = require_out(&a.model.common)?;
    let mut rec = RunRecord::new("trace", run.to_kv());
    rec.arg("split", a.split);
    if let Some(c) = &a.checkpoint {
        rec.arg("checkpoint", c.display().to_string());
    }
    let corpus = open_corpus(&run, &out, &mut rec)?;
    let model = load_model(&run, a.checkpoint.as_deref(), &mut rec)?;
    let rows = train::iteration_trace(&model, &corpus, a.split, run.eval_limit)?;
    fs::write(out.join(TRACE_FILE), trace_csv(&rows))?;

    let mask_dir = out.join(MASK_DIR);
    fs::create_dir_all(&mask_dir)?;
    for &i in corpus.indices(a.split).iter().take(run.trace_dump) {
        let ex = corpus.load(i)?;
        let masks = model.per_iteration_masks(&ex.mixture, &ex.cues)?;
        let names: Vec<String> = (1..=masks.len()).map(|r| format!("iteration_{r}")).collect();
        write_tensors(&mask_dir.join(format!("{}.masks", ex.id)), names.iter().map(String::as_str).zip(&masks))?;
    }
    for r in &rows {
        println!("iteration {:>3}: {:8.3} ± {:.3} dB", r.iteration, r.si_sdri_mean, r.si_sdri_std);
    }
    let summary = serde_json::to_value(&rows)?;
    rec.summary = summary.clone();
    rec.write(&out)?;
    Ok(summary)
}

fn grad_check_csv(rows: &[CheckOutcome]) -> String {
    let mut s = String::from("check,probes,max_rel_err,tolerance,passed\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e},{:e},{}\n", r.name, r.probes, r.max_rel_err, r.tolerance, r.passed()));
    }
    s
}

pub fn cmd_grad_check(a: &ModelArgs) -> Result<Value> {
    let mut run = load_config(&a.common)?;
    apply_model_args(&mut run, a);
    validated(&run)?;
    let out = match &a.common.out {
        Some(_) => Some(require_out(&a.common)?),
        None => None,
    };
    let variants = match a.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut rows = checks::primitive_suite(run.train.seed)?;
    rows.extend(checks::model_suite(&run.model, &variants, run.grad_probes, run.train.seed)?);
    for r in &rows {
        println!(
            "{:<24} {:>5} probes  max rel err {:.3e}  (tol {:.0e})  {}",
            r.name,
            r.probes,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let summary = json!({ "checks": rows, "failed": failed });
    if let Some(out) = &out {
        fs::write(out.join(GRAD_CHECK_FILE), grad_check_csv(&rows))?;
        let mut rec = RunRecord::new("grad-check", run.to_kv());
        rec.summary = summary.clone();
        rec.write(out)?;
    }
    if !failed.is_empty() {
        bail!(ValidationFailure(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(summary)
}

pub fn cmd_count(a: &ModelArgs) -> Result<Value> {
    let mut run = load_config(&a.common)?;
    apply_model_args(&mut run, a);
    run.model.validate().context("invalid model configuration")?;
    let model = BinModel::build(run.model.clone(), run.train.seed)?;
    let macs = model.mac_breakdown();
    let params = count_params(model.store());
    println!("variant      {}", run.model.variant);
    println!("iterations   {}", run.model.iterations);
    println!("params       {params}");
    println!("macs         {}", macs.total());
    println!("  encoders   {}", macs.audio_encoder + macs.video_encoder);
    println!("  fusion     {}", macs.fusion());
    println!("  head       {}", macs.predictor + macs.decoder);
    println!("codec share  {:.4}", macs.codec_fraction());
    let summary = json!({
        "variant": run.model.variant,
        "iterations": run.model.iterations,
        "params": params,
        "macs": macs.total(),
        "breakdown": macs,
        "codec_fraction": macs.codec_fraction(),
    });
    if a.common.out.is_some() {
        let out = require_out(&a.common)?;
        fs::write(out.join(COUNT_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
        let mut rec = RunRecord::new("count", run.to_kv());
        rec.summary = summary.clone();
        rec.write(&out)?;
    }
    Ok(summary)
}
