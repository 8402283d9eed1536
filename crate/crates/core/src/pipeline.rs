//! Stage orchestration shared by the command-line tool and the tests.
//!
//! Every stage is a function of the [`RunConfig`]; [`run`] chains them and
//! writes the artifacts into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{collect_act_scales, CalibrationStats, EmbeddingExport, LayerFeatures};
use crate::config::RunConfig;
use crate::ggufx::{model_from_gguf, parse_document, write_gguf, ExportOptions};
use crate::quantcore::{apply_allocation, mean_bits, Allocation, AllocationReport};
use crate::rlenv::{BitAllocEnv, EpisodeOutcome};
use crate::sacagent::{apply_policy, save_policy, LogEntry, Trainer};
use crate::scalefold::{compute_fold_scales, FoldParams};
use crate::tinylm::{generate_model, load_model, perplexity, save_model, save_sequences, Corpus, TinyModel};
use crate::{Error, Result};

pub const MODEL_FILE: &str = "model.rmpm";
pub const MODEL_META_FILE: &str = "model.json";
pub const CALIBRATION_TOKENS: &str = "calibration.tokens";
pub const EVALUATION_TOKENS: &str = "evaluation.tokens";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const POLICY_DIR: &str = "policy";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const ALLOCATION_FILE: &str = "allocation.json";
pub const GGUF_FILE: &str = "model.gguf";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

/// Sidecar of a binary model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: crate::tinylm::TinyModelSpec,
    pub n_layers: usize,
    pub config_hash: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_or_generate_model(cfg: &RunConfig) -> Result<TinyModel> {
    match &cfg.model_path {
        Some(p) => load_model(p),
        None => generate_model(&cfg.model_spec()),
    }
}

pub fn build_corpus(cfg: &RunConfig, vocab_size: usize) -> Result<Corpus> {
    let c = &cfg.corpus;
    Corpus::synthetic(vocab_size, c.n_calibration, c.n_evaluation, c.seq_len, c.zipf_exponent, cfg.seed)
}

pub fn calibrate(cfg: &RunConfig, model: &TinyModel, corpus: &Corpus) -> Result<CalibrationStats> {
    collect_act_scales(model, &corpus.calibration, cfg.corpus.calibration_sequences)
}

pub fn fold_params(cfg: &RunConfig, model: &TinyModel, stats: &CalibrationStats) -> Result<Option<FoldParams>> {
    if cfg.env.fold {
        Ok(Some(compute_fold_scales(stats, model.blocks.len())?))
    } else {
        Ok(None)
    }
}

pub fn build_env(cfg: &RunConfig, model: &TinyModel, stats: &CalibrationStats, corpus: &Corpus) -> Result<BitAllocEnv> {
    BitAllocEnv::new(
        model.clone(),
        stats,
        corpus.evaluation.clone(),
        cfg.env.clone(),
        cfg.layers.clone(),
    )
}

/// Expands a policy allocation over `cfg.layers` to every layer; layers the
/// policy does not control keep the palette's widest width.
pub fn full_allocation(cfg: &RunConfig, model: &TinyModel, bits: &[u8]) -> Result<Vec<u8>> {
    match &cfg.layers {
        None => {
            if bits.len() != model.n_layers() {
                return Err(Error::Shape(format!(
                    "allocation of {} layers for a {}-layer model",
                    bits.len(),
                    model.n_layers()
                )));
            }
            Ok(bits.to_vec())
        }
        Some(layers) => {
            if layers.len() != bits.len() {
                return Err(Error::Shape(format!("{} bits for {} selected layers", bits.len(), layers.len())));
            }
            let mut full = vec![cfg.env.palette.max(); model.n_layers()];
            for (&l, &b) in layers.iter().zip(bits) {
                full[l] = b;
            }
            Ok(full)
        }
    }
}

pub fn allocation_report(
    cfg: &RunConfig,
    model: &TinyModel,
    fold: Option<&FoldParams>,
    bits: Vec<u8>,
) -> Result<AllocationReport> {
    let alloc = Allocation::new(bits, &cfg.env.palette, &model.spec, &cfg.type_map)?;
    let (_, per_layer) = apply_allocation(model, &alloc.bits, fold, cfg.env.group_size)?;
    Ok(AllocationReport {
        palette: cfg.env.palette.clone(),
        avg_bits: alloc.avg_bits,
        model_bytes: alloc.model_bytes,
        bits: alloc.bits,
        per_layer,
        fold: fold.cloned(),
        config_hash: Some(cfg.hash()?),
    })
}

/// Zero-shot allocation of a trained policy over `layers` of `model`, with
/// features standardized by the policy's source statistics.
pub fn transfer_allocation(
    actor: &crate::sacagent::Actor<f32>,
    manifest: &crate::sacagent::PolicyManifest,
    model: &TinyModel,
    stats: &CalibrationStats,
    layers: &[usize],
) -> Result<Vec<u8>> {
    let own = LayerFeatures::for_layers(model, stats, layers)?;
    apply_policy(actor, &own.raw, &manifest.standardizer()?, &manifest.palette)
}

/// Layers the policy controls under `cfg`.
pub fn policy_layers(cfg: &RunConfig, model: &TinyModel) -> Vec<usize> {
    cfg.layers.clone().unwrap_or_else(|| (0..model.n_layers()).collect())
}

/// Model, corpus and activation statistics: the inputs of every later stage.
pub fn prepare(cfg: &RunConfig) -> Result<(TinyModel, Corpus, CalibrationStats)> {
    let model = load_or_generate_model(cfg)?;
    let corpus = build_corpus(cfg, model.spec.vocab_size)?;
    let stats = calibrate(cfg, &model, &corpus)?;
    Ok((model, corpus, stats))
}

/// Trains with periodic policy checkpoints under `out/policy`.
pub fn train(cfg: &RunConfig, env: BitAllocEnv, out: Option<&Path>, source_model: &str) -> Result<Trainer> {
    let mut trainer = Trainer::new(env, cfg.train.clone(), cfg.seed)?;
    let hash = cfg.hash()?;
    while trainer.episodes_done() < cfg.train.episodes {
        trainer.run_episode()?;
        if let Some(out) = out {
            let every = cfg.checkpoint_every;
            if every > 0 && trainer.episodes_done() % every == 0 {
                save_policy(out.join(POLICY_DIR), &trainer.agent().actor, &trainer.manifest(source_model, Some(hash.clone())))?;
            }
        }
    }
    if let Some(out) = out {
        save_policy(out.join(POLICY_DIR), &trainer.agent().actor, &trainer.manifest(source_model, Some(hash.clone())))?;
        write_train_log(&trainer, &hash, &out.join(TRAIN_LOG))?;
    }
    Ok(trainer)
}

/// Header line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub kind: String,
    pub config_hash: String,
    pub ppl_base: f64,
    pub n_layers: usize,
}

pub fn write_train_log(trainer: &Trainer, hash: &str, path: &Path) -> Result<()> {
    let header = LogHeader {
        kind: "run".into(),
        config_hash: hash.to_string(),
        ppl_base: trainer.env().ppl_base(),
        n_layers: trainer.env().n_layers(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for entry in trainer.log() {
        serde_json::to_writer(&mut out, entry)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a training log written by [`write_train_log`].
pub fn read_train_log(path: &Path) -> Result<(LogHeader, Vec<LogEntry>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: LogHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Invalid("empty training log".into()))?)?;
    let entries = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    Ok((header, entries))
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub n_layers: usize,
    pub ppl_base: f64,
    pub episodes: usize,
    pub best: Option<EpisodeOutcome>,
    pub greedy: EpisodeOutcome,
    pub avg_bits: f64,
    pub model_bytes: u64,
    /// Exact perplexity of the fake-quantized model.
    pub ppl_quantized: f64,
    /// Perplexity of the model rebuilt from the exported file.
    pub ppl_gguf: f64,
    pub gguf_bytes: usize,
    pub out_dir: PathBuf,
}

/// Which allocation the pipeline exports after training.
pub fn chosen_bits(trainer: &Trainer) -> Result<Vec<u8>> {
    match trainer.best() {
        Some(best) => Ok(best.bits.clone()),
        None => trainer.greedy_bits(),
    }
}

/// Generate, calibrate, train, allocate, quantize, export and evaluate.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    ensure_dir(&out)?;
    let hash = cfg.hash()?;
    cfg.save(out.join(CONFIG_FILE))?;

    let model = load_or_generate_model(cfg)?;
    save_model(&model, out.join(MODEL_FILE))?;
    write_json(
        &out.join(MODEL_META_FILE),
        &ModelMeta {
            spec: model.spec,
            n_layers: model.n_layers(),
            config_hash: hash.clone(),
        },
    )?;
    let corpus = build_corpus(cfg, model.spec.vocab_size)?;
    save_sequences(&corpus.calibration, out.join(CALIBRATION_TOKENS))?;
    save_sequences(&corpus.evaluation, out.join(EVALUATION_TOKENS))?;

    let stats = calibrate(cfg, &model, &corpus)?;
    write_json(&out.join(CALIBRATION_FILE), &EmbeddingExport::new(&model, &stats, Some(hash.clone()))?)?;

    let env = build_env(cfg, &model, &stats, &corpus)?;
    let trainer = train(cfg, env, Some(&out), "model")?;
    let greedy = trainer.greedy_outcome()?;
    let bits = full_allocation(cfg, &model, &chosen_bits(&trainer)?)?;

    let fold = fold_params(cfg, &model, &stats)?;
    let report = allocation_report(cfg, &model, fold.as_ref(), bits)?;
    write_json(&out.join(ALLOCATION_FILE), &report)?;

    let (quantized, _) = apply_allocation(&model, &report.bits, fold.as_ref(), cfg.env.group_size)?;
    let ppl_quantized = perplexity(&quantized, &corpus.evaluation)?;
    let opts = ExportOptions {
        name: "tinylm".into(),
        config_hash: Some(hash.clone()),
    };
    let gguf_path = out.join(GGUF_FILE);
    write_gguf(&gguf_path, &model, &report.bits, fold.as_ref(), &cfg.type_map, &opts)?;
    let bytes = fs::read(&gguf_path).map_err(|e| Error::io(&gguf_path, e))?;
    let doc = parse_document(&bytes)?;
    let ppl_gguf = perplexity(&model_from_gguf(&doc)?, &corpus.evaluation)?;

    let summary = RunSummary {
        config_hash: hash,
        n_layers: model.n_layers(),
        ppl_base: trainer.env().ppl_base(),
        episodes: trainer.episodes_done(),
        best: trainer.best().cloned(),
        greedy,
        avg_bits: mean_bits(&report.bits),
        model_bytes: report.model_bytes,
        ppl_quantized,
        ppl_gguf,
        gguf_bytes: bytes.len(),
        out_dir: out.clone(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Plot-ready tables derived from a training log and an allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub summary: serde_json::Value,
    pub curve_csv: String,
    pub updates_csv: String,
    pub histogram_csv: Option<String>,
}

pub fn build_report(header: &LogHeader, entries: &[LogEntry], allocation: Option<&AllocationReport>) -> ReportTables {
    let mut curve = String::from("episode,warmup,R,ppl,avg_bits,best_R,best_ppl\n");
    let mut updates = String::from("update,episode,critic1,critic2,actor,alpha_loss,alpha,mean_entropy\n");
    let mut best: Option<&EpisodeOutcome> = None;
    let mut episodes = 0;
    let mut first_warm = None;
    for e in entries {
        match e {
            LogEntry::Episode(ep) => {
                let o = &ep.record.outcome;
                if best.is_none_or(|b| o.reward > b.reward) {
                    best = Some(o);
                }
                let b = best.expect("set above");
                episodes += 1;
                if !ep.warmup && first_warm.is_none() {
                    first_warm = Some(ep.record.episode);
                }
                curve.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    ep.record.episode, ep.warmup, o.reward, o.ppl, o.avg_bits, b.reward, b.ppl
                ));
            }
            LogEntry::Update(u) => {
                let r = &u.report;
                updates.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    u.update, u.episode, r.critic1, r.critic2, r.actor, r.alpha_loss, r.alpha, r.mean_entropy
                ));
            }
        }
    }
    let histogram_csv = allocation.map(|a| {
        let mut s = String::from("bits,count\n");
        for &b in a.palette.bits() {
            s.push_str(&format!("{b},{}\n", a.bits.iter().filter(|&&x| x == b).count()));
        }
        s
    });
    let summary = serde_json::json!({
        "config_hash": header.config_hash,
        "ppl_base": header.ppl_base,
        "n_layers": header.n_layers,
        "episodes": episodes,
        "first_policy_episode": first_warm,
        "best": best,
        "allocation": allocation.map(|a| serde_json::json!({
            "avg_bits": a.avg_bits,
            "model_bytes": a.model_bytes,
            "bits": a.bits,
        })),
    });
    ReportTables {
        summary,
        curve_csv: curve,
        updates_csv: updates,
        histogram_csv,
    }
}
