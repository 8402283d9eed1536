use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use rampkit::config::RunConfig;
use rampkit::ggufx::{model_from_gguf, parse_document, stored_allocation, write_gguf, ExportOptions};
use rampkit::oracles::{brute_force_search, write_search_csv, Oracle};
use rampkit::pipeline::{self as pl, ModelMeta};
use rampkit::quantcore::{apply_allocation, AllocationReport};
use rampkit::sacagent::load_policy;
use rampkit::tinylm::{perplexity, read_model, save_model, save_sequences};
use rampkit::Error;

#[derive(Parser, Debug)]
#[command(name = "rampkit", version, about = "Learned mixed-precision quantization for small transformers")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model file to use instead of generating one from the config.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic model described by the config.
    GenModel,
    /// Collect activation statistics and layer embeddings.
    Calibrate,
    /// Train the allocation policy.
    Train {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Allocate bit widths for a model with a trained policy (zero-shot).
    Allocate {
        /// Policy directory; defaults to `<out>/policy`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Exhaustive search over the configured layers.
    Search {
        /// Also write every candidate to `search.csv`.
        #[arg(long)]
        table: bool,
    },
    /// Fake-quantize a model with an allocation.
    Quantize {
        #[arg(long)]
        allocation: PathBuf,
    },
    /// Write a GGUF file for a model and an allocation.
    Export {
        #[arg(long)]
        allocation: PathBuf,
    },
    /// Perplexity on the evaluation split.
    Eval {
        /// Evaluate the model stored in this GGUF file.
        #[arg(long, conflicts_with = "allocation")]
        gguf: Option<PathBuf>,
        /// Fake-quantize with this allocation before evaluating.
        #[arg(long)]
        allocation: Option<PathBuf>,
    },
    /// Summary tables and plot-ready CSV from a training log.
    Report {
        /// Defaults to `<out>/train_log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        allocation: Option<PathBuf>,
    },
    /// Structural JSON report of a GGUF or model file.
    Inspect { path: PathBuf },
    /// Every stage end to end.
    Run {
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidSpec(_) => 2,
        Error::Io { .. } => 4,
        _ => 3,
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "code": code, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", 2, e.to_string().lines().next().unwrap_or("invalid arguments")),
    };
    if let Err(msg) = configure_threads() {
        return fail("config", 2, &msg);
    }
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                2 => "config",
                4 => "io",
                _ => "validation",
            };
            fail(kind, code, &e.to_string())
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("RAMPKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RAMPKIT_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> rampkit::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &cli.model {
        cfg.model_path = Some(m.clone());
    }
    Ok(cfg)
}

fn read_allocation(path: &Path) -> rampkit::Result<AllocationReport> {
    pl::read_json(path)
}

fn write_csv(path: &Path, hash: &str, body: &str) -> rampkit::Result<()> {
    std::fs::write(path, format!("# config_hash: {hash}\n{body}")).map_err(|e| Error::io(path, e))
}

fn execute(cli: Cli) -> rampkit::Result<Value> {
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Train { episodes: Some(n) } | Cmd::Run { episodes: Some(n) } => cfg.train.episodes = *n,
        _ => {}
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let hash = cfg.hash()?;

    match cli.cmd {
        Cmd::Inspect { path } => inspect(&path),
        Cmd::Run { .. } => Ok(serde_json::to_value(pl::run(&cfg)?)?),
        Cmd::GenModel => {
            pl::ensure_dir(&out)?;
            let model = pl::load_or_generate_model(&cfg)?;
            let path = out.join(pl::MODEL_FILE);
            save_model(&model, &path)?;
            pl::write_json(
                &out.join(pl::MODEL_META_FILE),
                &ModelMeta {
                    spec: model.spec,
                    n_layers: model.n_layers(),
                    config_hash: hash.clone(),
                },
            )?;
            Ok(json!({ "model": path, "n_layers": model.n_layers(), "config_hash": hash }))
        }
        Cmd::Calibrate => {
            pl::ensure_dir(&out)?;
            let (model, corpus, stats) = pl::prepare(&cfg)?;
            save_sequences(&corpus.calibration, out.join(pl::CALIBRATION_TOKENS))?;
            save_sequences(&corpus.evaluation, out.join(pl::EVALUATION_TOKENS))?;
            let export = rampkit::calibrate::EmbeddingExport::new(&model, &stats, Some(hash.clone()))?;
            let path = out.join(pl::CALIBRATION_FILE);
            pl::write_json(&path, &export)?;
            Ok(json!({ "calibration": path, "layers": export.layers.len(), "config_hash": hash }))
        }
        Cmd::Train { .. } => {
            pl::ensure_dir(&out)?;
            let (model, corpus, stats) = pl::prepare(&cfg)?;
            let source = cfg
                .model_path
                .as_ref()
                .map_or_else(|| format!("generated:{}", cfg.seed), |p| p.display().to_string());
            let env = pl::build_env(&cfg, &model, &stats, &corpus)?;
            let trainer = pl::train(&cfg, env, Some(&out), &source)?;
            Ok(json!({
                "policy": out.join(pl::POLICY_DIR),
                "log": out.join(pl::TRAIN_LOG),
                "episodes": trainer.episodes_done(),
                "ppl_base": trainer.env().ppl_base(),
                "best": trainer.best(),
                "config_hash": hash,
            }))
        }
        Cmd::Allocate { policy } => {
            pl::ensure_dir(&out)?;
            let policy = policy.unwrap_or_else(|| out.join(pl::POLICY_DIR));
            let (actor, manifest) = load_policy(&policy)?;
            if manifest.palette != cfg.env.palette {
                return Err(Error::Config("policy palette differs from the configured palette".into()));
            }
            let (model, _, stats) = pl::prepare(&cfg)?;
            let layers = pl::policy_layers(&cfg, &model);
            let bits = pl::transfer_allocation(&actor, &manifest, &model, &stats, &layers)?;
            let full = pl::full_allocation(&cfg, &model, &bits)?;
            let fold = pl::fold_params(&cfg, &model, &stats)?;
            let report = pl::allocation_report(&cfg, &model, fold.as_ref(), full)?;
            let path = out.join(pl::ALLOCATION_FILE);
            pl::write_json(&path, &report)?;
            Ok(json!({
                "allocation": path,
                "bits": report.bits,
                "avg_bits": report.avg_bits,
                "model_bytes": report.model_bytes,
                "config_hash": hash,
            }))
        }
        Cmd::Search { table } => {
            pl::ensure_dir(&out)?;
            let (model, corpus, stats) = pl::prepare(&cfg)?;
            let layers = pl::policy_layers(&cfg, &model);
            let fold = pl::fold_params(&cfg, &model, &stats)?;
            let oracle = Oracle::new(
                cfg.env.oracle,
                model,
                corpus.evaluation,
                fold,
                layers.clone(),
                cfg.env.palette.clone(),
                cfg.env.group_size,
                cfg.env.kappa,
            )?;
            let result = brute_force_search(&oracle, &cfg.env.reward)?;
            if table {
                if let Some(rows) = &result.table {
                    let tmp = out.join("search.csv.tmp");
                    write_search_csv(&tmp, rows)?;
                    let body = std::fs::read_to_string(&tmp).map_err(|e| Error::io(&tmp, e))?;
                    std::fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
                    write_csv(&out.join("search.csv"), &hash, &body)?;
                }
            }
            let summary = json!({
                "layers": layers,
                "ppl_base": oracle.ppl_base(),
                "evaluated": result.evaluated,
                "best": result.best,
                "config_hash": hash,
            });
            pl::write_json(&out.join("search.json"), &summary)?;
            Ok(summary)
        }
        Cmd::Quantize { allocation } => {
            pl::ensure_dir(&out)?;
            let alloc = read_allocation(&allocation)?;
            let (model, corpus, stats) = pl::prepare(&cfg)?;
            let fold = pl::fold_params(&cfg, &model, &stats)?;
            let (quantized, per_layer) = apply_allocation(&model, &alloc.bits, fold.as_ref(), cfg.env.group_size)?;
            let path = out.join("quantized.rmpm");
            save_model(&quantized, &path)?;
            let report = json!({
                "model": path,
                "bits": alloc.bits,
                "ppl_base": perplexity(&model, &corpus.evaluation)?,
                "ppl": perplexity(&quantized, &corpus.evaluation)?,
                "per_layer": per_layer,
                "config_hash": hash,
            });
            pl::write_json(&out.join("quantized.json"), &report)?;
            Ok(report)
        }
        Cmd::Export { allocation } => {
            pl::ensure_dir(&out)?;
            let alloc = read_allocation(&allocation)?;
            let (model, _, stats) = pl::prepare(&cfg)?;
            let fold = pl::fold_params(&cfg, &model, &stats)?;
            let path = out.join(pl::GGUF_FILE);
            let opts = ExportOptions {
                name: "tinylm".into(),
                config_hash: Some(hash.clone()),
            };
            let summary = write_gguf(&path, &model, &alloc.bits, fold.as_ref(), &cfg.type_map, &opts)?;
            Ok(json!({
                "gguf": path,
                "avg_bits": summary.avg_bits,
                "tensor_bytes": summary.ledger.tensor_bytes,
                "file_bytes": summary.ledger.file_bytes,
                "payload_types": summary.payload_types.iter().map(|t| t.name()).collect::<Vec<_>>(),
                "config_hash": hash,
            }))
        }
        Cmd::Eval { gguf, allocation } => {
            let model = pl::load_or_generate_model(&cfg)?;
            let corpus = pl::build_corpus(&cfg, model.spec.vocab_size)?;
            let (evaluated, source) = match (&gguf, &allocation) {
                (Some(g), _) => {
                    let bytes = std::fs::read(g).map_err(|e| Error::io(g, e))?;
                    (model_from_gguf(&parse_document(&bytes)?)?, "gguf")
                }
                (None, Some(a)) => {
                    let alloc = read_allocation(a)?;
                    let stats = pl::calibrate(&cfg, &model, &corpus)?;
                    let fold = pl::fold_params(&cfg, &model, &stats)?;
                    (apply_allocation(&model, &alloc.bits, fold.as_ref(), cfg.env.group_size)?.0, "fake_quant")
                }
                (None, None) => (model.clone(), "baseline"),
            };
            if evaluated.spec.vocab_size != model.spec.vocab_size {
                return Err(Error::Invalid("evaluated model vocabulary differs from the corpus".into()));
            }
            let ppl = perplexity(&evaluated, &corpus.evaluation)?;
            Ok(json!({
                "source": source,
                "ppl": ppl,
                "ppl_base": perplexity(&model, &corpus.evaluation)?,
                "sequences": corpus.evaluation.len(),
                "config_hash": hash,
            }))
        }
        Cmd::Report { log, allocation } => {
            let log = log.unwrap_or_else(|| out.join(pl::TRAIN_LOG));
            let (header, entries) = pl::read_train_log(&log)?;
            let alloc = allocation.as_deref().map(read_allocation).transpose()?;
            let tables = pl::build_report(&header, &entries, alloc.as_ref());
            let dir = out.join("report");
            pl::ensure_dir(&dir)?;
            let h = &header.config_hash;
            write_csv(&dir.join("training_curve.csv"), h, &tables.curve_csv)?;
            write_csv(&dir.join("updates.csv"), h, &tables.updates_csv)?;
            if let Some(hist) = &tables.histogram_csv {
                write_csv(&dir.join("bit_histogram.csv"), h, hist)?;
            }
            pl::write_json(&dir.join("summary.json"), &tables.summary)?;
            Ok(tables.summary)
        }
    }
}

fn inspect(path: &Path) -> rampkit::Result<Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"GGUF") {
        let doc = parse_document(&bytes)?;
        let mut report = doc.report();
        if let Ok(bits) = stored_allocation(&doc) {
            report["bit_allocation"] = json!(bits);
        }
        return Ok(report);
    }
    let model = read_model(&bytes)?;
    Ok(json!({
        "format": "rampkit-model",
        "spec": model.spec,
        "n_layers": model.n_layers(),
        "layers": model
            .layer_records()
            .iter()
            .map(|r| json!({ "name": r.name, "in": r.in_features, "out": r.out_features }))
            .collect::<Vec<_>>(),
    }))
}
