//! Command-line interface. `cli` returns the process exit code so tests
//! can drive it directly: 0 success, 1 usage, 2 data or IO failure, 3
//! numerical failure during training.

use crate::corpus::{self, Split, Vocab};
use crate::harness::{self, AblationSpec, HarnessError};
use crate::infer::{self, InferOptions};
use crate::memory::MemoryStore;
use crate::net::{Model, ModelConfig};
use crate::train::{self, TrainConfig, TrainError};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mwp",
    about = "Retrieval-augmented solver for arithmetic word problems",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    /// Exemplars retrieved per question.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 48)]
    max_len: usize,
}

impl DecodeArgs {
    fn options(&self) -> InferOptions {
        InferOptions { k: self.k, beam_width: self.beam, max_len: self.max_len }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic word-problem corpus as JSONL.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest operator count per expression.
        #[arg(long, default_value_t = 5)]
        max_ops: usize,
    },
    /// Fit the question embedder over a corpus and save the search index.
    BuildMemory {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics, and the memory store.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Training config JSON (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model config JSON (defaults apply when omitted).
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Embedding width of the retrieval index.
        #[arg(long, default_value_t = 64)]
        memory_dim: usize,
    },
    /// Decode one question.
    Solve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        question: String,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Evaluate answer accuracy over a JSONL dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Accuracy as a function of retrieval depth; CSV output.
    SweepK {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated retrieval depths.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 48)]
        max_len: usize,
    },
    /// Train and score the standard ablation arms.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        memory_dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Accuracy by expression-length quartile.
    Buckets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
}

/// Run the CLI on explicit arguments (index 0 is the program name) and
/// return the exit code.
pub fn cli(argv: Vec<String>) -> i32 {
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    match run(parsed.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            exit_code(&e)
        }
    }
}

fn exit_code(e: &HarnessError) -> i32 {
    match e {
        HarnessError::Train(TrainError::NonFinite { .. }) => 3,
        HarnessError::Config(_) => 1,
        _ => 2,
    }
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
    what: &str,
) -> Result<T, HarnessError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|source| HarnessError::Io { path: p.to_path_buf(), source })?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("bad {what} config {}: {e}", p.display())))
        }
    }
}

fn load_store(path: Option<&Path>) -> Result<Option<MemoryStore>, HarnessError> {
    match path {
        Some(dir) => Ok(Some(MemoryStore::load(dir)?)),
        None => Ok(None),
    }
}

fn run(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::GenerateData { out, count, seed, max_ops } => {
            let ds = corpus::synthetic::generate(count, seed, max_ops)?;
            corpus::save_jsonl(&ds, &out)?;
            println!("wrote {} problems to {}", ds.len(), out.display());
            Ok(())
        }
        Cmd::BuildMemory { data, dim, out } => {
            let ds = corpus::load_jsonl(&data, Split::Train)?;
            let store = MemoryStore::build(ds, dim)?;
            store.save(&out)?;
            println!("indexed {} problems at dim {dim} in {}", store.len(), out.display());
            Ok(())
        }
        Cmd::Train { data, valid, config, model_config, out, memory_dim } => {
            let cfg: TrainConfig = read_json_config(config.as_deref(), "training")?;
            let mut model_cfg: ModelConfig = read_json_config(model_config.as_deref(), "model")?;
            let raw = corpus::load_jsonl(&data, Split::Train)?;
            let ds = if cfg.equation_normalization {
                harness::normalize_dataset(&raw)?
            } else {
                raw
            };
            let valid_ds = match valid {
                Some(p) => Some(corpus::load_jsonl(&p, Split::Valid)?),
                None => None,
            };
            let vocab = Vocab::build(&ds, cfg.min_freq);
            model_cfg.use_copy = cfg.copy_enabled;
            model_cfg.use_memory = cfg.memory_enabled;
            let mut model = Model::new(model_cfg, vocab)?;
            let store = if cfg.memory_enabled {
                let s = MemoryStore::build(ds.clone(), memory_dim)?;
                s.save(&out.join("memory"))?;
                Some(s)
            } else {
                None
            };
            let history =
                train::train(&mut model, store.as_ref(), &ds, valid_ds.as_ref(), &cfg, Some(&out))?;
            let last = history.last().expect("at least one epoch");
            println!(
                "trained {} epochs: loss {:.4}{}{}",
                history.len(),
                last.loss,
                last.train_accuracy
                    .map(|a| format!(", train acc {a:.3}"))
                    .unwrap_or_default(),
                last.val_accuracy.map(|a| format!(", val acc {a:.3}")).unwrap_or_default(),
            );
            println!("checkpoints in {}", out.display());
            Ok(())
        }
        Cmd::Solve { model, memory, question, decode } => {
            let model = Model::load(&model)?;
            let store = load_store(memory.as_deref())?;
            let tokens = corpus::tokenize_text(&question);
            let result = infer::solve(&model, store.as_ref(), &tokens, &decode.options(), None)?;
            let text = serde_json::to_string_pretty(&result).expect("result serialises");
            println!("{text}");
            Ok(())
        }
        Cmd::Eval { model, memory, data, report, decode } => {
            let model = Model::load(&model)?;
            let store = load_store(memory.as_deref())?;
            let ds = corpus::load_jsonl(&data, Split::Test)?;
            let out = harness::evaluate(&model, store.as_ref(), &ds, &decode.options())?;
            println!(
                "accuracy {:.4} ({}/{}) at k={} beam={}",
                out.accuracy, out.correct, out.total, out.k, out.beam_width
            );
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&out).expect("report serialises");
                fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
            }
            Ok(())
        }
        Cmd::SweepK { model, memory, data, ks, csv, beam, max_len } => {
            let model = Model::load(&model)?;
            let store = load_store(memory.as_deref())?;
            let ds = corpus::load_jsonl(&data, Split::Test)?;
            let base = InferOptions { k: 0, beam_width: beam, max_len };
            let (points, warnings) = harness::k_sweep(&model, store.as_ref(), &ds, &ks, &base)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let mut text = String::from("k,accuracy\n");
            for p in &points {
                text.push_str(&format!("{},{:.6}\n", p.k, p.accuracy));
            }
            print!("{text}");
            if let Some(path) = csv {
                fs::write(&path, &text).map_err(|source| HarnessError::Io { path, source })?;
            }
            Ok(())
        }
        Cmd::Ablate { train, test, config, model_config, memory_dim, out, decode } => {
            let train_cfg: TrainConfig = read_json_config(config.as_deref(), "training")?;
            let model_cfg: ModelConfig = read_json_config(model_config.as_deref(), "model")?;
            let train_ds = corpus::load_jsonl(&train, Split::Train)?;
            let test_ds = corpus::load_jsonl(&test, Split::Test)?;
            let spec = AblationSpec {
                model: model_cfg,
                train: train_cfg,
                memory_dim,
                eval: decode.options(),
            };
            let outcomes =
                harness::ablate(&spec, &train_ds, &test_ds, &harness::standard_arms())?;
            for o in &outcomes {
                println!(
                    "{:<18} accuracy {:.4}  loss {:.4}  {:.1}s",
                    o.name, o.accuracy, o.final_loss, o.train_seconds
                );
            }
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&outcomes).expect("outcomes serialise");
                fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
            }
            Ok(())
        }
        Cmd::Buckets { model, memory, data, decode } => {
            let model = Model::load(&model)?;
            let store = load_store(memory.as_deref())?;
            let ds = corpus::load_jsonl(&data, Split::Test)?;
            let report = harness::evaluate(&model, store.as_ref(), &ds, &decode.options())?;
            for b in &report.buckets {
                println!(
                    "{}: lengths {}..={}  accuracy {:.4} ({}/{})",
                    b.label, b.min_len, b.max_len, b.accuracy, b.correct, b.total
                );
            }
            println!("overall {:.4}", report.accuracy);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str]) -> i32 {
        let mut argv = vec!["mwp".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        cli(argv)
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(&["no-such-command"]), 1);
        assert_eq!(run_cli(&["generate-data"]), 1, "missing --out");
        assert_eq!(run_cli(&["--help"]), 0);
    }

    #[test]
    fn missing_files_exit_two() {
        assert_eq!(
            run_cli(&["build-memory", "--data", "/nonexistent.jsonl", "--out", "/tmp/x"]),
            2
        );
        assert_eq!(
            run_cli(&["eval", "--model", "/nonexistent", "--data", "/nonexistent.jsonl"]),
            2
        );
    }

    #[test]
    fn pipeline_commands_compose() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let data = root.join("train.jsonl");
        let model_cfg = root.join("model.json");
        let train_cfg = root.join("train.json");
        std::fs::write(
            &model_cfg,
            r#"{"d_model":8,"n_heads":2,"layers_repr":1,"layers_analogy":1,"max_positions":64}"#,
        )
        .unwrap();
        std::fs::write(
            &train_cfg,
            r#"{"epochs":2,"batch_size":4,"val_every":0,"train_acc_every":0}"#,
        )
        .unwrap();

        assert_eq!(
            run_cli(&[
                "generate-data",
                "--out",
                data.to_str().unwrap(),
                "--count",
                "8",
                "--seed",
                "5",
                "--max-ops",
                "2"
            ]),
            0
        );
        let out = root.join("run");
        assert_eq!(
            run_cli(&[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--config",
                train_cfg.to_str().unwrap(),
                "--model-config",
                model_cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--memory-dim",
                "8"
            ]),
            0
        );
        assert!(out.join("last/checkpoint.bin").exists());
        assert!(out.join("memory/index.bin").exists());
        assert!(out.join("metrics.jsonl").exists());

        assert_eq!(
            run_cli(&[
                "solve",
                "--model",
                out.join("last").to_str().unwrap(),
                "--memory",
                out.join("memory").to_str().unwrap(),
                "--question",
                "Maya has 4 marbles and finds 3 more. How many marbles now?",
                "--beam",
                "2",
                "--max-len",
                "8"
            ]),
            0
        );
        let report = root.join("report.json");
        assert_eq!(
            run_cli(&[
                "eval",
                "--model",
                out.join("last").to_str().unwrap(),
                "--memory",
                out.join("memory").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--report",
                report.to_str().unwrap(),
                "--beam",
                "1",
                "--max-len",
                "8"
            ]),
            0
        );
        let text = std::fs::read_to_string(&report).unwrap();
        assert!(text.contains("\"accuracy\""));
        assert_eq!(
            run_cli(&[
                "sweep-k",
                "--model",
                out.join("last").to_str().unwrap(),
                "--memory",
                out.join("memory").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--ks",
                "0,1",
                "--beam",
                "1",
                "--max-len",
                "6"
            ]),
            0
        );
        assert_eq!(
            run_cli(&[
                "buckets",
                "--model",
                out.join("last").to_str().unwrap(),
                "--memory",
                out.join("memory").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--beam",
                "1",
                "--max-len",
                "6"
            ]),
            0
        );
    }
}
