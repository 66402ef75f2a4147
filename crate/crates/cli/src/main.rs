//! `cdlm`: command-line entry point of the workbench.
//!
//! Every subcommand reads one JSON run config (`--config`, defaults when
//! omitted) plus `--set section.key=value` overrides. Results go to stdout as
//! JSON; failures go to stderr as `{"error": kind, "message": ...}` with a
//! nonzero exit code.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdlm_core::align::VWeighting;
use cdlm_core::concept::{annotate_all, estimate_cost, score_graphs, write_annotations, HttpTeacher};
use cdlm_core::config::RunConfig;
use cdlm_core::dlm::{decode, Checkpoint};
use cdlm_core::harness::{self, checkpoint_name};
use cdlm_core::mask::tokenize_prompt;
use cdlm_core::orderperturb::{generate_dataset, oracle_graph, read_samples, DagTemplate, TEST_FILE};
use cdlm_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cdlm", version, about = "Causal concept-guided masked diffusion LM workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set align.enabled=false`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref())?.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the order-perturbed corpus into `data.dir`.
    GenData(Common),
    /// Build the supervision-mask sidecar for `data.train_mode`.
    BuildMasks(Common),
    /// Extract concept graphs with the teacher model.
    Annotate {
        #[command(flatten)]
        common: Common,
        /// Sample file; the training file of `data.train_mode` when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score judged graphs given as a JSON list of per-instance score lists.
    ScoreGraphs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        judgments: PathBuf,
    },
    /// Annotation cost per million data tokens.
    EstimateCost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t_in: f64,
        #[arg(long)]
        t_out: f64,
        /// Price per million input tokens; `provider.price_in` when omitted.
        #[arg(long)]
        p_in: Option<f64>,
        /// Price per million output tokens; `provider.price_out` when omitted.
        #[arg(long)]
        p_out: Option<f64>,
        #[arg(long)]
        avg_len: f64,
        /// Currency conversion factor; prints the converted cost as well.
        #[arg(long)]
        currency: Option<f64>,
    },
    /// Train into `output_root/run_id`.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// The run's final checkpoint when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report path; `eval_report.json` in the run directory when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Decode a single question.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        question: String,
    },
    /// Export attention maps and span bars for one test sample.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample_id: String,
        /// Comma-separated layers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Matched SFT-only versus alignment runs across `compare.seeds`.
    Compare(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn final_checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.run_dir().join(checkpoint_name(cfg.train.epochs)))
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let manifest = generate_dataset(&cfg.data.dir, &cfg.gen_options(), &DagTemplate::standard())?;
            Ok(json!({
                "dir": cfg.data.dir,
                "sample_files": manifest.files.len(),
                "manifest": manifest,
            })
            .to_string())
        }
        Command::BuildMasks(c) => {
            let cfg = c.load()?;
            let s = harness::build_masks(&cfg)?;
            Ok(json!({
                "path": s.path,
                "samples": s.samples,
                "supervised": s.supervised,
                "entries": s.entries,
                "span_failures": s.failures.len(),
            })
            .to_string())
        }
        Command::Annotate {
            common,
            input,
            output,
            limit,
        } => {
            let cfg = common.load()?;
            let input = input.unwrap_or_else(|| cdlm_core::orderperturb::data_file(&cfg.data.dir, cfg.data.train_mode));
            let mut samples = read_samples(&input)?;
            if let Some(n) = limit {
                samples.truncate(n);
            }
            let items: Vec<(String, String, String)> = samples
                .iter()
                .map(|s| (s.id.clone(), s.question.clone(), s.response()))
                .collect();
            let teacher = HttpTeacher::from_env(cfg.provider.clone());
            let results = annotate_all(&items, &teacher, &cfg.provider)?;
            write_annotations(&output, &results)?;
            let failed = results.iter().filter(|r| r.is_failure()).count();
            Ok(json!({
                "output": output,
                "samples": results.len(),
                "decode_failures": failed,
                "tokens_in": results.iter().map(|r| r.tokens_in).sum::<u64>(),
                "tokens_out": results.iter().map(|r| r.tokens_out).sum::<u64>(),
            })
            .to_string())
        }
        Command::ScoreGraphs { common, judgments } => {
            common.load()?;
            let body = std::fs::read_to_string(&judgments).map_err(|e| Error::Config(format!("{}: {e}", judgments.display())))?;
            let j: Vec<Vec<f64>> = serde_json::from_str(&body)?;
            Ok(serde_json::to_string(&score_graphs(&j)?)?)
        }
        Command::EstimateCost {
            common,
            t_in,
            t_out,
            p_in,
            p_out,
            avg_len,
            currency,
        } => {
            let cfg = common.load()?;
            if !(avg_len > 0.0) || t_in < 0.0 || t_out < 0.0 {
                return Err(Error::Config("token counts must be nonnegative and avg-len positive".into()));
            }
            let p_in = p_in.unwrap_or(cfg.provider.price_in);
            let p_out = p_out.unwrap_or(cfg.provider.price_out);
            let cost = estimate_cost(t_in, t_out, p_in, p_out, avg_len, 1.0);
            Ok(match currency {
                None => format!("{cost:.2}"),
                Some(f) => format!("{cost:.2}\n{:.2}", estimate_cost(t_in, t_out, p_in, p_out, avg_len, f)),
            })
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let run = harness::train(&cfg)?;
            Ok(json!({
                "run_dir": run.dir,
                "steps": run.steps,
                "metrics": run.metrics,
                "checkpoints": run.checkpoints,
                "epochs": run.epochs,
            })
            .to_string())
        }
        Command::Eval {
            common,
            checkpoint,
            output,
        } => {
            let cfg = common.load()?;
            let ckpt = Checkpoint::load(&final_checkpoint(&cfg, checkpoint))?;
            ckpt.expect_tokenizer(&harness::corpus_vocab(&cfg.data.dir)?.hash())?;
            let test = harness::load_test(&cfg)?;
            let report = harness::evaluate(&ckpt, &test, &cfg.eval.decode_options())?;
            let out = output.unwrap_or_else(|| cfg.run_dir().join("eval_report.json"));
            write_json(&out, &report)?;
            Ok(json!({
                "report": out,
                "accuracy": report.accuracy,
                "correct": report.correct,
                "total": report.total,
                "per_mode": report.per_mode,
            })
            .to_string())
        }
        Command::Decode {
            common,
            checkpoint,
            question,
        } => {
            let cfg = common.load()?;
            let ckpt = Checkpoint::load(&final_checkpoint(&cfg, checkpoint))?;
            let prompt = tokenize_prompt(&question, &ckpt.vocab);
            let response = decode(&ckpt.model(), &prompt.ids, &cfg.eval.decode_options())?;
            let text = ckpt.vocab.detokenize(&response);
            Ok(json!({"text": text, "answer": harness::extract_answer(&text)}).to_string())
        }
        Command::Viz {
            common,
            checkpoint,
            sample_id,
            layers,
            out,
        } => {
            let cfg = common.load()?;
            let ckpt = Checkpoint::load(&final_checkpoint(&cfg, checkpoint))?;
            let sample = find_sample(&cfg, &sample_id)?;
            let graph = oracle_graph(&sample, &DagTemplate::standard());
            let layers = if layers.is_empty() {
                (0..ckpt.config.n_layers).collect()
            } else {
                layers
            };
            let out = out.unwrap_or_else(|| cfg.run_dir().join("viz").join(&sample_id));
            let weighting = match cfg.align.v_weighting {
                VWeighting::None => VWeighting::KeyIndex,
                w => w,
            };
            let export = harness::export_attention(&ckpt, &sample, &graph, &layers, weighting, &out)?;
            Ok(json!({
                "out": out,
                "answer_position": export.answer_position,
                "files": export.files,
                "bars": export.bars,
            })
            .to_string())
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            let table = harness::compare_runs(&cfg)?;
            Ok(json!({
                "table": table.table_path,
                "rows": table.rows.len(),
                "thresholds": table.thresholds,
                "summary": table.summary,
            })
            .to_string())
        }
    }
}

fn find_sample(cfg: &RunConfig, id: &str) -> Result<cdlm_core::orderperturb::ReasoningSample> {
    let files = [
        cfg.data.dir.join(TEST_FILE),
        cdlm_core::orderperturb::data_file(&cfg.data.dir, cfg.data.train_mode),
    ];
    for f in &files {
        if let Some(s) = read_samples(f)?.into_iter().find(|s| s.id == id) {
            return Ok(s);
        }
    }
    Err(Error::Contract(format!("sample {id:?} not found in the test or training file")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
