//! Command-line interface. Every subcommand reads the optional TOML config
//! for defaults, honors `--seed` everywhere, and writes its outputs under
//! the given directory. The process exits nonzero if any invariant gate
//! fails.

use crate::config::LabConfig;
use crate::experiments::{run_experiment, single_edit_run, ExperimentId, ExperimentSpec};
use crate::formats::{
    load_batch_matrices, load_facts, load_model, save_facts, save_model, write_analysis_csv,
    write_json, write_metrics_csv, MetricsRow,
};
use crate::world::config_fingerprint;
use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use memedit_core::analysis::{bound_check, misalignment_report};
use memedit_core::dataset::{eval_prefixes, Dataset};
use memedit_core::editor::EditMethod;
use memedit_core::metrics::{efficacy, fluency, generalization, specificity};
use memedit_core::toy_lm::{build_model, train_with_options};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "memedit",
    about = "Desk-scale laboratory for locate-then-edit memory editing",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config supplying defaults for every section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed derived from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<LabConfig> {
        let cfg = match &self.config {
            Some(path) => LabConfig::load(path)?,
            None => LabConfig::default(),
        };
        Ok(cfg.with_seed(self.seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fact corpus.
    GenFacts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_facts: Option<usize>,
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long)]
        n_relations: Option<usize>,
        /// Output facts file (line-delimited JSON).
        #[arg(long, default_value = "facts.jsonl")]
        out: PathBuf,
    },
    /// Train the toy model on a facts file and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value = "model.bin")]
        out: PathBuf,
    },
    /// Edit the configured corpus on a freshly trained model and write the
    /// run directory (facts, checkpoints, traces, metrics, analysis).
    Edit {
        #[command(flatten)]
        common: Common,
        /// baseline or aligned.
        #[arg(long, default_value = "baseline")]
        method: String,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint against a facts file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        facts: PathBuf,
        /// Unedited checkpoint for the specificity comparison.
        #[arg(long)]
        before: Option<PathBuf>,
        /// Neighbor facts (disjoint from the edited ones).
        #[arg(long)]
        neighbors: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        prefix_len: usize,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Misalignment scores, self-weights, and bound checks for a saved
    /// batch artifact.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
    },
    /// Run one of the named experiments end to end.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// scale_sweep, prefix_sweep, same_subject, ablation,
        /// order_shuffle, or hyper_sweep.
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value = "experiment")]
        out_dir: PathBuf,
    },
    /// Hyperparameter sweep around the configured defaults.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "sweep")]
        out_dir: PathBuf,
    },
}

pub fn run() -> Result<i32> {
    let cli = Cli::parse();
    let mut gate_failures: Vec<String> = Vec::new();
    match cli.command {
        Command::GenFacts {
            common,
            n_facts,
            n_subjects,
            n_relations,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(v) = n_facts {
                cfg.dataset.n_facts = v;
            }
            if let Some(v) = n_subjects {
                cfg.dataset.n_subjects = v;
            }
            if let Some(v) = n_relations {
                cfg.dataset.n_relations = v;
            }
            let ds = Dataset::generate(&cfg.dataset_spec(), cfg.model.vocab_size)
                .map_err(|e| anyhow!("{e}"))?;
            save_facts(&out, &ds.facts)?;
            println!("wrote {} facts to {}", ds.facts.len(), out.display());
        }
        Command::Train {
            common,
            facts,
            epochs,
            rate,
            out,
        } => {
            let cfg = common.load()?;
            let facts = load_facts(&facts)?;
            let mut opts = cfg.train_options();
            if let Some(e) = epochs {
                opts.epochs = e;
            }
            if let Some(r) = rate {
                opts.rate = r;
            }
            let mut model = build_model(&cfg.model_config()).map_err(|e| anyhow!("{e}"))?;
            let report =
                train_with_options(&mut model, &facts, &opts).map_err(|e| anyhow!("{e}"))?;
            save_model(&out, &model)?;
            println!(
                "trained on {} facts: recall {:.4}, final loss {:.4}; checkpoint {}",
                facts.len(),
                report.final_recall,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Edit {
            common,
            method,
            out_dir,
        } => {
            let cfg = common.load()?;
            let method = match method.as_str() {
                "baseline" => EditMethod::Baseline,
                "aligned" => EditMethod::Aligned,
                other => anyhow::bail!("unknown method {other:?}"),
            };
            let outcome = single_edit_run(&cfg, method, &out_dir)?;
            for row in &outcome.rows {
                println!(
                    "efficacy {:.4} generalization {:.4} specificity {:.4}",
                    row.efficacy, row.generalization, row.specificity
                );
            }
            gate_failures.extend(outcome.gate_failures);
        }
        Command::Eval {
            common,
            model,
            facts,
            before,
            neighbors,
            prefix_len,
            out,
        } => {
            let cfg = common.load()?;
            let model = load_model(&model)?;
            let facts = load_facts(&facts)?;
            let prefixes = if prefix_len == 0 {
                vec![Vec::new()]
            } else {
                eval_prefixes(
                    cfg.eval_seed(),
                    cfg.eval.prefix_count,
                    prefix_len,
                    model.cfg.vocab_size,
                )
            };
            let eff = efficacy(&model, &facts, &prefixes).map_err(|e| anyhow!("{e}"))?;
            let gen = generalization(&model, &facts).map_err(|e| anyhow!("{e}"))?;
            let spe = match (&before, &neighbors) {
                (Some(b), Some(n)) => {
                    let before = load_model(b)?;
                    let neigh = load_facts(n)?;
                    specificity(&before, &model, &neigh, &facts).map_err(|e| anyhow!("{e}"))?
                }
                _ => 1.0,
            };
            let prompts: Vec<Vec<usize>> = facts
                .iter()
                .take(cfg.eval.rollout_prompts.max(1))
                .map(|f| f.prompt_tokens.clone())
                .collect();
            let flu = fluency(&model, &prompts, cfg.eval.rollout_len).map_err(|e| anyhow!("{e}"))?;
            let row = MetricsRow {
                experiment: "eval".into(),
                method: "checkpoint".into(),
                n_facts: facts.len(),
                cluster_size: 1,
                prefix_len,
                seed: cfg.seed,
                efficacy: eff,
                generalization: gen,
                specificity: spe,
                fluency: flu,
                misalignment_sum: 0.0,
                config_fingerprint: format!("{:016x}", config_fingerprint(&cfg)),
            };
            if !(0.0..=1.0).contains(&eff) {
                gate_failures.push("efficacy out of range".into());
            }
            write_metrics_csv(&out, &[row])?;
            println!("efficacy {eff:.4} generalization {gen:.4} specificity {spe:.4} fluency {flu:.4}");
        }
        Command::Analyze {
            common,
            batch,
            out_dir,
        } => {
            let cfg = common.load()?;
            std::fs::create_dir_all(&out_dir)?;
            let (k, r) = load_batch_matrices(&batch)?;
            let report = misalignment_report(&k, &r, cfg.editor.temperature)
                .map_err(|e| anyhow!("{e}"))?;
            let mut reports = Vec::new();
            let mut violations = 0usize;
            for i in 0..k.cols() {
                match bound_check(&k, &r, i) {
                    Ok(rep) => reports.push(rep),
                    Err(memedit_core::analysis::AnalysisError::BoundViolation { .. }) => {
                        violations += 1;
                    }
                    Err(e) => return Err(anyhow!("{e}")),
                }
            }
            let mut summary =
                write_analysis_csv(&out_dir.join("analysis.csv"), &report.scores, &reports)?;
            summary.violation_count = violations;
            write_json(&out_dir.join("summary.json"), &summary)?;
            if violations > 0 {
                gate_failures.push(format!("{violations} bound violations"));
            }
            println!(
                "items {} | score sum {:.4} | violations {} | infinite bounds {}",
                summary.items, summary.score_sum, violations, summary.infinite_bound_count
            );
        }
        Command::Experiment {
            common,
            id,
            repetitions,
            out_dir,
        } => {
            let cfg = common.load()?;
            let spec = ExperimentSpec {
                id: ExperimentId::parse(&id)?,
                config: cfg,
                repetitions,
            };
            let outcome = run_experiment(&spec, &out_dir)?;
            println!(
                "{}: {} rows -> {}",
                spec.id.name(),
                outcome.rows.len(),
                out_dir.join("metrics.csv").display()
            );
            gate_failures.extend(outcome.gate_failures);
        }
        Command::Sweep { common, out_dir } => {
            let cfg = common.load()?;
            let spec = ExperimentSpec {
                id: ExperimentId::HyperSweep,
                config: cfg,
                repetitions: 1,
            };
            let outcome = run_experiment(&spec, &out_dir)?;
            println!(
                "hyper_sweep: {} rows -> {}",
                outcome.rows.len(),
                out_dir.join("metrics.csv").display()
            );
            gate_failures.extend(outcome.gate_failures);
        }
    }
    if gate_failures.is_empty() {
        Ok(0)
    } else {
        for g in &gate_failures {
            eprintln!("gate failure: {g}");
        }
        Ok(1)
    }
}
