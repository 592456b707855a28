//! Experiment drivers: each one edits fresh copies of a trained model under
//! a family of configurations, evaluates the metrics, and writes plot-ready
//! CSV rows plus a JSON summary. Reruns with the same config and seed are
//! byte-identical; wall-clock timings go to the summary only.

use crate::config::LabConfig;
use crate::formats::{
    save_facts, save_model, write_analysis_csv, write_json, write_metrics_csv, write_traces_csv,
    MetricsRow,
};
use crate::world::{
    build_world_with, config_fingerprint, edited_model, parallel_map, trained_world, TrainedWorld,
};
use anyhow::{anyhow, bail, Context, Result};
use memedit_core::analysis::{beta_coefficients, bound_check, misalignment_report};
use memedit_core::dataset::eval_prefixes;
use memedit_core::editor::{EditMethod, EditResult, EditorConfig};
use memedit_core::metrics::{efficacy, fluency, generalization, specificity};
use memedit_core::toy_lm::ToyModel;
use memedit_core::FactTriple;
use serde_json::json;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentId {
    ScaleSweep,
    PrefixSweep,
    SameSubject,
    Ablation,
    OrderShuffle,
    HyperSweep,
}

impl ExperimentId {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "scale_sweep" => ExperimentId::ScaleSweep,
            "prefix_sweep" => ExperimentId::PrefixSweep,
            "same_subject" => ExperimentId::SameSubject,
            "ablation" => ExperimentId::Ablation,
            "order_shuffle" => ExperimentId::OrderShuffle,
            "hyper_sweep" => ExperimentId::HyperSweep,
            other => bail!(
                "unknown experiment {other:?}; expected one of scale_sweep, prefix_sweep, \
                 same_subject, ablation, order_shuffle, hyper_sweep"
            ),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentId::ScaleSweep => "scale_sweep",
            ExperimentId::PrefixSweep => "prefix_sweep",
            ExperimentId::SameSubject => "same_subject",
            ExperimentId::Ablation => "ablation",
            ExperimentId::OrderShuffle => "order_shuffle",
            ExperimentId::HyperSweep => "hyper_sweep",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub config: LabConfig,
    pub repetitions: usize,
}

pub struct ExperimentOutcome {
    pub rows: Vec<MetricsRow>,
    pub summary: serde_json::Value,
    /// Invariant gates that failed; empty means a clean run.
    pub gate_failures: Vec<String>,
}

fn rep_config(base: &LabConfig, rep: usize) -> LabConfig {
    let mut cfg = base.clone();
    cfg.seed = base.seed.wrapping_add(rep as u64);
    cfg
}

fn method_label(cfg: &EditorConfig) -> &'static str {
    match cfg.method {
        EditMethod::Baseline => "baseline",
        EditMethod::Aligned => "aligned",
    }
}

/// Full metric evaluation of one edited model against one fact subset.
#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    experiment: &str,
    method: String,
    world: &TrainedWorld,
    model: &ToyModel,
    result: &EditResult,
    facts: &[FactTriple],
    cluster_size: usize,
    prefix_len: usize,
    cfg: &LabConfig,
) -> Result<MetricsRow> {
    let checksum_before = model.checksum();
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
    let eff = efficacy(model, facts, &prefixes).map_err(|e| anyhow!("{e}"))?;
    let gen = generalization(model, facts).map_err(|e| anyhow!("{e}"))?;
    let spe = if world.neighbor_facts.is_empty() {
        1.0
    } else {
        specificity(&world.model, model, &world.neighbor_facts, facts).map_err(|e| anyhow!("{e}"))?
    };
    let prompts: Vec<Vec<usize>> = facts
        .iter()
        .take(cfg.eval.rollout_prompts.max(1))
        .map(|f| f.prompt_tokens.clone())
        .collect();
    let flu = fluency(model, &prompts, cfg.eval.rollout_len).map_err(|e| anyhow!("{e}"))?;
    let mis = if result.batch.keys.len() >= 2 {
        let k = result.batch.key_matrix().map_err(|e| anyhow!("{e}"))?;
        let r = result.batch.residual_matrix().map_err(|e| anyhow!("{e}"))?;
        misalignment_report(&k, &r, cfg.editor.temperature)
            .map_err(|e| anyhow!("{e}"))?
            .sum
    } else {
        0.0
    };
    if model.checksum() != checksum_before {
        bail!("evaluation mutated the model");
    }
    Ok(MetricsRow {
        experiment: experiment.to_string(),
        method,
        n_facts: facts.len(),
        cluster_size,
        prefix_len,
        seed: cfg.seed,
        efficacy: eff,
        generalization: gen,
        specificity: spe,
        fluency: flu,
        misalignment_sum: mis,
        config_fingerprint: format!("{:016x}", config_fingerprint(cfg)),
    })
}

fn check_row_invariants(row: &MetricsRow, opt_steps: usize, result: &EditResult, gates: &mut Vec<String>) {
    let frac = |v: f64| (0.0..=1.0).contains(&v);
    if !(frac(row.efficacy) && frac(row.generalization) && frac(row.specificity)) {
        gates.push(format!("metric fraction out of range in {:?}", row.sort_key()));
    }
    if row.misalignment_sum < 0.0 {
        gates.push(format!("negative misalignment sum in {:?}", row.sort_key()));
    }
    for trace in &result.traces {
        if trace.len() != opt_steps {
            gates.push(format!(
                "trace length {} != opt_steps {opt_steps} in {:?}",
                trace.len(),
                row.sort_key()
            ));
            break;
        }
    }
}

pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("create {}", out_dir.display()))?;
    let mut outcome = match spec.id {
        ExperimentId::ScaleSweep => scale_sweep(spec)?,
        ExperimentId::PrefixSweep => prefix_sweep(spec)?,
        ExperimentId::SameSubject => same_subject(spec)?,
        ExperimentId::Ablation => ablation(spec)?,
        ExperimentId::OrderShuffle => order_shuffle(spec)?,
        ExperimentId::HyperSweep => hyper_sweep(spec)?,
    };
    write_metrics_csv(&out_dir.join("metrics.csv"), &outcome.rows)?;
    outcome.summary["experiment"] = json!(spec.id.name());
    outcome.summary["seed"] = json!(spec.config.seed);
    outcome.summary["repetitions"] = json!(spec.repetitions);
    outcome.summary["gate_failures"] = json!(outcome.gate_failures);
    write_json(&out_dir.join("summary.json"), &outcome.summary)?;
    Ok(outcome)
}

/// Writes the per-run artifacts (facts, checkpoint, traces, analysis) for
/// one representative cell of an experiment.
fn write_rep_artifacts(
    out_dir: &Path,
    world: &TrainedWorld,
    model: &ToyModel,
    result: &EditResult,
    facts: &[FactTriple],
    temperature: f64,
) -> Result<serde_json::Value> {
    save_facts(&out_dir.join("facts.jsonl"), facts)?;
    save_model(&out_dir.join("model.bin"), model)?;
    crate::formats::save_batch(&out_dir.join("batch.bin"), &result.batch)?;
    write_traces_csv(&out_dir.join("traces.csv"), &result.traces)?;
    let k = result.batch.key_matrix().map_err(|e| anyhow!("{e}"))?;
    let r = result.batch.residual_matrix().map_err(|e| anyhow!("{e}"))?;
    let report = misalignment_report(&k, &r, temperature).map_err(|e| anyhow!("{e}"))?;
    let mut bound_reports = Vec::new();
    for i in 0..k.cols().min(64) {
        bound_reports.push(bound_check(&k, &r, i).map_err(|e| anyhow!("{e}"))?);
    }
    let summary = write_analysis_csv(&out_dir.join("analysis.csv"), &report.scores, &bound_reports)?;
    let _ = world;
    Ok(serde_json::to_value(&summary)?)
}

// ── scale_sweep: efficacy and total misalignment as the batch grows ────

fn scale_sweep(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let sizes = [50usize, 200, 500];
    let reps: Vec<usize> = (0..spec.repetitions).collect();
    let cells = parallel_map(reps, |rep| {
        let cfg = rep_config(&spec.config, rep);
        let world = trained_world(&cfg)?;
        let mut editor = cfg.editor_config()?;
        editor.method = EditMethod::Baseline;
        let mut rows = Vec::new();
        let mut gates = Vec::new();
        if world.train_recall < 0.95 {
            gates.push(format!(
                "rep {rep}: train recall {:.3} below the 0.95 gate",
                world.train_recall
            ));
        }
        let mut wall = Vec::new();
        for &n in &sizes {
            let n = n.min(world.edit_facts.len());
            let facts = &world.edit_facts[..n];
            let edited = edited_model(&world, &editor, facts)?;
            let row = evaluate_cell(
                "scale_sweep",
                "baseline".into(),
                &world,
                &edited.0,
                &edited.1,
                facts,
                1,
                0,
                &cfg,
            )?;
            check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
            wall.push(edited.1.wall_seconds);
            rows.push(row);
        }
        // Direction gates within this repetition.
        for w in rows.windows(2) {
            if w[1].efficacy > w[0].efficacy + 1e-12 {
                gates.push(format!("rep {rep}: efficacy increased from N={} to N={}", w[0].n_facts, w[1].n_facts));
            }
            if w[1].misalignment_sum <= w[0].misalignment_sum {
                gates.push(format!(
                    "rep {rep}: misalignment sum not increasing from N={} to N={}",
                    w[0].n_facts, w[1].n_facts
                ));
            }
        }
        Ok((rows, gates, world.train_seconds, wall))
    });

    let mut rows = Vec::new();
    let mut gate_failures = Vec::new();
    let mut timing = Vec::new();
    for cell in cells {
        let (r, g, train_s, wall) = cell?;
        rows.extend(r);
        gate_failures.extend(g);
        timing.push(json!({"train_seconds": train_s, "edit_seconds": wall}));
    }
    Ok(ExperimentOutcome {
        rows,
        summary: json!({ "sizes": sizes, "timing": timing }),
        gate_failures,
    })
}

// ── prefix_sweep: robustness of edited facts under prepended context ──

fn prefix_sweep(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let lens = spec.config.eval.prefix_lens.clone();
    let reps: Vec<usize> = (0..spec.repetitions).collect();
    let cells = parallel_map(reps, |rep| {
        let cfg = rep_config(&spec.config, rep);
        let world = trained_world(&cfg)?;
        let mut rows = Vec::new();
        let mut gates = Vec::new();
        let mut per_method = Vec::new();
        for method in [EditMethod::Baseline, EditMethod::Aligned] {
            let mut editor = cfg.editor_config()?;
            editor.method = method;
            let facts = world.edit_facts.clone();
            let edited = edited_model(&world, &editor, &facts)?;
            let mut eff_by_len = Vec::new();
            for &len in &lens {
                let row = evaluate_cell(
                    "prefix_sweep",
                    method_label(&editor).into(),
                    &world,
                    &edited.0,
                    &edited.1,
                    &facts,
                    1,
                    len,
                    &cfg,
                )?;
                check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
                eff_by_len.push((len, row.efficacy));
                rows.push(row);
            }
            per_method.push((method, edited, eff_by_len));
        }
        // Baseline must lose more efficacy from the shortest to the longest
        // prefix than the aligned method does.
        let drop_of = |effs: &[(usize, f64)]| -> f64 {
            let first = effs.first().map(|e| e.1).unwrap_or(0.0);
            let last = effs.last().map(|e| e.1).unwrap_or(0.0);
            first - last
        };
        let base_drop = drop_of(&per_method[0].2);
        let aligned_drop = drop_of(&per_method[1].2);
        if base_drop <= aligned_drop {
            gates.push(format!(
                "rep {rep}: baseline prefix drop {base_drop:.4} not larger than aligned {aligned_drop:.4}"
            ));
        }
        // Misalignment deciles on the baseline edit, evaluated under the
        // longest prefixes: the most aligned tenth must answer at least as
        // accurately as the least aligned tenth.
        let (decile_low, decile_high) = {
            let (model, result) = &*per_method[0].1;
            let k = result.batch.key_matrix().map_err(|e| anyhow!("{e}"))?;
            let r = result.batch.residual_matrix().map_err(|e| anyhow!("{e}"))?;
            let scores = misalignment_report(&k, &r, cfg.editor.temperature)
                .map_err(|e| anyhow!("{e}"))?
                .scores;
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
            let tenth = (scores.len() / 10).max(1);
            let low: Vec<FactTriple> = order[..tenth]
                .iter()
                .map(|&i| world.edit_facts[i].clone())
                .collect();
            let high: Vec<FactTriple> = order[scores.len() - tenth..]
                .iter()
                .map(|&i| world.edit_facts[i].clone())
                .collect();
            let longest = *lens.last().unwrap_or(&0);
            let prefixes = eval_prefixes(
                cfg.eval_seed(),
                cfg.eval.prefix_count,
                longest.max(1),
                model.cfg.vocab_size,
            );
            (
                efficacy(model, &low, &prefixes).map_err(|e| anyhow!("{e}"))?,
                efficacy(model, &high, &prefixes).map_err(|e| anyhow!("{e}"))?,
            )
        };
        if decile_low < decile_high {
            gates.push(format!(
                "rep {rep}: low-misalignment decile accuracy {decile_low:.4} below high decile {decile_high:.4}"
            ));
        }
        Ok((rows, gates, decile_low, decile_high))
    });

    let mut rows = Vec::new();
    let mut gate_failures = Vec::new();
    let mut deciles = Vec::new();
    for cell in cells {
        let (r, g, lo, hi) = cell?;
        rows.extend(r);
        gate_failures.extend(g);
        deciles.push(json!({"low_decile_acc": lo, "high_decile_acc": hi}));
    }
    Ok(ExperimentOutcome {
        rows,
        summary: json!({ "prefix_lens": lens, "deciles": deciles }),
        gate_failures,
    })
}

// ── same_subject: clusters of facts sharing one subject ───────────────

/// Heterogeneous cluster sizes (1, 2, 4, 8), sixteen clusters each, built
/// by trimming a uniform 8-per-subject corpus.
pub fn same_subject_config(base: &LabConfig) -> LabConfig {
    let mut cfg = base.clone();
    cfg.dataset.n_subjects = 64;
    cfg.dataset.n_facts = 64 * 8;
    cfg.dataset.neighbor_subjects = 32;
    cfg
}

pub const SAME_SUBJECT_SIZES: [usize; 4] = [1, 2, 4, 8];

fn same_subject_size_of(cluster: usize) -> usize {
    SAME_SUBJECT_SIZES[cluster % 4]
}

fn same_subject_world(cfg: &LabConfig) -> Result<std::sync::Arc<TrainedWorld>> {
    let n_subjects = cfg.dataset.n_subjects;
    build_world_with(cfg, move |ds| {
        let (edit_all, mut neighbors) = ds.split_by_cluster(n_subjects);
        // Keep the first `size(cluster)` facts of each editable cluster.
        let mut counts = vec![0usize; n_subjects];
        let mut kept = Vec::new();
        for f in edit_all {
            let c = f.cluster_id;
            if counts[c] < same_subject_size_of(c) {
                counts[c] += 1;
                kept.push(f);
            }
        }
        // Neighbors stay single-fact clusters.
        let mut seen = std::collections::BTreeSet::new();
        neighbors.retain(|f| seen.insert(f.cluster_id));
        (kept, neighbors)
    })
}

fn same_subject(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let reps: Vec<usize> = (0..spec.repetitions).collect();
    let base = same_subject_config(&spec.config);
    let cells = parallel_map(reps, |rep| {
        let cfg = rep_config(&base, rep);
        let world = same_subject_world(&cfg)?;
        let mut rows = Vec::new();
        let mut gates = Vec::new();
        let mut gaps = serde_json::Map::new();
        for method in [EditMethod::Baseline, EditMethod::Aligned] {
            let mut editor = cfg.editor_config()?;
            editor.method = method;
            let facts = world.edit_facts.clone();
            let edited = edited_model(&world, &editor, &facts)?;
            let mut eff_by_size = Vec::new();
            for &size in &SAME_SUBJECT_SIZES {
                let bucket: Vec<FactTriple> = facts
                    .iter()
                    .filter(|f| same_subject_size_of(f.cluster_id) == size)
                    .cloned()
                    .collect();
                let row = evaluate_cell(
                    "same_subject",
                    method_label(&editor).into(),
                    &world,
                    &edited.0,
                    &edited.1,
                    &bucket,
                    size,
                    0,
                    &cfg,
                )?;
                check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
                eff_by_size.push(row.efficacy);
                rows.push(row);
            }
            let gap = eff_by_size.first().unwrap_or(&0.0) - eff_by_size.last().unwrap_or(&0.0);
            gaps.insert(method_label(&editor).to_string(), json!(gap));

            // Self-weight means per cluster size, from the edit keys.
            if method == EditMethod::Baseline {
                let k = edited.1.batch.key_matrix().map_err(|e| anyhow!("{e}"))?;
                let trace_ridge = 1e-6 * k.frobenius_norm().powi(2) / k.rows() as f64;
                let beta = beta_coefficients(&k, trace_ridge).map_err(|e| anyhow!("{e}"))?;
                let mut means = Vec::new();
                for &size in &SAME_SUBJECT_SIZES {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for (i, f) in facts.iter().enumerate() {
                        if same_subject_size_of(f.cluster_id) == size {
                            sum += beta.matrix.at(i, i);
                            count += 1;
                        }
                    }
                    means.push(sum / count.max(1) as f64);
                }
                for w in means.windows(2) {
                    if w[1] >= w[0] {
                        gates.push(format!(
                            "rep {rep}: mean self-weight did not decrease with cluster size: {means:?}"
                        ));
                        break;
                    }
                }
                gaps.insert("beta_means".into(), json!(means));
            }
        }
        let base_gap = gaps.get("baseline").and_then(|v| v.as_f64()).unwrap_or(0.0);
        let aligned_gap = gaps.get("aligned").and_then(|v| v.as_f64()).unwrap_or(0.0);
        if aligned_gap >= base_gap {
            gates.push(format!(
                "rep {rep}: aligned cluster-size gap {aligned_gap:.4} not smaller than baseline {base_gap:.4}"
            ));
        }
        Ok((rows, gates, serde_json::Value::Object(gaps)))
    });

    let mut rows = Vec::new();
    let mut gate_failures = Vec::new();
    let mut gap_reports = Vec::new();
    for cell in cells {
        let (r, g, gaps) = cell?;
        rows.extend(r);
        gate_failures.extend(g);
        gap_reports.push(gaps);
    }
    Ok(ExperimentOutcome {
        rows,
        summary: json!({ "cluster_sizes": SAME_SUBJECT_SIZES, "gaps": gap_reports }),
        gate_failures,
    })
}

// ── ablation: each alignment term on its own ───────────────────────────

fn ablation(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let reps: Vec<usize> = (0..spec.repetitions).collect();
    let cells = parallel_map(reps, |rep| {
        let cfg = rep_config(&spec.config, rep);
        let world = trained_world(&cfg)?;
        let variants: [(&str, EditMethod, f64, f64); 4] = [
            ("full", EditMethod::Aligned, cfg.editor.lambda_kl, cfg.editor.lambda_mse),
            ("kl_only", EditMethod::Aligned, cfg.editor.lambda_kl, 0.0),
            ("mse_only", EditMethod::Aligned, 0.0, cfg.editor.lambda_mse),
            ("baseline", EditMethod::Baseline, 0.0, 0.0),
        ];
        let mut rows = Vec::new();
        let mut gates = Vec::new();
        for (label, method, l_kl, l_mse) in variants {
            let mut editor = cfg.editor_config()?;
            editor.method = method;
            editor.lambda_kl = l_kl;
            editor.lambda_mse = l_mse;
            let facts = world.edit_facts.clone();
            let edited = edited_model(&world, &editor, &facts)?;
            // Ablated terms must leave no trace contribution.
            if l_kl == 0.0
                && edited.1.traces.iter().flatten().any(|t| t.l_kl != 0.0)
            {
                gates.push(format!("rep {rep}: {label} shows KL contribution despite zero weight"));
            }
            if l_mse == 0.0
                && edited.1.traces.iter().flatten().any(|t| t.l_mse != 0.0)
            {
                gates.push(format!("rep {rep}: {label} shows MSE contribution despite zero weight"));
            }
            let row = evaluate_cell(
                "ablation",
                label.into(),
                &world,
                &edited.0,
                &edited.1,
                &facts,
                1,
                0,
                &cfg,
            )?;
            check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
            rows.push(row);
        }
        Ok((rows, gates))
    });

    let mut rows = Vec::new();
    let mut gate_failures = Vec::new();
    for cell in cells {
        let (r, g) = cell?;
        rows.extend(r);
        gate_failures.extend(g);
    }
    // Seed-averaged ordering: full >= each single-loss variant >= baseline.
    let mean_of = |label: &str| -> f64 {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == label)
            .map(|r| r.efficacy)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let (full, kl_only, mse_only, baseline) = (
        mean_of("full"),
        mean_of("kl_only"),
        mean_of("mse_only"),
        mean_of("baseline"),
    );
    let eps = 1e-12;
    if !(full + eps >= kl_only && full + eps >= mse_only) {
        gate_failures.push(format!(
            "full efficacy {full:.4} below an ablation (kl {kl_only:.4}, mse {mse_only:.4})"
        ));
    }
    if !(kl_only + eps >= baseline && mse_only + eps >= baseline) {
        gate_failures.push(format!(
            "an ablation fell below baseline {baseline:.4} (kl {kl_only:.4}, mse {mse_only:.4})"
        ));
    }
    Ok(ExperimentOutcome {
        rows,
        summary: json!({
            "seed_averaged_efficacy": {
                "full": full, "kl_only": kl_only, "mse_only": mse_only, "baseline": baseline
            }
        }),
        gate_failures,
    })
}

// ── order_shuffle: sensitivity to the editing sequence ─────────────────

fn order_shuffle(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let orders = spec.repetitions.max(3);
    let cfg = spec.config.clone();
    let world = trained_world(&cfg)?;
    let order_ids: Vec<usize> = (0..orders).collect();
    let cells = parallel_map(order_ids, |order| {
        let mut editor = cfg.editor_config()?;
        editor.method = EditMethod::Aligned;
        let mut facts = world.edit_facts.clone();
        if order > 0 {
            let mut rng = memedit_core::rng::Rng::new(cfg.seed).derive("order", order as u64);
            rng.shuffle(&mut facts);
        }
        let edited = edited_model(&world, &editor, &facts)?;
        let mut gates = Vec::new();
        let row = evaluate_cell(
            "order_shuffle",
            format!("aligned-order{order}"),
            &world,
            &edited.0,
            &edited.1,
            &facts,
            1,
            0,
            &cfg,
        )?;
        check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
        Ok((row, gates))
    });

    let mut rows = Vec::new();
    let mut gate_failures = Vec::new();
    for cell in cells {
        let (row, g) = cell?;
        rows.push(row);
        gate_failures.extend(g);
    }
    let effs: Vec<f64> = rows.iter().map(|r| r.efficacy).collect();
    let spread = effs.iter().cloned().fold(f64::MIN, f64::max)
        - effs.iter().cloned().fold(f64::MAX, f64::min);
    if spread > 0.03 {
        gate_failures.push(format!("efficacy spread across orderings {spread:.4} exceeds 0.03"));
    }
    Ok(ExperimentOutcome {
        rows,
        summary: json!({ "efficacy_spread": spread }),
        gate_failures,
    })
}

// ── hyper_sweep: one-dimensional sweeps around the defaults ────────────

fn hyper_sweep(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let cfg = spec.config.clone();
    let world = trained_world(&cfg)?;
    #[derive(Clone)]
    enum Knob {
        Kl(f64),
        Mse(f64),
        TopM(usize),
        Lambda(f64),
    }
    let mut cells_in: Vec<(String, Knob)> = Vec::new();
    for v in [0.0, 1.0, 2.0, 4.0, 8.0] {
        cells_in.push((format!("kl={v}"), Knob::Kl(v)));
    }
    for v in [0.0, 4.0, 8.0, 16.0] {
        cells_in.push((format!("mse={v}"), Knob::Mse(v)));
    }
    for v in [5usize, 10, 50, 100] {
        cells_in.push((format!("top_m={v}"), Knob::TopM(v)));
    }
    for v in [500.0, 2000.0, 4000.0, 10000.0, 40000.0] {
        cells_in.push((format!("lambda={v}"), Knob::Lambda(v)));
    }
    let cells = parallel_map(cells_in, |(label, knob)| {
        let mut editor = cfg.editor_config()?;
        editor.method = EditMethod::Aligned;
        match knob {
            Knob::Kl(v) => editor.lambda_kl = v,
            Knob::Mse(v) => editor.lambda_mse = v,
            Knob::TopM(v) => editor.top_m = v,
            Knob::Lambda(v) => editor.lambda_weight = v,
        }
        let facts = world.edit_facts.clone();
        let edited = edited_model(&world, &editor, &facts)?;
        let mut gates = Vec::new();
        let row = evaluate_cell(
            "hyper_sweep",
            label,
            &world,
            &edited.0,
            &edited.1,
            &facts,
            1,
            0,
            &cfg,
        )?;
        check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
        Ok((row, gates))
    });

    let mut rows = Vec::new();
    let mut gate_failures = Vec::new();
    for cell in cells {
        let (row, g) = cell?;
        rows.push(row);
        gate_failures.extend(g);
    }
    let best = rows
        .iter()
        .max_by(|a, b| a.efficacy.partial_cmp(&b.efficacy).unwrap())
        .map(|r| json!({"method": r.method, "efficacy": r.efficacy}));
    Ok(ExperimentOutcome {
        rows,
        summary: json!({ "best": best }),
        gate_failures,
    })
}

/// Shared by the CLI `edit` command: edit, evaluate once, write artifacts.
pub fn single_edit_run(
    cfg: &LabConfig,
    method: EditMethod,
    out_dir: &Path,
) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let world = trained_world(cfg)?;
    let mut editor = cfg.editor_config()?;
    editor.method = method;
    let facts = world.edit_facts.clone();
    let edited = edited_model(&world, &editor, &facts)?;
    let mut gates = Vec::new();
    let row = evaluate_cell(
        "edit",
        method_label(&editor).into(),
        &world,
        &edited.0,
        &edited.1,
        &facts,
        1,
        0,
        cfg,
    )?;
    check_row_invariants(&row, editor.opt_steps, &edited.1, &mut gates);
    let analysis = write_rep_artifacts(
        out_dir,
        &world,
        &edited.0,
        &edited.1,
        &facts,
        cfg.editor.temperature,
    )?;
    let rows = vec![row];
    write_metrics_csv(&out_dir.join("metrics.csv"), &rows)?;
    let summary = json!({
        "train_recall": world.train_recall,
        "train_seconds": world.train_seconds,
        "edit_seconds": edited.1.wall_seconds,
        "analysis": analysis,
    });
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(ExperimentOutcome {
        rows,
        summary,
        gate_failures: gates,
    })
}
