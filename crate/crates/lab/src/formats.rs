//! On-disk formats: the model checkpoint (little-endian binary), the facts
//! file (line-delimited JSON), batch artifacts for later analysis, and the
//! CSV/JSON report writers.

use anyhow::{bail, Context, Result};
use memedit_core::editor::EditBatch;
use memedit_core::memory_model::KeyRecord;
use memedit_core::numerics::DenseMatrix;
use memedit_core::toy_lm::{build_model, ToyModel, ToyModelConfig};
use memedit_core::FactTriple;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOYLMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BATCH_MAGIC: &[u8; 8] = b"EDITBTCH";

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_tensor(w: &mut impl Write, name: &str, data: &[f64]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u64(w, data.len() as u64)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Vec<f64>)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).context("tensor name is not UTF-8")?;
    let count = read_u64(r)? as usize;
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, data))
}

/// Model checkpoint: magic, version, config fields, then each parameter
/// tensor as (name length, name bytes, element count, f64 little-endian).
pub fn save_model(path: &Path, model: &ToyModel) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, model.cfg.vocab_size as u32)?;
    write_u32(&mut w, model.cfg.hidden_dim as u32)?;
    write_u32(&mut w, model.cfg.num_layers as u32)?;
    write_u32(&mut w, model.cfg.seq_len_max as u32)?;
    write_u32(&mut w, model.cfg.ffn_expansion as u32)?;
    write_u64(&mut w, model.cfg.seed)?;
    let tensors = model.named_tensors();
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, data) in tensors {
        write_tensor(&mut w, &name, data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    let mut r = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        bail!("{} is not a model checkpoint", path.display());
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let cfg = ToyModelConfig {
        vocab_size: read_u32(&mut r)? as usize,
        hidden_dim: read_u32(&mut r)? as usize,
        num_layers: read_u32(&mut r)? as usize,
        seq_len_max: read_u32(&mut r)? as usize,
        ffn_expansion: read_u32(&mut r)? as usize,
        seed: read_u64(&mut r)?,
    };
    let mut model = build_model(&cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
    let count = read_u32(&mut r)? as usize;
    for _ in 0..count {
        let (name, data) = read_tensor(&mut r)?;
        let slot = model
            .tensor_mut(&name)
            .with_context(|| format!("unknown tensor {name}"))?;
        if slot.len() != data.len() {
            bail!("tensor {name} has {} elements, expected {}", data.len(), slot.len());
        }
        *slot = data;
    }
    Ok(model)
}

/// One line of the facts file. Field names are part of the format.
#[derive(Serialize, Deserialize)]
pub struct FactRecord {
    pub subject_tokens: Vec<usize>,
    pub relation: usize,
    pub template_id: usize,
    pub heldout_template: usize,
    pub original: usize,
    pub target: usize,
    pub cluster: usize,
    pub prompt: Vec<usize>,
    pub subject_end: usize,
    pub heldout_prompt: Vec<usize>,
    pub heldout_subject_end: usize,
}

impl From<&FactTriple> for FactRecord {
    fn from(f: &FactTriple) -> Self {
        FactRecord {
            subject_tokens: f.subject_tokens.clone(),
            relation: f.relation_id,
            template_id: f.template_id,
            heldout_template: f.heldout_template_id,
            original: f.original_object,
            target: f.target_object,
            cluster: f.cluster_id,
            prompt: f.prompt_tokens.clone(),
            subject_end: f.subject_end,
            heldout_prompt: f.heldout_prompt_tokens.clone(),
            heldout_subject_end: f.heldout_subject_end,
        }
    }
}

impl From<FactRecord> for FactTriple {
    fn from(r: FactRecord) -> Self {
        FactTriple {
            subject_tokens: r.subject_tokens,
            relation_id: r.relation,
            template_id: r.template_id,
            heldout_template_id: r.heldout_template,
            original_object: r.original,
            target_object: r.target,
            cluster_id: r.cluster,
            prompt_tokens: r.prompt,
            subject_end: r.subject_end,
            heldout_prompt_tokens: r.heldout_prompt,
            heldout_subject_end: r.heldout_subject_end,
        }
    }
}

pub fn save_facts(path: &Path, facts: &[FactTriple]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for f in facts {
        let rec = FactRecord::from(f);
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_facts(path: &Path) -> Result<Vec<FactTriple>> {
    let text = fs::read_to_string(path).with_context(|| format!("open {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        out.push(rec.into());
    }
    Ok(out)
}

/// Batch artifact: the per-fact keys, residuals, and targets an edit
/// produced, stored in the same tensor framing as checkpoints so `analyze`
/// can run later without the model.
pub fn save_batch(path: &Path, batch: &EditBatch) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(BATCH_MAGIC)?;
    write_u32(&mut w, 1)?;
    write_u32(&mut w, batch.facts.len() as u32)?;
    let dims = if batch.keys.is_empty() {
        (0, 0)
    } else {
        (batch.keys[0].key.len(), batch.residuals[0].len())
    };
    write_u32(&mut w, dims.0 as u32)?;
    write_u32(&mut w, dims.1 as u32)?;
    for (i, k) in batch.keys.iter().enumerate() {
        write_tensor(&mut w, &format!("key{i}"), &k.key)?;
    }
    for (i, r) in batch.residuals.iter().enumerate() {
        write_tensor(&mut w, &format!("residual{i}"), r)?;
    }
    for (i, z) in batch.z_targets.iter().enumerate() {
        write_tensor(&mut w, &format!("z{i}"), z)?;
    }
    w.flush()?;
    Ok(())
}

/// (keys as columns, residuals as columns)
pub fn load_batch_matrices(path: &Path) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut r = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BATCH_MAGIC {
        bail!("{} is not a batch artifact", path.display());
    }
    let _version = read_u32(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    let _dk = read_u32(&mut r)?;
    let _h = read_u32(&mut r)?;
    let mut keys = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    for i in 0..n {
        let (name, data) = read_tensor(&mut r)?;
        if name != format!("key{i}") {
            bail!("unexpected tensor {name}");
        }
        keys.push(data);
    }
    for i in 0..n {
        let (name, data) = read_tensor(&mut r)?;
        if name != format!("residual{i}") {
            bail!("unexpected tensor {name}");
        }
        residuals.push(data);
    }
    let k = DenseMatrix::from_columns(&keys).map_err(|e| anyhow::anyhow!("{e}"))?;
    let r_m = DenseMatrix::from_columns(&residuals).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((k, r_m))
}

/// Minimal key view of a loaded batch for diagnostics that want records.
pub fn batch_key_records(k: &DenseMatrix, layer: usize) -> Vec<KeyRecord> {
    (0..k.cols())
        .map(|j| KeyRecord {
            fact_index: j,
            layer,
            key: k.column(j),
        })
        .collect()
}

// ── CSV writers ──────────────────────────────────────────────────────

/// One metrics row. Columns are fixed; floats print with Rust's shortest
/// round-trip formatting so reruns are byte-identical.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub method: String,
    pub n_facts: usize,
    pub cluster_size: usize,
    pub prefix_len: usize,
    pub seed: u64,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub fluency: f64,
    pub misalignment_sum: f64,
    pub config_fingerprint: String,
}

pub const METRICS_HEADER: &str = "experiment,method,n_facts,cluster_size,prefix_len,seed,efficacy,generalization,specificity,fluency,misalignment_sum,config_fingerprint";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.method,
            self.n_facts,
            self.cluster_size,
            self.prefix_len,
            self.seed,
            self.efficacy,
            self.generalization,
            self.specificity,
            self.fluency,
            self.misalignment_sum,
            self.config_fingerprint
        )
    }

    /// Sort key making row order independent of worker scheduling.
    pub fn sort_key(&self) -> (String, String, usize, usize, usize, u64) {
        (
            self.experiment.clone(),
            self.method.clone(),
            self.n_facts,
            self.cluster_size,
            self.prefix_len,
            self.seed,
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for row in sorted {
        writeln!(w, "{}", row.to_csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces_csv(path: &Path, traces: &[Vec<memedit_core::editor::TraceStep>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "fact,step,nll,l_kl,l_mse,total")?;
    for (fact, trace) in traces.iter().enumerate() {
        for (step, t) in trace.iter().enumerate() {
            writeln!(w, "{fact},{step},{},{},{},{}", t.nll, t.l_kl, t.l_mse, t.total)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-item analysis rows plus the JSON summary next to them.
#[derive(Clone, Debug, Serialize)]
pub struct AnalysisSummary {
    pub items: usize,
    pub score_sum: f64,
    pub violation_count: usize,
    pub infinite_bound_count: usize,
    pub mean_beta_ii: f64,
}

pub fn write_analysis_csv(
    path: &Path,
    scores: &[f64],
    reports: &[memedit_core::analysis::BoundReport],
) -> Result<AnalysisSummary> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "item,score,beta_ii,e_norm,bound,slack")?;
    let mut infinite = 0usize;
    let mut beta_sum = 0.0;
    for rep in reports {
        if rep.infinite {
            infinite += 1;
        }
        beta_sum += rep.beta_ii;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            rep.item, scores[rep.item], rep.beta_ii, rep.e_norm, rep.bound, rep.slack
        )?;
    }
    w.flush()?;
    Ok(AnalysisSummary {
        items: reports.len(),
        score_sum: scores.iter().sum(),
        violation_count: 0,
        infinite_bound_count: infinite,
        mean_beta_ii: if reports.is_empty() {
            0.0
        } else {
            beta_sum / reports.len() as f64
        },
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use memedit_core::dataset::{Dataset, DatasetSpec};
    use tempdir::scratch_dir;

    mod tempdir {
        use std::path::PathBuf;
        use std::sync::atomic::{AtomicU64, Ordering};

        static NEXT: AtomicU64 = AtomicU64::new(0);

        pub fn scratch_dir(tag: &str) -> PathBuf {
            let id = NEXT.fetch_add(1, Ordering::Relaxed);
            let dir = std::env::temp_dir().join(format!(
                "memedit-test-{tag}-{}-{id}",
                std::process::id()
            ));
            std::fs::create_dir_all(&dir).unwrap();
            dir
        }
    }

    #[test]
    fn model_checkpoint_round_trips_bit_exact() {
        let dir = scratch_dir("ckpt");
        let cfg = ToyModelConfig {
            vocab_size: 32,
            hidden_dim: 8,
            num_layers: 2,
            seq_len_max: 8,
            ffn_expansion: 2,
            seed: 9,
        };
        let model = build_model(&cfg).unwrap();
        let path = dir.join("model.bin");
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.checksum(), loaded.checksum());
        assert_eq!(model.cfg, loaded.cfg);
    }

    #[test]
    fn facts_file_round_trips() {
        let dir = scratch_dir("facts");
        let ds = Dataset::generate(
            &DatasetSpec {
                n_facts: 12,
                n_subjects: 6,
                n_relations: 4,
                prefix_pool_size: 4,
                seed: 7,
            },
            256,
        )
        .unwrap();
        let path = dir.join("facts.jsonl");
        save_facts(&path, &ds.facts).unwrap();
        let loaded = load_facts(&path).unwrap();
        assert_eq!(ds.facts, loaded);
    }

    #[test]
    fn metrics_rows_are_sorted_and_stable() {
        let dir = scratch_dir("metrics");
        let mk = |seed: u64| MetricsRow {
            experiment: "x".into(),
            method: "baseline".into(),
            n_facts: 10,
            cluster_size: 1,
            prefix_len: 0,
            seed,
            efficacy: 0.5,
            generalization: 0.25,
            specificity: 1.0,
            fluency: 1.5,
            misalignment_sum: 2.0,
            config_fingerprint: "abcd".into(),
        };
        let path = dir.join("metrics.csv");
        write_metrics_csv(&path, &[mk(2), mk(1)]).unwrap();
        let a = std::fs::read(&path).unwrap();
        write_metrics_csv(&path, &[mk(1), mk(2)]).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
    }
}
