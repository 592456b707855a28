//! Trained substrates and edited models, cached so experiment cells that
//! share a (config, seed) pay for training and editing once per process.

use crate::config::LabConfig;
use anyhow::{anyhow, Result};
use memedit_core::dataset::Dataset;
use memedit_core::editor::{run_edit, EditResult, EditorConfig};
use memedit_core::toy_lm::{build_model, train_with_options, ToyModel};
use memedit_core::FactTriple;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

/// A trained model plus the corpus it memorized, split into the editable
/// facts and the untouched neighbor facts.
pub struct TrainedWorld {
    pub config: LabConfig,
    pub dataset: Dataset,
    pub edit_facts: Vec<FactTriple>,
    pub neighbor_facts: Vec<FactTriple>,
    pub model: ToyModel,
    pub train_recall: f64,
    pub train_seconds: f64,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

pub fn config_fingerprint(cfg: &LabConfig) -> u64 {
    let text = toml::to_string(cfg).unwrap_or_default();
    fnv64(text.as_bytes())
}

pub fn editor_fingerprint(cfg: &EditorConfig) -> u64 {
    fnv64(format!("{cfg:?}").as_bytes())
}

fn world_cache() -> &'static Mutex<HashMap<u64, Arc<TrainedWorld>>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<TrainedWorld>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn edit_cache() -> &'static Mutex<HashMap<u64, Arc<(ToyModel, EditResult)>>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<(ToyModel, EditResult)>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Drops every cached world and edit (used by determinism checks).
pub fn clear_caches() {
    world_cache().lock().unwrap().clear();
    edit_cache().lock().unwrap().clear();
}

/// Builds (or returns the cached) trained world for a config. The dataset
/// is generated with neighbor clusters appended; the model trains on the
/// whole corpus.
pub fn trained_world(cfg: &LabConfig) -> Result<Arc<TrainedWorld>> {
    build_world_with(cfg, |ds| {
        let (edit, neighbor) = ds.split_by_cluster(cfg.dataset.n_subjects);
        (edit, neighbor)
    })
}

/// As [`trained_world`] but with a caller-chosen partition and trim of the
/// generated facts (the trimmed facts are what the model trains on).
pub fn build_world_with(
    cfg: &LabConfig,
    partition: impl Fn(&Dataset) -> (Vec<FactTriple>, Vec<FactTriple>),
) -> Result<Arc<TrainedWorld>> {
    let key = config_fingerprint(cfg);
    if let Some(w) = world_cache().lock().unwrap().get(&key) {
        return Ok(w.clone());
    }
    let model_cfg = cfg.model_config();
    let dataset = Dataset::generate(&cfg.dataset_spec(), model_cfg.vocab_size)
        .map_err(|e| anyhow!("{e}"))?;
    let (edit_facts, neighbor_facts) = partition(&dataset);
    let mut model = build_model(&model_cfg).map_err(|e| anyhow!("{e}"))?;
    let started = Instant::now();
    let mut corpus = edit_facts.clone();
    corpus.extend(neighbor_facts.iter().cloned());
    train_with_options(&mut model, &corpus, &cfg.train_options()).map_err(|e| anyhow!("{e}"))?;
    let train_seconds = started.elapsed().as_secs_f64();
    let train_recall = memedit_core::toy_lm::recall(&model, &edit_facts).map_err(|e| anyhow!("{e}"))?;
    let world = Arc::new(TrainedWorld {
        config: cfg.clone(),
        dataset,
        edit_facts,
        neighbor_facts,
        model,
        train_recall,
        train_seconds,
    });
    world_cache()
        .lock()
        .unwrap()
        .insert(key, world.clone());
    Ok(world)
}

/// Runs (or returns the cached) edit of `facts` on a fresh copy of the
/// world's model, filling in wall-clock seconds.
pub fn edited_model(
    world: &TrainedWorld,
    editor: &EditorConfig,
    facts: &[FactTriple],
) -> Result<Arc<(ToyModel, EditResult)>> {
    let mut key_bytes = Vec::new();
    key_bytes.extend_from_slice(&config_fingerprint(&world.config).to_le_bytes());
    key_bytes.extend_from_slice(&editor_fingerprint(editor).to_le_bytes());
    for f in facts {
        key_bytes.extend_from_slice(&(f.cluster_id as u64).to_le_bytes());
        key_bytes.extend_from_slice(&(f.relation_id as u64).to_le_bytes());
        key_bytes.extend_from_slice(&(f.target_object as u64).to_le_bytes());
    }
    let key = fnv64(&key_bytes);
    if let Some(hit) = edit_cache().lock().unwrap().get(&key) {
        return Ok(hit.clone());
    }
    let preserved = world.dataset.preserved_prompts(
        editor.seed,
        editor.covariance_samples,
        world.model.cfg.seq_len_max,
    );
    let mut model = world.model.clone();
    let started = Instant::now();
    let mut result = run_edit(&mut model, facts, editor, &preserved).map_err(|e| anyhow!("{e}"))?;
    result.wall_seconds = started.elapsed().as_secs_f64();
    let entry = Arc::new((model, result));
    edit_cache().lock().unwrap().insert(key, entry.clone());
    Ok(entry)
}

/// Maps `f` over the items on up to `available_parallelism` worker
/// threads, preserving item order in the output.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<Result<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let items: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = Mutex::new(items);
    let results: Mutex<Vec<(usize, Result<R>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().pop();
                match next {
                    Some((idx, item)) => {
                        let r = f(item);
                        results.lock().unwrap().push((idx, r));
                    }
                    None => break,
                }
            });
        }
    });
    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(idx, _)| *idx);
    collected.into_iter().map(|(_, r)| r).collect()
}
