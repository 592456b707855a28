//! Synthetic fact corpus: subjects, relations with two surface templates
//! each, original/target objects, and same-subject cluster structure.
//!
//! The token space is split into disjoint ranges so subjects, relation
//! surfaces, and objects never collide; prefixes may use the whole vocab.
//! Every draw comes from the spec seed, so equal specs produce identical
//! facts byte for byte.

use crate::memory_model::FactTriple;
use crate::rng::Rng;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_facts: usize,
    /// Number of distinct subjects; facts are assigned round-robin, so
    /// cluster sizes differ by at most one.
    pub n_subjects: usize,
    pub n_relations: usize,
    /// Size of the evaluation prefix pool the harness draws from.
    pub prefix_pool_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetError {
    Inconsistent(&'static str),
    VocabTooSmall { vocab: usize },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Inconsistent(msg) => write!(f, "inconsistent dataset spec: {msg}"),
            DatasetError::VocabTooSmall { vocab } => {
                write!(f, "vocab size {vocab} too small for the token layout")
            }
        }
    }
}

/// Disjoint token ranges carved out of the vocabulary. The `noise` range
/// plays the role of generic context text: prefixes are drawn from it so
/// they never collide with subject, relation, or object tokens.
#[derive(Clone, Debug)]
pub struct VocabLayout {
    pub objects: Range<usize>,
    pub subjects: Range<usize>,
    pub relations: Range<usize>,
    pub noise: Range<usize>,
}

impl VocabLayout {
    pub fn for_vocab(vocab_size: usize) -> Result<Self, DatasetError> {
        if vocab_size < 16 {
            return Err(DatasetError::VocabTooSmall { vocab: vocab_size });
        }
        let quarter = vocab_size / 4;
        Ok(VocabLayout {
            objects: 0..quarter,
            subjects: quarter..quarter + (vocab_size * 3) / 8,
            relations: quarter + (vocab_size * 3) / 8..(vocab_size * 7) / 8,
            noise: (vocab_size * 7) / 8..vocab_size,
        })
    }
}

/// The context-token range for a vocabulary, shared by every prefix
/// generator (training augmentation, edit-time prefixes, evaluation).
pub fn noise_range(vocab_size: usize) -> Range<usize> {
    (vocab_size * 7) / 8..vocab_size
}

/// `len` random context tokens.
pub fn noise_seq(rng: &mut Rng, len: usize, vocab_size: usize) -> Vec<usize> {
    let range = noise_range(vocab_size);
    (0..len).map(|_| range.start + rng.below(range.len())).collect()
}

/// One surface rendering of a relation: intro tokens, then the subject,
/// then continuation tokens; the object is predicted after the
/// continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceTemplate {
    pub intro: Vec<usize>,
    pub continuation: Vec<usize>,
}

impl SurfaceTemplate {
    pub fn render(&self, subject: &[usize]) -> (Vec<usize>, usize) {
        let mut tokens =
            Vec::with_capacity(self.intro.len() + subject.len() + self.continuation.len());
        tokens.extend_from_slice(&self.intro);
        tokens.extend_from_slice(subject);
        let subject_end = tokens.len() - 1;
        tokens.extend_from_slice(&self.continuation);
        (tokens, subject_end)
    }
}

/// The generated corpus plus the machinery needed to rebuild prompts:
/// subjects, relation surfaces, and the object pool.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub facts: Vec<FactTriple>,
    pub subjects: Vec<Vec<usize>>,
    /// templates[relation][surface]; surface 0 edits, surface 1 is held out.
    pub templates: Vec<Vec<SurfaceTemplate>>,
    pub layout: VocabLayout,
    pub vocab_size: usize,
}

pub const SURFACES_PER_RELATION: usize = 2;
const SUBJECT_LEN: usize = 2;
const INTRO_LEN: usize = 2;
const CONTINUATION_LEN: usize = 2;

impl Dataset {
    pub fn generate(spec: &DatasetSpec, vocab_size: usize) -> Result<Dataset, DatasetError> {
        if spec.n_facts == 0 {
            return Err(DatasetError::Inconsistent("n_facts must be >= 1"));
        }
        if spec.n_subjects == 0 || spec.n_subjects > spec.n_facts {
            return Err(DatasetError::Inconsistent(
                "n_subjects must be in 1..=n_facts",
            ));
        }
        if spec.n_relations == 0 {
            return Err(DatasetError::Inconsistent("n_relations must be >= 1"));
        }
        let max_cluster = spec.n_facts.div_ceil(spec.n_subjects);
        if max_cluster > spec.n_relations {
            return Err(DatasetError::Inconsistent(
                "cluster size exceeds relation count; same-subject facts would repeat a relation",
            ));
        }
        let layout = VocabLayout::for_vocab(vocab_size)?;
        let n_objects = layout.objects.len();
        if n_objects < 2 {
            return Err(DatasetError::VocabTooSmall { vocab: vocab_size });
        }
        let root = Rng::new(spec.seed).derive("dataset", 0);

        // Distinct subjects by rejection over ordered token pairs.
        let subject_alphabet: Vec<usize> = layout.subjects.clone().collect();
        let capacity = subject_alphabet.len() * subject_alphabet.len();
        if spec.n_subjects > capacity / 2 {
            return Err(DatasetError::Inconsistent(
                "n_subjects exceeds half the distinct subject capacity",
            ));
        }
        let mut subj_rng = root.derive("subjects", 0);
        let mut subjects: Vec<Vec<usize>> = Vec::with_capacity(spec.n_subjects);
        while subjects.len() < spec.n_subjects {
            let s: Vec<usize> = (0..SUBJECT_LEN)
                .map(|_| subject_alphabet[subj_rng.below(subject_alphabet.len())])
                .collect();
            if !subjects.contains(&s) {
                subjects.push(s);
            }
        }

        // Distinct relation surfaces.
        let relation_alphabet: Vec<usize> = layout.relations.clone().collect();
        let mut tmpl_rng = root.derive("templates", 0);
        let mut templates: Vec<Vec<SurfaceTemplate>> = Vec::with_capacity(spec.n_relations);
        let mut seen: Vec<SurfaceTemplate> = Vec::new();
        for _ in 0..spec.n_relations {
            let mut surfaces = Vec::with_capacity(SURFACES_PER_RELATION);
            for _ in 0..SURFACES_PER_RELATION {
                loop {
                    let t = SurfaceTemplate {
                        intro: (0..INTRO_LEN)
                            .map(|_| relation_alphabet[tmpl_rng.below(relation_alphabet.len())])
                            .collect(),
                        continuation: (0..CONTINUATION_LEN)
                            .map(|_| relation_alphabet[tmpl_rng.below(relation_alphabet.len())])
                            .collect(),
                    };
                    if !seen.contains(&t) {
                        seen.push(t.clone());
                        surfaces.push(t);
                        break;
                    }
                }
            }
            templates.push(surfaces);
        }

        // Facts: subject round-robin, relations cycled per subject so
        // same-subject facts never share a relation.
        let mut facts = Vec::with_capacity(spec.n_facts);
        for f in 0..spec.n_facts {
            let subject_idx = f % spec.n_subjects;
            let relation_idx = (f / spec.n_subjects) % spec.n_relations;
            let mut obj_rng = root.derive("objects", (subject_idx * spec.n_relations + relation_idx) as u64);
            let original = layout.objects.start + obj_rng.below(n_objects);
            let target = loop {
                let cand = layout.objects.start + obj_rng.below(n_objects);
                if cand != original {
                    break cand;
                }
            };
            let subject = &subjects[subject_idx];
            let (prompt_tokens, subject_end) = templates[relation_idx][0].render(subject);
            let (heldout_prompt_tokens, heldout_subject_end) =
                templates[relation_idx][1].render(subject);
            facts.push(FactTriple {
                subject_tokens: subject.clone(),
                relation_id: relation_idx,
                template_id: 0,
                heldout_template_id: 1,
                original_object: original,
                target_object: target,
                cluster_id: subject_idx,
                prompt_tokens,
                subject_end,
                heldout_prompt_tokens,
                heldout_subject_end,
            });
        }

        Ok(Dataset {
            spec: spec.clone(),
            facts,
            subjects,
            templates,
            layout,
            vocab_size,
        })
    }

    /// Facts split into (clusters below `k`, the rest). Clusters stay whole
    /// on their side of the split, so the two halves share no subject.
    pub fn split_by_cluster(&self, k: usize) -> (Vec<FactTriple>, Vec<FactTriple>) {
        let mut left = Vec::new();
        let mut right = Vec::new();
        for f in &self.facts {
            if f.cluster_id < k {
                left.push(f.clone());
            } else {
                right.push(f.clone());
            }
        }
        (left, right)
    }

    /// Prompts resembling the training distribution, for covariance
    /// estimation: random relation surface rendered with a random subject,
    /// under a short random prefix.
    pub fn preserved_prompts(&self, seed: u64, count: usize, seq_len_max: usize) -> Vec<Vec<usize>> {
        let mut rng = Rng::new(seed).derive("preserved", 0);
        (0..count)
            .map(|_| {
                let subject = &self.subjects[rng.below(self.subjects.len())];
                let relation = rng.below(self.templates.len());
                let surface = rng.below(SURFACES_PER_RELATION);
                let (mut prompt, _) = self.templates[relation][surface].render(subject);
                let budget = seq_len_max.saturating_sub(prompt.len());
                let plen = rng.below(budget.min(8) + 1);
                let mut tokens = noise_seq(&mut rng, plen, self.vocab_size);
                tokens.append(&mut prompt);
                tokens
            })
            .collect()
    }
}

/// Convenience wrapper returning just the fact list.
pub fn generate_dataset(
    spec: &DatasetSpec,
    vocab_size: usize,
) -> Result<Vec<FactTriple>, DatasetError> {
    Ok(Dataset::generate(spec, vocab_size)?.facts)
}

/// Evaluation prefixes: `count` random sequences of `len` tokens, drawn
/// from a stream disjoint from the edit-time prefix stream.
pub fn eval_prefixes(seed: u64, count: usize, len: usize, vocab_size: usize) -> Vec<Vec<usize>> {
    if len == 0 {
        return alloc::vec![Vec::new()];
    }
    let mut rng = Rng::new(seed).derive("eval-prefix", len as u64);
    (0..count).map(|_| noise_seq(&mut rng, len, vocab_size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_facts: usize, n_subjects: usize) -> DatasetSpec {
        DatasetSpec {
            n_facts,
            n_subjects,
            n_relations: 16,
            prefix_pool_size: 10,
            seed: 99,
        }
    }

    #[test]
    fn equal_subject_count_gives_singleton_clusters() {
        let ds = Dataset::generate(&spec(20, 20), 256).unwrap();
        let mut sizes = alloc::vec![0usize; 20];
        for f in &ds.facts {
            sizes[f.cluster_id] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 1));
    }

    #[test]
    fn eight_to_one_gives_clusters_of_eight() {
        let ds = Dataset::generate(&spec(40, 5), 256).unwrap();
        let mut sizes = alloc::vec![0usize; 5];
        for f in &ds.facts {
            sizes[f.cluster_id] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 8), "{sizes:?}");
    }

    #[test]
    fn same_seed_reproduces_identical_facts() {
        let a = Dataset::generate(&spec(50, 10), 256).unwrap();
        let b = Dataset::generate(&spec(50, 10), 256).unwrap();
        assert_eq!(a.facts, b.facts);
        let c = Dataset::generate(
            &DatasetSpec {
                seed: 100,
                ..spec(50, 10)
            },
            256,
        )
        .unwrap();
        assert_ne!(a.facts, c.facts);
    }

    #[test]
    fn facts_validate_and_same_subject_facts_differ_in_relation() {
        let ds = Dataset::generate(&spec(64, 8), 256).unwrap();
        for f in &ds.facts {
            f.validate(256).unwrap();
        }
        for a in 0..ds.facts.len() {
            for b in (a + 1)..ds.facts.len() {
                let (fa, fb) = (&ds.facts[a], &ds.facts[b]);
                if fa.cluster_id == fb.cluster_id {
                    assert_ne!(fa.relation_id, fb.relation_id);
                }
            }
        }
    }

    #[test]
    fn subject_sits_right_before_continuation() {
        let ds = Dataset::generate(&spec(10, 10), 256).unwrap();
        for f in &ds.facts {
            let s = &f.prompt_tokens[f.subject_end + 1 - f.subject_tokens.len()..=f.subject_end];
            assert_eq!(s, f.subject_tokens.as_slice());
        }
    }

    #[test]
    fn cluster_split_keeps_subjects_disjoint() {
        let ds = Dataset::generate(&spec(60, 12), 256).unwrap();
        let (left, right) = ds.split_by_cluster(8);
        assert_eq!(left.len() + right.len(), 60);
        for l in &left {
            for r in &right {
                assert_ne!(l.subject_tokens, r.subject_tokens);
            }
        }
    }

    #[test]
    fn rejects_inconsistent_specs() {
        assert!(Dataset::generate(&spec(10, 11), 256).is_err());
        // 40 facts over 2 subjects needs 20 relations; only 16 exist.
        assert!(Dataset::generate(&spec(40, 2), 256).is_err());
    }

    #[test]
    fn preserved_prompts_fit_the_sequence_budget() {
        let ds = Dataset::generate(&spec(10, 10), 256).unwrap();
        for p in ds.preserved_prompts(1, 50, 32) {
            assert!(!p.is_empty());
            assert!(p.len() <= 32);
            assert!(p.iter().all(|&t| t < 256));
        }
    }

    #[test]
    fn eval_prefixes_are_deterministic_and_sized() {
        let a = eval_prefixes(7, 10, 5, 256);
        let b = eval_prefixes(7, 10, 5, 256);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| p.len() == 5));
        let range = noise_range(256);
        assert!(a.iter().flatten().all(|t| range.contains(t)));
        let plain = eval_prefixes(7, 10, 0, 256);
        assert_eq!(plain, alloc::vec![Vec::<usize>::new()]);
    }
}
