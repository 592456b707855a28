// Temporary bring-up probe. Removed once calibrated.

use memedit_core::dataset::{eval_prefixes, Dataset, DatasetSpec};
use memedit_core::metrics::{answer_accuracy, AnswerTarget};
use memedit_core::toy_lm::{build_model, train_with_options, ToyModelConfig, TrainOptions};
use std::time::Instant;

fn run(tag: &str, opts: &TrainOptions) {
    let mcfg = ToyModelConfig { seed: 11, ..Default::default() };
    let ds = Dataset::generate(
        &DatasetSpec { n_facts: 564, n_subjects: 564, n_relations: 16, prefix_pool_size: 10, seed: 1 },
        mcfg.vocab_size,
    )
    .unwrap();
    let mut model = build_model(&mcfg).unwrap();
    let t0 = Instant::now();
    train_with_options(&mut model, &ds.facts, opts).unwrap();
    let gate_facts = &ds.facts[..500];
    let plain = answer_accuracy(&model, gate_facts, &[vec![]], AnswerTarget::Original).unwrap();
    let p5 = answer_accuracy(&model, gate_facts, &eval_prefixes(3, 5, 5, 256), AnswerTarget::Original).unwrap();
    let p20 = answer_accuracy(&model, gate_facts, &eval_prefixes(3, 5, 20, 256), AnswerTarget::Original).unwrap();
    println!(
        "{tag}: {:.0}s recall {:.3} p5 {:.3} p20 {:.3}",
        t0.elapsed().as_secs_f64(), plain, p5, p20
    );
}

#[test]
#[ignore]
fn probe_schedules() {
    run("A(b8 e200 aug120 p0.5)", &TrainOptions {
        epochs: 200, rate: 8e-3, batch_size: 8, prefix_augment_prob: 0.5,
        max_prefix_len: 20, augment_after: 120, final_rate_factor: 0.12,
    });
    run("C(b8 e170 aug110 p0.6)", &TrainOptions {
        epochs: 170, rate: 8e-3, batch_size: 8, prefix_augment_prob: 0.6,
        max_prefix_len: 20, augment_after: 110, final_rate_factor: 0.1,
    });
}
