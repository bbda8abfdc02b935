use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenediff::net::gradcheck::{check_gradients, reference_loss};
use scenediff::net::{loss_and_grads, AttentionMode, Example, ModelConfig, Params, ALL_GROUPS};
use scenediff::scenegen::FeatureGrid;
use scenediff::vocab::{TokenId, MASK_ID};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_v: 6,
        n_patches: 4,
        max_text_len: 32,
        vocab_size: 50,
        attention_mode: AttentionMode::Bidirectional,
        vocab_hash: None,
    }
}

/// Init at a larger scale than training so that every gradient is well away
/// from zero.
fn params(seed: u64) -> Params<f64> {
    let mut p = Params::<f64>::init(&tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for t in &mut p.tensors {
        for x in &mut t.data {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

fn grid(rng: &mut ChaCha8Rng) -> FeatureGrid {
    FeatureGrid { grid_size: 2, d_v: 6, data: (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

fn check(mode: AttentionMode, seed: u64) {
    let p = params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f1, f2) = (grid(&mut rng), grid(&mut rng));
    let text1: Vec<TokenId> = vec![2, 7, MASK_ID, 12, MASK_ID, 30, MASK_ID];
    let text2: Vec<TokenId> = vec![2, 8, 40, MASK_ID, MASK_ID, 0];
    let batch = vec![
        Example {
            features: Some(&f1),
            text: text1,
            supervised: vec![(2, 14), (4, 0), (6, 33)],
            weight: 1.0 / 3.0,
            mode,
        },
        Example { features: Some(&f2), text: text2, supervised: vec![(3, 49), (4, 5)], weight: 0.5, mode },
        Example { features: None, text: vec![2, 9, MASK_ID, 3], supervised: vec![(2, 21)], weight: 1.0, mode },
    ];
    let mask = p.trainable_mask(&ALL_GROUPS);
    let (loss, grads) = loss_and_grads(&p, &batch, &mask).unwrap();
    assert!((loss - reference_loss(&p, &batch)).abs() < 1e-12);
    let report = check_gradients(&p, &batch, &grads, 1e-3, 1e-3, 1e-8);
    assert_eq!(report.checked, p.num_params());
    assert!(
        report.mismatches.is_empty(),
        "{} mismatches, first: {:?}",
        report.mismatches.len(),
        &report.mismatches[..report.mismatches.len().min(5)]
    );
}

#[test]
fn bidirectional_gradients_match_finite_differences() {
    check(AttentionMode::Bidirectional, 1);
}

#[test]
fn causal_gradients_match_finite_differences() {
    check(AttentionMode::Causal, 2);
}
