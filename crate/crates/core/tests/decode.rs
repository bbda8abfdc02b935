mod common;

use scenediff::dataset::Dataset;
use scenediff::decode::*;
use scenediff::net::{project, AttentionMode, Params};
use scenediff::scenegen::{render_features, TaskInstance};
use scenediff::vocab::{TokenId, MASK_ID};

fn cv(p: &Params<f32>, ds: &Dataset, inst: &TaskInstance) -> Vec<f32> {
    project(p, &render_features(&inst.scene, ds.spec(), p.config.d_v).unwrap()).unwrap()
}

fn setup() -> (Dataset, Params<f32>) {
    let ds = common::mixed(120, 21);
    let p = common::sharpened(common::model(&ds, 32, 2, AttentionMode::Bidirectional, 3), 40.0);
    (ds, p)
}

/// All-zero weights except the head bias: every position's logits equal the bias.
fn bias_only(ds: &Dataset, mode: AttentionMode, bias: &[(usize, f32)]) -> Params<f32> {
    let mut p = common::model(ds, 16, 1, mode, 0);
    for t in &mut p.tensors {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let h = p.find("head.bias").unwrap();
    for &(i, b) in bias {
        p.tensors[h].data[i] = b;
    }
    p
}

#[test]
fn single_step_equals_one_argmax_pass() {
    let (ds, p) = setup();
    for inst in ds.instances.iter().take(100) {
        let c = cv(&p, &ds, inst);
        let l = inst.task.target_len();
        let (out, trace) =
            decode_diffusion(&p, Some(&c), &inst.prompt_ids, l, 1, RemaskStrategy::LowConfidence).unwrap();
        let (pred, _) = predict_full(&p, Some(&c), &inst.prompt_ids, &vec![MASK_ID; l]).unwrap();
        assert_eq!(out, pred);
        assert!(trace.finalization_step.iter().all(|&k| k == 1));
    }
}

#[test]
fn n_equal_to_length_commits_one_per_step() {
    let (ds, p) = setup();
    for inst in ds.instances.iter().take(10) {
        let l = inst.task.target_len();
        let c = cv(&p, &ds, inst);
        let (_, trace) = decode_diffusion(&p, Some(&c), &inst.prompt_ids, l, l, RemaskStrategy::LowConfidence).unwrap();
        assert!(trace.steps.iter().all(|s| s.committed.len() == 1));
        let mut ks = trace.finalization_step.clone();
        ks.sort_unstable();
        assert_eq!(ks, (1..=l).collect::<Vec<_>>());
    }
}

#[test]
fn commits_are_monotone_and_trace_replays() {
    let (ds, p) = setup();
    for (i, inst) in ds.instances.iter().enumerate() {
        let l = inst.task.target_len();
        let n = 8.min(l);
        let strategy =
            if i % 2 == 0 { RemaskStrategy::LowConfidence } else { RemaskStrategy::Random { seed: i as u64 } };
        let c = cv(&p, &ds, inst);
        let (out, trace) = decode_diffusion(&p, Some(&c), &inst.prompt_ids, l, n, strategy).unwrap();
        assert!(out.iter().all(|&id| id != MASK_ID));
        let mut current = vec![MASK_ID; l];
        for step in &trace.steps {
            for (j, &id) in current.iter().enumerate() {
                if id != MASK_ID {
                    assert_eq!(step.prediction[j], id, "committed position {j} changed");
                    assert_eq!(step.confidence[j], 1.0);
                    assert!(!step.committed.contains(&j));
                }
            }
            for &j in &step.committed {
                current[j] = step.prediction[j];
                assert_eq!(trace.finalization_step[j], step.k);
            }
            let masked = current.iter().filter(|&&id| id == MASK_ID).count();
            assert_eq!(masked, trace.schedule.mask_counts[step.k - 1]);
        }
        assert_eq!(current, out);
        assert_eq!(trace.output_ids, out);
    }
}

#[test]
fn decoding_is_deterministic() {
    let (ds, p) = setup();
    let mut random_outputs_differ = false;
    for inst in ds.instances.iter().take(40) {
        let l = inst.task.target_len();
        let n = 4.min(l);
        let c = cv(&p, &ds, inst);
        let run = |s| decode_diffusion(&p, Some(&c), &inst.prompt_ids, l, n, s).unwrap();
        assert_eq!(run(RemaskStrategy::LowConfidence), run(RemaskStrategy::LowConfidence));
        assert_eq!(run(RemaskStrategy::Random { seed: 1 }), run(RemaskStrategy::Random { seed: 1 }));
        random_outputs_differ |= run(RemaskStrategy::Random { seed: 1 }).1 != run(RemaskStrategy::Random { seed: 2 }).1;
        let json = run(RemaskStrategy::LowConfidence).1.to_json().unwrap();
        assert_eq!(DecodeTrace::from_json(&json).unwrap(), run(RemaskStrategy::LowConfidence).1);
    }
    assert!(random_outputs_differ);
}

#[test]
fn predict_full_matches_hand_softmax() {
    let ds = common::mixed(8, 1);
    let v = ds.vocab.len();
    let p = bias_only(&ds, AttentionMode::Bidirectional, &[(10, 2.0), (11, 1.0), (MASK_ID as usize, 5.0)]);
    let e = std::f64::consts::E;
    // [M] stays in the normalizer but can never be predicted.
    let z = e.powi(2) + e + e.powi(5) + (v - 3) as f64;
    let zeros = vec![0.0f32; p.config.n_patches * p.config.d_model];
    let current: Vec<TokenId> = vec![12, MASK_ID, 13];
    let (pred, conf) = predict_full(&p, Some(&zeros), &[2, 3], &current).unwrap();
    assert_eq!(pred, vec![12, 10, 13]);
    assert_eq!(conf[0], 1.0);
    assert_eq!(conf[2], 1.0);
    assert!((conf[1] - e.powi(2) / z).abs() < 1e-6, "{} vs {}", conf[1], e.powi(2) / z);
}

#[test]
fn greedy_ar_repeats_the_dominant_token() {
    let ds = common::mixed(8, 1);
    let a: TokenId = 17;
    let p = bias_only(&ds, AttentionMode::Causal, &[(a as usize, 50.0)]);
    let zeros = vec![0.0f32; p.config.n_patches * p.config.d_model];
    let out = decode_ar(&p, Some(&zeros), &[2, 3], 12).unwrap();
    assert_eq!(out, vec![a; 12]);
    assert!(decode_ar(&p, Some(&zeros), &[2, 3], 0).unwrap().is_empty());
    assert_eq!(out, decode_ar(&p, Some(&zeros), &[2, 3], 12).unwrap());
}

#[test]
fn failing_step_returns_partial_trace() {
    let (ds, p) = setup();
    let inst = &ds.instances[0];
    let c = cv(&p, &ds, inst);
    let long_prompt = vec![2; p.config.max_text_len];
    let err = decode_diffusion(&p, Some(&c), &long_prompt, 8, 4, RemaskStrategy::LowConfidence).unwrap_err();
    match err {
        DecodeError::Step { step, partial, .. } => {
            assert_eq!(step, 4);
            assert!(partial.steps.is_empty());
            assert_eq!(partial.output_ids, vec![MASK_ID; 8]);
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(matches!(
        decode_diffusion(&p, Some(&c), &inst.prompt_ids, 8, 16, RemaskStrategy::LowConfidence),
        Err(DecodeError::Schedule(_))
    ));
}

#[test]
fn schedules_are_strictly_increasing_over_the_sweep() {
    for l in 1..=64 {
        for n in 1..=l {
            let m = build_schedule(n, l).unwrap().mask_counts;
            assert_eq!(m.len(), n + 1);
            assert_eq!((m[0], m[n]), (0, l));
            assert!(m.windows(2).all(|w| w[0] < w[1]), "N={n} L={l}: {m:?}");
        }
    }
}
