use scenediff::net::AttentionMode;
use scenediff::recipe::Recipe;

#[test]
fn cache_returns_the_trained_weights() {
    let mut r = Recipe::smoke();
    r.pretrain.steps = 5;
    r.align.steps = 5;
    r.full.steps = 10;
    let dir = tempfile::tempdir().unwrap();
    let first = r.load_or_train(dir.path()).unwrap();
    assert!(!first.cached);
    assert_eq!(first.diffusion.config.attention_mode, AttentionMode::Bidirectional);
    assert_eq!(first.ar.config.attention_mode, AttentionMode::Causal);
    assert_eq!(first.diffusion.num_params(), first.ar.num_params());
    let second = r.load_or_train(dir.path()).unwrap();
    assert!(second.cached);
    assert_eq!(first.diffusion, second.diffusion);
    assert_eq!(first.ar, second.ar);
    assert_eq!(r.train_diffusion(&first.train).unwrap(), first.diffusion);
    assert!(second.eval.instances.iter().all(|i| i.task == scenediff::scenegen::Task::Detect));

    r.full.steps += 1;
    assert!(!r.load_or_train(dir.path()).unwrap().cached);
}
