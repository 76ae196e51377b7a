use super::*;
use crate::tensor::GradMap;

fn scalar_store(name: &str, value: f64) -> ParameterStore {
    let mut store = ParameterStore::new();
    store.insert(name, vec![1], vec![value]).unwrap();
    store
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    for kind in [OptimizerKind::Adam, OptimizerKind::RmsProp] {
        let mut store = scalar_store("x", 1.5);
        let mut opt = Optimizer::new(kind);
        let grads = GradMap::from_pairs([("x".to_string(), vec![0.0])]);
        for _ in 0..5 {
            opt.step(&mut store, &grads, 0.1).unwrap();
        }
        assert_eq!(store.get("x").unwrap().values[0], 1.5);
    }
}

#[test]
fn adam_converges_on_a_quadratic() {
    // minimise (x - 3)^2 from x = 0 with lr 0.1
    let mut store = scalar_store("x", 0.0);
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    for _ in 0..200 {
        let x = store.get("x").unwrap().values[0];
        let grads = GradMap::from_pairs([("x".to_string(), vec![2.0 * (x - 3.0)])]);
        opt.step(&mut store, &grads, 0.1).unwrap();
    }
    let x = store.get("x").unwrap().values[0];
    assert!((x - 3.0).abs() < 0.05, "x = {x}");
}

#[test]
fn rmsprop_also_descends() {
    let mut store = scalar_store("x", 0.0);
    let mut opt = Optimizer::new(OptimizerKind::RmsProp);
    for _ in 0..500 {
        let x = store.get("x").unwrap().values[0];
        let grads = GradMap::from_pairs([("x".to_string(), vec![2.0 * (x - 3.0)])]);
        opt.step(&mut store, &grads, 0.02).unwrap();
    }
    let x = store.get("x").unwrap().values[0];
    assert!((x - 3.0).abs() < 0.1, "x = {x}");
}

#[test]
fn optimizer_trajectories_are_bitwise_deterministic() {
    let run = |kind: OptimizerKind| -> Vec<u64> {
        let mut store = scalar_store("x", 0.7);
        let mut opt = Optimizer::new(kind);
        let mut bits = Vec::new();
        for step in 0..50 {
            let x = store.get("x").unwrap().values[0];
            let g = (x * 1.3 - 0.4).sin() + step as f64 * 1e-3;
            let grads = GradMap::from_pairs([("x".to_string(), vec![g])]);
            opt.step(&mut store, &grads, 0.01).unwrap();
            bits.push(store.get("x").unwrap().values[0].to_bits());
        }
        bits
    };
    assert_eq!(run(OptimizerKind::Adam), run(OptimizerKind::Adam));
    assert_eq!(run(OptimizerKind::RmsProp), run(OptimizerKind::RmsProp));
}

#[test]
fn missing_gradient_is_a_coverage_error() {
    let mut store = ParameterStore::new();
    store.insert("used", vec![1], vec![0.0]).unwrap();
    store.insert("dead", vec![1], vec![0.0]).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let grads = GradMap::from_pairs([("used".to_string(), vec![1.0])]);
    let err = opt.step(&mut store, &grads, 0.1).unwrap_err();
    assert!(matches!(err, Error::MissingGradient(name) if name == "dead"));
}

#[test]
fn clip_caps_the_global_norm() {
    let mut grads = GradMap::from_pairs([
        ("a".to_string(), vec![3.0, 4.0]),
        ("b".to_string(), vec![12.0]),
    ]);
    assert_eq!(grads.global_norm(), 13.0);
    grads.clip_global_norm(1.0);
    assert!(grads.global_norm() <= 1.0 + 1e-9);
    // direction preserved
    let a = grads.get("a").unwrap();
    assert!((a[0] / a[1] - 0.75).abs() < 1e-12);

    let mut small = GradMap::from_pairs([("a".to_string(), vec![0.1])]);
    small.clip_global_norm(1.0);
    assert_eq!(small.get("a").unwrap()[0], 0.1); // below the cap: untouched
}

#[test]
fn early_stopper_stops_after_exactly_one_plus_patience() {
    for patience in [5usize, 25] {
        let mut stopper = EarlyStopper::new(false, Some(patience));
        let mut stopped_at = None;
        for epoch in 1..=100 {
            // strictly worsening from epoch 1
            let metric = epoch as f64;
            let (_, stop) = stopper.observe(epoch, metric);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(1 + patience));
        assert_eq!(stopper.best_epoch, 1);
    }
}

#[test]
fn early_stopper_without_patience_never_stops() {
    let mut stopper = EarlyStopper::new(true, None);
    for epoch in 1..=1000 {
        let (_, stop) = stopper.observe(epoch, -(epoch as f64));
        assert!(!stop);
    }
}

#[test]
fn batches_respect_the_node_budget() {
    let g = |n: usize| {
        TypedGraph::new(n, vec!["1".into()], vec![vec![]], 1, vec![0.0; n]).unwrap()
    };
    let graphs = vec![g(4), g(4), g(4), g(9), g(1)];
    let batches = plan_batches(&[0, 1, 2, 3, 4], &graphs, 8);
    assert_eq!(batches, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
    // an oversized graph still forms its own batch rather than erroring
    let batches = plan_batches(&[3], &graphs, 4);
    assert_eq!(batches, vec![vec![3]]);
}
