use super::*;
use crate::data::{gen_toy_dataset, ToyConfig};

fn toy() -> Dataset {
    gen_toy_dataset(&ToyConfig {
        classes: 2,
        per_class: 10,
        shape: [3, 8, 8],
        seed: 1,
        ..ToyConfig::default()
    })
    .unwrap()
    .0
}

fn spec() -> NetworkSpec {
    NetworkSpec {
        depth: 2,
        width: 4,
        input_shape: [3, 8, 8],
        num_classes: 2,
    }
}

fn small_cfg() -> LossConfig {
    LossConfig {
        real_batch_per_class: 5,
        ..LossConfig::default()
    }
}

#[test]
fn init_counts_and_copies() {
    let real = toy();
    let s = init_synthetic(&real, 1, 3).unwrap();
    assert_eq!(s.labels(), [0, 1]);
    assert_eq!(s, init_synthetic(&real, 1, 3).unwrap());

    let s = init_synthetic(&real, 3, 9).unwrap();
    for i in 0..6 {
        let row = s.pixels().row(i);
        let source = (0..real.len()).find(|&j| real.images().row(j) == row);
        let j = source.expect("every synthetic image is a real image");
        assert_eq!(real.labels()[j], s.labels()[i]);
    }
    assert!(matches!(
        init_synthetic(&real, 9, 0),
        Err(Error::InsufficientSamples { requested: 9, .. })
    ));
}

#[test]
fn zero_learning_rate_leaves_pixels() {
    let real = toy();
    let template = build_convnet(&spec()).unwrap();
    let mut syn = init_synthetic(&real, 2, 0).unwrap();
    let before = syn.clone();
    let mut opt = OptimizerState::new(&syn, 0.0, 0.5, 1).unwrap();
    condense_step(&mut syn, &real, &template, &small_cfg(), &mut opt, 5).unwrap();
    assert_eq!(syn, before);
    assert!(opt.velocity().data().iter().any(|&v| v != 0.0));
}

#[test]
fn step_is_reproducible_and_moves_only_pixels() {
    let real = toy();
    let template = build_convnet(&spec()).unwrap();
    let run = || {
        let mut syn = init_synthetic(&real, 2, 0).unwrap();
        let mut opt = OptimizerState::new(&syn, 1.0, 0.5, 2).unwrap();
        let a = condense_step(&mut syn, &real, &template, &small_cfg(), &mut opt, 11).unwrap();
        let b = condense_step(&mut syn, &real, &template, &small_cfg(), &mut opt, 12).unwrap();
        (syn, a, b)
    };
    let (s1, a1, b1) = run();
    let (s2, a2, b2) = run();
    let bits = |s: &SyntheticSet| s.pixels().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&s1), bits(&s2));
    assert_eq!((a1, b1), (a2, b2));
    assert_eq!(s1.labels(), [0, 0, 1, 1]);
    assert_ne!(s1, init_synthetic(&real, 2, 0).unwrap());
}

#[test]
fn dm_reduction_zeroes_weighted_terms() {
    let real = toy();
    let template = build_convnet(&spec()).unwrap();
    let mut syn = init_synthetic(&real, 3, 0).unwrap();
    let mut opt = OptimizerState::new(&syn, 1.0, 0.5, 1).unwrap();
    let cfg = LossConfig {
        lambda: 0.0,
        beta: 0.0,
        ..small_cfg()
    };
    let b = condense_step(&mut syn, &real, &template, &cfg, &mut opt, 1).unwrap();
    assert_eq!(b.total, b.mmd);
    assert!(b.mm > 0.0 && b.cm > 0.0 && b.icd < 0.0);
}

#[test]
fn plan_draws_are_consistent() {
    let real = toy();
    let plan = StepPlan::draw(&real, 5, 42);
    assert_eq!(plan, StepPlan::draw(&real, 5, 42));
    assert_ne!(plan, StepPlan::draw(&real, 5, 43));
    for (class, rows) in plan.real_indices.iter().enumerate() {
        assert_eq!(rows.len(), 5);
        let mut sorted = rows.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert!(rows.iter().all(|&r| real.labels()[r] == class));
    }
    let capped = StepPlan::draw(&real, 100, 42);
    assert!(capped.real_indices.iter().all(|r| r.len() == 8));
}

#[test]
fn single_iteration_run_equals_one_step() {
    let real = toy();
    let cfg = CondenseConfig {
        ipc: 2,
        iters: 1,
        seed: 4,
        log_interval: 1,
        loss: small_cfg(),
        ..CondenseConfig::default()
    };
    let out = run_condensation::<f32>(&real, &spec(), &cfg, |_| {}).unwrap();

    let template = build_convnet(&spec()).unwrap();
    let mut syn = init_synthetic(&real, 2, 4).unwrap();
    let mut opt = OptimizerState::new(&syn, 1.0, 0.5, 1).unwrap();
    let b = condense_step(&mut syn, &real, &template, &small_cfg(), &mut opt, derive_seed(4, 0)).unwrap();
    assert_eq!(out.syn, syn);
    assert_eq!(out.metrics, vec![MetricsRow { iter: 0, loss: b }]);
}

#[test]
fn log_rows_follow_interval() {
    let real = toy();
    for (iters, interval) in [(7usize, 3usize), (6, 3), (5, 1), (4, 10)] {
        let cfg = CondenseConfig {
            ipc: 2,
            iters,
            log_interval: interval,
            loss: small_cfg(),
            ..CondenseConfig::default()
        };
        let mut streamed = 0;
        let out = run_condensation::<f32>(&real, &spec(), &cfg, |_| streamed += 1).unwrap();
        assert_eq!(out.metrics.len(), iters.div_ceil(interval));
        assert_eq!(streamed, out.metrics.len());
    }
}

#[test]
fn non_finite_pixels_abort_with_term() {
    let real = toy();
    let template = build_convnet(&spec()).unwrap();
    let mut syn = init_synthetic(&real, 2, 0).unwrap();
    let mut px = syn.pixels().clone();
    px.data_mut()[0] = f32::NAN;
    syn = SyntheticSet::from_parts(px, syn.labels().to_vec(), 2, 2, syn.norm().clone()).unwrap();
    let mut opt = OptimizerState::new(&syn, 1.0, 0.5, 1).unwrap();
    match condense_step(&mut syn, &real, &template, &small_cfg(), &mut opt, 0) {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(term, "loss_mmd");
            assert_eq!(iteration, 0);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let real = toy();
    let bad = [
        CondenseConfig {
            iters: 0,
            ..CondenseConfig::default()
        },
        CondenseConfig {
            ipc: 2,
            momentum: 1.0,
            ..CondenseConfig::default()
        },
        CondenseConfig {
            ipc: 2,
            lr: -1.0,
            ..CondenseConfig::default()
        },
        CondenseConfig {
            ipc: 9,
            ..CondenseConfig::default()
        },
    ];
    for cfg in bad {
        assert!(run_condensation::<f32>(&real, &spec(), &cfg, |_| {}).is_err(), "{cfg:?}");
    }
}

#[test]
fn metrics_csv_format() {
    let rows = [MetricsRow {
        iter: 10,
        loss: LossBreakdown {
            total: 1.5,
            mmd: 0.25,
            mm: 1234567.0,
            cm: 0.0,
            icd: -0.0001,
        },
    }];
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "iter,loss_total,loss_mmd,loss_mm,loss_cm,loss_icd\n10,1.5,0.25,1.23457e+06,0,-0.0001\n"
    );
}

#[test]
fn derived_seeds_differ() {
    let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
}
