use flowdit_core::nn::ParamStore;
use flowdit_core::optim::{adamw_step, clip_grad_norm, cosine_lr, global_norm, AdamState, AdamWConfig};
use flowdit_core::{Error, Tensor};

fn store(values: &[(&str, &[f64])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, v) in values {
        s.register(*name, Tensor::from_f64(&[v.len()], v).unwrap()).unwrap();
    }
    s
}

fn grads(values: &[&[f64]]) -> Vec<Tensor<f64>> {
    values.iter().map(|v| Tensor::from_f64(&[v.len()], v).unwrap()).collect()
}

#[test]
fn zero_gradients_without_decay_change_nothing() {
    let mut p = store(&[("a", &[0.5, -1.0]), ("b", &[3.0])]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for _ in 0..3 {
        adamw_step(&mut p, &grads(&[&[0.0, 0.0], &[0.0]]), &mut st, 1e-3, &cfg).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 3);
}

#[test]
fn single_scalar_step_matches_hand_computation() {
    let mut p = store(&[("w", &[0.5])]);
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &grads(&[&[0.2]]), &mut st, 0.1, &AdamWConfig::default()).unwrap();
    // m̂ = 0.2, v̂ = 0.04: w = 0.5·(1 − 0.1·0.01) − 0.1 · 0.2 / (0.2 + 1e-8)
    let expect = 0.399_500_005;
    let got = p.get(p.id("w").unwrap()).data()[0];
    assert!((got - expect).abs() < 1e-12, "{got}");
    assert!((st.m[0].data()[0] - 0.02).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 4e-5).abs() < 1e-18);
}

#[test]
fn decoupled_decay_shrinks_by_lr_times_wd() {
    let mut p = store(&[("w", &[2.0, -4.0])]);
    let mut st = AdamState::new(&p);
    let cfg = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    adamw_step(&mut p, &grads(&[&[0.0, 0.0]]), &mut st, 0.5, &cfg).unwrap();
    assert_eq!(p.get(p.id("w").unwrap()).data(), &[2.0 * 0.95, -4.0 * 0.95]);
}

#[test]
fn non_finite_gradient_aborts_without_touching_state() {
    let mut p = store(&[("ok", &[1.0]), ("layers.0.bad", &[1.0, 2.0])]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    let err = adamw_step(&mut p, &grads(&[&[0.1], &[0.2, f64::NAN]]), &mut st, 0.1, &AdamWConfig::default())
        .unwrap_err();
    match err {
        Error::NonFiniteGradient(name) => assert!(name.contains("layers.0.bad"), "{name}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 0);
    assert!(st.m.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut p = store(&[("w", &[1.0, 2.0])]);
    let mut st = AdamState::new(&p);
    assert!(adamw_step(&mut p, &grads(&[&[0.1]]), &mut st, 0.1, &AdamWConfig::default()).is_err());
    assert!(adamw_step(&mut p, &[], &mut st, 0.1, &AdamWConfig::default()).is_err());
}

#[test]
fn cosine_schedule_values() {
    assert_eq!(cosine_lr(0, 1000, 1e-4, 0.0), 1e-4);
    assert_eq!(cosine_lr(1000, 1000, 1e-4, 0.0), 0.0);
    assert!((cosine_lr(500, 1000, 1e-4, 2e-5) - 6e-5).abs() < 1e-18);
    for step in 0..=100 {
        let lr = cosine_lr(step, 100, 1e-3, 1e-5);
        let expect = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1.0 + (std::f64::consts::PI * step as f64 / 100.0).cos());
        // std and libm cosines may differ in the last place
        assert!((lr - expect).abs() <= 4.0 * f64::EPSILON * 1e-3, "{lr} vs {expect}");
    }
    let curve: Vec<f64> = (0..=50).map(|s| cosine_lr(s, 50, 1.0, 0.0)).collect();
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn clipping_rescales_to_the_limit() {
    let mut g = grads(&[&[3.0], &[4.0]]);
    assert_eq!(global_norm(&g), 5.0);
    let before = clip_grad_norm(&mut g, 1.0);
    assert_eq!(before, 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
    assert!((global_norm(&g) - 1.0).abs() < 1e-15);

    let mut small = grads(&[&[0.3, 0.4]]);
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.3, 0.4]);
}
