use super::*;
use crate::nn::{grad_check, probe_weights};
use crate::tensor::Prng;

fn random_afn(c: usize, scope: StatScope, seed: u64) -> AfnLayer {
    let mut p = Prng::new(seed);
    let mut layer = AfnLayer::new(c, scope, &mut p).unwrap();
    // nonzero biases so every ReLU branch and bias gradient is exercised
    for (_, t) in layer.stat_net.tensors_mut() {
        if t.rank() == 1 {
            *t = Tensor::gaussian(t.shape(), &mut p, 0.0, 0.3);
        }
    }
    for (_, t) in layer.rescale_net.tensors_mut() {
        if t.rank() == 1 {
            *t = Tensor::gaussian(t.shape(), &mut p, 0.0, 0.3);
        }
    }
    layer.gamma_bias = Tensor::gaussian(&[c], &mut p, 1.0, 0.2);
    layer.beta_bias = Tensor::gaussian(&[c], &mut p, 0.0, 0.2);
    layer.running_mu = Tensor::gaussian(&[c], &mut p, 0.0, 0.5);
    layer.running_sigma = Tensor::gaussian(&[c], &mut p, 1.0, 0.2).map(f64::abs);
    layer
}

#[test]
fn fresh_layer_initialisation() {
    let layer = AfnLayer::new(8, StatScope::Batch, &mut Prng::new(0)).unwrap();
    for &l in layer.lambda_mu_logit.data().iter().chain(layer.lambda_sigma_logit.data()) {
        assert!((sigmoid(l) - 0.047425873).abs() < 1e-9);
    }
    for &l in layer.lambda_gamma_logit.data().iter().chain(layer.lambda_beta_logit.data()) {
        assert!((sigmoid(l) - 0.0066929).abs() < 1e-7);
    }
    assert!(layer.gamma_bias.data().iter().all(|&v| v == 1.0));
    assert!(layer.beta_bias.data().iter().all(|&v| v == 0.0));
    assert!(layer.running_mu.data().iter().all(|&v| v == 0.0));
    assert!(layer.running_sigma.data().iter().all(|&v| v == 1.0));
    assert_eq!(layer.momentum, 0.1);
    assert_eq!(layer.eps, 1e-5);
    assert!(layer.stat_net.encoder.bias.data().iter().all(|&v| v == 0.0));
    assert!(AfnLayer::new(8, StatScope::Layer, &mut Prng::new(0)).is_err());
}

#[test]
fn residual_blend_endpoints() {
    let mu = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
    let mu_stan = Tensor::new(vec![1, 2], vec![4.0, 3.0]).unwrap();
    let sigma = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
    let sigma_stan = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
    let (m, s) = residual_blend(&mu, &mu_stan, &sigma, &sigma_stan, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    assert_eq!((m, s), (mu.clone(), sigma.clone()));
    let (m, s) = residual_blend(&mu, &mu_stan, &sigma, &sigma_stan, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
    assert_eq!((m, s), (mu_stan.clone(), sigma_stan.clone()));
    let (m, _) = residual_blend(&mu, &mu_stan, &sigma, &sigma_stan, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
    assert_eq!(m.data()[0], 3.0);
}

#[test]
fn fresh_gamma_hat_stays_within_sigmoid_minus_five() {
    let mut p = Prng::new(3);
    let layer = AfnLayer::new(16, StatScope::Batch, &mut p).unwrap();
    let x = Tensor::gaussian(&[4, 16, 3, 3], &mut p, 0.0, 3.0);
    let trace = layer.trace(&x, Mode::Train).unwrap();
    for &g in trace.gamma_hat.data() {
        assert!((1.0..=1.0 + 0.0066929).contains(&g), "{g}");
    }
}

#[test]
fn lambda_collapse_reduces_to_batchnorm() {
    let mut bn = BatchNorm2d::new(6);
    for seed in 0..5 {
        let mut layer = random_afn(6, StatScope::Batch, seed);
        layer.set_lambda_logits(-30.0);
        layer.gamma_bias = Tensor::full(&[6], 1.0);
        layer.beta_bias = Tensor::zeros(&[6]);
        bn.running_mean = layer.running_mu.clone();
        bn.running_var = layer.running_sigma.map(|s| s * s);
        let x = Tensor::gaussian(&[5, 6, 4, 4], &mut Prng::new(seed + 100), 1.0, 3.0);
        for mode in [Mode::Train, Mode::Eval] {
            let (a, cache_a) = layer.apply(&x, mode).unwrap();
            let (b, cache_b) = bn.apply(&x, mode).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-9, "{mode:?}: {}", a.max_abs_diff(&b));

            let dy = probe_weights(x.shape(), seed);
            let ga = layer.backward(&cache_a, &dy).unwrap();
            let gb = bn.backward(&cache_b, &dy).unwrap();
            assert!(ga.dx.max_abs_diff(&gb.dx) <= 1e-8, "{mode:?} dx gap {}", ga.dx.max_abs_diff(&gb.dx));
        }
    }
}

#[test]
fn collapsed_dx_has_zero_channel_sums() {
    let mut layer = random_afn(4, StatScope::Batch, 9);
    layer.set_lambda_logits(-30.0);
    let x = Tensor::gaussian(&[3, 4, 5, 5], &mut Prng::new(1), 0.0, 2.0);
    let (_, cache) = layer.apply(&x, Mode::Train).unwrap();
    let g = layer.backward(&cache, &probe_weights(x.shape(), 2)).unwrap();
    let mut sums = [0.0; 4];
    for (plane, _, ch) in planes(g.dx.data(), [3, 4, 5, 5]) {
        sums[ch] += plane.iter().sum::<f64>();
    }
    for s in sums {
        assert!(s.abs() < 1e-8, "{s}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    for scope in [StatScope::Batch, StatScope::Instance] {
        for seed in 0..3 {
            let layer = random_afn(8, scope, seed);
            let x = Tensor::gaussian(&[4, 8, 5, 5], &mut Prng::new(seed + 50), 0.5, 1.5);
            for mode in [Mode::Train, Mode::Eval] {
                let report = grad_check(&layer, &x, 1e-5, mode, seed).unwrap();
                assert!(report.max() <= 1e-4, "{scope:?} {mode:?} {report:?}");
            }
        }
    }
}

#[test]
fn detaching_statistics_breaks_the_gradient() {
    let mut layer = random_afn(8, StatScope::Batch, 1);
    layer.detach_stats = true;
    let x = Tensor::gaussian(&[4, 8, 5, 5], &mut Prng::new(7), 0.5, 1.5);
    let report = grad_check(&layer, &x, 1e-5, Mode::Train, 1).unwrap();
    assert!(report.input > 1e-2, "{report:?}");
}

#[test]
fn eval_output_ignores_batch_composition() {
    let layer = random_afn(3, StatScope::Batch, 4);
    let row = Tensor::gaussian(&[1, 3, 4, 4], &mut Prng::new(8), 0.0, 1.0);
    let (single, _) = layer.apply(&row, Mode::Eval).unwrap();
    let mut stacked = Vec::new();
    for _ in 0..64 {
        stacked.extend_from_slice(row.data());
    }
    let (many, _) = layer
        .apply(&Tensor::new(vec![64, 3, 4, 4], stacked).unwrap(), Mode::Eval)
        .unwrap();
    for chunk in many.data().chunks(single.len()) {
        assert_eq!(chunk, single.data());
    }
}

#[test]
fn single_sample_scopes_coincide() {
    let batch = random_afn(5, StatScope::Batch, 11);
    let mut inst = batch.clone();
    inst.scope = StatScope::Instance;
    let x = Tensor::gaussian(&[1, 5, 4, 3], &mut Prng::new(12), 0.2, 1.1);
    let (a, _) = batch.apply(&x, Mode::Train).unwrap();
    let (b, _) = inst.apply(&x, Mode::Train).unwrap();
    assert_eq!(a, b);
}

#[test]
fn instance_scope_is_mode_independent_and_stateless() {
    let mut layer = random_afn(4, StatScope::Instance, 13);
    let x = Tensor::gaussian(&[3, 4, 4, 4], &mut Prng::new(14), 0.0, 1.0);
    let before = layer.clone();
    let (train, _) = layer.forward(&x, Mode::Train).unwrap();
    assert_eq!(layer, before);
    let (eval, _) = layer.apply(&x, Mode::Eval).unwrap();
    assert_eq!(train, eval);
    assert!(layer.buffers().is_empty());
}

#[test]
fn running_statistics_track_sigma() {
    let mut layer = AfnLayer::new(2, StatScope::Batch, &mut Prng::new(0)).unwrap();
    let mut p = Prng::new(1);
    for _ in 0..300 {
        let x = Tensor::gaussian(&[8, 2, 4, 4], &mut p, -1.0, 3.0);
        layer.forward(&x, Mode::Train).unwrap();
    }
    for (&m, &s) in layer.running_mu.data().iter().zip(layer.running_sigma.data()) {
        assert!((m + 1.0).abs() < 0.1, "mu {m}");
        assert!((s - 3.0).abs() < 0.1, "sigma {s}");
    }
}

#[test]
fn sigma_hat_is_non_negative() {
    let mut p = Prng::new(15);
    for i in 0..200 {
        let c = 1 + p.below(10);
        let mut layer = random_afn(c, StatScope::Instance, 1000 + i);
        layer.lambda_sigma_logit = Tensor::gaussian(&[c], &mut p, 0.0, 4.0);
        layer.stat_net.sigma_decoder.bias = Tensor::gaussian(&[c], &mut p, -1.0, 2.0);
        let x = Tensor::gaussian(&[2, c, 3, 3], &mut p, 0.0, 2.0);
        let (_, cache) = layer.apply(&x, Mode::Train).unwrap();
        assert!(cache.sigma_hat().data().iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn constant_input_stays_finite() {
    let layer = AfnLayer::new(4, StatScope::Instance, &mut Prng::new(2)).unwrap();
    let (y, _) = layer.apply(&Tensor::full(&[2, 4, 3, 3], 0.25), Mode::Train).unwrap();
    assert!(y.is_finite());
}

#[test]
fn load_from_bn_copies_affine_and_running_stats() {
    let mut layer = AfnLayer::new(1, StatScope::Batch, &mut Prng::new(0)).unwrap();
    let before = layer.clone();
    let mut bn = BatchNorm2d::new(1);
    bn.gamma = Tensor::from_vec(vec![2.0]);
    bn.beta = Tensor::from_vec(vec![-1.0]);
    bn.running_mean = Tensor::from_vec(vec![0.5]);
    bn.running_var = Tensor::from_vec(vec![4.0]);
    layer.load_from_bn(&bn).unwrap();
    assert_eq!(layer.gamma_bias.data(), &[2.0]);
    assert_eq!(layer.beta_bias.data(), &[-1.0]);
    assert_eq!(layer.running_mu.data(), &[0.5]);
    assert_eq!(layer.running_sigma.data(), &[2.0]);
    assert_eq!(layer.stat_net, before.stat_net);
    assert_eq!(layer.lambda_mu_logit, before.lambda_mu_logit);

    assert!(matches!(layer.load_from_bn(&BatchNorm2d::new(3)), Err(Error::Shape(_))));
}

#[test]
fn resumed_layer_reproduces_bn_eval() {
    let mut p = Prng::new(20);
    let mut bn = BatchNorm2d::new(6);
    bn.gamma = Tensor::gaussian(&[6], &mut p, 1.0, 0.5);
    bn.beta = Tensor::gaussian(&[6], &mut p, 0.0, 0.5);
    bn.running_mean = Tensor::gaussian(&[6], &mut p, 0.0, 1.0);
    bn.running_var = Tensor::gaussian(&[6], &mut p, 0.0, 1.0).map(|v| v * v + 0.1);
    let mut layer = AfnLayer::new(6, StatScope::Batch, &mut p).unwrap();
    layer.load_from_bn(&bn).unwrap();
    layer.set_lambda_logits(-30.0);
    let x = Tensor::gaussian(&[7, 6, 3, 3], &mut p, 0.3, 2.0);
    let (a, _) = layer.apply(&x, Mode::Eval).unwrap();
    let (b, _) = bn.apply(&x, Mode::Eval).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-9);
}

#[test]
fn backward_rejects_foreign_gradient() {
    let layer = AfnLayer::new(4, StatScope::Batch, &mut Prng::new(0)).unwrap();
    let x = Tensor::gaussian(&[2, 4, 3, 3], &mut Prng::new(1), 0.0, 1.0);
    let (_, cache) = layer.apply(&x, Mode::Train).unwrap();
    assert!(matches!(layer.backward(&cache, &Tensor::zeros(&[2, 4, 3, 2])), Err(Error::Usage(_))));
    let other = AfnLayer::new(3, StatScope::Batch, &mut Prng::new(0)).unwrap();
    assert!(matches!(other.backward(&cache, &Tensor::zeros(&[2, 4, 3, 3])), Err(Error::Usage(_))));
}

#[test]
fn non_finite_input_reports_stage() {
    let layer = AfnLayer::new(2, StatScope::Batch, &mut Prng::new(0)).unwrap();
    let mut x = Tensor::zeros(&[1, 2, 2, 2]);
    x.data_mut()[0] = f64::NAN;
    match layer.apply(&x, Mode::Train) {
        Err(Error::Numeric { layer, stage }) => {
            assert_eq!(layer, "afn");
            assert_eq!(stage, "statistics");
        }
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn fresh_layer_stays_close_to_batchnorm() {
    // measured 0.033..0.041 over seeds 0..10
    for seed in 0..10 {
        let mut p = Prng::new(seed);
        let layer = AfnLayer::new(16, StatScope::Batch, &mut p).unwrap();
        let bn = BatchNorm2d::new(16);
        let x = Tensor::gaussian(&[8, 16, 6, 6], &mut p, 0.5, 2.0);
        let (a, _) = layer.apply(&x, Mode::Train).unwrap();
        let (b, _) = bn.apply(&x, Mode::Train).unwrap();
        let gap = a.zip_map(&b, |u, v| (u - v).abs()).unwrap().sum() / a.len() as f64;
        assert!((0.02..0.06).contains(&gap), "seed {seed}: {gap}");
    }
}
