use super::*;
use crate::autodiff::{flatten, grad_check, unflatten, weight_penalty_value};
use crate::features::Split;
use rand::{Rng, SeedableRng};

fn toy_arch(input: usize) -> Architecture {
    Architecture {
        input_dim: input,
        layers: vec![4, 3],
        bottleneck: 2,
        components: Components::default(),
        head: HeadKind::Tanh,
        activation: CellActivation::Tanh,
    }
}

/// Consecutive windows ending at 2000-01, 2000-02, ... with random blocks.
fn toy_windows(n: usize, width: usize, d: usize, seed: u64) -> Vec<LabeledWindow> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| LabeledWindow {
            end_month: YearMonth::new(2000, 1).add_months(i as i64),
            width,
            n_features: d,
            block: (0..width * d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            label: rng.gen_range(0..2),
            split: Split::Train,
        })
        .collect()
}

fn loss_values(arch: &Architecture, params: &ParameterSet<Tensor>, batch: &Batch, w: LossWeights) -> LossBreakdown {
    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.param(t.clone()));
    composite_loss(&mut tape, arch, &bound, batch, w).unwrap().values(&tape)
}

#[test]
fn zero_parameters_give_one_half() {
    let arch = Architecture::new(42);
    let params = arch.zeros().unwrap();
    let windows = toy_windows(5, 6, 42, 1);
    for p in probabilities(&arch, &params, &windows).unwrap() {
        assert_eq!(p, 0.5);
    }
    let mut sig = arch.clone();
    sig.head = HeadKind::Sigmoid;
    for p in probabilities(&sig, &sig.zeros().unwrap(), &windows).unwrap() {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn probabilities_in_unit_interval() {
    let arch = Architecture::new(42);
    let windows = toy_windows(4, 6, 42, 2);
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    for seed in 0..1000u64 {
        let mut params = arch.init(seed).unwrap();
        // Spread the draws beyond the init scale so the head saturates too.
        let scale = rng.gen_range(0.1..20.0);
        params.visit_mut("", &mut |_, t, _| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        for p in probabilities(&arch, &params, &windows).unwrap() {
            assert!((0.0..=1.0).contains(&p), "seed {seed}: {p}");
        }
    }
}

#[test]
fn ungated_pool_equals_hand_sum() {
    let mut arch = toy_arch(3);
    arch.components.attention = false;
    let params = arch.init(4).unwrap();
    let windows = toy_windows(3, 5, 3, 4);
    let probs = probabilities(&arch, &params, &windows).unwrap();

    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.constant(t.clone()));
    let input = tape.constant(step_major(&windows).unwrap());
    let seq = bilstm_forward(&mut tape, &bound.bilstm, input, 5, arch.stack_options()).unwrap();
    let ae = params.autoencoder.as_ref().unwrap();
    for (b, p) in probs.iter().enumerate() {
        let mut pooled = vec![0.0; arch.bottleneck];
        for &s in &seq.steps {
            let h = tape.value(s).row(b);
            for (k, acc) in pooled.iter_mut().enumerate() {
                *acc += ae.encoder.bias.at(0, k) + h.iter().enumerate().map(|(i, v)| v * ae.encoder.weight.at(i, k)).sum::<f64>();
            }
        }
        let s = params.head.bias.item() + pooled.iter().enumerate().map(|(k, v)| v * params.head.weight.at(k, 0)).sum::<f64>();
        assert!((p - (s.tanh() + 1.0) / 2.0).abs() < 1e-14);
    }
}

#[test]
fn loss_examples() {
    // No penalty, no reconstruction: perfect predictions give zero loss.
    let mut arch = toy_arch(3);
    arch.components.autoencoder = false;
    let zero = arch.zeros().unwrap();
    let none = LossWeights { alpha: 0.0, beta: 0.0 };
    let mut windows = toy_windows(1, 4, 3, 5);
    windows[0].label = 1;
    let batch = Batch::from_windows(&windows).unwrap();
    let l = loss_values(&arch, &zero, &batch, none);
    assert_eq!(l.total, 0.25);
    assert_eq!(l.prediction, 0.25);

    // A head bias that saturates tanh gives p = 1 exactly.
    let mut sure = zero.clone();
    sure.head.bias = Tensor::scalar(40.0);
    assert_eq!(loss_values(&arch, &sure, &batch, none).total, 0.0);

    assert!(matches!(
        Batch::from_windows(&[]),
        Err(ModelError::EmptyBatch)
    ));
}

#[test]
fn components_match_naive_loops() {
    let arch = toy_arch(3);
    let params = arch.init(6).unwrap();
    let windows = toy_windows(9, 4, 3, 6);
    let batch = Batch::from_windows(&windows).unwrap();
    let weights = LossWeights { alpha: 0.7, beta: 0.01 };
    let l = loss_values(&arch, &params, &batch, weights);

    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.constant(t.clone()));
    let input = tape.constant(batch.input.clone());
    let out = model_forward(&mut tape, &arch, &bound, input, batch.width).unwrap();
    let p = tape.value(out.probability).clone();
    let h = tape.value(out.final_state).clone();

    let pred: f64 = (0..9).map(|i| (p.at(i, 0) - batch.labels[i]).powi(2)).sum();
    let ae = params.autoencoder.as_ref().unwrap();
    let mut recon = 0.0;
    for i in 0..3 {
        let j = i + 6;
        let z: Vec<f64> = (0..2)
            .map(|k| ae.encoder.bias.at(0, k) + (0..6).map(|r| h.at(i, r) * ae.encoder.weight.at(r, k)).sum::<f64>())
            .collect();
        for c in 0..6 {
            let g = ae.decoder.bias.at(0, c) + (0..2).map(|k| z[k] * ae.decoder.weight.at(k, c)).sum::<f64>();
            recon += (h.at(j, c) - g).powi(2);
        }
    }
    let mut omega = 0.0;
    params.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Weight {
            for v in t.data() {
                omega += v * v;
            }
        }
    });
    assert!((l.prediction - pred).abs() < 1e-12);
    assert!((l.reconstruction - 0.7 * recon).abs() < 1e-12);
    assert!((l.regularization - 0.01 * omega).abs() < 1e-12);
    assert!((l.total - (l.prediction + l.reconstruction + l.regularization)).abs() < 1e-12);
    assert_eq!(omega, weight_penalty_value(&params));
}

#[test]
fn reconstruction_pair_count() {
    for n in [1usize, 5, 6, 7, 20] {
        let batch = Batch::from_windows(&toy_windows(n, 3, 2, 7)).unwrap();
        assert_eq!(batch.pairs.len(), n.saturating_sub(6));
    }
}

#[test]
fn composite_loss_gradient_toy_batch() {
    let arch = toy_arch(3);
    let mut params = arch.init(8).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(8);
    params.visit_mut("", &mut |_, t, kind| {
        if kind == ParamKind::Bias {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    });
    // Windows 0, 6 and 12 months apart: two reconstruction pairs.
    let mut windows = toy_windows(13, 4, 3, 8);
    windows = vec![windows[0].clone(), windows[6].clone(), windows[12].clone()];
    let batch = Batch::from_windows(&windows).unwrap();
    assert_eq!(batch.pairs.len(), 2);
    let weights = LossWeights { alpha: 0.5, beta: 0.1 };
    let (l, grads) = loss_and_gradients(&arch, &params, &batch, weights).unwrap();
    assert!(l.prediction > 0.0 && l.reconstruction > 0.0 && l.regularization > 0.0);
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let report = grad_check(
        |x| {
            let mut p = params.clone();
            unflatten(&mut p, x);
            loss_values(&arch, &p, &batch, weights).total
        },
        &flatten(&params),
        &analytic,
        1e-6,
        1e-4,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn beta_monotone_in_reported_penalty() {
    let arch = toy_arch(3);
    let params = arch.init(10).unwrap();
    let batch = Batch::from_windows(&toy_windows(8, 4, 3, 10)).unwrap();
    let mut prev = -1.0;
    for beta in [0.0, 1e-5, 1e-4, 1e-3, 0.1, 1.0] {
        let l = loss_values(&arch, &params, &batch, LossWeights { alpha: 1.0, beta });
        assert!(l.regularization >= prev);
        prev = l.regularization;
    }
}

#[test]
fn alpha_irrelevant_without_autoencoder() {
    let mut arch = toy_arch(3);
    arch.components.autoencoder = false;
    let windows = toy_windows(20, 4, 3, 11);
    let run = |alpha: f64| {
        let cfg = TrainConfig {
            epochs: 15,
            weights: LossWeights { alpha, beta: 1e-3 },
            ..TrainConfig::default()
        };
        train(&arch, &cfg, &windows[..14], &windows[14..]).unwrap()
    };
    let (a, b) = (run(0.0), run(1.0));
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert!(a.history.iter().all(|r| r.loss.reconstruction == 0.0));
}

#[test]
fn training_is_deterministic() {
    let arch = toy_arch(3);
    let windows = toy_windows(20, 4, 3, 12);
    let cfg = TrainConfig {
        epochs: 10,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train(&arch, &cfg, &windows[..14], &windows[14..]).unwrap();
    let b = train(&arch, &cfg, &windows[..14], &windows[14..]).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn best_epoch_ties_go_to_later_epoch() {
    let arch = toy_arch(3);
    let windows = toy_windows(12, 4, 3, 13);
    let cfg = TrainConfig {
        epochs: 7,
        ..TrainConfig::default()
    };
    // No validation windows: every epoch scores 0, so the last one wins.
    let out = train(&arch, &cfg, &windows, &[]).unwrap();
    assert_eq!(out.best_epoch, 7);
    assert_eq!(out.history.len(), 7);
}

#[test]
fn huge_learning_rate_diverges() {
    let arch = Architecture::new(6);
    let windows = toy_windows(40, 6, 6, 14);
    let cfg = TrainConfig {
        lr: 1e3,
        ..TrainConfig::default()
    };
    match train(&arch, &cfg, &windows, &[]) {
        Err(ModelError::DivergenceDetected { epoch, .. }) => assert!(epoch <= 10, "epoch {epoch}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn invalid_configs_rejected() {
    let arch = toy_arch(3);
    let windows = toy_windows(4, 4, 3, 15);
    for cfg in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { weights: LossWeights { alpha: -1.0, beta: 0.0 }, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&arch, &cfg, &windows, &[]), Err(ModelError::InvalidConfig(_))));
    }
    assert!(matches!(train(&arch, &TrainConfig::default(), &[], &[]), Err(ModelError::EmptyBatch)));
}

#[test]
fn predictions_ordered_and_thresholded() {
    let arch = toy_arch(3);
    let params = arch.init(16).unwrap();
    assert!(predict(&arch, &params, &[], 0.5).unwrap().is_empty());
    let mut windows = toy_windows(6, 4, 3, 16);
    windows.reverse();
    let preds = predict(&arch, &params, &windows, 0.5).unwrap();
    assert!(preds.windows(2).all(|p| p[0].month < p[1].month));
    assert!(preds.iter().all(|p| p.label == u8::from(p.probability >= 0.5)));
    assert_eq!(preds, predict(&arch, &params, &windows, 0.5).unwrap());
}

#[test]
fn unidirectional_has_fewer_parameters() {
    let full = Architecture::new(42);
    let mut uni = full.clone();
    uni.components.backward = false;
    assert!(param_count(&uni.init(0).unwrap()) < param_count(&full.init(0).unwrap()));
    assert_eq!(full.sequence_dim(), 16);
}
