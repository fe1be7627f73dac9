use super::*;
use crate::data::{Magnitude, MatrixSource, SuperpositionGenerator, SuperpositionSpec};
use crate::models::{Architecture, Model, ModelConfig};
use crate::numeric::{randn, Rng};

fn small_stream(seed: u64) -> SuperpositionGenerator {
    SuperpositionGenerator::new(SuperpositionSpec {
        d: 8,
        m_true: 16,
        mean_active: 2.0,
        magnitude: Magnitude::default(),
        seed,
    })
    .unwrap()
}

fn small_model(arch: Architecture, activation: ActivationKind, seed: u64) -> Model {
    Model::init(ModelConfig::new(arch, activation, 8, 32).with_k(4), seed).unwrap()
}

fn short_config(total: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        total_samples: total,
        log_interval: 10,
        dead_window: 200,
        ..TrainConfig::default()
    }
}

#[test]
fn perfect_reconstruction_costs_nothing() {
    let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
    let l = loss(&x, &x, &Matrix::zeros(2, 4), ActivationKind::Relu, 0.0).unwrap();
    assert_eq!(l.total, 0.0);
    assert!(l.seeds.d_recon.as_slice().iter().all(|v| *v == 0.0));
}

#[test]
fn unit_residual_costs_one() {
    let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
    let l = loss(
        &Matrix::zeros(1, 2),
        &x,
        &Matrix::zeros(1, 3),
        ActivationKind::Relu,
        0.0,
    )
    .unwrap();
    assert_eq!(l.total, 1.0);
}

#[test]
fn l1_penalty_adds_lambda_times_norm() {
    let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
    let codes = Matrix::from_rows(&[[4.0, 0.0, 6.0]]).unwrap();
    for a in [ActivationKind::Relu, ActivationKind::Gated] {
        let l = loss(&x, &x, &codes, a, 1e-3).unwrap();
        assert!((l.total - 0.01).abs() < 1e-15, "{}", l.total);
        let seed = l.seeds.d_penalized.unwrap();
        assert_eq!(seed.as_slice(), &[1e-3, 0.0, 1e-3]);
    }
    // Batch reduction is the mean: two identical rows still add 0.01.
    let x2 = Matrix::vstack(&[x.clone(), x.clone()]).unwrap();
    let c2 = Matrix::vstack(&[codes.clone(), codes]).unwrap();
    let l = loss(&x2, &x2, &c2, ActivationKind::Relu, 1e-3).unwrap();
    assert!((l.total - 0.01).abs() < 1e-15);
}

#[test]
fn l0_penalty_counts_nonzeros() {
    let x = Matrix::zeros(2, 2);
    let codes = Matrix::from_rows(&[[0.3, 0.0, 2.0], [0.0, 0.0, 1.0]]).unwrap();
    let l = loss(&x, &x, &codes, ActivationKind::Jumprelu, 0.1).unwrap();
    assert!((l.total - 0.15).abs() < 1e-15);
    assert_eq!(l.seeds.l0_weight, 0.05);
    assert!(l.seeds.d_penalized.is_none());
}

#[test]
fn unpenalized_activations_ignore_lambda() {
    let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
    let codes = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
    for a in [
        ActivationKind::Topk,
        ActivationKind::BatchTopk,
        ActivationKind::Sparsemax,
        ActivationKind::Softmax,
    ] {
        let l = loss(&Matrix::zeros(1, 2), &x, &codes, a, 123.0).unwrap();
        assert_eq!(l.total, 5.0);
        assert_eq!(l.sparsity, 0.0);
        assert!(l.seeds.d_penalized.is_none());
        assert_eq!(l.seeds.l0_weight, 0.0);
    }
}

#[test]
fn loss_rejects_shape_mismatch() {
    let x = Matrix::zeros(2, 2);
    assert!(loss(&Matrix::zeros(2, 3), &x, &x, ActivationKind::Relu, 0.0).is_err());
    assert!(loss(&x, &x, &Matrix::zeros(3, 2), ActivationKind::Relu, 0.0).is_err());
}

#[test]
fn adam_matches_scalar_recurrence() {
    let config = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let g = 0.37;
    let (mut p, mut m1, mut m2) = ([1.5], [0.0], [0.0]);
    let (mut hp, mut hm, mut hv) = (1.5f64, 0.0f64, 0.0f64);
    for t in 1..=50u64 {
        adam_update(&mut p, &[g], &mut m1, &mut m2, t, &config);
        hm = 0.9 * hm + 0.1 * g;
        hv = 0.99 * hv + 0.01 * g * g;
        let m_hat = hm / (1.0 - 0.9f64.powi(t as i32));
        let v_hat = hv / (1.0 - 0.99f64.powi(t as i32));
        hp -= 1e-2 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - hp).abs() < 1e-12);
    }
    // With a constant gradient the bias-corrected step is ≈ lr·sign(g).
    assert!((1.5 - p[0] - 50.0 * 1e-2).abs() < 1e-6);
}

fn zero_grads(model: &Model) -> Gradients {
    Gradients(
        model
            .params()
            .into_iter()
            .map(|(n, p)| (n, Matrix::zeros(p.rows(), p.cols())))
            .collect(),
    )
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    for arch in [Architecture::Attn, Architecture::Mlp] {
        let activation = match arch {
            Architecture::Attn => ActivationKind::Sparsemax,
            Architecture::Mlp => ActivationKind::Relu,
        };
        let mut model = small_model(arch, activation, 3);
        let before = model.clone();
        let mut state = TrainState::new(&model);
        let grads = zero_grads(&model);
        for _ in 0..3 {
            adam_step(&mut model, &mut state, &grads, &TrainConfig::default()).unwrap();
        }
        assert_eq!(state.step, 3);
        for ((_, a), (_, b)) in before.params().iter().zip(model.params()) {
            for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn adam_step_rejects_mismatched_gradients() {
    let mut model = small_model(Architecture::Mlp, ActivationKind::Relu, 0);
    let mut state = TrainState::new(&model);
    let mut grads = zero_grads(&model);
    grads.0.pop();
    assert!(adam_step(&mut model, &mut state, &grads, &TrainConfig::default()).is_err());
}

#[test]
fn gradient_clip_bounds_update_direction() {
    let mut a = small_model(Architecture::Attn, ActivationKind::Sparsemax, 4);
    let mut b = a.clone();
    let mut grads = zero_grads(&a);
    grads.0[0].1 = Matrix::from_vec(8, 32, vec![100.0; 256]).unwrap();
    let clipped = TrainConfig {
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    // Adam's first step is invariant to gradient scale, so clipping must not
    // change it beyond eps effects.
    let mut state = TrainState::new(&a);
    adam_step(&mut a, &mut state, &grads, &clipped).unwrap();
    let mut state = TrainState::new(&b);
    adam_step(&mut b, &mut state, &grads, &TrainConfig::default()).unwrap();
    for ((_, p), (_, q)) in a.params().iter().zip(b.params()) {
        for (u, v) in p.as_slice().iter().zip(q.as_slice()) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn mlp_decoder_columns_stay_unit_norm() {
    let mut model = small_model(Architecture::Mlp, ActivationKind::Relu, 5);
    let mut data = small_stream(5);
    train(&mut model, &mut data, &short_config(800), None).unwrap();
    let Model::Mlp(m) = &model else {
        unreachable!()
    };
    for c in 0..32 {
        let n = crate::numeric::norm(&m.w_dec.column(c));
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn silent_concepts_go_dead() {
    let model = small_model(Architecture::Mlp, ActivationKind::Relu, 0);
    let mut state = TrainState::new(&model);
    let zeros = Matrix::zeros(10, 32);
    let mut dead = 0;
    for _ in 0..10 {
        dead = track_dead(&zeros, &mut state, 0.0, 100).unwrap();
    }
    assert_eq!(dead, 32);
    assert_eq!(state.samples_seen, 100);
}

#[test]
fn active_concept_never_dies() {
    let model = small_model(Architecture::Mlp, ActivationKind::Relu, 0);
    let mut state = TrainState::new(&model);
    let mut codes = Matrix::zeros(4, 32);
    codes.set(2, 0, 0.5);
    for _ in 0..100 {
        let dead = track_dead(&codes, &mut state, 0.0, 8).unwrap();
        assert!(state.samples_seen < 8 || dead == 31);
        assert_eq!(state.last_active[0], state.samples_seen);
    }
    // Activity at or below the threshold does not count.
    let mut state = TrainState::new(&model);
    for _ in 0..4 {
        track_dead(&codes, &mut state, 0.5, 8).unwrap();
    }
    assert_eq!(dead_count(&state, 8), 32);
    assert!(track_dead(&codes, &mut state, -1.0, 8).is_err());
    assert!(track_dead(&Matrix::zeros(1, 3), &mut state, 0.0, 8).is_err());
}

#[test]
fn zero_budget_returns_model_unchanged() {
    let mut model = small_model(Architecture::Attn, ActivationKind::Sparsemax, 6);
    let before = model.clone();
    let history = train(&mut model, &mut small_stream(6), &short_config(0), None).unwrap();
    assert_eq!(model, before);
    assert!(history.records.is_empty());
}

#[test]
fn exhausted_data_reports_counts() {
    let mut model = small_model(Architecture::Mlp, ActivationKind::Relu, 7);
    let data = randn(&mut Rng::new(7), 40, 8, 1.0).unwrap();
    let err = train(
        &mut model,
        &mut MatrixSource::new(data),
        &short_config(100),
        None,
    )
    .unwrap_err();
    match err {
        Error::DataExhausted {
            delivered,
            requested,
        } => assert_eq!((delivered, requested), (40, 100)),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn invalid_train_config_is_rejected() {
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn run(arch: Architecture, activation: ActivationKind, config: &TrainConfig) -> (Model, History) {
    let mut model = small_model(arch, activation, 11);
    let history = train(&mut model, &mut small_stream(12), config, None).unwrap();
    (model, history)
}

#[test]
fn training_is_bit_reproducible() {
    let config = short_config(1600);
    for (arch, act) in [
        (Architecture::Attn, ActivationKind::Sparsemax),
        (Architecture::Mlp, ActivationKind::Topk),
        (Architecture::Mlp, ActivationKind::Gated),
    ] {
        let (m1, h1) = run(arch, act, &config);
        let (m2, h2) = run(arch, act, &config);
        assert_eq!(h1.records.len(), 10);
        assert_eq!(m1, m2);
        assert_eq!(h1.to_tsv(), h2.to_tsv());
        assert_eq!(h1.step_losses, h2.step_losses);
    }
}

#[test]
fn lambda_is_inert_without_a_penalty() {
    let low = short_config(800);
    let high = TrainConfig {
        lambda: 10.0,
        ..low.clone()
    };
    for (arch, act) in [
        (Architecture::Attn, ActivationKind::Sparsemax),
        (Architecture::Mlp, ActivationKind::Topk),
        (Architecture::Mlp, ActivationKind::BatchTopk),
    ] {
        let (m1, h1) = run(arch, act, &low);
        let (m2, h2) = run(arch, act, &high);
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
    }
    // and it does matter for the L1 variant.
    let (m1, _) = run(Architecture::Mlp, ActivationKind::Relu, &low);
    let (m2, _) = run(Architecture::Mlp, ActivationKind::Relu, &high);
    assert_ne!(m1, m2);
}

#[test]
fn history_is_streamed_and_parses_back() {
    let mut model = small_model(Architecture::Attn, ActivationKind::Sparsemax, 13);
    let mut log = Vec::new();
    let history = train(
        &mut model,
        &mut small_stream(13),
        &short_config(480),
        Some(&mut log),
    )
    .unwrap();
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text, history.to_tsv());
    assert!(text.starts_with("step\tloss\tmean_L0\tdead_count\twallclock_ms\n"));
    let parsed = History::from_tsv(&text).unwrap();
    assert_eq!(parsed.records, history.records);
    assert_eq!(history.records.last().unwrap().step, 30);
    assert_eq!(history.step_losses.len(), 30);
    assert!(History::from_tsv("step\tloss\n1\t2\n").is_err());
}
