use crfiqa_core::classifiability::ClassCenterMatrix;
use crfiqa_core::losses::LossConfig;
use crfiqa_core::model::{Activation, BackboneConfig, Dense, HeadInput, ModelConfig, ModelState};
use crfiqa_core::synthdata::{generate, SyntheticSpec};
use crfiqa_core::trainer::{
    compute_targets, loss_and_gradients, train, train_arcface, train_on_top, train_step, Dataset, Sgd,
    TargetMode, TrainConfig, TrainingMode,
};

fn small_data(seed: u64) -> (Dataset, usize, usize) {
    let spec = SyntheticSpec {
        num_classes: 6,
        samples_per_class: 12,
        input_dim: 10,
        noise_levels: vec![0.05, 0.2, 0.5, 1.0],
        seed,
    };
    let samples = generate(&spec).unwrap();
    let data = Dataset::new(
        samples.iter().map(|s| s.input.clone()).collect(),
        samples.iter().map(|s| s.label).collect(),
    )
    .unwrap();
    (data, spec.input_dim, spec.num_classes)
}

fn model(input_dim: usize, classes: usize, seed: u64) -> ModelState {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_dim,
            hidden_dims: vec![16],
            embedding_dim: 8,
            activation: Activation::Relu,
        },
        num_classes: classes,
        head_input: HeadInput::Raw,
    };
    ModelState::init(config, seed).unwrap()
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        total_iterations: iterations,
        lr: 0.003,
        margin_warmup: iterations / 4,
        seed: 11,
        ..Default::default()
    }
}

fn body_bytes(state: &ModelState) -> Vec<u64> {
    let slices = state.slices();
    let body = slices.len() - 2;
    slices[..body]
        .iter()
        .flat_map(|s| s.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    let (data, dim, c) = small_data(1);
    let cfg = config(60);
    let (a, ra) = train(model(dim, c, 5), &data, &cfg).unwrap();
    let (b, rb) = train(model(dim, c, 5), &data, &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra, rb);
}

#[test]
fn reports_are_consistent() {
    let (data, dim, c) = small_data(2);
    let cfg = config(40);
    let (_, reports) = train(model(dim, c, 3), &data, &cfg).unwrap();
    assert_eq!(reports.len(), 40);
    for (i, r) in reports.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert!((r.total_loss - (r.arc_loss + cfg.loss.lambda * r.cr_loss)).abs() < 1e-12);
    }
}

#[test]
fn zero_lambda_matches_arcface_only_training() {
    let (data, dim, c) = small_data(3);
    let mut cfg = config(100);
    cfg.loss.lambda = 0.0;
    let (joint, joint_reports) = train(model(dim, c, 9), &data, &cfg).unwrap();
    let (plain, plain_reports) = train_arcface(model(dim, c, 9), &data, &cfg).unwrap();
    assert_eq!(body_bytes(&joint), body_bytes(&plain));
    for (a, b) in joint_reports.iter().zip(&plain_reports) {
        assert_eq!(a.arc_loss.to_bits(), b.arc_loss.to_bits());
        assert_eq!(a.total_loss.to_bits(), b.total_loss.to_bits());
    }
}

#[test]
fn training_pulls_samples_to_their_centers() {
    let (data, dim, c) = small_data(4);
    let cfg = config(400);
    let (_, reports) = train(model(dim, c, 2), &data, &cfg).unwrap();
    let epoch = data.len() / cfg.batch_size;
    let mean = |rs: &[crfiqa_core::StepReport], f: fn(&crfiqa_core::StepReport) -> f64| {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };
    let first = &reports[..epoch];
    let last = &reports[reports.len() - epoch..];
    assert!(mean(last, |r| r.mean_ccs) > mean(first, |r| r.mean_ccs));
    assert!(mean(last, |r| r.arc_loss) < mean(first, |r| r.arc_loss));
}

#[test]
fn on_top_only_moves_the_head() {
    let (data, dim, c) = small_data(5);
    let (frozen, _) = train_arcface(model(dim, c, 8), &data, &config(100)).unwrap();
    let mut cfg = config(300);
    cfg.training_mode = TrainingMode::OnTop;
    let (fitted, losses) = train_on_top(&frozen, &data, &cfg).unwrap();
    assert_eq!(body_bytes(&fitted), body_bytes(&frozen));
    assert_ne!(fitted.head_weight, frozen.head_weight);
    let k = 20;
    let head: f64 = losses[..k].iter().sum();
    let tail: f64 = losses[losses.len() - k..].iter().sum();
    assert!(tail < head);
}

#[test]
fn on_top_fits_constant_targets() {
    // Identity backbone with orthogonal centers placed on the class axes:
    // every sample sits on its center (CCS = 1) and is orthogonal to the
    // others (CR = 1), while raw embedding magnitudes vary.
    let d = 4;
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_dim: d,
            hidden_dims: vec![],
            embedding_dim: d,
            activation: Activation::Relu,
        },
        num_classes: d,
        head_input: HeadInput::Raw,
    };
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let layer = Dense {
        inputs: d,
        outputs: d,
        weight: eye.clone(),
        bias: vec![0.0; d],
    };
    let centers = ClassCenterMatrix::new(d, eye).unwrap();
    let frozen = ModelState::from_parts(config, vec![layer], centers, vec![0.0; d], 0.0).unwrap();

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for j in 0..d {
        for k in 0..8 {
            let mut x = vec![0.0; d];
            x[j] = 0.5 + 0.2 * k as f64;
            inputs.push(x);
            labels.push(j);
        }
    }
    let data = Dataset::new(inputs.clone(), labels).unwrap();
    for mode in [TargetMode::Cr, TargetMode::Ccs] {
        let cfg = TrainConfig {
            batch_size: 8,
            total_iterations: 2000,
            weight_decay: 0.0,
            target_mode: mode,
            training_mode: TrainingMode::OnTop,
            seed: 3,
            ..Default::default()
        };
        let (fitted, _) = train_on_top(&frozen, &data, &cfg).unwrap();
        for q in fitted.predict_quality(&inputs).unwrap() {
            assert!((q - 1.0).abs() < 1e-2, "{mode:?}: prediction {q}");
        }
    }
}

#[test]
fn cr_and_ccs_targets_give_different_heads() {
    let (data, dim, c) = small_data(6);
    let (frozen, _) = train_arcface(model(dim, c, 4), &data, &config(100)).unwrap();
    let mut cfg = config(200);
    cfg.training_mode = TrainingMode::OnTop;
    let (cr, _) = train_on_top(&frozen, &data, &cfg).unwrap();
    cfg.target_mode = TargetMode::Ccs;
    let (ccs, _) = train_on_top(&frozen, &data, &cfg).unwrap();
    assert_ne!(
        cr.predict_quality(&data.inputs).unwrap(),
        ccs.predict_quality(&data.inputs).unwrap()
    );
}

#[test]
fn target_mode_changes_only_the_targets() {
    let (data, dim, c) = small_data(7);
    let (mut state, _) = train(model(dim, c, 1), &data, &config(30)).unwrap();
    state.head_bias = 0.3;
    let xs: Vec<&[f64]> = data.inputs[..16].iter().map(|v| v.as_slice()).collect();
    let ys = &data.labels[..16];
    let loss = LossConfig::default();

    let t_cr = compute_targets(&state, &xs, ys, &loss, TargetMode::Cr).unwrap();
    let t_ccs = compute_targets(&state, &xs, ys, &loss, TargetMode::Ccs).unwrap();
    assert_ne!(t_cr, t_ccs);
    let (l_cr, g_cr) = loss_and_gradients(&state, &xs, ys, &t_cr, &loss).unwrap();
    let (l_ccs, g_ccs) = loss_and_gradients(&state, &xs, ys, &t_ccs, &loss).unwrap();
    assert_eq!(l_cr.arc_value, l_ccs.arc_value);
    assert_eq!(l_cr.grad_cosines, l_ccs.grad_cosines);
    assert_eq!(g_cr.centers, g_ccs.centers);
    assert_ne!(l_cr.reg_value, l_ccs.reg_value);

    let mut cfg = config(1);
    let mut a = state.clone();
    let mut b = state.clone();
    let ra = train_step(&mut a, &mut Sgd::new(&state, cfg.momentum), &xs, ys, &cfg, 0).unwrap();
    cfg.target_mode = TargetMode::Ccs;
    let rb = train_step(&mut b, &mut Sgd::new(&state, cfg.momentum), &xs, ys, &cfg, 0).unwrap();
    assert_eq!(ra.arc_loss, rb.arc_loss);
    assert_eq!((ra.mean_ccs, ra.mean_nnccs), (rb.mean_ccs, rb.mean_nnccs));
    assert_eq!(a.centers, b.centers);
    assert_ne!(a.head_weight, b.head_weight);
}
