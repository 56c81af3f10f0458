//! Analytic gradients against central finite differences.

use crfiqa_core::losses::{arcface_loss, combined_loss, smooth_l1, LossConfig};
use crfiqa_core::model::{Activation, BackboneConfig, HeadInput, ModelConfig, ModelState};
use crfiqa_core::trainer::{compute_targets, loss_and_gradients, objective, TargetMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Component-wise relative error. The denominator is floored at 1e-5, about
/// where double-precision cancellation in a loss of magnitude ~s swamps a
/// difference quotient with step 1e-5.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

/// Relative error of the whole gradient vector. Used for the full model,
/// where a few small components sit next to large curvature and a fixed step
/// cannot resolve them individually to the same relative accuracy.
fn vector_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

#[test]
fn arcface_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        let s = rng.random_range(1.0..64.0);
        let m = rng.random_range(0.0..0.8);
        let cos: Vec<f64> = (0..n * c).map(|_| rng.random_range(-0.95..0.95)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let analytic = arcface_loss(&cos, c, &y, s, m).unwrap().grad;
        let numeric = central_difference(&cos, |v| arcface_loss(v, c, &y, s, m).unwrap().value);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < REL_TOL, "rel err {err} (n={n} c={c} s={s} m={m})");
    }
}

#[test]
fn smooth_l1_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let beta = rng.random_range(0.1..2.0);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let analytic = smooth_l1(&p, &t, beta).unwrap().grad;
        let numeric = central_difference(&p, |v| smooth_l1(v, &t, beta).unwrap().value);
        assert!(max_rel_err(&analytic, &numeric) < REL_TOL);
    }
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        let lambda = rng.random_range(0.0..20.0);
        let cfg = LossConfig {
            lambda,
            ..Default::default()
        };
        let cos: Vec<f64> = (0..n * c).map(|_| rng.random_range(-0.9..0.9)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();

        let eval = |cos: &[f64], p: &[f64]| {
            combined_loss(
                arcface_loss(cos, c, &y, cfg.scale, cfg.margin).unwrap(),
                smooth_l1(p, &t, cfg.beta).unwrap(),
                cfg.lambda,
            )
            .unwrap()
        };
        let joint: Vec<f64> = cos.iter().chain(&p).copied().collect();
        let split = n * c;
        let analytic = eval(&cos, &p);
        let numeric = central_difference(&joint, |v| eval(&v[..split], &v[split..]).value);
        let analytic_joint: Vec<f64> = analytic
            .grad_cosines
            .iter()
            .chain(&analytic.grad_prediction)
            .copied()
            .collect();
        let err = max_rel_err(&analytic_joint, &numeric);
        assert!(err < REL_TOL, "rel err {err}");
    }
}

struct Instance {
    state: ModelState,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    loss: LossConfig,
    weight_decay: f64,
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, c: usize, d: usize, head_input: HeadInput) -> Instance {
    let input_dim = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2))
        .map(|_| rng.random_range(2..=6))
        .collect();
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_dim,
            hidden_dims: hidden,
            embedding_dim: d,
            activation: Activation::Tanh,
        },
        num_classes: c,
        head_input,
    };
    let mut state = ModelState::init(config, rng.random()).unwrap();
    // a trained-looking head so the regression path carries gradient
    for w in &mut state.head_weight {
        *w = rng.random_range(-0.5..0.5);
    }
    state.head_bias = rng.random_range(-0.5..0.5);
    let inputs = (0..n)
        .map(|_| (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    Instance {
        state,
        inputs,
        labels,
        loss: LossConfig {
            scale: rng.random_range(4.0..64.0),
            margin: rng.random_range(0.0..0.6),
            lambda: rng.random_range(0.0..12.0),
            beta: rng.random_range(0.05..1.5),
            ..Default::default()
        },
        weight_decay: rng.random_range(0.0..1e-2),
    }
}

/// Gradient of the regularized step objective (combined loss with detached
/// targets plus `wd/2·‖θ‖²`), analytic and numeric.
fn composite_gradients(inst: &Instance, mode: TargetMode) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<&[f64]> = inst.inputs.iter().map(|v| v.as_slice()).collect();
    let targets = compute_targets(&inst.state, &xs, &inst.labels, &inst.loss, mode).unwrap();
    let (_, mut grads) = loss_and_gradients(&inst.state, &xs, &inst.labels, &targets, &inst.loss).unwrap();
    grads.add_weight_decay(&inst.state, inst.weight_decay);

    let theta = inst.state.flatten();
    let mut probe = inst.state.clone();
    let numeric = central_difference(&theta, |v| {
        probe.set_flat(v).unwrap();
        objective(&probe, &xs, &inst.labels, &targets, &inst.loss).unwrap()
            + 0.5 * inst.weight_decay * probe.squared_norm()
    });
    (grads.flatten(), numeric)
}

#[test]
fn train_step_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for k in 0..100 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        let d = rng.random_range(2..=8);
        let head = if k % 4 == 3 {
            HeadInput::Normalized
        } else {
            HeadInput::Raw
        };
        let mode = if k % 2 == 0 {
            TargetMode::Cr
        } else {
            TargetMode::Ccs
        };
        let inst = random_instance(&mut rng, n, c, d, head);
        let (analytic, numeric) = composite_gradients(&inst, mode);
        let err = vector_rel_err(&analytic, &numeric);
        assert!(err < REL_TOL, "instance {k}: rel err {err}");
    }
}

#[test]
fn four_sample_three_class_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inst = random_instance(&mut rng, 4, 3, 5, HeadInput::Raw);
    inst.loss = LossConfig::default();
    inst.weight_decay = 5e-4;
    let (analytic, numeric) = composite_gradients(&inst, TargetMode::Cr);
    assert!(vector_rel_err(&analytic, &numeric) < REL_TOL);
}

#[test]
fn targets_are_detached() {
    // Letting the targets follow the parameters changes the derivative, so
    // agreement with the fixed-target finite differences above is only
    // possible because no gradient flows through them.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut inst = random_instance(&mut rng, 6, 4, 5, HeadInput::Raw);
    inst.loss.lambda = 10.0;
    inst.weight_decay = 0.0;
    let xs: Vec<&[f64]> = inst.inputs.iter().map(|v| v.as_slice()).collect();
    let targets = compute_targets(&inst.state, &xs, &inst.labels, &inst.loss, TargetMode::Cr).unwrap();
    let (_, grads) = loss_and_gradients(&inst.state, &xs, &inst.labels, &targets, &inst.loss).unwrap();
    let theta = inst.state.flatten();
    let mut probe = inst.state.clone();
    let attached = central_difference(&theta, |v| {
        probe.set_flat(v).unwrap();
        let t = compute_targets(&probe, &xs, &inst.labels, &inst.loss, TargetMode::Cr).unwrap();
        objective(&probe, &xs, &inst.labels, &t, &inst.loss).unwrap()
    });
    assert!(vector_rel_err(&grads.flatten(), &attached) > 1e-2);
}
