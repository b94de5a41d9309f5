//! Finite-difference drivers for every trainable component.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reland::dataset::tag_values;
use reland::losses::{objective_grad, IrmConfig, Objective, PushConfig};
use reland::models::{LrModel, MlpModel, Mode, RelandConfig, RelandModel};
use reland::tensor::{sparsemax, sparsemax_backward, BatchNormLayer, DenseLayer};

use super::{fd_check, no_pattern, random_matrix, FdStats};

fn weighted_sum(out: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (out * c).sum()
}

/// Parameters and inputs of dense layers with random shapes up to 70 inputs.
pub fn dense_fd(seed: u64, trials: usize) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FdStats::default();
    for _ in 0..trials {
        let (n, d_in, d_out) = (rng.gen_range(1..12), rng.gen_range(1..71), rng.gen_range(1..20));
        let layer = DenseLayer::init(d_in, d_out, &mut rng);
        let x = random_matrix(&mut rng, n, d_in, 2.0);
        let c = random_matrix(&mut rng, n, d_out, 1.0);
        let g = layer.backward(x.view(), c.view()).unwrap();

        let mut flat = Vec::new();
        layer.write_params(&mut flat);
        let mut analytic = Vec::new();
        g.write_params(&mut analytic);
        let f = |p: &[f64]| {
            let mut l = layer.clone();
            let mut src = p;
            l.read_params(&mut src);
            weighted_sum(&l.forward(x.view()).unwrap(), &c)
        };
        stats = stats.merge(fd_check(f, no_pattern, &flat, &analytic));

        let fx = |v: &[f64]| {
            let xi = Array2::from_shape_vec((n, d_in), v.to_vec()).unwrap();
            weighted_sum(&layer.forward(xi.view()).unwrap(), &c)
        };
        let xs: Vec<f64> = x.iter().copied().collect();
        let gx: Vec<f64> = g.input.iter().copied().collect();
        stats = stats.merge(fd_check(fx, no_pattern, &xs, &gx));
    }
    stats
}

/// Training-mode batch norm, parameters and inputs.
pub fn batchnorm_fd(seed: u64, trials: usize) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FdStats::default();
    for _ in 0..trials {
        let (n, d) = (rng.gen_range(2..12), rng.gen_range(1..71));
        let mut bn = BatchNormLayer::new(d);
        bn.scale = Array1::from_shape_fn(d, |_| rng.gen_range(0.5..1.5));
        bn.shift = Array1::from_shape_fn(d, |_| rng.gen_range(-0.5..0.5));
        let x = random_matrix(&mut rng, n, d, 2.0);
        let c = random_matrix(&mut rng, n, d, 1.0);
        let (_, cache) = bn.forward_train(x.view()).unwrap();
        let g = bn.backward(&cache, c.view());

        let mut flat = Vec::new();
        bn.write_params(&mut flat);
        let mut analytic = Vec::new();
        g.write_params(&mut analytic);
        let f = |p: &[f64]| {
            let mut l = bn.clone();
            let mut src = p;
            l.read_params(&mut src);
            weighted_sum(&l.forward_train(x.view()).unwrap().0, &c)
        };
        stats = stats.merge(fd_check(f, no_pattern, &flat, &analytic));

        let fx = |v: &[f64]| {
            let xi = Array2::from_shape_vec((n, d), v.to_vec()).unwrap();
            weighted_sum(&bn.forward_train(xi.view()).unwrap().0, &c)
        };
        let xs: Vec<f64> = x.iter().copied().collect();
        let gx: Vec<f64> = g.input.iter().copied().collect();
        stats = stats.merge(fd_check(fx, no_pattern, &xs, &gx));
    }
    stats
}

/// Sparsemax Jacobian-vector products; probes whose `±h` step changes the
/// support are skipped.
pub fn sparsemax_fd(seed: u64, trials: usize) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = FdStats::default();
    for _ in 0..trials {
        let d = rng.gen_range(2..71);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = sparsemax(&z).unwrap();
        let analytic = sparsemax_backward(&p, &c);
        let f = |v: &[f64]| sparsemax(v).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum();
        let support = |v: &[f64]| sparsemax(v).unwrap().iter().map(|&q| q > 0.0).collect();
        stats = stats.merge(fd_check(f, support, &z, &analytic));
    }
    stats
}

pub enum Loss {
    /// Fixed linear functional of the logits.
    Linear(Vec<f64>),
    Objective {
        objective: Objective,
        lambda: f64,
        p: f64,
    },
}

pub struct Batch {
    pub x: Array2<f64>,
    pub labels: Vec<f64>,
    pub env: Vec<f64>,
}

pub fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Batch {
    let x = random_matrix(rng, n, d, 2.0);
    let mut labels: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() < 0.4) as u8 as f64).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    let env = (0..n)
        .map(|i| if i % 3 == 0 { 0.0 } else { rng.gen_range(1.0..4.0_f64).floor() })
        .collect();
    Batch { x, labels, env }
}

pub fn loss_of(loss: &Loss, logits: &[f64], b: &Batch) -> (f64, Vec<f64>) {
    match loss {
        Loss::Linear(c) => (logits.iter().zip(c).map(|(a, b)| a * b).sum(), c.clone()),
        Loss::Objective { objective, lambda, p } => {
            let y8: Vec<u8> = b.labels.iter().map(|&v| v as u8).collect();
            let tags = tag_values(&b.env, &y8).unwrap().tags;
            let irm = IrmConfig {
                lambda: *lambda,
                batch_size: logits.len(),
                ..IrmConfig::default()
            };
            let push = PushConfig { p: *p, lambda_p: 1.0 };
            objective_grad(*objective, logits, &b.labels, &tags, &irm, &push).unwrap()
        }
    }
}

/// All RELand parameters under `loss`, in training mode.
pub fn reland_fd(d: usize, steps: usize, n: usize, seed: u64, loss: &Loss) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RelandConfig {
        d,
        steps,
        latent: 8,
        gamma: -1.0,
    };
    let model = RelandModel::init(cfg, &mut rng).unwrap();
    let b = batch(&mut rng, n, d);
    let pass = model.forward(b.x.view(), Mode::Train).unwrap();
    let (_, dlogits) = loss_of(loss, &pass.logits, &b);
    let analytic = model.backward(&pass, &dlogits).unwrap();
    let eval = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params(p);
        m.forward(b.x.view(), Mode::Train).unwrap()
    };
    fd_check(
        |p| loss_of(loss, &eval(p).logits, &b).0,
        |p| eval(p).activation_pattern(),
        &model.params(),
        &analytic,
    )
}

/// RELand with a random linear functional of the logits, batch 16.
pub fn reland_linear_fd(d: usize, steps: usize, seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    reland_fd(d, steps, n, seed + 1, &Loss::Linear(c))
}

pub fn objective_fd(objective: Objective, lambda: f64, p: f64, seed: u64) -> FdStats {
    reland_fd(10, 2, 16, seed, &Loss::Objective { objective, lambda, p })
}

/// MLP, full LR and single-feature LR under a linear functional.
pub fn baselines_fd(seed: u64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch(&mut rng, 12, 9);
    let c: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |logits: &[f64]| logits.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();

    let mlp = MlpModel::init(9, &mut rng);
    let pass = mlp.forward(b.x.view()).unwrap();
    let analytic = mlp.backward(&pass, &c).unwrap();
    let eval = |p: &[f64]| {
        let mut m = mlp.clone();
        m.set_params(p);
        m.forward(b.x.view()).unwrap()
    };
    let mut stats = fd_check(|p| loss(&eval(p).logits), |p| eval(p).activation_pattern(), &mlp.params(), &analytic);

    for lr in [LrModel::init(9, &mut rng), LrModel::single_feature(4, &mut rng)] {
        let pass = lr.forward(b.x.view()).unwrap();
        let analytic = lr.backward(&pass, &c).unwrap();
        let f = |p: &[f64]| {
            let mut m = lr.clone();
            m.set_params(p);
            loss(&m.forward(b.x.view()).unwrap().logits)
        };
        stats = stats.merge(fd_check(f, no_pattern, &lr.params(), &analytic));
    }
    stats
}
