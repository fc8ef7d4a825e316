//! Finite-difference gradient checking.
//!
//! The check rebuilds the forward pass from scratch for every perturbed
//! input, so it stays independent of the backward implementation it
//! verifies. Used both by the test suites and by the `verify` CLI command.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative tolerance for analytic-vs-numeric agreement.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// Number of gradient elements compared.
    pub elements: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps near-zero pairs comparable.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` receives a fresh graph and one tracked [`Var`] per input tensor
/// and must return a scalar loss. Every element of every input is perturbed
/// by `±step`.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut elements = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            max_rel_err = max_rel_err.max(rel_err(analytic[ti].data()[j], numeric));
            elements += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        elements,
        tolerance,
    })
}

/// Random tensor with entries in `(lo, hi)`, used by the op-level checks.
pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Gradient checks for every registered op on small randomized tensors.
///
/// Returns one `(op name, report)` pair per op. ReLU inputs are sampled
/// away from the kink at zero, where the derivative is not defined.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use crate::seeds;

    let mut out = Vec::new();
    let mut check = |name: &'static str,
                     inputs: Vec<Tensor>,
                     build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>|
     -> Result<()> {
        let report = check_gradients(&inputs, |g, v| build(g, v), DEFAULT_STEP, DEFAULT_TOL)?;
        out.push((name, report));
        Ok(())
    };

    let mut rng = seeds::rng(seed, "gradcheck", &[]);

    let a = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    let b = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    check(
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g, v| {
            let s = g.add(v[0], v[1])?;
            g.scalar_mean(s)
        }),
    )?;
    check(
        "sub",
        vec![a.clone(), b.clone()],
        Box::new(|g, v| {
            let s = g.sub(v[0], v[1])?;
            g.scalar_mean(s)
        }),
    )?;
    check(
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(|g, v| {
            let s = g.mul(v[0], v[1])?;
            g.scalar_mean(s)
        }),
    )?;
    check(
        "scale",
        vec![a.clone()],
        Box::new(|g, v| {
            let s = g.scale(v[0], -2.5);
            g.scalar_mean(s)
        }),
    )?;

    let m = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    let bias = random_tensor(vec![4], -1.0, 1.0, &mut rng);
    check(
        "add_row_bias",
        vec![m.clone(), bias],
        Box::new(|g, v| {
            let s = g.add_row_bias(v[0], v[1])?;
            g.scalar_mean(s)
        }),
    )?;

    let img = random_tensor(vec![2, 3, 5, 5], -1.0, 1.0, &mut rng);
    let cbias = random_tensor(vec![3], -1.0, 1.0, &mut rng);
    check(
        "add_channel_bias",
        vec![img.clone(), cbias],
        Box::new(|g, v| {
            let s = g.add_channel_bias(v[0], v[1])?;
            g.scalar_mean(s)
        }),
    )?;

    let ma = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    let mb = random_tensor(vec![4, 2], -1.0, 1.0, &mut rng);
    check(
        "matmul",
        vec![ma, mb],
        Box::new(|g, v| {
            let s = g.matmul(v[0], v[1])?;
            g.scalar_mean(s)
        }),
    )?;

    check(
        "transpose",
        vec![m.clone()],
        Box::new(|g, v| {
            let t = g.transpose(v[0])?;
            let sq = g.mul(t, t)?;
            g.scalar_mean(sq)
        }),
    )?;

    let kernel = random_tensor(vec![2, 3, 3, 3], -0.5, 0.5, &mut rng);
    check(
        "conv2d",
        vec![img.clone(), kernel],
        Box::new(|g, v| {
            let c = g.conv2d(v[0], v[1], 2, 1)?;
            g.scalar_mean(c)
        }),
    )?;

    // keep |x| > 10*step so the central difference never straddles the kink
    let mut relu_in = random_tensor(vec![3, 4], 0.01, 1.0, &mut rng);
    for (i, v) in relu_in.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check(
        "relu",
        vec![relu_in],
        Box::new(|g, v| {
            let r = g.relu(v[0])?;
            g.scalar_mean(r)
        }),
    )?;

    check(
        "global_average_pool",
        vec![img],
        Box::new(|g, v| {
            let p = g.global_average_pool(v[0])?;
            let sq = g.mul(p, p)?;
            g.scalar_mean(sq)
        }),
    )?;

    let rows = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    check(
        "l2_normalize_rows",
        vec![rows.clone()],
        Box::new(|g, v| {
            let n = g.l2_normalize_rows(v[0])?;
            let w = g.mul(n, n)?;
            let s = g.sum_all(w)?;
            // mul by a non-uniform constant so row interactions are exercised
            let probe = g.l2_normalize_rows(v[0])?;
            let c = g.constant(Tensor::new(
                vec![3, 4],
                (0..12).map(|i| 0.1 * i as f64 - 0.5).collect(),
            )?);
            let probed = g.mul(probe, c)?;
            let s2 = g.sum_all(probed)?;
            g.add(s, s2)
        }),
    )?;

    // the spec's worked case: gradient of normalize at [[1, 0]]
    check(
        "l2_normalize_rows_at_unit_x",
        vec![Tensor::matrix(1, 2, vec![1.0, 0.0])?],
        Box::new(|g, v| {
            let n = g.l2_normalize_rows(v[0])?;
            let c = g.constant(Tensor::matrix(1, 2, vec![0.3, 0.7])?);
            let w = g.mul(n, c)?;
            g.sum_all(w)
        }),
    )?;

    check(
        "log_sum_exp_rows",
        vec![rows],
        Box::new(|g, v| {
            let l = g.log_sum_exp_rows(v[0])?;
            g.scalar_mean(l)
        }),
    )?;

    check(
        "scalar_mean",
        vec![a.clone()],
        Box::new(|g, v| g.scalar_mean(v[0])),
    )?;
    check("sum_all", vec![a], Box::new(|g, v| g.sum_all(v[0])))?;

    let dx = random_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
    let dw = random_tensor(vec![4, 2], -1.0, 1.0, &mut rng);
    let db = random_tensor(vec![2], -1.0, 1.0, &mut rng);
    check(
        "dense",
        vec![dx, dw, db],
        Box::new(|g, v| {
            let d = g.dense(v[0], v[1], v[2])?;
            let r = g.relu(d)?;
            g.scalar_mean(r)
        }),
    )?;

    Ok(out)
}
