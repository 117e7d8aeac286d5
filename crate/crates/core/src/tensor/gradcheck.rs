//! Central finite-difference gradient oracle.
//!
//! The oracle only evaluates the forward pass, so it is independent of the
//! backward rules it checks.

use crate::error::Result;

use rand::Rng;

use super::{BatchNormConfig, Graph, RunningStats, Tensor, Var};

/// Step size used for a tensor: `rel_step` times its RMS value, with a
/// floor for all-zero tensors.
pub fn step_size(values: &[f64], rel_step: f64) -> f64 {
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64).sqrt();
    rel_step * rms.max(1e-3)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {:>6} entries  max rel err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.checked,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks every input element of an operation.
///
/// `build` records the operation on a fresh graph given leaf handles for
/// `inputs`. Its output is reduced to a scalar by a fixed projection
/// `sum(out * proj)` with deterministic pseudo-random `proj`.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], build: F, rel_step: f64, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let n = g.value(out).len();
        let proj: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 48.5) - 1.0).collect();
        let p = g.constant(Tensor::new(g.shape(out).to_vec(), proj)?);
        let prod = g.mul(out, p)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], |gr| gr.data().to_vec()))
        .collect();

    let mut max_err = 0.0f64;
    let mut checked = 0;
    let mut perturbed = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let h = step_size(t.data(), rel_step);
        for i in 0..t.len() {
            let orig = t.data()[i];
            perturbed[ti].data_mut()[i] = orig + h;
            let (gp, _, lp) = eval(&perturbed)?;
            perturbed[ti].data_mut()[i] = orig - h;
            let (gm, _, lm) = eval(&perturbed)?;
            perturbed[ti].data_mut()[i] = orig;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[ti][i], numeric, 1e-6));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        checked,
        max_rel_err: max_err,
        tolerance,
    })
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = crate::rng::stream(seed, &["gradcheck-input".into()]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Finite-difference checks of every differentiable operation on small
/// random inputs (relative step 1e-3, tolerance 1e-4).
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let seed = seed * 3;
    let cfg = BatchNormConfig::default();
    vec![
        check_op(
            "conv2d",
            &[
                rand_tensor(&[2, 2, 5, 5], seed),
                rand_tensor(&[3, 2, 3, 3], seed + 1),
                rand_tensor(&[3], seed + 2),
            ],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            1e-3,
            1e-4,
        ),
        check_op(
            "conv1d",
            &[
                rand_tensor(&[2, 3, 9], seed),
                rand_tensor(&[4, 3, 3], seed + 1),
                rand_tensor(&[4], seed + 2),
            ],
            |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1),
            1e-3,
            1e-4,
        ),
        check_op(
            "batchnorm/train",
            &[
                rand_tensor(&[2, 3, 4, 4], seed),
                rand_tensor(&[3], seed + 1),
                rand_tensor(&[3], seed + 2),
            ],
            |g, v| {
                let mut rs = RunningStats::new(3);
                g.batchnorm(v[0], v[1], v[2], &mut rs, true, cfg)
            },
            1e-3,
            1e-4,
        ),
        check_op(
            "batchnorm/eval",
            &[
                rand_tensor(&[2, 3, 5], seed),
                rand_tensor(&[3], seed + 1),
                rand_tensor(&[3], seed + 2),
            ],
            |g, v| {
                let mut rs = RunningStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 2.0],
                };
                g.batchnorm(v[0], v[1], v[2], &mut rs, false, cfg)
            },
            1e-3,
            1e-4,
        ),
        check_op(
            "relu",
            // keep inputs away from the kink
            &[rand_tensor(&[2, 7], seed).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })],
            |g, v| Ok(g.relu(v[0])),
            1e-3,
            1e-4,
        ),
        check_op(
            "sigmoid",
            &[rand_tensor(&[2, 7], seed).map(|v| 3.0 * v)],
            |g, v| Ok(g.sigmoid(v[0])),
            1e-3,
            1e-4,
        ),
        check_op(
            "avgpool2d",
            &[rand_tensor(&[2, 2, 5, 4], seed)],
            |g, v| g.avgpool2(v[0]),
            1e-3,
            1e-4,
        ),
        check_op(
            "avgpool1d",
            &[rand_tensor(&[2, 2, 7], seed)],
            |g, v| g.avgpool2(v[0]),
            1e-3,
            1e-4,
        ),
        check_op(
            "depthwise_conv2d",
            &[
                rand_tensor(&[2, 3, 4, 4], seed),
                rand_tensor(&[3, 1, 4, 4], seed + 1),
                rand_tensor(&[3], seed + 2),
            ],
            |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2])),
            1e-3,
            1e-4,
        ),
        check_op(
            "weighted_avg1d",
            &[rand_tensor(&[2, 3, 6], seed), rand_tensor(&[3, 6], seed + 1)],
            |g, v| g.weighted_avg1d(v[0], v[1]),
            1e-3,
            1e-4,
        ),
        check_op(
            "linear",
            &[
                rand_tensor(&[3, 4], seed),
                rand_tensor(&[2, 4], seed + 1),
                rand_tensor(&[2], seed + 2),
            ],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
            1e-3,
            1e-4,
        ),
        check_op(
            "mse_loss",
            &[rand_tensor(&[3, 2], seed), rand_tensor(&[3, 2], seed + 1)],
            |g, v| g.mse_loss(v[0], v[1]),
            1e-3,
            1e-4,
        ),
    ]
    .into_iter()
    .collect()
}
