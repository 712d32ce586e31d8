//! Built-in oracle suite: gradient checks against finite differences, Monte
//! Carlo checks of the closed-form KLs, and a quadrature check of the
//! conditional log-likelihood estimator.
//!
//! Run by the `selftest` command; a build with a broken backward rule fails it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{finite_diff_check, finite_diff_report, FdReport, Graph, Tensor, Var};
use crate::dists::{kl_diag_gaussians, normal_noise_single, DiagGaussian, EmissionKind};
use crate::error::{Error, Result};
use crate::infer::{cond_loglik, CllOptions};
use crate::models::{BoundOptions, Direction, Model, ModelKind, ModelSpec, Role};
use crate::nets::Bound;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_result(name: String, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
        }
    }
}

/// Tolerance on relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], v).expect("sizes agree")
}

/// Random values bounded away from zero, with random sign.
fn random_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let v: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], v).expect("sizes agree")
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Finite-difference error of one primitive on a random `rows x cols` input.
pub fn check_primitive(name: &str, rows: usize, cols: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, f): (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>) =
        match name {
            "matmul" => {
                let inner = 1 + rows % 4 + cols % 3;
                (
                    vec![random(&mut rng, rows, inner, -1.0, 1.0), random(&mut rng, inner, cols, -1.0, 1.0)],
                    Box::new(move |g, p| {
                        let y = g.matmul(p[0], p[1])?;
                        weighted_sum(g, y, seed)
                    }),
                )
            }
            "add_row" => (
                vec![random(&mut rng, rows, cols, -1.0, 1.0), random(&mut rng, 1, cols, -1.0, 1.0)],
                Box::new(move |g, p| {
                    let y = g.add_row(p[0], p[1])?;
                    weighted_sum(g, y, seed)
                }),
            ),
            "mul" | "add" | "sub" | "div" => {
                let op = name.to_string();
                (
                    vec![random(&mut rng, rows, cols, -1.0, 1.0), random(&mut rng, rows, cols, 0.5, 2.0)],
                    Box::new(move |g, p| {
                        let y = match op.as_str() {
                            "mul" => g.mul(p[0], p[1])?,
                            "add" => g.add(p[0], p[1])?,
                            "sub" => g.sub(p[0], p[1])?,
                            _ => g.div(p[0], p[1])?,
                        };
                        weighted_sum(g, y, seed)
                    }),
                )
            }
            "log" | "sqrt" => {
                let op = name.to_string();
                (
                    vec![random(&mut rng, rows, cols, 0.3, 3.0)],
                    Box::new(move |g, p| {
                        let y = if op == "log" { g.log(p[0])? } else { g.sqrt(p[0])? };
                        weighted_sum(g, y, seed)
                    }),
                )
            }
            "clamp" => (
                vec![random_away_from_zero(&mut rng, rows, cols)],
                Box::new(move |g, p| {
                    // bounds at +-1.03 keep perturbations off the kinks
                    let y = g.clamp(p[0], -1.03, 1.03)?;
                    weighted_sum(g, y, seed)
                }),
            ),
            "concat" => (
                vec![random(&mut rng, rows, cols, -1.0, 1.0), random(&mut rng, rows, 1 + seed as usize % 3, -1.0, 1.0)],
                Box::new(move |g, p| {
                    let y = g.concat(&[p[0], p[1]])?;
                    weighted_sum(g, y, seed)
                }),
            ),
            "slice" => {
                let start = seed as usize % cols;
                let len = cols - start;
                (
                    vec![random(&mut rng, rows, cols, -1.0, 1.0)],
                    Box::new(move |g, p| {
                        let y = g.slice(p[0], start, len)?;
                        weighted_sum(g, y, seed)
                    }),
                )
            }
            unary => {
                let op = unary.to_string();
                (
                    vec![random_away_from_zero(&mut rng, rows, cols)],
                    Box::new(move |g, p| {
                        let y = match op.as_str() {
                            "exp" => g.exp(p[0])?,
                            "square" => g.square(p[0])?,
                            "relu" => g.relu(p[0])?,
                            "sigmoid" => g.sigmoid(p[0])?,
                            "softplus" => g.softplus(p[0])?,
                            "softmax_rows" => g.softmax_rows(p[0])?,
                            "neg" => g.neg(p[0])?,
                            "scale" => g.scale(p[0], -1.7)?,
                            "add_scalar" => g.add_scalar(p[0], 0.3)?,
                            "sum_last" => g.sum_last(p[0])?,
                            "sum" => {
                                let s = g.sum(p[0])?;
                                return g.square(s);
                            }
                            "mean" => {
                                let s = g.mean(p[0])?;
                                return g.square(s);
                            }
                            other => return Err(Error::Input(format!("unknown primitive {other}"))),
                        };
                        weighted_sum(g, y, seed)
                    }),
                )
            }
        };
    finite_diff_check(f, &params, 1e-5)
}

/// Every differentiable primitive of the tape.
pub const PRIMITIVES: &[&str] = &[
    "matmul", "add_row", "add", "sub", "mul", "div", "exp", "log", "square", "sqrt", "relu",
    "sigmoid", "softplus", "clamp", "softmax_rows", "concat", "slice", "sum", "mean",
    "sum_last", "neg", "scale", "add_scalar",
];
/// Six Bernoulli pixels, three classes, a 2-d latent and small networks.
pub fn toy_spec(kind: ModelKind, direction: Direction) -> ModelSpec {
    let mut spec = ModelSpec::new(kind, (6, EmissionKind::Bernoulli), (3, EmissionKind::Categorical), 2)
        .with_direction(direction);
    for role in Role::ALL {
        let arch = match role {
            Role::EncXW => "(D4R, D3R)-D5R",
            Role::TailH2 => "D3-D4R",
            _ => "D5R",
        };
        spec = spec.with_arch(role, arch).expect("toy architectures parse");
    }
    spec
}

fn toy_batch(rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let x: Vec<f64> = (0..batch * 6).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0; batch * 3];
    for i in 0..batch {
        w[i * 3 + rng.random_range(0..3)] = 1.0;
    }
    Ok((Tensor::from_f64(batch, 6, &x)?, Tensor::from_f64(batch, 3, &w)?))
}

/// Finite-difference report for the full bound of `kind` with frozen noise.
/// Odd seeds use the `w|x` direction.
pub fn bound_gradient_report(kind: ModelKind, seed: u64) -> Result<FdReport> {
    let direction = if seed % 2 == 1 { Direction::WGivenX } else { Direction::XGivenW };
    let mut model = Model::<f64>::new(toy_spec(kind, direction), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3000);
    // random biases keep preactivations away from the relu kink at 0
    for t in model.params.tensors_mut() {
        if t.rows() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let (x, w) = toy_batch(&mut rng, 3)?;
    let noise: Vec<Tensor<f64>> =
        (0..model.noise_count(2)).map(|_| normal_noise_single(&mut rng, 3, model.spec.latent_dim)).collect();
    let opts = BoundOptions { beta: 0.7, samples: 2, ..Default::default() };
    finite_diff_report(
        |g, vars| {
            let p = Bound(vars.to_vec());
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            Ok(model.objective(g, &p, xv, wv, &noise, &opts)?.loss)
        },
        model.params.tensors(),
        1e-5,
    )
}

/// Monte Carlo check of the Gaussian KL: returns `(closed form, estimate,
/// standard error)` from `samples` draws of `z ~ q`.
pub fn kl_monte_carlo(seed: u64, samples: usize) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let mut draw = |lo: f64, hi: f64| -> Result<Tensor<f64>> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_f64(1, dim, &v)
    };
    let (qm, qv, pm, pv) = (draw(-1.0, 1.0)?, draw(0.3, 2.0)?, draw(-1.0, 1.0)?, draw(0.3, 2.0)?);

    let mut g = Graph::<f64>::new();
    let q = DiagGaussian { mean: g.constant(qm.clone()), var: g.constant(qv.clone()) };
    let p = DiagGaussian { mean: g.constant(pm.clone()), var: g.constant(pv.clone()) };
    let kl = kl_diag_gaussians(&mut g, &q, &p)?;
    let closed = g.value(kl).item();

    let log_n = |z: f64, m: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (z - m).powi(2) / v);
    let eps: Tensor<f64> = normal_noise_single(&mut rng, samples, dim);
    let (mut sum, mut sq) = (0.0, 0.0);
    for row in 0..samples {
        let mut lr = 0.0;
        for d in 0..dim {
            let (m, v) = (qm.data()[d], qv.data()[d]);
            let z = m + v.sqrt() * eps.row(row)[d];
            lr += log_n(z, m, v) - log_n(z, pm.data()[d], pv.data()[d]);
        }
        sum += lr;
        sq += lr * lr;
    }
    let n = samples as f64;
    let mean = sum / n;
    let se = ((sq / n - mean * mean).max(0.0) / n).sqrt();
    Ok((closed, mean, se))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `E[f(z)]` for `z ~ N(m, v)` by the trapezoid rule over +-12 sd.
fn gauss_expect(m: f64, v: f64, points: usize, f: impl Fn(f64) -> f64) -> f64 {
    let s = v.sqrt();
    let h = 24.0 * s / (points - 1) as f64;
    let mut acc = 0.0;
    for i in 0..points {
        let z = m - 12.0 * s + i as f64 * h;
        let wgt = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
        acc += wgt * (-(z - m).powi(2) / (2.0 * v)).exp() * f(z);
    }
    acc * h / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Conditional log-likelihood of a scalar jmvae-kl model against quadrature:
/// returns `(estimate, oracle, standard error)`.
pub fn estimator_quadrature(seed: u64, items: usize) -> Result<(f64, f64, f64)> {
    let mut spec = ModelSpec::new(ModelKind::JmvaeKl, (1, EmissionKind::Bernoulli), (2, EmissionKind::Categorical), 1);
    for role in Role::ALL {
        spec = spec.with_arch(role, "D1")?;
    }
    let mut model = Model::<f64>::new(spec, 0)?;
    for (name, values) in [
        ("enc_w.t.l0.w", &[1.0, -1.0][..]),
        ("enc_w.t.l0.b", &[0.0]),
        ("enc_w.mu.w", &[0.8]),
        ("enc_w.mu.b", &[0.2]),
        ("enc_w.var.w", &[0.3]),
        ("enc_w.var.b", &[-0.2]),
        ("dec_x.t.l0.w", &[1.0]),
        ("dec_x.t.l0.b", &[0.0]),
        ("dec_x.mu.w", &[1.5]),
        ("dec_x.mu.b", &[-0.4]),
    ] {
        let id = model.params.find(name).ok_or_else(|| Error::Input(format!("missing {name}")))?;
        model.params.get_mut(id).data_mut().copy_from_slice(values);
    }
    // item i: class i % 2, pixel on for i % 4 < 2
    let xs: Vec<f64> = (0..items).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
    let mut ws = vec![0.0; items * 2];
    for i in 0..items {
        ws[i * 2 + i % 2] = 1.0;
    }
    let x = Tensor::from_f64(items, 1, &xs)?;
    let w = Tensor::from_f64(items, 2, &ws)?;
    let ids: Vec<u64> = (0..items as u64).collect();
    let est = cond_loglik(&model, &x, &w, &ids, &CllOptions { samples: 4, seed, ..CllOptions::default() })?;

    let mut oracle = 0.0;
    for i in 0..items.min(4) {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let (m, v) = (0.2 + 0.8 * sign, (-0.2 + 0.3 * sign as f64).exp().ln_1p() + 1e-6);
        let xv = xs[i];
        oracle += gauss_expect(m, v, 4001, |z| {
            let p = sigmoid(1.5 * z - 0.4).clamp(1e-7, 1.0 - 1e-7);
            xv * p.ln() + (1.0 - xv) * (1.0 - p).ln()
        });
    }
    let pattern = items.min(4) as f64;
    Ok((est.value, oracle / pattern, est.std_error))
}

/// Runs every check.
pub fn run() -> Vec<Check> {
    let mut checks = Vec::new();
    for name in PRIMITIVES {
        let r = (0..20u64)
            .map(|case| {
                let rows = 1 + (case as usize * 7) % 5;
                let cols = 1 + (case as usize * 3) % 6;
                check_primitive(name, rows, cols, 1000 + case)
            })
            .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)));
        checks.push(Check::from_result(
            format!("gradient {name}"),
            r.map(|e| (e < GRADIENT_TOLERANCE, format!("max relative error {e:.3e} over 20 shapes"))),
        ));
    }
    for kind in ModelKind::ALL {
        let r = (0..2u64).try_fold(0.0f64, |acc, seed| bound_gradient_report(kind, seed).map(|r| acc.max(r.max_error)));
        checks.push(Check::from_result(
            format!("gradient bound {kind}"),
            r.map(|e| (e < GRADIENT_TOLERANCE, format!("max relative error {e:.3e}"))),
        ));
    }
    for seed in 0..3 {
        let r = kl_monte_carlo(seed, 200_000)
            .map(|(c, m, se)| ((c - m).abs() < 4.0 * se, format!("closed form {c:.5}, estimate {m:.5} +- {se:.5}")));
        checks.push(Check::from_result(format!("kl monte carlo {seed}"), r));
    }
    let r = estimator_quadrature(1, 10_000)
        .map(|(e, o, se)| ((e - o).abs() < 3.0 * se, format!("estimate {e:.5} +- {se:.5}, quadrature {o:.5}")));
    checks.push(Check::from_result("estimator quadrature".into(), r));
    checks
}

/// `true` when every check passed.
pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{set_fault, Fault};

    #[test]
    fn suite_passes() {
        let checks = run();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() > 30);
    }

    #[test]
    fn suite_fails_with_a_corrupted_backward_rule() {
        set_fault(Some(Fault::SigmoidBackward));
        let checks = run();
        set_fault(None);
        assert!(!all_passed(&checks));
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"gradient sigmoid"), "{failed:?}");
    }
}
