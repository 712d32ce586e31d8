//! Distribution heads, log-densities, reparameterized sampling and KLs.
//!
//! All graph operations return per-example values shaped `[batch, 1]`;
//! averaging over the batch happens in the bounds.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Means of Bernoulli and categorical heads are clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Added to every softplus variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(mean, diag(var))`
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub var: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Bernoulli {
    pub mean: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Categorical {
    pub mean: Var,
}

/// Gaussian emission with unit variance.
#[derive(Clone, Copy, Debug)]
pub struct FixedVarGaussian {
    pub mean: Var,
}

/// `N(0, I)` of a given dimensionality.
#[derive(Clone, Copy, Debug)]
pub struct StdNormalPrior {
    pub dim: usize,
}

/// Observation model of one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmissionKind {
    Bernoulli,
    Categorical,
    Gaussian,
}

impl EmissionKind {
    pub fn name(self) -> &'static str {
        match self {
            EmissionKind::Bernoulli => "bernoulli",
            EmissionKind::Categorical => "categorical",
            EmissionKind::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bernoulli" => Some(EmissionKind::Bernoulli),
            "categorical" => Some(EmissionKind::Categorical),
            "gaussian" => Some(EmissionKind::Gaussian),
            _ => None,
        }
    }
}

/// Decoder output for one modality.
#[derive(Clone, Copy, Debug)]
pub enum Emission {
    Bernoulli(Bernoulli),
    Categorical(Categorical),
    Gaussian(FixedVarGaussian),
}

impl Emission {
    pub fn mean(&self) -> Var {
        match self {
            Emission::Bernoulli(d) => d.mean,
            Emission::Categorical(d) => d.mean,
            Emission::Gaussian(d) => d.mean,
        }
    }

    pub fn kind(&self) -> EmissionKind {
        match self {
            Emission::Bernoulli(_) => EmissionKind::Bernoulli,
            Emission::Categorical(_) => EmissionKind::Categorical,
            Emission::Gaussian(_) => EmissionKind::Gaussian,
        }
    }

    pub fn log_prob<T: Real>(&self, g: &mut Graph<T>, value: Var) -> Result<Var> {
        match self {
            Emission::Bernoulli(d) => d.log_prob(g, value),
            Emission::Categorical(d) => d.log_prob(g, value),
            Emission::Gaussian(d) => d.log_prob(g, value),
        }
    }
}

fn check_same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) == g.shape(b) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )))
    }
}

impl Bernoulli {
    pub fn log_prob<T: Real>(&self, g: &mut Graph<T>, value: Var) -> Result<Var> {
        check_same_shape(g, self.mean, value, "bernoulli log_prob")?;
        let x = g.value(value);
        if let Some(bad) = x.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
            return Err(Error::Support(format!("bernoulli value {bad} is not 0 or 1")));
        }
        let one_minus_x = g.constant(x.map(|v| T::one() - v));
        let mu = g.clamp(self.mean, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let log_mu = g.log(mu)?;
        let neg_mu = g.neg(mu)?;
        let one_minus_mu = g.add_scalar(neg_mu, 1.0)?;
        let log_one_minus_mu = g.log(one_minus_mu)?;
        let on = g.mul(value, log_mu)?;
        let off = g.mul(one_minus_x, log_one_minus_mu)?;
        let both = g.add(on, off)?;
        g.sum_last(both)
    }
}

impl Categorical {
    pub fn log_prob<T: Real>(&self, g: &mut Graph<T>, value: Var) -> Result<Var> {
        check_same_shape(g, self.mean, value, "categorical log_prob")?;
        let (_, cols) = g.value(value).dims2()?;
        for row in g.value(value).data().chunks_exact(cols) {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != cols {
                return Err(Error::Support("categorical value is not one-hot".into()));
            }
        }
        let mu = g.clamp(self.mean, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let log_mu = g.log(mu)?;
        let picked = g.mul(value, log_mu)?;
        g.sum_last(picked)
    }
}

impl FixedVarGaussian {
    pub fn log_prob<T: Real>(&self, g: &mut Graph<T>, value: Var) -> Result<Var> {
        check_same_shape(g, self.mean, value, "gaussian log_prob")?;
        let dim = g.value(value).dims2()?.1 as f64;
        let diff = g.sub(value, self.mean)?;
        let sq = g.square(diff)?;
        let total = g.sum_last(sq)?;
        let scaled = g.scale(total, -0.5)?;
        g.add_scalar(scaled, -0.5 * dim * LN_2PI)
    }
}

impl DiagGaussian {
    pub fn log_prob<T: Real>(&self, g: &mut Graph<T>, value: Var) -> Result<Var> {
        check_same_shape(g, self.mean, value, "gaussian log_prob")?;
        let dim = g.value(value).dims2()?.1 as f64;
        let diff = g.sub(value, self.mean)?;
        let sq = g.square(diff)?;
        let maha = g.div(sq, self.var)?;
        let log_var = g.log(self.var)?;
        let inner = g.add(maha, log_var)?;
        let total = g.sum_last(inner)?;
        let scaled = g.scale(total, -0.5)?;
        g.add_scalar(scaled, -0.5 * dim * LN_2PI)
    }

    /// `z = mean + sqrt(var) * noise`; `noise` is constant data.
    pub fn rsample<T: Real>(&self, g: &mut Graph<T>, noise: Var) -> Result<Var> {
        check_same_shape(g, self.mean, noise, "rsample")?;
        let std = g.sqrt(self.var)?;
        let scaled = g.mul(std, noise)?;
        g.add(self.mean, scaled)
    }
}

impl StdNormalPrior {
    /// Materializes the prior as constant `DiagGaussian` parameters.
    pub fn params<T: Real>(&self, g: &mut Graph<T>, rows: usize) -> DiagGaussian {
        DiagGaussian {
            mean: g.constant(Tensor::zeros(&[rows, self.dim])),
            var: g.constant(Tensor::full(&[rows, self.dim], T::one())),
        }
    }
}

/// `KL(q || N(0, I)) = 0.5 * sum(mu^2 + var - 1 - ln var)`
pub fn kl_to_std_normal<T: Real>(g: &mut Graph<T>, q: &DiagGaussian) -> Result<Var> {
    let mu2 = g.square(q.mean)?;
    let log_var = g.log(q.var)?;
    let a = g.add(mu2, q.var)?;
    let b = g.sub(a, log_var)?;
    let c = g.add_scalar(b, -1.0)?;
    let total = g.sum_last(c)?;
    g.scale(total, 0.5)
}

/// `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gaussians<T: Real>(g: &mut Graph<T>, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    check_same_shape(g, q.mean, p.mean, "kl_diag_gaussians")?;
    check_same_shape(g, q.var, p.var, "kl_diag_gaussians")?;
    let log_p = g.log(p.var)?;
    let log_q = g.log(q.var)?;
    let log_ratio = g.sub(log_p, log_q)?;
    let diff = g.sub(q.mean, p.mean)?;
    let diff2 = g.square(diff)?;
    let num = g.add(q.var, diff2)?;
    let frac = g.div(num, p.var)?;
    let inner = g.add(log_ratio, frac)?;
    let inner = g.add_scalar(inner, -1.0)?;
    let total = g.sum_last(inner)?;
    g.scale(total, 0.5)
}

/// Standard-normal noise, one independent stream per row.
pub fn normal_noise<T: Real, R: Rng>(rngs: &mut [R], cols: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rngs.len() * cols);
    for rng in rngs.iter_mut() {
        for _ in 0..cols {
            let e: f64 = StandardNormal.sample(rng);
            data.push(T::from_f64_lossy(e));
        }
    }
    Tensor::from_parts(vec![rngs.len(), cols], data)
}

/// Standard-normal noise from a single stream.
pub fn normal_noise_single<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(e)
        })
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Draws one observation per row from an emission with the given means.
pub fn sample_emission<T: Real, R: Rng>(kind: EmissionKind, mean: &Tensor<T>, rngs: &mut [R]) -> Result<Tensor<T>> {
    let (rows, cols) = mean.dims2()?;
    if rows != rngs.len() {
        return Err(Error::shape(format!("{rows} rows but {} random streams", rngs.len())));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for (row, rng) in mean.data().chunks_exact(cols).zip(rngs.iter_mut()) {
        match kind {
            EmissionKind::Bernoulli => {
                for &p in row {
                    let u: f64 = rng.random();
                    out.push(if u < p.to_f64_lossy() { T::one() } else { T::zero() });
                }
            }
            EmissionKind::Categorical => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = cols - 1;
                for (k, &p) in row.iter().enumerate() {
                    acc += p.to_f64_lossy();
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                out.extend((0..cols).map(|k| if k == pick { T::one() } else { T::zero() }));
            }
            EmissionKind::Gaussian => {
                for &m in row {
                    let e: f64 = StandardNormal.sample(rng);
                    out.push(T::from_f64_lossy(m.to_f64_lossy() + e));
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}
