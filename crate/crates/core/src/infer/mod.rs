//! Missing-modality complement, conditional log-likelihood estimators,
//! latent extraction and diagnostics.
//!
//! Every function processes a batch of items. Randomness comes from one
//! stream per item, derived from the run seed and the item id, so results do
//! not depend on how items are batched.

mod io;

pub use io::{latent_csv, pgm, pgm_grid};

use crate::data::{binarize_items, BimodalDataset};
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::dists::{normal_noise, sample_emission, DiagGaussian, Emission, EmissionKind};
use crate::error::{Error, Result};
use crate::models::{Direction, Model, ModelKind};
use crate::nets::Bound;
use crate::seeds::{self, tag, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    X,
    W,
}

impl Modality {
    /// The modality generated in `direction`.
    pub fn target_of(direction: Direction) -> Self {
        match direction {
            Direction::XGivenW => Modality::X,
            Direction::WGivenX => Modality::W,
        }
    }
}

/// How the missing modality is initialized before the first chain step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Zero,
    /// A sample from the model's marginal: `z ~ N(0, I)` then the decoder.
    Prior,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(InitMode::Zero),
            "prior" => Ok(InitMode::Prior),
            _ => Err(Error::config(format!("unknown init mode {s:?}"))),
        }
    }
}

/// One random stream per item.
pub fn item_rngs(seed: u64, stream: u64, items: &[u64]) -> Vec<Rng> {
    items.iter().map(|&i| seeds::rng(seed, &[stream, i])).collect()
}

/// Forward-only evaluation context with frozen parameters.
struct Ctx<'m, T: Real> {
    model: &'m Model<T>,
    g: Graph<T>,
    p: Bound,
}

impl<'m, T: Real> Ctx<'m, T> {
    fn new(model: &'m Model<T>) -> Self {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        Self { model, g, p }
    }

    fn c(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    fn v(&self, v: Var) -> Tensor<T> {
        self.g.value(v).clone()
    }

    fn joint(&mut self, x: Var, w: Var) -> Result<(DiagGaussian, Var)> {
        self.model.encode_joint(&mut self.g, &self.p, x, w)
    }

    fn top(&mut self, h1: Var) -> Result<DiagGaussian> {
        self.model.encode_top(&mut self.g, &self.p, h1)
    }

    fn decode(&mut self, m: Modality, z: Var, cond: Option<Var>) -> Result<Emission> {
        match m {
            Modality::X => self.model.decode_x(&mut self.g, &self.p, z, cond),
            Modality::W => self.model.decode_w(&mut self.g, &self.p, z, cond),
        }
    }

    fn rsample(&mut self, q: &DiagGaussian, rngs: &mut [Rng]) -> Result<Var> {
        let cols = self.g.shape(q.mean)[1];
        let e = normal_noise(rngs, cols);
        let e = self.g.constant(e);
        q.rsample(&mut self.g, e)
    }

    fn std_normal(&mut self, rngs: &mut [Rng]) -> Var {
        let e = normal_noise(rngs, self.model.spec.latent_dim);
        self.g.constant(e)
    }

    fn sample(&mut self, m: Modality, d: &Emission, rngs: &mut [Rng]) -> Result<Tensor<T>> {
        let kind = match m {
            Modality::X => self.model.spec.x_emission,
            Modality::W => self.model.spec.w_emission,
        };
        sample_emission(kind, self.g.value(d.mean()), rngs)
    }

    fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::X => self.model.spec.x_dim,
            Modality::W => self.model.spec.w_dim,
        }
    }

    /// `z` (or `z1`) drawn from the generative prior.
    fn prior_latent(&mut self, rngs: &mut [Rng]) -> Result<Var> {
        let z = self.std_normal(rngs);
        if self.model.kind() == ModelKind::JmvaeH {
            let p1 = self.model.prior_z1(&mut self.g, &self.p, z)?;
            return self.rsample(&p1, rngs);
        }
        Ok(z)
    }

    /// Encoder input pair with `missing` replaced by `fill`.
    fn pair(&self, missing: Modality, fill: Var, observed: Var) -> (Var, Var) {
        match missing {
            Modality::X => (fill, observed),
            Modality::W => (observed, fill),
        }
    }
}

/// One entry of a complement chain.
#[derive(Clone, Debug)]
pub struct Step<T> {
    pub iter: usize,
    /// Current value of the missing modality.
    pub estimate: Tensor<T>,
    /// Latent sample that produced `estimate` (absent at initialization).
    pub latent: Option<Tensor<T>>,
}

/// Chain of `T + 1` entries, initialization first.
#[derive(Clone, Debug)]
pub struct ComplementTrajectory<T> {
    pub missing: Modality,
    pub steps: Vec<Step<T>>,
    /// Decoder mean at the final step.
    pub final_mean: Tensor<T>,
}

impl<T: Real> ComplementTrajectory<T> {
    pub fn last(&self) -> &Tensor<T> {
        &self.steps.last().expect("trajectory is never empty").estimate
    }
}

fn require_chain_model<T: Real>(model: &Model<T>) -> Result<()> {
    match model.kind() {
        ModelKind::Jmvae | ModelKind::JmvaeH => Ok(()),
        other => Err(Error::UnsupportedOperation(format!(
            "the iterative complement chain applies to jmvae and jmvae-h, not {other}"
        ))),
    }
}

fn chain_in<T: Real>(
    ctx: &mut Ctx<'_, T>,
    observed: Var,
    missing: Modality,
    steps: usize,
    init: InitMode,
    rngs: &mut [Rng],
    record: bool,
) -> Result<ComplementTrajectory<T>> {
    if steps == 0 {
        return Err(Error::config("chain length must be at least 1"));
    }
    let rows = ctx.g.shape(observed)[0];
    let mut current = match init {
        InitMode::Zero => Tensor::zeros(&[rows, ctx.dim(missing)]),
        InitMode::Prior => {
            let z = ctx.prior_latent(rngs)?;
            let d = ctx.decode(missing, z, None)?;
            ctx.sample(missing, &d, rngs)?
        }
    };
    let mut trajectory = vec![Step { iter: 0, estimate: current.clone(), latent: None }];
    let mut final_mean = current.clone();
    for t in 1..=steps {
        let fill = ctx.c(current);
        let (a, b) = ctx.pair(missing, fill, observed);
        let (q, _) = ctx.joint(a, b)?;
        let z = ctx.rsample(&q, rngs)?;
        let d = ctx.decode(missing, z, None)?;
        current = ctx.sample(missing, &d, rngs)?;
        if t == steps {
            final_mean = ctx.v(d.mean());
        }
        if record || t == steps {
            trajectory.push(Step { iter: t, estimate: current.clone(), latent: Some(ctx.v(z)) });
        }
    }
    Ok(ComplementTrajectory { missing, steps: trajectory, final_mean })
}

/// Runs the iterative sampling chain `z ~ q(z|x_t, w)`, `x_{t+1} ~ p(x|z)`
/// (or the same with `w` missing) for `steps` iterations.
pub fn complement<T: Real>(
    model: &Model<T>,
    observed: &Tensor<T>,
    missing: Modality,
    steps: usize,
    init: InitMode,
    rngs: &mut [Rng],
) -> Result<ComplementTrajectory<T>> {
    require_chain_model(model)?;
    check_rows(observed, rngs.len())?;
    let mut ctx = Ctx::new(model);
    let obs = ctx.c(observed.clone());
    chain_in(&mut ctx, obs, missing, steps, init, rngs, true)
}

fn check_rows<T: Real>(t: &Tensor<T>, rows: usize) -> Result<()> {
    let (r, _) = t.dims2()?;
    if r != rows {
        return Err(Error::shape(format!("{r} rows but {rows} items")));
    }
    Ok(())
}

/// Conditional log-likelihood estimate in nats per item.
#[derive(Clone, Debug, PartialEq)]
pub struct CllEstimate {
    pub value: f64,
    /// Monte Carlo samples per item (per level for the nested estimator).
    pub samples: usize,
    /// Monte Carlo standard error of `value`.
    pub std_error: f64,
    /// Standard deviation of the per-item estimates.
    pub item_spread: f64,
    pub per_item: Vec<f64>,
    pub per_item_se: Vec<f64>,
    /// Set for the nested estimator, which sits below the single-level one.
    pub hierarchical: bool,
}

impl CllEstimate {
    fn from_items(per_item: Vec<f64>, per_item_se: Vec<f64>, samples: usize, hierarchical: bool) -> Self {
        let n = per_item.len() as f64;
        let value = per_item.iter().sum::<f64>() / n;
        let std_error = per_item_se.iter().map(|s| s * s).sum::<f64>().sqrt() / n;
        let item_spread = if per_item.len() > 1 {
            (per_item.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { value, samples, std_error, item_spread, per_item, per_item_se, hierarchical }
    }

    /// Combines estimates over disjoint item batches.
    pub fn concat(parts: Vec<CllEstimate>) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Input("no items".into()))?;
        let (samples, hierarchical) = (first.samples, first.hierarchical);
        let mut items = Vec::new();
        let mut ses = Vec::new();
        for p in parts {
            items.extend(p.per_item);
            ses.extend(p.per_item_se);
        }
        Ok(Self::from_items(items, ses, samples, hierarchical))
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    // shifted by the first value so identical samples give exactly zero spread
    let v0 = values[0];
    let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Settings shared by the estimators.
#[derive(Clone, Copy, Debug)]
pub struct CllOptions {
    pub direction: Direction,
    /// `N`
    pub samples: usize,
    /// Chain length `T` for jmvae and jmvae-h.
    pub chain_steps: usize,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for CllOptions {
    fn default() -> Self {
        Self { direction: Direction::XGivenW, samples: 10, chain_steps: 10, init: InitMode::Zero, seed: 0 }
    }
}

/// Single-level estimate `(1/N) sum_l log p(target | z_l)`; for jmvae-h this
/// dispatches to [`cond_loglik_hier`].
///
/// `x` and `w` hold both modalities of each item; the target modality is only
/// used as the evaluation point.
pub fn cond_loglik<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    items: &[u64],
    opts: &CllOptions,
) -> Result<CllEstimate> {
    if model.kind() == ModelKind::JmvaeH {
        return cond_loglik_hier(model, x, w, items, opts);
    }
    check_inputs(x, w, items, opts)?;
    let target_m = Modality::target_of(opts.direction);
    let mut ctx = Ctx::new(model);
    let (xv, wv) = (ctx.c(x.clone()), ctx.c(w.clone()));
    let (target, cond) = match target_m {
        Modality::X => (xv, wv),
        Modality::W => (wv, xv),
    };
    let mut est = item_rngs(opts.seed, tag::ITEM_ESTIMATE, items);
    let posterior = match model.kind() {
        ModelKind::JmvaeKl => Some(match target_m {
            Modality::X => model.encode_w(&mut ctx.g, &ctx.p, cond)?,
            Modality::W => model.encode_x(&mut ctx.g, &ctx.p, cond)?,
        }),
        ModelKind::Jmvae => {
            let mut chain = item_rngs(opts.seed, tag::ITEM_CHAIN, items);
            let tr = chain_in(&mut ctx, cond, target_m, opts.chain_steps, opts.init, &mut chain, false)?;
            let fill = ctx.c(tr.last().clone());
            let (a, b) = ctx.pair(target_m, fill, cond);
            Some(ctx.joint(a, b)?.0)
        }
        ModelKind::Cvae => {
            if model.spec.direction != opts.direction {
                return Err(Error::UnsupportedOperation(format!(
                    "this cvae models {}, not {}",
                    model.spec.direction.name(),
                    opts.direction.name()
                )));
            }
            None
        }
        other => {
            return Err(Error::UnsupportedOperation(format!("{other} has no conditional likelihood")));
        }
    };
    let rows = items.len();
    let mut values = vec![Vec::with_capacity(opts.samples); rows];
    for _ in 0..opts.samples {
        let z = match &posterior {
            Some(q) => ctx.rsample(q, &mut est)?,
            None => ctx.std_normal(&mut est),
        };
        let d = if model.kind() == ModelKind::Cvae {
            ctx.decode(target_m, z, Some(cond))?
        } else {
            ctx.decode(target_m, z, None)?
        };
        let lp = d.log_prob(&mut ctx.g, target)?;
        for (i, v) in ctx.g.value(lp).data().iter().enumerate() {
            values[i].push(v.to_f64_lossy());
        }
    }
    let (per_item, se): (Vec<f64>, Vec<f64>) = values.iter().map(|v| mean_and_se(v)).unzip();
    Ok(CllEstimate::from_items(per_item, se, opts.samples, false))
}

fn check_inputs<T: Real>(x: &Tensor<T>, w: &Tensor<T>, items: &[u64], opts: &CllOptions) -> Result<()> {
    if opts.samples == 0 {
        return Err(Error::config("eval.samples must be at least 1"));
    }
    if items.is_empty() {
        return Err(Error::Input("no items to evaluate".into()));
    }
    check_rows(x, items.len())?;
    check_rows(w, items.len())
}

/// Nested estimate for jmvae-h: `z2 ~ q(z2 | x_T, w)` from the chain's final
/// state, then `z1 ~ p(z1 | z2)`, averaging `log p(target | z1)` over `N x N`
/// draws.
pub fn cond_loglik_hier<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    items: &[u64],
    opts: &CllOptions,
) -> Result<CllEstimate> {
    if model.kind() != ModelKind::JmvaeH {
        return Err(Error::UnsupportedOperation(format!("nested estimator needs jmvae-h, not {}", model.kind())));
    }
    check_inputs(x, w, items, opts)?;
    let target_m = Modality::target_of(opts.direction);
    let mut ctx = Ctx::new(model);
    let (xv, wv) = (ctx.c(x.clone()), ctx.c(w.clone()));
    let (target, cond) = match target_m {
        Modality::X => (xv, wv),
        Modality::W => (wv, xv),
    };
    let mut chain = item_rngs(opts.seed, tag::ITEM_CHAIN, items);
    let tr = chain_in(&mut ctx, cond, target_m, opts.chain_steps, opts.init, &mut chain, false)?;
    let fill = ctx.c(tr.last().clone());
    let (a, b) = ctx.pair(target_m, fill, cond);
    let (_, h1) = ctx.joint(a, b)?;
    let q2 = ctx.top(h1)?;
    let mut est = item_rngs(opts.seed, tag::ITEM_ESTIMATE, items);
    nested_from_top(&mut ctx, &q2, target_m, target, opts.samples, &mut est)
}

fn nested_from_top<T: Real>(
    ctx: &mut Ctx<'_, T>,
    q2: &DiagGaussian,
    target_m: Modality,
    target: Var,
    n: usize,
    rngs: &mut [Rng],
) -> Result<CllEstimate> {
    let rows = rngs.len();
    let mut outer = vec![Vec::with_capacity(n); rows];
    for _ in 0..n {
        let z2 = ctx.rsample(q2, rngs)?;
        let p1 = ctx.model.prior_z1(&mut ctx.g, &ctx.p, z2)?;
        let mut inner = vec![0.0; rows];
        for _ in 0..n {
            let z1 = ctx.rsample(&p1, rngs)?;
            let d = ctx.decode(target_m, z1, None)?;
            let lp = d.log_prob(&mut ctx.g, target)?;
            for (acc, v) in inner.iter_mut().zip(ctx.g.value(lp).data()) {
                *acc += v.to_f64_lossy();
            }
        }
        for (o, s) in outer.iter_mut().zip(inner) {
            o.push(s / n as f64);
        }
    }
    let (per_item, se): (Vec<f64>, Vec<f64>) = outer.iter().map(|v| mean_and_se(v)).unzip();
    Ok(CllEstimate::from_items(per_item, se, n, true))
}

/// Nested estimate with an explicitly supplied `q(z2)`; exposed for
/// quadrature checks.
pub fn nested_estimate<T: Real>(
    model: &Model<T>,
    q2_mean: &Tensor<T>,
    q2_var: &Tensor<T>,
    target_m: Modality,
    target: &Tensor<T>,
    n: usize,
    rngs: &mut [Rng],
) -> Result<CllEstimate> {
    let mut ctx = Ctx::new(model);
    let q2 = DiagGaussian { mean: ctx.c(q2_mean.clone()), var: ctx.c(q2_var.clone()) };
    let t = ctx.c(target.clone());
    nested_from_top(&mut ctx, &q2, target_m, t, n, rngs)
}

/// Posterior statistics of the latent representation.
#[derive(Clone, Debug)]
pub struct LatentStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> LatentStats<T> {
    /// One draw `mean + sqrt(var) * eps` per row, row `i` using `rngs[i]`.
    pub fn sample(&self, rngs: &mut [Rng]) -> Result<Tensor<T>> {
        let (rows, cols) = self.mean.dims2()?;
        if rngs.len() != rows {
            return Err(Error::shape(format!("{} streams for {rows} rows", rngs.len())));
        }
        let eps: Tensor<T> = normal_noise(rngs, cols);
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.var.data())
            .zip(eps.data())
            .map(|((&m, &v), &e)| m + v.sqrt() * e)
            .collect();
        Tensor::new(vec![rows, cols], data)
    }

    /// Rows of `mean` as points, for [`collapse_score`].
    pub fn mean_points(&self) -> Vec<Vec<f64>> {
        rows_f64(&self.mean)
    }

    /// Rows of `sample` as points.
    pub fn sample_points(&self, rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        Ok(rows_f64(&self.sample(rngs)?))
    }
}

/// Encoder statistics given whichever modalities are present.
///
/// jmvae-kl uses its unimodal encoders. jmvae and jmvae-h feed zeros for the
/// missing modality when `chain_steps` is 0, otherwise the final state of a
/// chain of that length (streams derived from `seed` and `items`). jmvae-h
/// reports the top layer `z2`.
pub fn extract_latent<T: Real>(
    model: &Model<T>,
    x: Option<&Tensor<T>>,
    w: Option<&Tensor<T>>,
    chain_steps: usize,
    init: InitMode,
    seed: u64,
    items: &[u64],
) -> Result<LatentStats<T>> {
    let mut ctx = Ctx::new(model);
    let kind = model.kind();
    let rows = match (x, w) {
        (None, None) => return Err(Error::Input("extract_latent needs at least one modality".into())),
        (Some(t), _) | (None, Some(t)) => t.rows(),
    };
    let q = match (kind, x, w) {
        (ModelKind::Vae, Some(x), _) | (ModelKind::JmvaeKl, Some(x), None) => {
            let xv = ctx.c(x.clone());
            model.encode_x(&mut ctx.g, &ctx.p, xv)?
        }
        (ModelKind::JmvaeKl, None, Some(w)) => {
            let wv = ctx.c(w.clone());
            model.encode_w(&mut ctx.g, &ctx.p, wv)?
        }
        (ModelKind::Vae, None, _) => return Err(Error::UnsupportedOperation("vae encodes x only".into())),
        (ModelKind::Cvae, Some(_), None) | (ModelKind::Cvae, None, Some(_)) => {
            return Err(Error::UnsupportedOperation("cvae encodes both modalities".into()));
        }
        (_, x, w) => {
            let (xv, wv) = match (x, w) {
                (Some(x), Some(w)) => (ctx.c(x.clone()), ctx.c(w.clone())),
                (Some(obs), None) | (None, Some(obs)) => {
                    let missing = if w.is_none() { Modality::W } else { Modality::X };
                    let obs = ctx.c(obs.clone());
                    let fill = if chain_steps == 0 {
                        Tensor::zeros(&[rows, ctx.dim(missing)])
                    } else {
                        require_chain_model(model)?;
                        if items.len() != rows {
                            return Err(Error::shape(format!("{rows} rows but {} items", items.len())));
                        }
                        let mut rngs = item_rngs(seed, tag::ITEM_CHAIN, items);
                        chain_in(&mut ctx, obs, missing, chain_steps, init, &mut rngs, false)?.last().clone()
                    };
                    let fill = ctx.c(fill);
                    ctx.pair(missing, fill, obs)
                }
                (None, None) => unreachable!(),
            };
            let (q, h1) = ctx.joint(xv, wv)?;
            if kind == ModelKind::JmvaeH {
                ctx.top(h1)?
            } else {
                q
            }
        }
    };
    Ok(LatentStats { mean: ctx.v(q.mean), var: ctx.v(q.var) })
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.to_f64_lossy()).collect()).collect()
}

/// Between-class scatter over total scatter (traces), in `[0, 1]`.
///
/// Typically applied to posterior means with the image missing. A
/// deterministic encoder maps a label to a single point, so its score is 1
/// unless classes coincide; chain-based models spread each class through
/// the sampled complement.
pub fn collapse_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Input("collapse_score needs one label per point".into()));
    }
    let dim = points[0].len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut total = vec![0.0; dim];
    for (p, &c) in points.iter().zip(labels) {
        if p.len() != dim {
            return Err(Error::shape("points differ in dimension"));
        }
        counts[c] += 1;
        for d in 0..dim {
            sums[c][d] += p[d];
            total[d] += p[d];
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 || present.iter().any(|&c| counts[c] < 2) {
        return Err(Error::Input("collapse_score needs at least 2 classes with 2 points each".into()));
    }
    let n = points.len() as f64;
    let grand: Vec<f64> = total.iter().map(|s| s / n).collect();
    let scatter_total: f64 = points.iter().map(|p| p.iter().zip(&grand).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
    if scatter_total == 0.0 {
        return Ok(0.0);
    }
    let between: f64 = present
        .iter()
        .map(|&c| {
            let k = counts[c] as f64;
            k * sums[c].iter().zip(&grand).map(|(s, g)| (s / k - g).powi(2)).sum::<f64>()
        })
        .sum();
    Ok((between / scatter_total).clamp(0.0, 1.0))
}

fn require_kl<T: Real>(model: &Model<T>, what: &str) -> Result<()> {
    if model.kind() == ModelKind::JmvaeKl {
        Ok(())
    } else {
        Err(Error::UnsupportedOperation(format!("{what} needs jmvae-kl, not {}", model.kind())))
    }
}

/// Mean of `p(w | z)` at the mean of `q(z | x)`.
pub fn predict_w<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    require_kl(model, "predict_w")?;
    let mut ctx = Ctx::new(model);
    let xv = ctx.c(x.clone());
    let q = model.encode_x(&mut ctx.g, &ctx.p, xv)?;
    let d = ctx.decode(Modality::W, q.mean, None)?;
    Ok(ctx.v(d.mean()))
}

/// Mean of `p(x | z)` at the mean of `q(z | w)`.
pub fn reconstruct_from_w<T: Real>(model: &Model<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    require_kl(model, "reconstruct_from_w")?;
    let mut ctx = Ctx::new(model);
    let wv = ctx.c(w.clone());
    let q = model.encode_w(&mut ctx.g, &ctx.p, wv)?;
    let d = ctx.decode(Modality::X, q.mean, None)?;
    Ok(ctx.v(d.mean()))
}

/// Edited image `x + (x'_mean - x_mean)` where the means are reconstructions
/// from `w` and from `w_edited`.
pub fn shift_with_labels<T: Real>(model: &Model<T>, x: &Tensor<T>, w: &Tensor<T>, w_edited: &Tensor<T>) -> Result<Tensor<T>> {
    require_kl(model, "modality shift")?;
    let base = reconstruct_from_w(model, w)?;
    let edited = reconstruct_from_w(model, w_edited)?;
    let clamp = model.spec.x_emission == EmissionKind::Bernoulli;
    let data = x
        .data()
        .iter()
        .zip(base.data().iter().zip(edited.data()))
        .map(|(&xi, (&b, &e))| {
            let v = xi + (e - b);
            if clamp {
                v.max(T::zero()).min(T::one())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct ShiftResult<T> {
    /// `w` generated from `x`.
    pub w: Tensor<T>,
    pub w_edited: Tensor<T>,
    pub shifted: Tensor<T>,
}

/// Generates `w` from `x`, swaps the probabilities of classes `from` and
/// `to`, and shifts `x` by the change in the mean reconstruction.
pub fn modality_shift<T: Real>(model: &Model<T>, x: &Tensor<T>, from: usize, to: usize) -> Result<ShiftResult<T>> {
    require_kl(model, "modality shift")?;
    let w_dim = model.spec.w_dim;
    if from >= w_dim || to >= w_dim {
        return Err(Error::Input(format!("classes {from}, {to} outside {w_dim}")));
    }
    let w = predict_w(model, x)?;
    let mut w_edited = w.clone();
    for r in 0..w.rows() {
        let row = &mut w_edited.data_mut()[r * w_dim..(r + 1) * w_dim];
        row.swap(from, to);
    }
    let shifted = shift_with_labels(model, x, &w, &w_edited)?;
    Ok(ShiftResult { w, w_edited, shifted })
}

/// Images generated from labels, as decoder means.
///
/// jmvae-kl samples `z ~ q(z|w)`; jmvae and jmvae-h run the complement chain
/// from zeros; cvae and vae sample the prior.
pub fn generate_x<T: Real>(model: &Model<T>, w: &Tensor<T>, chain_steps: usize, rngs: &mut [Rng]) -> Result<Tensor<T>> {
    check_rows(w, rngs.len())?;
    let mut ctx = Ctx::new(model);
    let wv = ctx.c(w.clone());
    match model.kind() {
        ModelKind::Jmvae | ModelKind::JmvaeH => {
            Ok(chain_in(&mut ctx, wv, Modality::X, chain_steps.max(1), InitMode::Zero, rngs, false)?.final_mean)
        }
        ModelKind::JmvaeKl => {
            let q = model.encode_w(&mut ctx.g, &ctx.p, wv)?;
            let z = ctx.rsample(&q, rngs)?;
            let d = ctx.decode(Modality::X, z, None)?;
            Ok(ctx.v(d.mean()))
        }
        ModelKind::Cvae => {
            if model.spec.direction != Direction::XGivenW {
                return Err(Error::UnsupportedOperation("this cvae generates w, not x".into()));
            }
            let z = ctx.std_normal(rngs);
            let d = ctx.decode(Modality::X, z, Some(wv))?;
            Ok(ctx.v(d.mean()))
        }
        ModelKind::Vae => {
            let z = ctx.std_normal(rngs);
            let d = ctx.decode(Modality::X, z, None)?;
            Ok(ctx.v(d.mean()))
        }
    }
}

/// Conditional log-likelihood over the first `limit` items of `data` (all
/// when 0), in chunks of `chunk` items. Item ids are row indices and
/// Bernoulli images are binarized per item, so the result does not depend on
/// the chunk size.
pub fn evaluate_dataset<T: Real>(
    model: &Model<T>,
    data: &BimodalDataset,
    opts: &CllOptions,
    limit: usize,
    chunk: usize,
) -> Result<CllEstimate> {
    let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
    if n == 0 {
        return Err(Error::Input("no items to evaluate".into()));
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let rows: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
        let (x, w) = eval_inputs(model, data, &rows, &ids, opts.seed)?;
        parts.push(cond_loglik(model, &x, &w, &ids, opts)?);
    }
    CllEstimate::concat(parts)
}

/// Rows of `data` cast to `T`, with Bernoulli images binarized per item.
pub fn eval_inputs<T: Real>(
    model: &Model<T>,
    data: &BimodalDataset,
    rows: &[usize],
    ids: &[u64],
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x: Tensor<T> = data.x.gather_rows(rows)?.cast();
    let w: Tensor<T> = data.w.gather_rows(rows)?.cast();
    let x = if model.spec.x_emission == EmissionKind::Bernoulli { binarize_items(&x, seed, ids)? } else { x };
    Ok((x, w))
}
