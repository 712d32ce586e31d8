//! The five model variants and their variational lower bounds.
//!
//! Every bound returns a loss (the negated bound averaged over the batch)
//! together with the unweighted per-term breakdown. Divergences are
//! multiplied by the warm-up weight according to [`WarmupScope`].

use std::fmt;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::dists::{kl_diag_gaussians, kl_to_std_normal, DiagGaussian, Emission, EmissionKind};
use crate::error::{Error, Result};
use crate::nets::{parse_arch, ArchSpec, Bound, HeadKind, HeadSpec, Network, ParamStore};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Vae,
    Jmvae,
    JmvaeKl,
    JmvaeH,
    Cvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Vae, ModelKind::Jmvae, ModelKind::JmvaeKl, ModelKind::JmvaeH, ModelKind::Cvae];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Jmvae => "jmvae",
            ModelKind::JmvaeKl => "jmvae-kl",
            ModelKind::JmvaeH => "jmvae-h",
            ModelKind::Cvae => "cvae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind {s:?}")))
    }

    /// Networks the kind is assembled from.
    pub fn roles(self, direction: Direction) -> &'static [Role] {
        match (self, direction) {
            (ModelKind::Vae, _) => &[Role::EncX, Role::DecX],
            (ModelKind::Jmvae, _) => &[Role::EncXW, Role::DecX, Role::DecW],
            (ModelKind::JmvaeKl, _) => &[Role::EncXW, Role::EncX, Role::EncW, Role::DecX, Role::DecW],
            (ModelKind::JmvaeH, _) => &[Role::EncXW, Role::TailH2, Role::PriorZ1, Role::DecX, Role::DecW],
            (ModelKind::Cvae, Direction::XGivenW) => &[Role::EncXW, Role::DecX],
            (ModelKind::Cvae, Direction::WGivenX) => &[Role::EncXW, Role::DecW],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which modality is generated from which.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Generate `x` (image) from `w` (label).
    XGivenW,
    /// Generate `w` from `x`.
    WGivenX,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::XGivenW => "x|w",
            Direction::WGivenX => "w|x",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x|w" => Ok(Direction::XGivenW),
            "w|x" => Ok(Direction::WGivenX),
            _ => Err(Error::config(format!("unknown direction {s:?} (expected x|w or w|x)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// `q(z|x,w)`; the deterministic trunk `h1` plus `q(z1|h1)` in JMVAE-h.
    EncXW,
    /// `q(z|x)`
    EncX,
    /// `q(z|w)`
    EncW,
    /// `p(x|z)`, or `p(x|z,w)` in a CVAE.
    DecX,
    /// `p(w|z)`, or `p(w|z,x)` in a CVAE.
    DecW,
    /// `h2` tail and `q(z2|h2)` of JMVAE-h.
    TailH2,
    /// `p(z1|z2)` of JMVAE-h.
    PriorZ1,
}

impl Role {
    pub const ALL: [Role; 7] = [Role::EncXW, Role::EncX, Role::EncW, Role::DecX, Role::DecW, Role::TailH2, Role::PriorZ1];

    pub fn name(self) -> &'static str {
        match self {
            Role::EncXW => "enc_xw",
            Role::EncX => "enc_x",
            Role::EncW => "enc_w",
            Role::DecX => "dec_x",
            Role::DecW => "dec_w",
            Role::TailH2 => "tail_h2",
            Role::PriorZ1 => "prior_z1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&r| r == self).unwrap() as u64
    }

    pub fn default_arch(self) -> &'static str {
        match self {
            Role::EncXW => "(D512R-D512R, D512R-D512R)",
            Role::TailH2 => "D64-D512R-D512R",
            _ => "D512R-D512R",
        }
    }
}

/// Everything needed to rebuild a model's networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub x_dim: usize,
    pub w_dim: usize,
    pub x_emission: EmissionKind,
    pub w_emission: EmissionKind,
    pub latent_dim: usize,
    /// Conditioning direction; only meaningful for CVAE.
    pub direction: Direction,
    pub archs: Vec<(Role, ArchSpec)>,
}

impl ModelSpec {
    /// Spec with the default architecture for every role the kind uses.
    pub fn new(kind: ModelKind, x: (usize, EmissionKind), w: (usize, EmissionKind), latent_dim: usize) -> Self {
        let mut spec = Self {
            kind,
            x_dim: x.0,
            w_dim: w.0,
            x_emission: x.1,
            w_emission: w.1,
            latent_dim,
            direction: Direction::XGivenW,
            archs: Vec::new(),
        };
        spec.reset_archs();
        spec
    }

    fn reset_archs(&mut self) {
        let old = std::mem::take(&mut self.archs);
        self.archs = self
            .kind
            .roles(self.direction)
            .iter()
            .map(|&r| {
                let arch = old
                    .iter()
                    .find(|(o, _)| *o == r)
                    .map(|(_, a)| a.clone())
                    .unwrap_or_else(|| parse_arch(r.default_arch()).expect("default architectures parse"));
                (r, arch)
            })
            .collect();
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self.reset_archs();
        self
    }

    /// Replaces the architecture of one role; ignored for unused roles.
    pub fn with_arch(mut self, role: Role, arch: &str) -> Result<Self> {
        let parsed = parse_arch(arch)?;
        if let Some(slot) = self.archs.iter_mut().find(|(r, _)| *r == role) {
            slot.1 = parsed;
        }
        Ok(self)
    }

    pub fn arch(&self, role: Role) -> Option<&ArchSpec> {
        self.archs.iter().find(|(r, _)| *r == role).map(|(_, a)| a)
    }
}

/// How warm-up applies to divergence terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarmupScope {
    /// Every divergence, including the encoder-matching KLs.
    All,
    /// Only divergences against a prior.
    PriorOnly,
}

impl WarmupScope {
    pub fn name(self) -> &'static str {
        match self {
            WarmupScope::All => "all",
            WarmupScope::PriorOnly => "prior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(WarmupScope::All),
            "prior" => Ok(WarmupScope::PriorOnly),
            _ => Err(Error::config(format!("unknown warmup scope {s:?} (expected all or prior)"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundOptions {
    pub beta: f64,
    pub scope: WarmupScope,
    /// Coefficient of the two encoder-matching KLs of JMVAE-kl.
    pub match_weight: f64,
    /// Reparameterized samples per datapoint.
    pub samples: usize,
    #[doc(hidden)]
    pub pins: Pins,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self { beta: 1.0, scope: WarmupScope::All, match_weight: 1.0, samples: 1, pins: Pins::default() }
    }
}

/// Test hooks that replace network outputs by other distributions.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default)]
pub struct Pins {
    /// `q(z|x)` and `q(z|w)` return the joint encoder's parameters.
    pub unimodal_to_joint: bool,
    /// `p(z1|z2)` returns the parameters of `q(z1|x,w)`.
    pub prior_z1_to_posterior: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Reconstruction,
    /// Divergence against a (possibly learned) prior.
    PriorDivergence,
    /// Divergence between encoders.
    MatchDivergence,
}

#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub name: &'static str,
    pub kind: TermKind,
    /// `[batch, 1]`
    pub per_example: Var,
    /// Batch mean, unweighted.
    pub mean: Var,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub terms: Vec<Term>,
}

impl Objective {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Networks plus parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    nets: Vec<(Role, Network)>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.latent_dim == 0 || spec.x_dim == 0 || spec.w_dim == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        let mut params = ParamStore::new();
        let mut nets: Vec<(Role, Network)> = Vec::new();
        let latent = spec.latent_dim;
        let gaussian = HeadSpec { kind: HeadKind::Gaussian, dim: latent };
        for &(role, ref arch) in &spec.archs {
            let concat_or_split = |a: usize, b: usize| if arch.input_count() == 2 { vec![a, b] } else { vec![a + b] };
            let (inputs, head) = match role {
                Role::EncXW => (concat_or_split(spec.x_dim, spec.w_dim), gaussian),
                Role::EncX => (vec![spec.x_dim], gaussian),
                Role::EncW => (vec![spec.w_dim], gaussian),
                Role::TailH2 => {
                    let trunk = nets
                        .iter()
                        .find(|(r, _)| *r == Role::EncXW)
                        .map(|(_, n)| n.hidden_dim())
                        .ok_or_else(|| Error::config("tail_h2 requires enc_xw"))?;
                    (vec![trunk], gaussian)
                }
                Role::PriorZ1 => (vec![latent], gaussian),
                Role::DecX => {
                    let inputs = if spec.kind == ModelKind::Cvae { concat_or_split(latent, spec.w_dim) } else { vec![latent] };
                    (inputs, HeadSpec { kind: HeadKind::for_emission(spec.x_emission), dim: spec.x_dim })
                }
                Role::DecW => {
                    let inputs = if spec.kind == ModelKind::Cvae { concat_or_split(latent, spec.x_dim) } else { vec![latent] };
                    (inputs, HeadSpec { kind: HeadKind::for_emission(spec.w_emission), dim: spec.w_dim })
                }
            };
            let net_seed = seeds::derive(seed, &[seeds::tag::INIT, role.index()]);
            let net = Network::build(&mut params, role.name(), arch, &inputs, head, net_seed)?;
            nets.push((role, net));
        }
        Ok(Self { spec, params, nets })
    }

    /// Rebuilds the networks of `spec` around existing parameters.
    pub fn with_params(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(spec, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::config(format!(
                "parameter count {} does not match the architecture ({})",
                params.len(),
                fresh.params.len()
            )));
        }
        for ((_, name_a, a), (_, name_b, b)) in fresh.params.iter().zip(params.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                return Err(Error::config(format!(
                    "parameter {name_b} {:?} does not match {name_a} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { spec: fresh.spec, params, nets: fresh.nets })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { spec: self.spec.clone(), params: self.params.cast(), nets: self.nets.clone() }
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn net(&self, role: Role) -> Result<&Network> {
        self.nets
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::UnsupportedOperation(format!("{} has no {} network", self.spec.kind, role.name())))
    }

    pub fn has(&self, role: Role) -> bool {
        self.nets.iter().any(|(r, _)| *r == role)
    }

    /// Noise tensors consumed per bound evaluation.
    pub fn noise_count(&self, samples: usize) -> usize {
        match self.spec.kind {
            ModelKind::JmvaeH => 2 * samples,
            _ => samples,
        }
    }

    /// Feeds `parts` to `net`, concatenating them if it has a single input.
    fn feed(&self, g: &mut Graph<T>, p: &Bound, role: Role, parts: &[Var]) -> Result<crate::nets::NetOutput> {
        let net = self.net(role)?;
        if net.inputs.len() == parts.len() {
            net.forward(g, p, parts)
        } else {
            let joined = g.concat(parts)?;
            net.forward(g, p, &[joined])
        }
    }

    /// `q(z|x,w)`; in JMVAE-h this is `q(z1|x,w)` and the trunk output is
    /// returned alongside.
    pub fn encode_joint(&self, g: &mut Graph<T>, p: &Bound, x: Var, w: Var) -> Result<(DiagGaussian, Var)> {
        let out = self.feed(g, p, Role::EncXW, &[x, w])?;
        Ok((out.head.gaussian()?, out.hidden))
    }

    /// `q(z2|x,w)` of JMVAE-h from the trunk output `h1`.
    pub fn encode_top(&self, g: &mut Graph<T>, p: &Bound, h1: Var) -> Result<DiagGaussian> {
        self.feed(g, p, Role::TailH2, &[h1])?.head.gaussian()
    }

    pub fn encode_x(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<DiagGaussian> {
        self.feed(g, p, Role::EncX, &[x])?.head.gaussian()
    }

    pub fn encode_w(&self, g: &mut Graph<T>, p: &Bound, w: Var) -> Result<DiagGaussian> {
        self.feed(g, p, Role::EncW, &[w])?.head.gaussian()
    }

    /// `p(z1|z2)`
    pub fn prior_z1(&self, g: &mut Graph<T>, p: &Bound, z2: Var) -> Result<DiagGaussian> {
        self.feed(g, p, Role::PriorZ1, &[z2])?.head.gaussian()
    }

    /// `p(x|z)`, with `cond = w` for a CVAE.
    pub fn decode_x(&self, g: &mut Graph<T>, p: &Bound, z: Var, cond: Option<Var>) -> Result<Emission> {
        let parts: Vec<Var> = std::iter::once(z).chain(cond).collect();
        self.feed(g, p, Role::DecX, &parts)?.head.emission()
    }

    /// `p(w|z)`, with `cond = x` for a CVAE.
    pub fn decode_w(&self, g: &mut Graph<T>, p: &Bound, z: Var, cond: Option<Var>) -> Result<Emission> {
        let parts: Vec<Var> = std::iter::once(z).chain(cond).collect();
        self.feed(g, p, Role::DecW, &parts)?.head.emission()
    }

    /// Negative lower bound of the model's kind on a batch.
    ///
    /// `noise` holds [`Model::noise_count`] tensors of shape
    /// `[batch, latent_dim]`; for JMVAE-h they alternate `z2`, `z1`.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        w: Var,
        noise: &[Tensor<T>],
        opts: &BoundOptions,
    ) -> Result<Objective> {
        if opts.samples == 0 {
            return Err(Error::config("mc_samples must be at least 1"));
        }
        if !(0.0..=1.0).contains(&opts.beta) {
            return Err(Error::config(format!("warm-up weight {} outside [0, 1]", opts.beta)));
        }
        let want = self.noise_count(opts.samples);
        if noise.len() != want {
            return Err(Error::shape(format!("bound needs {want} noise tensors, got {}", noise.len())));
        }
        let mut b = Builder { g, terms: Vec::new() };
        match self.spec.kind {
            ModelKind::Vae => self.bound_vae(&mut b, p, x, noise)?,
            ModelKind::Jmvae | ModelKind::JmvaeKl => self.bound_jmvae(&mut b, p, x, w, noise, opts)?,
            ModelKind::JmvaeH => self.bound_jmvae_h(&mut b, p, x, w, noise, opts)?,
            ModelKind::Cvae => self.bound_cvae(&mut b, p, x, w, noise)?,
        }
        b.finish(opts)
    }

    fn bound_vae(&self, b: &mut Builder<'_, T>, p: &Bound, x: Var, noise: &[Tensor<T>]) -> Result<()> {
        let q = self.encode_x(b.g, p, x)?;
        let mut recon = Vec::with_capacity(noise.len());
        for eps in noise {
            let e = b.g.constant(eps.clone());
            let z = q.rsample(b.g, e)?;
            recon.push(self.decode_x(b.g, p, z, None)?.log_prob(b.g, x)?);
        }
        b.averaged("recon_x", TermKind::Reconstruction, &recon)?;
        let kl = kl_to_std_normal(b.g, &q)?;
        b.push("kl_prior", TermKind::PriorDivergence, kl)
    }

    fn bound_cvae(&self, b: &mut Builder<'_, T>, p: &Bound, x: Var, w: Var, noise: &[Tensor<T>]) -> Result<()> {
        let (q, _) = self.encode_joint(b.g, p, x, w)?;
        let mut recon = Vec::with_capacity(noise.len());
        for eps in noise {
            let e = b.g.constant(eps.clone());
            let z = q.rsample(b.g, e)?;
            let lp = match self.spec.direction {
                Direction::XGivenW => self.decode_x(b.g, p, z, Some(w))?.log_prob(b.g, x)?,
                Direction::WGivenX => self.decode_w(b.g, p, z, Some(x))?.log_prob(b.g, w)?,
            };
            recon.push(lp);
        }
        let name = match self.spec.direction {
            Direction::XGivenW => "recon_x",
            Direction::WGivenX => "recon_w",
        };
        b.averaged(name, TermKind::Reconstruction, &recon)?;
        let kl = kl_to_std_normal(b.g, &q)?;
        b.push("kl_prior", TermKind::PriorDivergence, kl)
    }

    fn bound_jmvae(
        &self,
        b: &mut Builder<'_, T>,
        p: &Bound,
        x: Var,
        w: Var,
        noise: &[Tensor<T>],
        opts: &BoundOptions,
    ) -> Result<()> {
        let (q, _) = self.encode_joint(b.g, p, x, w)?;
        let mut rx = Vec::with_capacity(noise.len());
        let mut rw = Vec::with_capacity(noise.len());
        for eps in noise {
            let e = b.g.constant(eps.clone());
            let z = q.rsample(b.g, e)?;
            rx.push(self.decode_x(b.g, p, z, None)?.log_prob(b.g, x)?);
            rw.push(self.decode_w(b.g, p, z, None)?.log_prob(b.g, w)?);
        }
        b.averaged("recon_x", TermKind::Reconstruction, &rx)?;
        b.averaged("recon_w", TermKind::Reconstruction, &rw)?;
        let kl = kl_to_std_normal(b.g, &q)?;
        b.push("kl_prior", TermKind::PriorDivergence, kl)?;
        if self.spec.kind == ModelKind::JmvaeKl {
            let (qx, qw) = if opts.pins.unimodal_to_joint {
                (q, q)
            } else {
                (self.encode_x(b.g, p, x)?, self.encode_w(b.g, p, w)?)
            };
            let kx = kl_diag_gaussians(b.g, &q, &qx)?;
            b.push("kl_match_x", TermKind::MatchDivergence, kx)?;
            let kw = kl_diag_gaussians(b.g, &q, &qw)?;
            b.push("kl_match_w", TermKind::MatchDivergence, kw)?;
        }
        Ok(())
    }

    fn bound_jmvae_h(
        &self,
        b: &mut Builder<'_, T>,
        p: &Bound,
        x: Var,
        w: Var,
        noise: &[Tensor<T>],
        opts: &BoundOptions,
    ) -> Result<()> {
        let (q1, h1) = self.encode_joint(b.g, p, x, w)?;
        let q2 = self.encode_top(b.g, p, h1)?;
        let mut rx = Vec::new();
        let mut rw = Vec::new();
        let mut inner = Vec::new();
        for pair in noise.chunks_exact(2) {
            let e2 = b.g.constant(pair[0].clone());
            let z2 = q2.rsample(b.g, e2)?;
            let prior1 = if opts.pins.prior_z1_to_posterior { q1 } else { self.prior_z1(b.g, p, z2)? };
            inner.push(kl_diag_gaussians(b.g, &q1, &prior1)?);
            let e1 = b.g.constant(pair[1].clone());
            let z1 = q1.rsample(b.g, e1)?;
            rx.push(self.decode_x(b.g, p, z1, None)?.log_prob(b.g, x)?);
            rw.push(self.decode_w(b.g, p, z1, None)?.log_prob(b.g, w)?);
        }
        b.averaged("recon_x", TermKind::Reconstruction, &rx)?;
        b.averaged("recon_w", TermKind::Reconstruction, &rw)?;
        b.averaged("kl_z1", TermKind::PriorDivergence, &inner)?;
        let top = kl_to_std_normal(b.g, &q2)?;
        b.push("kl_z2", TermKind::PriorDivergence, top)
    }
}

struct Builder<'g, T> {
    g: &'g mut Graph<T>,
    terms: Vec<Term>,
}

impl<T: Real> Builder<'_, T> {
    fn push(&mut self, name: &'static str, kind: TermKind, per_example: Var) -> Result<()> {
        let mean = self.g.mean(per_example)?;
        self.terms.push(Term { name, kind, per_example, mean });
        Ok(())
    }

    /// Averages per-example values over Monte Carlo samples.
    fn averaged(&mut self, name: &'static str, kind: TermKind, samples: &[Var]) -> Result<()> {
        let mut acc = samples[0];
        for &s in &samples[1..] {
            acc = self.g.add(acc, s)?;
        }
        if samples.len() > 1 {
            acc = self.g.scale(acc, 1.0 / samples.len() as f64)?;
        }
        self.push(name, kind, acc)
    }

    fn finish(self, opts: &BoundOptions) -> Result<Objective> {
        let Builder { g, terms } = self;
        let mut loss: Option<Var> = None;
        for t in terms.iter().filter(|t| t.kind == TermKind::Reconstruction) {
            let neg = g.neg(t.mean)?;
            loss = Some(match loss {
                None => neg,
                Some(l) => g.add(l, neg)?,
            });
        }
        let mut loss = loss.expect("every bound has a reconstruction term");
        for t in terms.iter().filter(|t| t.kind != TermKind::Reconstruction) {
            let bad = g.value(t.per_example).data().iter().copied().find(|v| *v < -divergence_slack::<T>(*v));
            if let Some(v) = bad {
                return Err(Error::numerics(t.name, format!("negative divergence {v}")));
            }
            let weight = match (t.kind, opts.scope) {
                (TermKind::MatchDivergence, WarmupScope::PriorOnly) => opts.match_weight,
                (TermKind::MatchDivergence, WarmupScope::All) => opts.beta * opts.match_weight,
                _ => opts.beta,
            };
            let weighted = g.scale(t.mean, weight)?;
            loss = g.add(loss, weighted)?;
        }
        Ok(Objective { loss, terms })
    }
}

/// Rounding tolerance for a divergence that is mathematically nonnegative.
fn divergence_slack<T: Real>(v: T) -> T {
    T::epsilon() * T::from_f64_lossy(64.0) * (T::one() + v.abs())
}

#[cfg(test)]
mod tests;
