//! Architecture notation and MLP networks with distribution heads.
//!
//! Grammar (whitespace is ignored):
//!
//! ```text
//! spec   := group ("-" chain)? | chain
//! group  := "(" chain "," chain ")"
//! chain  := atom ("-" atom)*
//! atom   := "D" digits "B"? "R"?
//! ```
//!
//! `D512R` is a 512-unit linear layer followed by ReLU, `D64` has no
//! activation, and `(I, J)` runs `I` and `J` on separate inputs and
//! concatenates their outputs. `B` marks batch normalization; it parses but
//! cannot be built.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::dists::{Bernoulli, Categorical, DiagGaussian, Emission, EmissionKind, FixedVarGaussian, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Atom {
    pub units: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.units)?;
        if self.batch_norm {
            f.write_str("B")?;
        }
        if self.activation == Activation::Relu {
            f.write_str("R")?;
        }
        Ok(())
    }
}

/// Parsed architecture string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    /// Leading two-branch group, if any.
    pub branches: Option<[Vec<Atom>; 2]>,
    pub layers: Vec<Atom>,
}

fn write_chain(f: &mut fmt::Formatter<'_>, chain: &[Atom]) -> fmt::Result {
    for (i, atom) in chain.iter().enumerate() {
        if i > 0 {
            f.write_str("-")?;
        }
        write!(f, "{atom}")?;
    }
    Ok(())
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some([a, b]) = &self.branches {
            f.write_str("(")?;
            write_chain(f, a)?;
            f.write_str(", ")?;
            write_chain(f, b)?;
            f.write_str(")")?;
            if !self.layers.is_empty() {
                f.write_str("-")?;
            }
        }
        write_chain(f, &self.layers)
    }
}

impl std::str::FromStr for ArchSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

impl ArchSpec {
    pub fn input_count(&self) -> usize {
        if self.branches.is_some() { 2 } else { 1 }
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn atom(&mut self) -> Result<Atom> {
        match self.peek() {
            Some(b'D') => self.pos += 1,
            Some(c) => return self.err(format!("expected layer token 'D', found '{}'", c as char)),
            None => return self.err("expected layer token, found end of input"),
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected unit count after 'D'");
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        let units: usize = match digits.parse() {
            Ok(u) if u >= 1 => u,
            Ok(_) => {
                self.pos = start;
                return self.err("unit count must be at least 1");
            }
            Err(_) => {
                self.pos = start;
                return self.err("unit count out of range");
            }
        };
        let mut atom = Atom { units, batch_norm: false, activation: Activation::None };
        if self.bytes.get(self.pos) == Some(&b'B') {
            atom.batch_norm = true;
            self.pos += 1;
        }
        if self.bytes.get(self.pos) == Some(&b'R') {
            atom.activation = Activation::Relu;
            self.pos += 1;
        }
        Ok(atom)
    }

    fn chain(&mut self) -> Result<Vec<Atom>> {
        let mut out = vec![self.atom()?];
        while self.peek() == Some(b'-') {
            self.pos += 1;
            out.push(self.atom()?);
        }
        Ok(out)
    }

    fn spec(&mut self) -> Result<ArchSpec> {
        if self.peek().is_none() {
            return self.err("empty architecture");
        }
        let mut branches = None;
        let mut layers = Vec::new();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            if matches!(self.peek(), Some(b',') | Some(b')')) {
                return self.err("empty branch");
            }
            let a = self.chain()?;
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'(') => return self.err("nested parentheses"),
                _ => return self.err("expected ',' between branches"),
            }
            if matches!(self.peek(), Some(b',') | Some(b')')) {
                return self.err("empty branch");
            }
            let b = self.chain()?;
            match self.peek() {
                Some(b')') => self.pos += 1,
                Some(b',') => return self.err("a group has exactly two branches"),
                Some(b'(') => return self.err("nested parentheses"),
                _ => return self.err("expected ')'"),
            }
            branches = Some([a, b]);
            if self.peek() == Some(b'-') {
                self.pos += 1;
                layers = self.chain()?;
            }
        } else {
            layers = self.chain()?;
        }
        match self.peek() {
            None => Ok(ArchSpec { branches, layers }),
            Some(b'(') => self.err("a branch group may only appear first"),
            Some(c) => self.err(format!("unexpected '{}'", c as char)),
        }
    }
}

/// Parses the architecture notation. Errors carry the byte position.
pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    if let Some(pos) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(Error::Parse { pos, msg: "non-ASCII character".into() });
    }
    Parser { bytes: text.as_bytes(), pos: 0 }.spec()
}

/// Identifier of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Records every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Output distribution of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// `f_mu` linear, `f_var` softplus plus a floor.
    Gaussian,
    Bernoulli,
    Categorical,
    /// Unit-variance Gaussian with a linear mean.
    FixedVarGaussian,
    /// Trunk only.
    None,
}

impl HeadKind {
    pub fn for_emission(kind: EmissionKind) -> Self {
        match kind {
            EmissionKind::Bernoulli => HeadKind::Bernoulli,
            EmissionKind::Categorical => HeadKind::Categorical,
            EmissionKind::Gaussian => HeadKind::FixedVarGaussian,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub dim: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    activation: Activation,
}

#[derive(Clone, Debug)]
pub enum HeadOut {
    Gaussian(DiagGaussian),
    Emission(Emission),
    None,
}

impl HeadOut {
    pub fn gaussian(&self) -> Result<DiagGaussian> {
        match self {
            HeadOut::Gaussian(d) => Ok(*d),
            _ => Err(Error::shape("network does not have a Gaussian head")),
        }
    }

    pub fn emission(&self) -> Result<Emission> {
        match self {
            HeadOut::Emission(e) => Ok(*e),
            _ => Err(Error::shape("network does not have an emission head")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    /// Final trunk activation (`h` in the notation of the hierarchical model).
    pub hidden: Var,
    pub head: HeadOut,
}

/// MLP with an optional two-branch input group and a distribution head.
#[derive(Clone, Debug)]
pub struct Network {
    pub name: String,
    pub arch: ArchSpec,
    pub inputs: Vec<usize>,
    pub head: HeadSpec,
    branches: Vec<Vec<Dense>>,
    trunk: Vec<Dense>,
    head_mu: Option<Dense>,
    head_var: Option<Dense>,
    hidden_dim: usize,
}

fn glorot<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64_lossy(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

fn dense<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
) -> Result<Dense> {
    let weight = store.insert(&format!("{name}.w"), glorot(rng, fan_in, fan_out))?;
    let bias = store.insert(&format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok(Dense { weight, bias, activation })
}

fn chain_layers<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    atoms: &[Atom],
    mut dim: usize,
) -> Result<(Vec<Dense>, usize)> {
    let mut out = Vec::with_capacity(atoms.len());
    for (i, atom) in atoms.iter().enumerate() {
        if atom.batch_norm {
            return Err(Error::UnsupportedLayer(format!("{atom}: batch normalization is not supported")));
        }
        out.push(dense(store, rng, &format!("{prefix}.l{i}"), dim, atom.units, atom.activation)?);
        dim = atom.units;
    }
    Ok((out, dim))
}

impl Network {
    /// Allocates parameters in `store` under `name.*`, drawing weights from a
    /// stream derived from `seed`.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        arch: &ArchSpec,
        inputs: &[usize],
        head: HeadSpec,
        seed: u64,
    ) -> Result<Self> {
        if inputs.len() != arch.input_count() {
            return Err(Error::shape(format!(
                "{name}: architecture {arch} takes {} input(s), got {}",
                arch.input_count(),
                inputs.len()
            )));
        }
        if inputs.contains(&0) || head.dim == 0 {
            return Err(Error::shape(format!("{name}: dimensions must be positive")));
        }
        let mut rng = seeds::rng(seed, &[seeds::tag::INIT]);
        let mut branches = Vec::new();
        let mut dim = inputs[0];
        if let Some(group) = &arch.branches {
            dim = 0;
            for (b, (atoms, &input)) in group.iter().zip(inputs).enumerate() {
                let (layers, out) = chain_layers(store, &mut rng, &format!("{name}.b{b}"), atoms, input)?;
                branches.push(layers);
                dim += out;
            }
        }
        let (trunk, hidden_dim) = chain_layers(store, &mut rng, &format!("{name}.t"), &arch.layers, dim)?;
        let (head_mu, head_var) = match head.kind {
            HeadKind::None => (None, None),
            HeadKind::Gaussian => (
                Some(dense(store, &mut rng, &format!("{name}.mu"), hidden_dim, head.dim, Activation::None)?),
                Some(dense(store, &mut rng, &format!("{name}.var"), hidden_dim, head.dim, Activation::None)?),
            ),
            _ => (
                Some(dense(store, &mut rng, &format!("{name}.mu"), hidden_dim, head.dim, Activation::None)?),
                None,
            ),
        };
        Ok(Self {
            name: name.to_string(),
            arch: arch.clone(),
            inputs: inputs.to_vec(),
            head,
            branches,
            trunk,
            head_mu,
            head_var,
            hidden_dim,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Output width: the head dimension, or the trunk width without a head.
    pub fn output_dim(&self) -> usize {
        match self.head.kind {
            HeadKind::None => self.hidden_dim,
            _ => self.head.dim,
        }
    }

    fn apply_dense<T: Real>(g: &mut Graph<T>, p: &Bound, layer: &Dense, input: Var) -> Result<Var> {
        let lin = g.matmul(input, p.var(layer.weight))?;
        let out = g.add_row(lin, p.var(layer.bias))?;
        match layer.activation {
            Activation::None => Ok(out),
            Activation::Relu => g.relu(out),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, inputs: &[Var]) -> Result<NetOutput> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::shape(format!(
                "{}: expected {} input(s), got {}",
                self.name,
                self.inputs.len(),
                inputs.len()
            )));
        }
        for (&v, &want) in inputs.iter().zip(&self.inputs) {
            let shape = g.shape(v);
            if shape.len() != 2 || shape[1] != want {
                return Err(Error::shape(format!("{}: input shape {shape:?}, expected width {want}", self.name)));
            }
        }
        let mut h = if self.branches.is_empty() {
            inputs[0]
        } else {
            let mut outs = Vec::with_capacity(2);
            for (layers, &input) in self.branches.iter().zip(inputs) {
                let mut b = input;
                for layer in layers {
                    b = Self::apply_dense(g, p, layer, b)?;
                }
                outs.push(b);
            }
            g.concat(&outs)?
        };
        for layer in &self.trunk {
            h = Self::apply_dense(g, p, layer, h)?;
        }
        let head = match (self.head.kind, &self.head_mu) {
            (HeadKind::None, _) | (_, None) => HeadOut::None,
            (kind, Some(mu_layer)) => {
                let raw = Self::apply_dense(g, p, mu_layer, h)?;
                match kind {
                    HeadKind::Gaussian => {
                        let var_layer = self.head_var.as_ref().expect("gaussian head has a variance layer");
                        let raw_var = Self::apply_dense(g, p, var_layer, h)?;
                        let sp = g.softplus(raw_var)?;
                        let var = g.add_scalar(sp, VARIANCE_FLOOR)?;
                        HeadOut::Gaussian(DiagGaussian { mean: raw, var })
                    }
                    HeadKind::Bernoulli => HeadOut::Emission(Emission::Bernoulli(Bernoulli { mean: g.sigmoid(raw)? })),
                    HeadKind::Categorical => {
                        HeadOut::Emission(Emission::Categorical(Categorical { mean: g.softmax_rows(raw)? }))
                    }
                    HeadKind::FixedVarGaussian => HeadOut::Emission(Emission::Gaussian(FixedVarGaussian { mean: raw })),
                    HeadKind::None => unreachable!(),
                }
            }
        };
        Ok(NetOutput { hidden: h, head })
    }
}
