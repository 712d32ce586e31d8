//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` (and anything after a `#`) are comments. Every
//! key has a default; unknown keys and malformed values are errors.

use std::path::PathBuf;

use crate::data::{make_toy_part, load_mnist_part, BimodalDataset, MnistPart, ToySpec};
use crate::error::{Error, Result};
use crate::models::{BoundOptions, Direction, ModelKind, ModelSpec, Role, WarmupScope};
use crate::nets::parse_arch;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Int { min: u64 },
    Float { positive: bool },
    Text,
    Choice(&'static [&'static str]),
    Arch,
}

const MODELS: &[&str] = &["vae", "jmvae", "jmvae-kl", "jmvae-h", "cvae"];
const DIRECTIONS: &[&str] = &["x|w", "w|x"];

const KEYS: &[(&str, &str, Kind)] = &[
    ("model", "jmvae-kl", Kind::Choice(MODELS)),
    ("dataset", "mnist", Kind::Choice(&["mnist", "toy"])),
    ("mnist.dir", "data/mnist", Kind::Text),
    ("mnist.split", "train50k-test10k", Kind::Choice(&["train50k-test10k", "train50k-held10k"])),
    ("mnist.train_items", "0", Kind::Int { min: 0 }),
    ("mnist.test_items", "0", Kind::Int { min: 0 }),
    ("toy.clusters", "2", Kind::Int { min: 2 }),
    ("toy.x_dim", "1", Kind::Int { min: 1 }),
    ("toy.items", "1000", Kind::Int { min: 1 }),
    ("toy.test_items", "200", Kind::Int { min: 1 }),
    ("toy.spread", "3", Kind::Float { positive: true }),
    ("toy.seed", "0", Kind::Int { min: 0 }),
    ("latent_dim", "64", Kind::Int { min: 1 }),
    ("arch.enc_xw", "(D512R-D512R, D512R-D512R)", Kind::Arch),
    ("arch.enc_x", "D512R-D512R", Kind::Arch),
    ("arch.enc_w", "D512R-D512R", Kind::Arch),
    ("arch.dec_x", "D512R-D512R", Kind::Arch),
    ("arch.dec_w", "D512R-D512R", Kind::Arch),
    ("arch.tail_h2", "D64-D512R-D512R", Kind::Arch),
    ("arch.prior_z1", "D512R-D512R", Kind::Arch),
    ("learning_rate", "0.001", Kind::Float { positive: true }),
    ("epochs", "2000", Kind::Int { min: 1 }),
    ("warmup_epochs", "200", Kind::Int { min: 1 }),
    ("batch_size", "100", Kind::Int { min: 1 }),
    ("seed", "0", Kind::Int { min: 0 }),
    ("mc_samples", "1", Kind::Int { min: 1 }),
    ("warmup_scope", "all", Kind::Choice(&["all", "prior"])),
    ("kl_match_weight", "1", Kind::Float { positive: false }),
    ("cvae.direction", "x|w", Kind::Choice(DIRECTIONS)),
    ("eval.samples", "10", Kind::Int { min: 1 }),
    ("eval.chain_steps", "10", Kind::Int { min: 1 }),
    ("eval.init", "zero", Kind::Choice(&["zero", "prior"])),
    ("eval.direction", "x|w", Kind::Choice(DIRECTIONS)),
    ("eval.items", "0", Kind::Int { min: 0 }),
    ("generate.samples", "8", Kind::Int { min: 1 }),
    ("complement.items", "8", Kind::Int { min: 1 }),
    ("complement.steps", "10", Kind::Int { min: 1 }),
    ("latent.inputs", "w", Kind::Choice(&["x", "w", "xw"])),
    ("shift.from", "3", Kind::Int { min: 0 }),
    ("shift.to", "8", Kind::Int { min: 0 }),
    ("shift.items", "16", Kind::Int { min: 1 }),
];

/// Every configurable key with its current value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(_, d, _)| d.to_string()).collect() }
    }
}

fn slot(key: &str) -> Result<usize> {
    KEYS.iter()
        .position(|(k, _, _)| *k == key)
        .ok_or_else(|| Error::config(format!("unknown key {key:?}")))
}

fn normalize(key: &str, kind: Kind, value: &str) -> Result<String> {
    let bad = |what: &str| Error::config(format!("{key}: {value:?} is not {what}"));
    match kind {
        Kind::Int { min } => {
            let v: u64 = value.parse().map_err(|_| bad("a nonnegative integer"))?;
            if v < min {
                return Err(Error::config(format!("{key} must be at least {min}, got {v}")));
            }
            Ok(v.to_string())
        }
        Kind::Float { positive } => {
            let v: f64 = value.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() || v < 0.0 || (positive && v == 0.0) {
                let need = if positive { "positive" } else { "nonnegative" };
                return Err(Error::config(format!("{key} must be finite and {need}, got {value}")));
            }
            Ok(v.to_string())
        }
        Kind::Text => {
            if value.is_empty() {
                return Err(bad("a nonempty string"));
            }
            Ok(value.to_string())
        }
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(value.to_string())
            } else {
                Err(Error::config(format!("{key}: {value:?} is not one of {}", options.join(", "))))
            }
        }
        Kind::Arch => parse_arch(value)
            .map(|a| a.to_string())
            .map_err(|e| Error::config(format!("{key}: {e}"))),
    }
}

impl Config {
    /// Defaults overlaid with the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            config
                .set(key, value.trim())
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip(&e))))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = slot(key)?;
        self.values[i] = normalize(key, KEYS[i].2, value)?;
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[slot(key).unwrap_or_else(|_| panic!("unknown config key {key}"))]
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("integer keys hold integers")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("integer keys hold integers")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("float keys hold floats")
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|(k, _, _)| *k)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        KEYS.iter().zip(&self.values).map(|((k, _, _), v)| (*k, v.as_str()))
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn echo(&self) -> String {
        self.entries().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Cross-key checks.
    pub fn validate(&self) -> Result<()> {
        if self.usize("shift.from") > 9 || self.usize("shift.to") > 9 {
            return Err(Error::config("shift.from and shift.to must be digits 0-9"));
        }
        Ok(())
    }

    pub fn dataset_is_toy(&self) -> bool {
        self.get("dataset") == "toy"
    }

    pub fn model_kind(&self) -> ModelKind {
        ModelKind::parse(self.get("model")).expect("validated at set time")
    }

    pub fn direction(&self, key: &str) -> Direction {
        Direction::parse(self.get(key)).expect("validated at set time")
    }

    pub fn model_spec(&self, data: &BimodalDataset) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(
            self.model_kind(),
            (data.x_dim(), data.x_kind),
            (data.w_dim(), data.w_kind),
            self.usize("latent_dim"),
        )
        .with_direction(self.direction("cvae.direction"));
        for role in Role::ALL {
            spec = spec.with_arch(role, self.get(&format!("arch.{}", role.name())))?;
        }
        Ok(spec)
    }

    pub fn bound_options(&self, beta: f64) -> BoundOptions {
        BoundOptions {
            beta,
            scope: WarmupScope::parse(self.get("warmup_scope")).expect("validated at set time"),
            match_weight: self.f64("kl_match_weight"),
            samples: self.usize("mc_samples"),
            pins: Default::default(),
        }
    }

    pub fn toy_spec(&self, items: usize) -> ToySpec {
        ToySpec {
            clusters: self.usize("toy.clusters"),
            x_dim: self.usize("toy.x_dim"),
            items,
            spread: self.f64("toy.spread"),
            seed: self.u64("toy.seed"),
        }
    }

    /// Training and evaluation data described by the configuration.
    pub fn datasets(&self) -> Result<(BimodalDataset, BimodalDataset)> {
        if self.dataset_is_toy() {
            let train = make_toy_part(&self.toy_spec(self.usize("toy.items")), 0)?;
            let test = make_toy_part(&self.toy_spec(self.usize("toy.test_items")), 1)?;
            return Ok((train, test));
        }
        let dir = PathBuf::from(self.get("mnist.dir"));
        let train = load_mnist_part(&dir, MnistPart::Train)?;
        let test_part = match self.get("mnist.split") {
            "train50k-held10k" => MnistPart::Held,
            _ => MnistPart::Test,
        };
        let test = load_mnist_part(&dir, test_part)?;
        let limit = |d: BimodalDataset, n: usize| if n == 0 { Ok(d) } else { d.head(n) };
        Ok((limit(train, self.usize("mnist.train_items"))?, limit(test, self.usize("mnist.test_items"))?))
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
