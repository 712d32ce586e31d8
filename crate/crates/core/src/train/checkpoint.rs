//! Binary checkpoint format.
//!
//! ```text
//! "JMVL"  u16 version  u32 manifest length  manifest (UTF-8 `key = value`)
//! parameter tensors, then Adam first moments, then Adam second moments
//!   (row-major little-endian f32, in manifest order)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::dists::EmissionKind;
use crate::error::{Error, Result};
use crate::models::{Direction, Model, ModelKind, ModelSpec, Role};
use crate::nets::{parse_arch, ParamStore};

use super::adam::AdamState;
use super::config::Config;

pub const MAGIC: &[u8; 4] = b"JMVL";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Completed training epochs.
    pub epoch: u64,
    pub config: Config,
}

fn manifest(c: &Checkpoint) -> String {
    let spec = &c.model.spec;
    let mut out = String::new();
    let mut line = |k: &str, v: &str| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    };
    line("kind", spec.kind.name());
    line("x_dim", &spec.x_dim.to_string());
    line("x_emission", spec.x_emission.name());
    line("w_dim", &spec.w_dim.to_string());
    line("w_emission", spec.w_emission.name());
    line("latent_dim", &spec.latent_dim.to_string());
    line("direction", spec.direction.name());
    for (role, arch) in &spec.archs {
        line(&format!("arch.{}", role.name()), &arch.to_string());
    }
    line("epoch", &c.epoch.to_string());
    line("adam.beta1", &c.adam.beta1.to_string());
    line("adam.beta2", &c.adam.beta2.to_string());
    line("adam.eps", &c.adam.eps.to_string());
    line("adam.step", &c.adam.step.to_string());
    line("tensors", &c.model.params.len().to_string());
    for (_, name, t) in c.model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        line("tensor", &format!("{name} {}", dims.join(" ")));
    }
    for (k, v) in c.config.entries() {
        line(&format!("config.{k}"), v);
    }
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = manifest(self);
        let mut out = Vec::with_capacity(16 + manifest.len() + 12 * self.model.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        let blocks = [self.model.params.tensors(), &self.adam.m[..], &self.adam.v[..]];
        for block in blocks {
            for t in block {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(Error::format(body as u64, "checksum mismatch"));
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mend = 10usize
            .checked_add(mlen)
            .filter(|&e| e <= body)
            .ok_or_else(|| Error::format(6, "manifest length exceeds file"))?;
        let text = std::str::from_utf8(&bytes[10..mend]).map_err(|e| Error::format(10 + e.valid_up_to() as u64, "manifest is not UTF-8"))?;
        let m = Manifest::parse(text)?;

        let shapes = &m.tensors;
        let floats: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if body - mend != 12 * floats {
            return Err(Error::format(mend as u64, format!("payload holds {} bytes, manifest needs {}", body - mend, 12 * floats)));
        }
        let mut cursor = mend;
        let mut read_block = || -> Result<Vec<Tensor<f32>>> {
            shapes
                .iter()
                .map(|(_, shape)| {
                    let n: usize = shape.iter().product();
                    let data = bytes[cursor..cursor + 4 * n]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    cursor += 4 * n;
                    Tensor::new(shape.clone(), data)
                })
                .collect()
        };
        let params_t = read_block()?;
        let m1 = read_block()?;
        let m2 = read_block()?;
        let mut params = ParamStore::new();
        for ((name, _), t) in shapes.iter().zip(params_t) {
            params.insert(name, t)?;
        }
        let model = Model::with_params(m.spec.clone(), params).map_err(|e| Error::format(10, e.to_string()))?;
        let adam = AdamState { m: m1, v: m2, step: m.adam_step, beta1: m.beta1, beta2: m.beta2, eps: m.eps };
        Ok(Self { model, adam, epoch: m.epoch, config: m.config })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Manifest {
    spec: ModelSpec,
    epoch: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    adam_step: u64,
    tensors: Vec<(String, Vec<usize>)>,
    config: Config,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format(10, format!("manifest: {msg}"));
        let mut pairs = Vec::new();
        for l in text.lines() {
            let (k, v) = l.split_once(" = ").ok_or_else(|| bad(format!("malformed line {l:?}")))?;
            pairs.push((k, v));
        }
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| bad(format!("missing {key}")))
        };
        fn num<N: std::str::FromStr>(v: &str, key: &str) -> Result<N> {
            v.parse().map_err(|_| Error::format(10, format!("manifest: bad {key} {v:?}")))
        }
        let emission = |key: &str| -> Result<EmissionKind> {
            let v = get(key)?;
            EmissionKind::parse(v).ok_or_else(|| bad(format!("bad {key} {v:?}")))
        };
        let kind = ModelKind::parse(get("kind")?).map_err(|e| bad(e.to_string()))?;
        let direction = Direction::parse(get("direction")?).map_err(|e| bad(e.to_string()))?;
        let mut spec = ModelSpec::new(
            kind,
            (num(get("x_dim")?, "x_dim")?, emission("x_emission")?),
            (num(get("w_dim")?, "w_dim")?, emission("w_emission")?),
            num(get("latent_dim")?, "latent_dim")?,
        )
        .with_direction(direction);
        for &role in kind.roles(direction) {
            let key = format!("arch.{}", role.name());
            let arch = parse_arch(get(&key)?).map_err(|e| bad(format!("{key}: {e}")))?;
            spec = spec.with_arch(role, &arch.to_string())?;
        }
        for (k, _) in &pairs {
            if let Some(role) = k.strip_prefix("arch.") {
                if Role::parse(role).is_none_or(|r| !kind.roles(direction).contains(&r)) {
                    return Err(bad(format!("unexpected {k}")));
                }
            }
        }
        let tensors: Vec<(String, Vec<usize>)> = pairs
            .iter()
            .filter(|(k, _)| *k == "tensor")
            .map(|(_, v)| {
                let mut parts = v.split(' ');
                let name = parts.next().unwrap_or("").to_string();
                let shape = parts.map(|d| num::<usize>(d, "tensor dimension")).collect::<Result<Vec<_>>>()?;
                if name.is_empty() || shape.is_empty() || shape.contains(&0) {
                    return Err(bad(format!("bad tensor entry {v:?}")));
                }
                Ok((name, shape))
            })
            .collect::<Result<_>>()?;
        let count: usize = num(get("tensors")?, "tensors")?;
        if count != tensors.len() {
            return Err(bad(format!("declares {count} tensors, lists {}", tensors.len())));
        }
        let mut config = Config::default();
        for (k, v) in &pairs {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v).map_err(|e| bad(e.to_string()))?;
            }
        }
        Ok(Self {
            spec,
            epoch: num(get("epoch")?, "epoch")?,
            beta1: num(get("adam.beta1")?, "adam.beta1")?,
            beta2: num(get("adam.beta2")?, "adam.beta2")?,
            eps: num(get("adam.eps")?, "adam.eps")?,
            adam_step: num(get("adam.step")?, "adam.step")?,
            tensors,
            config,
        })
    }
}
