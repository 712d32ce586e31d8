//! The training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::data::{binarize, BimodalDataset};
use crate::diffcore::{Graph, Tensor};
use crate::dists::{normal_noise_single, EmissionKind};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nets::ParamId;
use crate::seeds::{self, tag};

use super::adam::{adam_step, AdamState};
use super::checkpoint::Checkpoint;
use super::config::Config;

/// Linear warm-up `min(epoch / n_t, 1)`.
pub fn warmup_weight(epoch: u64, n_t: u64) -> f64 {
    (epoch as f64 / n_t.max(1) as f64).min(1.0)
}

/// Epoch averages of the loss and of every bound term.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub beta: f64,
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
    /// Not written to the CSV, which must be reproducible.
    pub wall: Duration,
}

impl EpochMetrics {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// Append-only metrics CSV, flushed after every row.
pub struct MetricsLog {
    out: BufWriter<File>,
    header_written: bool,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?), header_written: false })
    }

    /// Appends to `path`, writing a header only if the file is new or empty.
    pub fn open_append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let header_written = file.metadata()?.len() > 0;
        Ok(Self { out: BufWriter::new(file), header_written })
    }

    pub fn header(m: &EpochMetrics) -> String {
        let mut h = String::from("epoch,beta,loss");
        for (name, _) in &m.terms {
            h.push(',');
            h.push_str(name);
        }
        h
    }

    pub fn row(m: &EpochMetrics) -> String {
        let mut r = format!("{},{},{}", m.epoch, m.beta, m.loss);
        for (_, v) in &m.terms {
            r.push_str(&format!(",{v}"));
        }
        r
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        if !self.header_written {
            writeln!(self.out, "{}", Self::header(m))?;
            self.header_written = true;
        }
        writeln!(self.out, "{}", Self::row(m))?;
        self.out.flush()?;
        Ok(())
    }
}

/// Model, optimizer state and configuration of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: Config,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: &Config, data: &BimodalDataset) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec(data)?;
        let model = Model::new(spec, config.u64("seed"))?;
        let adam = AdamState::new(&model.params);
        Ok(Self { config: config.clone(), model, adam, epoch: 0 })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Self { config: c.config, model: c.model, adam: c.adam, epoch: c.epoch }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), adam: self.adam.clone(), epoch: self.epoch, config: self.config.clone() }
    }

    fn check_data(&self, data: &BimodalDataset) -> Result<()> {
        let s = &self.model.spec;
        if data.x_dim() != s.x_dim || data.w_dim() != s.w_dim || data.x_kind != s.x_emission || data.w_kind != s.w_emission {
            return Err(Error::Input(format!(
                "dataset ({} {}, {} {}) does not match the model ({} {}, {} {})",
                data.x_dim(),
                data.x_kind.name(),
                data.w_dim(),
                data.w_kind.name(),
                s.x_dim,
                s.x_emission.name(),
                s.w_dim,
                s.w_emission.name()
            )));
        }
        if data.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        Ok(())
    }

    /// One pass over `data` with a fresh shuffle, binarization and noise.
    pub fn run_epoch(&mut self, data: &BimodalDataset) -> Result<EpochMetrics> {
        self.check_data(data)?;
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let seed = self.config.u64("seed");
        let beta = warmup_weight(epoch, self.config.u64("warmup_epochs"));
        let opts = self.config.bound_options(beta);
        let lr = self.config.f64("learning_rate");
        let batch = self.config.usize("batch_size");
        let latent = self.model.spec.latent_dim;

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeds::rng(seed, &[tag::SHUFFLE, epoch]));

        let mut loss_sum = 0.0;
        let mut term_sums: Vec<(&'static str, f64)> = Vec::new();
        for (b, rows) in order.chunks(batch).enumerate() {
            let key = [epoch, b as u64];
            let mut x = data.x.gather_rows(rows)?;
            if data.x_kind == EmissionKind::Bernoulli {
                x = binarize(&x, &mut seeds::rng(seed, &[tag::BINARIZE, key[0], key[1]]))?;
            }
            let w = data.w.gather_rows(rows)?;
            let mut nrng = seeds::rng(seed, &[tag::NOISE, key[0], key[1]]);
            let noise: Vec<Tensor<f32>> = (0..self.model.noise_count(opts.samples))
                .map(|_| normal_noise_single(&mut nrng, rows.len(), latent))
                .collect();

            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let xv = g.constant(x);
            let wv = g.constant(w);
            let obj = self.model.objective(&mut g, &p, xv, wv, &noise, &opts)?;
            let mut grads = g.backward(obj.loss)?;
            let grads: Vec<Tensor<f32>> = (0..self.model.params.len()).map(|i| grads.take(p.var(ParamId(i)))).collect();
            adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;

            let weight = rows.len() as f64;
            loss_sum += weight * g.value(obj.loss).item() as f64;
            if term_sums.is_empty() {
                term_sums = obj.terms.iter().map(|t| (t.name, 0.0)).collect();
            }
            for (acc, t) in term_sums.iter_mut().zip(&obj.terms) {
                acc.1 += weight * g.value(t.mean).item() as f64;
            }
        }
        let n = data.len() as f64;
        self.epoch = epoch;
        Ok(EpochMetrics {
            epoch,
            beta,
            loss: loss_sum / n,
            terms: term_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            wall: start.elapsed(),
        })
    }
}

/// Trains for the configured number of epochs. With `out`, appends to
/// `out/metrics.csv` and rewrites `out/checkpoint.jmvl` after every epoch, so
/// a failure leaves the last good checkpoint in place.
pub fn train(config: &Config, data: &BimodalDataset, out: Option<&Path>) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(config, data)?;
    let history = train_until(&mut trainer, data, out, false)?;
    Ok((trainer, history))
}

/// Runs the remaining epochs of `trainer.config`. With `resume`, rows are
/// appended to an existing metrics file instead of replacing it.
pub fn train_until(trainer: &mut Trainer, data: &BimodalDataset, out: Option<&Path>, resume: bool) -> Result<Vec<EpochMetrics>> {
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            Some(if resume { MetricsLog::open_append(&path)? } else { MetricsLog::create(&path)? })
        }
        None => None,
    };
    let mut history = Vec::new();
    while trainer.epoch < trainer.config.u64("epochs") {
        let m = trainer.run_epoch(data)?;
        if let (Some(log), Some(dir)) = (log.as_mut(), out) {
            log.append(&m)?;
            trainer.checkpoint().save(&dir.join("checkpoint.jmvl"))?;
        }
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_examples() {
        assert_eq!(warmup_weight(1, 200), 0.005);
        assert_eq!(warmup_weight(200, 200), 1.0);
        assert_eq!(warmup_weight(2000, 200), 1.0);
        let mut last = 0.0;
        for e in 1..500 {
            let b = warmup_weight(e, 37);
            assert!(b >= last);
            last = b;
        }
    }
}
