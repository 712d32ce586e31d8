//! `jmvae`: train, evaluate and inspect joint multimodal VAEs.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure (or a
//! failed self-test), 3 I/O or file-format error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use jmvae_core::data::BimodalDataset;
use jmvae_core::diffcore::Tensor;
use jmvae_core::infer::{
    collapse_score, complement, eval_inputs, evaluate_dataset, extract_latent, generate_x, item_rngs, latent_csv,
    modality_shift, pgm_grid, CllOptions, InitMode, Modality,
};
use jmvae_core::models::{Model, ModelKind};
use jmvae_core::seeds::tag;
use jmvae_core::train::{train_until, Checkpoint, Config, Trainer};
use jmvae_core::{selftest, Error};

#[derive(Parser)]
#[command(name = "jmvae", version, about = "Joint multimodal variational autoencoders")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a model; resumes when --checkpoint is given.
    Train(Common),
    /// Estimate the conditional log-likelihood on the test split.
    Eval(Common),
    /// Generate images for every label as one PGM grid.
    Generate(Common),
    /// Fill in missing images with the iterative sampling chain.
    Complement(Common),
    /// Export latent means of the test split as CSV.
    Latent(Common),
    /// Edit images by changing their generated label.
    Shift(Common),
    /// Run the built-in gradient, KL and estimator checks.
    Selftest(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Model checkpoint to evaluate or resume.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

/// Rows per evaluation chunk.
const EVAL_CHUNK: usize = 500;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.verb) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("jmvae: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerics { .. } => 2,
        Error::Io(_) | Error::Format { .. } | Error::Range(_) | Error::Support(_) => 3,
        _ => 1,
    }
}

struct Session {
    verb: &'static str,
    config: Config,
    checkpoint: Option<Checkpoint>,
    checkpoint_path: Option<PathBuf>,
    out: PathBuf,
    started: Instant,
    started_unix: u64,
    notes: Vec<String>,
}

impl Session {
    fn open(verb: &'static str, args: Common) -> Result<Self, Error> {
        let started = Instant::now();
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let checkpoint = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
        let mut config = match (&args.config, &checkpoint) {
            (Some(path), _) => Config::parse(&fs::read_to_string(path)?)?,
            (None, Some(c)) => c.config.clone(),
            (None, None) => Config::default(),
        };
        for o in &args.overrides {
            config.apply_override(o)?;
        }
        if let Some(seed) = args.seed {
            config.set("seed", &seed.to_string())?;
        }
        config.validate()?;
        fs::create_dir_all(&args.out)?;
        Ok(Self {
            verb,
            config,
            checkpoint,
            checkpoint_path: args.checkpoint,
            out: args.out,
            started,
            started_unix,
            notes: Vec::new(),
        })
    }

    fn model(&self) -> Result<Model<f64>, Error> {
        match &self.checkpoint {
            Some(c) => Ok(c.model.cast()),
            None => Err(Error::Config(format!("{} needs --checkpoint", self.verb))),
        }
    }

    fn test_data(&self) -> Result<BimodalDataset, Error> {
        Ok(self.config.datasets()?.1)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
        fs::write(self.out.join(name), bytes)?;
        Ok(())
    }

    /// Config echo plus run facts as comments; the echo alone reproduces the
    /// run when passed back as `--config`.
    fn finish(&self) -> Result<(), Error> {
        let mut m = format!("# jmvae {} {}\n", self.verb, env!("CARGO_PKG_VERSION"));
        if let Some(p) = &self.checkpoint_path {
            m.push_str(&format!("# checkpoint {}\n", p.display()));
        }
        m.push_str(&format!("# started {} (unix seconds)\n", self.started_unix));
        m.push_str(&self.config.echo());
        for n in &self.notes {
            m.push_str(&format!("# {n}\n"));
        }
        m.push_str(&format!("# wall {:.3} s\n", self.started.elapsed().as_secs_f64()));
        self.write("manifest.txt", m)
    }
}

fn run(verb: Verb) -> Result<u8, Error> {
    let (name, args, f): (&'static str, Common, fn(&mut Session) -> Result<u8, Error>) = match verb {
        Verb::Train(a) => ("train", a, cmd_train),
        Verb::Eval(a) => ("eval", a, cmd_eval),
        Verb::Generate(a) => ("generate", a, cmd_generate),
        Verb::Complement(a) => ("complement", a, cmd_complement),
        Verb::Latent(a) => ("latent", a, cmd_latent),
        Verb::Shift(a) => ("shift", a, cmd_shift),
        Verb::Selftest(a) => ("selftest", a, cmd_selftest),
    };
    let mut s = Session::open(name, args)?;
    let code = f(&mut s)?;
    s.finish()?;
    Ok(code)
}

fn cmd_train(s: &mut Session) -> Result<u8, Error> {
    let (data, _) = s.config.datasets()?;
    let (mut trainer, resume) = match s.checkpoint.take() {
        Some(c) => {
            let mut t = Trainer::from_checkpoint(c);
            t.config = s.config.clone();
            (t, true)
        }
        None => (Trainer::new(&s.config, &data)?, false),
    };
    let history = train_until(&mut trainer, &data, Some(&s.out), resume)?;
    for m in &history {
        s.notes.push(format!("epoch {} wall {:.3} s", m.epoch, m.wall.as_secs_f64()));
    }
    if let Some(m) = history.last() {
        println!("epoch {} loss {:.4}", m.epoch, m.loss);
    }
    Ok(0)
}

fn cll_options(config: &Config) -> Result<CllOptions, Error> {
    Ok(CllOptions {
        direction: config.direction("eval.direction"),
        samples: config.usize("eval.samples"),
        chain_steps: config.usize("eval.chain_steps"),
        init: InitMode::parse(config.get("eval.init"))?,
        seed: config.u64("seed"),
    })
}

fn cmd_eval(s: &mut Session) -> Result<u8, Error> {
    let model = s.model()?;
    let data = s.test_data()?;
    let opts = cll_options(&s.config)?;
    let est = evaluate_dataset(&model, &data, &opts, s.config.usize("eval.items"), EVAL_CHUNK)?;
    let steps = match model.kind() {
        ModelKind::Jmvae | ModelKind::JmvaeH => opts.chain_steps,
        _ => 0,
    };
    let csv = format!(
        "model,direction,N,T,estimate,standard_error\n{},{},{},{},{},{}\n",
        model.kind(),
        opts.direction.name(),
        opts.samples,
        steps,
        est.value,
        est.std_error
    );
    s.write("eval.csv", &csv)?;
    s.notes.push(format!("items {} item spread {}", est.per_item.len(), est.item_spread));
    println!("{} {}: {:.3} +- {:.3} nats", model.kind(), opts.direction.name(), est.value, est.std_error);
    Ok(0)
}

fn image_side(x_dim: usize) -> Option<usize> {
    let side = (x_dim as f64).sqrt().round() as usize;
    (side * side == x_dim).then_some(side)
}

/// Writes rows of `x` as a PGM grid when they are square images, otherwise
/// as CSV.
fn write_images(s: &Session, stem: &str, x: &Tensor<f64>, cols: usize) -> Result<(), Error> {
    match image_side(x.shape()[1]) {
        Some(side) if side > 1 => s.write(&format!("{stem}.pgm"), pgm_grid(x, side, cols)?),
        _ => {
            let mut csv = String::new();
            for i in 0..x.rows() {
                let row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            s.write(&format!("{stem}.csv"), csv)
        }
    }
}

fn cmd_generate(s: &mut Session) -> Result<u8, Error> {
    let model = s.model()?;
    let (classes, per) = (model.spec.w_dim, s.config.usize("generate.samples"));
    let mut w = vec![0.0; classes * per * classes];
    for c in 0..classes {
        for j in 0..per {
            w[(c * per + j) * classes + c] = 1.0;
        }
    }
    let w = Tensor::from_f64(classes * per, classes, &w)?;
    let ids: Vec<u64> = (0..(classes * per) as u64).collect();
    let mut rngs = item_rngs(s.config.u64("seed"), tag::GENERATE, &ids);
    let x = generate_x(&model, &w, s.config.usize("eval.chain_steps"), &mut rngs)?;
    write_images(s, "generate", &x, per)?;
    Ok(0)
}

fn cmd_complement(s: &mut Session) -> Result<u8, Error> {
    let model = s.model()?;
    let data = s.test_data()?;
    let n = s.config.usize("complement.items").min(data.len());
    let rows: Vec<usize> = (0..n).collect();
    let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
    let (_, w) = eval_inputs(&model, &data, &rows, &ids, s.config.u64("seed"))?;
    let steps = s.config.usize("complement.steps");
    let mut rngs = item_rngs(s.config.u64("seed"), tag::ITEM_CHAIN, &ids);
    let init = InitMode::parse(s.config.get("eval.init"))?;
    let tr = complement(&model, &w, Modality::X, steps, init, &mut rngs)?;
    // one frame per chain step, items side by side, then the final mean
    let cols = n.min(10);
    for step in &tr.steps {
        write_images(s, &format!("complement_{:03}", step.iter), &step.estimate, cols)?;
    }
    write_images(s, "complement_mean", &tr.final_mean, cols)?;
    Ok(0)
}

fn cmd_latent(s: &mut Session) -> Result<u8, Error> {
    let model = s.model()?;
    let data = s.test_data()?;
    let limit = s.config.usize("eval.items");
    let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
    let rows: Vec<usize> = (0..n).collect();
    let ids: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
    let (x, w) = eval_inputs(&model, &data, &rows, &ids, s.config.u64("seed"))?;
    let inputs = s.config.get("latent.inputs");
    let (has_x, has_w) = (inputs.contains('x'), inputs.contains('w'));
    // chain-based models complement the missing modality before encoding
    let steps = match model.kind() {
        ModelKind::Jmvae | ModelKind::JmvaeH if !(has_x && has_w) => s.config.usize("eval.chain_steps"),
        _ => 0,
    };
    let init = InitMode::parse(s.config.get("eval.init"))?;
    let stats = extract_latent(
        &model,
        has_x.then_some(&x),
        has_w.then_some(&w),
        steps,
        init,
        s.config.u64("seed"),
        &ids,
    )?;
    let labels = &data.labels[..n];
    s.write("latent.csv", latent_csv(&stats, &ids, labels, has_x, has_w)?)?;
    match collapse_score(&stats.mean_points(), labels) {
        Ok(score) => {
            println!("collapse score {score:.4}");
            s.notes.push(format!("collapse score {score}"));
        }
        Err(e) => s.notes.push(format!("collapse score unavailable: {e}")),
    }
    Ok(0)
}

fn cmd_shift(s: &mut Session) -> Result<u8, Error> {
    let model = s.model()?;
    if model.kind() != ModelKind::JmvaeKl {
        return Err(Error::UnsupportedOperation(format!("shift needs jmvae-kl, not {}", model.kind())));
    }
    let data = s.test_data()?;
    let (from, to) = (s.config.usize("shift.from"), s.config.usize("shift.to"));
    let rows: Vec<usize> =
        (0..data.len()).filter(|&i| data.labels[i] == from).take(s.config.usize("shift.items")).collect();
    if rows.is_empty() {
        return Err(Error::Input(format!("no test items with label {from}")));
    }
    let x: Tensor<f64> = data.x.gather_rows(&rows)?.cast();
    let r = modality_shift(&model, &x, from, to)?;
    let n = rows.len();
    let mut both = x.data().to_vec();
    both.extend_from_slice(r.shifted.data());
    write_images(s, "shift", &Tensor::new(vec![2 * n, model.spec.x_dim], both)?, n)?;
    Ok(0)
}

fn cmd_selftest(s: &mut Session) -> Result<u8, Error> {
    let checks = selftest::run();
    let mut report = String::new();
    for c in &checks {
        report.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    print!("{report}");
    s.write("selftest.txt", &report)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    s.notes.push(format!("{} checks, {failed} failed", checks.len()));
    Ok(if failed == 0 { 0 } else { 2 })
}
