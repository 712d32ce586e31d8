use super::*;
use crate::dists::normal_noise_single;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X_DIM: usize = 6;
const W_DIM: usize = 3;
const LATENT: usize = 2;

fn toy_spec(kind: ModelKind) -> ModelSpec {
    toy_spec_dir(kind, Direction::XGivenW)
}

fn toy_spec_dir(kind: ModelKind, direction: Direction) -> ModelSpec {
    let mut spec = ModelSpec::new(kind, (X_DIM, EmissionKind::Bernoulli), (W_DIM, EmissionKind::Categorical), LATENT)
        .with_direction(direction);
    for role in Role::ALL {
        let arch = match role {
            Role::EncXW => "(D4R, D3R)-D5R",
            Role::TailH2 => "D3-D4R",
            _ => "D5R",
        };
        spec = spec.with_arch(role, arch).unwrap();
    }
    spec
}

fn toy_batch(seed: u64, batch: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..batch * X_DIM).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0; batch * W_DIM];
    for i in 0..batch {
        w[i * W_DIM + rng.random_range(0..W_DIM)] = 1.0;
    }
    (Tensor::from_f64(batch, X_DIM, &x).unwrap(), Tensor::from_f64(batch, W_DIM, &w).unwrap())
}

fn noise_for(model: &Model<f64>, seed: u64, batch: usize, samples: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..model.noise_count(samples))
        .map(|_| normal_noise_single(&mut rng, batch, model.spec.latent_dim))
        .collect()
}

struct Eval {
    loss: f64,
    terms: Vec<(&'static str, TermKind, f64)>,
}

fn evaluate(model: &Model<f64>, x: &Tensor<f64>, w: &Tensor<f64>, noise: &[Tensor<f64>], opts: &BoundOptions) -> Eval {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let obj = model.objective(&mut g, &p, xv, wv, noise, opts).unwrap();
    Eval {
        loss: g.value(obj.loss).item(),
        terms: obj.terms.iter().map(|t| (t.name, t.kind, g.value(t.mean).item())).collect(),
    }
}

fn recon_sum(e: &Eval) -> f64 {
    e.terms.iter().filter(|t| t.1 == TermKind::Reconstruction).map(|t| t.2).sum()
}

#[test]
fn kinds_and_roles() {
    for kind in ModelKind::ALL {
        assert_eq!(ModelKind::parse(kind.name()).unwrap(), kind);
    }
    assert!(ModelKind::parse("gan").is_err());
    assert_eq!(ModelKind::JmvaeKl.roles(Direction::XGivenW).len(), 5);
    assert_eq!(ModelKind::Cvae.roles(Direction::WGivenX), &[Role::EncXW, Role::DecW]);
    assert_eq!(Direction::parse("w|x").unwrap(), Direction::WGivenX);
}

#[test]
fn zero_beta_removes_every_divergence() {
    for kind in ModelKind::ALL {
        let model = Model::<f64>::new(toy_spec(kind), 3).unwrap();
        let (x, w) = toy_batch(1, 5);
        let noise = noise_for(&model, 2, 5, 1);
        let opts = BoundOptions { beta: 0.0, ..Default::default() };
        let e = evaluate(&model, &x, &w, &noise, &opts);
        assert_eq!(e.loss, -recon_sum(&e), "{kind}");
        assert!(e.terms.iter().any(|t| t.1 != TermKind::Reconstruction && t.2 > 0.0));
    }
}

fn zero_params(model: &mut Model<f64>) {
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Bias that makes a softplus variance head output exactly 1 after the floor.
fn unit_variance_bias() -> f64 {
    let target = 1.0 - crate::dists::VARIANCE_FLOOR;
    target.exp_m1().ln()
}

#[test]
fn vae_with_prior_encoder_and_coin_decoder_costs_784_ln2() {
    let spec = ModelSpec::new(ModelKind::Vae, (784, EmissionKind::Bernoulli), (10, EmissionKind::Categorical), 4)
        .with_arch(Role::EncX, "D8R")
        .unwrap()
        .with_arch(Role::DecX, "D8R")
        .unwrap();
    let mut model = Model::<f64>::new(spec, 0).unwrap();
    zero_params(&mut model);
    let vb = model.params.find("enc_x.var.b").unwrap();
    model.params.get_mut(vb).data_mut().iter_mut().for_each(|v| *v = unit_variance_bias());
    let x = Tensor::zeros(&[1, 784]);
    let w = Tensor::zeros(&[1, 10]);
    let noise = noise_for(&model, 0, 1, 1);
    let e = evaluate(&model, &x, &w, &noise, &BoundOptions::default());
    assert!((e.loss - 784.0 * 2f64.ln()).abs() < 1e-9, "{}", e.loss);
    assert!((e.loss - 543.43).abs() < 0.01);
}

#[test]
fn jmvae_at_zero_initialization_reconstructs_analytically() {
    let spec = ModelSpec::new(ModelKind::Jmvae, (784, EmissionKind::Bernoulli), (10, EmissionKind::Categorical), 4)
        .with_arch(Role::EncXW, "(D8R, D8R)")
        .unwrap()
        .with_arch(Role::DecX, "D8R")
        .unwrap()
        .with_arch(Role::DecW, "D8R")
        .unwrap();
    let mut model = Model::<f64>::new(spec, 0).unwrap();
    zero_params(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<f64> = (0..784).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let mut ws = vec![0.0; 10];
    ws[7] = 1.0;
    let x = Tensor::from_f64(1, 784, &xs).unwrap();
    let w = Tensor::from_f64(1, 10, &ws).unwrap();
    let noise = noise_for(&model, 5, 1, 1);
    let e = evaluate(&model, &x, &w, &noise, &BoundOptions { beta: 0.0, ..Default::default() });
    let expected = 784.0 * 2f64.ln() + 10f64.ln();
    assert!((-recon_sum(&e) - expected).abs() < 1e-9);
    assert!((e.loss - expected).abs() < 1e-9);
}

#[test]
fn pinned_jmvae_kl_equals_jmvae_bit_for_bit() {
    let kl_model = Model::<f64>::new(toy_spec(ModelKind::JmvaeKl), 11).unwrap();
    let mut jm = Model::<f64>::new(toy_spec(ModelKind::Jmvae), 0).unwrap();
    let ids: Vec<_> = jm.params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        *jm.params.get_mut(id) = kl_model.params.get(kl_model.params.find(&name).unwrap()).clone();
    }
    for seed in 0..10 {
        let (x, w) = toy_batch(seed, 7);
        let noise = noise_for(&jm, seed + 100, 7, 1);
        for beta in [0.3, 1.0] {
            let mut opts = BoundOptions { beta, ..Default::default() };
            let a = evaluate(&jm, &x, &w, &noise, &opts);
            opts.pins.unimodal_to_joint = true;
            let b = evaluate(&kl_model, &x, &w, &noise, &opts);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert!(b.terms.iter().filter(|t| t.1 == TermKind::MatchDivergence).all(|t| t.2 == 0.0));
        }
    }
}

#[test]
fn divergences_are_nonnegative_for_random_inputs() {
    for kind in [ModelKind::JmvaeKl, ModelKind::JmvaeH] {
        for seed in 0..20 {
            let model = Model::<f64>::new(toy_spec(kind), seed).unwrap();
            let (x, w) = toy_batch(seed + 50, 6);
            let noise = noise_for(&model, seed, 6, 2);
            let opts = BoundOptions { samples: 2, ..Default::default() };
            let e = evaluate(&model, &x, &w, &noise, &opts);
            for t in e.terms.iter().filter(|t| t.1 != TermKind::Reconstruction) {
                assert!(t.2 > 0.0, "{kind} {}", t.0);
            }
        }
    }
}

#[test]
fn pinned_hierarchical_prior_zeroes_the_layer_one_kl() {
    let model = Model::<f64>::new(toy_spec(ModelKind::JmvaeH), 2).unwrap();
    let (x, w) = toy_batch(9, 5);
    let noise = noise_for(&model, 1, 5, 1);
    let mut opts = BoundOptions::default();
    opts.pins.prior_z1_to_posterior = true;
    let e = evaluate(&model, &x, &w, &noise, &opts);
    let kl1 = e.terms.iter().find(|t| t.0 == "kl_z1").unwrap().2;
    assert_eq!(kl1, 0.0);
    assert!(e.terms.iter().find(|t| t.0 == "kl_z2").unwrap().2 > 0.0);
}

#[test]
fn warmup_scope_controls_match_terms() {
    let model = Model::<f64>::new(toy_spec(ModelKind::JmvaeKl), 8).unwrap();
    let (x, w) = toy_batch(3, 4);
    let noise = noise_for(&model, 3, 4, 1);
    let opts = BoundOptions { beta: 0.0, scope: WarmupScope::PriorOnly, match_weight: 2.0, ..Default::default() };
    let e = evaluate(&model, &x, &w, &noise, &opts);
    let matched: f64 = e.terms.iter().filter(|t| t.1 == TermKind::MatchDivergence).map(|t| t.2).sum();
    assert!((e.loss - (-recon_sum(&e) + 2.0 * matched)).abs() < 1e-12);
}

#[test]
fn every_bound_passes_finite_differences() {
    for kind in ModelKind::ALL {
        for seed in 0..3 {
            let err = crate::selftest::bound_gradient_report(kind, seed).unwrap().max_error;
            assert!(err < 1e-4, "{kind} seed {seed}: {err}");
        }
    }
}

/// Folds a constant input block of the first layer into its bias.
fn fold_constant(cvae: &Model<f64>, vae: &mut Model<f64>, from: &str, to: &str, keep_rows: usize, constant: &[f64]) {
    for (id, name, _) in vae.params.iter().map(|(i, n, t)| (i, n.to_string(), t.clone())).collect::<Vec<_>>() {
        if !name.starts_with(&format!("{to}.")) {
            continue;
        }
        let src_name = name.replacen(to, from, 1);
        let src = cvae.params.get(cvae.params.find(&src_name).unwrap());
        let dst = vae.params.get_mut(id);
        if name == format!("{to}.t.l0.w") {
            let cols = src.shape()[1];
            dst.data_mut().copy_from_slice(&src.data()[..keep_rows * cols]);
        } else if name == format!("{to}.t.l0.b") {
            let w = cvae.params.get(cvae.params.find(&format!("{from}.t.l0.w")).unwrap());
            let cols = w.shape()[1];
            for (j, b) in dst.data_mut().iter_mut().enumerate() {
                *b = src.data()[j]
                    + constant.iter().enumerate().map(|(k, c)| c * w.data()[(keep_rows + k) * cols + j]).sum::<f64>();
            }
        } else {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

#[test]
fn cvae_with_constant_condition_equals_vae_with_folded_bias() {
    let cvae_spec = toy_spec(ModelKind::Cvae).with_arch(Role::EncXW, "D5R-D4R").unwrap();
    let cvae = Model::<f64>::new(cvae_spec, 21).unwrap();
    let vae_spec = toy_spec(ModelKind::Vae).with_arch(Role::EncX, "D5R-D4R").unwrap();
    let mut vae = Model::<f64>::new(vae_spec, 0).unwrap();
    let constant = [0.0, 1.0, 0.0];
    fold_constant(&cvae, &mut vae, "enc_xw", "enc_x", X_DIM, &constant);
    fold_constant(&cvae, &mut vae, "dec_x", "dec_x", LATENT, &constant);

    let (x, _) = toy_batch(5, 8);
    let w = Tensor::from_f64(8, W_DIM, &constant.repeat(8)).unwrap();
    let noise = noise_for(&cvae, 6, 8, 1);
    let opts = BoundOptions::default();
    let a = evaluate(&cvae, &x, &w, &noise, &opts);
    let b = evaluate(&vae, &x, &w, &noise, &opts);
    assert!((a.loss - b.loss).abs() < 1e-10, "{} vs {}", a.loss, b.loss);
}

#[test]
fn with_params_validates_layout() {
    let model = Model::<f32>::new(toy_spec(ModelKind::Jmvae), 1).unwrap();
    let again = Model::with_params(model.spec.clone(), model.params.clone()).unwrap();
    assert_eq!(again.params.tensors(), model.params.tensors());
    let other = Model::<f32>::new(toy_spec(ModelKind::JmvaeKl), 1).unwrap();
    assert!(Model::with_params(model.spec.clone(), other.params).is_err());
}
