use jmvae_core::diffcore::{Graph, Tensor};
use jmvae_core::dists::{normal_noise, sample_emission, EmissionKind};
use jmvae_core::infer::{
    collapse_score, complement, cond_loglik, extract_latent, item_rngs, modality_shift, nested_estimate,
    shift_with_labels, reconstruct_from_w, CllOptions, InitMode, Modality,
};
use jmvae_core::models::{Direction, Model, ModelKind, ModelSpec, Role};
use jmvae_core::seeds::tag;
use jmvae_core::Error;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    v.exp().ln_1p()
}

/// log Bernoulli(x; sigmoid(l)) with the library's probability clamp.
fn log_bern(x: f64, l: f64) -> f64 {
    let p = sigmoid(l).clamp(1e-7, 1.0 - 1e-7);
    x * p.ln() + (1.0 - x) * (1.0 - p).ln()
}

/// `E[f(z)]` for `z ~ N(m, v)` by the trapezoid rule over +-12 sd.
fn gauss_expect(m: f64, v: f64, points: usize, f: impl Fn(f64) -> f64) -> f64 {
    let s = v.sqrt();
    let h = 24.0 * s / (points - 1) as f64;
    let mut acc = 0.0;
    for i in 0..points {
        let z = m - 12.0 * s + i as f64 * h;
        let wgt = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
        let dens = (-(z - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        acc += wgt * dens * f(z);
    }
    acc * h
}

/// One-dimensional bimodal model: `x` is a single Bernoulli pixel, `w` has
/// two classes, the latent is scalar and every network is a single linear
/// unit.
fn scalar_model(kind: ModelKind) -> Model<f64> {
    let mut spec = ModelSpec::new(kind, (1, EmissionKind::Bernoulli), (2, EmissionKind::Categorical), 1);
    for role in Role::ALL {
        spec = spec.with_arch(role, "D1").unwrap();
    }
    Model::new(spec, 0).unwrap()
}

fn set(model: &mut Model<f64>, name: &str, values: &[f64]) {
    let id = model.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = model.params.get_mut(id);
    assert_eq!(t.numel(), values.len(), "{name}");
    t.data_mut().copy_from_slice(values);
}

/// Decoder logit `1.5 z - 0.4`.
fn set_decoder(model: &mut Model<f64>) {
    set(model, "dec_x.t.l0.w", &[1.0]);
    set(model, "dec_x.t.l0.b", &[0.0]);
    set(model, "dec_x.mu.w", &[1.5]);
    set(model, "dec_x.mu.b", &[-0.4]);
}

fn decoder_logit(z: f64) -> f64 {
    1.5 * z - 0.4
}

fn one_hot_rows(classes: &[usize], dim: usize) -> Tensor<f64> {
    let mut v = vec![0.0; classes.len() * dim];
    for (i, &c) in classes.iter().enumerate() {
        v[i * dim + c] = 1.0;
    }
    Tensor::from_f64(classes.len(), dim, &v).unwrap()
}

fn column(values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(values.len(), 1, values).unwrap()
}

fn ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

#[test]
fn unimodal_estimate_matches_quadrature() {
    let mut model = scalar_model(ModelKind::JmvaeKl);
    // q(z|w): mean 0.2 +- 0.8, variance softplus(-0.2 +- 0.3)
    set(&mut model, "enc_w.t.l0.w", &[1.0, -1.0]);
    set(&mut model, "enc_w.t.l0.b", &[0.0]);
    set(&mut model, "enc_w.mu.w", &[0.8]);
    set(&mut model, "enc_w.mu.b", &[0.2]);
    set(&mut model, "enc_w.var.w", &[0.3]);
    set(&mut model, "enc_w.var.b", &[-0.2]);
    set_decoder(&mut model);

    let n = 10_000;
    let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let xs: Vec<f64> = (0..n).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
    let (x, w) = (column(&xs), one_hot_rows(&classes, 2));
    let opts = CllOptions { samples: 4, seed: 3, ..CllOptions::default() };
    let est = cond_loglik(&model, &x, &w, &ids(n), &opts).unwrap();

    let mut oracle = 0.0;
    let mut marginal = 0.0;
    for (c, xv) in [(0, 1.0), (1, 1.0), (0, 0.0), (1, 0.0)] {
        let sign = if c == 0 { 1.0 } else { -1.0 };
        let (m, v) = (0.2 + 0.8 * sign, softplus(-0.2 + 0.3 * sign) + 1e-6);
        oracle += gauss_expect(m, v, 4001, |z| log_bern(xv, decoder_logit(z))) / 4.0;
        marginal += gauss_expect(m, v, 4001, |z| log_bern(xv, decoder_logit(z)).exp()).ln() / 4.0;
    }
    assert!(est.std_error > 0.0);
    assert!(
        (est.value - oracle).abs() < 3.0 * est.std_error,
        "estimate {} oracle {} se {}",
        est.value,
        oracle,
        est.std_error
    );
    assert!(oracle < marginal, "the single-level estimate bounds the marginal from below");
}

#[test]
fn nested_estimate_matches_two_dimensional_quadrature() {
    let mut model = scalar_model(ModelKind::JmvaeH);
    // p(z1|z2) = N(0.7 z2 + 0.1, softplus(0.4 z2 - 0.5))
    set(&mut model, "prior_z1.t.l0.w", &[1.0]);
    set(&mut model, "prior_z1.t.l0.b", &[0.0]);
    set(&mut model, "prior_z1.mu.w", &[0.7]);
    set(&mut model, "prior_z1.mu.b", &[0.1]);
    set(&mut model, "prior_z1.var.w", &[0.4]);
    set(&mut model, "prior_z1.var.b", &[-0.5]);
    set_decoder(&mut model);

    let n = 4000;
    let (q_mean, q_var) = (0.3, 0.5);
    let mut rngs = item_rngs(11, tag::ITEM_ESTIMATE, &ids(n));
    let est = nested_estimate(
        &model,
        &column(&vec![q_mean; n]),
        &column(&vec![q_var; n]),
        Modality::X,
        &column(&vec![1.0; n]),
        8,
        &mut rngs,
    )
    .unwrap();
    assert!(est.hierarchical);

    let oracle = gauss_expect(q_mean, q_var, 801, |z2| {
        let (m1, v1) = (0.7 * z2 + 0.1, softplus(0.4 * z2 - 0.5) + 1e-6);
        gauss_expect(m1, v1, 801, |z1| log_bern(1.0, decoder_logit(z1)))
    });
    assert!(
        (est.value - oracle).abs() < 3.0 * est.std_error,
        "estimate {} oracle {} se {}",
        est.value,
        oracle,
        est.std_error
    );
}

/// JMVAE whose joint encoder gives `q(z | x, w)` with mean `h` and variance
/// `softplus(0.5 h - 1)`, `h = 1.2 x + 0.5 w0 - 0.5 w1 - 0.6`.
fn chain_model() -> Model<f64> {
    let mut model = scalar_model(ModelKind::Jmvae);
    set(&mut model, "enc_xw.t.l0.w", &[1.2, 0.5, -0.5]);
    set(&mut model, "enc_xw.t.l0.b", &[-0.6]);
    set(&mut model, "enc_xw.mu.w", &[1.0]);
    set(&mut model, "enc_xw.mu.b", &[0.0]);
    set(&mut model, "enc_xw.var.w", &[0.5]);
    set(&mut model, "enc_xw.var.b", &[-1.0]);
    set_decoder(&mut model);
    model
}

/// `P(x' = 1 | x)` for class 0.
fn chain_transition(x: f64) -> f64 {
    let h = 1.2 * x + 0.5 - 0.6;
    gauss_expect(h, softplus(0.5 * h - 1.0) + 1e-6, 4001, |z| sigmoid(decoder_logit(z)))
}

#[test]
fn complement_chain_follows_the_discretized_transition_matrix() {
    let model = chain_model();
    let p = [[1.0 - chain_transition(0.0), chain_transition(0.0)], [1.0 - chain_transition(1.0), chain_transition(1.0)]];
    let step = |d: [f64; 2]| [d[0] * p[0][0] + d[1] * p[1][0], d[0] * p[0][1] + d[1] * p[1][1]];

    let mut stationary = [0.5, 0.5];
    for _ in 0..10_000 {
        stationary = step(stationary);
    }
    let mut after = [[1.0, 0.0]; 4];
    for t in 1..4 {
        after[t] = step(after[t - 1]);
    }

    let n = 20_000;
    let w = one_hot_rows(&vec![0; n], 2);
    let mut rngs = item_rngs(5, tag::ITEM_CHAIN, &ids(n));
    let tr = complement(&model, &w, Modality::X, 40, InitMode::Zero, &mut rngs).unwrap();
    assert_eq!(tr.steps.len(), 41);
    let frac = |t: usize| tr.steps[t].estimate.data().iter().sum::<f64>() / n as f64;
    let tol = |q: f64| 4.0 * (q * (1.0 - q) / n as f64).sqrt();
    for t in 1..4 {
        assert!((frac(t) - after[t][1]).abs() < tol(after[t][1]), "step {t}: {} vs {}", frac(t), after[t][1]);
    }
    assert!(
        (frac(40) - stationary[1]).abs() < tol(stationary[1]),
        "fixed point {} vs {}",
        frac(40),
        stationary[1]
    );
}

fn toy_model(kind: ModelKind, direction: Direction, seed: u64) -> Model<f64> {
    let mut spec = ModelSpec::new(kind, (6, EmissionKind::Bernoulli), (3, EmissionKind::Categorical), 2)
        .with_direction(direction);
    for role in Role::ALL {
        let arch = match role {
            Role::EncXW => "(D8R, D4R)-D8R",
            Role::TailH2 => "D3-D6R",
            _ => "D8R",
        };
        spec = spec.with_arch(role, arch).unwrap();
    }
    Model::new(spec, seed).unwrap()
}

fn toy_items(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rngs = item_rngs(seed, 99, &ids(n));
    let probs = Tensor::full(&[n, 6], 0.4);
    let x = sample_emission(EmissionKind::Bernoulli, &probs, &mut rngs).unwrap();
    let classes: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
    (x, one_hot_rows(&classes, 3))
}

#[test]
fn decoder_that_ignores_the_latent_gives_an_exact_estimate() {
    for kind in [ModelKind::Jmvae, ModelKind::JmvaeKl, ModelKind::JmvaeH] {
        let mut model = toy_model(kind, Direction::XGivenW, 1);
        let id = model.params.find("dec_x.mu.w").unwrap();
        model.params.get_mut(id).data_mut().fill(0.0);
        let bias: Vec<f64> = (0..6).map(|j| 0.3 * j as f64 - 0.8).collect();
        set(&mut model, "dec_x.mu.b", &bias);
        let (x, w) = toy_items(12, 2);
        let est = cond_loglik(&model, &x, &w, &ids(12), &CllOptions::default()).unwrap();
        assert_eq!(est.std_error, 0.0, "{kind}");
        for (i, v) in est.per_item.iter().enumerate() {
            let exact: f64 = x.row(i).iter().zip(&bias).map(|(&xv, &b)| log_bern(xv, b)).sum();
            assert!((v - exact).abs() < 1e-12, "{kind} item {i}: {v} vs {exact}");
        }
    }
}

#[test]
fn one_step_complement_equals_a_manual_pass() {
    for kind in [ModelKind::Jmvae, ModelKind::JmvaeH] {
        let model = toy_model(kind, Direction::XGivenW, 4);
        let (_, w) = toy_items(5, 1);
        let items = [10, 11, 12, 13, 14];
        let mut rngs = item_rngs(8, tag::ITEM_CHAIN, &items);
        let tr = complement(&model, &w, Modality::X, 1, InitMode::Zero, &mut rngs).unwrap();

        let mut rngs = item_rngs(8, tag::ITEM_CHAIN, &items);
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let x0 = g.constant(Tensor::zeros(&[5, 6]));
        let wv = g.constant(w.clone());
        let (q, _) = model.encode_joint(&mut g, &p, x0, wv).unwrap();
        let e = normal_noise(&mut rngs, 2);
        let e = g.constant(e);
        let z = q.rsample(&mut g, e).unwrap();
        let d = model.decode_x(&mut g, &p, z, None).unwrap();
        let x1 = sample_emission(EmissionKind::Bernoulli, g.value(d.mean()), &mut rngs).unwrap();

        assert_eq!(tr.steps[1].estimate, x1, "{kind}");
        assert_eq!(tr.steps[1].latent.as_ref().unwrap(), g.value(z));
        assert_eq!(&tr.final_mean, g.value(d.mean()));
    }
}

#[test]
fn complement_is_rejected_for_models_without_a_chain() {
    let model = toy_model(ModelKind::JmvaeKl, Direction::XGivenW, 0);
    let (_, w) = toy_items(2, 0);
    let mut rngs = item_rngs(0, tag::ITEM_CHAIN, &ids(2));
    let err = complement(&model, &w, Modality::X, 3, InitMode::Zero, &mut rngs).unwrap_err();
    assert!(matches!(err, Error::UnsupportedOperation(_)), "{err}");
}

#[test]
fn estimates_are_deterministic_and_independent_of_batching() {
    for kind in [ModelKind::Jmvae, ModelKind::JmvaeKl, ModelKind::JmvaeH, ModelKind::Cvae] {
        let model = toy_model(kind, Direction::XGivenW, 2);
        let (x, w) = toy_items(10, 3);
        let opts = CllOptions { samples: 3, chain_steps: 4, init: InitMode::Prior, seed: 9, ..CllOptions::default() };
        let all = cond_loglik(&model, &x, &w, &ids(10), &opts).unwrap();
        assert_eq!(all, cond_loglik(&model, &x, &w, &ids(10), &opts).unwrap(), "{kind}");

        let head: Vec<usize> = (0..4).collect();
        let tail: Vec<usize> = (4..10).collect();
        let a = cond_loglik(&model, &x.gather_rows(&head).unwrap(), &w.gather_rows(&head).unwrap(), &ids(4), &opts).unwrap();
        let tail_ids: Vec<u64> = (4..10).collect();
        let b = cond_loglik(&model, &x.gather_rows(&tail).unwrap(), &w.gather_rows(&tail).unwrap(), &tail_ids, &opts)
            .unwrap();
        let split: Vec<f64> = a.per_item.iter().chain(&b.per_item).copied().collect();
        assert_eq!(split, all.per_item, "{kind}");
    }
}

#[test]
fn standard_error_shrinks_as_one_over_root_n() {
    for kind in [ModelKind::JmvaeKl, ModelKind::Jmvae, ModelKind::JmvaeH] {
        let model = toy_model(kind, Direction::WGivenX, 6);
        let (x, w) = toy_items(200, 4);
        let se: Vec<f64> = [10, 40, 160]
            .iter()
            .map(|&n| {
                let opts = CllOptions { direction: Direction::WGivenX, samples: n, chain_steps: 3, ..CllOptions::default() };
                cond_loglik(&model, &x, &w, &ids(200), &opts).unwrap().std_error
            })
            .collect();
        for pair in se.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((1.6..2.5).contains(&ratio), "{kind}: {se:?}");
        }
    }
}

#[test]
fn cvae_estimate_requires_its_own_direction() {
    let model = toy_model(ModelKind::Cvae, Direction::XGivenW, 0);
    let (x, w) = toy_items(3, 0);
    let opts = CllOptions { direction: Direction::WGivenX, ..CllOptions::default() };
    assert!(matches!(cond_loglik(&model, &x, &w, &ids(3), &opts), Err(Error::UnsupportedOperation(_))));
    let vae = toy_model(ModelKind::Vae, Direction::XGivenW, 0);
    assert!(cond_loglik(&vae, &x, &w, &ids(3), &CllOptions::default()).is_err());
}

#[test]
fn latent_extraction_covers_each_input_combination() {
    let (x, w) = toy_items(6, 5);
    let kl = toy_model(ModelKind::JmvaeKl, Direction::XGivenW, 1);
    for (xi, wi) in [(Some(&x), None), (None, Some(&w)), (Some(&x), Some(&w))] {
        let s = extract_latent(&kl, xi, wi, 0, InitMode::Zero, 0, &ids(6)).unwrap();
        assert_eq!(s.mean.shape(), &[6, 2]);
    }
    assert!(matches!(extract_latent(&kl, None, None, 0, InitMode::Zero, 0, &[]), Err(Error::Input(_))));

    let j = toy_model(ModelKind::Jmvae, Direction::XGivenW, 1);
    let zero = extract_latent(&j, Some(&x), None, 0, InitMode::Zero, 0, &ids(6)).unwrap();
    let mut g = Graph::new();
    let p = j.params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::zeros(&[6, 3]));
    let (q, _) = j.encode_joint(&mut g, &p, xv, wv).unwrap();
    assert_eq!(&zero.mean, g.value(q.mean));
    let chained = extract_latent(&j, Some(&x), None, 3, InitMode::Zero, 0, &ids(6)).unwrap();
    assert_ne!(chained.mean, zero.mean);

    let h = toy_model(ModelKind::JmvaeH, Direction::XGivenW, 1);
    assert_eq!(extract_latent(&h, Some(&x), Some(&w), 0, InitMode::Zero, 0, &ids(6)).unwrap().mean.shape(), &[6, 2]);
}

#[test]
fn collapse_score_separates_clusters_from_noise() {
    let separated: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64 * 10.0, 0.0]).collect();
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    assert!((collapse_score(&separated, &labels).unwrap() - 1.0).abs() < 1e-12);

    // both classes share the same mean
    let mixed: Vec<Vec<f64>> = (0..20).map(|i| vec![if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }, 0.0]).collect();
    assert!(collapse_score(&mixed, &labels).unwrap().abs() < 1e-12);

    let collapsed = vec![vec![0.5, 0.5]; 20];
    assert_eq!(collapse_score(&collapsed, &labels).unwrap(), 0.0);

    assert!(matches!(collapse_score(&separated, &[0; 20]), Err(Error::Input(_))));
    assert!(matches!(collapse_score(&separated[..3], &[0, 0, 1]), Err(Error::Input(_))));
}

#[test]
fn shift_by_identical_labels_returns_the_input() {
    let model = toy_model(ModelKind::JmvaeKl, Direction::XGivenW, 3);
    let (x, w) = toy_items(4, 6);
    assert_eq!(shift_with_labels(&model, &x, &w, &w).unwrap(), x);

    let r = modality_shift(&model, &x, 0, 2).unwrap();
    for i in 0..4 {
        assert_eq!(r.w.row(i)[0], r.w_edited.row(i)[2]);
        assert_eq!(r.w.row(i)[1], r.w_edited.row(i)[1]);
    }
    let base = reconstruct_from_w(&model, &r.w).unwrap();
    let edited = reconstruct_from_w(&model, &r.w_edited).unwrap();
    for ((s, xv), (b, e)) in r.shifted.data().iter().zip(x.data()).zip(base.data().iter().zip(edited.data())) {
        assert!((s - (xv + e - b).clamp(0.0, 1.0)).abs() < 1e-15);
    }
    let j = toy_model(ModelKind::Jmvae, Direction::XGivenW, 3);
    assert!(matches!(modality_shift(&j, &x, 0, 1), Err(Error::UnsupportedOperation(_))));
}

#[test]
fn shift_then_inverse_edit_returns_the_input() {
    let mut spec = ModelSpec::new(ModelKind::JmvaeKl, (6, EmissionKind::Gaussian), (3, EmissionKind::Categorical), 2);
    for role in Role::ALL {
        spec = spec.with_arch(role, "D8R").unwrap();
    }
    let gaussian = Model::new(spec, 4).unwrap();
    let (x, w) = toy_items(5, 8);
    let edited = one_hot_rows(&[2, 0, 1, 2, 0], 3);
    let there = shift_with_labels(&gaussian, &x, &w, &edited).unwrap();
    let back = shift_with_labels(&gaussian, &there, &edited, &w).unwrap();
    for (b, xv) in back.data().iter().zip(x.data()) {
        assert!((b - xv).abs() < 1e-12);
    }

    // Bernoulli images are clamped; interior pixels with a small shift come back exactly
    let model = toy_model(ModelKind::JmvaeKl, Direction::XGivenW, 3);
    let x = Tensor::full(&[5, 6], 0.5);
    let there = shift_with_labels(&model, &x, &w, &edited).unwrap();
    let back = shift_with_labels(&model, &there, &edited, &w).unwrap();
    for (i, (b, xv)) in back.data().iter().zip(x.data()).enumerate() {
        let t = there.data()[i];
        if t > 0.0 && t < 1.0 {
            assert!((b - xv).abs() < 1e-12);
        } else {
            assert!((b - xv).abs() <= 0.5 + 1e-12);
        }
    }
}
