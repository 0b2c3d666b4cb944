//! Gaussian inferer: closed-form KL against Monte Carlo, reparameterization
//! statistics and gradients, and hand-computed network outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vnmt::inferer::{self, GaussianParams, GaussianTag, Inferer, LatentMode, Sampling};
use vnmt::{Graph, Mode, Model, ModelDims, NoiseSource, ParameterStore, Precision};

fn gaussian(g: &mut Graph, mean: &[f64], log_var: &[f64], tag: GaussianTag) -> GaussianParams {
    let d = mean.len();
    GaussianParams {
        mean: g.leaf(1, d, mean.to_vec()).unwrap(),
        log_var: g.leaf(1, d, log_var.to_vec()).unwrap(),
        tag,
    }
}

fn closed_form_kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut g = Graph::new(Precision::F64);
    let q = gaussian(&mut g, mq, lq, GaussianTag::Posterior);
    let p = gaussian(&mut g, mp, lp, GaussianTag::Prior);
    let kl = inferer::kl_diag_gaussians(&mut g, &q, &p).unwrap();
    g.scalar(kl)
}

fn log_density(x: &[f64], m: &[f64], lv: &[f64]) -> f64 {
    x.iter()
        .zip(m)
        .zip(lv)
        .map(|((x, m), lv)| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp()))
        .sum()
}

/// `E_q[log q(z) - log p(z)]` with `n` draws from `q`.
fn monte_carlo_kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64], n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let d = mq.len();
    let mut z = vec![0.0; d];
    let mut sum = 0.0;
    for _ in 0..n {
        for k in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            z[k] = mq[k] + (0.5 * lq[k]).exp() * e;
        }
        sum += log_density(&z, mq, lq) - log_density(&z, mp, lp);
    }
    sum / n as f64
}

fn random_params(rng: &mut ChaCha8Rng, d: usize) -> [Vec<f64>; 4] {
    let mut v = || (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    [v(), v(), v(), v()]
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let [mq, lq, mp, lp] = random_params(&mut rng, 5);
        let exact = closed_form_kl(&mq, &lq, &mp, &lp);
        let mc = monte_carlo_kl(&mq, &lq, &mp, &lp, 1_000_000, &mut rng);
        worst = worst.max((exact - mc).abs() / exact);
    }
    assert!(worst < 0.01, "worst relative error {worst}");
}

#[test]
fn kl_of_a_distribution_with_itself_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let [m, lv, _, _] = random_params(&mut rng, 5);
        assert!(closed_form_kl(&m, &lv, &m, &lv).abs() < 1e-12);
    }
}

#[test]
fn kl_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let d = rng.gen_range(1..8);
        let mut v = || (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<f64>>();
        let (mq, lq, mp, lp) = (v(), v(), v(), v());
        assert!(closed_form_kl(&mq, &lq, &mp, &lp) >= 0.0);
    }
}

#[test]
fn kl_one_dimensional_known_value() {
    // KL(N(1, e) || N(0, 1)) = ½ (0 − 1 + e + 1 − 1) = (e − 1) / 2
    let kl = closed_form_kl(&[1.0], &[1.0], &[0.0], &[0.0]);
    assert!((kl - (1f64.exp() - 1.0) / 2.0).abs() < 1e-14);
}

#[test]
fn kl_is_reported_per_row() {
    let mut g = Graph::new(Precision::F64);
    let q = GaussianParams {
        mean: g.leaf(2, 1, vec![1.0, 0.0]).unwrap(),
        log_var: g.leaf(2, 1, vec![0.0, 0.0]).unwrap(),
        tag: GaussianTag::Posterior,
    };
    let p = GaussianParams {
        mean: g.leaf(2, 1, vec![0.0, 0.0]).unwrap(),
        log_var: g.leaf(2, 1, vec![0.0, 0.0]).unwrap(),
        tag: GaussianTag::Prior,
    };
    let kl = inferer::kl_diag_gaussians(&mut g, &q, &p).unwrap();
    assert_eq!(g.value(kl), &[0.5, 0.0]);
}

#[test]
fn zero_noise_gives_the_mean_exactly() {
    let mut g = Graph::new(Precision::F64);
    let p = gaussian(&mut g, &[0.3, -1.7, 2.0], &[0.5, -3.0, 1.0], GaussianTag::Posterior);
    let s = inferer::reparameterize(&mut g, &p, Sampling::Fixed(vec![0.0; 3])).unwrap();
    assert_eq!(g.value(s.h_z), g.value(p.mean));
    assert_eq!(s.mode, LatentMode::Sampled);
}

#[test]
fn sample_moments_match_mean_and_scale() {
    let n = 100_000;
    let (mu, lv) = ([0.7, -2.0, 0.0], [0.0, 1.2, -2.0]);
    let mut g = Graph::new(Precision::F64);
    let mean = g.leaf(1, 3, mu.to_vec()).unwrap();
    let log_var = g.leaf(1, 3, lv.to_vec()).unwrap();
    // replicate the parameters to n rows so one call draws n samples
    let rows = vec![0; n];
    let p = GaussianParams {
        mean: g.lookup(mean, &rows).unwrap(),
        log_var: g.lookup(log_var, &rows).unwrap(),
        tag: GaussianTag::Posterior,
    };
    let mut noise = NoiseSource::new(5);
    let s = inferer::reparameterize(&mut g, &p, Sampling::Noise(&mut noise)).unwrap();
    let z = g.value(s.h_z);
    for k in 0..3 {
        let sigma = (0.5 * lv[k]).exp();
        let xs: Vec<f64> = (0..n).map(|r| z[r * 3 + k]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se_mean = sigma / (n as f64).sqrt();
        let se_sd = sigma / (2.0 * n as f64).sqrt();
        assert!((m - mu[k]).abs() < 3.0 * se_mean, "dim {k}: mean {m} vs {}", mu[k]);
        assert!((sd - sigma).abs() < 3.0 * se_sd, "dim {k}: sd {sd} vs {sigma}");
    }
}

#[test]
fn gradients_reach_mean_and_log_variance_but_not_noise() {
    let eps = vec![0.5, -1.5];
    let lv = [0.4, -0.6];
    let mut g = Graph::new(Precision::F64);
    let p = gaussian(&mut g, &[1.0, 2.0], &lv, GaussianTag::Posterior);
    let s = inferer::reparameterize(&mut g, &p, Sampling::Fixed(eps.clone())).unwrap();
    let l = g.sum_all(s.h_z);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p.mean), vec![1.0, 1.0]);
    let d_lv = g.grad(p.log_var);
    for k in 0..2 {
        let want = 0.5 * (0.5 * lv[k]).exp() * eps[k];
        assert!((d_lv[k] - want).abs() < 1e-15);
    }
    assert_eq!(s.epsilon.as_deref(), Some(&eps[..]));
}

#[test]
fn noise_stream_advances_between_calls() {
    let mut g = Graph::new(Precision::F64);
    let p = gaussian(&mut g, &[0.0; 4], &[0.0; 4], GaussianTag::Posterior);
    let mut noise = NoiseSource::new(9);
    let a = inferer::reparameterize(&mut g, &p, Sampling::Noise(&mut noise)).unwrap();
    let b = inferer::reparameterize(&mut g, &p, Sampling::Noise(&mut noise)).unwrap();
    assert_ne!(g.value(a.h_z), g.value(b.h_z));
    let mut again = NoiseSource::new(9);
    let c = inferer::reparameterize(&mut g, &p, Sampling::Noise(&mut again)).unwrap();
    assert_eq!(g.value(a.h_z), g.value(c.h_z));
}

#[test]
fn prior_mean_mode_needs_prior_parameters() {
    let mut g = Graph::new(Precision::F64);
    let q = gaussian(&mut g, &[0.0], &[0.0], GaussianTag::Posterior);
    assert!(inferer::reparameterize(&mut g, &q, Sampling::PriorMean).is_err());
    let p = gaussian(&mut g, &[0.25], &[3.0], GaussianTag::Prior);
    let s = inferer::reparameterize(&mut g, &p, Sampling::PriorMean).unwrap();
    assert_eq!(g.value(s.h_z), &[0.25]);
    assert!(s.epsilon.is_none());
}

/// One-unit networks with hand-picked weights.
fn scalar_store() -> ParameterStore {
    let mut s = ParameterStore::new(Precision::F64);
    for (prefix, input, w1) in [("post", 2, vec![0.5, -0.25]), ("prior", 1, vec![0.8])] {
        s.insert(&format!("{prefix}.W1"), 1, input, w1).unwrap();
        s.insert(&format!("{prefix}.b1"), 1, 1, vec![0.1]).unwrap();
        s.insert(&format!("{prefix}.W_mu"), 1, 1, vec![2.0]).unwrap();
        s.insert(&format!("{prefix}.b_mu"), 1, 1, vec![-0.3]).unwrap();
        s.insert(&format!("{prefix}.W_sigma"), 1, 1, vec![-1.5]).unwrap();
        s.insert(&format!("{prefix}.b_sigma"), 1, 1, vec![0.2]).unwrap();
    }
    s.insert("latent.W2", 1, 1, vec![1.2]).unwrap();
    s.insert("latent.b2", 1, 1, vec![-0.4]).unwrap();
    s
}

#[test]
fn posterior_and_prior_match_hand_computation() {
    let store = scalar_store();
    let mut g = Graph::new(Precision::F64);
    let inf = Inferer::bind(&mut g, &store).unwrap();
    let (hf, he) = (0.6, -0.9);
    let h_f = g.constant(1, 1, vec![hf]).unwrap();
    let h_e = g.constant(1, 1, vec![he]).unwrap();
    let q = inferer::posterior(&mut g, &inf, h_f, h_e).unwrap();
    let p = inferer::prior(&mut g, &inf, h_f).unwrap();

    let hq = (0.5 * hf - 0.25 * he + 0.1f64).tanh();
    assert!((g.scalar(q.mean) - (2.0 * hq - 0.3)).abs() < 1e-15);
    assert!((g.scalar(q.log_var) - (-1.5 * hq + 0.2)).abs() < 1e-15);
    let hp = (0.8 * hf + 0.1f64).tanh();
    assert!((g.scalar(p.mean) - (2.0 * hp - 0.3)).abs() < 1e-15);
    assert!((g.scalar(p.log_var) - (-1.5 * hp + 0.2)).abs() < 1e-15);
    assert_eq!(q.tag, GaussianTag::Posterior);
    assert_eq!(p.tag, GaussianTag::Prior);

    let eps = 0.7;
    let s = inferer::reparameterize(&mut g, &q, Sampling::Fixed(vec![eps])).unwrap();
    let h = inferer::project_latent(&mut g, &inf, &s).unwrap();
    let z = (2.0 * hq - 0.3) + (0.5 * (-1.5 * hq + 0.2)).exp() * eps;
    assert!((g.scalar(h) - (1.2 * z - 0.4f64).tanh()).abs() < 1e-15);
}

#[test]
fn prior_ignores_the_target_and_posterior_does_not() {
    let store = scalar_store();
    let run = |he: f64| {
        let mut g = Graph::new(Precision::F64);
        let inf = Inferer::bind(&mut g, &store).unwrap();
        let h_f = g.constant(1, 1, vec![0.3]).unwrap();
        let h_e = g.constant(1, 1, vec![he]).unwrap();
        let q = inferer::posterior(&mut g, &inf, h_f, h_e).unwrap();
        let p = inferer::prior(&mut g, &inf, h_f).unwrap();
        (g.scalar(q.mean), g.scalar(p.mean))
    };
    let (q1, p1) = run(0.5);
    let (q2, p2) = run(-0.5);
    assert_eq!(p1, p2);
    assert_ne!(q1, q2);
}

#[test]
fn posterior_and_prior_parameters_are_disjoint() {
    let model = Model::new(ModelDims::uniform(4), 12, 12, Precision::F64, 3).unwrap();
    let post: Vec<&str> = model.store.names().filter(|n| n.starts_with("post.")).collect();
    let prior: Vec<&str> = model.store.names().filter(|n| n.starts_with("prior.")).collect();
    assert_eq!(post.len(), 6);
    assert_eq!(prior.len(), 6);
    // same shapes apart from the posterior's wider input
    assert_eq!(model.store.get("post.W1").unwrap().cols, 2 * model.store.get("prior.W1").unwrap().cols);
}

#[test]
fn projection_is_bounded() {
    let model = Model::new(ModelDims::uniform(6), 12, 12, Precision::F64, 4).unwrap();
    let mut g = Graph::new(Precision::F64);
    let inf = Inferer::bind(&mut g, &model.store).unwrap();
    let p = gaussian(&mut g, &[50.0, -50.0, 0.0, 3.0, -3.0, 1.0], &[0.0; 6], GaussianTag::Prior);
    let s = inferer::reparameterize(&mut g, &p, Sampling::PriorMean).unwrap();
    let h = inferer::project_latent(&mut g, &inf, &s).unwrap();
    assert!(g.value(h).iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn decode_time_latent_is_bitwise_stable() {
    let model = Model::new(ModelDims::uniform(8), 20, 20, Precision::F32, 21).unwrap();
    let src = vec![vec![5, 9, 4, vnmt::corpus::EOS]];
    let mask = vec![vec![1.0; 4]];
    let latent = || {
        let mut g = Graph::new(Precision::F32);
        let (_, _, p) = model.source_prior(&mut g, &src, &mask).unwrap();
        let s = inferer::reparameterize(&mut g, &p, Sampling::PriorMean).unwrap();
        g.value(s.h_z).iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
    };
    assert_eq!(latent(), latent());
    let a = model.translate(&[5, 9, 4], Mode::Vnmt, 3, 10).unwrap();
    let b = model.translate(&[5, 9, 4], Mode::Vnmt, 3, 10).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
}
