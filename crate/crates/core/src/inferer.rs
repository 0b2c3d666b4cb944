//! Neural prior `p(z|x)`, posterior approximation `q(z|x,y)`, reparameterized
//! sampling, projection of the latent into the decoder space, and the
//! closed-form KL divergence between diagonal Gaussians.
//!
//! Both networks share one functional form: a tanh layer into the latent
//! space followed by two linear regressions for the mean and the log
//! variance. The prior sees only the pooled source annotations; the
//! posterior sees source and target. Their parameters are disjoint.

use rand::Rng;

use crate::error::{Error, Result, Shape};
use crate::params::{NoiseSource, ParameterStore};
use crate::tensor::{Axis, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianTag {
    Prior,
    Posterior,
}

/// Batched diagonal Gaussian: `mean` and `log_var` are `[M x d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
    pub tag: GaussianTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    Sampled,
    PriorMean,
}

#[derive(Clone, Debug)]
pub struct LatentSample {
    pub h_z: Var,
    /// The noise used, `None` in prior-mean mode.
    pub epsilon: Option<Vec<f64>>,
    pub mode: LatentMode,
}

/// How to turn a Gaussian into a latent vector.
pub enum Sampling<'a> {
    Noise(&'a mut NoiseSource),
    /// Explicit noise, row-major `[M x d_z]`.
    Fixed(Vec<f64>),
    PriorMean,
}

/// One of the two Gaussian networks bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNet {
    pub w1: Var,
    pub b1: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

impl GaussianNet {
    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        Ok(GaussianNet {
            w1: p("W1")?,
            b1: p("b1")?,
            w_mu: p("W_mu")?,
            b_mu: p("b_mu")?,
            w_sigma: p("W_sigma")?,
            b_sigma: p("b_sigma")?,
        })
    }

    fn forward(&self, g: &mut Graph, input: Var, tag: GaussianTag) -> Result<GaussianParams> {
        let pre = g.linear(input, self.w1, Some(self.b1))?;
        let hidden = g.tanh(pre);
        let mean = g.linear(hidden, self.w_mu, Some(self.b_mu))?;
        let log_var = g.linear(hidden, self.w_sigma, Some(self.b_sigma))?;
        Ok(GaussianParams { mean, log_var, tag })
    }
}

pub fn init_gaussian_net(store: &mut ParameterStore, prefix: &str, input: usize, latent: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert_uniform(&format!("{prefix}.W1"), latent, input, rng)?;
    store.insert_zeros(&format!("{prefix}.b1"), 1, latent)?;
    store.insert_uniform(&format!("{prefix}.W_mu"), latent, latent, rng)?;
    store.insert_zeros(&format!("{prefix}.b_mu"), 1, latent)?;
    store.insert_uniform(&format!("{prefix}.W_sigma"), latent, latent, rng)?;
    store.insert_zeros(&format!("{prefix}.b_sigma"), 1, latent)?;
    Ok(())
}

/// The inference side of the model bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct Inferer {
    pub posterior: GaussianNet,
    pub prior: GaussianNet,
    pub w2: Var,
    pub b2: Var,
}

impl Inferer {
    pub fn bind(g: &mut Graph, store: &ParameterStore) -> Result<Self> {
        Ok(Inferer {
            posterior: GaussianNet::bind(g, store, "post")?,
            prior: GaussianNet::bind(g, store, "prior")?,
            w2: g.param(store, "latent.W2")?,
            b2: g.param(store, "latent.b2")?,
        })
    }
}

/// `q(z | x, y)` from pooled source `h_f [M x 2d_f]` and target `h_e [M x 2d_e]`.
pub fn posterior(g: &mut Graph, inf: &Inferer, h_f: Var, h_e: Var) -> Result<GaussianParams> {
    let (sf, se) = (g.shape(h_f), g.shape(h_e));
    if sf.0 != se.0 {
        return Err(Error::Dimension { op: "posterior", left: sf, right: se });
    }
    let joint = g.concat(&[h_f, h_e], Axis::Cols)?;
    inf.posterior.forward(g, joint, GaussianTag::Posterior)
}

/// `p(z | x)` from pooled source annotations only.
pub fn prior(g: &mut Graph, inf: &Inferer, h_f: Var) -> Result<GaussianParams> {
    inf.prior.forward(g, h_f, GaussianTag::Prior)
}

/// `h_z = μ + exp(log σ² / 2) ⊙ ε`, or the prior mean itself.
///
/// The noise enters as a constant, so adjoints reach `μ` and `log σ²` only.
pub fn reparameterize(g: &mut Graph, gp: &GaussianParams, sampling: Sampling<'_>) -> Result<LatentSample> {
    let Shape(m, d) = g.shape(gp.mean);
    if g.shape(gp.log_var) != Shape(m, d) {
        return Err(Error::Dimension { op: "reparameterize", left: Shape(m, d), right: g.shape(gp.log_var) });
    }
    let eps = match sampling {
        Sampling::PriorMean => {
            if gp.tag != GaussianTag::Prior {
                return Err(Error::contract("prior-mean decoding requires prior parameters"));
            }
            return Ok(LatentSample {
                h_z: gp.mean,
                epsilon: None,
                mode: LatentMode::PriorMean,
            });
        }
        Sampling::Noise(noise) => noise.standard_normal(m * d),
        Sampling::Fixed(eps) => {
            if eps.len() != m * d {
                return Err(Error::Dimension { op: "reparameterize", left: Shape(m, d), right: Shape(eps.len(), 1) });
            }
            eps
        }
    };
    let e = g.constant(m, d, eps.clone())?;
    let half = g.scale(gp.log_var, 0.5);
    let sigma = g.exp(half);
    let spread = g.mul(sigma, e)?;
    let h_z = g.add(gp.mean, spread)?;
    Ok(LatentSample {
        h_z,
        epsilon: Some(eps),
        mode: LatentMode::Sampled,
    })
}

/// `h_e' = tanh(W_z2 h_z + b_z2)`, `[M x d_e']`.
pub fn project_latent(g: &mut Graph, inf: &Inferer, sample: &LatentSample) -> Result<Var> {
    let pre = g.linear(sample.h_z, inf.w2, Some(inf.b2))?;
    Ok(g.tanh(pre))
}

/// Per-row `KL(q || p)`, `[M x 1]`:
/// `½ Σ_k [log σ_p² − log σ_q² + (σ_q² + (μ_q − μ_p)²) / σ_p² − 1]`.
pub fn kl_diag_gaussians(g: &mut Graph, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    let s = g.shape(q.mean);
    for v in [q.log_var, p.mean, p.log_var] {
        if g.shape(v) != s {
            return Err(Error::Dimension { op: "kl_diag_gaussians", left: s, right: g.shape(v) });
        }
    }
    let var_q = g.exp(q.log_var);
    let neg_lvp = g.scale(p.log_var, -1.0);
    let inv_var_p = g.exp(neg_lvp);
    let diff = g.sub(q.mean, p.mean)?;
    let diff2 = g.mul(diff, diff)?;
    let num = g.add(var_q, diff2)?;
    let ratio = g.mul(num, inv_var_p)?;
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let t = g.add(log_ratio, ratio)?;
    let t = g.add_scalar(t, -1.0);
    let per_row = g.sum_axis(t, Axis::Cols);
    Ok(g.scale(per_row, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn gaussian(g: &mut Graph, mean: &[f64], log_var: &[f64], tag: GaussianTag) -> GaussianParams {
        let n = mean.len();
        GaussianParams {
            mean: g.leaf(1, n, mean.to_vec()).unwrap(),
            log_var: g.leaf(1, n, log_var.to_vec()).unwrap(),
            tag,
        }
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut g = Graph::new(Precision::F64);
        let q = gaussian(&mut g, &[0.3, -1.0], &[0.7, 2.0], GaussianTag::Posterior);
        let s = reparameterize(&mut g, &q, Sampling::Fixed(vec![0.0, 0.0])).unwrap();
        assert_eq!(g.value(s.h_z), &[0.3, -1.0]);
    }

    #[test]
    fn unit_scale_adds_noise() {
        let mut g = Graph::new(Precision::F64);
        let q = gaussian(&mut g, &[1.0, 2.0], &[0.0, 0.0], GaussianTag::Posterior);
        let s = reparameterize(&mut g, &q, Sampling::Fixed(vec![0.5, -0.25])).unwrap();
        assert_eq!(g.value(s.h_z), &[1.5, 1.75]);
    }

    #[test]
    fn prior_mean_mode_contract() {
        let mut g = Graph::new(Precision::F64);
        let q = gaussian(&mut g, &[1.0], &[0.0], GaussianTag::Posterior);
        assert!(matches!(reparameterize(&mut g, &q, Sampling::PriorMean), Err(Error::Contract(_))));
        let p = gaussian(&mut g, &[1.0], &[3.0], GaussianTag::Prior);
        let s = reparameterize(&mut g, &p, Sampling::PriorMean).unwrap();
        assert_eq!(s.h_z, p.mean);
        assert!(s.epsilon.is_none());
        assert_eq!(s.mode, LatentMode::PriorMean);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut g = Graph::new(Precision::F64);
        let q = gaussian(&mut g, &[0.3, -1.0, 2.0], &[0.7, -2.0, 0.1], GaussianTag::Posterior);
        let p = GaussianParams { tag: GaussianTag::Prior, ..q };
        let kl = kl_diag_gaussians(&mut g, &q, &p).unwrap();
        assert!(g.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half_per_dim() {
        let mut g = Graph::new(Precision::F64);
        let q = gaussian(&mut g, &[1.0, 1.0, 1.0], &[0.0; 3], GaussianTag::Posterior);
        let p = gaussian(&mut g, &[0.0; 3], &[0.0; 3], GaussianTag::Prior);
        let kl = kl_diag_gaussians(&mut g, &q, &p).unwrap();
        assert!((g.scalar(kl) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let mut g = Graph::new(Precision::F64);
        let q = gaussian(&mut g, &[1.0, 1.0], &[0.0; 2], GaussianTag::Posterior);
        let p = gaussian(&mut g, &[0.0; 3], &[0.0; 3], GaussianTag::Prior);
        assert!(matches!(kl_diag_gaussians(&mut g, &q, &p), Err(Error::Dimension { .. })));
    }
}
