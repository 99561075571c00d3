//! Wasserstein critic/generator losses with gradient penalty and the
//! spectrum-energy-preservation term.
//!
//! Sign convention: both losses are *minimised*. The critic loss is
//! `−E[D(real)] + E[D(fake)] + penalty`, i.e. the negated inner objective of
//! the min-max game; the generator loss is `−E[D(fake)] + energy`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Critic;
pub use crate::networks::combined_critic_score;
use crate::tensor::SpecBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Gradient-penalty weight λ.
    pub lambda_gp: f64,
    /// Energy-integrity weight β.
    pub beta_energy: f64,
    /// Critic mixing weights α, one per source.
    pub alpha: Vec<f64>,
}

impl Default for LossWeights {
    /// λ = 10, β = 10, α = (0.25, 0.25, 0.4, 0.1) for (bass, drums, vocals, other).
    fn default() -> Self {
        LossWeights {
            lambda_gp: 10.0,
            beta_energy: 10.0,
            alpha: vec![0.25, 0.25, 0.4, 0.1],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, n_sources: usize) -> Result<()> {
        if !(self.lambda_gp >= 0.0) || !(self.beta_energy >= 0.0) {
            return Err(Error::Config("lambda_gp and beta_energy must be >= 0".into()));
        }
        if self.alpha.len() != n_sources {
            return Err(Error::Config(format!(
                "{} alpha weights for {n_sources} sources",
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("alpha weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Switches for the two points the objective leaves open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyOptions {
    /// One interpolation coefficient per example shared by all sources.
    pub shared_epsilon: bool,
    /// Weight each source's penalty by its αᵢ (otherwise weight 1).
    pub alpha_weighted: bool,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        PenaltyOptions {
            shared_epsilon: false,
            alpha_weighted: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub wasserstein_term: f64,
    pub gradient_penalty_term: f64,
    pub energy_term: f64,
    pub total: f64,
    /// Critic role: per-source `E[dᵢ(real)] − E[dᵢ(fake)]`; generator role: per-source `E[dᵢ(fake)]`.
    pub per_source_critic_scores: Vec<f64>,
    /// Mean critic input-gradient norm on interpolates (critic role only).
    pub grad_norm_mean: f64,
}

fn check_sources(a: &[SpecBatch], b: &SpecBatch) -> Result<()> {
    for s in a {
        if s.shape() != b.shape() {
            return Err(Error::Structure(format!(
                "source batch {:?} does not match {:?}",
                s.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// `β · mean_b (Σᵢ‖ŝᵢ‖² − ‖x‖²)²` over the batch.
pub fn energy_preservation_loss(estimates: &[SpecBatch], mixture: &SpecBatch, beta: f64) -> Result<f64> {
    Ok(energy_gaps(estimates, mixture)?
        .iter()
        .map(|g| beta * g * g)
        .sum::<f64>()
        / mixture.len.max(1) as f64)
}

/// Per-example `Σᵢ‖ŝᵢ‖² − ‖x‖²`.
pub fn energy_gaps(estimates: &[SpecBatch], mixture: &SpecBatch) -> Result<Vec<f64>> {
    check_sources(estimates, mixture)?;
    let mut gaps: Vec<f64> = mixture.energies().iter().map(|e| -e).collect();
    for s in estimates {
        for (g, e) in gaps.iter_mut().zip(s.energies()) {
            *g += e;
        }
    }
    Ok(gaps)
}

/// Gradient of [`energy_preservation_loss`] with respect to each estimate.
pub fn energy_gradient(estimates: &[SpecBatch], mixture: &SpecBatch, beta: f64) -> Result<Vec<SpecBatch>> {
    let gaps = energy_gaps(estimates, mixture)?;
    let m = mixture.len.max(1) as f64;
    Ok(estimates
        .iter()
        .map(|s| {
            let mut g = s.clone();
            for (b, gap) in gaps.iter().enumerate() {
                let c = 4.0 * beta * gap / m;
                g.example_mut(b).iter_mut().for_each(|v| *v *= c);
            }
            g
        })
        .collect())
}

/// `ε·real + (1−ε)·fake` with the given coefficients (`eps[source][example]`).
pub fn interpolate_with(real: &[SpecBatch], fake: &[SpecBatch], eps: &[Vec<f64>]) -> Result<Vec<SpecBatch>> {
    if real.len() != fake.len() || real.len() != eps.len() {
        return Err(Error::Structure("real, fake and epsilon counts differ".into()));
    }
    real.iter()
        .zip(fake)
        .zip(eps)
        .map(|((r, f), e)| {
            if r.shape() != f.shape() || e.len() != r.len {
                return Err(Error::Structure(format!(
                    "real {:?} vs fake {:?} with {} coefficients",
                    r.shape(),
                    f.shape(),
                    e.len()
                )));
            }
            let mut out = r.clone();
            for b in 0..r.len {
                let t = e[b];
                for ((o, &rv), &fv) in out.example_mut(b).iter_mut().zip(r.example(b)).zip(f.example(b)) {
                    *o = t * rv + (1.0 - t) * fv;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Draws ε ~ U[0,1] per (source, example), or per example when `shared`, and interpolates.
pub fn sample_interpolates<R: Rng + ?Sized>(
    real: &[SpecBatch],
    fake: &[SpecBatch],
    rng: &mut R,
    shared: bool,
) -> Result<(Vec<SpecBatch>, Vec<Vec<f64>>)> {
    let m = real.first().map_or(0, |r| r.len);
    let eps: Vec<Vec<f64>> = if shared {
        let e: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        vec![e; real.len()]
    } else {
        (0..real.len())
            .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
            .collect()
    };
    let interp = interpolate_with(real, fake, &eps)?;
    Ok((interp, eps))
}

/// `λ · mean (‖∇ d(x̃)‖₂ − 1)²` for one critic.
pub fn gradient_penalty(critic: &Critic, interpolates: &SpecBatch, lambda: f64) -> Result<f64> {
    Ok(critic.gradient_penalty(interpolates, lambda, 1.0, None)?.value)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn ensure_finite(b: &LossBreakdown, role: &str) -> Result<()> {
    let parts = [b.wasserstein_term, b.gradient_penalty_term, b.energy_term, b.total];
    if parts.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{role} loss is not finite: wasserstein {} penalty {} energy {} total {}",
            b.wasserstein_term, b.gradient_penalty_term, b.energy_term, b.total
        )))
    }
}

/// Critic loss; accumulates ∂loss/∂params of critic `i` into `grads[i]` when given.
pub fn critic_loss(
    critics: &[Critic],
    real: &[SpecBatch],
    fake: &[SpecBatch],
    interpolates: &[SpecBatch],
    weights: &LossWeights,
    options: &PenaltyOptions,
    mut grads: Option<&mut [Vec<f64>]>,
) -> Result<LossBreakdown> {
    let n = critics.len();
    if real.len() != n || fake.len() != n || interpolates.len() != n || weights.alpha.len() != n {
        return Err(Error::Structure(format!(
            "{n} critics with {} real, {} fake, {} interpolate batches and {} weights",
            real.len(),
            fake.len(),
            interpolates.len(),
            weights.alpha.len()
        )));
    }
    let mut out = LossBreakdown::default();
    let mut norms = Vec::new();
    for i in 0..n {
        let critic = &critics[i];
        let alpha = weights.alpha[i];
        let (sr, tr) = critic.forward(&real[i])?;
        let (sf, tf) = critic.forward(&fake[i])?;
        let w = -mean(&sr) + mean(&sf);
        out.wasserstein_term += alpha * w;
        out.per_source_critic_scores.push(-w);
        let pw = if options.alpha_weighted { alpha } else { 1.0 };
        let g = grads.as_deref_mut().map(|g| g[i].as_mut_slice());
        let pen = match g {
            Some(g) => {
                let mr = sr.len().max(1) as f64;
                let mf = sf.len().max(1) as f64;
                critic.backward(&tr, &vec![-alpha / mr; sr.len()], Some(&mut *g), false);
                critic.backward(&tf, &vec![alpha / mf; sf.len()], Some(&mut *g), false);
                critic.gradient_penalty(&interpolates[i], weights.lambda_gp, pw, Some(g))?
            }
            None => critic.gradient_penalty(&interpolates[i], weights.lambda_gp, pw, None)?,
        };
        out.gradient_penalty_term += pw * pen.value;
        norms.extend(pen.grad_norms);
    }
    out.total = out.wasserstein_term + out.gradient_penalty_term;
    out.grad_norm_mean = mean(&norms);
    ensure_finite(&out, "critic")?;
    Ok(out)
}

/// Generator loss and its gradient with respect to each estimate batch.
///
/// The penalty term of the generator objective does not depend on the
/// separator parameters, so it is left out of `total`; callers may record the
/// latest critic-side penalty in `gradient_penalty_term` for logging.
pub fn generator_loss(
    critics: &[Critic],
    fake: &[SpecBatch],
    mixture: &SpecBatch,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<SpecBatch>)> {
    let n = critics.len();
    if fake.len() != n || weights.alpha.len() != n {
        return Err(Error::Structure(format!(
            "{n} critics with {} estimate batches and {} weights",
            fake.len(),
            weights.alpha.len()
        )));
    }
    let mut out = LossBreakdown::default();
    let mut grads = energy_gradient(fake, mixture, weights.beta_energy)?;
    out.energy_term = energy_preservation_loss(fake, mixture, weights.beta_energy)?;
    for i in 0..n {
        let alpha = weights.alpha[i];
        let (sf, tf) = critics[i].forward(&fake[i])?;
        out.wasserstein_term -= alpha * mean(&sf);
        out.per_source_critic_scores.push(mean(&sf));
        if alpha != 0.0 {
            let m = sf.len().max(1) as f64;
            let gin = critics[i]
                .backward(&tf, &vec![-alpha / m; sf.len()], None, true)
                .expect("input gradient requested");
            for (g, v) in grads[i].data.iter_mut().zip(&gin.data) {
                *g += v;
            }
        }
    }
    out.total = out.wasserstein_term + out.energy_term;
    ensure_finite(&out, "generator")?;
    Ok((out, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ConvSpec, CriticConfig};

    fn batch(values: &[f64]) -> SpecBatch {
        SpecBatch::from_vec(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    /// 1×1-input critic that is exactly `d(x) = slope·x + offset` for x ≥ 0.
    pub(crate) fn linear_critic(slope: f64, offset: f64) -> Critic {
        let cfg = CriticConfig {
            input_shape: (1, 1),
            layers: vec![ConvSpec::k3(1, 1)],
            leaky_slope: 0.2,
        };
        let mut c = Critic::build(cfg, 0).unwrap();
        let p = c.params_mut();
        // conv weights (9 taps), conv bias, head weight, head bias
        p.iter_mut().for_each(|v| *v = 0.0);
        p[4] = slope.abs();
        p[10] = slope.signum();
        p[11] = offset;
        c
    }

    #[test]
    fn energy_examples() {
        // ‖x‖² = 4 via a single value 2; sources with energies {1, 3} and {1, 1}
        let x = batch(&[2.0]);
        let exact = [batch(&[1.0]), batch(&[3f64.sqrt()])];
        assert!(energy_preservation_loss(&exact, &x, 10.0).unwrap().abs() < 1e-12);
        let short = [batch(&[1.0]), batch(&[1.0])];
        assert!((energy_preservation_loss(&short, &x, 10.0).unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(energy_preservation_loss(&short, &x, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn interpolation_examples() {
        let real = [SpecBatch::from_vec(1, 2, 2, vec![2.0; 4]).unwrap()];
        let fake = [SpecBatch::zeros(1, 2, 2)];
        let i = interpolate_with(&real, &fake, &[vec![0.25]]).unwrap();
        assert_eq!(i[0].data, vec![0.5; 4]);
        assert_eq!(interpolate_with(&real, &fake, &[vec![1.0]]).unwrap()[0], real[0]);
        assert_eq!(interpolate_with(&real, &fake, &[vec![0.0]]).unwrap()[0], fake[0]);
    }

    #[test]
    fn linear_critic_penalties() {
        let x = batch(&[0.3, 0.7, 0.1]);
        assert!(gradient_penalty(&linear_critic(1.0, 0.0), &x, 10.0).unwrap().abs() < 1e-12);
        assert!((gradient_penalty(&linear_critic(3.0, 0.0), &x, 10.0).unwrap() - 40.0).abs() < 1e-12);
        assert!((gradient_penalty(&linear_critic(0.0, 0.5), &x, 10.0).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn combined_score_examples() {
        let critics: Vec<Critic> = (0..4).map(|_| linear_critic(1.0, 0.0)).collect();
        let ones: Vec<SpecBatch> = (0..4).map(|_| batch(&[1.0])).collect();
        let a = [0.25, 0.25, 0.4, 0.1];
        assert!((combined_critic_score(&critics, &ones, &a).unwrap()[0] - 1.0).abs() < 1e-12);
        assert_eq!(combined_critic_score(&critics, &ones, &[0.0; 4]).unwrap()[0], 0.0);
        let s: Vec<SpecBatch> = [2.0, 0.0, 0.0, 0.0].iter().map(|&v| batch(&[v])).collect();
        assert!((combined_critic_score(&critics, &s, &a).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_zero_critics() {
        let critics = vec![linear_critic(0.0, 0.0), linear_critic(0.0, 0.0)];
        let w = LossWeights {
            lambda_gp: 10.0,
            beta_energy: 0.0,
            alpha: vec![0.3, 0.6],
        };
        let real = vec![batch(&[0.2, 0.4]), batch(&[0.1, 0.9])];
        let fake = vec![batch(&[0.5, 0.5]), batch(&[0.3, 0.3])];
        let b = critic_loss(&critics, &real, &fake, &real, &w, &PenaltyOptions::default(), None).unwrap();
        assert!((b.total - 0.9 * 10.0).abs() < 1e-12);
        let (g, _) = generator_loss(&critics, &fake, &batch(&[1.0, 1.0]), &w).unwrap();
        assert_eq!(g.total, 0.0);
    }

    #[test]
    fn identical_real_and_fake_leave_only_the_penalty() {
        let critics = vec![linear_critic(2.0, 0.1), linear_critic(0.5, 0.0)];
        let w = LossWeights {
            lambda_gp: 10.0,
            beta_energy: 10.0,
            alpha: vec![0.5, 0.5],
        };
        let s = vec![batch(&[0.2, 0.4]), batch(&[0.1, 0.9])];
        let b = critic_loss(&critics, &s, &s, &s, &w, &PenaltyOptions::default(), None).unwrap();
        assert!(b.wasserstein_term.abs() < 1e-15);
        assert!((b.total - b.gradient_penalty_term).abs() < 1e-15);
        // 0.5·10·(2−1)² + 0.5·10·(0.5−1)²
        assert!((b.gradient_penalty_term - 6.25).abs() < 1e-12);
    }
}
