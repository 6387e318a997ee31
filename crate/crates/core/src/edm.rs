//! Continuous-noise diffusion framework: the σ ladder, denoiser
//! preconditioning, the weighted denoising score-matching loss and the
//! training noise distribution.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Discretized noise levels.
///
/// `σ_t^{1/ρ}` decreases linearly from `σ_max^{1/ρ}` at `t = T` to
/// `σ_min^{1/ρ}` at `t = 1`; `σ_0` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub sigma_data: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 700.0,
            rho: 7.0,
            steps: 25,
            sigma_data: 0.5,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(invalid!(
                "noise schedule needs 0 < sigma_min < sigma_max (got {} and {})",
                self.sigma_min,
                self.sigma_max
            ));
        }
        if !(self.rho > 0.0) || !(self.sigma_data > 0.0) {
            return Err(invalid!("rho and sigma_data must be positive"));
        }
        if self.steps < 2 {
            return Err(invalid!("noise schedule needs at least 2 steps, got {}", self.steps));
        }
        Ok(())
    }

    /// `σ_t` for `t` in `1..=T`.
    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(invalid!("timestep {t} outside 1..={}", self.steps));
        }
        // Endpoints are returned verbatim rather than through the power round trip.
        if t == self.steps {
            return Ok(self.sigma_max);
        }
        if t == 1 {
            return Ok(self.sigma_min);
        }
        let inv_rho = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv_rho);
        let lo = self.sigma_min.powf(inv_rho);
        let frac = (self.steps - t) as f64 / (self.steps - 1) as f64;
        Ok((hi + frac * (lo - hi)).powf(self.rho))
    }

    /// `σ_{t-1}`, with `σ_0 = 0` so the final step lands on the prediction.
    pub fn sigma_before(&self, t: usize) -> Result<f64> {
        if t == 1 {
            Ok(0.0)
        } else {
            self.sigma_at(t - 1)
        }
    }

    /// `(t, σ_t)` from `t = T` down to `t = 1`.
    pub fn ladder(&self) -> Result<Vec<(usize, f64)>> {
        self.validate()?;
        (1..=self.steps)
            .rev()
            .map(|t| Ok((t, self.sigma_at(t)?)))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("t,sigma\n");
        for (t, s) in self.ladder()? {
            out.push_str(&format!("{t},{s}\n"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Result<PrecondCoeffs> {
    if !(sigma >= 0.0) {
        return Err(invalid!("noise level must be non-negative, got {sigma}"));
    }
    let total = sigma * sigma + sigma_data * sigma_data;
    let root = total.sqrt();
    Ok(PrecondCoeffs {
        c_skip: sigma_data * sigma_data / total,
        c_out: sigma * sigma_data / root,
        c_in: 1.0 / root,
        c_noise: sigma.ln() / 4.0,
    })
}

/// λ_σ = (σ² + σ_data²) / (σ σ_data)².
pub fn loss_weight(sigma: f64, sigma_data: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid!("loss weight undefined at sigma = {sigma}"));
    }
    Ok((sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2))
}

/// `D(x; σ) = c_skip x + c_out U(c_in x; c_noise)` on plain tensors.
///
/// `unet` receives the scaled input and `c_noise`; conditioning is whatever
/// the closure captures.
pub fn denoise<T: Float>(
    x: &Tensor<T>,
    sigma: f64,
    sigma_data: f64,
    unet: impl FnOnce(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let c = precond(sigma, sigma_data)?;
    let c_in = T::lit(c.c_in);
    let scaled = x.map(|v| v * c_in);
    let raw = unet(&scaled, c.c_noise)?;
    let (c_skip, c_out) = (T::lit(c.c_skip), T::lit(c.c_out));
    x.zip_map(&raw, |xv, uv| c_skip * xv + c_out * uv)
}

/// Graph version of [`denoise`], used by training.
pub fn denoise_graph<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    sigma: f64,
    sigma_data: f64,
    unet: impl FnOnce(&mut Graph<T>, Var, f64) -> Result<Var>,
) -> Result<Var> {
    let c = precond(sigma, sigma_data)?;
    let scaled = g.scale(x, T::lit(c.c_in));
    let raw = unet(g, scaled, c.c_noise)?;
    let skip = g.scale(x, T::lit(c.c_skip));
    let out = g.scale(raw, T::lit(c.c_out));
    g.add(skip, out)
}

/// `λ_σ · mean((D(clean + σ·noise; σ) − clean)²)`.
pub fn dsm_loss<T: Float>(
    g: &mut Graph<T>,
    clean: Var,
    noise: Var,
    sigma: f64,
    sigma_data: f64,
    denoiser: impl FnOnce(&mut Graph<T>, Var, f64) -> Result<Var>,
) -> Result<Var> {
    let weight = loss_weight(sigma, sigma_data)?;
    let scaled_noise = g.scale(noise, T::lit(sigma));
    let noised = g.add(clean, scaled_noise)?;
    let denoised = denoiser(g, noised, sigma)?;
    let mse = g.mse(denoised, clean)?;
    Ok(g.scale(mse, T::lit(weight)))
}

/// Training noise levels: `ln σ ~ Normal(log_mean, log_std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingNoiseConfig {
    pub log_mean: f64,
    pub log_std: f64,
}

impl Default for TrainingNoiseConfig {
    fn default() -> Self {
        Self {
            log_mean: 1.0,
            log_std: 1.6,
        }
    }
}

impl TrainingNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.log_std > 0.0) || !self.log_mean.is_finite() {
            return Err(invalid!("training noise needs finite log_mean and log_std > 0"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let dist = LogNormal::new(self.log_mean, self.log_std)
            .map_err(|e| invalid!("training noise distribution: {e}"))?;
        Ok(dist.sample(rng))
    }
}
