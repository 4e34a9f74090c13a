//! Variance-preserving cosine noise schedule and the deterministic DDIM
//! update.
//!
//! For step `t` in `0..T` the signal coefficient is `sqrt(abar(t))` with
//! `abar(t) = f(t/T) / f(0)`, `f(u) = cos^2((u + s) / (1 + s) * pi/2)` and
//! `s = 0.008`. `abar(0) = 1` exactly, so step 0 is the identity endpoint.
//! The noise coefficient is `sqrt(1 - abar(t))`, which keeps
//! `signal^2 + noise^2 = 1` at every step.

use alloc::vec::Vec;

use crate::error::{HarmonyError, Result};
use crate::math;
use crate::require;
use crate::tensor::LatentImage;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    signal: Vec<f64>,
    noise: Vec<f64>,
    /// Default number of sampler iterations for full generation.
    pub sampler_steps: usize,
}

/// One iteration of a sampling plan: the current diffusion step and the step
/// the update lands on (`None` for the final iteration, which returns the
/// clean estimate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerStep {
    pub t: usize,
    pub t_prev: Option<usize>,
}

impl NoiseSchedule {
    pub fn cosine(total_steps: usize, sampler_steps: usize) -> Result<Self> {
        require!(total_steps > 0, "total steps must be positive");
        require!(
            sampler_steps > 0 && sampler_steps <= total_steps,
            "sampler steps {sampler_steps} must be in 1..={total_steps}"
        );
        const S: f64 = 0.008;
        let f = |u: f64| {
            let c = math::cos((u + S) / (1.0 + S) * math::PI / 2.0);
            c * c
        };
        let f0 = f(0.0);
        let mut signal = Vec::with_capacity(total_steps);
        let mut noise = Vec::with_capacity(total_steps);
        for t in 0..total_steps {
            let abar = (f(t as f64 / total_steps as f64) / f0).clamp(1e-8, 1.0);
            signal.push(math::sqrt(abar));
            noise.push(math::sqrt(1.0 - abar));
        }
        Ok(Self {
            signal,
            noise,
            sampler_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.signal.len()
    }

    pub fn signal_coef(&self, t: usize) -> f64 {
        self.signal[t]
    }

    pub fn noise_coef(&self, t: usize) -> f64 {
        self.noise[t]
    }

    /// Forward noising: `x_t = signal[t] * x0 + noise[t] * eps`.
    pub fn add_noise(
        &self,
        x0: &LatentImage,
        noise: &LatentImage,
        t: usize,
    ) -> Result<LatentImage> {
        require!(
            x0.same_shape(noise),
            "x0 shape ({}, {}, {}, {}) does not match noise shape ({}, {}, {}, {})",
            x0.b,
            x0.c,
            x0.h,
            x0.w,
            noise.b,
            noise.c,
            noise.h,
            noise.w
        );
        require!(
            t < self.total_steps(),
            "step {t} out of range 0..{}",
            self.total_steps()
        );
        let (s, n) = (self.signal[t], self.noise[t]);
        let mut out = x0.clone();
        for (o, e) in out.data.iter_mut().zip(&noise.data) {
            *o = s * *o + n * *e;
        }
        Ok(out)
    }

    /// Descending list of diffusion steps visited when sampling in `steps`
    /// iterations: `floor((i + 1) * T / steps) - 1` for `i = steps-1 .. 0`.
    pub fn sampler_plan(&self, steps: usize) -> Result<Vec<SamplerStep>> {
        let total = self.total_steps();
        require!(
            steps > 0 && steps <= total,
            "sampler steps {steps} must be in 1..={total}"
        );
        let ts: Vec<usize> = (0..steps)
            .rev()
            .map(|i| (i + 1) * total / steps - 1)
            .collect();
        Ok(ts
            .iter()
            .enumerate()
            .map(|(idx, &t)| SamplerStep {
                t,
                t_prev: ts.get(idx + 1).copied(),
            })
            .collect())
    }

    /// Deterministic DDIM update. The clean estimate is
    /// `x0_hat = (x_t - noise[t] * eps) / signal[t]`; intermediate
    /// iterations clamp it to the pixel range (early-step estimates divide
    /// by a near-zero signal coefficient and would otherwise compound) and
    /// re-noise it to `t_prev`; the final iteration returns it exactly.
    pub fn ddim_step(
        &self,
        x_t: &LatentImage,
        step: SamplerStep,
        eps: &LatentImage,
    ) -> Result<LatentImage> {
        require!(
            x_t.same_shape(eps),
            "latent and predicted-noise shapes differ"
        );
        require!(step.t < self.total_steps(), "step {} out of range", step.t);
        if !eps.all_finite() {
            return Err(HarmonyError::NonFinite {
                context: alloc::string::String::from("predicted noise in ddim_step"),
            });
        }
        let (s_t, n_t) = (self.signal[step.t], self.noise[step.t]);
        let mut out = LatentImage::zeros(x_t.b, x_t.c, x_t.h, x_t.w);
        match step.t_prev {
            Some(tp) => {
                require!(tp < step.t, "t_prev {tp} must precede t {}", step.t);
                let (s_p, n_p) = (self.signal[tp], self.noise[tp]);
                for ((o, &x), &e) in out.data.iter_mut().zip(&x_t.data).zip(&eps.data) {
                    let x0_hat = ((x - n_t * e) / s_t).clamp(-1.0, 1.0);
                    *o = s_p * x0_hat + n_p * e;
                }
            }
            None => {
                for ((o, &x), &e) in out.data.iter_mut().zip(&x_t.data).zip(&eps.data) {
                    *o = (x - n_t * e) / s_t;
                }
            }
        }
        Ok(out)
    }
}
