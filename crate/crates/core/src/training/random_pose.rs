use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::PoseOffset3;
use crate::synth::rng_stream;
use crate::{Error, Result};

/// Proposal `q(T)` for the importance-sampled KL term: a bivariate
/// t-distribution on (x, y) times a von Mises / uniform mixture on yaw.
/// Offsets are relative to the ground-truth pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomPoseDistribution {
    /// Degrees of freedom of the t-distribution.
    pub dof: f64,
    /// Scale matrix of the t-distribution (m²).
    pub scale: [[f64; 2]; 2],
    /// von Mises concentration (1/rad²).
    pub kappa: f64,
    /// Weight of the uniform yaw component.
    pub uniform_weight: f64,
    /// Half-width of the uniform yaw component (degrees).
    pub yaw_range_deg: f64,
    pub samples: usize,
}

impl Default for RandomPoseDistribution {
    fn default() -> Self {
        Self {
            dof: 3.0,
            scale: [[1.0, 0.0], [0.0, 1.0]],
            kappa: 10.0,
            uniform_weight: 0.2,
            yaw_range_deg: 2.5,
            samples: 64,
        }
    }
}

/// `I0(x) e^{-x}` by its power series; accurate for the moderate
/// concentrations accepted by `validate`.
pub fn bessel_i0_scaled(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum * (-x).exp()
}

impl RandomPoseDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.dof > 0.0 && self.dof.is_finite()) {
            return Err(Error::arg("t-distribution needs positive degrees of freedom"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 500.0) {
            return Err(Error::arg("von Mises concentration must be in (0, 500]"));
        }
        if !(0.0..=1.0).contains(&self.uniform_weight) {
            return Err(Error::arg("uniform weight must be in [0, 1]"));
        }
        if !(self.yaw_range_deg > 0.0 && self.yaw_range_deg <= 180.0) {
            return Err(Error::arg("uniform yaw range must be in (0, 180] degrees"));
        }
        if self.samples == 0 {
            return Err(Error::arg("need at least one random pose"));
        }
        self.cholesky().map(|_| ())
    }

    fn scale_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.scale[0][0], self.scale[0][1], self.scale[1][0], self.scale[1][1])
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::U2>> {
        let s = self.scale_matrix();
        if (s[(0, 1)] - s[(1, 0)]).abs() > 1e-12 {
            return Err(Error::arg("t scale matrix must be symmetric"));
        }
        Cholesky::new(s).ok_or_else(|| Error::arg("t scale matrix must be positive definite"))
    }

    /// Density of the (x, y) part.
    pub fn xy_density(&self, x: f64, y: f64) -> Result<f64> {
        let chol = self.cholesky()?;
        let v = Vector2::new(x, y);
        let d2 = v.dot(&chol.solve(&v));
        let det = self.scale_matrix().determinant();
        let nu = self.dof;
        Ok((1.0 + d2 / nu).powf(-(nu / 2.0 + 1.0)) / (2.0 * PI * det.sqrt()))
    }

    /// Density of the yaw part on (−π, π].
    pub fn yaw_density(&self, psi: f64) -> f64 {
        let k = self.kappa;
        let vm = (k * (psi.cos() - 1.0)).exp() / (2.0 * PI * bessel_i0_scaled(k));
        let r = self.yaw_range_deg.to_radians();
        let u = if psi.abs() <= r { 1.0 / (2.0 * r) } else { 0.0 };
        (1.0 - self.uniform_weight) * vm + self.uniform_weight * u
    }

    /// Joint density `q(T)` of an offset.
    pub fn density(&self, o: PoseOffset3) -> Result<f64> {
        Ok(self.xy_density(o.dx, o.dy)? * self.yaw_density(o.dpsi))
    }

    /// Best-Fisher rejection sampler, mean zero.
    fn sample_von_mises(&self, rng: &mut impl Rng) -> f64 {
        let k = self.kappa;
        let tau = 1.0 + (1.0 + 4.0 * k * k).sqrt();
        let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * k);
        let r = (1.0 + rho * rho) / (2.0 * rho);
        loop {
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            let z = (PI * u1).cos();
            let f = (1.0 + r * z) / (r + z);
            let c = k * (r - f);
            if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                return sign * f.clamp(-1.0, 1.0).acos();
            }
        }
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> Result<PoseOffset3> {
        let l = self.cholesky()?.l();
        let n = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
        let chi = ChiSquared::new(self.dof).map_err(|e| Error::arg(e.to_string()))?;
        let w: f64 = chi.sample(rng);
        let xy = l * n * (self.dof / w).sqrt();
        let psi = if rng.random_bool(self.uniform_weight) {
            let r = self.yaw_range_deg.to_radians();
            rng.random_range(-r..=r)
        } else {
            self.sample_von_mises(rng)
        };
        Ok(PoseOffset3::new(xy.x, xy.y, psi))
    }

    /// `samples` offsets with their log-densities, reproducible from `seed`.
    pub fn sample(&self, seed: u64) -> Result<Vec<(PoseOffset3, f64)>> {
        self.validate()?;
        let mut rng = rng_stream(seed, 0x5eed);
        (0..self.samples)
            .map(|_| {
                let o = self.sample_one(&mut rng)?;
                let q = self.density(o)?;
                if !(q > 1e-300) {
                    return Err(Error::Sampling(format!("proposal density {q:e} at a drawn pose")));
                }
                Ok((o, q.ln()))
            })
            .collect()
    }
}
