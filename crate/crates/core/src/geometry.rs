//! Radial–angular decomposition, the generalised Gaussian gauge and the
//! radial threshold `r_tau(w) = C_tau / g(w)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{distance, Coord};
use crate::special;

/// Floor applied to exactly-zero angular components before the `1/gamma`
/// power.
pub const ZERO_ANGLE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularPoint {
    pub r: f64,
    pub w: Vec<f64>,
    /// Row index of the originating day.
    pub t: usize,
}

impl AngularPoint {
    pub fn reconstruct(&self) -> Vec<f64> {
        self.w.iter().map(|w| self.r * w).collect()
    }
}

/// `r = sum(z)`, `w = z / r`.
pub fn radial_angular(z: &[f64], t: usize) -> Result<AngularPoint> {
    if z.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain("radial_angular needs a finite non-negative vector"));
    }
    let r: f64 = z.iter().sum();
    if r <= 0.0 {
        return Err(Error::domain("radial_angular of the zero vector is undefined"));
    }
    Ok(AngularPoint {
        r,
        w: z.iter().map(|v| v / r).collect(),
        t,
    })
}

/// Powered-exponential correlation `exp(-(h/phi)^kappa)` over all site pairs.
pub fn powexp_correlation(coords: &[Coord], phi: f64, kappa: f64) -> Result<DMatrix<f64>> {
    if !(phi > 0.0) || !(kappa > 0.0 && kappa <= 2.0) {
        return Err(Error::domain(format!(
            "powered exponential needs phi > 0 and kappa in (0, 2], got ({phi}, {kappa})"
        )));
    }
    let d = coords.len();
    Ok(DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            (-(distance(&coords[i], &coords[j]) / phi).powf(kappa)).exp()
        }
    }))
}

/// Generalised Gaussian gauge with a cached Cholesky factor of `Sigma`.
#[derive(Debug, Clone)]
pub struct Gauge {
    d: usize,
    /// Lower-triangular factor, row-major.
    chol: Vec<f64>,
    gamma: f64,
    jitter: f64,
}

impl Gauge {
    /// Factorises `sigma`, retrying with diagonal jitter 1e-10 then 1e-8.
    pub fn new(sigma: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::domain(format!("gauge exponent must be positive, got {gamma}")));
        }
        let d = sigma.nrows();
        for jitter in [0.0, 1e-10, 1e-8] {
            let mut m = sigma.clone();
            for i in 0..d {
                m[(i, i)] += jitter;
            }
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                let mut chol = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..=i {
                        chol[i * d + j] = l[(i, j)];
                    }
                }
                if chol.iter().all(|v| v.is_finite()) {
                    return Ok(Self { d, chol, gamma, jitter });
                }
            }
        }
        Err(Error::numerical("correlation matrix is not positive definite after jitter"))
    }

    pub fn from_coords(coords: &[Coord], phi: f64, kappa: f64, gamma: f64) -> Result<Self> {
        Self::new(&powexp_correlation(coords, phi, kappa)?, gamma)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `[(w^{1/gamma})' Sigma^{-1} w^{1/gamma}]^{gamma/2}`. Works for any
    /// non-negative vector, not only simplex points.
    pub fn eval(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.d);
        let d = self.d;
        let inv_gamma = 1.0 / self.gamma;
        // forward substitution L y = v, accumulating y'y
        let mut y = [0.0f64; 64];
        let mut heap;
        let y: &mut [f64] = if d <= 64 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let wi = if w[i] > 0.0 { w[i] } else { ZERO_ANGLE_FLOOR };
            let v = if self.gamma == 2.0 { wi.sqrt() } else { wi.powf(inv_gamma) };
            let row = &self.chol[i * d..i * d + i];
            let s: f64 = row.iter().zip(y.iter()).map(|(l, yk)| l * yk).sum();
            let yi = (v - s) / self.chol[i * d + i];
            y[i] = yi;
            q += yi * yi;
        }
        if self.gamma == 2.0 {
            q
        } else {
            q.powf(0.5 * self.gamma)
        }
    }
}

/// One-shot gauge evaluation; prefer [`Gauge`] for repeated use.
pub fn gauge(w: &[f64], sigma: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    if w.len() != sigma.nrows() {
        return Err(Error::domain("angle and correlation dimensions differ"));
    }
    if w.iter().any(|v| *v < 0.0) {
        return Err(Error::domain("gauge needs a non-negative vector"));
    }
    let g = Gauge::new(sigma, gamma)?.eval(w);
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::numerical(format!("gauge evaluated to {g}")))
    }
}

/// `tau`-quantile of the unit-rate gamma law with the given shape.
pub fn c_tau_from_quantile(shape: f64, tau: f64) -> Result<f64> {
    if !(shape > 0.0) || !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain("c_tau needs shape > 0 and tau in (0, 1)"));
    }
    Ok(special::gamma_quantile(shape, tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub c_tau: f64,
    /// Fraction of the sample with `r g(w) > c_tau`.
    pub exceed_fraction: f64,
    /// Every `r g(w)` was identical.
    pub degenerate: bool,
}

/// Picks `C` as the empirical `tau`-quantile of `r_i g(w_i)`, so that the
/// strict exceedance fraction is within `1/n` of `1 - tau`.
pub fn calibrate_c_tau(radii: &[f64], g_values: &[f64], tau: f64) -> Result<Calibration> {
    if radii.len() != g_values.len() || radii.is_empty() {
        return Err(Error::domain("calibration needs matching non-empty samples"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain("tau must lie in (0, 1)"));
    }
    let mut prod: Vec<f64> = radii.iter().zip(g_values).map(|(r, g)| r * g).collect();
    Ok(calibrate_products(&mut prod, tau))
}

pub(crate) fn calibrate_products(prod: &mut [f64], tau: f64) -> Calibration {
    let n = prod.len();
    let idx = ((tau * n as f64).ceil() as usize).clamp(1, n) - 1;
    let (_, c, _) = prod.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    let c = *c;
    let exceed = prod.iter().filter(|v| **v > c).count();
    let degenerate = prod.iter().all(|v| *v == prod[0]);
    Calibration {
        c_tau: c,
        exceed_fraction: exceed as f64 / n as f64,
        degenerate,
    }
}

/// Fitted gauge and threshold parameters.
///
/// The threshold uses the standard Gaussian gauge (gamma fixed at 2) with
/// the pairwise estimates `threshold_phi`, `threshold_kappa`; the
/// truncated-gamma law uses `(lambda, phi, kappa, gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeParams {
    pub lambda: f64,
    pub phi: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub c_tau: f64,
    pub tau: f64,
    pub threshold_phi: f64,
    pub threshold_kappa: f64,
    pub dplane_coords: Vec<Coord>,
}

impl GaugeParams {
    pub fn dim(&self) -> usize {
        self.dplane_coords.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.phi > 0.0
            && self.kappa > 0.0
            && self.kappa <= 2.0
            && self.gamma > 0.0
            && self.c_tau > 0.0
            && self.tau > 0.0
            && self.tau < 1.0
            && self.threshold_phi > 0.0
            && self.threshold_kappa > 0.0
            && self.threshold_kappa <= 2.0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid gauge parameters {self:?}")))
        }
    }

    pub fn compile(&self) -> Result<GeometricModel> {
        self.validate()?;
        Ok(GeometricModel {
            gauge: Gauge::from_coords(&self.dplane_coords, self.phi, self.kappa, self.gamma)?,
            threshold_gauge: Gauge::from_coords(
                &self.dplane_coords,
                self.threshold_phi,
                self.threshold_kappa,
                2.0,
            )?,
            shape: self.lambda * self.dim() as f64,
            params: self.clone(),
        })
    }
}

/// Factorised, ready-to-evaluate form of [`GaugeParams`].
#[derive(Debug, Clone)]
pub struct GeometricModel {
    pub params: GaugeParams,
    pub gauge: Gauge,
    pub threshold_gauge: Gauge,
    /// Gamma shape `lambda d`.
    pub shape: f64,
}

impl GeometricModel {
    pub fn g(&self, w: &[f64]) -> f64 {
        self.gauge.eval(w)
    }

    pub fn threshold(&self, w: &[f64]) -> f64 {
        radial_threshold_with(&self.threshold_gauge, self.params.c_tau, w)
    }

    /// `R' = r / r_tau(w)`.
    pub fn scaled_radius(&self, p: &AngularPoint) -> f64 {
        p.r / self.threshold(&p.w)
    }

    /// Log survival of the fitted gamma law for angle `w` at radius `r`.
    pub fn ln_sf(&self, w: &[f64], r: f64) -> f64 {
        special::ln_gamma_sf(self.shape, self.g(w), r)
    }
}

#[inline]
pub fn radial_threshold_with(threshold_gauge: &Gauge, c_tau: f64, w: &[f64]) -> f64 {
    c_tau / threshold_gauge.eval(w)
}

/// `r_tau(w) = C_tau / g(w)` with the gamma = 2 threshold gauge.
pub fn radial_threshold(w: &[f64], model: &GeometricModel) -> f64 {
    model.threshold(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::grid_coordinates;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn radial_angular_examples() {
        let p = radial_angular(&[1.0, 1.0], 0).unwrap();
        assert_eq!(p.r, 2.0);
        assert_eq!(p.w, vec![0.5, 0.5]);
        let p = radial_angular(&[3.0, 0.0, 0.0, 0.0], 4).unwrap();
        assert_eq!((p.r, p.w.clone(), p.t), (3.0, vec![1.0, 0.0, 0.0, 0.0], 4));
        assert!(radial_angular(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn correlation_examples() {
        let s = powexp_correlation(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], 0.830, 1.89).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        // direct scalar evaluation
        let expected = (-(1.0f64 / 0.830).powf(1.89)).exp();
        assert_relative_eq!(s[(0, 1)], expected, max_relative = 1e-15);
        assert!((s[(0, 1)] - 0.241).abs() < 5e-4);
        assert!(s[(0, 2)] < s[(0, 1)]);
        assert!(powexp_correlation(&[[0.0, 0.0]], 1.0, 2.5).is_err());
    }

    #[test]
    fn gauge_special_cases() {
        let id = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(gauge(&[0.5, 0.5], &id, 1.0).unwrap(), 0.5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(gauge(&[0.3, 0.7], &id, 2.0).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn c_tau_examples() {
        assert_relative_eq!(c_tau_from_quantile(1.0, 0.8).unwrap(), 1.6094379124341003, max_relative = 1e-12);
        // bisection oracle on 1 - e^{-c}(1 + c) = 0.8
        let (mut lo, mut hi) = (0.0f64, 20.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 1.0 - (-mid).exp() * (1.0 + mid) < 0.8 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_relative_eq!(c_tau_from_quantile(2.0, 0.8).unwrap(), lo, max_relative = 1e-10);
        assert!((lo - 2.994).abs() < 1e-3);
        let mut prev = 0.0;
        for k in 1..99 {
            let c = c_tau_from_quantile(3.0, k as f64 / 100.0).unwrap();
            assert!(c > prev);
            prev = c;
        }
    }

    #[test]
    fn calibration_examples() {
        let r: Vec<f64> = (1..=1000).map(|i| (i as f64 * 0.7919).sin().abs() + 0.01 * i as f64).collect();
        let g: Vec<f64> = (1..=1000).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let cal = calibrate_c_tau(&r, &g, 0.8).unwrap();
        let exceed = r.iter().zip(&g).filter(|(r, g)| *r * *g > cal.c_tau).count();
        assert!((exceed as f64 / 1000.0 - 0.2).abs() <= 1.0 / 1000.0);
        let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(calibrate_c_tau(&r2, &g, 0.8).unwrap().c_tau, 2.0 * cal.c_tau);
        let flat = calibrate_c_tau(&[2.0; 10], &[1.5; 10], 0.8).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.c_tau, 3.0);
        assert_eq!(flat.exceed_fraction, 0.0);
    }

    #[test]
    fn threshold_scaling() {
        let params = GaugeParams {
            lambda: 1.0,
            phi: 1e-3,
            kappa: 1.0,
            gamma: 2.0,
            c_tau: 3.5,
            tau: 0.8,
            threshold_phi: 1e-3,
            threshold_kappa: 1.0,
            dplane_coords: grid_coordinates(2).unwrap(),
        };
        let model = params.compile().unwrap();
        // identity Sigma, gamma = 2: g == 1 on the simplex, threshold constant
        for w in [[0.25; 4], [0.7, 0.1, 0.1, 0.1], [1.0, 0.0, 0.0, 0.0]] {
            assert_relative_eq!(radial_threshold(&w, &model), 3.5, max_relative = 1e-10);
        }
        let w = [0.4, 0.3, 0.2, 0.1];
        let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(
            model.threshold(&doubled),
            0.5 * model.threshold(&w),
            max_relative = 1e-12
        );
    }

    fn positive_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-3f64..10.0, d)
    }

    proptest! {
        #[test]
        fn gauge_homogeneous(z in positive_vec(9), c in 0.01f64..100.0, gamma in 0.2f64..5.0,
                              phi in 0.3f64..3.0, kappa in 0.2f64..1.9) {
            let g = Gauge::from_coords(&grid_coordinates(3).unwrap(), phi, kappa, gamma).unwrap();
            let cz: Vec<f64> = z.iter().map(|v| c * v).collect();
            let lhs = g.eval(&cz);
            let rhs = c * g.eval(&z);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }

        #[test]
        fn gauge_permutation_equivariant(z in positive_vec(4), gamma in 0.3f64..4.0, seed in 0u64..1000) {
            let coords = vec![[0.0, 0.0], [1.3, 0.2], [0.4, 2.1], [2.2, 1.7]];
            let mut perm: Vec<usize> = (0..4).collect();
            let mut s = seed;
            for i in (1..4).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let pc: Vec<Coord> = perm.iter().map(|&i| coords[i]).collect();
            let pz: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
            let a = Gauge::from_coords(&coords, 1.1, 1.3, gamma).unwrap().eval(&z);
            let b = Gauge::from_coords(&pc, 1.1, 1.3, gamma).unwrap().eval(&pz);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn angular_reconstruction(z in positive_vec(6)) {
            let p = radial_angular(&z, 0).unwrap();
            prop_assert!((p.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.reconstruct().iter().zip(&z) {
                prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
            }
        }
    }
}
