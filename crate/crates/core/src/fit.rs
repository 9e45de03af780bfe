//! Two-stage estimation of the geometric model.
//!
//! Stage one fits `(phi, kappa)` of the standard Gaussian gauge (gamma = 2)
//! by a pairwise composite truncated-gamma likelihood and calibrates the
//! radial threshold `r_tau(w) = C_tau / g(w)`. Stage two holds that threshold
//! fixed and maximises the full `d`-dimensional truncated-gamma likelihood
//! over `(lambda, phi, kappa, gamma)` with the generalised gauge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, AngularPoint, Gauge, GaugeParams};
use crate::ingest::{distance, Coord, GridDataset};
use crate::optim::{self, NelderMead};
use crate::special::{self, ln_gamma};

pub const KAPPA_MIN: f64 = 0.05;
pub const KAPPA_MAX: f64 = 2.0;
pub const GAMMA_MIN: f64 = 0.05;
pub const GAMMA_MAX: f64 = 10.0;
const PHI_MIN: f64 = 1e-3;
const PHI_MAX: f64 = 1e3;
const CHUNK: usize = 1024;

/// Points strictly above their radial threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceSet {
    pub points: Vec<AngularPoint>,
    /// `r_tau(w_i)` for each point.
    pub thresholds: Vec<f64>,
    pub d: usize,
    /// Sample size before thresholding.
    pub n_total: usize,
}

impl ExceedanceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Empirical `P(R' > 1)`.
    pub fn exceedance_probability(&self) -> f64 {
        self.points.len() as f64 / self.n_total as f64
    }

    /// Same set with points reordered/resampled by index.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            thresholds: idx.iter().map(|&i| self.thresholds[i]).collect(),
            d: self.d,
            n_total: self.n_total,
        }
    }
}

/// A sample split at the radial threshold.
#[derive(Debug, Clone)]
pub struct RadialSplit {
    pub exceedances: ExceedanceSet,
    pub non_exceedances: Vec<AngularPoint>,
    /// `R' > 1` flag per row of the source data.
    pub flags: Vec<bool>,
}

/// Splits every row of `exp_data` into exceedances (`r > threshold(w)`) and
/// non-exceedances. All-zero rows count towards the sample size only.
pub fn split_sample<F>(exp_data: &GridDataset, threshold: F) -> Result<RadialSplit>
where
    F: Fn(&[f64]) -> f64,
{
    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let mut non = Vec::new();
    let mut flags = Vec::with_capacity(exp_data.n_times());
    for (t, row) in exp_data.rows().enumerate() {
        if row.iter().all(|v| *v == 0.0) {
            flags.push(false);
            continue;
        }
        let p = geometry::radial_angular(row, t)?;
        let thr = threshold(&p.w);
        if p.r > thr {
            points.push(p);
            thresholds.push(thr);
            flags.push(true);
        } else {
            non.push(p);
            flags.push(false);
        }
    }
    Ok(RadialSplit {
        exceedances: ExceedanceSet {
            points,
            thresholds,
            d: exp_data.n_sites(),
            n_total: exp_data.n_times(),
        },
        non_exceedances: non,
        flags,
    })
}

// ---------------------------------------------------------------------------
// pairwise stage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseFit {
    pub phi: f64,
    pub kappa: f64,
    /// `d`-dimensional calibrated constant.
    pub c_tau: f64,
    pub tau: f64,
    /// Composite log-likelihood at the optimum (last pass).
    pub loglik: f64,
    /// Composite log-likelihood at the initial values (first pass).
    pub loglik_init: f64,
    /// `kappa` finished within 1e-3 of its upper bound.
    pub kappa_at_boundary: bool,
    pub passes: usize,
    pub iterations: usize,
}

struct PairData {
    h: f64,
    z: Vec<[f64; 2]>,
}

struct PairExceedances {
    h: f64,
    r: Vec<f64>,
    ln_r: Vec<f64>,
    sqrt_w1w2: Vec<f64>,
    r_thr: Vec<f64>,
}

#[inline]
fn pair_rho(h: f64, phi: f64, kappa: f64) -> f64 {
    (-(h / phi).powf(kappa)).exp()
}

#[inline]
fn pair_gauge(sqrt_w1w2: f64, rho: f64) -> f64 {
    // (w1 + w2 - 2 rho sqrt(w1 w2)) / (1 - rho^2) with w1 + w2 = 1
    (1.0 - 2.0 * rho * sqrt_w1w2) / (1.0 - rho * rho)
}

fn pair_thresholds(pair: &PairData, phi: f64, kappa: f64, tau: f64) -> PairExceedances {
    let rho = pair_rho(pair.h, phi, kappa);
    let mut radii = Vec::with_capacity(pair.z.len());
    let mut roots = Vec::with_capacity(pair.z.len());
    for z in &pair.z {
        let r = z[0] + z[1];
        if r > 0.0 {
            radii.push(r);
            roots.push(((z[0] / r) * (z[1] / r)).sqrt());
        }
    }
    let mut prod: Vec<f64> = radii
        .iter()
        .zip(&roots)
        .map(|(r, s)| r * pair_gauge(*s, rho))
        .collect();
    let c = geometry::calibrate_products(&mut prod, tau).c_tau;
    let mut out = PairExceedances {
        h: pair.h,
        r: Vec::new(),
        ln_r: Vec::new(),
        sqrt_w1w2: Vec::new(),
        r_thr: Vec::new(),
    };
    for (r, s) in radii.iter().zip(&roots) {
        let g = pair_gauge(*s, rho);
        if r * g > c {
            out.r.push(*r);
            out.ln_r.push(r.ln());
            out.sqrt_w1w2.push(*s);
            out.r_thr.push(c / g);
        }
    }
    out
}

fn pair_loglik(ex: &PairExceedances, phi: f64, kappa: f64) -> f64 {
    let rho = pair_rho(ex.h, phi, kappa);
    if !(rho < 1.0 - 1e-12) {
        return f64::NEG_INFINITY;
    }
    let mut ll = 0.0;
    for k in 0..ex.r.len() {
        let g = pair_gauge(ex.sqrt_w1w2[k], rho);
        // shape 2, ln Gamma(2) = 0
        ll += 2.0 * g.ln() + ex.ln_r[k] - ex.r[k] * g - special::ln_gamma_q(2.0, g * ex.r_thr[k]);
    }
    ll
}

fn decode_phi_kappa(x: &[f64]) -> Option<(f64, f64)> {
    let phi = x[0].exp();
    let kappa = KAPPA_MAX / (1.0 + (-x[1]).exp());
    (phi >= PHI_MIN && phi <= PHI_MAX && kappa >= KAPPA_MIN).then_some((phi, kappa))
}

fn encode_kappa(kappa: f64) -> f64 {
    let p = (kappa / KAPPA_MAX).clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Pairwise composite-likelihood estimate of `(phi, kappa)` with gamma = 2
/// and lambda = 1, followed by calibration of the `d`-dimensional `C_tau`.
///
/// Each pair gets its own calibrated bivariate threshold; thresholds are
/// recomputed at the current estimate between passes until the estimate
/// settles.
pub fn fit_pairwise(
    exp_data: &GridDataset,
    coords: &[Coord],
    tau: f64,
    init: (f64, f64),
) -> Result<PairwiseFit> {
    let d = exp_data.n_sites();
    if d < 2 {
        return Err(Error::domain("pairwise fitting needs at least two sites"));
    }
    if coords.len() != d {
        return Err(Error::domain("coordinate count differs from site count"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain("tau must lie in (0, 1)"));
    }
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            pairs.push(PairData {
                h: distance(&coords[i], &coords[j]),
                z: exp_data.rows().map(|row| [row[i], row[j]]).collect(),
            });
        }
    }
    let nm = NelderMead::new(1e-10, 2000);
    let mut x = vec![init.0.ln(), encode_kappa(init.1.min(1.95))];
    let mut loglik_init = f64::NAN;
    let mut loglik = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut passes = 0;
    let mut last = (f64::NAN, f64::NAN);
    for pass in 0..6 {
        passes = pass + 1;
        let (phi0, kappa0) =
            decode_phi_kappa(&x).ok_or_else(|| Error::domain("initial (phi, kappa) out of range"))?;
        let ex: Vec<PairExceedances> = pairs
            .par_iter()
            .map(|p| pair_thresholds(p, phi0, kappa0, tau))
            .collect();
        let objective = |x: &[f64]| -> f64 {
            let Some((phi, kappa)) = decode_phi_kappa(x) else {
                return f64::INFINITY;
            };
            let parts: Vec<f64> = ex.par_iter().map(|e| pair_loglik(e, phi, kappa)).collect();
            -parts.iter().sum::<f64>()
        };
        if pass == 0 {
            loglik_init = -objective(&x);
        }
        let m = nm.minimize(objective, &x, &[0.3, 0.5]);
        iterations += m.iterations;
        if !m.value.is_finite() {
            return Err(Error::Fit {
                message: "pairwise likelihood is not finite at any simplex vertex".into(),
                last_iterate: m.x,
            });
        }
        x = m.x;
        loglik = -m.value;
        let (phi, kappa) = decode_phi_kappa(&x).unwrap();
        let moved = ((phi - last.0) / phi).abs().max((kappa - last.1).abs());
        last = (phi, kappa);
        if moved < 1e-4 || ((phi - phi0) / phi).abs().max((kappa - kappa0).abs()) < 1e-4 {
            break;
        }
    }
    let (phi, kappa) = last;
    let gauge = Gauge::from_coords(coords, phi, kappa, 2.0)?;
    let mut prod = Vec::with_capacity(exp_data.n_times());
    for row in exp_data.rows() {
        let r: f64 = row.iter().sum();
        if r > 0.0 {
            let w: Vec<f64> = row.iter().map(|v| v / r).collect();
            prod.push(r * gauge.eval(&w));
        } else {
            prod.push(0.0);
        }
    }
    let cal = geometry::calibrate_products(&mut prod, tau);
    let kappa_at_boundary = kappa > KAPPA_MAX - 1e-3;
    if kappa_at_boundary {
        log::warn!("pairwise kappa estimate pinned at the upper bound 2");
    }
    Ok(PairwiseFit {
        phi,
        kappa,
        c_tau: cal.c_tau,
        tau,
        loglik,
        loglik_init,
        kappa_at_boundary,
        passes,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// truncated-gamma stage
// ---------------------------------------------------------------------------

/// Free parameters of the truncated-gamma likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgParams {
    pub lambda: f64,
    pub phi: f64,
    pub kappa: f64,
    pub gamma: f64,
}

impl TgParams {
    /// `(ln lambda, ln phi, logit(kappa / 2), ln gamma)`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        vec![self.lambda.ln(), self.phi.ln(), encode_kappa(self.kappa), self.gamma.ln()]
    }

    pub fn from_unconstrained(x: &[f64]) -> Option<Self> {
        let (phi, kappa) = decode_phi_kappa(&x[1..3])?;
        let p = Self {
            lambda: x[0].exp(),
            phi,
            kappa,
            gamma: x[3].exp(),
        };
        (p.lambda > 1e-6 && p.lambda < 1e3 && p.gamma >= GAMMA_MIN && p.gamma <= GAMMA_MAX).then_some(p)
    }
}

/// Truncated-gamma log-likelihood of the exceedances.
///
/// Each point contributes
/// `ld ln g - ln Gamma(ld) + (ld - 1) ln r - r g - ln Fbar(r_tau; ld, g)`
/// with `ld = lambda d`. Returns `-inf` when any term is not finite or a
/// point does not exceed its threshold.
pub fn tg_loglik(params: &TgParams, coords: &[Coord], exceedances: &ExceedanceSet) -> f64 {
    let Ok(gauge) = Gauge::from_coords(coords, params.phi, params.kappa, params.gamma) else {
        return f64::NEG_INFINITY;
    };
    tg_loglik_with(&gauge, params.lambda, exceedances)
}

pub(crate) fn tg_loglik_with(gauge: &Gauge, lambda: f64, ex: &ExceedanceSet) -> f64 {
    let shape = lambda * ex.d as f64;
    let lg = ln_gamma(shape);
    let idx: Vec<usize> = (0..ex.points.len()).collect();
    let parts: Vec<f64> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = 0.0;
            for &i in chunk {
                let p = &ex.points[i];
                let thr = ex.thresholds[i];
                if !(p.r > thr) {
                    return f64::NEG_INFINITY;
                }
                let g = gauge.eval(&p.w);
                s += shape * g.ln() - lg + (shape - 1.0) * p.r.ln() - p.r * g
                    - special::ln_gamma_q(shape, g * thr);
            }
            s
        })
        .collect();
    let total: f64 = parts.iter().sum();
    if total.is_finite() {
        total
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub evaluations: usize,
    pub simplex_size: f64,
    pub converged: bool,
    /// Largest central-difference gradient component in unconstrained
    /// coordinates at the returned optimum.
    pub gradient_max_abs: f64,
    pub start_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedGeometricModel {
    pub run_id: i64,
    pub params: GaugeParams,
    pub loglik: f64,
    pub loglik_init: f64,
    pub convergence: Convergence,
    pub n_exceedances: usize,
    pub n_total: usize,
    /// Best negative log-likelihood per optimiser iteration, winning start.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgFitOptions {
    pub multistarts: usize,
    /// Multiplicative jitter half-width for multistarts.
    pub jitter: f64,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TgFitOptions {
    fn default() -> Self {
        Self {
            multistarts: 3,
            jitter: 0.2,
            seed: 0,
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

/// Maximum-likelihood fit of `(lambda, phi, kappa, gamma)` over a fixed set
/// of threshold exceedances.
pub fn fit_truncated_gamma(
    exceedances: &ExceedanceSet,
    pairwise: &PairwiseFit,
    coords: &[Coord],
    init: TgParams,
    options: &TgFitOptions,
    run_id: i64,
) -> Result<FittedGeometricModel> {
    if exceedances.len() < 40 {
        return Err(Error::domain(format!(
            "truncated-gamma fit needs at least 40 exceedances, got {}",
            exceedances.len()
        )));
    }
    if coords.len() != exceedances.d {
        return Err(Error::domain("coordinate count differs from exceedance dimension"));
    }
    let objective = |x: &[f64]| -> f64 {
        match TgParams::from_unconstrained(x) {
            Some(p) => -tg_loglik(&p, coords, exceedances),
            None => f64::INFINITY,
        }
    };
    let x0 = init.to_unconstrained();
    let loglik_init = -objective(&x0);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut starts = vec![init];
    for _ in 0..options.multistarts {
        let mut jit = |v: f64| v * (1.0 + options.jitter * (2.0 * rng.random::<f64>() - 1.0));
        starts.push(TgParams {
            lambda: jit(init.lambda),
            phi: jit(init.phi),
            kappa: jit(init.kappa).min(1.99),
            gamma: jit(init.gamma),
        });
    }
    let nm = NelderMead {
        tol_f: options.tol,
        tol_x: 1e-7,
        max_iter: options.max_iter,
        restarts: 3,
    };
    let results: Vec<_> = starts
        .par_iter()
        .map(|s| nm.minimize(objective, &s.to_unconstrained(), &[0.2, 0.2, 0.3, 0.2]))
        .collect();
    let (best_idx, best) = results
        .iter()
        .enumerate()
        .filter(|(_, m)| m.value.is_finite())
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .ok_or_else(|| Error::Fit {
            message: format!(
                "all {} starts failed; objective not finite (initial loglik {loglik_init})",
                results.len()
            ),
            last_iterate: x0.clone(),
        })?;
    let (x, value) = optim::newton_polish(objective, &best.x, 20);
    let (x, value) = if value <= best.value { (x, value) } else { (best.x.clone(), best.value) };
    let gradient = optim::numerical_gradient(objective, &x, 1e-6);
    let p = TgParams::from_unconstrained(&x).ok_or_else(|| Error::Fit {
        message: "optimum left the admissible region".into(),
        last_iterate: x.clone(),
    })?;
    Ok(FittedGeometricModel {
        run_id,
        params: GaugeParams {
            lambda: p.lambda,
            phi: p.phi,
            kappa: p.kappa,
            gamma: p.gamma,
            c_tau: pairwise.c_tau,
            tau: pairwise.tau,
            threshold_phi: pairwise.phi,
            threshold_kappa: pairwise.kappa,
            dplane_coords: coords.to_vec(),
        },
        loglik: -value,
        loglik_init,
        convergence: Convergence {
            iterations: results.iter().map(|m| m.iterations).sum(),
            evaluations: results.iter().map(|m| m.evaluations).sum(),
            simplex_size: best.simplex_size,
            converged: best.converged,
            gradient_max_abs: gradient.iter().fold(0.0, |a, g| a.max(g.abs())),
            start_index: best_idx,
        },
        n_exceedances: exceedances.len(),
        n_total: exceedances.n_total,
        trace: best.trace.clone(),
    })
}

/// Refits `(lambda, phi, kappa, gamma)` on another exceedance set, starting
/// from `params` and keeping its threshold (`c_tau`, threshold gauge) fixed.
pub fn refit_params(params: &GaugeParams, exceedances: &ExceedanceSet, options: &TgFitOptions) -> Result<GaugeParams> {
    let threshold = PairwiseFit {
        phi: params.threshold_phi,
        kappa: params.threshold_kappa,
        c_tau: params.c_tau,
        tau: params.tau,
        loglik: f64::NAN,
        loglik_init: f64::NAN,
        kappa_at_boundary: false,
        passes: 0,
        iterations: 0,
    };
    let init = TgParams {
        lambda: params.lambda,
        phi: params.phi,
        kappa: params.kappa.min(1.95),
        gamma: params.gamma,
    };
    fit_truncated_gamma(exceedances, &threshold, &params.dplane_coords, init, options, 0).map(|f| f.params)
}

/// Both stages end to end on exponential-scale data.
pub fn fit_geometric_model(
    exp_data: &GridDataset,
    coords: &[Coord],
    tau: f64,
    options: &TgFitOptions,
) -> Result<(PairwiseFit, RadialSplit, FittedGeometricModel)> {
    let init = default_phi_init(coords);
    let pairwise = fit_pairwise(exp_data, coords, tau, (init, 1.0))?;
    let thr = Gauge::from_coords(coords, pairwise.phi, pairwise.kappa, 2.0)?;
    let split = split_sample(exp_data, |w| pairwise.c_tau / thr.eval(w))?;
    let fitted = fit_truncated_gamma(
        &split.exceedances,
        &pairwise,
        coords,
        TgParams {
            lambda: 1.0,
            phi: pairwise.phi,
            kappa: pairwise.kappa.min(1.95),
            gamma: 2.0,
        },
        options,
        exp_data.run_id,
    )?;
    Ok((pairwise, split, fitted))
}

/// Median inter-site distance, a scale-aware starting range.
pub fn default_phi_init(coords: &[Coord]) -> f64 {
    let mut h: Vec<f64> = crate::ingest::site_pairs(coords).iter().map(|p| p.distance).collect();
    if h.is_empty() {
        return 1.0;
    }
    h.sort_by(f64::total_cmp);
    h[h.len() / 2].max(1e-2)
}
