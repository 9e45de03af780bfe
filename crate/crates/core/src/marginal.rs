//! Per-site marginal preprocessing.
//!
//! Each raw series `Y_t` is standardised through a Gaussian location-scale
//! model `Y_t = mu(x_t) + sigma(x_t) Z_t`, the upper tail of `Z_t` gets a
//! generalised Pareto fit with covariate-dependent scale, and the spliced
//! rank/GPD distribution function maps observations to exponential margins.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::GridDataset;
use crate::optim::{self, NelderMead};

/// Number of lagged values carried by each covariate row.
pub const MAX_LAGS: usize = 3;
pub const DAYS_PER_YEAR: f64 = 365.25;
/// Floor for sigma when the series has no spread.
pub const SIGMA_FLOOR: f64 = 1e-8;
pub const MIN_GPD_EXCEEDANCES: usize = 30;
const XI_MIN: f64 = -0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub day: i64,
    /// Day index scaled to `[0, 1]` over the series.
    pub linear_trend: f64,
    /// `(cos, sin)` of `2 pi h day / 365.25` for `h = 1..=H`.
    pub annual_harmonics: Vec<(f64, f64)>,
    /// Raw values at `t-1, t-2, t-3`.
    pub lag_values: [f64; MAX_LAGS],
}

/// Which covariates enter the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub harmonics: usize,
    pub lags: usize,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self { harmonics: 2, lags: 3 }
    }
}

impl DesignSpec {
    pub const INTERCEPT_ONLY: DesignSpec = DesignSpec { harmonics: 0, lags: 0 };

    fn validate(&self) -> Result<()> {
        if self.lags > MAX_LAGS {
            return Err(Error::domain(format!("at most {MAX_LAGS} lags are available")));
        }
        Ok(())
    }
}

/// One row per day `t >= 4` of `site`.
pub fn build_covariates(dataset: &GridDataset, site: usize, harmonics: usize) -> Result<Vec<CovariateRow>> {
    let n = dataset.n_times();
    if n < MAX_LAGS + 1 {
        return Err(Error::domain(format!("series of length {n} is too short for {MAX_LAGS} lags")));
    }
    if site >= dataset.n_sites() {
        return Err(Error::domain(format!("site {site} out of range")));
    }
    let t0 = dataset.times[0] as f64;
    let span = ((dataset.times[n - 1] - dataset.times[0]) as f64).max(1.0);
    Ok((MAX_LAGS..n)
        .map(|t| {
            let day = dataset.times[t];
            let angle = 2.0 * std::f64::consts::PI * day as f64 / DAYS_PER_YEAR;
            CovariateRow {
                day,
                linear_trend: (day as f64 - t0) / span,
                annual_harmonics: (1..=harmonics)
                    .map(|h| {
                        let a = h as f64 * angle;
                        (a.cos(), a.sin())
                    })
                    .collect(),
                lag_values: [
                    dataset.value(t - 1, site),
                    dataset.value(t - 2, site),
                    dataset.value(t - 3, site),
                ],
            }
        })
        .collect())
}

/// Raw values aligned with [`build_covariates`] (days `t >= 4`).
pub fn usable_series(dataset: &GridDataset, site: usize) -> Vec<f64> {
    (MAX_LAGS..dataset.n_times()).map(|t| dataset.value(t, site)).collect()
}

fn push_scale_terms(out: &mut Vec<f64>, row: &CovariateRow, spec: &DesignSpec) -> Result<()> {
    out.push(1.0);
    if spec.harmonics > 0 {
        if row.annual_harmonics.len() < spec.harmonics {
            return Err(Error::domain("covariate rows carry fewer harmonics than the design needs"));
        }
        out.push(row.linear_trend);
        for (c, s) in &row.annual_harmonics[..spec.harmonics] {
            out.push(*c);
            out.push(*s);
        }
    }
    Ok(())
}

/// `[1, trend, harmonics..., lags...]`; intercept only when both counts are 0.
fn mean_design(rows: &[CovariateRow], spec: &DesignSpec) -> Result<DMatrix<f64>> {
    let mut data = Vec::new();
    for row in rows {
        push_scale_terms(&mut data, row, spec)?;
        data.extend_from_slice(&row.lag_values[..spec.lags]);
    }
    let p = data.len() / rows.len().max(1);
    Ok(DMatrix::from_row_slice(rows.len(), p, &data))
}

/// `[1, trend, harmonics...]` for `log sigma` and `log psi`.
fn scale_design(rows: &[CovariateRow], spec: &DesignSpec) -> Result<DMatrix<f64>> {
    let mut data = Vec::new();
    for row in rows {
        push_scale_terms(&mut data, row, spec)?;
    }
    let p = data.len() / rows.len().max(1);
    Ok(DMatrix::from_row_slice(rows.len(), p, &data))
}

fn scale_terms(row: &CovariateRow, spec: &DesignSpec) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 + 2 * spec.harmonics);
    push_scale_terms(&mut v, row, spec).expect("validated at fit time");
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let mut xs = x.clone();
    for mut col in xs.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let gram = xs.transpose() * &xs;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 1e-12 * max) {
        return Err(Error::domain(format!(
            "covariate matrix is rank deficient (eigenvalue ratio {:.3e})",
            min / max
        )));
    }
    Ok(())
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    a.cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| Error::numerical("normal equations not positive definite"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScaleFit {
    pub design: DesignSpec,
    pub mu_coeffs: Vec<f64>,
    pub log_sigma_coeffs: Vec<f64>,
    pub fit_loglik: f64,
    pub iterations: usize,
    /// The series has (numerically) no spread; sigma sits at its floor.
    pub degenerate: bool,
}

impl LocationScaleFit {
    pub fn mu(&self, row: &CovariateRow) -> f64 {
        let mut v = scale_terms(row, &self.design);
        v.extend_from_slice(&row.lag_values[..self.design.lags]);
        dot(&v, &self.mu_coeffs)
    }

    pub fn sigma(&self, row: &CovariateRow) -> f64 {
        dot(&scale_terms(row, &self.design), &self.log_sigma_coeffs).exp()
    }

    pub fn n_params(&self) -> usize {
        self.mu_coeffs.len() + self.log_sigma_coeffs.len()
    }
}

fn gaussian_loglik(y: &[f64], mu: &DVector<f64>, log_sigma: &DVector<f64>) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    y.iter()
        .zip(mu.iter().zip(log_sigma.iter()))
        .map(|(y, (m, ls))| {
            let e = (y - m) / ls.exp();
            -c - ls - 0.5 * e * e
        })
        .sum()
}

/// Gaussian maximum likelihood for `mu(x)` (linear) and `log sigma(x)`
/// (linear) by alternating weighted least squares and Fisher scoring.
pub fn fit_location_scale(series: &[f64], covariates: &[CovariateRow], design: DesignSpec) -> Result<LocationScaleFit> {
    design.validate()?;
    if series.len() != covariates.len() {
        return Err(Error::domain("series and covariates differ in length"));
    }
    let x = mean_design(covariates, &design)?;
    let zd = scale_design(covariates, &design)?;
    let n = series.len();
    if n <= x.ncols() + zd.ncols() {
        return Err(Error::domain("too few observations for the design"));
    }
    let y = DVector::from_column_slice(series);
    let mean = y.mean();
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 1e-24 * (1.0 + mean * mean) {
        let mut mu_coeffs = vec![0.0; x.ncols()];
        mu_coeffs[0] = mean;
        let mut log_sigma_coeffs = vec![0.0; zd.ncols()];
        log_sigma_coeffs[0] = SIGMA_FLOOR.ln();
        let ls = DVector::from_element(n, SIGMA_FLOOR.ln());
        let mu = DVector::from_element(n, mean);
        return Ok(LocationScaleFit {
            design,
            mu_coeffs,
            log_sigma_coeffs,
            fit_loglik: gaussian_loglik(series, &mu, &ls),
            iterations: 0,
            degenerate: true,
        });
    }
    check_rank(&x)?;
    check_rank(&zd)?;

    let mut gamma = DVector::zeros(zd.ncols());
    gamma[0] = 0.5 * var.ln();
    let mut beta = DVector::zeros(x.ncols());
    let mut prev = f64::NEG_INFINITY;
    let max_iter = 200;
    for iter in 1..=max_iter {
        let log_sigma = &zd * &gamma;
        let w = log_sigma.map(|ls| (-2.0 * ls).exp());
        // weighted least squares for the mean
        let xw = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] * w[i]);
        beta = solve_spd(x.transpose() * &xw, xw.transpose() * &y)?;
        let mu = &x * &beta;
        // Fisher scoring step for log sigma
        let u = DVector::from_fn(n, |i, _| (y[i] - mu[i]).powi(2) * w[i] - 1.0);
        let step = solve_spd(zd.transpose() * &zd * 2.0, zd.transpose() * &u)?;
        let mut scale = 1.0;
        let ll_old = gaussian_loglik(series, &mu, &log_sigma);
        let mut ll = ll_old;
        for _ in 0..30 {
            let cand = &gamma + &step * scale;
            let ls = &zd * &cand;
            let l = gaussian_loglik(series, &mu, &ls);
            if l.is_finite() && l >= ll_old {
                gamma = cand;
                ll = l;
                break;
            }
            scale *= 0.5;
        }
        if (ll - prev).abs() <= 1e-10 * (1.0 + ll.abs()) {
            return Ok(LocationScaleFit {
                design,
                mu_coeffs: beta.iter().copied().collect(),
                log_sigma_coeffs: gamma.iter().copied().collect(),
                fit_loglik: ll,
                iterations: iter,
                degenerate: false,
            });
        }
        prev = ll;
    }
    let mut last_iterate: Vec<f64> = beta.iter().copied().collect();
    last_iterate.extend(gamma.iter());
    Err(Error::Fit {
        message: format!("location-scale fit did not converge in {max_iter} iterations"),
        last_iterate,
    })
}

/// `(Y_t - mu(x_t)) / sigma(x_t)`.
pub fn standardize(series: &[f64], fit: &LocationScaleFit, covariates: &[CovariateRow]) -> Vec<f64> {
    series
        .iter()
        .zip(covariates)
        .map(|(y, row)| (y - fit.mu(row)) / fit.sigma(row))
        .collect()
}

// ---------------------------------------------------------------------------
// generalised Pareto tail
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub threshold: f64,
    pub quantile_level: f64,
    pub design: DesignSpec,
    pub psi_coeffs: Vec<f64>,
    pub xi: f64,
    pub loglik: f64,
    pub n_exceedances: usize,
    pub converged: bool,
}

impl GpdFit {
    pub fn psi(&self, row: &CovariateRow) -> f64 {
        dot(&scale_terms(row, &self.design), &self.psi_coeffs).exp()
    }

    /// GPD distribution function of the excess `y >= 0`.
    pub fn cdf_excess(&self, y: f64, row: &CovariateRow) -> f64 {
        gpd_cdf(y, self.psi(row), self.xi)
    }
}

pub fn gpd_cdf(y: f64, psi: f64, xi: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    if xi.abs() < 1e-12 {
        return -(-y / psi).exp_m1();
    }
    let t = 1.0 + xi * y / psi;
    if t <= 0.0 {
        return 1.0;
    }
    -((-1.0 / xi) * t.ln()).exp_m1()
}

pub fn gpd_ln_pdf(y: f64, psi: f64, xi: f64) -> f64 {
    if xi.abs() < 1e-12 {
        return -psi.ln() - y / psi;
    }
    let t = xi * y / psi;
    if t <= -1.0 {
        return f64::NEG_INFINITY;
    }
    -psi.ln() - (1.0 / xi + 1.0) * t.ln_1p()
}

/// Empirical `p`-quantile `sorted[ceil(p n) - 1]`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// GPD fit to the excesses of `z` above its `quantile_level` quantile, with
/// `log psi` linear in the scale design and constant `xi`.
pub fn fit_gpd(z: &[f64], covariates: &[CovariateRow], quantile_level: f64, design: DesignSpec) -> Result<GpdFit> {
    design.validate()?;
    if z.len() != covariates.len() || z.is_empty() {
        return Err(Error::domain("standardised series and covariates differ in length"));
    }
    if !(quantile_level > 0.0 && quantile_level < 1.0) {
        return Err(Error::domain("quantile level must lie in (0, 1)"));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let u = empirical_quantile(&sorted, quantile_level);
    let idx: Vec<usize> = (0..z.len()).filter(|&t| z[t] > u).collect();
    if idx.len() < MIN_GPD_EXCEEDANCES {
        return Err(Error::domain(format!(
            "{} threshold exceedances; at least {MIN_GPD_EXCEEDANCES} are needed",
            idx.len()
        )));
    }
    let excess: Vec<f64> = idx.iter().map(|&t| z[t] - u).collect();
    let rows: Vec<Vec<f64>> = idx.iter().map(|&t| scale_terms(&covariates[t], &design)).collect();
    let p = rows[0].len();
    let nll = |x: &[f64]| -> f64 {
        let xi = x[p];
        if !(xi > XI_MIN) || xi > 5.0 {
            return f64::INFINITY;
        }
        let mut s = 0.0;
        for (y, r) in excess.iter().zip(&rows) {
            let psi = dot(r, &x[..p]).exp();
            let l = gpd_ln_pdf(*y, psi, xi);
            if !l.is_finite() {
                return f64::INFINITY;
            }
            s += l;
        }
        -s
    };
    let mean_excess = excess.iter().sum::<f64>() / excess.len() as f64;
    let mut x0 = vec![0.0; p + 1];
    x0[0] = mean_excess.ln();
    x0[p] = 0.1;
    let steps = vec![0.2; p + 1];
    let nm = NelderMead::new(1e-10, 20_000);
    let best = nm.minimize(nll, &x0, &steps);
    if !best.value.is_finite() {
        return Err(Error::Fit {
            message: "GPD likelihood is not finite at any simplex vertex".into(),
            last_iterate: best.x,
        });
    }
    let (x, value) = optim::newton_polish(nll, &best.x, 20);
    let xi = x[p];
    if xi < XI_MIN + 1e-3 {
        return Err(Error::Fit {
            message: format!("GPD shape ran to the xi = {XI_MIN} boundary; likelihood unbounded"),
            last_iterate: x,
        });
    }
    Ok(GpdFit {
        threshold: u,
        quantile_level,
        design,
        psi_coeffs: x[..p].to_vec(),
        xi,
        loglik: -value,
        n_exceedances: idx.len(),
        converged: best.converged,
    })
}

// ---------------------------------------------------------------------------
// spliced distribution function
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteMarginal {
    pub location_scale: LocationScaleFit,
    pub gpd: GpdFit,
    pub n: usize,
    /// sha256 of the sorted standardised sample (little-endian f64 bytes).
    pub sample_digest: String,
    #[serde(skip)]
    sorted: Vec<f64>,
}

fn digest(sorted: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in sorted {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl SiteMarginal {
    pub fn sorted_sample(&self) -> &[f64] {
        &self.sorted
    }

    /// `(count <= u) / (n + 1)`.
    pub fn phi_u(&self) -> f64 {
        let c = self.sorted.partition_point(|v| *v <= self.gpd.threshold);
        c as f64 / (self.n + 1) as f64
    }

    /// Average-rank empirical CDF; values off the sample take the count at
    /// or below them, floored at half a rank.
    pub fn rank_cdf(&self, z: f64) -> f64 {
        let below = self.sorted.partition_point(|v| *v < z);
        let at_or_below = self.sorted.partition_point(|v| *v <= z);
        let ties = at_or_below - below;
        let rank = if ties > 0 {
            below as f64 + (ties as f64 + 1.0) / 2.0
        } else {
            (below as f64).max(0.5)
        };
        rank / (self.n + 1) as f64
    }

    /// Rank branch below the threshold, `phi_u + (1 - phi_u) GPD(z - u)`
    /// above it, and exactly `phi_u` at it.
    pub fn cdf(&self, z: f64, row: &CovariateRow) -> f64 {
        let u = self.gpd.threshold;
        if z < u {
            self.rank_cdf(z)
        } else {
            let phi = self.phi_u();
            if z == u {
                return phi;
            }
            let tail = phi + (1.0 - phi) * self.gpd.cdf_excess(z - u, row);
            // keep strictly inside (0, 1) in the far tail
            tail.min(1.0 - f64::EPSILON)
        }
    }
}

/// `-ln(1 - u)`.
pub fn to_exponential(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("probability must lie in (0, 1), got {u}")));
    }
    Ok(-(-u).ln_1p())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalOptions {
    pub design: DesignSpec,
    pub quantile_level: f64,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            design: DesignSpec::default(),
            quantile_level: 0.8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalModel {
    pub run_id: i64,
    pub options: MarginalOptions,
    pub sites: Vec<SiteMarginal>,
}

pub fn fit_site(raw: &GridDataset, site: usize, options: &MarginalOptions) -> Result<SiteMarginal> {
    let cov = build_covariates(raw, site, options.design.harmonics)?;
    let y = usable_series(raw, site);
    let ls = fit_location_scale(&y, &cov, options.design)?;
    let z = standardize(&y, &ls, &cov);
    let gpd = fit_gpd(&z, &cov, options.quantile_level, options.design)?;
    let mut sorted = z;
    sorted.sort_by(f64::total_cmp);
    Ok(SiteMarginal {
        location_scale: ls,
        gpd,
        n: sorted.len(),
        sample_digest: digest(&sorted),
        sorted,
    })
}

/// Fits every site independently (in parallel).
pub fn fit_marginal_model(raw: &GridDataset, options: &MarginalOptions) -> Result<MarginalModel> {
    let sites = (0..raw.n_sites())
        .into_par_iter()
        .map(|j| fit_site(raw, j, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalModel {
        run_id: raw.run_id,
        options: *options,
        sites,
    })
}

impl MarginalModel {
    fn site(&self, site: usize) -> Result<&SiteMarginal> {
        self.sites
            .get(site)
            .ok_or_else(|| Error::domain(format!("site {site} out of range")))
    }

    /// Rebuilds the sorted samples (not serialised) from the raw data and
    /// checks them against the stored digests.
    pub fn restore(&mut self, raw: &GridDataset) -> Result<()> {
        if raw.n_sites() != self.sites.len() {
            return Err(Error::Validation("dataset and marginal model differ in site count".into()));
        }
        for (j, s) in self.sites.iter_mut().enumerate() {
            let cov = build_covariates(raw, j, self.options.design.harmonics)?;
            let y = usable_series(raw, j);
            let mut z = standardize(&y, &s.location_scale, &cov);
            z.sort_by(f64::total_cmp);
            let dg = digest(&z);
            if dg != s.sample_digest {
                return Err(Error::Validation(format!(
                    "site {j}: sample digest mismatch; the marginal model was fitted on different data"
                )));
            }
            s.sorted = z;
        }
        Ok(())
    }

    /// Fitted `F_j` at standardised value `z` with the covariates of usable
    /// row `t`.
    pub fn semiparametric_cdf(&self, z: f64, row: &CovariateRow, site: usize) -> Result<f64> {
        Ok(self.site(site)?.cdf(z, row))
    }

    /// Uniform and exponential scale series (days `t >= 4`).
    pub fn transform(&self, raw: &GridDataset) -> Result<(GridDataset, GridDataset)> {
        let d = raw.n_sites();
        if d != self.sites.len() {
            return Err(Error::Validation("dataset and marginal model differ in site count".into()));
        }
        let columns = (0..d)
            .into_par_iter()
            .map(|j| {
                let s = &self.sites[j];
                let cov = build_covariates(raw, j, self.options.design.harmonics)?;
                let y = usable_series(raw, j);
                let z = standardize(&y, &s.location_scale, &cov);
                let u: Vec<f64> = z.iter().zip(&cov).map(|(z, row)| s.cdf(*z, row)).collect();
                let e = u.iter().map(|u| to_exponential(*u)).collect::<Result<Vec<_>>>()?;
                Ok((u, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = raw.n_times() - MAX_LAGS;
        let mut uni = vec![0.0; n * d];
        let mut exp = vec![0.0; n * d];
        for (j, (u, e)) in columns.iter().enumerate() {
            for t in 0..n {
                uni[t * d + j] = u[t];
                exp[t * d + j] = e[t];
            }
        }
        let times = raw.times[MAX_LAGS..].to_vec();
        Ok((
            GridDataset::new(raw.run_id, raw.sites.clone(), times.clone(), uni)?,
            GridDataset::new(raw.run_id, raw.sites.clone(), times, exp)?,
        ))
    }

    /// Exponential-scale equivalent of a raw threshold at one site via the
    /// nearest-observation procedure: take the covariates of the raw
    /// observation closest to the threshold, standardise the threshold with
    /// them and evaluate the fitted spliced distribution there.
    pub fn leadbetter_to_exponential(&self, threshold_raw: f64, site: usize, raw: &GridDataset) -> Result<LeadbetterConversion> {
        let s = self.site(site)?;
        let cov = build_covariates(raw, site, self.options.design.harmonics)?;
        let y = usable_series(raw, site);
        let t_star = y
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - threshold_raw).abs().total_cmp(&(b.1 - threshold_raw).abs()))
            .map(|(t, _)| t)
            .ok_or_else(|| Error::domain("empty series"))?;
        let row = &cov[t_star];
        let z = (threshold_raw - s.location_scale.mu(row)) / s.location_scale.sigma(row);
        let max_z = *s.sorted.last().ok_or_else(|| Error::domain("marginal model has no sample; call restore"))?;
        let extrapolated = z > max_z;
        if extrapolated {
            log::warn!("site {site}: threshold {threshold_raw} lies beyond the data; using the GPD tail directly");
        }
        let u = s.cdf(z, row);
        Ok(LeadbetterConversion {
            q: to_exponential(u)?,
            u,
            z,
            t_star: t_star + MAX_LAGS,
            extrapolated,
        })
    }

    /// Per-site exponential thresholds for one raw threshold.
    pub fn exponential_thresholds(&self, threshold_raw: f64, raw: &GridDataset) -> Result<Vec<f64>> {
        (0..self.sites.len())
            .map(|j| self.leadbetter_to_exponential(threshold_raw, j, raw).map(|c| c.q))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadbetterConversion {
    pub q: f64,
    pub u: f64,
    /// Standardised threshold.
    pub z: f64,
    /// Row of the nearest observation in the raw series.
    pub t_star: usize,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicRow {
    pub site: usize,
    pub lags: usize,
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
}

/// AIC of the location-scale fit for lag counts `0..=3` at every site.
pub fn lag_aic_report(raw: &GridDataset, harmonics: usize) -> Result<Vec<AicRow>> {
    let mut out = Vec::new();
    for site in 0..raw.n_sites() {
        let cov = build_covariates(raw, site, harmonics)?;
        let y = usable_series(raw, site);
        for lags in 0..=MAX_LAGS {
            let fit = fit_location_scale(&y, &cov, DesignSpec { harmonics, lags })?;
            let k = fit.n_params();
            out.push(AicRow {
                site,
                lags,
                loglik: fit.fit_loglik,
                n_params: k,
                aic: 2.0 * k as f64 - 2.0 * fit.fit_loglik,
            });
        }
    }
    Ok(out)
}
