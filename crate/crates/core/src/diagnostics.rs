//! PP/QQ goodness-of-fit series and model-based pairwise chi.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{equal_count_bins, ChiMatrix};
use crate::error::{Error, Result};
use crate::estimate::quantile_sorted;
use crate::fit::{self, ExceedanceSet, TgFitOptions};
use crate::geometry::GeometricModel;
use crate::ingest::{distance, Coord};
use crate::simulate::{task_rng, CloudSampler};
use crate::special;

pub const DEFAULT_BAND_REPS: usize = 500;
pub const CHI_DISPLAY_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    PP,
    QQ,
    CHI,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub run_id: i64,
    /// `tau` for PP/QQ, `u` for chi.
    pub level: f64,
    pub n_reps: usize,
    /// Fraction of points whose reference value lies inside the band.
    pub coverage: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSeries {
    pub kind: DiagnosticKind,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Empty when the series carries no band.
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    pub meta: SeriesMeta,
}

impl DiagnosticSeries {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn has_band(&self) -> bool {
        !self.band_lo.is_empty()
    }

    /// Fraction of indices with `reference[i]` inside `[lo_i, hi_i]`.
    pub fn band_coverage(&self, reference: &[f64]) -> Option<f64> {
        if !self.has_band() || reference.len() != self.len() {
            return None;
        }
        let inside = reference
            .iter()
            .zip(self.band_lo.iter().zip(&self.band_hi))
            .filter(|(r, (lo, hi))| *lo <= *r && *r <= *hi)
            .count();
        Some(inside as f64 / self.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "lo", "hi"])?;
        for i in 0..self.len() {
            let (lo, hi) = if self.has_band() {
                (self.band_lo[i].to_string(), self.band_hi[i].to_string())
            } else {
                (String::new(), String::new())
            };
            w.write_record([self.x[i].to_string(), self.y[i].to_string(), lo, hi])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `<stem>.csv` with the points and `<stem>.json` with the metadata.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let sidecar = serde_json::json!({ "kind": self.kind, "points": self.len(), "meta": self.meta });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// `F(r | w, r > r_tau(w)) = 1 - Fbar(r) / Fbar(r_tau)` per exceedance.
pub fn pit_values(exceedances: &ExceedanceSet, model: &GeometricModel) -> Vec<f64> {
    exceedances
        .points
        .iter()
        .map(|p| {
            let g = model.g(&p.w);
            let thr = model.threshold(&p.w);
            let ln_ratio = special::ln_gamma_sf(model.shape, g, p.r) - special::ln_gamma_sf(model.shape, g, thr);
            (-ln_ratio.exp_m1()).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
        })
        .collect()
}

/// Pointwise percentile bands of the ascending order statistics of
/// bootstrap resamples of `u`.
fn order_statistic_bands(u: &[f64], n_reps: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let reps: Vec<Vec<f64>> = (0..n_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = task_rng(seed, b as u64);
            let mut s: Vec<f64> = (0..n).map(|_| u[rng.random_range(0..n)]).collect();
            s.sort_by(f64::total_cmp);
            s
        })
        .collect();
    pointwise_band(&reps, n)
}

/// Bands from refitting the model on each resampled exceedance set and
/// recomputing the PIT values under the refitted model.
fn refit_bands(
    exceedances: &ExceedanceSet,
    model: &GeometricModel,
    n_reps: usize,
    seed: u64,
    refit: &TgFitOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = exceedances.len();
    let results: Vec<Result<Vec<f64>>> = (0..n_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = task_rng(seed, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = exceedances.select(&idx);
            let m = fit::refit_params(&model.params, &resampled, refit)?.compile()?;
            let mut s = pit_values(&resampled, &m);
            s.sort_by(f64::total_cmp);
            Ok(s)
        })
        .collect();
    let mut reps = Vec::with_capacity(n_reps);
    let mut log = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => reps.push(s),
            Err(e) => log.push(format!("replicate {b}: {e}")),
        }
    }
    if log.len() as f64 > 0.05 * n_reps as f64 {
        return Err(Error::Bootstrap {
            failed: log.len(),
            total: n_reps,
            log,
        });
    }
    Ok(pointwise_band(&reps, n))
}

/// Pointwise 2.5% and 97.5% quantiles across sorted replicates.
fn pointwise_band(reps: &[Vec<f64>], n: usize) -> (Vec<f64>, Vec<f64>) {
    let n_reps = reps.len();
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    let mut column = vec![0.0; n_reps];
    for i in 0..n {
        for (c, r) in column.iter_mut().zip(reps) {
            *c = r[i];
        }
        column.sort_by(f64::total_cmp);
        lo[i] = quantile_sorted(&column, 0.025);
        hi[i] = quantile_sorted(&column, 0.975);
    }
    (lo, hi)
}

/// Descending order statistics `u_(1) >= ... >= u_(n)` of the PIT values.
pub fn descending_order_statistics(u: &[f64]) -> Vec<f64> {
    let mut s = u.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Points `(i / (n + 1), u_(n - i + 1))` with `u_(k)` the descending order
/// statistics, so `y` runs through the PIT values in ascending order.
pub fn pp_points(
    exceedances: &ExceedanceSet,
    model: &GeometricModel,
    n_reps: usize,
    seed: u64,
    run_id: i64,
) -> Result<DiagnosticSeries> {
    pp_points_with(exceedances, model, n_reps, seed, run_id, None)
}

/// [`pp_points`] with optional refit-per-replicate bands.
pub fn pp_points_with(
    exceedances: &ExceedanceSet,
    model: &GeometricModel,
    n_reps: usize,
    seed: u64,
    run_id: i64,
    refit: Option<&TgFitOptions>,
) -> Result<DiagnosticSeries> {
    if exceedances.is_empty() {
        return Err(Error::domain("no exceedances for PP diagnostics"));
    }
    let u = pit_values(exceedances, model);
    let n = u.len();
    let desc = descending_order_statistics(&u);
    let x: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
    let y: Vec<f64> = (1..=n).map(|i| desc[n - i]).collect();
    let (band_lo, band_hi) = match (n_reps, refit) {
        (0, _) => (vec![], vec![]),
        (_, None) => order_statistic_bands(&u, n_reps, seed),
        (_, Some(o)) => refit_bands(exceedances, model, n_reps, seed, o)?,
    };
    let mut s = DiagnosticSeries {
        kind: DiagnosticKind::PP,
        x,
        y,
        band_lo,
        band_hi,
        meta: SeriesMeta {
            run_id,
            level: model.params.tau,
            n_reps,
            coverage: None,
            note: "reference line y = x".into(),
        },
    };
    s.meta.coverage = s.band_coverage(&s.x.clone());
    Ok(s)
}

/// Both PP axes mapped through `-ln(1 - p)`.
pub fn qq_points(
    exceedances: &ExceedanceSet,
    model: &GeometricModel,
    n_reps: usize,
    seed: u64,
    run_id: i64,
) -> Result<DiagnosticSeries> {
    let pp = pp_points(exceedances, model, n_reps, seed, run_id)?;
    Ok(pp_to_qq(&pp))
}

pub fn pp_to_qq(pp: &DiagnosticSeries) -> DiagnosticSeries {
    let f = |v: &Vec<f64>| v.iter().map(|p| -(-p).ln_1p()).collect::<Vec<f64>>();
    let mut s = DiagnosticSeries {
        kind: DiagnosticKind::QQ,
        x: f(&pp.x),
        y: f(&pp.y),
        band_lo: f(&pp.band_lo),
        band_hi: f(&pp.band_hi),
        meta: SeriesMeta {
            note: "exponential scale; reference line y = x".into(),
            ..pp.meta.clone()
        },
    };
    s.meta.coverage = s.band_coverage(&s.x.clone());
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairChi {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// Unclamped model estimate.
    pub model_raw: f64,
    /// Model estimate clamped to `[0, 1]`.
    pub model: f64,
    pub standard_error: f64,
    pub empirical: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiDiagnostic {
    pub u: f64,
    pub m_sim: usize,
    pub pairs: Vec<PairChi>,
    /// Model chi averaged over equal-count distance bins, with a
    /// +/- 1.96 s.e. band.
    pub model_series: DiagnosticSeries,
    /// Empirical chi over the same bins, when supplied.
    pub empirical_series: Option<DiagnosticSeries>,
}

/// Model `chi(u)` for every site pair from one shared cloud simulated at
/// `k = 1`: `P(Z_i > q, Z_j > q) / (1 - u)` with `q = -ln(1 - u)`.
#[allow(clippy::too_many_arguments)]
pub fn model_chi(
    model: &GeometricModel,
    exceedances: &ExceedanceSet,
    u: f64,
    coords: &[Coord],
    m_sim: usize,
    seed: u64,
    empirical: Option<&ChiMatrix>,
    run_id: i64,
) -> Result<ChiDiagnostic> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("u must lie in (0, 1), got {u}")));
    }
    let d = exceedances.d;
    if coords.len() != d {
        return Err(Error::domain("coordinates and model differ in dimension"));
    }
    if d < 2 {
        return Err(Error::domain("chi needs at least two sites"));
    }
    let q = -(-u).ln_1p();
    let sampler = CloudSampler::new(model, exceedances, 1.0)?;
    let n_pairs = d * (d - 1) / 2;
    let pair_index = |i: usize, j: usize| i * d - i * (i + 1) / 2 + (j - i - 1);
    let counts = sampler
        .fold_tasks(
            m_sim,
            seed,
            || (vec![0usize; n_pairs], Vec::with_capacity(d)),
            |acc, z, _| {
                let (counts, above) = acc;
                above.clear();
                above.extend((0..d).filter(|&j| z[j] > q));
                for a in 0..above.len() {
                    for b in a + 1..above.len() {
                        counts[pair_index(above[a], above[b])] += 1;
                    }
                }
            },
        )?
        .into_iter()
        .fold(vec![0usize; n_pairs], |mut total, (c, _)| {
            for (t, v) in total.iter_mut().zip(c) {
                *t += v;
            }
            total
        });
    let p_exceed = exceedances.exceedance_probability();
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..d {
        for j in i + 1..d {
            let frac = counts[pair_index(i, j)] as f64 / m_sim as f64;
            let raw = p_exceed * frac / (1.0 - u);
            let se = p_exceed * (frac * (1.0 - frac) / m_sim as f64).sqrt() / (1.0 - u);
            pairs.push(PairChi {
                i,
                j,
                distance: distance(&coords[i], &coords[j]),
                model_raw: raw,
                model: raw.clamp(0.0, 1.0),
                standard_error: se,
                empirical: empirical.map(|c| c.get(i, j)),
            });
        }
    }
    let distances: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    let bins = equal_count_bins(&distances, CHI_DISPLAY_BINS);
    let mean = |b: &Vec<usize>, f: &dyn Fn(&PairChi) -> f64| b.iter().map(|&k| f(&pairs[k])).sum::<f64>() / b.len() as f64;
    let x: Vec<f64> = bins.iter().map(|b| mean(b, &|p| p.distance)).collect();
    let y: Vec<f64> = bins.iter().map(|b| mean(b, &|p| p.model)).collect();
    let se: Vec<f64> = bins
        .iter()
        .map(|b| (b.iter().map(|&k| pairs[k].standard_error.powi(2)).sum::<f64>()).sqrt() / b.len() as f64)
        .collect();
    let meta = SeriesMeta {
        run_id,
        level: u,
        n_reps: 0,
        coverage: None,
        note: format!("{} pairs in {} equal-count distance bins", pairs.len(), bins.len()),
    };
    let model_series = DiagnosticSeries {
        kind: DiagnosticKind::CHI,
        x: x.clone(),
        band_lo: y.iter().zip(&se).map(|(y, s)| (y - 1.96 * s).max(0.0)).collect(),
        band_hi: y.iter().zip(&se).map(|(y, s)| (y + 1.96 * s).min(1.0)).collect(),
        y,
        meta: meta.clone(),
    };
    let empirical_series = empirical.map(|_| DiagnosticSeries {
        kind: DiagnosticKind::CHI,
        x,
        y: bins.iter().map(|b| mean(b, &|p| p.empirical.unwrap_or(f64::NAN))).collect(),
        band_lo: vec![],
        band_hi: vec![],
        meta: SeriesMeta {
            note: "empirical chi".into(),
            ..meta
        },
    });
    Ok(ChiDiagnostic {
        u,
        m_sim,
        pairs,
        model_series,
        empirical_series,
    })
}
