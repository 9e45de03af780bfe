//! Sampling beyond the radial threshold.
//!
//! Angles are resampled from the empirical exceedance angles with importance
//! weights `IW(w) = Fbar(k r_tau(w)) / Fbar(r_tau(w))`, and radii come from
//! the fitted gamma law truncated below at `k r_tau(w)`. Generation is split
//! into fixed-size tasks, each with its own ChaCha stream, so output depends
//! only on the seed and never on thread scheduling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::ExtremeSet;
use crate::fit::ExceedanceSet;
use crate::geometry::{AngularPoint, GeometricModel};
use crate::ingest::GridDataset;
use crate::special;

/// Points generated per RNG task.
pub const TASK_SIZE: usize = 8192;

/// ChaCha8 generator for task `task` under `seed`.
pub fn task_rng(seed: u64, task: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceWeight {
    pub value: f64,
    /// Both survival values underflowed; `value` is 0.
    pub underflow: bool,
}

/// `IW(w) = Fbar(k r_tau(w); ld, g(w)) / Fbar(r_tau(w); ld, g(w))`.
pub fn importance_weight(w: &[f64], k: f64, model: &GeometricModel) -> ImportanceWeight {
    let g = model.g(w);
    let thr = model.threshold(w);
    let num = special::ln_gamma_sf(model.shape, g, k * thr);
    let den = special::ln_gamma_sf(model.shape, g, thr);
    if num == f64::NEG_INFINITY {
        return ImportanceWeight {
            value: 0.0,
            underflow: den == f64::NEG_INFINITY,
        };
    }
    ImportanceWeight {
        value: (num - den).exp().min(1.0),
        underflow: false,
    }
}

pub fn importance_weights(points: &[AngularPoint], k: f64, model: &GeometricModel) -> Vec<f64> {
    points
        .iter()
        .map(|p| importance_weight(&p.w, k, model).value)
        .collect()
}

/// `P(R' > k | R' > 1)` as the mean importance weight of the exceedances.
pub fn estimate_p_rprime_gt_k(exceedances: &ExceedanceSet, k: f64, model: &GeometricModel) -> Result<f64> {
    if exceedances.is_empty() {
        return Err(Error::domain("no exceedances to average over"));
    }
    let w = importance_weights(&exceedances.points, k, model);
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

fn weighted_index(weights: &[f64], k: f64) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|_| {
        Error::Sampling(format!(
            "all importance weights vanished at k = {k}; use a smaller extrapolation level"
        ))
    })
}

/// Draws `m` indices into `weights` with replacement, proportional to weight.
fn sample_indices<R: Rng>(weights: &[f64], k: f64, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::domain("sample size must be >= 1"));
    }
    let dist = weighted_index(weights, k)?;
    Ok((0..m).map(|_| dist.sample(rng)).collect())
}

/// Resamples `m` exceedance angles with probability proportional to
/// `IW(w_i; k)`.
pub fn sample_angles<R: Rng>(
    exceedances: &ExceedanceSet,
    k: f64,
    m: usize,
    model: &GeometricModel,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let weights = importance_weights(&exceedances.points, k, model);
    let idx = sample_indices(&weights, k, m, rng)?;
    Ok(idx.into_iter().map(|i| exceedances.points[i].w.clone()).collect())
}

/// Inverse-CDF draw from the gamma(ld, g(w)) law truncated below at
/// `k r_tau(w)`; always strictly above the truncation point.
pub fn sample_radius<R: Rng>(w: &[f64], k: f64, model: &GeometricModel, rng: &mut R) -> Result<f64> {
    let g = model.g(w);
    let lower = k * model.threshold(w);
    draw_truncated_gamma(model.shape, g, lower, rng)
}

pub(crate) fn draw_truncated_gamma<R: Rng>(shape: f64, rate: f64, lower: f64, rng: &mut R) -> Result<f64> {
    let x0 = rate * lower;
    let ln_sf0 = special::ln_gamma_q(shape, x0);
    if !ln_sf0.is_finite() {
        return Err(Error::Sampling(format!(
            "gamma survival underflows at the truncation point {lower}"
        )));
    }
    let u: f64 = rng.sample(Open01);
    let x = special::inv_ln_gamma_q(shape, u.ln() + ln_sf0, x0);
    let r = x / rate;
    Ok(if r > lower { r } else { lower.next_up() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedCloud {
    pub d: usize,
    /// Row-major `m x d`.
    pub points: Vec<f64>,
    pub k: f64,
    pub seed: u64,
    /// Importance weight of each point's source angle.
    pub weights_used: Vec<f64>,
}

impl SimulatedCloud {
    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.d)
    }
}

/// Prepared sampler over one exceedance set at one extrapolation level.
pub struct CloudSampler<'a> {
    model: &'a GeometricModel,
    exceedances: &'a ExceedanceSet,
    k: f64,
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl<'a> CloudSampler<'a> {
    pub fn new(model: &'a GeometricModel, exceedances: &'a ExceedanceSet, k: f64) -> Result<Self> {
        if !(k >= 1.0) {
            return Err(Error::domain(format!("extrapolation level must be >= 1, got {k}")));
        }
        if exceedances.is_empty() {
            return Err(Error::domain("no exceedances to resample"));
        }
        let weights = importance_weights(&exceedances.points, k, model);
        let dist = weighted_index(&weights, k)?;
        Ok(Self {
            model,
            exceedances,
            k,
            weights,
            dist,
        })
    }

    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Generates task `task` (`len` points), calling `f` with each point and
    /// its source weight.
    fn run_task<F: FnMut(&[f64], f64)>(&self, seed: u64, task: u64, len: usize, mut f: F) -> Result<()> {
        let mut rng = task_rng(seed, task);
        let d = self.exceedances.d;
        let mut z = vec![0.0; d];
        for _ in 0..len {
            let i = self.dist.sample(&mut rng);
            let w = &self.exceedances.points[i].w;
            let r = sample_radius(w, self.k, self.model, &mut rng)?;
            for (zj, wj) in z.iter_mut().zip(w) {
                *zj = r * wj;
            }
            f(&z, self.weights[i]);
        }
        Ok(())
    }

    /// Folds `m` generated points through per-task accumulators, returning
    /// them in task order.
    pub fn fold_tasks<A, I, F>(&self, m: usize, seed: u64, init: I, step: F) -> Result<Vec<A>>
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, &[f64], f64) + Sync,
    {
        let tasks = m.div_ceil(TASK_SIZE);
        (0..tasks)
            .into_par_iter()
            .map(|t| {
                let len = TASK_SIZE.min(m - t * TASK_SIZE);
                let mut acc = init();
                self.run_task(seed, t as u64, len, |z, w| step(&mut acc, z, w))?;
                Ok(acc)
            })
            .collect()
    }
}

/// `m` points `z* = r* w*` from `Z | R' > k`.
pub fn simulate_cloud(
    model: &GeometricModel,
    exceedances: &ExceedanceSet,
    k: f64,
    m: usize,
    seed: u64,
) -> Result<SimulatedCloud> {
    let sampler = CloudSampler::new(model, exceedances, k)?;
    let d = exceedances.d;
    let parts = sampler.fold_tasks(
        m,
        seed,
        || (Vec::new(), Vec::new()),
        |acc: &mut (Vec<f64>, Vec<f64>), z, w| {
            acc.0.extend_from_slice(z);
            acc.1.push(w);
        },
    )?;
    let mut points = Vec::with_capacity(m * d);
    let mut weights_used = Vec::with_capacity(m);
    for (p, w) in parts {
        points.extend(p);
        weights_used.extend(w);
    }
    Ok(SimulatedCloud {
        d,
        points,
        k,
        seed,
        weights_used,
    })
}

// ---------------------------------------------------------------------------
// temporal blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularBlock {
    /// Row index of the anchor day.
    pub anchor_t: usize,
    /// Angles of days `anchor_t .. anchor_t + block_len`.
    pub angles: Vec<Vec<f64>>,
    pub weight: f64,
}

/// Exponential-scale series with its `R' > 1` flags, for block resampling.
#[derive(Debug, Clone)]
pub struct BlockSource<'a> {
    pub data: &'a GridDataset,
    pub flags: &'a [bool],
    pub block_len: usize,
    /// Valid anchor rows: flagged, with a full block after them.
    pub anchors: Vec<usize>,
}

impl<'a> BlockSource<'a> {
    pub fn new(data: &'a GridDataset, flags: &'a [bool], block_len: usize) -> Result<Self> {
        if block_len == 0 {
            return Err(Error::domain("block length must be >= 1"));
        }
        if flags.len() != data.n_times() {
            return Err(Error::domain("flag vector length differs from series length"));
        }
        let n = data.n_times();
        let anchors: Vec<usize> = (0..n)
            .filter(|&t| flags[t] && t + block_len <= n)
            .collect();
        if anchors.is_empty() {
            return Err(Error::Sampling("no valid block anchors (no exceedance with a full block)".into()));
        }
        Ok(Self {
            data,
            flags,
            block_len,
            anchors,
        })
    }

    pub fn with_anchors(&self, anchors: Vec<usize>) -> Self {
        Self {
            anchors,
            ..self.clone()
        }
    }

    fn anchor_point(&self, t: usize) -> AngularPoint {
        crate::geometry::radial_angular(self.data.row(t), t).expect("anchor rows are non-zero")
    }

    pub fn anchor_weights(&self, k: f64, model: &GeometricModel) -> Vec<f64> {
        self.anchors
            .iter()
            .map(|&t| importance_weight(&self.anchor_point(t).w, k, model).value)
            .collect()
    }

    fn block_angles(&self, t: usize) -> Vec<Vec<f64>> {
        (t..t + self.block_len)
            .map(|s| {
                let row = self.data.row(s);
                let r: f64 = row.iter().sum();
                if r > 0.0 {
                    row.iter().map(|v| v / r).collect()
                } else {
                    vec![0.0; row.len()]
                }
            })
            .collect()
    }
}

/// Resamples `m` anchor days proportional to the importance weight of the
/// anchor angle, returning the observed angles of each block.
pub fn sample_blocks<R: Rng>(
    source: &BlockSource,
    k: f64,
    m: usize,
    model: &GeometricModel,
    rng: &mut R,
) -> Result<Vec<AngularBlock>> {
    let weights = source.anchor_weights(k, model);
    let idx = sample_indices(&weights, k, m, rng)?;
    Ok(idx
        .into_iter()
        .map(|i| {
            let t = source.anchors[i];
            AngularBlock {
                anchor_t: t,
                angles: source.block_angles(t),
                weight: weights[i],
            }
        })
        .collect())
}

/// Block sampler: the anchor radius is drawn above `k r_tau(w_anchor)` and
/// the whole observed block is rescaled by `r* / r_anchor`.
pub struct BlockSampler<'a> {
    model: &'a GeometricModel,
    source: &'a BlockSource<'a>,
    k: f64,
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl<'a> BlockSampler<'a> {
    pub fn new(model: &'a GeometricModel, source: &'a BlockSource<'a>, k: f64) -> Result<Self> {
        if !(k >= 1.0) {
            return Err(Error::domain(format!("extrapolation level must be >= 1, got {k}")));
        }
        let weights = source.anchor_weights(k, model);
        let dist = weighted_index(&weights, k)?;
        Ok(Self {
            model,
            source,
            k,
            weights,
            dist,
        })
    }

    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Folds `m` simulated blocks (row-major `block_len x d`) per task.
    pub fn fold_tasks<A, I, F>(&self, m: usize, seed: u64, init: I, step: F) -> Result<Vec<A>>
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, &[f64]) + Sync,
    {
        let d = self.source.data.n_sites();
        let len_b = self.source.block_len;
        let tasks = m.div_ceil(TASK_SIZE);
        (0..tasks)
            .into_par_iter()
            .map(|task| {
                let len = TASK_SIZE.min(m - task * TASK_SIZE);
                let mut rng = task_rng(seed, task as u64);
                let mut acc = init();
                let mut block = vec![0.0; len_b * d];
                for _ in 0..len {
                    let t = self.source.anchors[self.dist.sample(&mut rng)];
                    let anchor = self.source.anchor_point(t);
                    let r_star = sample_radius(&anchor.w, self.k, self.model, &mut rng)?;
                    let scale = r_star / anchor.r;
                    for s in 0..len_b {
                        for (b, v) in block[s * d..(s + 1) * d].iter_mut().zip(self.source.data.row(t + s)) {
                            *b = scale * v;
                        }
                    }
                    step(&mut acc, &block);
                }
                Ok(acc)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// extrapolation level
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for KGrid {
    fn default() -> Self {
        Self {
            lo: 1.0,
            hi: 4.0,
            step: 0.01,
        }
    }
}

impl KGrid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: f64,
    /// Even `k = lo` admits a scaled non-exceedance into the set.
    pub extrapolation_disabled: bool,
}

/// Largest grid `k` for which no scaled non-exceedance `k z` lies in `set`.
///
/// For run-length sets the single-day relaxation (at least `m` sites above
/// threshold) is used, which contains every day-pair event.
pub fn select_k(non_exceedances: &[AngularPoint], set: &ExtremeSet, grid: &KGrid) -> Result<KSelection> {
    if non_exceedances.is_empty() {
        return Err(Error::domain("select_k needs at least one non-exceedance"));
    }
    let values = grid.values();
    let in_set = |k: f64| {
        non_exceedances.iter().any(|p| {
            let z: Vec<f64> = p.w.iter().map(|w| k * p.r * w).collect();
            set.contains_point_relaxed(&z)
        })
    };
    // a scaled point enters once k exceeds its entry level; find the minimum
    let entry = non_exceedances
        .iter()
        .map(|p| set.entry_level(&p.reconstruct()))
        .fold(f64::INFINITY, f64::min);
    let mut idx = values.partition_point(|k| *k <= entry);
    while idx > 0 && in_set(values[idx - 1]) {
        idx -= 1;
    }
    if idx == 0 {
        log::warn!("even k = {} places a scaled non-exceedance in the extreme set", grid.lo);
        return Ok(KSelection {
            k: grid.lo,
            extrapolation_disabled: true,
        });
    }
    Ok(KSelection {
        k: values[idx - 1],
        extrapolation_disabled: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GaugeParams;
    use crate::ingest::grid_coordinates;
    use approx::assert_relative_eq;

    /// Identity correlation and gamma = 2: constant gauge, constant threshold.
    pub(crate) fn flat_model(lambda: f64, d_side: i64, c_tau: f64) -> GeometricModel {
        GaugeParams {
            lambda,
            phi: 1e-3,
            kappa: 1.0,
            gamma: 2.0,
            c_tau,
            tau: 0.8,
            threshold_phi: 1e-3,
            threshold_kappa: 1.0,
            dplane_coords: grid_coordinates(d_side).unwrap()[..].to_vec(),
        }
        .compile()
        .unwrap()
    }

    #[test]
    fn unit_level_weight_is_one() {
        let m = flat_model(0.5, 2, 3.0);
        for w in [[0.25; 4], [0.9, 0.05, 0.03, 0.02]] {
            assert_eq!(importance_weight(&w, 1.0, &m).value, 1.0);
        }
    }

    #[test]
    fn exponential_radius_weight_closed_form() {
        // shape lambda d = 1 with d = 1: IW = exp(-C (k - 1))
        let m = GaugeParams {
            lambda: 1.0,
            phi: 1.0,
            kappa: 1.0,
            gamma: 2.0,
            c_tau: 1.7,
            tau: 0.8,
            threshold_phi: 1.0,
            threshold_kappa: 1.0,
            dplane_coords: vec![[0.0, 0.0]],
        }
        .compile()
        .unwrap();
        for k in [1.0, 1.5, 2.0, 4.0, 30.0] {
            assert_relative_eq!(
                importance_weight(&[1.0], k, &m).value,
                (-1.7 * (k - 1.0f64)).exp(),
                max_relative = 1e-13
            );
        }
        let far = importance_weight(&[1.0], 1e308, &m);
        assert_eq!(far.value, 0.0);
    }

    #[test]
    fn weights_non_increasing_in_k() {
        let m = GaugeParams {
            lambda: 0.4,
            phi: 1.2,
            kappa: 1.5,
            gamma: 1.3,
            c_tau: 2.0,
            tau: 0.8,
            threshold_phi: 1.0,
            threshold_kappa: 1.2,
            dplane_coords: grid_coordinates(2).unwrap(),
        }
        .compile()
        .unwrap();
        let w = [0.1, 0.2, 0.3, 0.4];
        let mut prev = 1.0;
        for i in 0..200 {
            let v = importance_weight(&w, 1.0 + i as f64 * 0.05, &m).value;
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn memoryless_radius() {
        let m = GaugeParams {
            lambda: 1.0,
            phi: 1.0,
            kappa: 1.0,
            gamma: 2.0,
            c_tau: 1.0,
            tau: 0.8,
            threshold_phi: 1.0,
            threshold_kappa: 1.0,
            dplane_coords: vec![[0.0, 0.0]],
        }
        .compile()
        .unwrap();
        let mut rng = task_rng(9, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_radius(&[1.0], 1.0, &m, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|r| *r > 1.0));
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn weighted_angle_selection_ratio() {
        // two angles whose weights at k are 9:1
        let m = flat_model(1.0, 1, 1.0);
        let ex = ExceedanceSet {
            points: vec![
                AngularPoint { r: 2.0, w: vec![1.0], t: 0 },
                AngularPoint { r: 3.0, w: vec![1.0], t: 1 },
            ],
            thresholds: vec![1.0, 1.0],
            d: 1,
            n_total: 10,
        };
        let weights = [0.9, 0.1];
        let mut rng = task_rng(4, 0);
        let n = 100_000;
        let idx = sample_indices(&weights, 2.0, n, &mut rng).unwrap();
        let first = idx.iter().filter(|i| **i == 0).count() as f64;
        let se = (n as f64 * 0.9 * 0.1).sqrt();
        assert!((first - 0.9 * n as f64).abs() < 3.0 * se);
        let angles = sample_angles(&ex, 1.0, 10, &m, &mut rng).unwrap();
        assert!(angles.iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert!(sample_indices(&[0.0, 0.0], 50.0, 3, &mut rng).is_err());
    }

    #[test]
    fn k_grid_values() {
        let v = KGrid::default().values();
        assert_eq!(v.len(), 301);
        assert_eq!(v[0], 1.0);
        assert!((v[300] - 4.0).abs() < 1e-12);
    }
}
