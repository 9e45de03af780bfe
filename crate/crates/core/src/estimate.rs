//! Extreme sets, tail probabilities by extrapolation, and event frequencies.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{self, ExceedanceSet, RadialSplit, TgFitOptions};
use crate::geometry::GeometricModel;
use crate::ingest::GridDataset;
use crate::simulate::{self, BlockSampler, BlockSource, CloudSampler, KGrid};
use crate::special;

/// Empirical cross-run reference frequencies for the three target events.
pub const REFERENCE_CTQ1: f64 = 0.24;
pub const REFERENCE_CTQ2: f64 = 0.20;
pub const REFERENCE_CTQ3: f64 = 0.24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetKind {
    AllExceed,
    AtLeastM,
    ConsecutiveRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeSet {
    pub kind: SetKind,
    /// Per-site exponential-scale thresholds.
    pub q: Vec<f64>,
    pub m: usize,
    pub run_len: usize,
}

impl ExtremeSet {
    pub fn all_exceed(q: Vec<f64>) -> Result<Self> {
        let m = q.len();
        Self::build(SetKind::AllExceed, q, m, 1)
    }

    pub fn at_least(q: Vec<f64>, m: usize) -> Result<Self> {
        Self::build(SetKind::AtLeastM, q, m, 1)
    }

    pub fn consecutive_run(q: Vec<f64>, m: usize, run_len: usize) -> Result<Self> {
        Self::build(SetKind::ConsecutiveRun, q, m, run_len)
    }

    fn build(kind: SetKind, q: Vec<f64>, m: usize, run_len: usize) -> Result<Self> {
        let s = Self { kind, q, m, run_len };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.q.len();
        if d == 0 {
            return Err(Error::domain("extreme set needs at least one site"));
        }
        if let Some(j) = self.q.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::domain(format!("threshold for site {j} must be > 0, got {}", self.q[j])));
        }
        if self.m < 1 || self.m > d {
            return Err(Error::domain(format!("m must lie in 1..={d}, got {}", self.m)));
        }
        if self.run_len < 1 {
            return Err(Error::domain("run length must be >= 1"));
        }
        if self.kind == SetKind::AllExceed && self.m != d {
            return Err(Error::domain("all-exceed set must have m = d"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_temporal(&self) -> bool {
        self.kind == SetKind::ConsecutiveRun
    }

    fn exceed_count(&self, z: &[f64]) -> usize {
        z.iter().zip(&self.q).filter(|(z, q)| z > q).count()
    }

    /// Single-vector membership. For run-length sets the single-day
    /// relaxation (at least `m` sites above threshold) is used.
    #[inline]
    pub fn contains_point_relaxed(&self, z: &[f64]) -> bool {
        self.exceed_count(z) >= self.m
    }

    pub fn contains(&self, z: &[f64]) -> Result<bool> {
        if z.len() != self.dim() {
            return Err(Error::domain(format!(
                "vector has {} components, set has {}",
                z.len(),
                self.dim()
            )));
        }
        if self.is_temporal() {
            return Err(Error::domain("run-length set membership needs a block of days"));
        }
        Ok(self.contains_point_relaxed(z))
    }

    /// Membership of consecutive day vectors (row-major, `days x d`).
    pub fn contains_block(&self, block: &[f64]) -> Result<bool> {
        let d = self.dim();
        if block.is_empty() || block.len() % d != 0 {
            return Err(Error::domain(format!("block length {} is not a multiple of d = {d}", block.len())));
        }
        let days = block.len() / d;
        if !self.is_temporal() {
            return Ok(block.chunks_exact(d).any(|z| self.contains_point_relaxed(z)));
        }
        if days < self.run_len {
            return Err(Error::domain(format!("block of {days} days is shorter than run length {}", self.run_len)));
        }
        Ok(self.block_hit(block, days))
    }

    fn block_hit(&self, block: &[f64], days: usize) -> bool {
        let d = self.dim();
        (0..=days - self.run_len).any(|o| {
            let count = (0..d)
                .filter(|&j| (o..o + self.run_len).all(|s| block[s * d + j] > self.q[j]))
                .count();
            count >= self.m
        })
    }

    /// `inf { s > 0 : s z in B }` for a single vector, in the relaxed sense;
    /// `s z` lies in the set exactly when `s` exceeds this level.
    pub fn entry_level(&self, z: &[f64]) -> f64 {
        let mut ratios: Vec<f64> = z
            .iter()
            .zip(&self.q)
            .map(|(z, q)| if *z > 0.0 { q / z } else { f64::INFINITY })
            .collect();
        let m = self.m;
        let (_, nth, _) = ratios.select_nth_unstable_by(m - 1, |a, b| a.total_cmp(b));
        *nth
    }

    /// Entry level of a scaled block under the run-length rule.
    pub fn block_entry_level(&self, block: &[f64]) -> f64 {
        let d = self.dim();
        let days = block.len() / d;
        if days < self.run_len {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        let mut mins = vec![0.0; d];
        for o in 0..=days - self.run_len {
            for (j, v) in mins.iter_mut().enumerate() {
                *v = (o..o + self.run_len)
                    .map(|s| block[s * d + j])
                    .fold(f64::INFINITY, f64::min);
            }
            best = best.min(self.entry_level(&mins));
        }
        best
    }
}

// ---------------------------------------------------------------------------
// tail probabilities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub probability: f64,
    /// Fraction of simulated points (or blocks) inside the set.
    pub p_in_set: f64,
    pub p_k_given_1: f64,
    pub p_exceed: f64,
    pub hits: usize,
    pub m_sim: usize,
    pub k: f64,
    /// Binomial standard error of `probability`.
    pub standard_error: f64,
    pub warning: Option<String>,
}

pub const MIN_M_SIM: usize = 10_000;

fn assemble(hits: usize, m_sim: usize, k: f64, p_k: f64, p_exceed: f64) -> TailEstimate {
    let p_in = hits as f64 / m_sim as f64;
    let scale = p_k * p_exceed;
    let warning = (hits == 0).then(|| {
        let msg = "no simulated points fell in the set; increase k or m_sim".to_string();
        log::warn!("{msg}");
        msg
    });
    TailEstimate {
        probability: p_in * scale,
        p_in_set: p_in,
        p_k_given_1: p_k,
        p_exceed,
        hits,
        m_sim,
        k,
        standard_error: scale * (p_in * (1.0 - p_in) / m_sim as f64).sqrt(),
        warning,
    }
}

fn check_inputs(model: &GeometricModel, set: &ExtremeSet, m_sim: usize) -> Result<()> {
    set.validate()?;
    if set.dim() != model.params.dim() {
        return Err(Error::domain(format!(
            "set has {} sites, model has {}",
            set.dim(),
            model.params.dim()
        )));
    }
    if m_sim < MIN_M_SIM {
        return Err(Error::domain(format!("m_sim must be >= {MIN_M_SIM}, got {m_sim}")));
    }
    Ok(())
}

/// `P(Z in B) = P(Z in B | R' > k) P(R' > k | R' > 1) P(R' > 1)` for a
/// single-day set, counting hits while streaming the simulated cloud.
pub fn tail_probability(
    model: &GeometricModel,
    exceedances: &ExceedanceSet,
    set: &ExtremeSet,
    k: f64,
    m_sim: usize,
    seed: u64,
) -> Result<TailEstimate> {
    check_inputs(model, set, m_sim)?;
    if set.is_temporal() {
        return Err(Error::domain("run-length sets need block simulation (tail_probability_blocks)"));
    }
    let sampler = CloudSampler::new(model, exceedances, k)?;
    let hits: usize = sampler
        .fold_tasks(m_sim, seed, || 0usize, |acc, z, _| {
            if set.contains_point_relaxed(z) {
                *acc += 1;
            }
        })?
        .into_iter()
        .sum();
    Ok(assemble(
        hits,
        m_sim,
        k,
        sampler.mean_weight(),
        exceedances.exceedance_probability(),
    ))
}

/// Block version of [`tail_probability`]: counts simulated blocks in a
/// run-length set. `P(R' > 1)` is the flagged fraction of the series.
pub fn tail_probability_blocks(
    model: &GeometricModel,
    source: &BlockSource,
    set: &ExtremeSet,
    k: f64,
    m_sim: usize,
    seed: u64,
) -> Result<TailEstimate> {
    check_inputs(model, set, m_sim)?;
    let days = source.block_len;
    if set.is_temporal() && days < set.run_len {
        return Err(Error::domain(format!(
            "block length {days} is shorter than run length {}",
            set.run_len
        )));
    }
    let sampler = BlockSampler::new(model, source, k)?;
    let hits: usize = sampler
        .fold_tasks(m_sim, seed, || 0usize, |acc, block| {
            let hit = if set.is_temporal() {
                set.block_hit(block, days)
            } else {
                set.contains_point_relaxed(&block[..set.dim()])
            };
            if hit {
                *acc += 1;
            }
        })?
        .into_iter()
        .sum();
    let n = source.flags.len();
    let p_exceed = source.flags.iter().filter(|f| **f).count() as f64 / n as f64;
    Ok(assemble(hits, m_sim, k, sampler.mean_weight(), p_exceed))
}

/// Conditional expectation of the simulated estimator given the resampled
/// angles: each angle contributes the exact gamma tail mass of the ray
/// segment inside the set.
pub fn expected_tail_probability(model: &GeometricModel, exceedances: &ExceedanceSet, set: &ExtremeSet, k: f64) -> f64 {
    let sum: f64 = exceedances
        .points
        .iter()
        .map(|p| {
            let g = model.g(&p.w);
            let thr = model.threshold(&p.w);
            let lower = set.entry_level(&p.w).max(k * thr);
            (special::ln_gamma_sf(model.shape, g, lower) - special::ln_gamma_sf(model.shape, g, thr)).exp()
        })
        .sum();
    exceedances.exceedance_probability() * sum / exceedances.len() as f64
}

// ---------------------------------------------------------------------------
// small-d inclusion-exclusion oracle
// ---------------------------------------------------------------------------

pub const MAX_ORACLE_DIM: usize = 12;

fn binomial(n: u64, k: u64) -> i128 {
    if k > n {
        return 0;
    }
    let mut c: i128 = 1;
    for i in 0..k {
        c = c * (n - i) as i128 / (i + 1) as i128;
    }
    c
}

fn check_sample(sample: &[f64], d: usize, q: &[f64], m: usize) -> Result<usize> {
    if d == 0 || q.len() != d || sample.len() % d != 0 || sample.is_empty() {
        return Err(Error::domain("sample must be a non-empty n x d matrix with d thresholds"));
    }
    if m < 1 || m > d {
        return Err(Error::domain(format!("m must lie in 1..={d}")));
    }
    Ok(sample.len() / d)
}

/// `P(at least m of d components exceed q)` by direct counting.
pub fn direct_count_probability(sample: &[f64], d: usize, q: &[f64], m: usize) -> Result<f64> {
    let n = check_sample(sample, d, q, m)?;
    let hits = sample
        .chunks_exact(d)
        .filter(|z| z.iter().zip(q).filter(|(z, q)| z > q).count() >= m)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Alternating-sum identity
/// `sum_{r=m}^{d} (-1)^{r-m} C(r-1, m-1) sum_{|J|=r} P(Z_J > q_J)`
/// over the empirical joint exceedance probabilities of `sample`.
///
/// Joint counts come from a superset-sum transform over exceedance
/// patterns and the sum is carried in exact integer arithmetic.
pub fn inclusion_exclusion_oracle(sample: &[f64], d: usize, q: &[f64], m: usize) -> Result<f64> {
    if d > MAX_ORACLE_DIM {
        return Err(Error::domain(format!(
            "inclusion-exclusion over 2^{d} subsets is infeasible; the oracle is limited to d <= {MAX_ORACLE_DIM}"
        )));
    }
    let n = check_sample(sample, d, q, m)?;
    let size = 1usize << d;
    let mut joint = vec![0i128; size];
    for z in sample.chunks_exact(d) {
        let mask = z
            .iter()
            .zip(q)
            .enumerate()
            .filter(|(_, (z, q))| z > q)
            .fold(0usize, |acc, (j, _)| acc | (1 << j));
        joint[mask] += 1;
    }
    // joint[J] <- #{points exceeding every site in J}
    for bit in 0..d {
        for mask in 0..size {
            if mask & (1 << bit) == 0 {
                joint[mask] += joint[mask | (1 << bit)];
            }
        }
    }
    let mut total: i128 = 0;
    for (mask, count) in joint.iter().enumerate() {
        let r = mask.count_ones() as u64;
        if r < m as u64 {
            continue;
        }
        let sign = if (r - m as u64) % 2 == 0 { 1 } else { -1 };
        total += sign * binomial(r - 1, m as u64 - 1) * count;
    }
    Ok(total as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// frequencies and bootstrap
// ---------------------------------------------------------------------------

/// Expected event count over `n_obs` observations.
pub fn ctq_frequency(prob: f64, n_obs: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::domain(format!("probability must lie in [0, 1], got {prob}")));
    }
    if n_obs == 0 {
        return Err(Error::domain("n_obs must be >= 1"));
    }
    Ok(prob * n_obs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_reps: usize,
    pub n_failed: usize,
    pub replicates: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const MIN_BOOTSTRAP_REPS: usize = 100;

/// Percentile bootstrap. Each replicate resamples `0..n_items` with
/// replacement and evaluates `statistic(indices, replicate_seed)`.
pub fn bootstrap_ci<F>(n_items: usize, n_reps: usize, level: f64, seed: u64, statistic: F) -> Result<BootstrapSummary>
where
    F: Fn(&[usize], u64) -> Result<f64> + Sync,
{
    if n_reps < MIN_BOOTSTRAP_REPS {
        return Err(Error::domain(format!("n_reps must be >= {MIN_BOOTSTRAP_REPS}, got {n_reps}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("confidence level must lie in (0, 1)"));
    }
    if n_items == 0 {
        return Err(Error::domain("nothing to resample"));
    }
    let results: Vec<Result<f64>> = (0..n_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = simulate::task_rng(seed, b as u64);
            let idx: Vec<usize> = (0..n_items).map(|_| rng.random_range(0..n_items)).collect();
            let sub_seed = rng.random::<u64>();
            statistic(&idx, sub_seed).and_then(|v| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::numerical(format!("replicate statistic is {v}")))
                }
            })
        })
        .collect();
    let mut ok = Vec::with_capacity(n_reps);
    let mut log = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push(v),
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
    let mut sorted = ok.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(BootstrapSummary {
        mean: ok.iter().sum::<f64>() / ok.len() as f64,
        median: quantile_sorted(&sorted, 0.5),
        lower: quantile_sorted(&sorted, alpha / 2.0),
        upper: quantile_sorted(&sorted, 1.0 - alpha / 2.0),
        level,
        n_reps,
        n_failed: log.len(),
        replicates: ok,
    })
}

// ---------------------------------------------------------------------------
// target quantities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtqDefinition {
    pub name: String,
    /// Raw-scale threshold applied at every site.
    pub raw_threshold: f64,
    pub kind: SetKind,
    pub m: usize,
    pub run_len: usize,
    pub reference: f64,
}

/// The three target events: all sites above 1.7, at least 6 above 5.7, and
/// at least 3 above 5 on two consecutive days.
pub fn standard_ctqs() -> Vec<CtqDefinition> {
    vec![
        CtqDefinition {
            name: "CTQ1".into(),
            raw_threshold: 1.7,
            kind: SetKind::AllExceed,
            m: 25,
            run_len: 1,
            reference: REFERENCE_CTQ1,
        },
        CtqDefinition {
            name: "CTQ2".into(),
            raw_threshold: 5.7,
            kind: SetKind::AtLeastM,
            m: 6,
            run_len: 1,
            reference: REFERENCE_CTQ2,
        },
        CtqDefinition {
            name: "CTQ3".into(),
            raw_threshold: 5.0,
            kind: SetKind::ConsecutiveRun,
            m: 3,
            run_len: 2,
            reference: REFERENCE_CTQ3,
        },
    ]
}

impl CtqDefinition {
    /// Builds the extreme set from per-site exponential thresholds; `m` is
    /// capped at `d` for smaller grids.
    pub fn extreme_set(&self, q: Vec<f64>) -> Result<ExtremeSet> {
        let d = q.len();
        match self.kind {
            SetKind::AllExceed => ExtremeSet::all_exceed(q),
            SetKind::AtLeastM => ExtremeSet::at_least(q, self.m.min(d)),
            SetKind::ConsecutiveRun => ExtremeSet::consecutive_run(q, self.m.min(d), self.run_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtqEstimate {
    pub name: String,
    /// Expected count per run.
    pub point: f64,
    pub probability: f64,
    pub bootstrap_mean: f64,
    pub bootstrap_median: f64,
    pub ci: (f64, f64),
    pub k_used: f64,
    pub extrapolation_disabled: bool,
    pub n_obs: usize,
    pub hits: usize,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtqOptions {
    pub k_grid: KGrid,
    pub m_sim: usize,
    pub block_len: usize,
    pub n_reps: usize,
    /// Simulation size inside each bootstrap replicate.
    pub bootstrap_m_sim: usize,
    pub level: f64,
    pub seed: u64,
    /// Refit the truncated-gamma parameters on resampled exceedances inside
    /// every replicate. `None` keeps the fitted model fixed.
    pub refit: Option<TgFitOptions>,
}

impl Default for CtqOptions {
    fn default() -> Self {
        Self {
            k_grid: KGrid::default(),
            m_sim: 1_000_000,
            block_len: 4,
            n_reps: 500,
            bootstrap_m_sim: 20_000,
            level: 0.95,
            seed: 0,
            refit: None,
        }
    }
}

/// The model used inside one bootstrap replicate.
fn replicate_model(model: &GeometricModel, resampled: &ExceedanceSet, refit: Option<&TgFitOptions>) -> Result<Option<GeometricModel>> {
    match refit {
        None => Ok(None),
        Some(o) => fit::refit_params(&model.params, resampled, o)?.compile().map(Some),
    }
}

/// Point estimate and bootstrap summary for one extreme set. The fitted
/// model is held fixed; replicates resample exceedances (or block anchors).
pub fn estimate_ctq(
    name: &str,
    model: &GeometricModel,
    exp_data: &GridDataset,
    split: &RadialSplit,
    set: &ExtremeSet,
    options: &CtqOptions,
    reference: Option<f64>,
) -> Result<CtqEstimate> {
    let sel = simulate::select_k(&split.non_exceedances, set, &options.k_grid)?;
    let k = sel.k;
    let boot_seed = options.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let (tail, n_obs, boot) = if set.is_temporal() {
        let source = BlockSource::new(exp_data, &split.flags, options.block_len)?;
        let tail = tail_probability_blocks(model, &source, set, k, options.m_sim, options.seed)?;
        let n_obs = exp_data.n_times() - 1;
        let ex = &split.exceedances;
        let boot = bootstrap_ci(source.anchors.len(), options.n_reps, options.level, boot_seed, |idx, s| {
            let anchors = idx.iter().map(|&i| source.anchors[i]).collect();
            let src = source.with_anchors(anchors);
            let refit = match &options.refit {
                Some(o) if !ex.is_empty() => {
                    let mut rng = simulate::task_rng(s, 1);
                    let pick: Vec<usize> = (0..ex.len()).map(|_| rng.random_range(0..ex.len())).collect();
                    replicate_model(model, &ex.select(&pick), Some(o))?
                }
                _ => None,
            };
            let m = refit.as_ref().unwrap_or(model);
            let t = tail_probability_blocks(m, &src, set, k, options.bootstrap_m_sim, s)?;
            Ok(t.probability * n_obs as f64)
        })?;
        (tail, n_obs, boot)
    } else {
        let ex = &split.exceedances;
        let tail = tail_probability(model, ex, set, k, options.m_sim, options.seed)?;
        let n_obs = ex.n_total;
        let boot = bootstrap_ci(ex.len(), options.n_reps, options.level, boot_seed, |idx, s| {
            let resampled = ex.select(idx);
            let refit = replicate_model(model, &resampled, options.refit.as_ref())?;
            let t = tail_probability(refit.as_ref().unwrap_or(model), &resampled, set, k, options.bootstrap_m_sim, s)?;
            Ok(t.probability * n_obs as f64)
        })?;
        (tail, n_obs, boot)
    };
    Ok(CtqEstimate {
        name: name.to_string(),
        point: ctq_frequency(tail.probability, n_obs)?,
        probability: tail.probability,
        bootstrap_mean: boot.mean,
        bootstrap_median: boot.median,
        ci: (boot.lower, boot.upper),
        k_used: k,
        extrapolation_disabled: sel.extrapolation_disabled,
        n_obs,
        hits: tail.hits,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AngularPoint, GaugeParams};
    use rand::Rng;
    use crate::ingest::grid_coordinates;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn membership_examples() {
        let q = vec![1.0, 2.0, 3.0];
        let all = ExtremeSet::all_exceed(q.clone()).unwrap();
        assert!(all.contains(&[2.0, 3.0, 4.0]).unwrap());
        let two = ExtremeSet::at_least(q.clone(), 2).unwrap();
        assert!(!two.contains(&[2.0, 0.0, 0.0]).unwrap());
        assert!(two.contains(&[2.0, 2.5, 0.0]).unwrap());
        assert!(two.contains(&[1.0, 2.0]).is_err());

        // three sites exceed on day 1 only
        let run = ExtremeSet::consecutive_run(vec![5.0; 3], 3, 2).unwrap();
        let block = [6.0, 6.0, 6.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(!run.contains_block(&block).unwrap());
        let block = [1.0, 1.0, 1.0, 6.0, 7.0, 8.0, 6.0, 6.0, 9.0, 0.0, 0.0, 0.0];
        assert!(run.contains_block(&block).unwrap());
        assert!(run.contains(&[6.0, 6.0, 6.0]).is_err());
        assert!(run.contains_block(&[6.0, 6.0, 6.0]).is_err());
    }

    #[test]
    fn set_validation() {
        assert!(ExtremeSet::at_least(vec![1.0, 0.0], 1).is_err());
        assert!(ExtremeSet::at_least(vec![1.0, 1.0], 3).is_err());
        assert!(ExtremeSet::consecutive_run(vec![1.0], 1, 0).is_err());
        assert!(ExtremeSet::all_exceed(vec![1.0, f64::INFINITY]).is_ok());
    }

    #[test]
    fn entry_level_matches_membership() {
        let set = ExtremeSet::at_least(vec![1.0, 2.0, 4.0], 2).unwrap();
        let z = [0.5, 0.5, 0.5];
        let e = set.entry_level(&z);
        assert_eq!(e, 4.0);
        let scaled = |s: f64| z.iter().map(|v| v * s).collect::<Vec<_>>();
        assert!(!set.contains(&scaled(e)).unwrap());
        assert!(set.contains(&scaled(e * (1.0 + 1e-12))).unwrap());
    }

    #[test]
    fn oracle_small_cases() {
        let q = [0.5, 0.5, 0.5];
        let sample = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        for m in 1..=3 {
            assert_eq!(
                inclusion_exclusion_oracle(&sample, 3, &q, m).unwrap(),
                direct_count_probability(&sample, 3, &q, m).unwrap()
            );
        }
        let big = vec![1.0; 25];
        let err = inclusion_exclusion_oracle(&big, 25, &[0.5; 25], 6).unwrap_err();
        assert!(err.to_string().contains("infeasible"));
    }

    proptest! {
        #[test]
        fn oracle_equals_counting(d in 1usize..7, seed in 0u64..1000, m_frac in 0.0f64..1.0) {
            let mut rng = simulate::task_rng(seed, 0);
            let n = 200;
            let sample: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
            let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let m = 1 + ((d - 1) as f64 * m_frac) as usize;
            let a = inclusion_exclusion_oracle(&sample, d, &q, m).unwrap();
            let b = direct_count_probability(&sample, d, &q, m).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn at_least_d_is_all_exceed(z in prop::collection::vec(0.0f64..3.0, 4), q in prop::collection::vec(0.1f64..3.0, 4)) {
            let a = ExtremeSet::at_least(q.clone(), 4).unwrap();
            let b = ExtremeSet::all_exceed(q).unwrap();
            prop_assert_eq!(a.contains(&z).unwrap(), b.contains(&z).unwrap());
        }
    }

    #[test]
    fn frequency() {
        assert_eq!(ctq_frequency(0.0, 100).unwrap(), 0.0);
        assert_eq!(ctq_frequency(0.02, 100).unwrap() * 2.0, ctq_frequency(0.04, 100).unwrap());
        assert!(ctq_frequency(1.5, 10).is_err());
        assert!(ctq_frequency(0.5, 0).is_err());
    }

    #[test]
    fn bootstrap_constant_statistic() {
        let s = bootstrap_ci(50, 200, 0.95, 1, |_, _| Ok(3.25)).unwrap();
        assert_eq!((s.lower, s.median, s.upper, s.mean), (3.25, 3.25, 3.25, 3.25));
        assert!(bootstrap_ci(50, 99, 0.95, 1, |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn bootstrap_orders_summary_and_reports_failures() {
        let data: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let s = bootstrap_ci(data.len(), 300, 0.95, 7, |idx, _| {
            Ok(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64)
        })
        .unwrap();
        assert!(s.lower <= s.median && s.median <= s.upper);
        let err = bootstrap_ci(10, 100, 0.95, 1, |idx, _| {
            if idx[0] < 2 {
                Err(Error::numerical("boom"))
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        match err {
            Error::Bootstrap { failed, total, log } => {
                assert_eq!(total, 100);
                assert_eq!(failed, log.len());
                assert!(failed > 5);
            }
            other => panic!("unexpected {other}"),
        }
    }

    fn flat(lambda: f64, c_tau: f64) -> GeometricModel {
        GaugeParams {
            lambda,
            phi: 1e-3,
            kappa: 1.0,
            gamma: 2.0,
            c_tau,
            tau: 0.8,
            threshold_phi: 1e-3,
            threshold_kappa: 1.0,
            dplane_coords: grid_coordinates(2).unwrap(),
        }
        .compile()
        .unwrap()
    }

    fn exceedance_set(model: &GeometricModel, n: usize, seed: u64) -> ExceedanceSet {
        let mut rng = simulate::task_rng(seed, 0);
        let points: Vec<AngularPoint> = (0..n)
            .map(|t| {
                let z: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 0.01).collect();
                let mut p = crate::geometry::radial_angular(&z, t).unwrap();
                p.r = model.threshold(&p.w) * 1.5;
                p
            })
            .collect();
        let thresholds = points.iter().map(|p| model.threshold(&p.w)).collect();
        ExceedanceSet {
            points,
            thresholds,
            d: 4,
            n_total: n * 5,
        }
    }

    #[test]
    fn whole_region_at_unit_level() {
        let model = flat(0.7, 2.0);
        let ex = exceedance_set(&model, 100, 3);
        // thresholds small enough that every cloud point is inside
        let set = ExtremeSet::at_least(vec![1e-9; 4], 1).unwrap();
        let t = tail_probability(&model, &ex, &set, 1.0, 10_000, 5).unwrap();
        assert_eq!(t.p_in_set, 1.0);
        assert_eq!(t.p_k_given_1, 1.0);
        assert_relative_eq!(t.probability, 0.2, max_relative = 1e-15);
    }

    #[test]
    fn infinite_threshold_gives_zero() {
        let model = flat(0.7, 2.0);
        let ex = exceedance_set(&model, 100, 3);
        let set = ExtremeSet::all_exceed(vec![0.1, 0.1, 0.1, f64::INFINITY]).unwrap();
        let t = tail_probability(&model, &ex, &set, 1.0, 10_000, 5).unwrap();
        assert_eq!(t.probability, 0.0);
        assert!(t.warning.is_some());
    }

    #[test]
    fn nested_sets_on_shared_cloud() {
        let model = flat(0.7, 2.0);
        let ex = exceedance_set(&model, 100, 3);
        let mut last = f64::INFINITY;
        for q in [0.5, 0.8, 1.2, 2.0] {
            let set = ExtremeSet::at_least(vec![q; 4], 2).unwrap();
            let p = tail_probability(&model, &ex, &set, 1.0, 20_000, 11).unwrap().probability;
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn simulated_matches_conditional_expectation() {
        let model = flat(0.7, 2.0);
        let ex = exceedance_set(&model, 200, 8);
        let set = ExtremeSet::at_least(vec![1.5; 4], 2).unwrap();
        let exact = expected_tail_probability(&model, &ex, &set, 1.2);
        let t = tail_probability(&model, &ex, &set, 1.2, 200_000, 2).unwrap();
        assert!(t.hits > 100);
        assert!((t.probability - exact).abs() < 3.0 * t.standard_error, "{} vs {exact}", t.probability);
    }

    #[test]
    fn rejects_small_simulation() {
        let model = flat(0.7, 2.0);
        let ex = exceedance_set(&model, 10, 3);
        let set = ExtremeSet::at_least(vec![1.0; 4], 1).unwrap();
        assert!(tail_probability(&model, &ex, &set, 1.0, 100, 1).is_err());
    }
}
