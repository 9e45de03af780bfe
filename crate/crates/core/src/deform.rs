//! Thin-plate-spline deformation of site coordinates so that pairwise
//! extremal dependence becomes a function of distance alone.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{distance, Coord, GridDataset};
use crate::optim::NelderMead;
use crate::simulate::task_rng;
use crate::special::norm_sf;

/// Expected exceedances per column below which chi estimates are refused.
pub const MIN_EXPECTED_EXCEEDANCES: f64 = 20.0;
/// Mapped sites closer than this are treated as a collapsed map.
pub const COLLAPSE_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiMatrix {
    pub u: f64,
    pub d: usize,
    /// Row-major `d x d`.
    pub estimates: Vec<f64>,
    /// Joint exceedance counts, row-major `d x d`.
    pub pair_counts: Vec<usize>,
    /// Exceedances per column.
    pub column_count: usize,
}

impl ChiMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.estimates[i * self.d + j]
    }

    /// `(i, j, chi)` for `i < j`.
    pub fn upper_pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.d * (self.d - 1) / 2);
        for i in 0..self.d {
            for j in i + 1..self.d {
                out.push((i, j, self.get(i, j)));
            }
        }
        out
    }
}

/// Pairwise `chi(u)`: joint exceedances of the columnwise `u`-quantiles
/// divided by the per-column exceedance count `floor(n (1 - u))`.
///
/// Each column's exceedances are its top `floor(n (1 - u))` values, ties
/// broken by row order.
pub fn empirical_chi_matrix(exp_data: &GridDataset, u: f64) -> Result<ChiMatrix> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain(format!("u must lie in (0, 1), got {u}")));
    }
    let n = exp_data.n_times();
    let d = exp_data.n_sites();
    let expected = n as f64 * (1.0 - u);
    if expected < MIN_EXPECTED_EXCEEDANCES {
        return Err(Error::domain(format!(
            "n (1 - u) = {expected:.2} < {MIN_EXPECTED_EXCEEDANCES}; too few exceedances for chi at u = {u}"
        )));
    }
    let c = (expected + 1e-9).floor() as usize;
    let flags: Vec<Vec<bool>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let col = exp_data.column(j);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|a, b| col[*a].total_cmp(&col[*b]).then(a.cmp(b)));
            let mut f = vec![false; n];
            for &t in &idx[n - c..] {
                f[t] = true;
            }
            f
        })
        .collect();
    let mut estimates = vec![0.0; d * d];
    let mut pair_counts = vec![0usize; d * d];
    for i in 0..d {
        pair_counts[i * d + i] = c;
        estimates[i * d + i] = 1.0;
        for j in i + 1..d {
            let both = flags[i].iter().zip(&flags[j]).filter(|(a, b)| **a && **b).count();
            let chi = (both as f64 / c as f64).clamp(0.0, 1.0);
            pair_counts[i * d + j] = both;
            pair_counts[j * d + i] = both;
            estimates[i * d + j] = chi;
            estimates[j * d + i] = chi;
        }
    }
    Ok(ChiMatrix {
        u,
        d,
        estimates,
        pair_counts,
        column_count: c,
    })
}

/// Brown–Resnick `chi(h) = 2 - 2 Phi(sqrt((h / rho)^alpha) / 2)`.
pub fn br_chi(h: f64, rho: f64, alpha: f64) -> f64 {
    debug_assert!(h >= 0.0 && rho > 0.0 && alpha > 0.0 && alpha <= 2.0);
    2.0 * norm_sf((h / rho).powf(alpha).sqrt() / 2.0)
}

/// `r^2 ln r` with `eta(0) = 0`.
#[inline]
pub fn eta(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub anchors: Vec<Coord>,
    /// Row `r` maps `(1, x, y)` to output coordinate `r`.
    pub affine: [[f64; 3]; 2],
    pub spline_weights: Vec<[f64; 2]>,
    pub br_rho: f64,
    pub br_alpha: f64,
    /// Penalised objective at the returned map.
    pub objective: f64,
    /// Objective of the identity map with its best `(rho, alpha)`.
    pub identity_objective: f64,
    pub penalty: f64,
}

impl Deformation {
    pub fn identity(rho: f64, alpha: f64) -> Self {
        Self {
            anchors: vec![],
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            spline_weights: vec![],
            br_rho: rho,
            br_alpha: alpha,
            objective: f64::NAN,
            identity_objective: f64::NAN,
            penalty: 0.0,
        }
    }

    pub fn map(&self, s: &Coord) -> Coord {
        let mut out = [0.0; 2];
        for (r, o) in out.iter_mut().enumerate() {
            let a = &self.affine[r];
            *o = a[0] + a[1] * s[0] + a[2] * s[1];
            for (w, anchor) in self.spline_weights.iter().zip(&self.anchors) {
                *o += w[r] * eta(distance(s, anchor));
            }
        }
        out
    }
}

pub fn apply_deformation(deformation: &Deformation, coords: &[Coord]) -> Vec<Coord> {
    coords.iter().map(|s| deformation.map(s)).collect()
}

/// Every `stride`-th site index from `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub stride: usize,
    pub offset: usize,
}

impl Default for AnchorSpec {
    /// Six spread-out anchors on a 5 x 5 grid.
    fn default() -> Self {
        Self { stride: 4, offset: 1 }
    }
}

impl AnchorSpec {
    pub fn select(&self, n_sites: usize) -> Vec<usize> {
        (self.offset..n_sites).step_by(self.stride.max(1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformOptions {
    /// Weight of the bending energy.
    pub penalty: f64,
    pub multistarts: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    /// Initial `(rho, alpha)`.
    pub init: (f64, f64),
}

impl Default for DeformOptions {
    fn default() -> Self {
        Self {
            penalty: 1e-3,
            multistarts: 5,
            seed: 0,
            tol: 1e-8,
            max_iter: 20_000,
            init: (2.0, 1.0),
        }
    }
}

/// Interpolating thin-plate spline through fixed anchors: the system
/// matrix is inverted once and reused for every set of anchor images.
struct SplineSystem {
    anchors: Vec<Coord>,
    kernel: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl SplineSystem {
    fn new(anchors: Vec<Coord>) -> Result<Self> {
        let k = anchors.len();
        let kernel = DMatrix::from_fn(k, k, |i, j| eta(distance(&anchors[i], &anchors[j])));
        let mut l = DMatrix::zeros(k + 3, k + 3);
        l.view_mut((0, 0), (k, k)).copy_from(&kernel);
        for (i, a) in anchors.iter().enumerate() {
            let p = [1.0, a[0], a[1]];
            for c in 0..3 {
                l[(i, k + c)] = p[c];
                l[(k + c, i)] = p[c];
            }
        }
        let inverse = l
            .try_inverse()
            .ok_or_else(|| Error::domain("thin-plate system is singular; anchors must be distinct and non-collinear"))?;
        Ok(Self {
            anchors,
            kernel,
            inverse,
        })
    }

    /// Spline through `images`, with its bending energy.
    fn solve(&self, images: &[Coord], rho: f64, alpha: f64, penalty: f64) -> (Deformation, f64) {
        let k = self.anchors.len();
        let mut weights = vec![[0.0; 2]; k];
        let mut affine = [[0.0; 3]; 2];
        let mut energy = 0.0;
        for r in 0..2 {
            let mut rhs = DVector::zeros(k + 3);
            for (i, y) in images.iter().enumerate() {
                rhs[i] = y[r];
            }
            let sol = &self.inverse * rhs;
            let w = sol.rows(0, k);
            for i in 0..k {
                weights[i][r] = sol[i];
            }
            affine[r] = [sol[k], sol[k + 1], sol[k + 2]];
            energy += (w.transpose() * &self.kernel * w)[(0, 0)].abs();
        }
        (
            Deformation {
                anchors: self.anchors.clone(),
                affine,
                spline_weights: weights,
                br_rho: rho,
                br_alpha: alpha,
                objective: f64::NAN,
                identity_objective: f64::NAN,
                penalty,
            },
            energy,
        )
    }
}

fn check_anchors(coords: &[Coord], anchors: &[usize]) -> Result<()> {
    if anchors.len() < 3 {
        return Err(Error::domain(format!("at least 3 anchors are required, got {}", anchors.len())));
    }
    if let Some(a) = anchors.iter().find(|a| **a >= coords.len()) {
        return Err(Error::domain(format!("anchor index {a} out of range")));
    }
    let p: Vec<&Coord> = anchors.iter().map(|&a| &coords[a]).collect();
    let collinear = p.iter().skip(2).all(|c| {
        let cross = (p[1][0] - p[0][0]) * (c[1] - p[0][1]) - (p[1][1] - p[0][1]) * (c[0] - p[0][0]);
        cross.abs() < 1e-12
    });
    if collinear {
        return Err(Error::domain("anchors are collinear"));
    }
    Ok(())
}

/// Sum of squared chi discrepancies over site pairs.
pub fn chi_discrepancy(coords: &[Coord], chi_hat: &ChiMatrix, rho: f64, alpha: f64) -> f64 {
    chi_hat
        .upper_pairs()
        .iter()
        .map(|(i, j, c)| {
            let h = distance(&coords[*i], &coords[*j]);
            (br_chi(h, rho, alpha) - c).powi(2)
        })
        .sum()
}

fn rho_alpha(x: &[f64]) -> Option<(f64, f64)> {
    let rho = x[0].exp();
    let alpha = 2.0 / (1.0 + (-x[1]).exp());
    (rho.is_finite() && rho > 0.0 && alpha > 0.0 && alpha <= 2.0).then_some((rho, alpha))
}

fn unconstrained(rho: f64, alpha: f64) -> [f64; 2] {
    let p = (alpha / 2.0).clamp(1e-9, 1.0 - 1e-9);
    [rho.ln(), (p / (1.0 - p)).ln()]
}

/// Jointly fits the anchor images (the first two held at their own
/// positions, which fixes translation, rotation and scale) and the
/// Brown–Resnick `(rho, alpha)`.
pub fn fit_deformation(coords: &[Coord], chi_hat: &ChiMatrix, anchors: &[usize], options: &DeformOptions) -> Result<Deformation> {
    check_anchors(coords, anchors)?;
    if chi_hat.d != coords.len() {
        return Err(Error::domain("chi matrix and coordinates differ in size"));
    }
    if !(options.init.0 > 0.0 && options.init.1 > 0.0 && options.init.1 <= 2.0) {
        return Err(Error::domain("initial (rho, alpha) out of range"));
    }
    let nm = NelderMead::new(options.tol, options.max_iter);

    // identity map with its best (rho, alpha)
    let id_obj = |x: &[f64]| match rho_alpha(x) {
        Some((r, a)) => chi_discrepancy(coords, chi_hat, r, a),
        None => f64::INFINITY,
    };
    let x0 = unconstrained(options.init.0, options.init.1);
    let id_fit = nm.minimize(id_obj, &x0, &[0.5, 0.5]);
    let (rho0, alpha0) = rho_alpha(&id_fit.x).ok_or_else(|| Error::Fit {
        message: "identity-map chi fit left the parameter domain".into(),
        last_iterate: id_fit.x.clone(),
    })?;
    let identity_objective = id_fit.value;

    let anchor_coords: Vec<Coord> = anchors.iter().map(|&a| coords[a]).collect();
    let system = SplineSystem::new(anchor_coords.clone())?;
    let free = anchor_coords.len() - 2;
    let objective = |x: &[f64]| -> f64 {
        let Some((rho, alpha)) = rho_alpha(&x[2 * free..]) else {
            return f64::INFINITY;
        };
        let mut images = anchor_coords[..2].to_vec();
        images.extend((0..free).map(|i| [x[2 * i], x[2 * i + 1]]));
        let (def, energy) = system.solve(&images, rho, alpha, options.penalty);
        let mapped = apply_deformation(&def, coords);
        chi_discrepancy(&mapped, chi_hat, rho, alpha) + options.penalty * energy
    };
    let mut start: Vec<f64> = anchor_coords[2..].iter().flat_map(|c| [c[0], c[1]]).collect();
    start.extend(unconstrained(rho0, alpha0));
    let spacing = {
        let mut ds: Vec<f64> = (0..coords.len())
            .flat_map(|i| (i + 1..coords.len()).map(move |j| (i, j)))
            .map(|(i, j)| distance(&coords[i], &coords[j]))
            .collect();
        ds.sort_by(f64::total_cmp);
        ds[0].max(1e-6)
    };
    let mut steps = vec![0.25 * spacing; 2 * free];
    steps.extend([0.3, 0.3]);

    let runs: Vec<_> = (0..=options.multistarts)
        .into_par_iter()
        .map(|s| {
            let mut x = start.clone();
            if s > 0 {
                let mut rng = task_rng(options.seed, s as u64);
                for v in x.iter_mut().take(2 * free) {
                    *v += 0.1 * spacing * rng.sample::<f64, _>(StandardNormal);
                }
            }
            nm.minimize(objective, &x, &steps)
        })
        .collect();
    let best = runs
        .into_iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one start");
    if !best.value.is_finite() {
        return Err(Error::Fit {
            message: "deformation objective not finite at any start".into(),
            last_iterate: best.x,
        });
    }
    let (rho, alpha) = rho_alpha(&best.x[2 * free..]).expect("finite objective implies valid parameters");
    let mut images = anchor_coords[..2].to_vec();
    images.extend((0..free).map(|i| [best.x[2 * i], best.x[2 * i + 1]]));
    let (mut def, _) = system.solve(&images, rho, alpha, options.penalty);
    def.objective = best.value;
    def.identity_objective = identity_objective;
    let mapped = apply_deformation(&def, coords);
    if mapped.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::numerical("deformed coordinates are not finite"));
    }
    for i in 0..mapped.len() {
        for j in i + 1..mapped.len() {
            if distance(&mapped[i], &mapped[j]) < COLLAPSE_DISTANCE {
                return Err(Error::Degenerate(format!(
                    "deformation collapsed sites {i} and {j} to within {COLLAPSE_DISTANCE}"
                )));
            }
        }
    }
    Ok(def)
}

/// Splits `values` sorted by `distances` into `n_bins` groups of near-equal
/// size without separating tied distances. Returns index groups.
pub fn equal_count_bins(distances: &[f64], n_bins: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|a, b| distances[*a].total_cmp(&distances[*b]).then(a.cmp(b)));
    let n = idx.len();
    let n_bins = n_bins.max(1);
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    for (pos, &i) in idx.iter().enumerate() {
        current.push(i);
        let target = ((bins.len() + 1) * n).div_ceil(n_bins);
        let tie_next = pos + 1 < n && distances[idx[pos + 1]] == distances[i];
        if pos + 1 >= target && !tie_next {
            bins.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        bins.push(current);
    }
    bins
}

/// Pooled within-bin standard deviation of `values` over equal-count
/// distance bins.
pub fn binned_dispersion(distances: &[f64], values: &[f64], n_bins: usize) -> f64 {
    let bins = equal_count_bins(distances, n_bins);
    let mut ss = 0.0;
    let mut dof = 0usize;
    for b in &bins {
        if b.len() < 2 {
            continue;
        }
        let mean = b.iter().map(|&i| values[i]).sum::<f64>() / b.len() as f64;
        ss += b.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>();
        dof += b.len() - 1;
    }
    if dof == 0 {
        0.0
    } else {
        (ss / dof as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::grid_coordinates;
    use crate::synthetic::{generate, SyntheticKind, SyntheticSpec};
    use approx::assert_relative_eq;

    #[test]
    fn br_chi_examples() {
        assert_eq!(br_chi(0.0, 1.0, 1.0), 1.0);
        assert!(br_chi(1e6, 1.0, 1.0) < 1e-10);
        let mut prev = 1.0;
        for i in 1..500 {
            let v = br_chi(i as f64 * 0.05, 1.3, 1.4);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn chi_matrix_extremes() {
        let ds = generate(&SyntheticSpec::new(SyntheticKind::Comonotone, 3, 5000, 1)).unwrap();
        let chi = empirical_chi_matrix(&ds, 0.99).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(chi.get(i, j), 1.0);
            }
        }
        assert!(empirical_chi_matrix(&ds, 0.999).is_err());
    }

    #[test]
    fn chi_independent_columns() {
        let n = 1_000_000;
        let ds = generate(&SyntheticSpec::new(SyntheticKind::IndependentExp, 2, n, 2)).unwrap();
        let chi = empirical_chi_matrix(&ds, 0.99).unwrap();
        // joint count is binomial(n, 1e-4) scaled by 1 / (n 0.01)
        let se = (n as f64 * 1e-4 * (1.0 - 1e-4)).sqrt() / (n as f64 * 0.01);
        assert!((chi.get(0, 1) - 0.01).abs() < 3.0 * se, "{}", chi.get(0, 1));
        assert_eq!(chi.get(1, 1), 1.0);
    }

    #[test]
    fn apply_identity_and_rotation() {
        let coords = grid_coordinates(3).unwrap();
        let id = Deformation::identity(1.0, 1.0);
        assert_eq!(apply_deformation(&id, &coords), coords);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Deformation {
            affine: [[0.0, c, -s], [0.0, s, c]],
            ..Deformation::identity(1.0, 1.0)
        };
        let mapped = apply_deformation(&rot, &coords);
        for i in 0..coords.len() {
            for j in 0..coords.len() {
                assert_relative_eq!(
                    distance(&mapped[i], &mapped[j]),
                    distance(&coords[i], &coords[j]),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn unit_distance_gets_no_spline_displacement() {
        assert_eq!(eta(1.0), 0.0);
        assert_eq!(eta(0.0), 0.0);
        let def = Deformation {
            anchors: vec![[0.0, 0.0]],
            spline_weights: vec![[5.0, -3.0]],
            ..Deformation::identity(1.0, 1.0)
        };
        assert_eq!(def.map(&[1.0, 0.0]), [1.0, 0.0]);
    }

    fn synthetic_chi(coords: &[Coord], rho: f64, alpha: f64) -> ChiMatrix {
        let d = coords.len();
        let mut est = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                est[i * d + j] = br_chi(distance(&coords[i], &coords[j]), rho, alpha);
            }
        }
        ChiMatrix {
            u: 0.99,
            d,
            estimates: est,
            pair_counts: vec![0; d * d],
            column_count: 0,
        }
    }

    #[test]
    fn self_consistent_chi_is_reproduced() {
        let coords = grid_coordinates(5).unwrap();
        let chi = synthetic_chi(&coords, 2.0, 1.2);
        let anchors = AnchorSpec::default().select(25);
        assert_eq!(anchors.len(), 6);
        let opts = DeformOptions {
            multistarts: 2,
            ..Default::default()
        };
        let def = fit_deformation(&coords, &chi, &anchors, &opts).unwrap();
        assert!(def.objective <= def.identity_objective + 1e-12);
        let identity = chi_discrepancy(&coords, &chi, 2.0, 1.2);
        // any perturbed map does no better than the identity
        let mut rng = task_rng(3, 0);
        for _ in 0..5 {
            let moved: Vec<Coord> = coords
                .iter()
                .map(|c| [c[0] + 0.1 * rng.random::<f64>(), c[1] + 0.1 * rng.random::<f64>()])
                .collect();
            assert!(identity <= chi_discrepancy(&moved, &chi, 2.0, 1.2));
        }
        let mapped = apply_deformation(&def, &coords);
        let pairs = chi.upper_pairs();
        let rmse = (pairs
            .iter()
            .map(|(i, j, c)| (br_chi(distance(&mapped[*i], &mapped[*j]), def.br_rho, def.br_alpha) - c).powi(2))
            .sum::<f64>()
            / pairs.len() as f64)
            .sqrt();
        assert!(rmse < 0.01, "rmse {rmse}");
    }

    #[test]
    fn deformation_reduces_dispersion() {
        // dependence is isotropic after stretching the x axis
        let coords = grid_coordinates(5).unwrap();
        let latent: Vec<Coord> = coords.iter().map(|c| [2.0 * c[0], c[1]]).collect();
        let chi = synthetic_chi(&latent, 2.5, 1.0);
        let anchors = AnchorSpec::default().select(25);
        let def = fit_deformation(&coords, &chi, &anchors, &DeformOptions::default()).unwrap();
        let mapped = apply_deformation(&def, &coords);
        let pairs = chi.upper_pairs();
        let values: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let hg: Vec<f64> = pairs.iter().map(|(i, j, _)| distance(&coords[*i], &coords[*j])).collect();
        let hd: Vec<f64> = pairs.iter().map(|(i, j, _)| distance(&mapped[*i], &mapped[*j])).collect();
        assert!(binned_dispersion(&hd, &values, 15) <= binned_dispersion(&hg, &values, 15));
        assert!(def.objective < def.identity_objective);
    }

    #[test]
    fn anchor_preconditions() {
        let coords = grid_coordinates(3).unwrap();
        let chi = synthetic_chi(&coords, 1.0, 1.0);
        let opts = DeformOptions::default();
        assert!(matches!(fit_deformation(&coords, &chi, &[0, 4], &opts), Err(Error::Domain(_))));
        assert!(matches!(fit_deformation(&coords, &chi, &[0, 1, 2], &opts), Err(Error::Domain(_))));
    }

    #[test]
    fn bins_keep_ties_together() {
        let d = [1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 4.0, 4.0];
        let bins = equal_count_bins(&d, 4);
        for b in &bins {
            for other in &bins {
                if std::ptr::eq(b, other) {
                    continue;
                }
                for i in b {
                    assert!(other.iter().all(|j| d[*j] != d[*i]));
                }
            }
        }
        assert_eq!(bins.iter().map(|b| b.len()).sum::<usize>(), d.len());
    }
}
