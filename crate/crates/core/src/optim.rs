//! Derivative-free minimisation.
//!
//! A Nelder–Mead simplex with dimension-adaptive coefficients (Gao & Han),
//! automatic restarts from the incumbent, and an optional finite-difference
//! Newton polish for smooth objectives. Non-finite objective values are
//! treated as `+inf`, so callers reject infeasible points by returning NaN
//! or infinity.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NelderMead {
    /// Stop when the spread of simplex values falls below
    /// `tol_f * max(1, |f_best|)`.
    pub tol_f: f64,
    /// ... and the simplex diameter falls below this.
    pub tol_x: f64,
    pub max_iter: usize,
    /// Restarts from the incumbent after convergence.
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            tol_f: 1e-8,
            tol_x: 1e-6,
            max_iter: 5000,
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub simplex_size: f64,
    /// Best objective value after every iteration.
    pub trace: Vec<f64>,
}

fn clean(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

impl NelderMead {
    pub fn new(tol_f: f64, max_iter: usize) -> Self {
        Self {
            tol_f,
            max_iter,
            ..Default::default()
        }
    }

    pub fn minimize<F>(&self, mut f: F, x0: &[f64], steps: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        assert_eq!(x0.len(), steps.len());
        let mut best = self.run(&mut f, x0, steps, self.max_iter);
        let mut iterations = best.iterations;
        let mut evaluations = best.evaluations;
        let mut trace = std::mem::take(&mut best.trace);
        for _ in 0..self.restarts {
            if iterations >= self.max_iter {
                break;
            }
            let shrunk: Vec<f64> = steps.iter().map(|s| s * 0.1).collect();
            let mut next = self.run(&mut f, &best.x, &shrunk, self.max_iter - iterations);
            iterations += next.iterations;
            evaluations += next.evaluations;
            trace.append(&mut next.trace);
            let improved = best.value - next.value > self.tol_f * best.value.abs().max(1.0);
            if next.value <= best.value {
                best = next;
            }
            if !improved {
                break;
            }
        }
        best.iterations = iterations;
        best.evaluations = evaluations;
        best.trace = trace;
        best
    }

    fn run<F>(&self, f: &mut F, x0: &[f64], steps: &[f64], max_iter: usize) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        let nf = n as f64;
        let (alpha, beta, gamma, delta) = if n >= 2 {
            (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
        } else {
            (1.0, 2.0, 0.5, 0.5)
        };
        let mut evaluations = 0usize;
        let mut eval = |x: &[f64], evaluations: &mut usize| {
            *evaluations += 1;
            clean(f(x))
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += if steps[i] != 0.0 { steps[i] } else { 0.05 };
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evaluations)).collect();
        let mut trace = Vec::new();
        let mut iterations = 0;
        let mut converged = false;

        while iterations < max_iter {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();
            trace.push(values[0]);

            let spread = values[n] - values[0];
            let size = diameter(&simplex);
            if values[0].is_finite()
                && spread <= self.tol_f * values[0].abs().max(1.0)
                && size <= self.tol_x
            {
                converged = true;
                break;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / nf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };

            let xr = along(alpha);
            let fr = eval(&xr, &mut evaluations);
            if fr < values[0] {
                let xe = along(alpha * beta);
                let fe = eval(&xe, &mut evaluations);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
                continue;
            }
            let (xc, fc, accept) = if fr < values[n] {
                let xc = along(alpha * gamma);
                let fc = eval(&xc, &mut evaluations);
                let ok = fc <= fr;
                (xc, fc, ok)
            } else {
                let xc = along(-gamma);
                let fc = eval(&xc, &mut evaluations);
                let ok = fc < values[n];
                (xc, fc, ok)
            };
            if accept {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
            // shrink towards the best vertex
            let best = simplex[0].clone();
            for i in 1..=n {
                for (x, b) in simplex[i].iter_mut().zip(&best) {
                    *x = b + delta * (*x - b);
                }
                values[i] = eval(&simplex[i], &mut evaluations);
            }
        }

        let (ib, _) = values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        Minimum {
            x: simplex[ib].clone(),
            value: values[ib],
            iterations,
            evaluations,
            converged,
            simplex_size: diameter(&simplex),
            trace,
        }
    }
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for v in &simplex[1..] {
        let s = v
            .iter()
            .zip(&simplex[0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        d = d.max(s);
    }
    d
}

/// Central-difference gradient.
pub fn numerical_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let hi = h * x[i].abs().max(1.0);
            xp[i] = x[i] + hi;
            let fp = f(&xp);
            xp[i] = x[i] - hi;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * hi)
        })
        .collect()
}

fn numerical_hessian<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let step: Vec<f64> = x.iter().map(|v| h * v.abs().max(1.0)).collect();
    for i in 0..n {
        xp[i] = x[i] + step[i];
        let fp = f(&xp);
        xp[i] = x[i] - step[i];
        let fm = f(&xp);
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (step[i] * step[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * step[i];
                xp[j] = x[j] + sj * step[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * step[i] * step[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Finite-difference Newton iterations from `x`, accepted only while they
/// decrease `f`. Returns the polished point and its value.
pub fn newton_polish<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], max_steps: usize) -> (Vec<f64>, f64) {
    let mut x = x.to_vec();
    let mut fx = clean(f(&x));
    for _ in 0..max_steps {
        let g = DVector::from_vec(numerical_gradient(&mut f, &x, 1e-5));
        if g.amax() < 1e-9 {
            break;
        }
        let h = numerical_hessian(&mut f, &x, 1e-4);
        let dir = match h.clone().cholesky() {
            Some(ch) => -ch.solve(&g),
            None => break,
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..20 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let fc = clean(f(&cand));
            if fc < fx {
                x = cand;
                fx = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (x, fx)
}
