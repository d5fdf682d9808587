//! Nelder–Mead simplex minimization for the small control spaces of the
//! impulse problem.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Absolute simplex diameter at which to stop.
    pub x_tol: f64,
    /// Relative spread of vertex values at which to stop.
    pub f_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            x_tol: 1e-10,
            f_tol: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Minimizes `f` from `x0` using an axis-aligned initial simplex of edge `step`.
/// NaN values are treated as `+∞`. Ties keep the earlier vertex, so a start
/// that is already optimal is returned bit-for-bit.
pub fn minimize<F>(mut f: F, x0: &[f64], step: f64, opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        finite_or_inf(f(x))
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let mut iterations = 0;
    while iterations < opts.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0_f64, f64::max);
        let spread_ok =
            best.is_finite() && (worst - best).abs() <= opts.f_tol * best.abs().max(1e-300);
        if diameter <= opts.x_tol || (spread_ok && diameter <= opts.x_tol.sqrt()) {
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for i in 0..n {
                centroid[i] += x[i] / n as f64;
            }
        }
        let towards = |coef: f64| -> Vec<f64> {
            (0..n)
                .map(|i| centroid[i] + coef * (centroid[i] - simplex[n].0[i]))
                .collect()
        };
        let xr = towards(REFLECT);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = towards(EXPAND);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = towards(CONTRACT);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = towards(-CONTRACT);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            for (v, b) in vertex.0.iter_mut().zip(&x_best) {
                *v = b + SHRINK * (*v - b);
            }
            vertex.1 = eval(&vertex.0, &mut evals);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        iterations,
        evaluations: evals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let m = minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            0.5,
            &NelderMeadOptions::default(),
        );
        assert!(
            (m.x[0] - 1.0).abs() < 1e-7 && (m.x[1] - 1.0).abs() < 1e-7,
            "{m:?}"
        );
    }

    #[test]
    fn optimal_start_is_kept_exactly() {
        let m = minimize(
            |x| x[0] * x[0] + x[1] * x[1],
            &[0.0, 0.0],
            0.1,
            &NelderMeadOptions::default(),
        );
        assert_eq!(m.x, vec![0.0, 0.0]);
        assert_eq!(m.value, 0.0);
    }

    #[test]
    fn nan_is_treated_as_infinite() {
        let m = minimize(
            |x| {
                if x[0] < 0.0 {
                    f64::NAN
                } else {
                    (x[0] - 2.0).powi(2)
                }
            },
            &[1.0],
            0.5,
            &NelderMeadOptions::default(),
        );
        assert!((m.x[0] - 2.0).abs() < 1e-8);
    }
}
