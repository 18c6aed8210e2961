//! Box-projected L-BFGS minimizer with Armijo backtracking.
//!
//! Objective evaluations may fail (return `None`); a failed trial point is
//! treated like an insufficient decrease and the step is shortened.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsSettings {
    pub max_iter: usize,
    /// Stop when successive objective values differ by less than this.
    pub f_tol: f64,
    /// Stop when the projected gradient's ∞-norm drops below this.
    pub g_tol: f64,
    pub memory: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LbfgsSettings {
    pub fn unbounded(dim: usize) -> Self {
        Self {
            max_iter: 200,
            f_tol: 1e-7,
            g_tol: 1e-6,
            memory: 10,
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ValueTolerance,
    GradientTolerance,
    MaxIterations,
    /// Line search could not find a decrease.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Gradient with components that push against an active bound zeroed.
fn projected_grad_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((xi, gi), (lo, hi))| {
            if (*xi <= *lo && *gi > 0.0) || (*xi >= *hi && *gi < 0.0) {
                0.0
            } else {
                gi.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `f` from `x0`. Returns `None` if `f` fails at the (projected)
/// start point.
pub fn minimize<F>(mut f: F, x0: &[f64], settings: &LbfgsSettings) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (lower, upper) = (&settings.lower, &settings.upper);
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for iter in 0..settings.max_iter {
        if projected_grad_norm(&x, &g, lower, upper) < settings.g_tol {
            return Some(done(x, fx, g, iter, Termination::GradientTolerance));
        }

        let mut dir = two_loop(&g, &history);
        if dot(&dir, &g) >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
        }
        let mut step = if history.is_empty() {
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (1.0 / gmax).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            project(&mut trial, lower, upper);
            let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let slope = dot(&g, &s);
            if slope < 0.0 {
                if let Some((ft, gt)) = f(&trial) {
                    if ft.is_finite() && ft <= fx + ARMIJO_C * slope {
                        accepted = Some((trial, s, ft, gt));
                        break;
                    }
                }
            }
            step *= 0.5;
        }

        let Some((trial, s, ft, gt)) = accepted else {
            return Some(done(x, fx, g, iter, Termination::Stalled));
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let delta = (fx - ft).abs();
        x = trial;
        fx = ft;
        g = gt;
        if delta < settings.f_tol {
            return Some(done(x, fx, g, iter + 1, Termination::ValueTolerance));
        }
    }
    let n = settings.max_iter;
    Some(done(x, fx, g, n, Termination::MaxIterations))
}

fn done(x: Vec<f64>, value: f64, gradient: Vec<f64>, iterations: usize, t: Termination) -> Minimum {
    Minimum {
        x,
        value,
        gradient,
        iterations,
        termination: t,
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Some((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let mut s = LbfgsSettings::unbounded(2);
        s.f_tol = 0.0;
        s.g_tol = 1e-8;
        s.max_iter = 500;
        let m = minimize(rosenbrock, &[-1.2, 1.0], &s).unwrap();
        assert_eq!(m.termination, Termination::GradientTolerance);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn respects_bounds() {
        let quad = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let mut s = LbfgsSettings::unbounded(1);
        s.upper = vec![1.0];
        let m = minimize(quad, &[0.0], &s).unwrap();
        assert_eq!(m.x, vec![1.0]);
        assert_eq!(m.termination, Termination::GradientTolerance);
    }

    #[test]
    fn never_worse_than_start() {
        let bumpy = |x: &[f64]| {
            let f = (3.0 * x[0]).sin() + 0.1 * x[0] * x[0];
            Some((f, vec![3.0 * (3.0 * x[0]).cos() + 0.2 * x[0]]))
        };
        let s = LbfgsSettings::unbounded(1);
        for start in [-4.0, -1.0, 0.3, 2.0, 5.0] {
            let f0 = bumpy(&[start]).unwrap().0;
            let m = minimize(bumpy, &[start], &s).unwrap();
            assert!(m.value <= f0);
        }
    }

    #[test]
    fn failing_region_is_avoided() {
        // undefined for x > 2; minimum of the defined part at the edge
        let f = |x: &[f64]| (x[0] <= 2.0).then(|| ((x[0] - 5.0).powi(2), vec![2.0 * (x[0] - 5.0)]));
        let m = minimize(f, &[0.0], &LbfgsSettings::unbounded(1)).unwrap();
        assert!(m.x[0] <= 2.0 && m.x[0] > 1.9);
        assert!(minimize(f, &[3.0], &LbfgsSettings::unbounded(1)).is_none());
    }
}
