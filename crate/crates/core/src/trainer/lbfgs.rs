use std::collections::VecDeque;

const HISTORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    /// Stop once the largest absolute gradient component is at or below this.
    pub gradient_tolerance: f64,
}

/// What the optimizer did. `objective[0]` is the starting value and each
/// accepted step appends one entry; the sequence is strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_max_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Limited-memory BFGS with a backtracking Armijo line search.
///
/// Every accepted step satisfies the sufficient-decrease condition, so the
/// objective never increases. If no acceptable step exists along the search
/// direction (the gradient is at the limit of floating-point resolution) the
/// run ends early with `converged == false`.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> (Vec<f64>, FitTrace)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut trace = FitTrace {
        objective: vec![fx],
        iterations: 0,
        converged: false,
        gradient_max_norm: max_abs(&g),
    };
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);

    while trace.iterations < opts.max_iterations {
        if trace.gradient_max_norm <= opts.gradient_tolerance {
            trace.converged = true;
            break;
        }

        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if history.is_empty() {
            (1.0 / max_abs(&dir)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        while step >= MIN_STEP {
            let candidate: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fc, gc) = f(&candidate);
            if fc.is_finite() && fc <= fx + ARMIJO_C1 * step * slope && fc < fx {
                accepted = Some((candidate, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        trace.iterations += 1;
        trace.objective.push(fx);
        trace.gradient_max_norm = max_abs(&g);
    }
    if trace.gradient_max_norm <= opts.gradient_tolerance {
        trace.converged = true;
    }
    (x, trace)
}

/// Approximate inverse-Hessian product `-H g`.
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
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}
