//! Limited-memory BFGS with a weak-Wolfe bracketing line search and an
//! optional symmetric positive-definite initial inverse Hessian.

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop once `f_prev − f ≤ rel_tol·max(1, |f|)` for `patience` consecutive iterations.
    pub rel_tol: f64,
    pub patience: usize,
    /// Stop once `‖g‖_∞ ≤ grad_tol`.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, memory: 12, rel_tol: 1e-12, patience: 3, grad_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Decrease achieved by the last accepted step.
    pub last_decrease: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `fg`, which returns the objective and writes the gradient.
///
/// `precond`, when given, applies an approximation of the inverse Hessian
/// and seeds every two-loop recursion.
pub fn lbfgs<F>(
    mut fg: F,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
    precond: Option<&dyn Fn(&[f64], &mut [f64])>,
) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    let mut evals = 1;
    let mut history = vec![f];
    let mut out = LbfgsOutcome {
        x: Vec::new(),
        f,
        iterations: 0,
        evaluations: 0,
        converged: false,
        last_decrease: f64::INFINITY,
        history: Vec::new(),
    };
    if n == 0 || !f.is_finite() {
        out.x = x;
        out.converged = n == 0;
        out.evaluations = evals;
        out.history = history;
        return out;
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut gamma = 1.0;
    let mut calm = 0;
    let mut d = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory.max(1)];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    for it in 0..opts.max_iter {
        out.iterations = it + 1;
        if inf_norm(&g) <= opts.grad_tol {
            out.converged = true;
            break;
        }
        // two-loop recursion
        q.copy_from_slice(&g);
        let m = s_hist.len();
        for i in (0..m).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &q);
            for (qk, yk) in q.iter_mut().zip(&y_hist[i]) {
                *qk -= alpha[i] * yk;
            }
        }
        match precond {
            Some(p) => {
                p(&q, &mut d);
                for v in d.iter_mut() {
                    *v *= gamma;
                }
            }
            None => {
                let scale = if m == 0 { 1.0 / inf_norm(&g).max(1.0) } else { gamma };
                for (dk, qk) in d.iter_mut().zip(&q) {
                    *dk = scale * qk;
                }
            }
        }
        for i in 0..m {
            let beta = rho[i] * dot(&y_hist[i], &d);
            for (dk, sk) in d.iter_mut().zip(&s_hist[i]) {
                *dk += (alpha[i] - beta) * sk;
            }
        }
        for v in d.iter_mut() {
            *v = -*v;
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // not a descent direction: restart from the plain (preconditioned) gradient
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            match precond {
                Some(p) => p(&g, &mut d),
                None => d.copy_from_slice(&g),
            }
            for v in d.iter_mut() {
                *v = -*v;
            }
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                out.converged = true;
                break;
            }
        }

        // weak Wolfe bracketing
        let (c1, c2) = (1e-4, 0.9);
        let mut t = 1.0;
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut accepted: Option<(f64, f64)> = None;
        let mut best_armijo: Option<(f64, f64)> = None;
        for _ in 0..60 {
            for k in 0..n {
                x_new[k] = x[k] + t * d[k];
            }
            let f_new = fg(&x_new, &mut g_new);
            evals += 1;
            if !f_new.is_finite() || f_new > f + c1 * t * slope {
                hi = t;
            } else {
                best_armijo = Some((t, f_new));
                if dot(&g_new, &d) < c2 * slope {
                    lo = t;
                } else {
                    accepted = Some((t, f_new));
                    break;
                }
            }
            t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
            if hi.is_finite() && hi - lo < 1e-16 * (1.0 + lo) {
                break;
            }
        }
        let (t, f_new) = match accepted.or(best_armijo) {
            Some(v) => v,
            None => {
                if s_hist.is_empty() {
                    // no decrease along the steepest direction
                    out.converged = true;
                    break;
                }
                s_hist.clear();
                y_hist.clear();
                rho.clear();
                continue;
            }
        };
        if accepted.is_none() {
            // re-evaluate at the Armijo point to restore its gradient
            for k in 0..n {
                x_new[k] = x[k] + t * d[k];
            }
            fg(&x_new, &mut g_new);
            evals += 1;
        }
        let s: Vec<f64> = (0..n).map(|k| x_new[k] - x[k]).collect();
        let y: Vec<f64> = (0..n).map(|k| g_new[k] - g[k]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            gamma = match precond {
                Some(p) => {
                    let mut hy = vec![0.0; n];
                    p(&y, &mut hy);
                    sy / dot(&y, &hy)
                }
                None => sy / dot(&y, &y),
            };
            s_hist.push(s);
            y_hist.push(y);
            rho.push(1.0 / sy);
        }
        let decrease = f - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_new;
        history.push(f);
        out.last_decrease = decrease;
        if decrease <= opts.rel_tol * f.abs().max(1.0) {
            calm += 1;
            if calm >= opts.patience {
                out.converged = true;
                break;
            }
        } else {
            calm = 0;
        }
    }
    out.x = x;
    out.f = f;
    out.evaluations = evals;
    out.history = history;
    out
}
