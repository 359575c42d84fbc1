//! Small dense optimizers used by the calibration stages.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient sup-norm falls below `grad_tol · (1 + |f|)`.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease falls below this.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 400,
            grad_tol: 1e-9,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Quasi-Newton minimization with an Armijo backtracking line search.
///
/// `fg` returns the objective and writes the gradient; non-finite values are
/// treated as +∞ so the line search backs off.
pub fn bfgs<F>(mut fg: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut g = DVector::zeros(n);
    let mut f = fg(x.as_slice(), g.as_mut_slice());
    if !f.is_finite() {
        return Minimum {
            x: x0.to_vec(),
            f,
            iterations: 0,
            converged: false,
        };
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut g_new = DVector::zeros(n);
    let mut first = true;
    for iter in 0..opts.max_iter {
        if g.amax() <= opts.grad_tol * (1.0 + f.abs()) {
            return Minimum {
                x: x.as_slice().to_vec(),
                f,
                iterations: iter,
                converged: true,
            };
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        if first {
            // Keep the first step modest relative to the gradient scale.
            let scale = 1.0 / g.norm().max(1.0);
            dir *= scale;
            slope *= scale;
            first = false;
        }
        let mut step = 1.0;
        let mut x_new;
        let mut f_new;
        loop {
            x_new = &x + step * &dir;
            f_new = fg(x_new.as_slice(), g_new.as_mut_slice());
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return Minimum {
                    x: x.as_slice().to_vec(),
                    f,
                    iterations: iter,
                    converged: g.amax() <= 1e-5 * (1.0 + f.abs()),
                };
            }
        }
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let rel_drop = (f - f_new) / f.abs().max(1.0);
        x = x_new;
        g.copy_from(&g_new);
        let f_old = f;
        f = f_new;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H⁺ = H − ρ(s·(Hy)ᵀ + Hy·sᵀ) + (ρ²·yᵀHy + ρ)·s·sᵀ
            h -= rho * (&s * hy.transpose() + &hy * s.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }
        if rel_drop.abs() < opts.f_tol && f <= f_old {
            return Minimum {
                x: x.as_slice().to_vec(),
                f,
                iterations: iter + 1,
                converged: g.amax() <= 1e-5 * (1.0 + f.abs()),
            };
        }
    }
    Minimum {
        x: x.as_slice().to_vec(),
        f,
        iterations: opts.max_iter,
        converged: false,
    }
}

/// Golden-section search for the minimum of a unimodal function on `[a, b]`.
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_rosenbrock() {
        let m = bfgs(
            |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &[-1.2, 1.0],
            &BfgsOptions {
                max_iter: 2000,
                ..Default::default()
            },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{m:?}");
    }

    #[test]
    fn golden_finds_kink() {
        let (x, _) = golden_min(|t| (t - 0.3).abs() + 0.1 * t, -5.0, 5.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
    }
}
