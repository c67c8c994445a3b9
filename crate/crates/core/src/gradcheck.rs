//! Central finite-difference gradient checking.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParameterStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter; all of them when the parameter is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Coordinates whose absolute discrepancy is at most this are counted as
    /// roundoff-limited instead of failing. Zero disables it.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_param: 32,
            seed: 0,
            abs_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    /// Coordinates over tolerance but within `abs_floor`.
    pub roundoff_limited: usize,
    pub max_rel_error: f64,
    /// Coordinate, analytic and numeric values at the worst error.
    pub worst: Option<(usize, f64, f64)>,
    pub failure: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn roundoff_limited(&self) -> usize {
        self.params.iter().map(|p| p.roundoff_limited).sum()
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            write!(
                f,
                "{:<6} {:<40} coords={:<4} max_rel_err={:.3e}",
                if p.passed { "ok" } else { "FAIL" },
                p.name,
                p.coords_checked,
                p.max_rel_error
            )?;
            if p.roundoff_limited > 0 {
                write!(f, " roundoff_limited={}", p.roundoff_limited)?;
            }
            if let Some((i, a, n)) = p.worst {
                if !p.passed {
                    write!(f, " (coord {i}: analytic {a:.6e}, numeric {n:.6e})")?;
                }
            }
            if let Some(msg) = &p.failure {
                write!(f, " [{msg}]")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences.
///
/// `forward` evaluates the scalar objective at the store's current values
/// and accumulates its gradient into the store. It is called once for the
/// analytic gradient (after zeroing) and twice per checked coordinate; the
/// store's values are restored afterwards.
pub fn grad_check<F>(mut forward: F, params: &mut ParameterStore, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut ParameterStore) -> f64,
{
    params.zero_grad();
    let base = forward(params);
    let analytic: Vec<_> = params.iter().map(|(_, e)| e.grad.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();

    for idx in 0..params.len() {
        let name = params.name(idx).to_string();
        if !params.entry(idx).trainable {
            continue;
        }
        let mut check = ParamCheck {
            name,
            coords_checked: 0,
            roundoff_limited: 0,
            max_rel_error: 0.0,
            worst: None,
            failure: None,
            passed: true,
        };
        if !base.is_finite() {
            check.failure = Some(format!("forward value is {base}"));
            check.passed = false;
            report.params.push(check);
            continue;
        }
        let n = params.entry(idx).value.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for &c in &coords {
            let orig = params.entry(idx).value.data()[c];
            params.entry_mut(idx).value.data_mut()[c] = orig + cfg.eps;
            let plus = forward(params);
            params.entry_mut(idx).value.data_mut()[c] = orig - cfg.eps;
            let minus = forward(params);
            params.entry_mut(idx).value.data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                check.failure = Some(format!("non-finite forward at coordinate {c}"));
                check.passed = false;
                break;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[idx].data()[c];
            let err = relative_error(a, numeric);
            check.coords_checked += 1;
            if err > cfg.tol && (a - numeric).abs() <= cfg.abs_floor {
                check.roundoff_limited += 1;
                continue;
            }
            if check.worst.is_none() || err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = Some((c, a, numeric));
            }
        }
        if check.max_rel_error > cfg.tol {
            check.passed = false;
        }
        report.params.push(check);
    }
    params.zero_grad();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sum_of_squares_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("theta", Tensor::row_vector(vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        s
    }

    fn sum_sq(s: &mut ParameterStore, grad_scale: f64) -> f64 {
        let v = s.value("theta").unwrap().clone();
        let g = Tensor::row_vector(v.data().iter().map(|x| grad_scale * 2.0 * x).collect()).unwrap();
        let e = s.entry_mut(0);
        for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        v.data().iter().map(|x| x * x).sum()
    }

    #[test]
    fn exact_polynomial_passes() {
        let mut s = sum_of_squares_store();
        let r = grad_check(|s| sum_sq(s, 1.0), &mut s, &GradCheckConfig::default());
        assert!(r.passed());
        assert!(r.max_rel_error() < 1e-9, "{r}");
        assert_eq!(r.params[0].coords_checked, 3);
        assert_eq!(s.value("theta").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn doubled_gradient_fails() {
        let mut s = sum_of_squares_store();
        let r = grad_check(|s| sum_sq(s, 2.0), &mut s, &GradCheckConfig::default());
        assert!(!r.passed());
        // |2n − n| / 2n
        assert!((r.max_rel_error() - 0.5).abs() < 1e-6, "{r}");
    }

    #[test]
    fn non_finite_forward_is_named() {
        let mut s = sum_of_squares_store();
        let r = grad_check(
            |s| {
                let v = s.value("theta").unwrap().data()[0];
                if v > 1.0 {
                    f64::NAN
                } else {
                    v
                }
            },
            &mut s,
            &GradCheckConfig::default(),
        );
        assert!(!r.passed());
        assert_eq!(r.params[0].name, "theta");
        assert!(r.params[0].failure.as_deref().unwrap().contains("non-finite"));
    }

    #[test]
    fn abs_floor_separates_roundoff() {
        // Analytic gradient off by a constant 1e-9.
        let mut s = sum_of_squares_store();
        let mut run = |floor| {
            let cfg = GradCheckConfig {
                abs_floor: floor,
                ..GradCheckConfig::default()
            };
            grad_check(
                |s| {
                    let v = s.value("theta").unwrap().data()[0];
                    s.entry_mut(0).grad.data_mut()[0] += 1e-9;
                    0.0 * v
                },
                &mut s,
                &cfg,
            )
        };
        let strict = run(0.0);
        assert!(!strict.passed());
        let floored = run(1e-8);
        assert!(floored.passed(), "{floored}");
        assert_eq!(floored.roundoff_limited(), 1);
        assert!(floored.to_string().contains("roundoff_limited=1"));
    }

    #[test]
    fn samples_at_most_configured_coords() {
        let mut s = ParameterStore::new();
        s.insert("big", Tensor::filled(&[10, 10], 0.5), true).unwrap();
        let r = grad_check(
            |s| {
                let sum: f64 = s.value("big").unwrap().data().iter().sum();
                s.entry_mut(0).grad.data_mut().iter_mut().for_each(|g| *g += 1.0);
                sum
            },
            &mut s,
            &GradCheckConfig::default(),
        );
        assert!(r.passed());
        assert_eq!(r.params[0].coords_checked, 32);
    }
}
