//! Central finite-difference validation of analytic gradients.
//!
//! Used by the test suites: the analytic gradients from one recorded
//! backward pass are compared against (f(x+h) - f(x-h)) / 2h on sampled
//! parameter coordinates, with tolerances appropriate to the element type.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Gradients, Parameter};

#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl CheckSettings {
    /// 32-bit mode: the difference quotient sits on top of ~1e-7 relative
    /// rounding noise, so the step and tolerances are coarse.
    pub fn for_f32() -> CheckSettings {
        CheckSettings { h: 1e-3, rtol: 1e-2, atol: 5e-4 }
    }

    /// 64-bit test mode.
    pub fn for_f64() -> CheckSettings {
        CheckSettings { h: 1e-6, rtol: 1e-5, atol: 1e-9 }
    }
}

#[derive(Debug)]
pub struct CoordinateResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub failures: Vec<CoordinateResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} coordinates checked, {} failures", self.checked, self.failures.len())?;
        for fail in self.failures.iter().take(5) {
            write!(
                f,
                "\n  {}[{}]: analytic {} vs numeric {}",
                fail.name, fail.index, fail.analytic, fail.numeric
            )?;
        }
        Ok(())
    }
}

/// Samples `per_param` random coordinates from every parameter.
pub fn sample_coordinates<T: Element>(
    params: &[&Parameter<T>],
    per_param: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for p in params {
        let len = p.value.len();
        for _ in 0..per_param.min(len) {
            coords.push((p.name.clone(), rng.gen_range(0..len)));
        }
    }
    coords
}

/// Checks analytic gradients against central finite differences.
///
/// `params_of` exposes the model's parameters for perturbation; `loss_of`
/// re-evaluates the scalar loss on a fresh tape. A coordinate passes when
/// |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
pub fn finite_difference_check<T: Element, M>(
    model: &mut M,
    mut params_of: impl FnMut(&mut M) -> Vec<&mut Parameter<T>>,
    mut loss_of: impl FnMut(&M) -> f64,
    analytic: &Gradients<T>,
    coords: &[(String, usize)],
    settings: CheckSettings,
) -> CheckReport {
    let mut failures = Vec::new();
    for (name, index) in coords {
        let a = analytic
            .get(name)
            .map(|t| t.data()[*index].into_f64())
            .unwrap_or(0.0);

        let original = {
            let mut ps = params_of(model);
            let p = ps
                .iter_mut()
                .find(|p| &p.name == name)
                .unwrap_or_else(|| panic!("no parameter named {name:?}"));
            let v = p.value.data()[*index].into_f64();
            p.value.data_mut()[*index] = T::from_f64(v + settings.h);
            v
        };
        let plus = loss_of(model);
        {
            let mut ps = params_of(model);
            let p = ps.iter_mut().find(|p| &p.name == name).unwrap();
            p.value.data_mut()[*index] = T::from_f64(original - settings.h);
        }
        let minus = loss_of(model);
        {
            let mut ps = params_of(model);
            let p = ps.iter_mut().find(|p| &p.name == name).unwrap();
            p.value.data_mut()[*index] = T::from_f64(original);
        }

        let numeric = (plus - minus) / (2.0 * settings.h);
        let tol = settings.atol + settings.rtol * a.abs().max(numeric.abs());
        if (a - numeric).abs() > tol {
            failures.push(CoordinateResult {
                name: name.clone(),
                index: *index,
                analytic: a,
                numeric,
            });
        }
    }
    CheckReport { checked: coords.len(), failures }
}
