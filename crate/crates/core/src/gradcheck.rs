//! Central finite differences over named parameters, used to check the tape's
//! analytic gradients.

use crate::model::ParamStore;

/// Five-point central difference
/// `(-f(p + 2h) + 8 f(p + h) - 8 f(p - h) + f(p - 2h)) / 12h`
/// for one scalar of parameter `name`. Truncation error is `O(h^4)`.
pub fn central_difference<F>(f: F, store: &ParamStore, name: &str, index: (usize, usize), step: f64) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let at = |delta: f64| {
        let mut moved = store.clone();
        moved.get_mut(name).expect("parameter exists")[index] += delta;
        f(&moved)
    };
    (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step)
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor turns the check into an
/// absolute one for gradients that are numerically zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
