//! Central finite-difference gradient checks.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`. `f` must build a scalar from its input.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x);
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    #[allow(clippy::needless_range_loop)]
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check against selected parameter coordinates of a model. `f` builds
/// the scalar loss from the store; `coords` lists `(param, flat index)`.
pub fn finite_difference_check_params<F>(
    f: F,
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(0.0, |g| g[i]))
        .collect();
    drop(grads);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    for (&(id, i), a) in coords.iter().zip(&analytic) {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(store);
        store.get_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(store);
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}
