//! Central-difference gradient oracle.

use std::collections::BTreeMap;

use crate::backbone::SeqBatch;
use crate::error::{Error, Result};
use crate::model::{Model, PassOptions};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Default step for 32-bit checks.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Snaps `eps` to the nearest power of two so that `x ± eps` is exact for
/// moderately sized `x`.
fn snap_eps(eps: f64) -> f64 {
    2f64.powi(eps.log2().round() as i32)
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node. Returns the largest per-coordinate
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn finite_diff_check<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let (analytic, numeric) = gradients(&mut f, x, eps)?;
    Ok(max_rel_error(&analytic, &numeric))
}

/// Analytic and central-difference gradients of `f` at `x`.
pub fn gradients<T, F>(f: &mut F, x: &Tensor<T>, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let eps = snap_eps(eps);

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.data().iter().map(|v| v.f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut eval = |point: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item().f64())
    };

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let base = x.data()[i];
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] = base + T::lit(eps);
        minus.data_mut()[i] = base - T::lit(eps);
        let h = (plus.data()[i] - minus.data()[i]).f64();
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        numeric.push((fp - fm) / h);
    }
    Ok((analytic, numeric))
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Largest relative error per adapter tensor between the tape gradient of the
/// total training loss and central differences taken on the model itself.
pub fn adapter_gradient_errors(
    model: &Model<f64>,
    batch: &SeqBatch,
    embeddings: Option<&Tensor<f64>>,
    eps: f64,
) -> Result<BTreeMap<String, f64>> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let eps = snap_eps(eps);
    let names: Vec<String> = match &model.adapters {
        Some(a) => a.params().keys().cloned().collect(),
        None => return Err(Error::Contract("model has no adapters".into())),
    };
    let total = |m: &Model<f64>, train: bool| -> Result<(Tape<f64>, crate::model::Loss)> {
        let mut tape = Tape::new();
        let opts = PassOptions {
            train_adapters: train,
            embeddings,
            ..PassOptions::default()
        };
        let loss = m.loss(&mut tape, batch, opts)?;
        Ok((tape, loss))
    };

    let (mut tape, loss) = total(model, true)?;
    tape.backward(loss.total)?;
    let mut analytic = BTreeMap::new();
    for name in &names {
        let v = loss.pass.adapter_vars[name];
        let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
        analytic.insert(name.clone(), g.into_data());
    }

    let mut probe = model.clone();
    let mut errors = BTreeMap::new();
    for name in &names {
        let numel = model.adapters.as_ref().unwrap().param(name)?.numel();
        let mut numeric = Vec::with_capacity(numel);
        for i in 0..numel {
            let base = model.adapters.as_ref().unwrap().param(name)?.data()[i];
            let mut value_at = |x: f64| -> Result<f64> {
                probe.adapters.as_mut().unwrap().param_mut(name)?.data_mut()[i] = x;
                let (tape, loss) = total(&probe, false)?;
                Ok(tape.value(loss.total).item())
            };
            let fp = value_at(base + eps)?;
            let fm = value_at(base - eps)?;
            probe.adapters.as_mut().unwrap().param_mut(name)?.data_mut()[i] = base;
            numeric.push((fp - fm) / (2.0 * eps));
        }
        errors.insert(name.clone(), max_rel_error(&analytic[name], &numeric));
    }
    Ok(errors)
}
