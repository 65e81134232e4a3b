//! Post-hoc temperature scaling of logits.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, logits_batch, LabelledData, TrainedDiscriminator};
use crate::error::{Error, Result};

const LOG_T_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
const LOG_T_MAX: f64 = 6.907_755_278_982_137;
const TOLERANCE: f64 = 1e-4;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationResult {
    pub temperature: f64,
    /// Calib-train cross-entropy at `T = 1` and at the fitted temperature.
    pub loss_at_one: f64,
    pub loss: f64,
    /// Calib-val cross-entropy before and after, when a validation set is given.
    pub val_loss_at_one: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Temperature minimizing the cross-entropy of `logits / T`.
///
/// A bracket is grown geometrically from `T = 1` within `[1e-3, 1e3]`, then
/// narrowed by golden-section search in `ln T`. If the minimum is not lower
/// than the loss at `T = 1`, `T = 1` is returned.
pub fn calibrate_temperature_logits(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<CalibrationResult> {
    if labels.is_empty() || labels.len() != logits.nrows() {
        return Err(Error::Invalid("calibration set is empty or mislabelled".into()));
    }
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Invalid("calibration set contains a single class".into()));
    }
    let loss = |u: f64| cross_entropy(logits, labels, u.exp());
    let mut profile = Vec::new();
    let mut eval = |u: f64| {
        let l = loss(u);
        profile.push((u.exp(), l));
        l
    };

    let (mut a, mut b) = (-0.5, 0.0);
    let (mut fa, mut fb) = (eval(a), eval(b));
    if fa < fb {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    // walk downhill from a through b until the loss rises again
    let mut step = b - a;
    let (c, _fc) = loop {
        let c = b + 1.6 * step;
        if !(LOG_T_MIN..=LOG_T_MAX).contains(&c) {
            profile.sort_by(|x, y| x.0.total_cmp(&y.0));
            return Err(Error::Bracketing { profile });
        }
        let fc = eval(c);
        if fc >= fb {
            break (c, fc);
        }
        step = c - b;
        (a, fa) = (b, fb);
        (b, fb) = (c, fc);
    };
    let _ = fa;
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (loss(x1), loss(x2));
    while hi - lo > TOLERANCE {
        if f1 < f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - INV_PHI * (hi - lo);
            f1 = loss(x1);
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + INV_PHI * (hi - lo);
            f2 = loss(x2);
        }
    }
    let u = 0.5 * (lo + hi);
    let (l_star, l_one) = (loss(u), loss(0.0));
    let (temperature, l) = if l_star <= l_one { (u.exp(), l_star) } else { (1.0, l_one) };
    Ok(CalibrationResult {
        temperature,
        loss_at_one: l_one,
        loss: l,
        val_loss_at_one: None,
        val_loss: None,
    })
}

/// Fits `T_cal` on the calibration set with all other parameters frozen and
/// stores it in the model.
pub fn calibrate_temperature(
    model: &mut TrainedDiscriminator,
    calib: &LabelledData,
    calib_val: Option<&LabelledData>,
) -> Result<f64> {
    let logits = logits_batch(&model.architecture, &model.params, &calib.inputs.view())?;
    let mut r = calibrate_temperature_logits(&logits.view(), &calib.labels)?;
    if let Some(v) = calib_val.filter(|v| !v.is_empty()) {
        let lv = logits_batch(&model.architecture, &model.params, &v.inputs.view())?;
        r.val_loss_at_one = Some(cross_entropy(&lv.view(), &v.labels, 1.0));
        r.val_loss = Some(cross_entropy(&lv.view(), &v.labels, r.temperature));
    }
    model.temperature = r.temperature;
    model.calibration = Some(r);
    Ok(model.temperature)
}
