//! Cross-entropy training with Adam and early stopping.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    argmax, calibrate_temperature, encode_input, forward_batch, leaky_grad, log_sum_exp, logits_batch, ConvConfig,
    Dense, MlpArchitecture, ModelParameters, TrainedDiscriminator, CHECKPOINT_FORMAT,
};
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::{derive_seed_str, rng_from_seed};
use crate::snapshot::{DatasetSplit, SnapshotEnsemble};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Invalid(format!("training settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Encoded inputs with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledData {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabelledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (self.inputs.select(Axis(0), idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    TrainProperTrain,
    TrainProperVal,
    CalibTrain,
    CalibVal,
    /// Train-proper-val together with calib-val.
    Evaluation,
}

impl Subset {
    pub fn indices(self, split: &DatasetSplit) -> Vec<usize> {
        match self {
            Subset::TrainProperTrain => split.train_proper_train.clone(),
            Subset::TrainProperVal => split.train_proper_val.clone(),
            Subset::CalibTrain => split.calib_train.clone(),
            Subset::CalibVal => split.calib_val.clone(),
            Subset::Evaluation => split.evaluation(),
        }
    }
}

/// One labelled row per selected snapshot; the label is the position of the
/// ensemble's point id in `class_ids`.
pub fn build_labelled(
    ensembles: &[SnapshotEnsemble],
    splits: &[DatasetSplit],
    subset: Subset,
    class_ids: &[usize],
    bases: &[String],
) -> Result<LabelledData> {
    if ensembles.len() != splits.len() {
        return Err(Error::LengthMismatch {
            context: "ensembles and splits".into(),
            expected: ensembles.len(),
            found: splits.len(),
        });
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (e, sp) in ensembles.iter().zip(splits) {
        let class = class_ids
            .iter()
            .position(|&c| c == e.point.id)
            .ok_or_else(|| Error::Invalid(format!("point {} is not a class", e.point.id)))?;
        for i in subset.indices(sp) {
            let s = e
                .snapshots
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("split index {i} outside ensemble of {}", e.count())))?;
            rows.push(encode_input(s, &e.basis, bases)?);
            labels.push(class);
        }
    }
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let inputs = Array2::from_shape_vec((labels.len(), dim), flat)
        .map_err(|e| Error::Invalid(format!("ragged snapshot rows: {e}")))?;
    Ok(LabelledData { inputs, labels })
}

/// Mean negative log posterior of the true class at temperature `t`.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row.iter().map(|v| v / t)) - row[y] / t)
        .sum();
    total / labels.len() as f64
}

fn set_dense_grad(g: &mut Dense, dout: &Array2<f64>, input: &ArrayView2<f64>) {
    let gw = dout.t().dot(input);
    g.weight = gw.iter().copied().collect();
    g.bias = dout.sum_axis(Axis(0)).to_vec();
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// parameter.
pub fn loss_and_gradients(
    arch: &MlpArchitecture,
    params: &ModelParameters,
    x: &ArrayView2<f64>,
    labels: &[usize],
) -> (f64, ModelParameters) {
    let slope = arch.leaky_slope;
    let (mut dlogits, cache) = forward_batch(arch, params, x, true);
    let cache = cache.expect("cache requested");
    let b = x.nrows() as f64;
    let mut loss = 0.0;
    for (mut row, &y) in dlogits.rows_mut().into_iter().zip(labels) {
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp() / b);
        row[y] -= 1.0 / b;
    }
    loss /= b;

    let mut g = params.zeros_like();
    let last = cache.hidden_in.last().expect("head input");
    set_dense_grad(&mut g.head, &dlogits, &last.view());
    let mut dh = dlogits.dot(&params.head.w());
    for l in (0..arch.depth).rev() {
        let mut dpre = dh.clone();
        Zip::from(&mut dpre)
            .and(&cache.hidden_pre[l])
            .for_each(|d, &p| *d *= leaky_grad(p, slope));
        set_dense_grad(&mut g.hidden[l], &dpre, &cache.hidden_in[l].view());
        dh += &dpre.dot(&params.hidden[l].w());
    }
    let dfeat = match (&params.projection, g.projection.as_mut()) {
        (Some(p), Some(gp)) => {
            set_dense_grad(gp, &dh, &cache.features.view());
            dh.dot(&p.w())
        }
        _ => dh,
    };
    if let (Some(c), Some(gc), Some(pre), Some(patches)) =
        (&arch.conv, g.conv.as_mut(), &cache.conv_pre, &cache.patches)
    {
        let sites = arch.sites;
        let mut dpre = Array2::zeros(pre.dim());
        for n in 0..x.nrows() {
            for pos in 0..sites {
                let r = n * sites + pos;
                for ch in 0..c.kernels {
                    dpre[[r, ch]] = dfeat[[n, ch]] / sites as f64 * leaky_grad(pre[[r, ch]], slope);
                }
            }
        }
        set_dense_grad(gc, &dpre, &patches.view());
    }
    (loss, g)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParameters) -> Self {
        let z: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Adam {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn evaluate(arch: &MlpArchitecture, params: &ModelParameters, data: &LabelledData) -> Result<(f64, f64)> {
    let logits = logits_batch(arch, params, &data.inputs.view())?;
    let loss = cross_entropy(&logits.view(), &data.labels, 1.0);
    let correct = logits
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(r, &y)| argmax(r.view()) == y)
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

#[derive(Serialize)]
struct EpochCheckpoint<'a> {
    epoch: usize,
    val_loss: f64,
    params: &'a ModelParameters,
}

/// Trains from a fresh seeded initialization and returns the parameters of
/// the epoch with the lowest validation loss. `T_cal` is left at 1.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_data: &LabelledData,
    val_data: &LabelledData,
    arch: &MlpArchitecture,
    cfg: &TrainConfig,
    class_ids: &[usize],
    bases: &[String],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedDiscriminator> {
    cfg.validate()?;
    arch.validate()?;
    if class_ids.len() != arch.n_classes {
        return Err(Error::Invalid(format!("{} class ids for {} classes", class_ids.len(), arch.n_classes)));
    }
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::EmptyEnsemble("training or validation subset".into()));
    }
    for d in [train_data, val_data] {
        if d.inputs.ncols() != arch.input_dim() {
            return Err(Error::LengthMismatch {
                context: "training inputs".into(),
                expected: arch.input_dim(),
                found: d.inputs.ncols(),
            });
        }
    }
    let present: BTreeSet<usize> = train_data.labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(Error::Invalid("training subset contains fewer than two classes".into()));
    }
    let mut counts = vec![0usize; arch.n_classes];
    for &y in &train_data.labels {
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("class of point {} has no training snapshots", class_ids[k])));
    }
    let class_priors: Vec<f64> = counts.iter().map(|&c| c as f64 / train_data.len() as f64).collect();

    let mut params = ModelParameters::init(arch, &mut rng_from_seed(derive_seed_str(cfg.seed, "init")))?;
    let mut shuffle_rng = rng_from_seed(derive_seed_str(cfg.seed, "shuffle"));
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_data.rows(batch);
            let (loss, grads) = loss_and_gradients(arch, &params, &x.view(), &y);
            if !loss.is_finite() {
                return Err(Error::Divergent {
                    epoch,
                    message: format!("batch loss {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam.update(&mut params, &grads, cfg.learning_rate);
        }
        let train_loss = loss_sum / train_data.len() as f64;
        let (val_loss, val_accuracy) = evaluate(arch, &params, val_data).map_err(|e| Error::Divergent {
            epoch,
            message: e.to_string(),
        })?;
        if !val_loss.is_finite() {
            return Err(Error::Divergent {
                epoch,
                message: format!("validation loss {val_loss}"),
            });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} acc {val_accuracy:.4}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if let Some(dir) = checkpoint_dir {
            fsio::write_json(
                &dir.join(format!("epoch_{epoch:04}.json")),
                &EpochCheckpoint {
                    epoch,
                    val_loss,
                    params: &params,
                },
            )?;
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainedDiscriminator {
        format: CHECKPOINT_FORMAT.into(),
        architecture: arch.clone(),
        params: best.2,
        temperature: 1.0,
        class_ids: class_ids.to_vec(),
        class_priors,
        bases: bases.to_vec(),
        train_config: cfg.clone(),
        log,
        best_epoch: best.1,
        calibration: None,
        metadata: Default::default(),
    })
}

/// Architecture and training settings for [`fit_discriminator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub depth: usize,
    pub width: usize,
    pub leaky_slope: f64,
    pub conv: Option<ConvConfig>,
    pub train: TrainConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            depth: 4,
            width: 128,
            leaky_slope: 0.01,
            conv: None,
            train: TrainConfig::default(),
        }
    }
}

/// Builds the labelled subsets, trains, and calibrates the temperature on
/// calib-train.
///
/// Classes are the sorted point ids; bases are sorted labels. A calibration
/// that cannot bracket a minimum leaves `T_cal = 1` and records the failure
/// in the model metadata.
pub fn fit_discriminator(
    ensembles: &[SnapshotEnsemble],
    splits: &[DatasetSplit],
    opts: &FitOptions,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedDiscriminator> {
    let class_ids: Vec<usize> = ensembles
        .iter()
        .map(|e| e.point.id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let bases: Vec<String> = ensembles
        .iter()
        .map(|e| e.basis.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let sites = ensembles
        .first()
        .ok_or_else(|| Error::EmptyEnsemble("discriminator dataset".into()))?
        .sites();
    let arch = MlpArchitecture {
        sites,
        basis_onehot_dim: if bases.len() > 1 { bases.len() } else { 0 },
        depth: opts.depth,
        width: opts.width,
        n_classes: class_ids.len(),
        leaky_slope: opts.leaky_slope,
        conv: opts.conv.clone(),
    };
    let data = |s| build_labelled(ensembles, splits, s, &class_ids, &bases);
    let train_data = data(Subset::TrainProperTrain)?;
    let val_data = data(Subset::TrainProperVal)?;
    let mut model = train(&train_data, &val_data, &arch, &opts.train, &class_ids, &bases, checkpoint_dir)?;
    let calib = data(Subset::CalibTrain)?;
    let calib_val = data(Subset::CalibVal)?;
    match calibrate_temperature(&mut model, &calib, Some(&calib_val)) {
        Ok(_) => {}
        Err(Error::Bracketing { profile }) => {
            log::warn!("temperature calibration could not bracket a minimum; keeping T = 1");
            model.metadata.insert(
                "calibration_failure".into(),
                serde_json::to_value(&profile).expect("pairs serialize"),
            );
        }
        Err(e) => return Err(e),
    }
    Ok(model)
}
