//! Discriminator network over phase-diagram points.
//!
//! The backbone is an optional convolution stage (periodic padding,
//! LeakyReLU, global mean pool per channel), an optional affine projection
//! to the hidden width, and `D` residual layers `x ↦ LeakyReLU(Wx + b) + x`.
//! A linear head produces one logit per point. Parameters are stored
//! row-major in `f64`.

mod calibration;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::divergence::RatioProvider;
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::Rng;
use crate::snapshot::Snapshot;

pub use calibration::{calibrate_temperature, calibrate_temperature_logits, CalibrationResult};
pub use train::{
    build_labelled, cross_entropy, fit_discriminator, loss_and_gradients, train, EpochLog, FitOptions, LabelledData,
    Subset, TrainConfig,
};

/// Rows per forward chunk when scoring large batches.
const FORWARD_CHUNK: usize = 4096;
pub const CHECKPOINT_FORMAT: &str = "distlearn-discriminator/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub kernels: usize,
    pub kernel_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    /// Snapshot length.
    pub sites: usize,
    /// Zero for single-basis data.
    pub basis_onehot_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
    /// Square-lattice convolution stage; requires `sites` to be a square.
    #[serde(default)]
    pub conv: Option<ConvConfig>,
}

impl MlpArchitecture {
    pub fn input_dim(&self) -> usize {
        self.sites + self.basis_onehot_dim
    }

    /// Width of the vector entering the dense part of the backbone.
    pub fn feature_dim(&self) -> usize {
        match &self.conv {
            Some(c) => c.kernels + self.basis_onehot_dim,
            None => self.input_dim(),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.feature_dim() != self.width
    }

    pub fn side(&self) -> Option<usize> {
        let side = (self.sites as f64).sqrt().round() as usize;
        (side * side == self.sites).then_some(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Invalid("depth must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        if self.sites == 0 {
            return Err(Error::Invalid("snapshots have no sites".into()));
        }
        if self.width < self.feature_dim() {
            return Err(Error::Invalid(format!(
                "width {} is smaller than the input feature dimension {}",
                self.width,
                self.feature_dim()
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Invalid(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        if let Some(c) = &self.conv {
            let side = self
                .side()
                .ok_or_else(|| Error::Invalid(format!("convolution needs a square lattice, got {} sites", self.sites)))?;
            if c.kernels == 0 || c.kernel_size == 0 || c.kernel_size > side {
                return Err(Error::Invalid(format!(
                    "convolution with {} kernels of size {} on a {side}×{side} lattice",
                    c.kernels, c.kernel_size
                )));
            }
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±1/√in_dim` for weights and biases.
    fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut d = Self::zeros(out_dim, in_dim);
        d.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        d.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        d
    }

    pub fn w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weight).expect("shape checked on construction")
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w().t());
        z += &ArrayView1::from(&self.bias[..]);
        z
    }

    fn check(&self, name: &str, out_dim: usize, in_dim: usize) -> Result<()> {
        if self.out_dim != out_dim
            || self.in_dim != in_dim
            || self.weight.len() != out_dim * in_dim
            || self.bias.len() != out_dim
        {
            return Err(Error::Invalid(format!(
                "{name}: expected {out_dim}×{in_dim} parameters, found {}×{} ({} weights, {} biases)",
                self.out_dim,
                self.in_dim,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{name} has non-finite parameters")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParameters {
    /// `kernels × kernel_size²`.
    pub conv: Option<Dense>,
    pub projection: Option<Dense>,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

impl ModelParameters {
    pub fn init(arch: &MlpArchitecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let conv = arch
            .conv
            .as_ref()
            .map(|c| Dense::init(c.kernels, c.kernel_size * c.kernel_size, rng));
        let projection = arch
            .has_projection()
            .then(|| Dense::init(arch.width, arch.feature_dim(), rng));
        let hidden = (0..arch.depth).map(|_| Dense::init(arch.width, arch.width, rng)).collect();
        let head = Dense::init(arch.n_classes, arch.width, rng);
        Ok(ModelParameters {
            conv,
            projection,
            hidden,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.out_dim, d.in_dim);
        ModelParameters {
            conv: self.conv.as_ref().map(z),
            projection: self.projection.as_ref().map(z),
            hidden: self.hidden.iter().map(z).collect(),
            head: z(&self.head),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.conv.iter().chain(&self.projection).chain(&self.hidden).chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.conv
            .iter_mut()
            .chain(&mut self.projection)
            .chain(&mut self.hidden)
            .chain(std::iter::once(&mut self.head))
    }

    /// Parameter slices in a fixed order, weights before biases per layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers().flat_map(|d| [&d.weight[..], &d.bias[..]]).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().flat_map(|d| [&mut d.weight[..], &mut d.bias[..]]).collect()
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn validate(&self, arch: &MlpArchitecture) -> Result<()> {
        arch.validate()?;
        match (&self.conv, &arch.conv) {
            (Some(d), Some(c)) => d.check("conv", c.kernels, c.kernel_size * c.kernel_size)?,
            (None, None) => {}
            _ => return Err(Error::Invalid("convolution stage does not match the architecture".into())),
        }
        match (&self.projection, arch.has_projection()) {
            (Some(d), true) => d.check("projection", arch.width, arch.feature_dim())?,
            (None, false) => {}
            _ => return Err(Error::Invalid("projection layer does not match the architecture".into())),
        }
        if self.hidden.len() != arch.depth {
            return Err(Error::Invalid(format!("{} hidden layers for depth {}", self.hidden.len(), arch.depth)));
        }
        for (k, d) in self.hidden.iter().enumerate() {
            d.check(&format!("hidden[{k}]"), arch.width, arch.width)?;
        }
        self.head.check("head", arch.n_classes, arch.width)
    }
}

pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Periodic `k × k` patches of each image: `(batch · side²) × k²`.
fn im2col(images: &ArrayView2<f64>, side: usize, k: usize) -> Array2<f64> {
    let b = images.nrows();
    let sites = side * side;
    let off = k / 2;
    let mut out = Array2::zeros((b * sites, k * k));
    for n in 0..b {
        let img = images.row(n);
        for y in 0..side {
            for x in 0..side {
                let mut row = out.row_mut(n * sites + y * side + x);
                for dy in 0..k {
                    let yy = (y + dy + side - off) % side;
                    for dx in 0..k {
                        let xx = (x + dx + side - off) % side;
                        row[dy * k + dx] = img[yy * side + xx];
                    }
                }
            }
        }
    }
    out
}

/// Intermediate values kept for backpropagation.
pub(crate) struct ForwardCache {
    pub patches: Option<Array2<f64>>,
    pub conv_pre: Option<Array2<f64>>,
    pub features: Array2<f64>,
    /// Input to each hidden layer; the last entry feeds the head.
    pub hidden_in: Vec<Array2<f64>>,
    pub hidden_pre: Vec<Array2<f64>>,
}

pub(crate) fn forward_batch(
    arch: &MlpArchitecture,
    params: &ModelParameters,
    x: &ArrayView2<f64>,
    keep: bool,
) -> (Array2<f64>, Option<ForwardCache>) {
    let slope = arch.leaky_slope;
    let (features, patches, conv_pre) = match (&arch.conv, &params.conv) {
        (Some(c), Some(d)) => {
            let side = arch.side().expect("validated square lattice");
            let sites = side * side;
            let b = x.nrows();
            let patches = im2col(&x.slice(s![.., ..arch.sites]), side, c.kernel_size);
            let pre = d.forward(&patches.view());
            let mut features = Array2::zeros((b, arch.feature_dim()));
            for n in 0..b {
                let block = pre.slice(s![n * sites..(n + 1) * sites, ..]);
                for ch in 0..c.kernels {
                    features[[n, ch]] = block.column(ch).iter().map(|&v| leaky(v, slope)).sum::<f64>() / sites as f64;
                }
            }
            features
                .slice_mut(s![.., c.kernels..])
                .assign(&x.slice(s![.., arch.sites..]));
            (features, Some(patches), Some(pre))
        }
        _ => (x.to_owned(), None, None),
    };
    let mut h = match &params.projection {
        Some(p) => p.forward(&features.view()),
        None => features.clone(),
    };
    let mut hidden_in = Vec::with_capacity(arch.depth + 1);
    let mut hidden_pre = Vec::with_capacity(arch.depth);
    for layer in &params.hidden {
        let pre = layer.forward(&h.view());
        let next = &h + &pre.mapv(|v| leaky(v, slope));
        if keep {
            hidden_in.push(std::mem::replace(&mut h, next));
            hidden_pre.push(pre);
        } else {
            h = next;
        }
    }
    let logits = params.head.forward(&h.view());
    let cache = keep.then(|| {
        hidden_in.push(h);
        ForwardCache {
            patches,
            conv_pre,
            features,
            hidden_in,
            hidden_pre,
        }
    });
    (logits, cache)
}

/// Logits of one encoded input.
pub fn forward_logits(arch: &MlpArchitecture, params: &ModelParameters, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != arch.input_dim() {
        return Err(Error::LengthMismatch {
            context: "discriminator input".into(),
            expected: arch.input_dim(),
            found: input.len(),
        });
    }
    let x = ArrayView2::from_shape((1, input.len()), input).expect("one row");
    let (logits, _) = forward_batch(arch, params, &x, false);
    let out = logits.row(0).to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits; parameters are corrupted".into()));
    }
    Ok(out)
}

/// Logits for many inputs, evaluated in chunks.
pub fn logits_batch(arch: &MlpArchitecture, params: &ModelParameters, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != arch.input_dim() {
        return Err(Error::LengthMismatch {
            context: "discriminator input batch".into(),
            expected: arch.input_dim(),
            found: x.ncols(),
        });
    }
    let mut out = Array2::zeros((x.nrows(), arch.n_classes));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + FORWARD_CHUNK).min(x.nrows());
        let (l, _) = forward_batch(arch, params, &x.slice(s![start..end, ..]), false);
        out.slice_mut(s![start..end, ..]).assign(&l);
        start = end;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits; parameters are corrupted".into()));
    }
    Ok(out)
}

/// Softmax of `logits / t`, with max subtraction.
pub fn posteriors(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("temperature {t} must be positive and finite")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

pub(crate) fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Real-valued network input: spin values followed by a basis one-hot when
/// the study has more than one basis.
pub fn encode_input(snapshot: &Snapshot, basis: &str, bases: &[String]) -> Result<Vec<f64>> {
    let pos = bases
        .iter()
        .position(|b| b == basis)
        .ok_or_else(|| Error::Invalid(format!("unknown basis `{basis}`; known {bases:?}")))?;
    let mut v: Vec<f64> = snapshot.values().iter().map(|&x| x as f64).collect();
    if bases.len() > 1 {
        v.extend((0..bases.len()).map(|k| if k == pos { 1.0 } else { 0.0 }));
    }
    Ok(v)
}

pub(crate) fn encode_batch(snapshots: &[Snapshot], basis: &str, bases: &[String]) -> Result<Array2<f64>> {
    let first = snapshots.first().ok_or_else(|| Error::EmptyEnsemble("encode batch".into()))?;
    let dim = first.len() + if bases.len() > 1 { bases.len() } else { 0 };
    let mut out = Array2::zeros((snapshots.len(), dim));
    for (r, s) in snapshots.iter().enumerate() {
        let v = encode_input(s, basis, bases)?;
        if v.len() != dim {
            return Err(Error::LengthMismatch {
                context: "snapshot batch".into(),
                expected: dim,
                found: v.len(),
            });
        }
        out.row_mut(r).assign(&ArrayView1::from(&v[..]));
    }
    Ok(out)
}

/// A trained, calibrated discriminator and its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedDiscriminator {
    pub format: String,
    pub architecture: MlpArchitecture,
    pub params: ModelParameters,
    pub temperature: f64,
    /// Point id of each class, in logit order.
    pub class_ids: Vec<usize>,
    /// Empirical class fractions of the training subset.
    pub class_priors: Vec<f64>,
    pub bases: Vec<String>,
    pub train_config: TrainConfig,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub calibration: Option<CalibrationResult>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl TrainedDiscriminator {
    pub fn class_index(&self, point_id: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == point_id)
            .ok_or_else(|| Error::Invalid(format!("point {point_id} is not a discriminator class")))
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward_logits(&self.architecture, &self.params, input)
    }

    /// Calibrated log posterior ratio `(l_j − l_i) / T` between points `i`
    /// and `j`, computed from logits directly.
    pub fn log_posterior_ratio(&self, input: &[f64], i: usize, j: usize) -> Result<f64> {
        if i == j {
            return Err(Error::Invalid(format!("log ratio of point {i} with itself")));
        }
        let (ci, cj) = (self.class_index(i)?, self.class_index(j)?);
        let l = self.logits(input)?;
        Ok((l[cj] - l[ci]) / self.temperature)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = fsio::read_json(path)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!("{}: unsupported format `{}`", path.display(), m.format)));
        }
        m.params.validate(&m.architecture)?;
        if !(m.temperature > 0.0) {
            return Err(Error::Invalid(format!("{}: temperature {} ≤ 0", path.display(), m.temperature)));
        }
        Ok(m)
    }
}

impl RatioProvider for TrainedDiscriminator {
    fn describe(&self) -> String {
        format!(
            "nn(depth={}, width={}, conv={}, T_cal={:.4})",
            self.architecture.depth,
            self.architecture.width,
            self.architecture.conv.is_some(),
            self.temperature
        )
    }

    /// `l_k / T − ln π_k`: the calibrated logit with the training prior removed.
    fn log_scores(&self, snapshots: &[Snapshot], basis: &str, points: &[usize]) -> Result<Array2<f64>> {
        let cols: Vec<usize> = points.iter().map(|&p| self.class_index(p)).collect::<Result<_>>()?;
        let x = encode_batch(snapshots, basis, &self.bases)?;
        let logits = logits_batch(&self.architecture, &self.params, &x.view())?;
        let mut out = Array2::zeros((snapshots.len(), cols.len()));
        for (c, &k) in cols.iter().enumerate() {
            let shift = self.class_priors[k].ln();
            out.column_mut(c)
                .assign(&logits.column(k).mapv(|l| l / self.temperature - shift));
        }
        Ok(out)
    }
}

pub(crate) fn argmax(row: ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
        .0
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn arch(sites: usize, depth: usize, width: usize, classes: usize) -> MlpArchitecture {
        MlpArchitecture {
            sites,
            basis_onehot_dim: 0,
            depth,
            width,
            n_classes: classes,
            leaky_slope: 0.01,
            conv: None,
        }
    }

    #[test]
    fn encode_examples() {
        let s = Snapshot(vec![1, -1]);
        assert_eq!(encode_input(&s, "x", &["x".into()]).unwrap(), vec![1.0, -1.0]);
        let bases = vec!["x".to_string(), "z".to_string()];
        assert_eq!(encode_input(&s, "z", &bases).unwrap(), vec![1.0, -1.0, 0.0, 1.0]);
        assert_eq!(encode_input(&Snapshot(vec![2]), "x", &["x".into()]).unwrap(), vec![2.0]);
        assert!(encode_input(&s, "y", &bases).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_posteriors() {
        let a = arch(3, 2, 4, 3);
        let mut p = ModelParameters::init(&a, &mut rng_from_seed(1)).unwrap();
        p.head = Dense::zeros(3, 4);
        let l = forward_logits(&a, &p, &[1.0, -1.0, 1.0]).unwrap();
        assert_eq!(l, vec![0.0; 3]);
        let post = posteriors(&l, 1.0).unwrap();
        assert!(post.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_residual_layer_doubles_nonnegative_input() {
        let a = arch(2, 1, 2, 2);
        let mut p = ModelParameters::init(&a, &mut rng_from_seed(2)).unwrap();
        assert!(p.projection.is_none());
        p.hidden[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        p.hidden[0].bias = vec![0.0, 0.0];
        p.head.weight = vec![1.0, 0.0, 0.0, 1.0];
        p.head.bias = vec![0.0, 0.0];
        let l = forward_logits(&a, &p, &[0.5, 3.0]).unwrap();
        assert_eq!(l, vec![1.0, 6.0]);
        // negative inputs pass through LeakyReLU with slope 0.01
        let l = forward_logits(&a, &p, &[-1.0, 0.0]).unwrap();
        assert!((l[0] - (-1.01)).abs() < 1e-15);
    }

    #[test]
    fn head_row_permutation_permutes_logits() {
        let a = arch(3, 2, 5, 3);
        let p = ModelParameters::init(&a, &mut rng_from_seed(3)).unwrap();
        let mut q = p.clone();
        let perm = [2usize, 0, 1];
        for (new, &old) in perm.iter().enumerate() {
            q.head.weight[new * 5..(new + 1) * 5].copy_from_slice(&p.head.weight[old * 5..(old + 1) * 5]);
            q.head.bias[new] = p.head.bias[old];
        }
        let x = [1.0, -1.0, -1.0];
        let lp = forward_logits(&a, &p, &x).unwrap();
        let lq = forward_logits(&a, &q, &x).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(lq[new], lp[old]);
        }
    }

    #[test]
    fn posterior_examples() {
        let p = posteriors(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = posteriors(&[0.5, -0.3, 1.0], 1e9).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-9));
        let p = posteriors(&[1000.0, -1000.0, 0.0], 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p[0] == 1.0);
        assert!(posteriors(&[0.0], 0.0).is_err());
    }

    #[test]
    fn conv_stage_is_translation_invariant() {
        let a = MlpArchitecture {
            sites: 16,
            basis_onehot_dim: 0,
            depth: 1,
            width: 6,
            n_classes: 2,
            leaky_slope: 0.01,
            conv: Some(ConvConfig { kernels: 3, kernel_size: 3 }),
        };
        let p = ModelParameters::init(&a, &mut rng_from_seed(4)).unwrap();
        let img: Vec<f64> = (0..16).map(|k| if (k * 7) % 5 < 2 { 1.0 } else { -1.0 }).collect();
        let shifted: Vec<f64> = (0..16).map(|k| img[(k / 4) * 4 + (k % 4 + 1) % 4]).collect();
        let l1 = forward_logits(&a, &p, &img).unwrap();
        let l2 = forward_logits(&a, &p, &shifted).unwrap();
        for (x, y) in l1.iter().zip(&l2) {
            assert!((x - y).abs() < 1e-12);
        }
        let bad = MlpArchitecture { sites: 15, ..a };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn architecture_validation() {
        assert!(arch(3, 0, 4, 2).validate().is_err());
        assert!(arch(3, 1, 4, 1).validate().is_err());
        assert!(arch(8, 1, 4, 2).validate().is_err());
        let a = arch(3, 2, 8, 2);
        assert!(a.has_projection());
        let p = ModelParameters::init(&a, &mut rng_from_seed(5)).unwrap();
        p.validate(&a).unwrap();
        let mut bad = p.clone();
        bad.head.bias.pop();
        assert!(bad.validate(&a).is_err());
        let mut nan = p;
        nan.hidden[0].weight[0] = f64::NAN;
        assert!(nan.validate(&a).is_err());
    }
}
