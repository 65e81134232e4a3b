//! Transverse-field Ising chain, `H = -J Σ σˣσˣ - h_z Σ σᶻ`, open boundary.
//!
//! Ground states are computed in the σˣ product basis, where the Hamiltonian
//! is stoquastic: the coupling is diagonal and the field flips single sites
//! with amplitude `-h_z`. The ground state is therefore real and can be
//! gauge-fixed nonnegative. Small chains use a dense symmetric eigensolve,
//! longer ones a restarted Lanczos iteration on the sparse operator.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{decode_config, sample_table};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::snapshot::{ParameterPoint, Snapshot, SnapshotEnsemble};

/// Chains up to this length are diagonalized densely.
pub const DENSE_MAX_SITES: usize = 8;
pub const MAX_SITES: usize = 16;
const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfimSpec {
    pub l: usize,
    pub j: f64,
    pub hz: f64,
}

impl TfimSpec {
    pub fn new(l: usize, j: f64, hz: f64) -> Result<Self> {
        let s = TfimSpec { l, j, hz };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SITES).contains(&self.l) {
            return Err(Error::Invalid(format!("TFIM chain length {} outside 2..={MAX_SITES}", self.l)));
        }
        if !(self.j > 0.0) {
            return Err(Error::Invalid(format!("coupling J = {} must be positive", self.j)));
        }
        if !(self.hz >= 0.0) || !self.hz.is_finite() {
            return Err(Error::Invalid(format!("field h_z = {} must be finite and nonnegative", self.hz)));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        1 << self.l
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|c| {
                let bonds: i32 = (0..self.l - 1)
                    .map(|k| if ((c >> k) ^ (c >> (k + 1))) & 1 == 0 { 1 } else { -1 })
                    .sum();
                -self.j * bonds as f64
            })
            .collect()
    }

    fn apply(&self, diag: &[f64], v: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = diag[c] * v[c];
            let mut flips = 0.0;
            for k in 0..self.l {
                flips += v[c ^ (1 << k)];
            }
            acc -= self.hz * flips;
            *o = acc;
        }
    }
}

/// Ground-state amplitudes indexed by σˣ configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveFunctionTable {
    pub sites: usize,
    pub amplitudes: Vec<f64>,
    pub energy: f64,
    /// `‖Hψ − Eψ‖` of the returned state.
    pub residual: f64,
}

impl WaveFunctionTable {
    /// Born probabilities `ψ(x)²`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a * a).collect()
    }

    /// `⟨σˣ_site⟩` under the Born distribution.
    pub fn mean_spin(&self, site: usize) -> f64 {
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(c, a)| a * a * if c >> site & 1 == 1 { -1.0 } else { 1.0 })
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != 1 << self.sites {
            return Err(Error::LengthMismatch {
                context: "wave-function table".into(),
                expected: 1 << self.sites,
                found: self.amplitudes.len(),
            });
        }
        let norm: f64 = self.amplitudes.iter().map(|a| a * a).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Invalid(format!("wave function norm {norm} != 1")));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Projects onto the sector even under a global spin flip.
fn symmetrize(v: &mut [f64]) {
    let mask = v.len() - 1;
    for c in 0..v.len() {
        let d = c ^ mask;
        if c < d {
            let m = 0.5 * (v[c] + v[d]);
            v[c] = m;
            v[d] = m;
        }
    }
}

fn residual(spec: &TfimSpec, diag: &[f64], v: &[f64]) -> (f64, f64) {
    let mut hv = vec![0.0; v.len()];
    spec.apply(diag, v, &mut hv);
    let e = dot(v, &hv);
    let r = hv.iter().zip(v).map(|(h, x)| (h - e * x).powi(2)).sum::<f64>().sqrt();
    (e, r)
}

fn dense_ground_state(spec: &TfimSpec, diag: &[f64]) -> Result<Vec<f64>> {
    let dim = spec.dim();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for c in 0..dim {
        h[(c, c)] = diag[c];
        for k in 0..spec.l {
            h[(c, c ^ (1 << k))] -= spec.hz;
        }
    }
    let eig = SymmetricEigen::new(h);
    let e0 = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * e0.abs().max(1.0);
    // Degenerate ground space (h_z = 0): take the projection of the uniform
    // state, the h_z → 0⁺ limit.
    let uniform = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut psi = vec![0.0; dim];
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev - e0 <= tol {
            let col = eig.eigenvectors.column(k);
            let overlap: f64 = col.iter().zip(&uniform).map(|(a, b)| a * b).sum();
            for (p, a) in psi.iter_mut().zip(col.iter()) {
                *p += overlap * a;
            }
        }
    }
    if normalize(&mut psi) < 1e-12 {
        return Err(Error::NoConvergence("ground space orthogonal to the uniform state".into()));
    }
    Ok(psi)
}

fn lanczos_ground_state(spec: &TfimSpec, diag: &[f64]) -> Result<Vec<f64>> {
    let dim = spec.dim();
    let krylov = dim.min(120);
    let mut start = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut last_res = f64::INFINITY;
    for _restart in 0..60 {
        let mut basis: Vec<Vec<f64>> = vec![start.clone()];
        let mut alphas = Vec::with_capacity(krylov);
        let mut betas: Vec<f64> = Vec::with_capacity(krylov);
        let mut w = vec![0.0; dim];
        for k in 0..krylov {
            spec.apply(diag, &basis[k], &mut w);
            let a = dot(&basis[k], &w);
            alphas.push(a);
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(b, &w);
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let beta = dot(&w, &w).sqrt();
            if beta < 1e-12 || k + 1 == krylov {
                break;
            }
            betas.push(beta);
            basis.push(w.iter().map(|x| x / beta).collect());
        }
        let m = alphas.len();
        let mut t = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            t[(i, i)] = alphas[i];
            if i + 1 < m {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let (kmin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let y = eig.eigenvectors.column(kmin);
        let mut psi = vec![0.0; dim];
        for (coef, b) in y.iter().zip(&basis) {
            psi.iter_mut().zip(b).for_each(|(p, x)| *p += coef * x);
        }
        symmetrize(&mut psi);
        normalize(&mut psi);
        let (_, res) = residual(spec, diag, &psi);
        if res <= RESIDUAL_TOL {
            return Ok(psi);
        }
        last_res = res;
        start = psi;
    }
    Err(Error::NoConvergence(format!(
        "Lanczos residual {last_res:e} above {RESIDUAL_TOL:e} for L = {}, h_z = {}",
        spec.l, spec.hz
    )))
}

/// Ground state of the chain in the σˣ basis, gauge-fixed nonnegative.
pub fn tfim_ground_state(spec: &TfimSpec) -> Result<WaveFunctionTable> {
    spec.validate()?;
    let diag = spec.diagonal();
    let mut psi = if spec.l <= DENSE_MAX_SITES {
        dense_ground_state(spec, &diag)?
    } else {
        lanczos_ground_state(spec, &diag)?
    };
    if psi.iter().sum::<f64>() < 0.0 {
        psi.iter_mut().for_each(|x| *x = -*x);
    }
    if let Some(&neg) = psi.iter().find(|&&x| x < -1e-8) {
        return Err(Error::Numerical(format!(
            "ground state has a negative amplitude {neg:e} after gauge fixing"
        )));
    }
    psi.iter_mut().for_each(|x| *x = x.max(0.0));
    normalize(&mut psi);
    let (energy, res) = residual(spec, &diag, &psi);
    if res > 1e-8 {
        return Err(Error::NoConvergence(format!("residual {res:e} exceeds 1e-8")));
    }
    Ok(WaveFunctionTable {
        sites: spec.l,
        amplitudes: psi,
        energy,
        residual: res,
    })
}

/// Draws `n` σˣ snapshots with probability `ψ(x)²`.
pub fn born_sample(psi: &WaveFunctionTable, point: ParameterPoint, n: usize, seed: u64) -> Result<SnapshotEnsemble> {
    psi.validate()?;
    let mut rng = rng_from_seed(seed);
    let idx = sample_table(&psi.probabilities(), n, &mut rng)?;
    let snaps = idx.into_iter().map(|c| Snapshot(decode_config(c, psi.sites))).collect();
    SnapshotEnsemble::new(point, "x", snaps)
}

/// Squared Hellinger divergence between the Born distributions,
/// `Σ(|ψ₁| − |ψ₂|)² = 2(1 − Σ|ψ₁||ψ₂|)`.
pub fn exact_hellinger_tfim(a: &WaveFunctionTable, b: &WaveFunctionTable) -> Result<f64> {
    if a.amplitudes.len() != b.amplitudes.len() {
        return Err(Error::LengthMismatch {
            context: "wave-function tables".into(),
            expected: a.amplitudes.len(),
            found: b.amplitudes.len(),
        });
    }
    let overlap: f64 = a.amplitudes.iter().zip(&b.amplitudes).map(|(x, y)| x.abs() * y.abs()).sum();
    Ok((2.0 * (1.0 - overlap)).clamp(0.0, 2.0))
}
