//! Divergence susceptibility, Fisher information and finite-size scaling.
//!
//! On a uniform grid the susceptibility is read off the superdiagonal of a
//! distance matrix, `χ = D_{i,i+1} / Δη²`, and assigned to the midpoint of
//! the two grid points. Fisher information follows as `I = 2χ / f″(1)`.
//!
//! Collapse quality is the fraction of variance of the rescaled points left
//! unexplained by a least-squares cubic B-spline master curve, evaluated on
//! the overlap of the rescaled supports of all sizes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{DistanceMatrix, FDivergenceKind};
use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::{derive_seed, rng_from_seed};

const GRID_TOLERANCE: f64 = 1e-9;
const NU_MIN: f64 = 0.05;
const NU_MAX: f64 = 20.0;
/// Minimum rescaled points of one size inside the overlap window.
const MIN_POINTS_PER_SIZE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityCurve {
    pub kind: FDivergenceKind,
    /// Linear system size.
    pub l: usize,
    /// Spatial dimension.
    pub d: usize,
    /// Grid spacing of the underlying matrix.
    pub delta: f64,
    /// Midpoints of adjacent grid points.
    pub eta: Vec<f64>,
    pub chi: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl SusceptibilityCurve {
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Midpoint with the largest `χ`.
    pub fn peak(&self) -> Option<(f64, f64)> {
        self.eta
            .iter()
            .zip(&self.chi)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(&e, &c)| (e, c))
    }

    pub fn volume(&self) -> f64 {
        (self.l as f64).powi(self.d as i32)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eta,chi,stderr\n");
        for i in 0..self.len() {
            s.push_str(&format!("{},{},{}\n", self.eta[i], self.chi[i], self.stderr[i]));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }

    fn validate(&self) -> Result<()> {
        if self.chi.len() != self.len() || self.stderr.len() != self.len() {
            return Err(Error::LengthMismatch {
                context: format!("susceptibility curve L={}", self.l),
                expected: self.len(),
                found: self.chi.len().min(self.stderr.len()),
            });
        }
        if self.l == 0 || self.d == 0 {
            return Err(Error::Invalid("curve needs L ≥ 1 and d ≥ 1".into()));
        }
        Ok(())
    }
}

/// Checks that `grid` is strictly increasing with constant spacing.
pub fn uniform_spacing(grid: &[f64]) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::Invalid("grid needs at least two points".into()));
    }
    let delta = grid[1] - grid[0];
    let scale = grid.iter().fold(delta.abs(), |m, g| m.max(g.abs()));
    for (i, w) in grid.windows(2).enumerate() {
        let step = w[1] - w[0];
        if !(step > 0.0) || (step - delta).abs() > GRID_TOLERANCE * scale {
            return Err(Error::Invalid(format!(
                "grid is not uniform: step {step} at index {i}, expected {delta}"
            )));
        }
    }
    Ok(delta)
}

/// `χ(η_i + Δη/2) = D_{i,i+1} / Δη²` along the superdiagonal.
pub fn susceptibility_from_matrix(
    m: &DistanceMatrix,
    grid: &[f64],
    l: usize,
    d: usize,
) -> Result<SusceptibilityCurve> {
    if grid.len() != m.len() {
        return Err(Error::LengthMismatch {
            context: "susceptibility grid".into(),
            expected: m.len(),
            found: grid.len(),
        });
    }
    let delta = uniform_spacing(grid)?;
    let h2 = delta * delta;
    let n = grid.len();
    let curve = SusceptibilityCurve {
        kind: m.kind,
        l,
        d,
        delta,
        eta: (0..n - 1).map(|i| 0.5 * (grid[i] + grid[i + 1])).collect(),
        chi: (0..n - 1).map(|i| m.values[i][i + 1].max(0.0) / h2).collect(),
        stderr: (0..n - 1).map(|i| m.stderrs[i][i + 1] / h2).collect(),
    };
    curve.validate()?;
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherCurve {
    pub l: usize,
    pub d: usize,
    pub eta: Vec<f64>,
    pub fisher: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// `I(η) = 2 χ(η) / f″(1)`.
pub fn fisher_from_susceptibility(curve: &SusceptibilityCurve) -> Result<FisherCurve> {
    let f2 = curve.kind.second_derivative_at_one().ok_or_else(|| {
        Error::Domain(format!("{} has no finite second derivative at 1", curve.kind.name()))
    })?;
    let s = 2.0 / f2;
    Ok(FisherCurve {
        l: curve.l,
        d: curve.d,
        eta: curve.eta.clone(),
        fisher: curve.chi.iter().map(|c| s * c).collect(),
        stderr: curve.stderr.iter().map(|c| s * c).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollapseForm {
    /// `χ/L^d = L^{α_F/ν} f((η − η_c) L^{1/ν})`
    Powerlaw,
    /// `χ/L^d = a ln L + g((η − η_c) L^{1/ν})`
    Log,
}

impl std::str::FromStr for CollapseForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "powerlaw" => Ok(CollapseForm::Powerlaw),
            "log" => Ok(CollapseForm::Log),
            other => Err(Error::Invalid(format!("unknown collapse form `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub eta_c: f64,
    pub nu: f64,
    /// Used by the power-law form.
    pub alpha_f: f64,
    /// Used by the logarithmic form.
    pub a: f64,
}

impl ScalingParams {
    pub fn new(eta_c: f64, nu: f64, alpha_f: f64, a: f64) -> Self {
        ScalingParams { eta_c, nu, alpha_f, a }
    }
}

/// Parameters held fixed during a fit. `ratio` pins `α_F/ν`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedParams {
    pub eta_c: Option<f64>,
    pub nu: Option<f64>,
    pub alpha_f: Option<f64>,
    pub ratio: Option<f64>,
    pub a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub knots: usize,
    pub starts: usize,
    pub tolerance: f64,
    pub max_evaluations: usize,
    pub seed: u64,
    pub fixed: FixedParams,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            knots: 8,
            starts: 5,
            tolerance: 1e-6,
            max_evaluations: 3000,
            seed: 0,
            fixed: FixedParams::default(),
        }
    }
}

/// Restriction of the data used for one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangePair {
    pub eta: (f64, f64),
    pub sizes: Vec<usize>,
}

struct Point {
    size: usize,
    eta: f64,
    /// `χ / L^d`
    density: f64,
}

fn collect_points(curves: &[SusceptibilityCurve], range: Option<&RangePair>) -> Result<Vec<Point>> {
    let mut pts = Vec::new();
    let mut sizes = Vec::new();
    for c in curves {
        c.validate()?;
        if let Some(r) = range {
            if !r.sizes.contains(&c.l) {
                continue;
            }
        }
        if sizes.contains(&c.l) {
            return Err(Error::Invalid(format!("two curves for L = {}", c.l)));
        }
        sizes.push(c.l);
        let v = c.volume();
        for i in 0..c.len() {
            if range.is_none_or(|r| c.eta[i] >= r.eta.0 && c.eta[i] <= r.eta.1) {
                pts.push(Point {
                    size: c.l,
                    eta: c.eta[i],
                    density: c.chi[i] / v,
                });
            }
        }
    }
    if sizes.len() < 3 {
        return Err(Error::Invalid(format!("collapse needs at least 3 sizes, got {}", sizes.len())));
    }
    Ok(pts)
}

fn cubic_bspline(u: f64) -> f64 {
    if !(0.0..4.0).contains(&u) {
        0.0
    } else if u < 1.0 {
        u * u * u / 6.0
    } else if u < 2.0 {
        (-3.0 * u * u * u + 12.0 * u * u - 12.0 * u + 4.0) / 6.0
    } else if u < 3.0 {
        (3.0 * u * u * u - 24.0 * u * u + 60.0 * u - 44.0) / 6.0
    } else {
        (4.0 - u).powi(3) / 6.0
    }
}

/// Unexplained variance fraction of a least-squares cubic spline with
/// `knots` uniform interior knots on `[lo, hi]`.
fn spline_residual(xs: &[f64], ys: &[f64], lo: f64, hi: f64, knots: usize) -> Option<f64> {
    let nb = knots + 4;
    let h = (hi - lo) / (knots + 1) as f64;
    if !(h > 0.0) {
        return None;
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let total: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let scale: f64 = ys.iter().map(|y| y * y).sum();
    if total <= 1e-24 * scale.max(f64::MIN_POSITIVE) {
        return Some(0.0);
    }
    let mut ata = DMatrix::<f64>::zeros(nb, nb);
    let mut aty = DVector::<f64>::zeros(nb);
    let mut rows = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(ys) {
        let u = (x - lo) / h;
        let first = (u.floor() as isize).clamp(0, knots as isize) as usize;
        let mut row = [(0usize, 0.0f64); 4];
        for (k, slot) in row.iter_mut().enumerate() {
            let j = first + k;
            *slot = (j, cubic_bspline(u - j as f64 + 3.0));
        }
        for &(j, bj) in &row {
            aty[j] += bj * y;
            for &(k, bk) in &row {
                ata[(j, k)] += bj * bk;
            }
        }
        rows.push(row);
    }
    let ridge = 1e-10 * ata.trace() / nb as f64;
    for j in 0..nb {
        ata[(j, j)] += ridge;
    }
    let coef = ata.cholesky()?.solve(&aty);
    let sse: f64 = rows
        .iter()
        .zip(ys)
        .map(|(row, y)| {
            let fit: f64 = row.iter().map(|&(j, b)| coef[j] * b).sum();
            (y - fit).powi(2)
        })
        .sum();
    Some((sse / total).min(1.0))
}

enum Collapse {
    Value(f64),
    /// Rescaled supports do not overlap well enough; carries a violation size.
    NoOverlap(f64),
}

fn evaluate(points: &[Point], form: CollapseForm, p: &ScalingParams, knots: usize) -> Collapse {
    let mut sizes: Vec<usize> = points.iter().map(|q| q.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let xs: Vec<f64> = points
        .iter()
        .map(|q| (q.eta - p.eta_c) * (q.size as f64).powf(1.0 / p.nu))
        .collect();
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for &s in &sizes {
        let (mn, mx) = points
            .iter()
            .zip(&xs)
            .filter(|(q, _)| q.size == s)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, &x)| (a.min(x), b.max(x)));
        lo = lo.max(mn);
        hi = hi.min(mx);
    }
    if !(hi > lo) {
        return Collapse::NoOverlap(lo - hi);
    }
    let mut sx = Vec::new();
    let mut sy = Vec::new();
    let mut counts = vec![0usize; sizes.len()];
    for (q, &x) in points.iter().zip(&xs) {
        if x >= lo && x <= hi {
            let l = q.size as f64;
            let y = match form {
                CollapseForm::Powerlaw => q.density * l.powf(-p.alpha_f / p.nu),
                CollapseForm::Log => q.density - p.a * l.ln(),
            };
            sx.push(x);
            sy.push(y);
            counts[sizes.binary_search(&q.size).expect("listed")] += 1;
        }
    }
    let short = counts.iter().filter(|&&c| c < MIN_POINTS_PER_SIZE).count();
    if short > 0 || sx.len() < knots + 8 {
        return Collapse::NoOverlap(short as f64 + 1.0);
    }
    match spline_residual(&sx, &sy, lo, hi, knots) {
        Some(r) if r.is_finite() => Collapse::Value(r),
        _ => Collapse::NoOverlap(1.0),
    }
}

/// Collapse residual of `curves` under fixed scaling parameters.
pub fn collapse_residual(
    curves: &[SusceptibilityCurve],
    form: CollapseForm,
    params: &ScalingParams,
    knots: usize,
) -> Result<f64> {
    if !(params.nu > 0.0) {
        return Err(Error::Domain(format!("ν must be positive, got {}", params.nu)));
    }
    let pts = collect_points(curves, None)?;
    match evaluate(&pts, form, params, knots) {
        Collapse::Value(r) => Ok(r),
        Collapse::NoOverlap(_) => Err(Error::Invalid(
            "rescaled supports do not overlap for these parameters".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseFit {
    pub form: CollapseForm,
    pub params: ScalingParams,
    pub residual: f64,
    /// The residual is flat along some free direction or the optimum sits
    /// on a parameter bound.
    pub unidentifiable: bool,
    pub evaluations: usize,
}

/// Free coordinates: `η_c`, `ln ν`, and `α_F` (power law) or `a` (log).
struct Layout<'a> {
    form: CollapseForm,
    fixed: &'a FixedParams,
    base: ScalingParams,
    free: Vec<usize>,
}

impl Layout<'_> {
    fn full(&self, z: &[f64]) -> ScalingParams {
        let mut v = [self.base.eta_c, self.base.nu.ln(), self.third(&self.base)];
        for (k, &slot) in self.free.iter().enumerate() {
            v[slot] = z[k];
        }
        let nu = v[1].exp();
        let mut p = ScalingParams::new(v[0], nu, self.base.alpha_f, self.base.a);
        match self.form {
            CollapseForm::Powerlaw => {
                p.alpha_f = match self.fixed.ratio {
                    Some(r) if self.fixed.alpha_f.is_none() => r * nu,
                    _ => v[2],
                }
            }
            CollapseForm::Log => p.a = v[2],
        }
        p
    }

    fn third(&self, p: &ScalingParams) -> f64 {
        match self.form {
            CollapseForm::Powerlaw => p.alpha_f,
            CollapseForm::Log => p.a,
        }
    }

    fn project(&self, p: &ScalingParams) -> Vec<f64> {
        let v = [p.eta_c, p.nu.ln(), self.third(p)];
        self.free.iter().map(|&s| v[s]).collect()
    }
}

fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    tol: f64,
    max_eval: usize,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    if n == 0 {
        return (vec![], f(x0), 1);
    }
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut evals = n + 1;
    while evals < max_eval {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let size = simplex[1..]
            .iter()
            .flat_map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if values[n] - values[0] <= tol && size <= 1e-6 || size <= 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                (simplex[n], values[n]) = (xe, fe);
            } else {
                (simplex[n], values[n]) = (xr, fr);
            }
        } else if fr < values[n - 1] {
            (simplex[n], values[n]) = (xr, fr);
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < values[n].min(fr) {
                (simplex[n], values[n]) = (xc, fc);
            } else {
                for i in 1..=n {
                    let x: Vec<f64> = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    values[i] = f(&x);
                    simplex[i] = x;
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).expect("nonempty");
    (simplex[best].clone(), values[best], evals)
}

fn initial_guess(points: &[Point], form: CollapseForm, fixed: &FixedParams) -> ScalingParams {
    let largest = points.iter().map(|p| p.size).max().unwrap_or(1);
    let peak = points
        .iter()
        .filter(|p| p.size == largest)
        .max_by(|a, b| a.density.total_cmp(&b.density))
        .map_or(0.0, |p| p.eta);
    let nu = fixed.nu.unwrap_or(1.0);
    let alpha_f = fixed.alpha_f.or(fixed.ratio.map(|r| r * nu)).unwrap_or(1.0);
    let _ = form;
    ScalingParams::new(fixed.eta_c.unwrap_or(peak), nu, alpha_f, fixed.a.unwrap_or(0.0))
}

fn fit_points(points: &[Point], form: CollapseForm, cfg: &CollapseConfig) -> Result<CollapseFit> {
    if cfg.knots < 1 || cfg.starts < 1 {
        return Err(Error::Invalid("collapse needs at least one knot and one start".into()));
    }
    let (emin, emax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.eta), b.max(p.eta)));
    let span = emax - emin;
    let ymax = points.iter().fold(0.0f64, |m, p| m.max(p.density.abs())).max(f64::MIN_POSITIVE);
    let fixed = &cfg.fixed;
    let mut free = Vec::new();
    if fixed.eta_c.is_none() {
        free.push(0);
    }
    if fixed.nu.is_none() {
        free.push(1);
    }
    let third_free = match form {
        CollapseForm::Powerlaw => fixed.alpha_f.is_none() && fixed.ratio.is_none(),
        CollapseForm::Log => fixed.a.is_none(),
    };
    if third_free {
        free.push(2);
    }
    let layout = Layout {
        form,
        fixed,
        base: initial_guess(points, form, fixed),
        free,
    };
    let third_step = match form {
        CollapseForm::Powerlaw => 0.3,
        CollapseForm::Log => 0.1 * ymax,
    };
    let all_steps = [0.1 * span, 0.3, third_step];
    let steps: Vec<f64> = layout.free.iter().map(|&s| all_steps[s]).collect();
    let mut objective = |z: &[f64]| -> f64 {
        let p = layout.full(z);
        let ln_nu = p.nu.ln();
        let mut penalty = 0.0;
        if p.eta_c < emin || p.eta_c > emax {
            penalty += 10.0 + (p.eta_c - p.eta_c.clamp(emin, emax)).abs() / span;
        }
        if !(NU_MIN.ln()..=NU_MAX.ln()).contains(&ln_nu) {
            penalty += 10.0 + (ln_nu - ln_nu.clamp(NU_MIN.ln(), NU_MAX.ln())).abs();
        }
        if penalty > 0.0 {
            return 2.0 + penalty;
        }
        match evaluate(points, form, &p, cfg.knots) {
            Collapse::Value(r) => r,
            Collapse::NoOverlap(v) => 2.0 + v.abs().min(1e6),
        }
    };
    let x0 = layout.project(&layout.base);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xC011A95E));
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evaluations = 0;
    for s in 0..cfg.starts {
        let start: Vec<f64> = if s == 0 {
            x0.clone()
        } else {
            layout
                .free
                .iter()
                .zip(&x0)
                .map(|(&slot, &v)| v + all_steps[slot] * rng.random_range(-1.5..1.5))
                .collect()
        };
        let (x, v, e) = nelder_mead(&mut objective, &start, &steps, cfg.tolerance, cfg.max_evaluations);
        evaluations += e;
        if best.as_ref().is_none_or(|b| v < b.1) {
            best = Some((x, v));
        }
    }
    let (x, residual) = best.expect("at least one start");
    if residual >= 2.0 {
        return Err(Error::Invalid(
            "rescaled supports do not overlap anywhere in the search region".into(),
        ));
    }
    let params = layout.full(&x);
    // flat directions
    let threshold = 1e-6 + 1e-2 * residual;
    let mut unidentifiable = false;
    for (k, &slot) in layout.free.iter().enumerate() {
        let step = match slot {
            0 => 0.1 * span,
            1 => std::f64::consts::LN_2,
            _ => 0.5 * all_steps[2].max(0.5 * params.alpha_f.abs()),
        };
        let rise = [-step, step]
            .iter()
            .map(|d| {
                let mut z = x.clone();
                z[k] += d;
                objective(&z) - residual
            })
            .fold(f64::INFINITY, f64::min);
        if rise < threshold {
            unidentifiable = true;
        }
    }
    if params.nu <= NU_MIN * 1.01 || params.nu >= NU_MAX / 1.01 {
        unidentifiable = true;
    }
    Ok(CollapseFit {
        form,
        params,
        residual,
        unidentifiable,
        evaluations,
    })
}

/// Minimizes the collapse residual over the free scaling parameters with a
/// multi-start simplex search.
pub fn fit_collapse(curves: &[SusceptibilityCurve], form: CollapseForm, cfg: &CollapseConfig) -> Result<CollapseFit> {
    let pts = collect_points(curves, None)?;
    fit_points(&pts, form, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub collapse: CollapseConfig,
    pub resamples: usize,
    /// Empty selects ranges automatically.
    pub ranges: Vec<RangePair>,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            collapse: CollapseConfig::default(),
            resamples: 100,
            ranges: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FssFit {
    pub form: CollapseForm,
    pub eta_c: Interval,
    pub nu: Interval,
    pub alpha_f: Interval,
    pub a: Interval,
    /// Residual of all data at the point estimate, when the supports overlap.
    pub residual: Option<f64>,
    pub ranges: Vec<RangePair>,
    /// Median parameters per range pair.
    pub range_medians: Vec<ScalingParams>,
    /// 16th/84th percentiles of all resampled fits pooled across range
    /// pairs, with the same point estimates.
    pub pooled_nu: Interval,
    pub pooled_alpha_f: Interval,
    pub pooled_eta_c: Interval,
    /// Fraction of resampled fits flagged unidentifiable.
    pub unidentifiable_fraction: f64,
    pub resamples: usize,
}

impl FssFit {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        fsio::read_json(path)
    }
}

/// Linear-interpolation percentile, `q ∈ [0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

fn median(values: &[f64]) -> f64 {
    percentile(values, 0.5)
}

/// Windows of 100%, 75% and 50% of the grid span centred on the peak of the
/// largest size, all sizes each; plus the same windows without the smallest
/// size when at least four sizes are present.
pub fn auto_ranges(curves: &[SusceptibilityCurve]) -> Vec<RangePair> {
    let Some(largest) = curves.iter().max_by_key(|c| c.l) else {
        return vec![];
    };
    let (emin, emax) = curves
        .iter()
        .flat_map(|c| c.eta.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let centre = largest.peak().map_or(0.5 * (emin + emax), |p| p.0);
    let mut sizes: Vec<usize> = curves.iter().map(|c| c.l).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut size_sets = vec![sizes.clone()];
    if sizes.len() >= 4 {
        size_sets.push(sizes[1..].to_vec());
    }
    let span = emax - emin;
    let mut out = Vec::new();
    for set in size_sets {
        for frac in [1.0, 0.75, 0.5] {
            let half = 0.5 * frac * span;
            let (mut lo, mut hi) = (centre - half, centre + half);
            if lo < emin {
                hi += emin - lo;
                lo = emin;
            }
            if hi > emax {
                lo -= hi - emax;
                hi = emax;
            }
            out.push(RangePair {
                eta: (lo.max(emin) - 1e-12, hi.min(emax) + 1e-12),
                sizes: set.clone(),
            });
        }
    }
    out
}

/// Bootstrap over range pairs: per pair, the median of fits to resampled
/// curves; overall, the median of those medians with 16th/84th percentiles.
pub fn bootstrap_exponents(
    curves: &[SusceptibilityCurve],
    form: CollapseForm,
    cfg: &BootstrapConfig,
) -> Result<FssFit> {
    let ranges = if cfg.ranges.is_empty() {
        auto_ranges(curves)
    } else {
        cfg.ranges.clone()
    };
    if ranges.len() < 2 {
        return Err(Error::Invalid(format!("bootstrap needs at least 2 range pairs, got {}", ranges.len())));
    }
    if cfg.resamples == 0 {
        return Err(Error::Invalid("bootstrap needs at least one resample".into()));
    }
    for c in curves {
        c.validate()?;
        if c.stderr.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Invalid(format!("curve L={} has invalid standard errors", c.l)));
        }
    }
    let mut range_medians = Vec::new();
    let mut pooled: Vec<ScalingParams> = Vec::new();
    let mut flagged = 0usize;
    for (ri, range) in ranges.iter().enumerate() {
        let fits: Vec<Result<CollapseFit>> = (0..cfg.resamples)
            .into_par_iter()
            .map(|b| {
                let mut rng = rng_from_seed(derive_seed(derive_seed(cfg.seed, ri as u64), b as u64));
                let resampled: Vec<SusceptibilityCurve> = curves
                    .iter()
                    .map(|c| {
                        let mut c = c.clone();
                        for (x, s) in c.chi.iter_mut().zip(&c.stderr) {
                            let z: f64 = rng.sample(StandardNormal);
                            *x += s * z;
                        }
                        c
                    })
                    .collect();
                let pts = collect_points(&resampled, Some(range))?;
                fit_points(&pts, form, &cfg.collapse)
            })
            .collect();
        let fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
        flagged += fits.iter().filter(|f| f.unidentifiable).count();
        pooled.extend(fits.iter().map(|f| f.params));
        let col = |g: fn(&ScalingParams) -> f64| median(&fits.iter().map(|f| g(&f.params)).collect::<Vec<_>>());
        range_medians.push(ScalingParams::new(
            col(|p| p.eta_c),
            col(|p| p.nu),
            col(|p| p.alpha_f),
            col(|p| p.a),
        ));
    }
    let interval = |g: fn(&ScalingParams) -> f64| {
        let v: Vec<f64> = range_medians.iter().map(g).collect();
        Interval {
            estimate: median(&v),
            lo: percentile(&v, 0.16),
            hi: percentile(&v, 0.84),
        }
    };
    let (eta_c, nu, alpha_f, a) = (
        interval(|p| p.eta_c),
        interval(|p| p.nu),
        interval(|p| p.alpha_f),
        interval(|p| p.a),
    );
    let est = ScalingParams::new(eta_c.estimate, nu.estimate, alpha_f.estimate, a.estimate);
    let pooled_interval = |g: fn(&ScalingParams) -> f64, estimate: f64| {
        let v: Vec<f64> = pooled.iter().map(g).collect();
        Interval {
            estimate,
            lo: percentile(&v, 0.16).min(estimate),
            hi: percentile(&v, 0.84).max(estimate),
        }
    };
    Ok(FssFit {
        form,
        eta_c,
        nu,
        alpha_f,
        a,
        residual: collapse_residual(curves, form, &est, cfg.collapse.knots).ok(),
        ranges,
        range_medians,
        pooled_nu: pooled_interval(|p| p.nu, est.nu),
        pooled_alpha_f: pooled_interval(|p| p.alpha_f, est.alpha_f),
        pooled_eta_c: pooled_interval(|p| p.eta_c, est.eta_c),
        unidentifiable_fraction: flagged as f64 / pooled.len() as f64,
        resamples: cfg.resamples,
    })
}
