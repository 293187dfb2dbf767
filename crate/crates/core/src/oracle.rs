//! Slow reference computations used to validate the closed-form copula
//! density: direct quadrature of the mixed-copula integral representation,
//! central finite differences, and normalization checks.
//!
//! Nothing in the training path calls into this module. The density routine
//! here works from the full 4×4 precision matrix and integrates the latent
//! Gaussian directly; it shares no conditioning or bivariate-CDF code with
//! [`crate::copula`].

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::copula::{
    log_joint_constant, project_correlation, sigmoid, CopulaKernel, CopulaParams, LabelVector,
    MarginalPrediction,
};
use crate::error::{Error, Result};
use crate::numcore::std_normal_inv_cdf_clamped;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    TensorGaussLegendre,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub rule: QuadratureRule,
    /// Gauss–Legendre nodes per panel; panels span two conditional standard
    /// deviations each.
    pub nodes_per_axis: usize,
    /// Truncation half-width in conditional standard deviations.
    pub domain_halfwidth: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            rule: QuadratureRule::TensorGaussLegendre,
            nodes_per_axis: 32,
            domain_halfwidth: 8.0,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_axis < 32 {
            return Err(Error::Config(format!(
                "nodes_per_axis must be at least 32, got {}",
                self.nodes_per_axis
            )));
        }
        if !(self.domain_halfwidth >= 8.0) {
            return Err(Error::Config(format!(
                "domain_halfwidth must be at least 8, got {}",
                self.domain_halfwidth
            )));
        }
        Ok(())
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]` with panels no wider than
/// `panel_width`.
fn composite_rule(a: f64, b: f64, panel_width: f64, gl: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    if b <= a {
        return Vec::new();
    }
    let panels = ((b - a) / panel_width).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * gl.0.len());
    for p in 0..panels {
        let lo = a + h * p as f64;
        let mid = lo + 0.5 * h;
        for (x, w) in gl.0.iter().zip(&gl.1) {
            out.push((mid + 0.5 * h * x, 0.5 * h * w));
        }
    }
    out
}

/// The 4-dimensional latent Gaussian density at `(q, x)`.
struct LatentDensity {
    precision: Matrix4<f64>,
    log_norm: f64,
}

impl LatentDensity {
    fn new(params: &CopulaParams) -> Result<Self> {
        let g = params.gamma.as_array();
        let m = Matrix4::from_fn(|i, j| g[i][j]);
        let det = m.determinant();
        let precision = m
            .try_inverse()
            .ok_or_else(|| Error::DegenerateCorrelation("singular correlation matrix".into()))?;
        Ok(LatentDensity {
            precision,
            log_norm: -2.0 * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln(),
        })
    }

    fn eval(&self, v: &Vector4<f64>) -> f64 {
        (self.log_norm - 0.5 * v.dot(&(self.precision * v))).exp()
    }

    /// Center and scale of the latent `x` given `q`, read off the precision
    /// matrix; used only to place the integration window.
    fn window(&self, q: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let k22 = Matrix2::new(
            self.precision[(2, 2)],
            self.precision[(2, 3)],
            self.precision[(3, 2)],
            self.precision[(3, 3)],
        );
        let k21 = Matrix2::new(
            self.precision[(2, 0)],
            self.precision[(2, 1)],
            self.precision[(3, 0)],
            self.precision[(3, 1)],
        );
        let cov = k22.try_inverse().expect("conditional precision is invertible");
        let center = -(cov * k21 * Vector2::new(q[0], q[1]));
        (
            [center[0], center[1]],
            [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()],
        )
    }
}

/// Joint density (continuous density times binary mass) by direct
/// quadrature of the latent Gaussian over the binary rectangle. This equals
/// the alternating sum of mixed copula derivatives without its cancellation.
///
/// Each binary label is recoded so that its first category is `y = 1`, which
/// makes `y = 1` correspond to the latent lying below `Phi^-1(p)`; the CDF
/// bounds are then `(0, p)` for `y = 1` and `(p, 1)` for `y = 0`.
pub fn joint_density_numeric(
    label: &LabelVector,
    pred: &MarginalPrediction,
    params: &CopulaParams,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    params.validate()?;
    let dens = LatentDensity::new(params)?;
    // Phi^-1(F(y)) for a normal margin is the standardized residual itself.
    let q = [
        (label.y1 - pred.mu1) / params.sigma1,
        (label.y2 - pred.mu2) / params.sigma2,
    ];
    let bounds = |y: bool, logit: f64| -> [f64; 2] {
        let t = std_normal_inv_cdf_clamped(sigmoid(logit));
        if y {
            [f64::NEG_INFINITY, t]
        } else {
            [t, f64::INFINITY]
        }
    };
    let b3 = bounds(label.y3, pred.logit3);
    let b4 = bounds(label.y4, pred.logit4);
    let (center, scale) = dens.window(q);
    let ridge = [
        1.0 / dens.precision[(2, 2)].sqrt(),
        1.0 / dens.precision[(3, 3)].sqrt(),
    ];
    let w = spec.domain_halfwidth;
    let r3 = axis_limits(b3, center[0], scale[0], ridge[0], w);
    let r4 = axis_limits(b4, center[1], scale[1], ridge[1], w);
    let mass = match spec.rule {
        QuadratureRule::TensorGaussLegendre => rectangle_tensor(&dens, q, r3, r4, ridge, spec),
        QuadratureRule::Adaptive => rectangle_adaptive(&dens, q, r3, r4)?,
    };
    Ok(mass / (params.sigma1 * params.sigma2))
}

/// The part of `[lo, hi]` inside the window `center +- w scale`. When the
/// interval lies wholly beyond the window, a strip of `w` ridge widths at its
/// near edge is used instead, where the tail mass concentrates.
fn axis_limits(bounds: [f64; 2], center: f64, scale: f64, ridge: f64, w: f64) -> (f64, f64) {
    let (lo, hi) = (center - w * scale, center + w * scale);
    if bounds[0] >= hi {
        (bounds[0], bounds[0] + w * ridge)
    } else if bounds[1] <= lo {
        (bounds[1] - w * ridge, bounds[1])
    } else {
        (bounds[0].max(lo), bounds[1].min(hi))
    }
}

fn rectangle_tensor(
    dens: &LatentDensity,
    q: [f64; 2],
    (a3, b3): (f64, f64),
    (a4, b4): (f64, f64),
    ridge: [f64; 2],
    spec: &QuadratureSpec,
) -> f64 {
    let gl = gauss_legendre(spec.nodes_per_axis);
    // Panels follow the full-conditional spread so thin ridges are resolved.
    let r3 = composite_rule(a3, b3, 2.0 * ridge[0], &gl);
    let r4 = composite_rule(a4, b4, 2.0 * ridge[1], &gl);
    let mut sum = 0.0;
    for &(x3, w3) in &r3 {
        let mut inner = 0.0;
        for &(x4, w4) in &r4 {
            inner += w4 * dens.eval(&Vector4::new(q[0], q[1], x3, x4));
        }
        sum += w3 * inner;
    }
    sum
}

struct Adaptive<'a, F: Fn(f64) -> f64> {
    f: &'a F,
    gl: &'a (Vec<f64>, Vec<f64>),
    evals: usize,
    budget: usize,
}

impl<F: Fn(f64) -> f64> Adaptive<'_, F> {
    fn rule(&mut self, a: f64, b: f64) -> f64 {
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        self.evals += self.gl.0.len();
        self.gl
            .0
            .iter()
            .zip(&self.gl.1)
            .map(|(x, w)| w * (self.f)(mid + half * x))
            .sum::<f64>()
            * half
    }

    fn integrate(&mut self, a: f64, b: f64, whole: f64, rel: f64, depth: usize) -> Result<f64> {
        let m = 0.5 * (a + b);
        let left = self.rule(a, m);
        let right = self.rule(m, b);
        if self.evals > self.budget {
            return Err(Error::QuadratureNotConverged {
                budget: self.budget,
            });
        }
        let split = left + right;
        if (split - whole).abs() <= rel * split.abs() || depth >= 40 {
            return Ok(split);
        }
        Ok(self.integrate(a, m, left, rel, depth + 1)? + self.integrate(m, b, right, rel, depth + 1)?)
    }
}

fn adaptive_integral<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, panel: f64, rel: f64, budget: usize) -> Result<f64> {
    let gl = gauss_legendre(10);
    let mut ad = Adaptive {
        f,
        gl: &gl,
        evals: 0,
        budget,
    };
    let panels = ((b - a) / panel).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + h * p as f64;
        let whole = ad.rule(lo, lo + h);
        total += ad.integrate(lo, lo + h, whole, rel, 0)?;
    }
    Ok(total)
}

fn rectangle_adaptive(dens: &LatentDensity, q: [f64; 2], (a3, b3): (f64, f64), (a4, b4): (f64, f64)) -> Result<f64> {
    let budget = 4_000_000;
    let rel = 1e-12;
    let ridge4 = 1.0 / dens.precision[(3, 3)].sqrt();
    let ridge3 = 1.0 / dens.precision[(2, 2)].sqrt();
    let err = std::cell::Cell::new(None);
    let outer = |x3: f64| {
        let inner = |x4: f64| dens.eval(&Vector4::new(q[0], q[1], x3, x4));
        match adaptive_integral(&inner, a4, b4, 2.0 * ridge4, rel, budget) {
            Ok(v) => v,
            Err(e) => {
                err.set(Some(e));
                0.0
            }
        }
    };
    let v = adaptive_integral(&outer, a3, b3, 2.0 * ridge3, rel, budget / 100)?;
    match err.take() {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Central differences at `step` and `step / 2` combined by Richardson
/// extrapolation, which cancels the `h^2` error term.
pub fn richardson_grad<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], step: f64) -> Vec<f64> {
    let coarse = finite_diff_grad(&mut f, point, step);
    let fine = finite_diff_grad(&mut f, point, 0.5 * step);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

const BINARY_CASES: [(bool, bool); 4] = [(true, true), (true, false), (false, true), (false, false)];

/// Total mass of the closed-form density by tensor Gauss–Legendre over
/// `mu +- 8 sigma` in each continuous coordinate.
pub fn quad_normalization(pred: &MarginalPrediction, params: &CopulaParams, nodes: usize) -> Result<f64> {
    let kernel = CopulaKernel::new(params)?;
    let c = log_joint_constant(params);
    let gl = gauss_legendre(nodes);
    let rule = composite_rule(-8.0, 8.0, 1.0, &gl);
    let mut total = 0.0;
    for &(q1, w1) in &rule {
        for &(q2, w2) in &rule {
            let y1 = pred.mu1 + params.sigma1 * q1;
            let y2 = pred.mu2 + params.sigma2 * q2;
            let mass: f64 = BINARY_CASES
                .iter()
                .map(|&(y3, y4)| {
                    let l = LabelVector { y1, y2, y3, y4 };
                    (kernel.eval(&l, pred).log_density + c).exp()
                })
                .sum();
            total += w1 * w2 * mass;
        }
    }
    Ok(total * params.sigma1 * params.sigma2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Importance-sampled total mass of the closed-form density. The proposal
/// is an independent normal with 1.5× the marginal scales.
pub fn mc_normalization(
    pred: &MarginalPrediction,
    params: &CopulaParams,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples < 100_000 {
        return Err(Error::Config(format!(
            "mc_normalization needs at least 1e5 samples, got {n_samples}"
        )));
    }
    let kernel = CopulaKernel::new(params)?;
    let c = log_joint_constant(params);
    let widen = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let (s1, s2) = (widen * params.sigma1, widen * params.sigma2);
        let y1 = pred.mu1 + s1 * e1;
        let y2 = pred.mu2 + s2 * e2;
        let log_proposal = -(2.0 * std::f64::consts::PI).ln()
            - s1.ln()
            - s2.ln()
            - 0.5 * (e1 * e1 + e2 * e2);
        let mass: f64 = BINARY_CASES
            .iter()
            .map(|&(y3, y4)| {
                let l = LabelVector { y1, y2, y3, y4 };
                (kernel.eval(&l, pred).log_density + c - log_proposal).exp()
            })
            .sum();
        sum += mass;
        sum_sq += mass * mass;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

/// One randomized configuration for the closed-form vs. quadrature check.
#[derive(Clone, Debug, Serialize)]
pub struct OracleCase {
    pub label: LabelVector,
    pub pred: MarginalPrediction,
    pub params: CopulaParams,
}

/// Random PD correlation (off-diagonals drawn in `[-0.6, 0.6]`, then
/// projected), scales in `[0.3, 2]`, logits in `[-3, 3]` and continuous
/// labels within 2.5 scale units of their means.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R) -> OracleCase {
    let mut m = [[1.0; 4]; 4];
    for i in 0..4 {
        for j in i + 1..4 {
            let v = rng.random_range(-0.6..0.6);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    let gamma = project_correlation(m);
    let sigma1 = rng.random_range(0.3..2.0);
    let sigma2 = rng.random_range(0.3..2.0);
    let params = CopulaParams::new(gamma, sigma1, sigma2).expect("valid random params");
    let pred = MarginalPrediction {
        mu1: rng.random_range(-2.0..2.0),
        mu2: rng.random_range(-2.0..2.0),
        logit3: rng.random_range(-3.0..3.0),
        logit4: rng.random_range(-3.0..3.0),
    };
    let label = LabelVector {
        y1: pred.mu1 + sigma1 * rng.random_range(-2.5..2.5),
        y2: pred.mu2 + sigma2 * rng.random_range(-2.5..2.5),
        y3: rng.random_bool(0.5),
        y4: rng.random_bool(0.5),
    };
    OracleCase { label, pred, params }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub case: usize,
    pub closed_form: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub cases: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Draws replaced because their binary rectangle mass was below
    /// [`MIN_RECTANGLE_MASS`].
    pub redrawn: usize,
    pub rows: Vec<OracleRow>,
}

/// Smallest binary rectangle mass admitted to the randomized comparison.
/// Below it the closed form sits at or near its probability floor.
pub const MIN_RECTANGLE_MASS: f64 = 1e-8;

/// Density of the two continuous labels alone.
fn continuous_marginal_density(label: &LabelVector, pred: &MarginalPrediction, params: &CopulaParams) -> f64 {
    let g = params.gamma.get(0, 1);
    let q1 = (label.y1 - pred.mu1) / params.sigma1;
    let q2 = (label.y2 - pred.mu2) / params.sigma2;
    let det = 1.0 - g * g;
    let quad = (q1 * q1 - 2.0 * g * q1 * q2 + q2 * q2) / det;
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt() * params.sigma1 * params.sigma2)
}

/// Compares `exp(log_joint_density + C)` with [`joint_density_numeric`] on
/// `cases` random configurations.
pub fn oracle_check(cases: usize, seed: u64, spec: &QuadratureSpec, tolerance: f64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(cases);
    let mut redrawn = 0;
    for case in 0..cases {
        let (c, numeric) = loop {
            let c = random_case(&mut rng);
            let numeric = joint_density_numeric(&c.label, &c.pred, &c.params, spec)?;
            if numeric >= MIN_RECTANGLE_MASS * continuous_marginal_density(&c.label, &c.pred, &c.params) {
                break (c, numeric);
            }
            redrawn += 1;
        };
        let closed = (crate::copula::log_joint_density(&c.label, &c.pred, &c.params)?
            + log_joint_constant(&c.params))
        .exp();
        let rel_err = ((closed - numeric) / numeric).abs();
        rows.push(OracleRow {
            case,
            closed_form: closed,
            numeric,
            rel_err,
            pass: rel_err <= tolerance,
        });
    }
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(OracleReport {
        cases,
        seed,
        tolerance,
        max_rel_err,
        pass: rows.iter().all(|r| r.pass),
        redrawn,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::CorrelationMatrix4;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let m12: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert!((m12 - 2.0 / 13.0).abs() < 1e-14);
        let (x, w) = gauss_legendre(64);
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * (3.0 * x).cos()).sum();
        assert!((m - 2.0 * 3f64.sin() / 3.0).abs() < 1e-14);
    }

    #[test]
    fn fd_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3);
        assert_eq!(g, vec![0.0; 3]);
        // central differences of a quartic carry only the h^2 term
        let g = richardson_grad(|x| x[0].powi(4), &[1.5], 0.1);
        assert!((g[0] - 13.5).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut s = QuadratureSpec::default();
        assert!(s.validate().is_ok());
        s.nodes_per_axis = 16;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.nodes_per_axis = 32;
        s.domain_halfwidth = 6.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn independent_case_is_product_of_margins() {
        let params = CopulaParams::new(CorrelationMatrix4::identity(), 0.7, 1.4).unwrap();
        let pred = MarginalPrediction { mu1: 0.5, mu2: -0.3, logit3: 0.9, logit4: -0.4 };
        let label = LabelVector { y1: 1.1, y2: -1.0, y3: false, y4: true };
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let want = phi(0.6 / 0.7) / 0.7 * phi(-0.7 / 1.4) / 1.4 * sigmoid(-0.9) * sigmoid(-0.4);
        let got = joint_density_numeric(&label, &pred, &params, &QuadratureSpec::default()).unwrap();
        assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn adaptive_matches_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = random_case(&mut rng);
        let tensor = joint_density_numeric(&c.label, &c.pred, &c.params, &QuadratureSpec::default()).unwrap();
        let spec = QuadratureSpec {
            rule: QuadratureRule::Adaptive,
            ..QuadratureSpec::default()
        };
        let adaptive = joint_density_numeric(&c.label, &c.pred, &c.params, &spec).unwrap();
        assert!(((tensor - adaptive) / tensor).abs() < 1e-9, "{tensor} vs {adaptive}");
    }

    #[test]
    fn mc_requires_enough_samples() {
        let p = CopulaParams::independent();
        assert!(mc_normalization(&MarginalPrediction::default(), &p, 10, 1).is_err());
    }
}
