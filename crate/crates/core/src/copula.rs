//! Gaussian-copula joint likelihood for two continuous and two binary labels.
//!
//! The two continuous labels enter through their Gaussian scores
//! `q_m = (y_m - mu_m) / sigma_m`. Conditioning the two binary latents on `q`
//! leaves a bivariate normal whose rectangle probability is the discrete part
//! of the likelihood, so the log density is
//!
//! ```text
//! -1/2 q' G11^-1 q + log P(rectangle | q) + C
//! ```
//!
//! with `C = -log(2 pi) - 1/2 log det G11 - log sigma1 - log sigma2`. The loss
//! drops `C`; [`log_joint_constant`] returns it for comparisons against a
//! direct evaluation of the density.
//!
//! Binary orientation: `y = 1` exactly when the latent is at or below
//! `Phi^-1(p)`. Density, sampling and estimation all use this convention.

use nalgebra::{Matrix4, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    bvn_cdf, bvn_cdf_dh, bvn_cdf_dk, clamp_rho, std_normal_inv_cdf_clamped, std_normal_pdf,
    BvnArgs, EPS_P,
};

/// Smallest eigenvalue a correlation matrix may have.
pub const LAMBDA_MIN: f64 = 1e-4;
/// Lower bound applied to rectangle probabilities before taking the log.
pub const P_FLOOR: f64 = 1e-12;

/// 4×4 copula correlation matrix ordered (AL-OS, AL-OD, HM-OS, HM-OD).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct CorrelationMatrix4 {
    m: [[f64; 4]; 4],
}

impl CorrelationMatrix4 {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CorrelationMatrix4 { m }
    }

    /// Builds from the upper-triangle entries `[g12, g13, g14, g23, g24, g34]`.
    pub fn from_offdiag(g: [f64; 6]) -> Result<Self> {
        let [g12, g13, g14, g23, g24, g34] = g;
        Self::from_matrix([
            [1.0, g12, g13, g14],
            [g12, 1.0, g23, g24],
            [g13, g23, 1.0, g34],
            [g14, g24, g34, 1.0],
        ])
    }

    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        for i in 0..4 {
            if (m[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("diagonal entry {i} is {}", m[i][i])));
            }
            for j in 0..4 {
                if !m[i][j].is_finite() || m[i][j].abs() > 1.0 {
                    return Err(Error::Domain(format!("entry ({i},{j}) = {}", m[i][j])));
                }
                if (m[i][j] - m[j][i]).abs() > 1e-12 {
                    return Err(Error::Domain(format!("not symmetric at ({i},{j})")));
                }
            }
        }
        let lmin = min_eigenvalue(&m);
        if lmin < LAMBDA_MIN * (1.0 - 1e-9) {
            return Err(Error::DegenerateCorrelation(format!(
                "smallest eigenvalue {lmin:.3e} below {LAMBDA_MIN:e}"
            )));
        }
        Ok(CorrelationMatrix4 { m })
    }

    /// Entry `(i, j)`, zero-based.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn as_array(&self) -> [[f64; 4]; 4] {
        self.m
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.m)
    }

    /// Continuous–continuous block.
    pub fn block11(&self) -> [[f64; 2]; 2] {
        [[self.m[0][0], self.m[0][1]], [self.m[1][0], self.m[1][1]]]
    }

    /// Binary rows against continuous columns.
    pub fn block21(&self) -> [[f64; 2]; 2] {
        [[self.m[2][0], self.m[2][1]], [self.m[3][0], self.m[3][1]]]
    }

    pub fn block12(&self) -> [[f64; 2]; 2] {
        let b = self.block21();
        [[b[0][0], b[1][0]], [b[0][1], b[1][1]]]
    }

    /// Binary–binary block.
    pub fn block22(&self) -> [[f64; 2]; 2] {
        [[self.m[2][2], self.m[2][3]], [self.m[3][2], self.m[3][3]]]
    }

    /// Lower Cholesky factor.
    pub fn cholesky(&self) -> [[f64; 4]; 4] {
        let mut l = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..=i {
                let mut s = self.m[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
            }
        }
        l
    }
}

impl TryFrom<[[f64; 4]; 4]> for CorrelationMatrix4 {
    type Error = Error;

    fn try_from(m: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_matrix(m)
    }
}

impl From<CorrelationMatrix4> for [[f64; 4]; 4] {
    fn from(c: CorrelationMatrix4) -> Self {
        c.m
    }
}

fn min_eigenvalue(m: &[[f64; 4]; 4]) -> f64 {
    let mat = Matrix4::from_fn(|i, j| m[i][j]);
    SymmetricEigen::new(mat).eigenvalues.min()
}

/// Provenance of estimated copula parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CopulaMeta {
    pub source_run: String,
    pub sample_count: usize,
    #[serde(default)]
    pub split: String,
    #[serde(default)]
    pub config_digest: String,
}

/// Everything the copula loss is parameterized by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaParams {
    pub gamma: CorrelationMatrix4,
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub meta: CopulaMeta,
}

impl CopulaParams {
    pub fn new(gamma: CorrelationMatrix4, sigma1: f64, sigma2: f64) -> Result<Self> {
        let p = CopulaParams {
            gamma,
            sigma1,
            sigma2,
            meta: CopulaMeta::default(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Identity correlation with unit scales.
    pub fn independent() -> Self {
        CopulaParams {
            gamma: CorrelationMatrix4::identity(),
            sigma1: 1.0,
            sigma2: 1.0,
            meta: CopulaMeta::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1 > 0.0 && self.sigma1.is_finite())
            || !(self.sigma2 > 0.0 && self.sigma2.is_finite())
        {
            return Err(Error::Domain(format!(
                "marginal scales must be positive, got ({}, {})",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: CopulaParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Per-patient targets: axial lengths (continuous) and high-myopia flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub y1: f64,
    pub y2: f64,
    pub y3: bool,
    pub y4: bool,
}

/// Model outputs for one patient: regression means and classification logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginalPrediction {
    pub mu1: f64,
    pub mu2: f64,
    pub logit3: f64,
    pub logit4: f64,
}

/// Distribution of the two binary latents given the continuous scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalLatent {
    pub mc3: f64,
    pub mc4: f64,
    pub s3: f64,
    pub s4: f64,
    pub rho_c: f64,
}

/// Partials of the per-sample loss with respect to [`MarginalPrediction`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossGrad {
    pub d_mu1: f64,
    pub d_mu2: f64,
    pub d_logit3: f64,
    pub d_logit4: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectangleProb {
    pub value: f64,
    pub floored: bool,
}

#[derive(Clone, Debug)]
pub struct CopulaLossOutput {
    pub loss: f64,
    pub grads: Vec<LossGrad>,
    pub floor_events: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gaussian_score_continuous(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok((y - mu) / sigma)
}

/// `Phi^-1(clamp(sigmoid(logit)))`, computed on the lower half so that
/// `binary_threshold(-x) == -binary_threshold(x)` exactly.
pub fn binary_threshold(logit: f64) -> f64 {
    if logit > 0.0 {
        -std_normal_inv_cdf_clamped(sigmoid(-logit))
    } else {
        std_normal_inv_cdf_clamped(sigmoid(logit))
    }
}

/// `d threshold / d logit`; zero where the probability clamp is active.
fn binary_threshold_slope(logit: f64, t: f64) -> f64 {
    let p_lo = sigmoid(-logit.abs());
    if p_lo < EPS_P {
        return 0.0;
    }
    sigmoid(logit) * sigmoid(-logit) / std_normal_pdf(t)
}

/// Gaussian conditioning of the binary latents on the continuous scores:
/// mean `G21 G11^-1 q`, covariance `G22 - G21 G11^-1 G12`.
pub fn conditional_latent(q: [f64; 2], gamma: &CorrelationMatrix4) -> Result<ConditionalLatent> {
    let cond = Conditioning::new(gamma)?;
    Ok(cond.at(q))
}

/// Everything about the conditioning that does not depend on `q`.
#[derive(Clone, Copy, Debug)]
struct Conditioning {
    g11_inv: [[f64; 2]; 2],
    /// `G21 G11^-1`
    reg: [[f64; 2]; 2],
    s3: f64,
    s4: f64,
    rho_c: f64,
}

impl Conditioning {
    fn new(gamma: &CorrelationMatrix4) -> Result<Self> {
        let g12 = gamma.get(0, 1);
        let det = 1.0 - g12 * g12;
        if det <= LAMBDA_MIN * (1.0 - 1e-9) {
            return Err(Error::DegenerateCorrelation(format!(
                "continuous block determinant {det:.3e}"
            )));
        }
        let g11_inv = [[1.0 / det, -g12 / det], [-g12 / det, 1.0 / det]];
        let b21 = gamma.block21();
        let reg = mat2_mul(&b21, &g11_inv);
        let b12 = gamma.block12();
        let explained = mat2_mul(&reg, &b12);
        let b22 = gamma.block22();
        let v3 = b22[0][0] - explained[0][0];
        let v4 = b22[1][1] - explained[1][1];
        let c34 = b22[0][1] - 0.5 * (explained[0][1] + explained[1][0]);
        let bound = LAMBDA_MIN * (1.0 - 1e-9);
        if v3 <= bound || v4 <= bound {
            return Err(Error::DegenerateCorrelation(format!(
                "conditional variances ({v3:.3e}, {v4:.3e}) at or below {LAMBDA_MIN:e}"
            )));
        }
        let s3 = v3.sqrt();
        let s4 = v4.sqrt();
        Ok(Conditioning {
            g11_inv,
            reg,
            s3,
            s4,
            rho_c: clamp_rho(c34 / (s3 * s4)),
        })
    }

    fn at(&self, q: [f64; 2]) -> ConditionalLatent {
        ConditionalLatent {
            mc3: self.reg[0][0] * q[0] + self.reg[0][1] * q[1],
            mc4: self.reg[1][0] * q[0] + self.reg[1][1] * q[1],
            s3: self.s3,
            s4: self.s4,
            rho_c: self.rho_c,
        }
    }

    fn quad_form(&self, q: [f64; 2]) -> f64 {
        let a = &self.g11_inv;
        q[0] * (a[0][0] * q[0] + a[0][1] * q[1]) + q[1] * (a[1][0] * q[0] + a[1][1] * q[1])
    }
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn sign(y: bool) -> f64 {
    if y {
        1.0
    } else {
        -1.0
    }
}

/// Conditional probability of the observed binary pair.
///
/// With standardized limits `A = (t3 - mc3) / s3` and `B = (t4 - mc4) / s4`
/// the four cases are `Phi2(A, B)`, `Phi(A) - Phi2`, `Phi(B) - Phi2` and
/// `1 - Phi(A) - Phi(B) + Phi2`. Each is evaluated as a single orthant
/// probability `Phi2(+-A, +-B; +-rho_c)`, which avoids cancellation in the
/// tails.
pub fn rectangle_prob(y3: bool, y4: bool, t3: f64, t4: f64, cond: &ConditionalLatent) -> RectangleProb {
    let a = (t3 - cond.mc3) / cond.s3;
    let b = (t4 - cond.mc4) / cond.s4;
    let (sa, sb) = (sign(y3), sign(y4));
    let value = bvn_cdf(BvnArgs::new(sa * a, sb * b, sa * sb * cond.rho_c));
    if value < P_FLOOR {
        RectangleProb {
            value: P_FLOOR,
            floored: true,
        }
    } else {
        RectangleProb {
            value,
            floored: false,
        }
    }
}

/// The additive constant dropped from [`log_joint_density`].
pub fn log_joint_constant(params: &CopulaParams) -> f64 {
    let g12 = params.gamma.get(0, 1);
    -(2.0 * std::f64::consts::PI).ln()
        - 0.5 * (1.0 - g12 * g12).ln()
        - params.sigma1.ln()
        - params.sigma2.ln()
}

/// Precomputed per-parameter state for repeated density and gradient
/// evaluation.
#[derive(Clone, Debug)]
pub struct CopulaKernel {
    params: CopulaParams,
    cond: Conditioning,
}

/// Value and gradient of the log density at one sample.
#[derive(Clone, Copy, Debug)]
pub struct PointEval {
    pub log_density: f64,
    /// Gradient of the log density (not the loss).
    pub grad: LossGrad,
    pub floored: bool,
}

impl CopulaKernel {
    pub fn new(params: &CopulaParams) -> Result<Self> {
        params.validate()?;
        Ok(CopulaKernel {
            params: params.clone(),
            cond: Conditioning::new(&params.gamma)?,
        })
    }

    pub fn params(&self) -> &CopulaParams {
        &self.params
    }

    pub fn eval(&self, label: &LabelVector, pred: &MarginalPrediction) -> PointEval {
        let (s1, s2) = (self.params.sigma1, self.params.sigma2);
        let q = [(label.y1 - pred.mu1) / s1, (label.y2 - pred.mu2) / s2];
        let t3 = binary_threshold(pred.logit3);
        let t4 = binary_threshold(pred.logit4);
        let cl = self.cond.at(q);
        let rect = rectangle_prob(label.y3, label.y4, t3, t4, &cl);
        let log_density = -0.5 * self.cond.quad_form(q) + rect.value.ln();

        let gi = &self.cond.g11_inv;
        let mut dq = [
            -(gi[0][0] * q[0] + gi[0][1] * q[1]),
            -(gi[1][0] * q[0] + gi[1][1] * q[1]),
        ];
        let (mut dt3, mut dt4) = (0.0, 0.0);
        if !rect.floored {
            let a = (t3 - cl.mc3) / cl.s3;
            let b = (t4 - cl.mc4) / cl.s4;
            let (sa, sb) = (sign(label.y3), sign(label.y4));
            let args = BvnArgs::new(sa * a, sb * b, sa * sb * cl.rho_c);
            // d log P / dA, d log P / dB
            let dla = sa * bvn_cdf_dh(args) / rect.value;
            let dlb = sb * bvn_cdf_dk(args) / rect.value;
            let reg = &self.cond.reg;
            for (j, d) in dq.iter_mut().enumerate() {
                *d -= dla * reg[0][j] / cl.s3 + dlb * reg[1][j] / cl.s4;
            }
            dt3 = dla / cl.s3;
            dt4 = dlb / cl.s4;
        }
        PointEval {
            log_density,
            grad: LossGrad {
                d_mu1: -dq[0] / s1,
                d_mu2: -dq[1] / s2,
                d_logit3: dt3 * binary_threshold_slope(pred.logit3, t3),
                d_logit4: dt4 * binary_threshold_slope(pred.logit4, t4),
            },
            floored: rect.floored,
        }
    }
}

/// Log joint density with the additive constant dropped.
pub fn log_joint_density(
    label: &LabelVector,
    pred: &MarginalPrediction,
    params: &CopulaParams,
) -> Result<f64> {
    Ok(CopulaKernel::new(params)?.eval(label, pred).log_density)
}

/// Negative log-likelihood over a batch, with analytic per-sample gradients.
pub fn copula_loss(
    labels: &[LabelVector],
    preds: &[MarginalPrediction],
    params: &CopulaParams,
) -> Result<CopulaLossOutput> {
    if labels.is_empty() {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    if labels.len() != preds.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len()],
            got: vec![preds.len()],
        });
    }
    let kernel = CopulaKernel::new(params)?;
    let mut loss = 0.0;
    let mut floor_events = 0;
    let grads = labels
        .iter()
        .zip(preds)
        .map(|(l, p)| {
            let e = kernel.eval(l, p);
            loss -= e.log_density;
            floor_events += usize::from(e.floored);
            LossGrad {
                d_mu1: -e.grad.d_mu1,
                d_mu2: -e.grad.d_mu2,
                d_logit3: -e.grad.d_logit3,
                d_logit4: -e.grad.d_logit4,
            }
        })
        .collect();
    Ok(CopulaLossOutput {
        loss,
        grads,
        floor_events,
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (denominator `n - 1`).
pub fn sample_std(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 values, got {}",
            x.len()
        )));
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    let sd = (ss / (x.len() - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateInput("constant residual vector".into()));
    }
    Ok(sd)
}

pub fn estimate_sigmas(residuals_os: &[f64], residuals_od: &[f64]) -> Result<(f64, f64)> {
    Ok((sample_std(residuals_os)?, sample_std(residuals_od)?))
}

/// Two-pass Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![x.len()],
            got: vec![y.len()],
        });
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::DegenerateInput("zero-variance input vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise Pearson correlations of `(z1, z2, s3, s4)` before projection.
pub fn score_correlations(z1: &[f64], z2: &[f64], s3: &[f64], s4: &[f64]) -> Result<[[f64; 4]; 4]> {
    let n = z1.len();
    if n < 3 || z2.len() != n || s3.len() != n || s4.len() != n {
        return Err(Error::DegenerateInput(format!(
            "score vectors must share a length of at least 3, got ({}, {}, {}, {})",
            z1.len(),
            z2.len(),
            s3.len(),
            s4.len()
        )));
    }
    let cols = [z1, z2, s3, s4];
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = 1.0;
        for j in i + 1..4 {
            let r = pearson(cols[i], cols[j])?;
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok(m)
}

/// Correlation matrix from standardized residuals `z1, z2` and fitted
/// probability scores `s3, s4 = Phi^-1(sigmoid(logit))`, projected to be
/// positive definite.
pub fn estimate_gamma(z1: &[f64], z2: &[f64], s3: &[f64], s4: &[f64]) -> Result<CorrelationMatrix4> {
    Ok(project_correlation(score_correlations(z1, z2, s3, s4)?))
}

/// Eigenvalue clipping at [`LAMBDA_MIN`] followed by rescaling to a unit
/// diagonal. Inputs that already satisfy the invariants are returned as is.
pub fn project_correlation(m: [[f64; 4]; 4]) -> CorrelationMatrix4 {
    let mut sym = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            sym[i][j] = if i == j {
                1.0
            } else {
                (0.5 * (m[i][j] + m[j][i])).clamp(-1.0, 1.0)
            };
        }
    }
    if let Ok(c) = CorrelationMatrix4::from_matrix(sym) {
        return c;
    }
    let mat = Matrix4::from_fn(|i, j| sym[i][j]);
    let eig = SymmetricEigen::new(mat);
    let mut floor = LAMBDA_MIN;
    loop {
        let clipped = eig.eigenvalues.map(|l| l.max(floor));
        let rec = eig.eigenvectors * Matrix4::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = if i == j {
                    1.0
                } else {
                    let v = rec[(i, j)] / (rec[(i, i)] * rec[(j, j)]).sqrt();
                    let w = rec[(j, i)] / (rec[(i, i)] * rec[(j, j)]).sqrt();
                    (0.5 * (v + w)).clamp(-1.0, 1.0)
                };
            }
        }
        if let Ok(c) = CorrelationMatrix4::from_matrix(out) {
            return c;
        }
        floor *= 1.5;
    }
}

/// Marginal parameters for sampling: regression means and success
/// probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CopulaMarginals {
    pub mu1: f64,
    pub mu2: f64,
    pub p3: f64,
    pub p4: f64,
}

/// One draw from the copula model: labels plus the latent normal vector.
pub fn sample_copula_one<R: Rng + ?Sized>(
    params: &CopulaParams,
    chol: &[[f64; 4]; 4],
    marginals: &CopulaMarginals,
    rng: &mut R,
) -> (LabelVector, [f64; 4]) {
    let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let mut z = [0.0; 4];
    for i in 0..4 {
        z[i] = (0..=i).map(|k| chol[i][k] * e[k]).sum();
    }
    let t3 = std_normal_inv_cdf_clamped(marginals.p3);
    let t4 = std_normal_inv_cdf_clamped(marginals.p4);
    let label = LabelVector {
        y1: marginals.mu1 + params.sigma1 * z[0],
        y2: marginals.mu2 + params.sigma2 * z[1],
        y3: z[2] <= t3,
        y4: z[3] <= t4,
    };
    (label, z)
}

/// `n` draws with a ChaCha8 stream seeded from `seed`.
pub fn sample_copula(
    params: &CopulaParams,
    marginals: &CopulaMarginals,
    n: usize,
    seed: u64,
) -> Result<Vec<LabelVector>> {
    params.validate()?;
    for p in [marginals.p3, marginals.p4] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("success probability {p} not in (0, 1)")));
        }
    }
    let chol = params.gamma.cholesky();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| sample_copula_one(params, &chol, marginals, &mut rng).0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};

    fn bce(logit: f64, y: bool) -> f64 {
        if y {
            -sigmoid(logit).ln()
        } else {
            -sigmoid(-logit).ln()
        }
    }

    #[test]
    fn gaussian_score_examples() {
        assert_eq!(gaussian_score_continuous(5.0, 5.0, 2.0).unwrap(), 0.0);
        assert_eq!(gaussian_score_continuous(7.0, 5.0, 2.0).unwrap(), 1.0);
        assert_eq!(gaussian_score_continuous(3.5, 5.0, 0.5).unwrap(), -3.0);
        assert!(matches!(
            gaussian_score_continuous(1.0, 0.0, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(binary_threshold(0.0), 0.0);
        for &l in &[0.3, 1.0, 4.0, 25.0, 40.0] {
            assert_eq!(binary_threshold(-l), -binary_threshold(l));
        }
        let t = binary_threshold(1.0);
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((crate::numcore::std_normal_cdf(t) - p).abs() < 1e-14);
        assert!(binary_threshold(1000.0).is_finite());
    }

    #[test]
    fn conditional_identity() {
        let c = conditional_latent([0.7, -1.2], &CorrelationMatrix4::identity()).unwrap();
        assert_eq!((c.mc3, c.mc4, c.s3, c.s4, c.rho_c), (0.0, 0.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn conditional_single_coupling() {
        let g = CorrelationMatrix4::from_offdiag([0.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let c = conditional_latent([1.0, 0.0], &g).unwrap();
        assert!((c.mc3 - 0.5).abs() < 1e-15);
        assert_eq!(c.mc4, 0.0);
        assert!((c.s3 - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.s4, 1.0);
        assert_eq!(c.rho_c, 0.0);
    }

    #[test]
    fn rectangle_independent_product() {
        let c = conditional_latent([0.0, 0.0], &CorrelationMatrix4::identity()).unwrap();
        let t3 = crate::numcore::std_normal_inv_cdf_clamped(0.3);
        let t4 = crate::numcore::std_normal_inv_cdf_clamped(0.6);
        let r = rectangle_prob(true, true, t3, t4, &c);
        assert!((r.value - 0.18).abs() < 1e-14);
        assert!(!r.floored);
    }

    #[test]
    fn rectangle_floor_is_reported() {
        let c = conditional_latent([0.0, 0.0], &CorrelationMatrix4::identity()).unwrap();
        let r = rectangle_prob(true, true, -9.0, -9.0, &c);
        assert!(r.floored);
        assert_eq!(r.value, P_FLOOR);
    }

    #[test]
    fn log_density_identity_factorizes() {
        let params = CopulaParams::new(CorrelationMatrix4::identity(), 0.8, 1.3).unwrap();
        let label = LabelVector { y1: 24.1, y2: 23.2, y3: true, y4: false };
        let pred = MarginalPrediction { mu1: 23.5, mu2: 23.9, logit3: 0.4, logit4: -1.7 };
        let q1 = (24.1 - 23.5) / 0.8;
        let q2 = (23.2 - 23.9) / 1.3;
        let want = -0.5 * (q1 * q1 + q2 * q2) - bce(0.4, true) - bce(-1.7, false);
        let got = log_joint_density(&label, &pred, &params).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn shifting_y1_by_one_sigma() {
        let params = CopulaParams::new(CorrelationMatrix4::identity(), 0.5, 1.0).unwrap();
        let pred = MarginalPrediction { mu1: 1.0, mu2: 0.0, logit3: 0.2, logit4: 0.1 };
        let mut label = LabelVector { y1: 1.35, y2: 0.3, y3: false, y4: true };
        let q1 = 0.35 / 0.5;
        let before = log_joint_density(&label, &pred, &params).unwrap();
        label.y1 += 0.5;
        let after = log_joint_density(&label, &pred, &params).unwrap();
        assert!((before - after - 0.5 * (2.0 * q1 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_additive_over_duplicates() {
        let g = CorrelationMatrix4::from_offdiag([0.6, 0.3, 0.1, 0.2, 0.35, 0.5]).unwrap();
        let params = CopulaParams::new(g, 1.1, 0.9).unwrap();
        let label = LabelVector { y1: 0.2, y2: -0.4, y3: true, y4: true };
        let pred = MarginalPrediction { mu1: 0.0, mu2: 0.1, logit3: -0.3, logit4: 0.8 };
        let one = copula_loss(&[label], &[pred], &params).unwrap().loss;
        let seven = copula_loss(&[label; 7], &[pred; 7], &params).unwrap().loss;
        assert_eq!(seven, (0..7).fold(0.0, |acc, _| acc + one));
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let p = CopulaParams::independent();
        assert!(matches!(copula_loss(&[], &[], &p), Err(Error::DegenerateInput(_))));
        let l = LabelVector { y1: 0.0, y2: 0.0, y3: true, y4: false };
        assert!(matches!(
            copula_loss(&[l, l], &[MarginalPrediction::default()], &p),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sigma_examples() {
        let (s, _) = estimate_sigmas(&[-1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        let x = [0.3, -1.2, 2.2, 0.7];
        let scaled: Vec<f64> = x.iter().map(|v| -3.0 * v).collect();
        let (a, b) = estimate_sigmas(&x, &scaled).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-14);
        assert!(matches!(
            estimate_sigmas(&[1.0, 1.0, 1.0], &x),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(estimate_sigmas(&[1.0], &x), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn sigma_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (s, _) = estimate_sigmas(&draws, &draws).unwrap();
        assert!((1.95..=2.05).contains(&s), "sigma_hat={s}");
    }

    #[test]
    fn gamma_perfect_correlation_is_projected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z1: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let s3: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let s4: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        let raw = score_correlations(&z1, &z1, &s3, &s4).unwrap();
        assert!((raw[0][1] - 1.0).abs() < 1e-12);
        let g = estimate_gamma(&z1, &z1, &s3, &s4).unwrap();
        assert!(g.get(0, 1) <= 1.0 - LAMBDA_MIN);
        assert!(g.min_eigenvalue() >= LAMBDA_MIN * (1.0 - 1e-9));
    }

    #[test]
    fn gamma_independent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut col = || -> Vec<f64> { (0..10_000).map(|_| rng.sample(StandardNormal)).collect() };
        let (a, b, c, d) = (col(), col(), col(), col());
        let g = estimate_gamma(&a, &b, &c, &d).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(g.get(i, j).abs() < 0.05, "({i},{j}) = {}", g.get(i, j));
            }
        }
    }

    #[test]
    fn gamma_cross_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut col = || -> Vec<f64> { (0..10_000).map(|_| rng.sample(StandardNormal)).collect() };
        let (z1, z2, noise, s4) = (col(), col(), col(), col());
        let s3: Vec<f64> = z1.iter().zip(&noise).map(|(a, e)| 0.8 * a + 0.6 * e).collect();
        let g = estimate_gamma(&z1, &z2, &s3, &s4).unwrap();
        assert!((0.75..=0.85).contains(&g.get(0, 2)), "{}", g.get(0, 2));
    }

    #[test]
    fn gamma_rejects_constant_and_short_inputs() {
        let v = [0.1, 0.5, -0.3, 0.9];
        assert!(matches!(
            estimate_gamma(&v, &v, &[1.0; 4], &v),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            estimate_gamma(&v[..2], &v[..2], &v[..2], &v[..2]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn projection_fixed_points() {
        let id = CorrelationMatrix4::identity();
        assert_eq!(project_correlation(id.as_array()), id);
        let g = CorrelationMatrix4::from_offdiag([0.7, 0.4, 0.4, 0.4, 0.4, 0.7]).unwrap();
        let p = project_correlation(g.as_array());
        for i in 0..4 {
            for j in 0..4 {
                assert!((p.get(i, j) - g.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn projection_repairs_indefinite_matrix() {
        let mut m = [[0.99; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m[2][3] = -0.99;
        m[3][2] = -0.99;
        assert!(CorrelationMatrix4::from_matrix(m).is_err());
        let p = project_correlation(m);
        let eig = SymmetricEigen::new(Matrix4::from_fn(|i, j| p.get(i, j))).eigenvalues;
        assert!(eig.min() >= LAMBDA_MIN * (1.0 - 1e-9), "{eig:?}");
        for i in 0..4 {
            assert_eq!(p.get(i, i), 1.0);
        }
    }

    #[test]
    fn degenerate_schur_complement_is_rejected() {
        // Unit-diagonal matrix whose binary latent is almost determined by q.
        let m = [
            [1.0, 0.0, 0.99999, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.99999, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(matches!(
            CorrelationMatrix4::from_matrix(m),
            Err(Error::DegenerateCorrelation(_))
        ));
    }

    #[test]
    fn params_json_round_trip() {
        let g = CorrelationMatrix4::from_offdiag([0.7, 0.4, 0.4, 0.4, 0.4, 0.7]).unwrap();
        let mut p = CopulaParams::new(g, 0.61, 0.58).unwrap();
        p.meta.source_run = "run-1".into();
        p.meta.sample_count = 1200;
        let s = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["gamma"].as_array().unwrap().len(), 4);
        assert_eq!(v["meta"]["sample_count"], 1200);
        assert_eq!(CopulaParams::from_json(&s).unwrap(), p);
        let bad = s.replace("0.61", "-0.61");
        assert!(CopulaParams::from_json(&bad).is_err());
    }

    #[test]
    fn sampling_saturated_marginal() {
        let p = CopulaParams::independent();
        let m = CopulaMarginals { mu1: 0.0, mu2: 0.0, p3: 1.0 - 1e-9, p4: 0.5 };
        let draws = sample_copula(&p, &m, 5000, 1).unwrap();
        assert!(draws.iter().all(|l| l.y3));
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = CorrelationMatrix4::from_offdiag([0.7, 0.4, 0.4, 0.4, 0.4, 0.7]).unwrap();
        let p = CopulaParams::new(g, 1.0, 2.0).unwrap();
        let m = CopulaMarginals { mu1: 1.0, mu2: 2.0, p3: 0.3, p4: 0.6 };
        assert_eq!(sample_copula(&p, &m, 50, 9).unwrap(), sample_copula(&p, &m, 50, 9).unwrap());
    }

    #[test]
    fn sampling_mean_within_ci() {
        let p = CopulaParams::new(CorrelationMatrix4::identity(), 1.5, 1.0).unwrap();
        let m = CopulaMarginals { mu1: 24.0, mu2: 0.0, p3: 0.3, p4: 0.6 };
        let n = 100_000;
        let draws = sample_copula(&p, &m, n, 77).unwrap();
        let mean_y1 = draws.iter().map(|l| l.y1).sum::<f64>() / n as f64;
        assert!((mean_y1 - 24.0).abs() <= 3.0 * 1.5 / (n as f64).sqrt());
    }

    #[test]
    fn sampling_reproduces_continuous_correlation() {
        let g = CorrelationMatrix4::from_offdiag([0.7, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = CopulaParams::new(g, 2.0, 0.5).unwrap();
        let m = CopulaMarginals { mu1: 3.0, mu2: -1.0, p3: 0.5, p4: 0.5 };
        let draws = sample_copula(&p, &m, 100_000, 2024).unwrap();
        let a: Vec<f64> = draws.iter().map(|l| (l.y1 - 3.0) / 2.0).collect();
        let b: Vec<f64> = draws.iter().map(|l| (l.y2 + 1.0) / 0.5).collect();
        let r = pearson(&a, &b).unwrap();
        assert!((0.68..=0.72).contains(&r), "r={r}");
    }

    fn offdiag_strategy() -> impl Strategy<Value = [f64; 6]> {
        proptest::array::uniform6(-0.6f64..0.6)
    }

    proptest! {
        #[test]
        fn projection_always_valid(raw in proptest::array::uniform6(-1.0f64..1.0)) {
            let [g12, g13, g14, g23, g24, g34] = raw;
            let m = [
                [1.0, g12, g13, g14],
                [g12, 1.0, g23, g24],
                [g13, g23, 1.0, g34],
                [g14, g24, g34, 1.0],
            ];
            let p = project_correlation(m);
            prop_assert!(p.min_eigenvalue() >= LAMBDA_MIN * (1.0 - 1e-9));
            for i in 0..4 {
                prop_assert_eq!(p.get(i, i), 1.0);
                for j in 0..4 {
                    prop_assert_eq!(p.get(i, j), p.get(j, i));
                }
            }
        }

        #[test]
        fn four_cases_sum_to_one(
            raw in offdiag_strategy(),
            q in proptest::array::uniform2(-3.0f64..3.0),
            t in proptest::array::uniform2(-3.0f64..3.0),
        ) {
            let g = project_correlation({
                let [g12, g13, g14, g23, g24, g34] = raw;
                [[1.0, g12, g13, g14], [g12, 1.0, g23, g24], [g13, g23, 1.0, g34], [g14, g24, g34, 1.0]]
            });
            let c = conditional_latent(q, &g).unwrap();
            let total: f64 = [(true, true), (true, false), (false, true), (false, false)]
                .iter()
                .map(|&(a, b)| rectangle_prob(a, b, t[0], t[1], &c).value)
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-10, "total={}", total);
        }

        #[test]
        fn threshold_monotone(a in -30.0f64..30.0, d in 0.0f64..5.0) {
            prop_assert!(binary_threshold(a + d) >= binary_threshold(a));
        }
    }
}
