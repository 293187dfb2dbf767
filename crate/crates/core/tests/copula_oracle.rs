//! Closed-form copula density, gradients and normalization against the
//! quadrature and finite-difference references.

use bicopula::copula::{
    copula_loss, log_joint_constant, log_joint_density, project_correlation, sigmoid,
    CopulaParams, CorrelationMatrix4, LabelVector, MarginalPrediction, rectangle_prob,
    conditional_latent,
};
use bicopula::numcore::{bvn_cdf, bvn_cdf_dh, std_normal_cdf, std_normal_pdf, BvnArgs};
use bicopula::oracle::{
    finite_diff_grad, gauss_legendre, joint_density_numeric, mc_normalization, oracle_check,
    quad_normalization, random_case, QuadratureSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `P(Z1 <= h, Z2 <= k)` as a one-dimensional integral of
/// `phi(x) Phi((k - rho x) / sqrt(1 - rho^2))` on composite Gauss–Legendre panels.
fn bvn_quadrature(h: f64, k: f64, rho: f64) -> f64 {
    let gl = gauss_legendre(40);
    let s = (1.0 - rho * rho).sqrt();
    let lo = -12.0;
    if h <= lo {
        return 0.0;
    }
    let panels = ((h - lo) / 0.25).ceil() as usize;
    let w = (h - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + w * (p as f64 + 0.5);
        for (x, wt) in gl.0.iter().zip(&gl.1) {
            let t = mid + 0.5 * w * x;
            total += 0.5 * w * wt * std_normal_pdf(t) * std_normal_cdf((k - rho * t) / s);
        }
    }
    total
}

#[test]
fn bvn_matches_one_dimensional_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let h = rng.random_range(-4.0..4.0);
        let k = rng.random_range(-4.0..4.0);
        let rho = rng.random_range(-0.99..0.99);
        let err = (bvn_cdf(BvnArgs::new(h, k, rho)) - bvn_quadrature(h, k, rho)).abs();
        worst = worst.max(err);
    }
    assert!(worst <= 1e-7, "max abs err {worst:e}");
}

#[test]
fn bvn_matches_two_dimensional_quadrature() {
    let (h, k, rho): (f64, f64, f64) = (0.3, -0.7, 0.6);
    let gl = gauss_legendre(64);
    let rule = |a: f64, b: f64| -> Vec<(f64, f64)> {
        let panels = ((b - a) / 0.5).ceil() as usize;
        let w = (b - a) / panels as f64;
        (0..panels)
            .flat_map(|p| {
                let mid = a + w * (p as f64 + 0.5);
                gl.0.iter().zip(&gl.1).map(move |(x, wt)| (mid + 0.5 * w * x, 0.5 * w * wt))
            })
            .collect()
    };
    let det = 1.0 - rho * rho;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
    let mut total = 0.0;
    for (x, wx) in rule(-10.0, h) {
        for &(y, wy) in &rule(-10.0, k) {
            total += wx * wy * norm * (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * det)).exp();
        }
    }
    assert!((bvn_cdf(BvnArgs::new(h, k, rho)) - total).abs() < 1e-7);
}

#[test]
fn bvn_dh_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..200 {
        let h = rng.random_range(-3.0..3.0);
        let k = rng.random_range(-3.0..3.0);
        let rho = rng.random_range(-0.95..0.95);
        let fd = finite_diff_grad(|x| bvn_cdf(BvnArgs::new(x[0], k, rho)), &[h], 1e-5)[0];
        let an = bvn_cdf_dh(BvnArgs::new(h, k, rho));
        // relative where the derivative is resolvable by differencing
        let tol = 1e-5 * an.abs().max(1e-6);
        assert!((an - fd).abs() <= tol, "({h},{k},{rho}): {an} vs {fd}");
    }
    let (h, k, rho) = (0.3, -0.7, 0.6);
    let fd = finite_diff_grad(|x| bvn_cdf(BvnArgs::new(x[0], k, rho)), &[h], 1e-5)[0];
    let an = bvn_cdf_dh(BvnArgs::new(h, k, rho));
    assert!(((an - fd) / an).abs() <= 1e-5);
}

#[test]
fn closed_form_matches_quadrature_oracle() {
    let report = oracle_check(100, 3, &QuadratureSpec::default(), 1e-5).unwrap();
    assert!(report.pass, "max rel err {:e}", report.max_rel_err);
}

#[test]
fn quadrature_self_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = random_case(&mut rng);
    let base = joint_density_numeric(&c.label, &c.pred, &c.params, &QuadratureSpec::default()).unwrap();
    let fine = QuadratureSpec { nodes_per_axis: 64, ..QuadratureSpec::default() };
    let finer = joint_density_numeric(&c.label, &c.pred, &c.params, &fine).unwrap();
    assert!(((base - finer) / finer).abs() < 1e-9);
}

#[test]
fn rectangle_matches_conditional_quadrature() {
    let g = CorrelationMatrix4::from_offdiag([0.0, 0.0, 0.0, 0.0, 0.0, 0.7]).unwrap();
    let cond = conditional_latent([0.0, 0.0], &g).unwrap();
    let got = rectangle_prob(true, true, 0.0, 0.0, &cond).value;
    let want = bvn_quadrature(0.0, 0.0, 0.7);
    assert!((got - want).abs() < 1e-10);
}

fn loss_at(label: &LabelVector, params: &CopulaParams, x: &[f64]) -> f64 {
    let pred = MarginalPrediction { mu1: x[0], mu2: x[1], logit3: x[2], logit4: x[3] };
    copula_loss(&[*label], &[pred], params).unwrap().loss
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for i in 0..100 {
        let mut c = random_case(&mut rng);
        // near-degenerate success probabilities on a share of the cases
        match i % 5 {
            0 => c.pred.logit3 = (1e-5f64 / (1.0 - 1e-5)).ln(),
            1 => c.pred.logit4 = ((1.0 - 1e-5) / 1e-5f64).ln(),
            _ => {}
        }
        let p = c.pred;
        let x = [p.mu1, p.mu2, p.logit3, p.logit4];
        let fd = finite_diff_grad(|x| loss_at(&c.label, &c.params, x), &x, 1e-5);
        let g = copula_loss(&[c.label], &[p], &c.params).unwrap().grads[0];
        let an = [g.d_mu1, g.d_mu2, g.d_logit3, g.d_logit4];
        for j in 0..4 {
            let scale = an[j].abs().max(1e-6);
            assert!(((an[j] - fd[j]) / scale).abs() <= 1e-4, "case {i} comp {j}: {} vs {}", an[j], fd[j]);
        }
    }
}

#[test]
fn identity_copula_reduces_to_mse_plus_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = CopulaParams::independent();
    let n = 64;
    let preds: Vec<MarginalPrediction> = (0..n)
        .map(|_| MarginalPrediction {
            mu1: rng.random_range(-2.0..2.0),
            mu2: rng.random_range(-2.0..2.0),
            logit3: rng.random_range(-6.0..6.0),
            logit4: rng.random_range(-6.0..6.0),
        })
        .collect();
    let labels: Vec<LabelVector> = (0..n)
        .map(|_| LabelVector {
            y1: rng.random_range(-3.0..3.0),
            y2: rng.random_range(-3.0..3.0),
            y3: rng.random_bool(0.4),
            y4: rng.random_bool(0.6),
        })
        .collect();
    let out = copula_loss(&labels, &preds, &params).unwrap();
    let bce = |l: f64, y: bool| if y { -sigmoid(l).ln() } else { -sigmoid(-l).ln() };
    let mut want = 0.0;
    for (l, p) in labels.iter().zip(&preds) {
        let (r1, r2) = (l.y1 - p.mu1, l.y2 - p.mu2);
        want += 0.5 * (r1 * r1 + r2 * r2) + bce(p.logit3, l.y3) + bce(p.logit4, l.y4);
    }
    assert!((out.loss - want).abs() <= 1e-10 * want.abs().max(1.0));
    for ((g, l), p) in out.grads.iter().zip(&labels).zip(&preds) {
        assert!((g.d_mu1 + (l.y1 - p.mu1)).abs() < 1e-10);
        assert!((g.d_mu2 + (l.y2 - p.mu2)).abs() < 1e-10);
        assert!((g.d_logit3 - (sigmoid(p.logit3) - f64::from(u8::from(l.y3)))).abs() < 1e-10);
        assert!((g.d_logit4 - (sigmoid(p.logit4) - f64::from(u8::from(l.y4)))).abs() < 1e-10);
    }
}

#[test]
fn density_normalizes_by_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let c = random_case(&mut rng);
        let mass = quad_normalization(&c.pred, &c.params, 24).unwrap();
        assert!((mass - 1.0).abs() <= 1e-3, "mass={mass}");
    }
    let strong = project_correlation([
        [1.0, 0.6, 0.6, -0.6],
        [0.6, 1.0, -0.6, 0.6],
        [0.6, -0.6, 1.0, 0.6],
        [-0.6, 0.6, 0.6, 1.0],
    ]);
    let params = CopulaParams::new(strong, 0.8, 1.2).unwrap();
    let pred = MarginalPrediction { mu1: 1.0, mu2: -1.0, logit3: 0.5, logit4: -0.8 };
    let mass = quad_normalization(&pred, &params, 24).unwrap();
    assert!((mass - 1.0).abs() <= 1e-3, "mass={mass}");
}

#[test]
fn density_normalizes_by_importance_sampling() {
    let pred = MarginalPrediction { mu1: 0.3, mu2: 24.0, logit3: -0.5, logit4: 1.0 };
    for gamma in [
        CorrelationMatrix4::identity(),
        CorrelationMatrix4::from_offdiag([0.7, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
    ] {
        let params = CopulaParams::new(gamma, 0.9, 1.3).unwrap();
        let est = mc_normalization(&pred, &params, 100_000, 4242).unwrap();
        assert!((est.mean - 1.0).abs() <= 3.0 * est.std_error, "{est:?}");
    }
}

#[test]
fn closed_form_constant_reinstates_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let c = random_case(&mut rng);
    let closed = (log_joint_density(&c.label, &c.pred, &c.params).unwrap() + log_joint_constant(&c.params)).exp();
    let numeric = joint_density_numeric(&c.label, &c.pred, &c.params, &QuadratureSpec::default()).unwrap();
    assert!(((closed - numeric) / numeric).abs() < 1e-5);
}
