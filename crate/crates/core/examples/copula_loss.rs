//! Closed-form mixed copula density on one patient, its analytic gradient,
//! and the same density recomputed by direct numerical integration.

use bicopula::copula::{
    copula_loss, log_joint_constant, log_joint_density, CopulaParams, CorrelationMatrix4, LabelVector,
    MarginalPrediction,
};
use bicopula::oracle::{finite_diff_grad, joint_density_numeric, QuadratureSpec};

fn main() -> bicopula::Result<()> {
    // axial length of both eyes, high myopia flag of both eyes
    let gamma = CorrelationMatrix4::from_offdiag([0.7, 0.4, 0.4, 0.4, 0.4, 0.7])?;
    let params = CopulaParams::new(gamma, 0.5, 0.5)?;
    let label = LabelVector { y1: 24.6, y2: 24.1, y3: true, y4: false };
    let pred = MarginalPrediction { mu1: 24.3, mu2: 24.2, logit3: 0.4, logit4: -0.6 };

    let log_f = log_joint_density(&label, &pred, &params)?;
    let closed = (log_f + log_joint_constant(&params)).exp();
    let numeric = joint_density_numeric(&label, &pred, &params, &QuadratureSpec::default())?;
    println!("log density (without constant) {log_f:.10}");
    println!("density closed form {closed:.12e}");
    println!("density quadrature  {numeric:.12e}  rel err {:.2e}", (closed - numeric).abs() / numeric);

    let out = copula_loss(&[label], &[pred], &params)?;
    let g = out.grads[0];
    let x = [pred.mu1, pred.mu2, pred.logit3, pred.logit4];
    let fd = finite_diff_grad(
        |x| {
            let p = MarginalPrediction { mu1: x[0], mu2: x[1], logit3: x[2], logit4: x[3] };
            copula_loss(&[label], &[p], &params).unwrap().loss
        },
        &x,
        1e-6,
    );
    println!("\nloss {:.10}", out.loss);
    for (name, (a, b)) in ["d_mu1", "d_mu2", "d_logit3", "d_logit4"]
        .iter()
        .zip([g.d_mu1, g.d_mu2, g.d_logit3, g.d_logit4].iter().zip(&fd))
    {
        println!("{name:<9} analytic {a:>14.10}  central diff {b:>14.10}");
    }

    let ind = copula_loss(&[label], &[pred], &CopulaParams::independent())?;
    println!("\nwith Gamma = I the loss is 0.5*MSE + BCE: {:.10}", ind.loss);
    Ok(())
}
