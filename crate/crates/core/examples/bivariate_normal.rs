//! Bivariate normal CDF and its partial derivatives, checked against the
//! closed form at the origin.

use bicopula::numcore::{bvn_cdf, bvn_cdf_dh, bvn_cdf_dk, std_normal_inv_cdf, BvnArgs, Prob};

fn main() -> bicopula::Result<()> {
    println!("{:>6} {:>14} {:>14}", "rho", "Phi2(0,0;rho)", "1/4+asin/2pi");
    for i in -4..=4 {
        let rho = f64::from(i) * 0.2;
        let exact = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
        println!("{rho:>6.2} {:>14.10} {exact:>14.10}", bvn_cdf(BvnArgs::new(0.0, 0.0, rho)));
    }

    let args = BvnArgs::new(0.3, -1.2, 0.65);
    println!("\nPhi2(0.3, -1.2; 0.65) = {:.12}", bvn_cdf(args));
    println!("d/dh = {:.12}, d/dk = {:.12}", bvn_cdf_dh(args), bvn_cdf_dk(args));

    let q = std_normal_inv_cdf(Prob::new(0.975)?)?;
    println!("Phi^-1(0.975) = {q:.12}");
    Ok(())
}
