//! Randomized comparison of the closed-form density against the quadrature
//! oracle, plus normalization of the density over the label space.
//!
//! `cargo run --release --example oracle_check -- 100 3`

use bicopula::oracle::{mc_normalization, oracle_check, quad_normalization, random_case, QuadratureSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bicopula::Result<()> {
    let mut args = std::env::args().skip(1);
    let cases = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let rep = oracle_check(cases, seed, &QuadratureSpec::default(), 1e-5)?;
    let worst = rep.rows.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("at least one case");
    println!(
        "{} cases, max relative error {:.2e} ({}), {} redrawn",
        rep.cases,
        rep.max_rel_err,
        if rep.pass { "pass" } else { "FAIL" },
        rep.redrawn
    );
    println!("worst case: closed {:.6e} vs numeric {:.6e}", worst.closed_form, worst.numeric);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..3 {
        let c = random_case(&mut rng);
        let q = quad_normalization(&c.pred, &c.params, 24)?;
        let mc = mc_normalization(&c.pred, &c.params, 200_000, seed)?;
        println!("total mass: quadrature {q:.6}, Monte Carlo {:.4} ± {:.4}", mc.mean, mc.std_error);
    }
    Ok(())
}
