//! Copula parameters recovered from synthetic labels when the marginal
//! predictions equal the generating means.

use bicopula::pipeline::run_copula_estimation;
use bicopula::synthdata::{Dataset, SynthConfig};

fn main() -> bicopula::Result<()> {
    let cfg = SynthConfig { n_patients: 10_000, image_size: 8, seed: 1, ..Default::default() };
    let ds = Dataset::generate(&cfg)?;
    let preds: Vec<_> = ds.latents.iter().map(|r| r.true_prediction()).collect();
    let est = run_copula_estimation(&preds, &ds.labels, "example", "-")?;
    let p = est.params();

    println!("sigma1 {:.4} (true {})  sigma2 {:.4} (true {})", p.sigma1, cfg.true_sigma1, p.sigma2, cfg.true_sigma2);
    println!("{:>28} {:>28}", "estimated Gamma", "true Gamma");
    for i in 0..4 {
        let row = |g: &bicopula::copula::CorrelationMatrix4| {
            (0..4).map(|j| format!("{:>7.3}", g.get(i, j))).collect::<String>()
        };
        println!("{} {}", row(&p.gamma), row(&cfg.true_gamma));
    }
    println!("\n{}", p.to_json()?);
    Ok(())
}
