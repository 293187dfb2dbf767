//! Generates a paired-eye dataset, writes it, reads it back and prints a
//! few patients with a coarse rendering of one image.

use bicopula::nn::Eye;
use bicopula::synthdata::{Dataset, SynthConfig};

fn main() -> bicopula::Result<()> {
    let cfg = SynthConfig { n_patients: 500, seed: 7, ..Default::default() };
    let ds = Dataset::generate(&cfg)?;
    let dir = std::env::temp_dir().join(format!("bicopula-example-{}", ds.dataset_id()));
    ds.write(&dir)?;
    let back = Dataset::read(&dir)?;
    assert_eq!(back, ds);
    println!("dataset {} written to {}", ds.dataset_id(), dir.display());

    let n = ds.len() as f64;
    let rate = |f: fn(&bicopula::copula::LabelVector) -> bool| ds.labels.iter().filter(|l| f(l)).count() as f64 / n;
    println!("HM prevalence OS {:.3}, OD {:.3}", rate(|l| l.y3), rate(|l| l.y4));

    println!("\npatient   AL OS   AL OD  HM OS HM OD");
    for (i, l) in ds.labels.iter().take(5).enumerate() {
        println!("{i:>7} {:>7.2} {:>7.2} {:>6} {:>5}", l.y1, l.y2, u8::from(l.y3), u8::from(l.y4));
    }

    let s = cfg.image_size;
    let img = ds.image(0, Eye::Os);
    println!("\npatient 0, OS:");
    for y in (0..s).step_by(2) {
        let line: String = (0..s)
            .map(|x| match img[y * s + x] {
                v if v > 0.8 => '#',
                v if v > 0.4 => '+',
                v if v > 0.15 => '.',
                _ => ' ',
            })
            .collect();
        println!("  {line}");
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
