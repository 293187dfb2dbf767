//! The bi-channel transformer: parameter budget, zero-init identity with the
//! frozen trunk, per-eye outputs and a checkpoint round trip.

use bicopula::nn::{checkpoint, BiChannelModel, Eye, ForwardMode, ModelConfig};

fn main() -> bicopula::Result<()> {
    let mut model = BiChannelModel::new(ModelConfig::default(), 0)?;
    let report = model.trainable_parameter_report();
    println!("parameters: {} total, {} trainable ({:.2}%)", report.n_total, report.n_trainable, 100.0 * report.trainable_fraction());
    for (group, n) in &report.per_group {
        println!("  {group:<8} {n}");
    }

    let len = model.config().image_len();
    let images: Vec<f64> = (0..2 * len).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    let full = model.predict(&images, 2, Eye::Os, ForwardMode::Full)?;
    let trunk = model.predict(&images, 2, Eye::Os, ForwardMode::FrozenTrunk)?;
    println!("\nfresh model equals frozen trunk bitwise: {}", full == trunk);

    // give the OD adapters some weight so the eyes diverge
    for id in model.adapter_ids(Eye::Od) {
        let v: Vec<f64> = model.store().get(id).data().iter().enumerate().map(|(i, _)| 0.05 * ((i % 7) as f64 - 3.0)).collect();
        model.store_mut().assign(id, &v)?;
    }
    let os = model.predict(&images, 2, Eye::Os, ForwardMode::Full)?;
    let od = model.predict(&images, 2, Eye::Od, ForwardMode::Full)?;
    for i in 0..2 {
        println!("image {i}: OS (mu {:.5}, logit {:.5})  OD (mu {:.5}, logit {:.5})", os[i].0, os[i].1, od[i].0, od[i].1);
    }

    let path = std::env::temp_dir().join("bicopula-example.ckpt");
    checkpoint::save(&model, &path)?;
    let back = checkpoint::load(&path)?;
    println!("\ncheckpoint round trip identical: {}", back.predict(&images, 2, Eye::Od, ForwardMode::Full)? == od);
    println!("frozen checksum {}", checkpoint::stored_checksum(&path)?);
    std::fs::remove_file(path).ok();
    Ok(())
}
