//! Per-layer trainable parameter counts for the published reference
//! dimensions and for each architecture variant of the default config.

use prectime::model::{count_params, LayerDims, ModelConfig, PrecTime, Variant};

fn main() -> prectime::Result<()> {
    let reference = count_params(&LayerDims::reference(), Variant::Full);
    println!("reference dimensions:");
    for l in &reference.layers {
        println!("  {:<14} {:<18} {:>10}", l.name, l.kind, l.count);
    }
    println!("  {:<33} {:>10}\n", "total", reference.total);

    // constructing the model allocates every tensor, so the totals are
    // checked against real storage, not just the formula
    let cfg = ModelConfig::default();
    for variant in [Variant::Full, Variant::A1, Variant::A2, Variant::A3] {
        let model = PrecTime::with_variant(cfg.clone(), variant, 0)?;
        let counts = model.count_params();
        assert_eq!(counts.total, model.params().numel());
        println!("{variant:>4}: {:>10} parameters in {} layers", counts.total, counts.layers.len());
    }
    Ok(())
}
