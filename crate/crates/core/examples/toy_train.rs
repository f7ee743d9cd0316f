//! Trains on synthetic shapes and prints per-epoch accuracy and timing.
//!
//! `cargo run --release -p saol --example toy_train -- [epochs] [config.toml]`

use std::time::Instant;

use saol::config::RunConfig;
use saol::data::{gen_synthetic, Normalizer};
use saol::train::{mask_auc, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(2) {
        Some(p) => RunConfig::from_file(p.as_ref())?,
        None => RunConfig {
            base_channels: vec![8, 16, 32],
            ..RunConfig::default()
        },
    };
    if let Some(e) = args.get(1) {
        cfg.epochs = e.parse()?;
    }
    let train = gen_synthetic(cfg.train_count, cfg.data_seed, cfg.image_size, cfg.num_classes)?;
    let test = gen_synthetic(cfg.test_count, cfg.data_seed + 1, cfg.image_size, cfg.num_classes)?;
    let norm = Normalizer::fit(&train)?;
    let mut trainer = Trainer::new(cfg.clone(), norm)?;
    println!("params {} flops {}", trainer.model.param_count(), trainer.model.flops());
    let start = Instant::now();
    while trainer.epoch < cfg.epochs {
        let t = Instant::now();
        let l = trainer.train_epoch(&train)?;
        let e = trainer.evaluate(&test)?;
        let auc = mask_auc(&trainer.model, &trainer.norm, &test, cfg.cutmix_alpha, 100, 7)?;
        println!(
            "epoch {:>2} {:>6.2}s sl {:.4} ss1 {:.4} ss2 {:.4} sd {:.4} saol {:.3} gapfc {:.3} auc {:.3}",
            trainer.epoch,
            t.elapsed().as_secs_f64(),
            l.sl,
            l.ss1,
            l.ss2,
            l.sd,
            e.acc_saol,
            e.acc_gapfc,
            auc
        );
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
