use megatron_core::dataset::{load_dataset, DatasetKind, DatasetSpec};
use megatron_core::vit::{train, ModelConfig, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let per_class: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(250);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let mut model_cfg = ModelConfig::default();
    model_cfg.mlp_ratio = 2;
    let spec = DatasetSpec {
        kind: DatasetKind::Synthetic, path: None, classes: vec![0, 1],
        train_per_class: per_class, test_per_class: per_class / 5, seed: 0,
    };
    let d = load_dataset(&spec, &model_cfg).unwrap();
    let t0 = Instant::now();
    let tc = TrainConfig { epochs, learning_rate: lr, batch_size: 32, seed: 2, weight_decay: 0.0 };
    let model = train(&model_cfg, &tc, &d.train).unwrap();
    let acc_tr = d.train.iter().filter(|s| model.predict(s).unwrap() == s.label).count() as f64 / d.train.len() as f64;
    let acc_te = d.test.iter().filter(|s| model.predict(s).unwrap() == s.label).count() as f64 / d.test.len() as f64;
    println!("per_class={per_class} epochs={epochs} lr={lr}: train_acc={acc_tr:.3} test_acc={acc_te:.3} ({:.0}s)", t0.elapsed().as_secs_f64());
}
