use megatron_core::dataset::{load_dataset, DatasetKind, DatasetSpec};
use megatron_core::vit::{train, ModelConfig, TrainConfig};

fn main() {
    let mut model_cfg = ModelConfig::default();
    model_cfg.mlp_ratio = 2;
    let spec = DatasetSpec {
        kind: DatasetKind::Synthetic, path: None, classes: vec![0, 1],
        train_per_class: 250, test_per_class: 50, seed: 0,
    };
    let d = load_dataset(&spec, &model_cfg).unwrap();
    for lr in [0.1f64, 0.15] {
        for seed in 0..4u64 {
            let tc = TrainConfig { epochs: 12, learning_rate: lr, batch_size: 32, seed, weight_decay: 0.0 };
            let model = train(&model_cfg, &tc, &d.train).unwrap();
            let te = d.test.iter().filter(|s| model.predict(s).unwrap() == s.label).count() as f64 / d.test.len() as f64;
            print!("lr={lr} s{seed}: {te:.2}  ");
        }
        println!();
    }
}
