use megatron_core::dataset::{load_dataset, DatasetSpec};
use megatron_core::vit::{train, ModelConfig, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default(); // 32x32, 4 layers, dim 64
    let spec = DatasetSpec {
        train_per_class: 100,
        test_per_class: 10,
        ..DatasetSpec::default()
    };
    let d = load_dataset(&spec, &cfg).unwrap();
    let t0 = Instant::now();
    let tc = TrainConfig { epochs: 1, learning_rate: 0.05, batch_size: 32, seed: 1, weight_decay: 0.0 };
    let model = train(&cfg, &tc, &d.train).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("1 epoch over 200 samples: {dt:.2}s  ({:.1} ms/sample fwd+bwd)", dt * 1000.0 / 200.0);
    let t0 = Instant::now();
    let acc = d.test.iter().filter(|s| model.predict(s).unwrap() == s.label).count();
    println!("20 predictions: {:.3}s; acc {acc}/20", t0.elapsed().as_secs_f64());
    println!("threads: {}", rayon::current_num_threads());
}
