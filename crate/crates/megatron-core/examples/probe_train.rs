use megatron_core::vit::{mean_cross_entropy, train, ImageSample, ModelConfig, TrainConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Class 0: smooth field; class 1: pixel checkerboard. Equal mean brightness,
// different within-patch structure (survives layer norm).
fn blob_dataset(n_per_class: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..2 * n_per_class {
        let label = i % 2;
        let mut px = Array3::<f64>::zeros((3, 8, 8));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let base: f64 = if label == 0 {
                        0.5
                    } else if (x + y) % 2 == 0 {
                        0.3
                    } else {
                        0.7
                    };
                    px[[c, y, x]] = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                }
            }
        }
        out.push(ImageSample::new(px, label).unwrap());
    }
    out
}

fn main() {
    let cfg = ModelConfig {
        image_size: 8, patch_size: 4, n_layers: 1, n_heads: 2,
        embed_dim: 8, n_classes: 2, mlp_ratio: 2, channels: 3,
    };
    let data = blob_dataset(20, 5);
    for lr in [0.02, 0.05, 0.1] {
        for epochs in [5usize, 20] {
            let tc = TrainConfig { epochs, learning_rate: lr, batch_size: 8, seed: 3, weight_decay: 0.0 };
            let model = train(&cfg, &tc, &data).unwrap();
            let ce = mean_cross_entropy(&model, &data).unwrap();
            let acc = data.iter().filter(|s| model.predict(s).unwrap() == s.label).count() as f64 / data.len() as f64;
            println!("lr={lr:<6} epochs={epochs:<3} ce={ce:.4} acc={acc:.3}");
        }
    }
}
