use megatron_core::vit::{mean_cross_entropy, train, ImageSample, ModelConfig, TrainConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        image_size: 8, patch_size: 4, n_layers: 1, n_heads: 2,
        embed_dim: 8, n_classes: 2, mlp_ratio: 2, channels: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<ImageSample> = (0..2).map(|label| ImageSample::new(
        Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..1.0)), label).unwrap()).collect();
    for lr in [0.02f64, 0.1] {
        println!("--- lr {lr}");
        for epochs in 1..=15usize {
            let tc = TrainConfig { epochs, learning_rate: lr, batch_size: 2, seed: 3, weight_decay: 0.0 };
            let model = train(&cfg, &tc, &data).unwrap();
            let ce = mean_cross_entropy(&model, &data).unwrap();
            let maxw = model.params().named_views().iter().map(|(_, v)| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))).fold(0.0f64, f64::max);
            let s0 = model.forward(&data[0]).unwrap();
            let s1 = model.forward(&data[1]).unwrap();
            println!("ep={epochs:<3} ce={ce:.5} max|w|={maxw:.3} logits0={:?} logits1={:?}", s0.logits.to_vec(), s1.logits.to_vec());
        }
    }
}
