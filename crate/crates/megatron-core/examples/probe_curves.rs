use megatron_core::trigger::{generate_trigger, InitMode, PcGradMode, TriggerConfig};
use megatron_core::vit::{train, ImageSample, ModelConfig, TrainConfig, VitModel};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig { image_size: 8, patch_size: 4, n_layers: 1, n_heads: 2,
        embed_dim: 8, n_classes: 2, mlp_ratio: 2, channels: 1 }
}

fn structured_sample(rng: &mut ChaCha8Rng, label: usize) -> ImageSample {
    let mut px = Array3::<f64>::zeros((1, 8, 8));
    for y in 0..8 {
        for x in 0..8 {
            let base: f64 = if label == 0 { 0.5 } else if (x + y) % 2 == 0 { 0.3 } else { 0.7 };
            px[[0, y, x]] = (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
        }
    }
    ImageSample::new(px, label).unwrap()
}

fn main() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let data: Vec<ImageSample> = (0..40).map(|i| structured_sample(&mut rng, i % 2)).collect();
    let tc = TrainConfig { epochs: 30, learning_rate: 0.1, batch_size: 8, seed: 3, weight_decay: 0.0 };
    let model = train(&cfg, &tc, &data).unwrap();
    let acc = data.iter().filter(|s| model.predict(s).unwrap() == s.label).count() as f64 / 40.0;
    println!("toy surrogate train acc = {acc}");

    let sources: Vec<ImageSample> = vec![structured_sample(&mut rng, 0)];
    let targets: Vec<ImageSample> = vec![structured_sample(&mut rng, 1)];
    for lr in [0.002, 0.005, 0.01] {
        for gamma in [1.0, 0.2] {
            let tcfg = TriggerConfig {
                width: 4, height: 4, top: 4, left: 4, gamma, lr,
                max_iters: 60, tau: 0.0, init_mode: InitMode::UniformRandom,
                diffusion_radius: 0, pcgrad_mode: PcGradMode::Standard,
            };
            let t = generate_trigger(&model, &sources, &targets, 1, &tcfg, 6).unwrap();
            let h = &t.loss_history;
            let good = (0..h.len()-10).filter(|&i| h[i+10] <= h[i] + 1e-12).count();
            println!("lr={lr:<6} gamma={gamma:<4} first={:.4} last={:.4} good={}/{}",
                h[0], h[h.len()-1], good, h.len()-10);
        }
    }
}
