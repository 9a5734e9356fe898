use megatron_core::rollout::{diffusion_area, diffusion_loss_coefficients, PixelRect};
use megatron_core::trigger::patch_with_pattern;
use megatron_core::vit::{ImageSample, ModelConfig, VitModel};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig { image_size: 8, patch_size: 4, n_layers: 1, n_heads: 2,
        embed_dim: 8, n_classes: 2, mlp_ratio: 2, channels: 1 };
    let model = VitModel::init(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let src = ImageSample::new(Array3::from_shape_fn((1, 8, 8), |_| rng.gen_range(0.0..1.0)), 0).unwrap();
    let tgt = ImageSample::new(Array3::from_shape_fn((1, 8, 8), |_| rng.gen_range(0.0..1.0)), 1).unwrap();
    let pattern = Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.0..1.0));

    let rect = PixelRect { top: 4, left: 4, height: 4, width: 4 };
    let area = diffusion_area(rect, &cfg, 0).unwrap();
    let p = cfg.token_count();
    let (coeffs, offset) = diffusion_loss_coefficients(&area, p);
    let reference = model.forward(&tgt).unwrap().last_layer_head_avg();

    // Frozen G from the CURRENT patched input.
    let patched = patch_with_pattern(&src, &pattern, 4, 4).unwrap();
    let mut df = model.forward_diff(&patched).unwrap();
    let frozen = df.attention_grads(1).unwrap();
    let la = df.loss_latent(&reference).unwrap();
    let lb = df.loss_diffusion_frozen(&frozen, &coeffs, offset).unwrap();
    println!("L_alpha = {:.6}  L_beta = {:.6}", df.loss_value(la), df.loss_value(lb));
    let ga = df.grad_wrt_input(la).unwrap();
    let gb = df.grad_wrt_input(lb).unwrap();

    // Evaluate the FIXED objective (same pair, same frozen G) along -grad.
    let eval_fixed = |pat: &Array3<f64>| -> (f64, f64) {
        let patched = patch_with_pattern(&src, pat, 4, 4).unwrap();
        let mut df = model.forward_diff(&patched).unwrap();
        let la = df.loss_latent(&reference).unwrap();
        let lb = df.loss_diffusion_frozen(&frozen, &coeffs, offset).unwrap();
        (df.loss_value(la), df.loss_value(lb))
    };
    let restrict = |g: &Array3<f64>| -> Array3<f64> {
        Array3::from_shape_fn((1, 4, 4), |(c, i, j)| g[[c, 4 + i, 4 + j]])
    };
    let (ga_t, gb_t) = (restrict(&ga), restrict(&gb));
    println!("|g_alpha|={:.3e} |g_beta|={:.3e}",
        ga_t.iter().map(|v| v*v).sum::<f64>().sqrt(),
        gb_t.iter().map(|v| v*v).sum::<f64>().sqrt());
    for lr in [0.0, 0.01, 0.05, 0.2, 1.0] {
        let pat_a = (&pattern - &(&ga_t * lr)).mapv(|v: f64| v.clamp(0.0, 1.0));
        let pat_b = (&pattern - &(&gb_t * lr)).mapv(|v: f64| v.clamp(0.0, 1.0));
        let (a1, _) = eval_fixed(&pat_a);
        let (_, b1) = eval_fixed(&pat_b);
        println!("lr={lr:<5} L_alpha(step on ga)={a1:.6}  L_beta(step on gb)={b1:.6}");
    }
}
