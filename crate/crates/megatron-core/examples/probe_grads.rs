use megatron_core::vit::{ImageSample, ModelConfig, Params, VitModel};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        image_size: 8, patch_size: 4, n_layers: 1, n_heads: 2,
        embed_dim: 8, n_classes: 2, mlp_ratio: 2, channels: 3,
    };
    let model = VitModel::init(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = ImageSample::new(
        Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..1.0)), 1).unwrap();

    let stack = model.forward(&img).unwrap();
    println!("logits: {:?}", stack.logits);
    println!("features[0..4]: {:?}", &stack.features.to_vec()[0..4]);

    let ce = |m: &VitModel| {
        let s = m.forward(&img).unwrap();
        let z = &s.logits;
        let max = z.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = max + z.mapv(|v| (v - max).exp()).sum().ln();
        lse - z[img.label]
    };
    let step = 1e-5;
    let probes: Vec<(&str, Box<dyn Fn(&mut Params, f64)>)> = vec![
        ("head_w[0,0]", Box::new(|p: &mut Params, d: f64| p.head_w[[0,0]] += d)),
        ("patch_w[0,0]", Box::new(|p: &mut Params, d: f64| p.patch_w[[0,0]] += d)),
        ("layer0.wq[0,0]", Box::new(|p: &mut Params, d: f64| p.layers[0].wq[[0,0]] += d)),
        ("layer0.mlp_w1[0,0]", Box::new(|p: &mut Params, d: f64| p.layers[0].mlp_w1[[0,0]] += d)),
        ("cls[0,0]", Box::new(|p: &mut Params, d: f64| p.cls[[0,0]] += d)),
    ];
    for (name, f) in probes {
        let mut pp = model.params().clone();
        f(&mut pp, step);
        let mp = VitModel::new(cfg.clone(), pp).unwrap();
        let mut pm = model.params().clone();
        f(&mut pm, -step);
        let mm = VitModel::new(cfg.clone(), pm).unwrap();
        let g = (ce(&mp) - ce(&mm)) / (2.0 * step);
        println!("fd dCE/d{name} = {g:.6e}");
    }
}
