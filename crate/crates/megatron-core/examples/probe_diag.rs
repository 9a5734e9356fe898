use megatron_core::dataset::{load_dataset, DatasetKind, DatasetSpec};
use megatron_core::harness::{stage_gen_trigger, stage_poison, stage_train_surrogate, ExperimentConfig};
use megatron_core::metrics::sasr;
use megatron_core::poison::AttackMode;
use megatron_core::trigger::{patch_image, patch_with_pattern};
use megatron_core::vit::{train, ImageSample};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let per_class = get(1, 250.0) as usize;
    let titers = get(2, 150.0) as usize;
    let tlr = get(3, 0.05);
    let psteps = get(4, 80.0) as usize;
    let plr = get(5, 0.3);

    let mut cfg = ExperimentConfig::default();
    cfg.seed = 42;
    cfg.target_label = 1;
    cfg.dataset = DatasetSpec {
        kind: DatasetKind::Synthetic, path: None, classes: vec![0, 1],
        train_per_class: per_class, test_per_class: 50, seed: 0,
    };
    cfg.surrogate_model.mlp_ratio = 2;
    cfg.victim_model = cfg.surrogate_model.clone();
    cfg.surrogate_train.epochs = 12;
    cfg.surrogate_train.learning_rate = 0.1;
    cfg.surrogate_train.batch_size = 32;
    cfg.victim_train = cfg.surrogate_train.clone();
    cfg.trigger.width = 8; cfg.trigger.height = 8;
    cfg.trigger.top = 12; cfg.trigger.left = 12;
    cfg.trigger.max_iters = titers; cfg.trigger.lr = tlr;
    cfg.poison.epsilon = 16.0 / 255.0;
    cfg.poison.steps = psteps; cfg.poison.lr = plr;
    cfg.poison.poison_rate = Some(0.1);
    cfg.poison.k = 8;
    cfg.poison.mode = AttackMode::OneToOne { source_label: 0 };
    let cfg = cfg.resolve();

    let d = load_dataset(&cfg.dataset, &cfg.surrogate_model).unwrap();
    let surrogate = stage_train_surrogate(&cfg, &d.train).unwrap();
    let (trigger, subs) = stage_gen_trigger(&cfg, &surrogate, &d.train).unwrap();
    let loc = (trigger.top, trigger.left);
    println!("trigger loss: first={:.4} last={:.4} iters={}",
        trigger.loss_history[0], trigger.final_loss, trigger.iterations_used);

    let source_test: Vec<ImageSample> = d.test.iter().filter(|s| s.label == 0).cloned().collect();
    // How confusable are patched sources for the surrogate itself?
    let s_sub = sasr(&surrogate, &source_test, &subs[0], loc, 1).unwrap();
    let full_patched: f64 = source_test.iter()
        .map(|s| patch_with_pattern(s, &trigger.pattern, loc.0, loc.1).unwrap())
        .filter(|p| surrogate.predict(p).unwrap() == 1).count() as f64 / source_test.len() as f64;
    let clean_conf: f64 = source_test.iter()
        .filter(|s| surrogate.predict(s).unwrap() == 1).count() as f64 / source_test.len() as f64;
    println!("surrogate: clean_source->target {clean_conf:.2}  sub0-patched {s_sub:.2}  full-trigger {full_patched:.2}");

    let (poisoned_train, records) = stage_poison(&cfg, &surrogate, &d.train, &subs, loc).unwrap();
    // Perturbation structure.
    let (mut in_l1, mut out_l1, mut cos_acc) = (0.0, 0.0, 0.0);
    for rec in &records {
        let orig = &d.train[rec.target_origin].pixels;
        let delta = &rec.poisoned.pixels - orig;
        let sub = &subs[rec.sub_trigger_index];
        let (mut di, mut do_, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (c, h, w) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v: f64 = delta[[ch, i, j]];
                    let inside = i >= loc.0 && i < loc.0 + 8 && j >= loc.1 && j < loc.1 + 8;
                    if inside {
                        di += v.abs();
                        let p = sub.pattern[[ch, i - loc.0, j - loc.1]];
                        dot += v * p; na += v * v; nb += p * p;
                    } else { do_ += v.abs(); }
                }
            }
        }
        in_l1 += di / (c * 64) as f64;
        out_l1 += do_ / (c * (h * w - 64)) as f64;
        if na > 0.0 && nb > 0.0 { cos_acc += dot / (na.sqrt() * nb.sqrt()); }
    }
    let n = records.len() as f64;
    println!("poison delta: mean|δ| in-rect={:.4} out={:.4}  cos(δ_rect, sub)={:+.3}",
        in_l1 / n, out_l1 / n, cos_acc / n);
    let ratios: Vec<f64> = records.iter().map(|r| r.final_feature_dist / r.initial_feature_dist).collect();
    println!("collision ratio mean={:.3}", ratios.iter().sum::<f64>() / n);

    // Victim-side transfer: feature distances poisons <-> their patched sources.
    let mut tc = cfg.victim_train.clone();
    tc.epochs = 12;
    let victim = train(&cfg.victim_model, &tc, &poisoned_train).unwrap();
    let baseline = train(&cfg.victim_model, &tc, &d.train).unwrap();
    for (name, m) in [("victim  ", &victim), ("baseline", &baseline)] {
        let mut d_pois = 0.0;
        let mut d_ref = 0.0;
        for rec in &records {
            let src = &d.train[rec.patched_source_id];
            let x_a = patch_image(src, &subs[rec.sub_trigger_index], loc.0, loc.1).unwrap();
            let fa = m.forward(&x_a).unwrap().features;
            let fp = m.forward(&rec.poisoned).unwrap().features;
            let ft = m.forward(&d.train[rec.target_origin]).unwrap().features;
            d_pois += (&fp - &fa).mapv(|v| v * v).sum().sqrt();
            d_ref += (&ft - &fa).mapv(|v| v * v).sum().sqrt();
        }
        println!("{name}: dist(poison, x_a)={:.3}  dist(clean x_t, x_a)={:.3}", d_pois / n, d_ref / n);
    }
    let v_sasr = sasr(&victim, &source_test, &subs[0], loc, 1).unwrap();
    let b_sasr = sasr(&baseline, &source_test, &subs[0], loc, 1).unwrap();
    println!("sasr: victim={v_sasr:.3} baseline={b_sasr:.3}");
}
