use megatron_core::dataset::{load_dataset, DatasetKind, DatasetSpec};
use megatron_core::harness::{derive_sub_triggers, stage_gen_trigger, stage_poison, ExperimentConfig};
use megatron_core::metrics::{cda, sasr};
use megatron_core::poison::AttackMode;
use megatron_core::vit::{train, ImageSample};
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let per_class = get(1, 250.0) as usize;
    let sur_epochs = get(2, 10.0) as usize;
    let psteps = get(3, 80.0) as usize;
    let plr = get(4, 0.3);
    let tsize = get(5, 8.0) as usize;

    let mut cfg = ExperimentConfig::default();
    cfg.seed = 42;
    cfg.target_label = 1;
    cfg.dataset = DatasetSpec {
        kind: DatasetKind::Synthetic, path: None, classes: vec![0, 1],
        train_per_class: per_class, test_per_class: 50, seed: 0,
    };
    cfg.surrogate_model.mlp_ratio = 2;
    cfg.victim_model = cfg.surrogate_model.clone();
    cfg.surrogate_train.epochs = sur_epochs;
    cfg.surrogate_train.learning_rate = 0.1;
    cfg.surrogate_train.batch_size = 32;
    cfg.victim_train = cfg.surrogate_train.clone();
    cfg.trigger.width = tsize; cfg.trigger.height = tsize;
    cfg.trigger.top = 12; cfg.trigger.left = 12;
    cfg.trigger.max_iters = 150; cfg.trigger.lr = 0.05;
    cfg.poison.epsilon = 16.0 / 255.0;
    cfg.poison.steps = psteps; cfg.poison.lr = plr;
    cfg.poison.poison_rate = Some(0.1);
    cfg.poison.k = 8;
    cfg.poison.mode = AttackMode::OneToOne { source_label: 0 };
    let cfg = cfg.resolve();

    let d = load_dataset(&cfg.dataset, &cfg.surrogate_model).unwrap();
    let t0 = Instant::now();
    let surrogate = megatron_core::harness::stage_train_surrogate(&cfg, &d.train).unwrap();
    let s_acc = cda(&surrogate, &d.test).unwrap();
    println!("surrogate test acc {s_acc:.3} ({:.0}s)", t0.elapsed().as_secs_f64());

    let (trigger, subs) = stage_gen_trigger(&cfg, &surrogate, &d.train).unwrap();
    let _ = derive_sub_triggers(&trigger, &cfg).unwrap();
    let loc = (trigger.top, trigger.left);
    let t0 = Instant::now();
    let (poisoned_train, records) = stage_poison(&cfg, &surrogate, &d.train, &subs, loc).unwrap();
    let ratios: Vec<f64> = records.iter().filter(|r| r.initial_feature_dist > 0.0)
        .map(|r| r.final_feature_dist / r.initial_feature_dist).collect();
    let med = { let mut r = ratios.clone(); r.sort_by(|a,b| a.partial_cmp(b).unwrap()); r[r.len()/2] };
    println!("poison: n={} med_ratio={med:.3} ({:.0}s)", records.len(), t0.elapsed().as_secs_f64());

    let source_test: Vec<ImageSample> = d.test.iter().filter(|s| s.label == 0).cloned().collect();
    let poison_set: Vec<ImageSample> = records.iter().map(|r| r.poisoned.clone()).collect();

    for ep in [4usize, 6, 8, 12] {
        let mut tc = cfg.victim_train.clone();
        tc.epochs = ep;
        let victim = train(&cfg.victim_model, &tc, &poisoned_train).unwrap();
        let baseline = train(&cfg.victim_model, &tc, &d.train).unwrap();
        let v_cda = cda(&victim, &d.test).unwrap();
        let b_cda = cda(&baseline, &d.test).unwrap();
        let v_sasr = sasr(&victim, &source_test, &subs[0], loc, 1).unwrap();
        let b_sasr = sasr(&baseline, &source_test, &subs[0], loc, 1).unwrap();
        // How well does the victim fit the poisons (they are target-labeled)?
        let fit = poison_set.iter().filter(|s| victim.predict(s).unwrap() == 1).count() as f64
            / poison_set.len() as f64;
        println!("victim ep={ep:<3} cda={v_cda:.3}/{b_cda:.3} sasr={v_sasr:.3}/{b_sasr:.3} gap={:+.1}pp poison_fit={fit:.2}",
            (v_sasr - b_sasr) * 100.0);
    }
}
