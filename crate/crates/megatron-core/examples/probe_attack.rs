use megatron_core::dataset::{DatasetKind, DatasetSpec};
use megatron_core::harness::{run_experiment, ExperimentConfig};
use megatron_core::poison::AttackMode;
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let per_class = get(1, 250.0) as usize;
    let epochs = get(2, 8.0) as usize;
    let psteps = get(3, 60.0) as usize;
    let plr = get(4, 0.3);
    let tsize = get(5, 8.0) as usize;
    let victim_epochs = get(6, epochs as f64) as usize;
    let batch = get(7, 32.0) as usize;
    let radius = get(8, 0.0) as usize;
    let titers = get(9, 150.0) as usize;
    let seed = get(10, 42.0) as u64;

    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.target_label = 1;
    cfg.dataset = DatasetSpec {
        kind: DatasetKind::Synthetic, path: None, classes: vec![0, 1],
        train_per_class: per_class, test_per_class: (per_class / 5).max(25), seed: 0,
    };
    cfg.surrogate_model.mlp_ratio = 2;
    cfg.victim_model = cfg.surrogate_model.clone();
    cfg.surrogate_train.epochs = epochs;
    cfg.surrogate_train.learning_rate = 0.1;
    cfg.surrogate_train.batch_size = batch;
    cfg.victim_train = cfg.surrogate_train.clone();
    cfg.victim_train.epochs = victim_epochs;
    cfg.trigger.width = tsize; cfg.trigger.height = tsize;
    cfg.trigger.top = 12; cfg.trigger.left = 12;
    cfg.trigger.max_iters = titers; cfg.trigger.lr = 0.05;
    cfg.trigger.diffusion_radius = radius;
    cfg.poison.epsilon = 16.0 / 255.0;
    cfg.poison.steps = psteps; cfg.poison.lr = plr;
    cfg.poison.poison_rate = Some(0.1);
    cfg.poison.k = 8;
    cfg.poison.mode = AttackMode::OneToOne { source_label: 0 };
    cfg.evaluation.shifts = vec![0, 1, 2];
    let cfg = cfg.resolve();

    let t0 = Instant::now();
    let dir = std::path::PathBuf::from(format!("/tmp/ap_{per_class}_{epochs}_{victim_epochs}_{tsize}_{radius}_{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    let report = run_experiment(&cfg, &dir).unwrap();
    println!("[{:.0}s] pc={per_class} ep={epochs}/{victim_epochs} t={tsize}px r={radius} ps={psteps} plr={plr} b={batch} seed={seed}", t0.elapsed().as_secs_f64());
    println!("  cda={:.3}/{:.3}  sasr={:.3}/{:.3} gap={:.1}pp  scda={:.3} psnr={:.1}",
        report.cda, report.baseline_cda, report.sasr, report.baseline_sasr,
        (report.sasr - report.baseline_sasr) * 100.0, report.scda, report.psnr_mean);
    let shifts: Vec<String> = report.shift_sasr.iter().map(|s| format!("{}:{:.2}", s.shift_tokens, s.sasr)).collect();
    println!("  shifts {}", shifts.join(" "));
}
