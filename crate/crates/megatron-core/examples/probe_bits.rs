use megatron_core::dataset::{load_dataset, load_poisoned_dataset, save_poisoned_dataset, DatasetSpec, DatasetKind};
use megatron_core::harness::{derive_sub_triggers, stage_gen_trigger, stage_poison, stage_train_surrogate, ExperimentConfig};

fn main() {
    // Mirror /tmp/tiny.toml
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.dataset = DatasetSpec { kind: DatasetKind::Synthetic, path: None, classes: vec![0,1], train_per_class: 30, test_per_class: 10, seed: 0 };
    cfg.surrogate_model.image_size = 16; cfg.surrogate_model.n_layers = 2; cfg.surrogate_model.n_heads = 2;
    cfg.surrogate_model.embed_dim = 16; cfg.surrogate_model.mlp_ratio = 2;
    cfg.victim_model = cfg.surrogate_model.clone();
    cfg.surrogate_train.epochs = 3; cfg.surrogate_train.learning_rate = 0.1; cfg.surrogate_train.batch_size = 16;
    cfg.victim_train = cfg.surrogate_train.clone();
    cfg.trigger.width = 4; cfg.trigger.height = 4; cfg.trigger.top = 8; cfg.trigger.left = 4;
    cfg.trigger.lr = 0.01; cfg.trigger.max_iters = 10;
    cfg.poison.poison_rate = None; cfg.poison.poison_count = 6; cfg.poison.k = 2;
    cfg.poison.steps = 4; cfg.poison.lr = 0.1;
    cfg.poison.mode = megatron_core::poison::AttackMode::OneToOne { source_label: 0 };
    let cfg = cfg.resolve();

    let d = load_dataset(&cfg.dataset, &cfg.surrogate_model).unwrap();
    let surrogate = stage_train_surrogate(&cfg, &d.train).unwrap();
    let (trigger, _) = stage_gen_trigger(&cfg, &surrogate, &d.train).unwrap();
    let subs = derive_sub_triggers(&trigger, &cfg).unwrap();
    let (poisoned, records) = stage_poison(&cfg, &surrogate, &d.train, &subs, (trigger.top, trigger.left)).unwrap();
    let dir = std::path::Path::new("/tmp/bits");
    let _ = std::fs::remove_dir_all(dir);
    save_poisoned_dataset(dir, &poisoned, &records).unwrap();
    let (loaded, _) = load_poisoned_dataset(dir).unwrap();
    let mut diffs = 0;
    for (i, (a, b)) in poisoned.iter().zip(loaded.iter()).enumerate() {
        for ((c, y, x), (va, vb)) in a.pixels.indexed_iter().zip(b.pixels.iter()).map(|(iv, vb)| (iv.0, (iv.1, vb))) {
            if va != vb {
                if diffs < 5 {
                    println!("sample {i} ({c},{y},{x}): mem {va:.20e} vs loaded {vb:.20e}  (mem*65535={})", va * 65535.0);
                }
                diffs += 1;
            }
        }
    }
    println!("total differing pixels: {diffs}");
}
