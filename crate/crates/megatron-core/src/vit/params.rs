//! Model parameters: initialization and flat named access.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

impl LayerParams {
    /// Field list in the stable flat order, with names.
    fn fields(&self) -> [(&'static str, ArrayViewD<'_, f64>); 16] {
        [
            ("ln1_gamma", self.ln1_gamma.view().into_dyn()),
            ("ln1_beta", self.ln1_beta.view().into_dyn()),
            ("wq", self.wq.view().into_dyn()),
            ("bq", self.bq.view().into_dyn()),
            ("wk", self.wk.view().into_dyn()),
            ("bk", self.bk.view().into_dyn()),
            ("wv", self.wv.view().into_dyn()),
            ("bv", self.bv.view().into_dyn()),
            ("wo", self.wo.view().into_dyn()),
            ("bo", self.bo.view().into_dyn()),
            ("ln2_gamma", self.ln2_gamma.view().into_dyn()),
            ("ln2_beta", self.ln2_beta.view().into_dyn()),
            ("mlp_w1", self.mlp_w1.view().into_dyn()),
            ("mlp_b1", self.mlp_b1.view().into_dyn()),
            ("mlp_w2", self.mlp_w2.view().into_dyn()),
            ("mlp_b2", self.mlp_b2.view().into_dyn()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// (patch_dim, embed_dim)
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    /// (1, embed_dim) class token
    pub cls: Array2<f64>,
    /// (p, embed_dim) learned additive positional embeddings
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Array1<f64>,
    pub final_beta: Array1<f64>,
    /// (embed_dim, n_classes)
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

const EMBED_STD: f64 = 0.02;

/// Xavier-style draw: std = sqrt(2/(fan_in + fan_out)).
fn xavier(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let std = (2.0 / (r + c) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((r, c), |_| normal.sample(rng))
}

fn embed_init(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
    Array2::from_shape_fn((r, c), |_| normal.sample(rng))
}

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let p = config.token_count();
        let pd = config.patch_dim();
        let mlp = d * config.mlp_ratio;
        let patch_w = xavier(&mut rng, pd, d);
        let cls = embed_init(&mut rng, 1, d);
        let pos = embed_init(&mut rng, p, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                wq: xavier(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: xavier(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: xavier(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: xavier(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                mlp_w1: xavier(&mut rng, d, mlp),
                mlp_b1: Array1::zeros(mlp),
                mlp_w2: xavier(&mut rng, mlp, d),
                mlp_b2: Array1::zeros(d),
            })
            .collect();
        let head_w = xavier(&mut rng, d, config.n_classes);
        Params {
            patch_w,
            patch_b: Array1::zeros(d),
            cls,
            pos,
            layers,
            final_gamma: Array1::ones(d),
            final_beta: Array1::zeros(d),
            head_w,
            head_b: Array1::zeros(config.n_classes),
        }
    }

    /// Named views over every tensor, in a stable order. The checkpoint
    /// format and the SGD update both rely on this ordering.
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("patch_w".into(), self.patch_w.view().into_dyn()),
            ("patch_b".into(), self.patch_b.view().into_dyn()),
            ("cls".into(), self.cls.view().into_dyn()),
            ("pos".into(), self.pos.view().into_dyn()),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            for (name, view) in lp.fields() {
                out.push((format!("layer{l}.{name}"), view));
            }
        }
        out.push(("final_gamma".into(), self.final_gamma.view().into_dyn()));
        out.push(("final_beta".into(), self.final_beta.view().into_dyn()));
        out.push(("head_w".into(), self.head_w.view().into_dyn()));
        out.push(("head_b".into(), self.head_b.view().into_dyn()));
        out
    }

    /// Flat tensor list in the same order as [`Params::named_views`].
    #[cfg(test)]
    pub(crate) fn flat(&self) -> Vec<ArrayD<f64>> {
        self.named_views()
            .into_iter()
            .map(|(_, v)| v.to_owned())
            .collect()
    }

    /// Apply `theta <- theta - lr * (grad + wd * theta)` over the flat order.
    pub(crate) fn sgd_step(&mut self, grads: &[ArrayD<f64>], lr: f64, wd: f64) {
        let mut i = 0usize;
        step2(&mut self.patch_w, grads, &mut i, lr, wd);
        step1(&mut self.patch_b, grads, &mut i, lr, wd);
        step2(&mut self.cls, grads, &mut i, lr, wd);
        step2(&mut self.pos, grads, &mut i, lr, wd);
        for lp in &mut self.layers {
            step1(&mut lp.ln1_gamma, grads, &mut i, lr, wd);
            step1(&mut lp.ln1_beta, grads, &mut i, lr, wd);
            step2(&mut lp.wq, grads, &mut i, lr, wd);
            step1(&mut lp.bq, grads, &mut i, lr, wd);
            step2(&mut lp.wk, grads, &mut i, lr, wd);
            step1(&mut lp.bk, grads, &mut i, lr, wd);
            step2(&mut lp.wv, grads, &mut i, lr, wd);
            step1(&mut lp.bv, grads, &mut i, lr, wd);
            step2(&mut lp.wo, grads, &mut i, lr, wd);
            step1(&mut lp.bo, grads, &mut i, lr, wd);
            step1(&mut lp.ln2_gamma, grads, &mut i, lr, wd);
            step1(&mut lp.ln2_beta, grads, &mut i, lr, wd);
            step2(&mut lp.mlp_w1, grads, &mut i, lr, wd);
            step1(&mut lp.mlp_b1, grads, &mut i, lr, wd);
            step2(&mut lp.mlp_w2, grads, &mut i, lr, wd);
            step1(&mut lp.mlp_b2, grads, &mut i, lr, wd);
        }
        step1(&mut self.final_gamma, grads, &mut i, lr, wd);
        step1(&mut self.final_beta, grads, &mut i, lr, wd);
        step2(&mut self.head_w, grads, &mut i, lr, wd);
        step1(&mut self.head_b, grads, &mut i, lr, wd);
        debug_assert_eq!(i, grads.len());
    }

    /// Rebuild from the flat named list produced by a checkpoint.
    pub(crate) fn from_named(
        config: &ModelConfig,
        mut tensors: BTreeMap<String, ArrayD<f64>>,
    ) -> Result<Self> {
        let patch_w = take2(&mut tensors, "patch_w")?;
        let patch_b = take1(&mut tensors, "patch_b")?;
        let cls = take2(&mut tensors, "cls")?;
        let pos = take2(&mut tensors, "pos")?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                ln1_gamma: take1(&mut tensors, &n("ln1_gamma"))?,
                ln1_beta: take1(&mut tensors, &n("ln1_beta"))?,
                wq: take2(&mut tensors, &n("wq"))?,
                bq: take1(&mut tensors, &n("bq"))?,
                wk: take2(&mut tensors, &n("wk"))?,
                bk: take1(&mut tensors, &n("bk"))?,
                wv: take2(&mut tensors, &n("wv"))?,
                bv: take1(&mut tensors, &n("bv"))?,
                wo: take2(&mut tensors, &n("wo"))?,
                bo: take1(&mut tensors, &n("bo"))?,
                ln2_gamma: take1(&mut tensors, &n("ln2_gamma"))?,
                ln2_beta: take1(&mut tensors, &n("ln2_beta"))?,
                mlp_w1: take2(&mut tensors, &n("mlp_w1"))?,
                mlp_b1: take1(&mut tensors, &n("mlp_b1"))?,
                mlp_w2: take2(&mut tensors, &n("mlp_w2"))?,
                mlp_b2: take1(&mut tensors, &n("mlp_b2"))?,
            });
        }
        let final_gamma = take1(&mut tensors, "final_gamma")?;
        let final_beta = take1(&mut tensors, "final_beta")?;
        let head_w = take2(&mut tensors, "head_w")?;
        let head_b = take1(&mut tensors, "head_b")?;
        if !tensors.is_empty() {
            let extra: Vec<_> = tensors.keys().cloned().collect();
            return Err(Error::Input(format!(
                "checkpoint has unexpected tensors: {extra:?}"
            )));
        }
        Ok(Params {
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            final_gamma,
            final_beta,
            head_w,
            head_b,
        })
    }
}

fn step1(t: &mut Array1<f64>, grads: &[ArrayD<f64>], i: &mut usize, lr: f64, wd: f64) {
    let g = grads[*i]
        .view()
        .into_dimensionality::<Ix1>()
        .expect("1-d grad");
    t.zip_mut_with(&g, |th, &gr| *th -= lr * (gr + wd * *th));
    *i += 1;
}

fn step2(t: &mut Array2<f64>, grads: &[ArrayD<f64>], i: &mut usize, lr: f64, wd: f64) {
    let g = grads[*i]
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d grad");
    t.zip_mut_with(&g, |th, &gr| *th -= lr * (gr + wd * *th));
    *i += 1;
}

fn take1(tensors: &mut BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<Array1<f64>> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Input(format!("checkpoint missing tensor {name}")))?
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::Dimension(format!("tensor {name} has wrong rank")))
}

fn take2(tensors: &mut BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<Array2<f64>> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Input(format!("checkpoint missing tensor {name}")))?
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Dimension(format!("tensor {name} has wrong rank")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = Params::init(&cfg, 7);
        let b = Params::init(&cfg, 7);
        let c = Params::init(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn named_roundtrip() {
        let cfg = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        let p = Params::init(&cfg, 1);
        let map: BTreeMap<String, ArrayD<f64>> = p
            .named_views()
            .into_iter()
            .map(|(n, v)| (n, v.to_owned()))
            .collect();
        let q = Params::from_named(&cfg, map).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let mut p = Params::init(&cfg, 3);
        let before = p.head_w.clone();
        let grads: Vec<ArrayD<f64>> = p
            .flat()
            .iter()
            .map(|t| ArrayD::ones(t.raw_dim()))
            .collect();
        p.sgd_step(&grads, 0.5, 0.0);
        let diff = &before - &p.head_w;
        assert!(diff.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
