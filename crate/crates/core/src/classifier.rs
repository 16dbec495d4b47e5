//! Small reference CNN used in two roles: a k-way domain classifier whose
//! penultimate features back the default FID extractor, and the binary
//! bonafide-vs-PA classifier of the PAD harness (single logit, sigmoid
//! score, higher = more PA-like).

use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, log_sigmoid, sigmoid, softmax, Activation, Conv2d,
    ConvCache, FeatureMap, Linear, Params,
};
use crate::trainer::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub channels: usize,
    pub num_outputs: usize,
    pub base_channels: usize,
    /// Penultimate feature width (the FID extractor dimension).
    pub hidden: usize,
    pub activation: Activation,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            resolution: 32,
            channels: 1,
            num_outputs: 1,
            base_channels: 8,
            hidden: 64,
            activation: Activation::Silu,
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Four stride-2 conv blocks, global pooling, one hidden layer, linear head.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    pub cfg: ClassifierConfig,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    fc1: Linear,
    head: Linear,
}

pub struct CnnCache {
    k1: ConvCache,
    a1: FeatureMap,
    k2: ConvCache,
    a2: FeatureMap,
    k3: ConvCache,
    a3: FeatureMap,
    k4: ConvCache,
    a4: FeatureMap,
    pooled_dims: (usize, usize, usize),
    pooled: Array1<f64>,
    hid_pre: Array1<f64>,
    hid: Array1<f64>,
}

impl SmallCnn {
    pub fn new(cfg: &ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let c0 = cfg.base_channels;
        SmallCnn {
            cfg: cfg.clone(),
            c1: Conv2d::new("cls.c1", cfg.channels, c0, 3, 2, 1, 1.0, rng),
            c2: Conv2d::new("cls.c2", c0, 2 * c0, 3, 2, 1, 1.0, rng),
            c3: Conv2d::new("cls.c3", 2 * c0, 4 * c0, 3, 2, 1, 1.0, rng),
            c4: Conv2d::new("cls.c4", 4 * c0, 4 * c0, 3, 2, 1, 1.0, rng),
            fc1: Linear::new("cls.fc1", 4 * c0, cfg.hidden, 1.0, rng),
            head: Linear::new("cls.head", cfg.hidden, cfg.num_outputs, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SmallCnn {
            cfg: self.cfg.clone(),
            c1: self.c1.zeros_like(),
            c2: self.c2.zeros_like(),
            c3: self.c3.zeros_like(),
            c4: self.c4.zeros_like(),
            fc1: self.fc1.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Returns `(logits, penultimate features, cache)`.
    pub fn forward(&self, x: &FeatureMap) -> Result<(Array1<f64>, Array1<f64>, CnnCache)> {
        let (c, h, w) = x.dim();
        if c != self.cfg.channels || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::contract(format!(
                "classifier: expected ({}, {}, {}), got ({c}, {h}, {w})",
                self.cfg.channels, self.cfg.resolution, self.cfg.resolution
            )));
        }
        let act = self.cfg.activation;
        let (h1, k1) = self.c1.forward(x);
        let (h1, a1) = act.forward(h1);
        let (h2, k2) = self.c2.forward(&h1);
        let (h2, a2) = act.forward(h2);
        let (h3, k3) = self.c3.forward(&h2);
        let (h3, a3) = act.forward(h3);
        let (h4, k4) = self.c4.forward(&h3);
        let (h4, a4) = act.forward(h4);
        let pooled_dims = h4.dim();
        let pooled = global_avg_pool(&h4);
        let hid_lin = self.fc1.forward(&pooled);
        let (hid, hid_pre) = act.forward_vec(hid_lin);
        let logits = self.head.forward(&hid);
        Ok((
            logits,
            hid.clone(),
            CnnCache {
                k1,
                a1,
                k2,
                a2,
                k3,
                a3,
                k4,
                a4,
                pooled_dims,
                pooled,
                hid_pre,
                hid,
            },
        ))
    }

    pub fn backward(&self, dlogits: &Array1<f64>, cache: &CnnCache, grad: &mut SmallCnn) {
        let act = self.cfg.activation;
        let dhid = self.head.backward(dlogits, &cache.hid, &mut grad.head);
        let dhid = act.backward_vec(&dhid, &cache.hid_pre);
        let dpooled = self.fc1.backward(&dhid, &cache.pooled, &mut grad.fc1);
        let (c, h, w) = cache.pooled_dims;
        let g = global_avg_pool_backward(&dpooled, c, h, w);
        let g = act.backward(&g, &cache.a4);
        let g = self.c4.backward(&g, &cache.k4, &mut grad.c4);
        let g = act.backward(&g, &cache.a3);
        let g = self.c3.backward(&g, &cache.k3, &mut grad.c3);
        let g = act.backward(&g, &cache.a2);
        let g = self.c2.backward(&g, &cache.k2, &mut grad.c2);
        let g = act.backward(&g, &cache.a1);
        self.c1.backward(&g, &cache.k1, &mut grad.c1);
    }

    /// Penultimate feature vector (the default FID embedding).
    pub fn features(&self, x: &FeatureMap) -> Result<Array1<f64>> {
        let (_, feat, _) = self.forward(x)?;
        Ok(feat)
    }

    /// Class index with the highest logit.
    pub fn predict(&self, x: &FeatureMap) -> Result<usize> {
        let (logits, _, _) = self.forward(x)?;
        Ok(logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap())
    }

    /// Sigmoid of the single logit; only meaningful for binary heads.
    pub fn score(&self, x: &FeatureMap) -> Result<f64> {
        let (logits, _, _) = self.forward(x)?;
        Ok(sigmoid(logits[0]))
    }

    pub fn save(&self, path: &Path, config_hash: [u8; 32], step: u64) -> Result<()> {
        let meta: Vec<(String, Vec<usize>, Vec<f64>)> = [
            ("resolution", self.cfg.resolution),
            ("channels", self.cfg.channels),
            ("num_outputs", self.cfg.num_outputs),
            ("base_channels", self.cfg.base_channels),
            ("hidden", self.cfg.hidden),
            ("activation", self.cfg.activation.index()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), vec![1], vec![v as f64]))
        .collect();
        let ckpt = Checkpoint {
            config_hash,
            step,
            rng: RngState {
                seed: [0; 32],
                stream: 0,
                word_pos: 0,
            },
            sections: vec![
                ("meta".into(), meta),
                ("classifier".into(), self.named_tensors()),
            ],
        };
        save_checkpoint(path, &ckpt)
    }

    /// Rebuild a classifier from a self-describing checkpoint. Training
    /// schedule fields of the config are filled with defaults; only the
    /// architecture is taken from the file.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let meta = ckpt.section("meta")?;
        let get = |key: &str| -> Result<usize> {
            meta.iter()
                .find(|(n, _, _)| n == key)
                .map(|(_, _, d)| d[0] as usize)
                .ok_or_else(|| Error::Checkpoint {
                    path: path.into(),
                    message: format!("meta missing `{key}`"),
                })
        };
        let cfg = ClassifierConfig {
            resolution: get("resolution")?,
            channels: get("channels")?,
            num_outputs: get("num_outputs")?,
            base_channels: get("base_channels")?,
            hidden: get("hidden")?,
            activation: Activation::from_index(get("activation")?).ok_or_else(|| {
                Error::Checkpoint {
                    path: path.into(),
                    message: "unknown activation index".into(),
                }
            })?,
            ..ClassifierConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SmallCnn::new(&cfg, &mut rng);
        let flat = ckpt.section_flat("classifier")?;
        if flat.len() != net.param_count() {
            return Err(Error::Checkpoint {
                path: path.into(),
                message: format!(
                    "classifier has {} parameters, checkpoint stores {}",
                    net.param_count(),
                    flat.len()
                ),
            });
        }
        net.load_flat(&flat);
        Ok(net)
    }
}

impl Params for SmallCnn {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.c3.visit(f);
        self.c4.visit(f);
        self.fc1.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.c3.visit_mut(f);
        self.c4.visit_mut(f);
        self.fc1.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Training target for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Multi-class index (softmax cross-entropy head).
    Class(usize),
    /// Binary label in {0, 1} (single-logit sigmoid head).
    Binary(f64),
}

/// Train a classifier with Adam under a fixed step budget. Deterministic
/// given the config seed.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    images: &[FeatureMap],
    targets: &[Target],
) -> Result<SmallCnn> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::contract(
            "classifier training needs equally many images and targets",
        ));
    }
    for t in targets {
        match *t {
            Target::Class(c) if cfg.num_outputs < 2 || c >= cfg.num_outputs => {
                return Err(Error::contract(format!(
                    "class target {c} incompatible with {} outputs",
                    cfg.num_outputs
                )));
            }
            Target::Binary(_) if cfg.num_outputs != 1 => {
                return Err(Error::contract(
                    "binary targets require a single-logit head",
                ));
            }
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = SmallCnn::new(cfg, &mut rng);
    let mut opt = Adam::new(net.param_count(), 0.9, 0.999);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);

    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| sample_rng.gen_range(0..images.len()))
            .collect();
        let per_sample: Vec<Result<SmallCnn>> = idx
            .par_iter()
            .map(|&i| {
                let (logits, _, cache) = net.forward(&images[i])?;
                let dlogits = match targets[i] {
                    Target::Class(c) => {
                        let mut d = softmax(&logits);
                        d[c] -= 1.0;
                        d / cfg.batch_size as f64
                    }
                    Target::Binary(y) => {
                        let p = sigmoid(logits[0]);
                        Array1::from(vec![(p - y) / cfg.batch_size as f64])
                    }
                };
                let mut grad = net.zeros_like();
                net.backward(&dlogits, &cache, &mut grad);
                Ok(grad)
            })
            .collect();
        let mut grad = net.zeros_like();
        for g in per_sample {
            grad.add_from(&g?);
        }
        let mut flat = net.to_flat();
        opt.step(&mut flat, &grad.to_flat(), cfg.lr);
        net.load_flat(&flat);
    }
    Ok(net)
}

/// Mean loss of a trained classifier over a labelled set (cross-entropy
/// or binary cross-entropy depending on the head).
pub fn eval_loss(net: &SmallCnn, images: &[FeatureMap], targets: &[Target]) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in images.iter().zip(targets) {
        let (logits, _, _) = net.forward(x)?;
        total += match *t {
            Target::Class(c) => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.mapv(|v| (v - m).exp()).sum().ln() + m - logits[c]
            }
            Target::Binary(y) => {
                let l = logits[0];
                -(y * log_sigmoid(l) + (1.0 - y) * log_sigmoid(-l))
            }
        };
    }
    Ok(total / images.len() as f64)
}

/// Classification accuracy. Binary heads threshold the sigmoid at 0.5.
pub fn eval_accuracy(net: &SmallCnn, images: &[FeatureMap], targets: &[Target]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, t) in images.iter().zip(targets) {
        let (logits, _, _) = net.forward(x)?;
        let ok = match *t {
            Target::Class(c) => {
                logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
                    == c
            }
            Target::Binary(y) => (sigmoid(logits[0]) >= 0.5) == (y >= 0.5),
        };
        if ok {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_domains, Split};
    use tempfile::tempdir;

    fn toy_imgs(per_domain: usize, res: usize) -> (Vec<FeatureMap>, Vec<Target>, Vec<usize>) {
        let samples = generate_toy_domains(5, per_domain, res).unwrap();
        let imgs: Vec<FeatureMap> = samples.iter().map(|s| s.to_net()).collect();
        let targets: Vec<Target> = samples.iter().map(|s| Target::Class(s.domain)).collect();
        let domains: Vec<usize> = samples.iter().map(|s| s.domain).collect();
        (imgs, targets, domains)
    }

    #[test]
    fn training_is_deterministic() {
        let (imgs, targets, _) = toy_imgs(6, 16);
        let cfg = ClassifierConfig {
            resolution: 16,
            num_outputs: 3,
            base_channels: 4,
            hidden: 16,
            steps: 5,
            batch_size: 4,
            ..ClassifierConfig::default()
        };
        let a = train_classifier(&cfg, &imgs, &targets).unwrap();
        let b = train_classifier(&cfg, &imgs, &targets).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
    }

    #[test]
    fn separable_toy_data_trains_to_high_accuracy() {
        let samples = generate_toy_domains(5, 40, 32).unwrap();
        let train: Vec<_> = samples.iter().filter(|s| s.split == Split::Train).collect();
        let imgs: Vec<FeatureMap> = train.iter().map(|s| s.to_net()).collect();
        let targets: Vec<Target> = train.iter().map(|s| Target::Class(s.domain)).collect();
        let cfg = ClassifierConfig {
            num_outputs: 3,
            steps: 300,
            ..ClassifierConfig::default()
        };
        let net = train_classifier(&cfg, &imgs, &targets).unwrap();
        let acc = eval_accuracy(&net, &imgs, &targets).unwrap();
        assert!(acc >= 0.99, "training accuracy {acc} below 0.99");
    }

    #[test]
    fn binary_head_produces_probability_scores() {
        let (imgs, _, domains) = toy_imgs(8, 16);
        let targets: Vec<Target> = domains
            .iter()
            .map(|&d| Target::Binary(if d == 0 { 0.0 } else { 1.0 }))
            .collect();
        let cfg = ClassifierConfig {
            resolution: 16,
            num_outputs: 1,
            base_channels: 4,
            hidden: 16,
            steps: 60,
            batch_size: 8,
            ..ClassifierConfig::default()
        };
        let net = train_classifier(&cfg, &imgs, &targets).unwrap();
        for x in &imgs {
            let s = net.score(x).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_outputs() {
        let (imgs, targets, _) = toy_imgs(4, 16);
        let cfg = ClassifierConfig {
            resolution: 16,
            num_outputs: 3,
            base_channels: 4,
            hidden: 16,
            steps: 3,
            batch_size: 4,
            ..ClassifierConfig::default()
        };
        let net = train_classifier(&cfg, &imgs, &targets).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        net.save(&path, [9; 32], 3).unwrap();
        let back = SmallCnn::load(&path).unwrap();
        let (l0, f0, _) = net.forward(&imgs[0]).unwrap();
        let (l1, f1, _) = back.forward(&imgs[0]).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(f0, f1);
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let (imgs, _, _) = toy_imgs(2, 16);
        let cfg = ClassifierConfig {
            resolution: 16,
            num_outputs: 1,
            ..ClassifierConfig::default()
        };
        let bad: Vec<Target> = imgs.iter().map(|_| Target::Class(0)).collect();
        assert!(train_classifier(&cfg, &imgs, &bad).is_err());
    }
}
