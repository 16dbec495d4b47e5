//! Alternating min-max training loop.
//!
//! Each step ascends the adversarial objective on the discriminator, then
//! jointly descends the full weighted objective on the generator and the
//! styling network (with the generator's adversarial term in its
//! non-saturating form). All stochastic choices flow through one ChaCha
//! stream that is serialized into checkpoints, so a resumed run replays
//! the uninterrupted one exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, RngState};
use crate::data::{Dataset, DomainRegistry, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adv_pair_value, mean_dist, mean_dist_grad, total_loss, LossReport, LossWeights, ReconNorm,
};
use crate::networks::{Model, NetConfig};
use crate::nn::{log_sigmoid, sigmoid, softmax, FeatureMap, Params};

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Learning rate of the joint generator + styling update.
    pub lr_g: f64,
    /// Discriminator learning rate.
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub recon_norm: ReconNorm,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            lr_g: 3e-4,
            lr_d: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            recon_norm: ReconNorm::L1,
            seed: 0,
            checkpoint_interval: 1000,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "checkpoint_interval and log_interval must be positive".into(),
            ));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !lr.is_finite() || !(0.0..1.0).contains(&lr) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 1), got {lr}"
                )));
            }
        }
        self.weights.validate()
    }
}

/// Adam with per-vector first/second moments and bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One (source, reference) pairing of a training batch, already converted
/// to network space.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub x: FeatureMap,
    pub d: usize,
    pub y: FeatureMap,
    pub d_prime: usize,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub step: u64,
    pub model: Model,
    pub opt_g: Adam,
    pub opt_s: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(net: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(net, cfg.seed)?;
        let ng = model.generator.param_count();
        let ns = model.styling.param_count();
        let nd = model.discriminator.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1); // decouple sampling from weight init
        Ok(TrainState {
            step: 0,
            model,
            opt_g: Adam::new(ng, cfg.beta1, cfg.beta2),
            opt_s: Adam::new(ns, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(nd, cfg.beta1, cfg.beta2),
            rng,
        })
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32], registry: &DomainRegistry) -> Checkpoint {
        let opt_tensors = |name: &str, a: &Adam| -> Vec<NamedTensor> {
            vec![
                (format!("{name}.m"), vec![a.m.len()], a.m.clone()),
                (format!("{name}.v"), vec![a.v.len()], a.v.clone()),
                (format!("{name}.t"), vec![1], vec![a.t as f64]),
            ]
        };
        let mut opt = opt_tensors("generator", &self.opt_g);
        opt.extend(opt_tensors("styling", &self.opt_s));
        opt.extend(opt_tensors("discriminator", &self.opt_d));
        // domain names ride along as empty tensors so generation tools can
        // rebuild the registry from the file alone
        let registry_tensors: Vec<NamedTensor> = registry
            .names()
            .iter()
            .map(|n| (n.clone(), vec![0], Vec::new()))
            .collect();
        Checkpoint {
            config_hash,
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            sections: vec![
                ("meta".into(), self.model.cfg().to_meta()),
                ("registry".into(), registry_tensors),
                ("generator".into(), self.model.generator.named_tensors()),
                ("styling".into(), self.model.styling.named_tensors()),
                (
                    "discriminator".into(),
                    self.model.discriminator.named_tensors(),
                ),
                ("optimizer".into(), opt),
            ],
        }
    }

    /// Rebuild a state from a checkpoint. Network shapes come from `net`,
    /// which must match what the checkpoint was saved with.
    pub fn from_checkpoint(ckpt: &Checkpoint, net: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        let mut state = TrainState::new(net, cfg)?;
        load_params_checked(&mut state.model.generator, ckpt, "generator")?;
        load_params_checked(&mut state.model.styling, ckpt, "styling")?;
        load_params_checked(&mut state.model.discriminator, ckpt, "discriminator")?;
        let opt = ckpt.section("optimizer")?;
        let restore = |name: &str, a: &mut Adam| -> Result<()> {
            for suffix in ["m", "v", "t"] {
                let key = format!("{name}.{suffix}");
                let (_, _, data) = opt
                    .iter()
                    .find(|(n, _, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint {
                        path: "<memory>".into(),
                        message: format!("missing optimizer tensor `{key}`"),
                    })?;
                match suffix {
                    "m" => a.m = data.clone(),
                    "v" => a.v = data.clone(),
                    _ => a.t = data[0] as u64,
                }
            }
            Ok(())
        };
        restore("generator", &mut state.opt_g)?;
        restore("styling", &mut state.opt_s)?;
        restore("discriminator", &mut state.opt_d)?;
        state.step = ckpt.step;
        state.rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        state.rng.set_stream(ckpt.rng.stream);
        state.rng.set_word_pos(ckpt.rng.word_pos);
        Ok(state)
    }
}

fn load_params_checked<P: Params>(target: &mut P, ckpt: &Checkpoint, section: &str) -> Result<()> {
    let stored = ckpt.section(section)?;
    let expected = target.named_tensors();
    if stored.len() != expected.len() {
        return Err(Error::Checkpoint {
            path: "<memory>".into(),
            message: format!(
                "section `{section}` has {} tensors, expected {}",
                stored.len(),
                expected.len()
            ),
        });
    }
    for ((sn, ss, _), (en, es, _)) in stored.iter().zip(expected.iter()) {
        if sn != en || ss != es {
            return Err(Error::Checkpoint {
                path: "<memory>".into(),
                message: format!(
                    "tensor mismatch in `{section}`: stored {sn} {ss:?}, expected {en} {es:?}"
                ),
            });
        }
    }
    let flat = ckpt.section_flat(section)?;
    target.load_flat(&flat);
    Ok(())
}

/// Draw a training batch: sources uniform over the train split, target
/// domains uniform over the registry, references uniform within the
/// target domain.
pub fn sample_batch(
    net_images: &[FeatureMap],
    domains: &[usize],
    train_indices: &[usize],
    by_domain: &[Vec<usize>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<StepSample> {
    let k = by_domain.len();
    (0..batch_size)
        .map(|_| {
            let src = train_indices[rng.gen_range(0..train_indices.len())];
            let d_prime = rng.gen_range(0..k);
            let r = by_domain[d_prime][rng.gen_range(0..by_domain[d_prime].len())];
            StepSample {
                x: net_images[src].clone(),
                d: domains[src],
                y: net_images[r].clone(),
                d_prime,
            }
        })
        .collect()
}

/// Eq-style adversarial objective of the discriminator over a batch,
/// with fakes generated by the current generator/styling pair.
pub fn d_objective(model: &Model, batch: &[StepSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let (sout, _) = model.styling.forward(&s.y)?;
        let (fake, _) = model.generator.forward(&s.x, &sout.codes[s.d_prime])?;
        let (lr, _) = model.discriminator.forward(&s.x)?;
        let (lf, _) = model.discriminator.forward(&fake)?;
        total += adv_pair_value(lr[s.d], lf[s.d_prime]);
    }
    Ok(total / batch.len() as f64)
}

/// Value and discriminator gradient of [`d_objective`]. The gradient is of
/// the objective itself; ascend it to train the discriminator.
pub fn d_objective_grads(model: &Model, batch: &[StepSample]) -> Result<(f64, crate::networks::Discriminator)> {
    let b = batch.len() as f64;
    let results: Vec<Result<(f64, crate::networks::Discriminator)>> = batch
        .par_iter()
        .map(|s| {
            let (sout, _) = model.styling.forward(&s.y)?;
            let (fake, _) = model.generator.forward(&s.x, &sout.codes[s.d_prime])?;
            let (lr, cr) = model.discriminator.forward(&s.x)?;
            let (lf, cf) = model.discriminator.forward(&fake)?;
            let value = adv_pair_value(lr[s.d], lf[s.d_prime]);
            let mut grad = model.discriminator.zeros_like();
            let mut dlr = Array1::zeros(lr.len());
            dlr[s.d] = (1.0 - sigmoid(lr[s.d])) / b;
            model.discriminator.backward(&dlr, &cr, &mut grad);
            let mut dlf = Array1::zeros(lf.len());
            dlf[s.d_prime] = -sigmoid(lf[s.d_prime]) / b;
            model.discriminator.backward(&dlf, &cf, &mut grad);
            Ok((value, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = model.discriminator.zeros_like();
    for r in results {
        let (v, g) = r?;
        total += v;
        grad.add_from(&g);
    }
    Ok((total / b, grad))
}

/// Component values of the generator-side objective.
#[derive(Debug, Clone, Copy)]
pub struct GsComponents {
    /// Non-saturating adversarial term `-E[log σ(D_{d'}(fake))]`.
    pub adv_ns: f64,
    pub style: f64,
    pub cls: f64,
    pub cycle: f64,
}

impl GsComponents {
    pub fn objective(&self, w: &LossWeights) -> f64 {
        self.adv_ns
            + w.lambda_style * self.style
            + w.lambda_cls * self.cls
            + w.lambda_cycle * self.cycle
    }
}

/// Generator-side objective value (used by gradient checks).
pub fn gs_objective(
    model: &Model,
    batch: &[StepSample],
    weights: &LossWeights,
    norm: ReconNorm,
) -> Result<f64> {
    Ok(gs_components(model, batch, norm)?.objective(weights))
}

fn gs_components(model: &Model, batch: &[StepSample], norm: ReconNorm) -> Result<GsComponents> {
    let b = batch.len() as f64;
    let (mut adv_ns, mut style, mut cls, mut cycle) = (0.0, 0.0, 0.0, 0.0);
    for smp in batch {
        let (sx, _) = model.styling.forward(&smp.x)?;
        let (sy, _) = model.styling.forward(&smp.y)?;
        let s = &sx.codes[smp.d];
        let s_prime = &sy.codes[smp.d_prime];
        let (fake, _) = model.generator.forward(&smp.x, s_prime)?;
        let (lf, _) = model.discriminator.forward(&fake)?;
        adv_ns += -log_sigmoid(lf[smp.d_prime]);
        let (sf, _) = model.styling.forward(&fake)?;
        style += mean_dist(
            s_prime.as_slice().unwrap(),
            sf.codes[smp.d_prime].as_slice().unwrap(),
            norm,
        );
        cls += -sx.probs[smp.d].max(f64::MIN_POSITIVE).ln();
        let (recon, _) = model.generator.forward(&fake, s)?;
        cycle += mean_dist(smp.x.as_slice().unwrap(), recon.as_slice().unwrap(), norm);
    }
    Ok(GsComponents {
        adv_ns: adv_ns / b,
        style: style / b,
        cls: cls / b,
        cycle: cycle / b,
    })
}

/// Value and gradients of the generator-side objective w.r.t. the
/// generator and styling parameters, batched with one shared forward
/// evaluation per sample.
pub fn gs_objective_grads(
    model: &Model,
    batch: &[StepSample],
    weights: &LossWeights,
    norm: ReconNorm,
) -> Result<(
    GsComponents,
    crate::networks::Generator,
    crate::networks::StylingNetwork,
)> {
    let b = batch.len() as f64;
    let k = model.styling.num_domains();
    type SampleOut = (
        GsComponents,
        crate::networks::Generator,
        crate::networks::StylingNetwork,
    );
    let results: Vec<Result<SampleOut>> = batch
        .par_iter()
        .map(|smp| {
            let gen = &model.generator;
            let sty = &model.styling;
            let dis = &model.discriminator;
            let mut g_grad = gen.zeros_like();
            let mut s_grad = sty.zeros_like();

            // forwards
            let (sx, cx) = sty.forward(&smp.x)?;
            let (sy, cy) = sty.forward(&smp.y)?;
            let s = sx.codes[smp.d].clone();
            let s_prime = sy.codes[smp.d_prime].clone();
            let (fake, c_g1) = gen.forward(&smp.x, &s_prime)?;
            let (lf, c_d) = dis.forward(&fake)?;
            let (sf, cf) = sty.forward(&fake)?;
            let recovered = sf.codes[smp.d_prime].clone();
            let (recon, c_g2) = gen.forward(&fake, &s)?;

            // component values
            let adv_ns = -log_sigmoid(lf[smp.d_prime]);
            let style = mean_dist(
                s_prime.as_slice().unwrap(),
                recovered.as_slice().unwrap(),
                norm,
            );
            let cls = {
                let logits = &sx.logits;
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.mapv(|v| (v - m).exp()).sum().ln() + m - logits[smp.d]
            };
            let cycle = mean_dist(smp.x.as_slice().unwrap(), recon.as_slice().unwrap(), norm);

            // backward seeds, already scaled by batch mean and weights
            let d_adv_logit = -(1.0 - sigmoid(lf[smp.d_prime])) / b;
            let d_recovered = Array1::from(mean_dist_grad(
                recovered.as_slice().unwrap(),
                s_prime.as_slice().unwrap(),
                norm,
                weights.lambda_style / b,
            ));
            let ds_prime_direct = Array1::from(mean_dist_grad(
                s_prime.as_slice().unwrap(),
                recovered.as_slice().unwrap(),
                norm,
                weights.lambda_style / b,
            ));
            let mut d_logits_x = softmax(&sx.logits);
            d_logits_x[smp.d] -= 1.0;
            d_logits_x *= weights.lambda_cls / b;
            let d_recon = FeatureMap::from_shape_vec(
                recon.raw_dim(),
                mean_dist_grad(
                    recon.as_slice().unwrap(),
                    smp.x.as_slice().unwrap(),
                    norm,
                    weights.lambda_cycle / b,
                ),
            )
            .expect("recon grad shape");

            // reverse pass over the shared graph
            let (dfake_cycle, ds_from_cycle) = gen.backward(&d_recon, &c_g2, &mut g_grad);

            let mut dcodes_f: Vec<Option<Array1<f64>>> = vec![None; k];
            dcodes_f[smp.d_prime] = Some(d_recovered);
            let dfake_style = sty.backward(&dcodes_f, None, &cf, &mut s_grad);

            let mut d_lf = Array1::zeros(k);
            d_lf[smp.d_prime] = d_adv_logit;
            let mut d_scratch = dis.zeros_like(); // discriminator is frozen here
            let dfake_adv = dis.backward(&d_lf, &c_d, &mut d_scratch);

            let dfake = dfake_cycle + &dfake_style + &dfake_adv;
            let (_, ds_prime_from_gen) = gen.backward(&dfake, &c_g1, &mut g_grad);

            let ds_prime = ds_prime_direct + &ds_prime_from_gen;
            let mut dcodes_y: Vec<Option<Array1<f64>>> = vec![None; k];
            dcodes_y[smp.d_prime] = Some(ds_prime);
            sty.backward(&dcodes_y, None, &cy, &mut s_grad);

            let mut dcodes_x: Vec<Option<Array1<f64>>> = vec![None; k];
            dcodes_x[smp.d] = Some(ds_from_cycle);
            sty.backward(&dcodes_x, Some(&d_logits_x), &cx, &mut s_grad);

            Ok((
                GsComponents {
                    adv_ns,
                    style,
                    cls,
                    cycle,
                },
                g_grad,
                s_grad,
            ))
        })
        .collect();

    let mut comp = GsComponents {
        adv_ns: 0.0,
        style: 0.0,
        cls: 0.0,
        cycle: 0.0,
    };
    let mut g_grad = model.generator.zeros_like();
    let mut s_grad = model.styling.zeros_like();
    for r in results {
        let (c, g, s) = r?;
        comp.adv_ns += c.adv_ns;
        comp.style += c.style;
        comp.cls += c.cls;
        comp.cycle += c.cycle;
        g_grad.add_from(&g);
        s_grad.add_from(&s);
    }
    comp.adv_ns /= b;
    comp.style /= b;
    comp.cls /= b;
    comp.cycle /= b;
    Ok((comp, g_grad, s_grad))
}

/// One alternating optimization step. Returns the loss report: `adv` is
/// the adversarial objective (its reported value, evaluated before the
/// discriminator update); the remaining components come from the
/// generator-side pass that follows it.
pub fn train_step(
    state: &mut TrainState,
    batch: &[StepSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    // discriminator ascent on the adversarial objective
    let (adv, d_grad) = d_objective_grads(&state.model, batch)?;
    let mut flat = state.model.discriminator.to_flat();
    let gflat: Vec<f64> = d_grad.to_flat().iter().map(|g| -g).collect();
    state.opt_d.step(&mut flat, &gflat, cfg.lr_d);
    state.model.discriminator.load_flat(&flat);

    // joint generator + styling descent against the updated discriminator
    let (comp, g_grad, s_grad) =
        gs_objective_grads(&state.model, batch, &cfg.weights, cfg.recon_norm)?;
    let mut gflat_params = state.model.generator.to_flat();
    state
        .opt_g
        .step(&mut gflat_params, &g_grad.to_flat(), cfg.lr_g);
    state.model.generator.load_flat(&gflat_params);
    let mut sflat_params = state.model.styling.to_flat();
    state
        .opt_s
        .step(&mut sflat_params, &s_grad.to_flat(), cfg.lr_g);
    state.model.styling.load_flat(&sflat_params);

    state.step += 1;
    total_loss(
        adv,
        comp.style,
        comp.cls,
        comp.cycle,
        &cfg.weights,
        state.step,
    )
}

/// Artifacts produced by [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub reports: Vec<(u64, LossReport)>,
}

/// Run the full training loop over the training split of `dataset`,
/// writing periodic checkpoints and a loss CSV into `out_dir`.
///
/// `resume_from` continues a previous run; total step count is still
/// `cfg.steps`.
pub fn train(
    net: &NetConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    config_hash: [u8; 32],
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if net.num_domains != dataset.registry.count() {
        return Err(Error::Config(format!(
            "network configured for {} domains but registry has {}",
            net.num_domains,
            dataset.registry.count()
        )));
    }
    let by_domain = dataset.train_indices_by_domain();
    for (d, idx) in by_domain.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyDomain(dataset.registry.name(d).to_string()));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = match resume_from {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.config_hash != config_hash {
                return Err(Error::Checkpoint {
                    path: p.into(),
                    message: "config hash differs from the current run configuration".into(),
                });
            }
            TrainState::from_checkpoint(&ckpt, net, cfg)?
        }
        None => TrainState::new(net, cfg)?,
    };

    // pre-convert images to network space once
    let net_images: Vec<FeatureMap> = dataset.samples.iter().map(|s| s.to_net()).collect();
    let domains: Vec<usize> = dataset.samples.iter().map(|s| s.domain).collect();
    let train_indices: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();

    let loss_csv = out_dir.join("losses.csv");
    let mut csv = String::new();
    csv.push_str(LossReport::csv_header());
    csv.push('\n');
    let mut reports = Vec::new();

    while state.step < cfg.steps {
        let batch = sample_batch(
            &net_images,
            &domains,
            &train_indices,
            &by_domain,
            cfg.batch_size,
            &mut state.rng,
        );
        let report = train_step(&mut state, &batch, cfg)?;
        let step = state.step;
        if step % cfg.log_interval == 0 || step == cfg.steps {
            csv.push_str(&report.csv_row(step));
            csv.push('\n');
        }
        reports.push((step, report));
        if step % cfg.checkpoint_interval == 0 && step < cfg.steps {
            let p = out_dir.join(format!("checkpoint_{step:07}.ckpt"));
            save_checkpoint(&p, &state.to_checkpoint(config_hash, &dataset.registry))?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint_final.ckpt");
    save_checkpoint(&final_checkpoint, &state.to_checkpoint(config_hash, &dataset.registry))?;
    fs::write(&loss_csv, csv).map_err(|e| Error::io(&loss_csv, e))?;
    Ok(TrainOutcome {
        final_checkpoint,
        loss_csv,
        reports,
    })
}

/// Load a model plus its domain registry from a self-describing
/// checkpoint, without optimizer state.
pub fn load_model(path: &Path) -> Result<(Model, DomainRegistry, u64)> {
    let ckpt = load_checkpoint(path)?;
    let net = NetConfig::from_meta(ckpt.section("meta")?)?;
    let names: Vec<String> = ckpt
        .section("registry")?
        .iter()
        .map(|(n, _, _)| n.clone())
        .collect();
    let registry = DomainRegistry::new(names)?;
    if registry.count() != net.num_domains {
        return Err(Error::Checkpoint {
            path: path.into(),
            message: format!(
                "registry section lists {} domains but the model expects {}",
                registry.count(),
                net.num_domains
            ),
        });
    }
    let mut model = Model::new(&net, 0)?;
    load_params_checked(&mut model.generator, &ckpt, "generator")?;
    load_params_checked(&mut model.styling, &ckpt, "styling")?;
    load_params_checked(&mut model.discriminator, &ckpt, "discriminator")?;
    Ok((model, registry, ckpt.step))
}
