//! The four training loss terms and their weighted combination.
//!
//! Each loss exists in two forms: a value-only evaluation matching the
//! reported objective, and a `*_grads` variant that also backpropagates
//! into the participating networks. The gradient variants return error
//! signals for upstream inputs (style codes, generated images) so the
//! trainer can stitch the full objective out of shared subgraphs.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::networks::{Discriminator, Generator, StylingNetwork};
use crate::nn::{log_sigmoid, sigmoid, softmax, FeatureMap};

/// Weights of the style, classification and cycle terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_style: f64,
    pub lambda_cls: f64,
    pub lambda_cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_style: 1.0,
            lambda_cls: 1.0,
            lambda_cycle: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_style", self.lambda_style),
            ("lambda_cls", self.lambda_cls),
            ("lambda_cycle", self.lambda_cycle),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-step loss component report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub adv: f64,
    pub style: f64,
    pub cls: f64,
    pub cycle: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,adv,style,cls,cycle,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.adv, self.style, self.cls, self.cycle, self.total
        )
    }
}

/// Distance used inside the style and cycle terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconNorm {
    L1,
    L2,
}

impl ReconNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1" => Some(ReconNorm::L1),
            "l2" => Some(ReconNorm::L2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReconNorm::L1 => "l1",
            ReconNorm::L2 => "l2",
        }
    }
}

/// Mean elementwise distance between two equally shaped value slices.
pub fn mean_dist(a: &[f64], b: &[f64], norm: ReconNorm) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    match norm {
        ReconNorm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
        ReconNorm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
    }
}

/// d(mean_dist)/d(a); the gradient w.r.t. `b` is its negation.
pub fn mean_dist_grad(a: &[f64], b: &[f64], norm: ReconNorm, scale: f64) -> Vec<f64> {
    let n = a.len() as f64;
    match norm {
        ReconNorm::L1 => a
            .iter()
            .zip(b)
            .map(|(x, y)| scale * (x - y).signum_zero() / n)
            .collect(),
        ReconNorm::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| scale * 2.0 * (x - y) / n)
            .collect(),
    }
}

trait SignumZero {
    fn signum_zero(self) -> f64;
}

impl SignumZero for f64 {
    // subgradient convention: sign(0) = 0
    fn signum_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Per-pair adversarial objective value from raw logits:
/// `log σ(real) + log(1 - σ(fake))`.
pub fn adv_pair_value(real_logit: f64, fake_logit: f64) -> f64 {
    log_sigmoid(real_logit) + log_sigmoid(-fake_logit)
}

/// Multi-branch adversarial loss over a batch of (real, fake) pairs.
///
/// `x_fake[i]` is expected to be a translation targeting domain
/// `d_prime[i]`; the real image `x_real[i]` carries true domain `d_idx[i]`.
pub fn adversarial_loss(
    disc: &Discriminator,
    x_real: &[FeatureMap],
    d_idx: &[usize],
    x_fake: &[FeatureMap],
    d_prime: &[usize],
) -> Result<f64> {
    check_batch(x_real.len(), &[d_idx.len(), x_fake.len(), d_prime.len()])?;
    check_domains(disc.num_domains(), d_idx)?;
    check_domains(disc.num_domains(), d_prime)?;
    let b = x_real.len() as f64;
    let mut total = 0.0;
    for i in 0..x_real.len() {
        let (lr, _) = disc.forward(&x_real[i])?;
        let (lf, _) = disc.forward(&x_fake[i])?;
        total += adv_pair_value(lr[d_idx[i]], lf[d_prime[i]]);
    }
    Ok(total / b)
}

/// Adversarial loss value plus gradients of the value w.r.t. the
/// discriminator parameters and w.r.t. each fake image.
pub fn adversarial_loss_grads(
    disc: &Discriminator,
    x_real: &[FeatureMap],
    d_idx: &[usize],
    x_fake: &[FeatureMap],
    d_prime: &[usize],
) -> Result<(f64, Discriminator, Vec<FeatureMap>)> {
    check_batch(x_real.len(), &[d_idx.len(), x_fake.len(), d_prime.len()])?;
    check_domains(disc.num_domains(), d_idx)?;
    check_domains(disc.num_domains(), d_prime)?;
    let b = x_real.len() as f64;
    let mut grad = disc.zeros_like();
    let mut dfakes = Vec::with_capacity(x_fake.len());
    let mut total = 0.0;
    for i in 0..x_real.len() {
        let (lr, cr) = disc.forward(&x_real[i])?;
        let (lf, cf) = disc.forward(&x_fake[i])?;
        total += adv_pair_value(lr[d_idx[i]], lf[d_prime[i]]);
        // d/dl log σ(l) = 1 - σ(l); d/dl log(1 - σ(l)) = -σ(l)
        let mut dlr = Array1::zeros(lr.len());
        dlr[d_idx[i]] = (1.0 - sigmoid(lr[d_idx[i]])) / b;
        disc.backward(&dlr, &cr, &mut grad);
        let mut dlf = Array1::zeros(lf.len());
        dlf[d_prime[i]] = -sigmoid(lf[d_prime[i]]) / b;
        dfakes.push(disc.backward(&dlf, &cf, &mut grad));
    }
    Ok((total / b, grad, dfakes))
}

/// Style reconstruction loss: mean distance between the reference style
/// code and the code recovered from the translated image,
/// `|| s' - S_{d'}(G(x, s')) ||`.
pub fn style_loss(
    styling: &StylingNetwork,
    gen: &Generator,
    x: &[FeatureMap],
    s_prime: &[Array1<f64>],
    d_prime: &[usize],
    norm: ReconNorm,
) -> Result<f64> {
    let (value, ..) = style_loss_grads(styling, gen, x, s_prime, d_prime, norm, false)?;
    Ok(value)
}

/// Gradient results of [`style_loss_grads`].
pub struct StyleLossGrads {
    pub gen: Generator,
    pub styling: StylingNetwork,
    /// Gradient w.r.t. each reference style code (both the direct loss
    /// term and the path through the generator).
    pub ds_prime: Vec<Array1<f64>>,
}

#[allow(clippy::type_complexity)]
pub fn style_loss_grads(
    styling: &StylingNetwork,
    gen: &Generator,
    x: &[FeatureMap],
    s_prime: &[Array1<f64>],
    d_prime: &[usize],
    norm: ReconNorm,
    with_grads: bool,
) -> Result<(f64, Option<StyleLossGrads>)> {
    check_batch(x.len(), &[s_prime.len(), d_prime.len()])?;
    check_domains(styling.num_domains(), d_prime)?;
    let style_dim = gen.cfg.style_dim;
    for s in s_prime {
        if s.len() != style_dim {
            return Err(Error::contract(format!(
                "style loss: reference code length {} != style_dim {style_dim}",
                s.len()
            )));
        }
    }
    let b = x.len() as f64;
    let mut total = 0.0;
    let mut grads = with_grads.then(|| StyleLossGrads {
        gen: gen.zeros_like(),
        styling: styling.zeros_like(),
        ds_prime: Vec::with_capacity(x.len()),
    });
    for i in 0..x.len() {
        let (fake, gcache) = gen.forward(&x[i], &s_prime[i])?;
        let (sout, scache) = styling.forward(&fake)?;
        let recovered = &sout.codes[d_prime[i]];
        total += mean_dist(
            s_prime[i].as_slice().unwrap(),
            recovered.as_slice().unwrap(),
            norm,
        );
        if let Some(g) = grads.as_mut() {
            // d loss / d recovered, scaled by batch mean
            let drec = Array1::from(mean_dist_grad(
                recovered.as_slice().unwrap(),
                s_prime[i].as_slice().unwrap(),
                norm,
                1.0 / b,
            ));
            let mut dcodes: Vec<Option<Array1<f64>>> = vec![None; styling.num_domains()];
            dcodes[d_prime[i]] = Some(drec);
            let dfake = styling.backward(&dcodes, None, &scache, &mut g.styling);
            let (_, ds_via_gen) = gen.backward(&dfake, &gcache, &mut g.gen);
            // direct term: d loss / d s' = -(d loss / d recovered) elementwise
            let ds_direct = Array1::from(mean_dist_grad(
                s_prime[i].as_slice().unwrap(),
                recovered.as_slice().unwrap(),
                norm,
                1.0 / b,
            ));
            g.ds_prime.push(ds_direct + &ds_via_gen);
        }
    }
    Ok((total / b, grads))
}

/// Domain classification loss on real images:
/// `-log P(D = d | X = x)` from the softmax head of the styling network.
pub fn domain_classification_loss(
    styling: &StylingNetwork,
    x: &[FeatureMap],
    d_idx: &[usize],
) -> Result<f64> {
    let (v, _) = domain_classification_loss_grads(styling, x, d_idx, false)?;
    Ok(v)
}

pub fn domain_classification_loss_grads(
    styling: &StylingNetwork,
    x: &[FeatureMap],
    d_idx: &[usize],
    with_grads: bool,
) -> Result<(f64, Option<StylingNetwork>)> {
    check_batch(x.len(), &[d_idx.len()])?;
    check_domains(styling.num_domains(), d_idx)?;
    let b = x.len() as f64;
    let mut total = 0.0;
    let mut grad = with_grads.then(|| styling.zeros_like());
    for i in 0..x.len() {
        let (sout, scache) = styling.forward(&x[i])?;
        // stable -log softmax from logits
        let logits = &sout.logits;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = logits.mapv(|v| (v - m).exp()).sum().ln() + m;
        total += log_z - logits[d_idx[i]];
        if let Some(g) = grad.as_mut() {
            let mut dlogits = softmax(logits);
            dlogits[d_idx[i]] -= 1.0;
            dlogits /= b;
            styling.backward(&vec![None; styling.num_domains()], Some(&dlogits), &scache, g);
        }
    }
    Ok((total / b, grad))
}

/// Cycle-consistency loss: `|| x - G(G(x, s'), s) ||` where `s` is the
/// source style code and `s'` the reference code.
pub fn cycle_loss(
    gen: &Generator,
    x: &[FeatureMap],
    s: &[Array1<f64>],
    s_prime: &[Array1<f64>],
    norm: ReconNorm,
) -> Result<f64> {
    let (v, _) = cycle_loss_grads(gen, x, s, s_prime, norm, false)?;
    Ok(v)
}

/// Gradient results of [`cycle_loss_grads`].
pub struct CycleLossGrads {
    pub gen: Generator,
    pub ds: Vec<Array1<f64>>,
    pub ds_prime: Vec<Array1<f64>>,
}

pub fn cycle_loss_grads(
    gen: &Generator,
    x: &[FeatureMap],
    s: &[Array1<f64>],
    s_prime: &[Array1<f64>],
    norm: ReconNorm,
    with_grads: bool,
) -> Result<(f64, Option<CycleLossGrads>)> {
    check_batch(x.len(), &[s.len(), s_prime.len()])?;
    let b = x.len() as f64;
    let mut total = 0.0;
    let mut grads = with_grads.then(|| CycleLossGrads {
        gen: gen.zeros_like(),
        ds: Vec::with_capacity(x.len()),
        ds_prime: Vec::with_capacity(x.len()),
    });
    for i in 0..x.len() {
        let (fake, c1) = gen.forward(&x[i], &s_prime[i])?;
        let (recon, c2) = gen.forward(&fake, &s[i])?;
        total += mean_dist(
            x[i].as_slice().unwrap(),
            recon.as_slice().unwrap(),
            norm,
        );
        if let Some(g) = grads.as_mut() {
            let drecon_flat = mean_dist_grad(
                recon.as_slice().unwrap(),
                x[i].as_slice().unwrap(),
                norm,
                1.0 / b,
            );
            let drecon = FeatureMap::from_shape_vec(recon.raw_dim(), drecon_flat)
                .expect("recon gradient shape");
            let (dfake, ds_i) = gen.backward(&drecon, &c2, &mut g.gen);
            let (_, ds_prime_i) = gen.backward(&dfake, &c1, &mut g.gen);
            g.ds.push(ds_i);
            g.ds_prime.push(ds_prime_i);
        }
    }
    Ok((total / b, grads))
}

/// Combine component values into the weighted total of the training
/// objective. Fails with a divergence error when any component is
/// non-finite.
pub fn total_loss(
    adv: f64,
    style: f64,
    cls: f64,
    cycle: f64,
    weights: &LossWeights,
    step: u64,
) -> Result<LossReport> {
    for (name, v) in [("adv", adv), ("style", style), ("cls", cls), ("cycle", cycle)] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "{name} loss is {v} (adv={adv}, style={style}, cls={cls}, cycle={cycle})"
                ),
            });
        }
    }
    let total = adv
        + weights.lambda_style * style
        + weights.lambda_cls * cls
        + weights.lambda_cycle * cycle;
    Ok(LossReport {
        adv,
        style,
        cls,
        cycle,
        total,
    })
}

fn check_batch(len: usize, others: &[usize]) -> Result<()> {
    if len == 0 {
        return Err(Error::contract("empty batch"));
    }
    if others.iter().any(|&l| l != len) {
        return Err(Error::contract("batch slice lengths differ"));
    }
    Ok(())
}

fn check_domains(count: usize, idx: &[usize]) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&d| d >= count) {
        return Err(Error::contract(format!(
            "domain index {bad} out of range ({count} domains)"
        )));
    }
    Ok(())
}
