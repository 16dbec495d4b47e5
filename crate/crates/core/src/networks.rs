//! The three trainable networks: generator, styling network, discriminator.
//!
//! All three operate on single samples in `(C, H, W)` layout with pixel
//! values in `[-1, 1]`. Each `forward` returns a cache consumed by the
//! matching `backward`, which accumulates parameter gradients into a
//! zeros-like copy of the network and returns input-side gradients so
//! callers can chain networks together.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, softmax, tanh_backward, tanh_forward, upsample2x,
    upsample2x_backward, Activation, Conv2d, ConvCache, FeatureMap, InstanceNorm, Linear,
    NormCache, Params, StyleNorm, StyleNormCache,
};

/// Fixed-length style vector produced by the styling network.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    pub values: Array1<f64>,
}

impl StyleCode {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("style code contains non-finite entries"));
        }
        Ok(StyleCode { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Shape hyperparameters shared by all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub resolution: usize,
    pub channels: usize,
    pub num_domains: usize,
    pub style_dim: usize,
    /// Width of the first hidden layer; deeper layers double it.
    pub base_channels: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a multiple of 16 and at least 16, got {}",
                self.resolution
            )));
        }
        if self.num_domains == 0 {
            return Err(Error::Config("domain count must be positive".into()));
        }
        if self.style_dim == 0 || self.base_channels == 0 || self.channels == 0 {
            return Err(Error::Config(
                "style_dim, base_channels and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Scalar metadata tensors embedded into checkpoints so a model can be
    /// rebuilt from the file alone.
    pub fn to_meta(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        [
            ("resolution", self.resolution),
            ("channels", self.channels),
            ("num_domains", self.num_domains),
            ("style_dim", self.style_dim),
            ("base_channels", self.base_channels),
            ("activation", self.activation.index()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), vec![1], vec![v as f64]))
        .collect()
    }

    pub fn from_meta(meta: &[(String, Vec<usize>, Vec<f64>)]) -> Result<NetConfig> {
        let get = |key: &str| -> Result<usize> {
            meta.iter()
                .find(|(n, _, _)| n == key)
                .map(|(_, _, d)| d[0] as usize)
                .ok_or_else(|| Error::contract(format!("checkpoint meta missing `{key}`")))
        };
        let activation = Activation::from_index(get("activation")?)
            .ok_or_else(|| Error::contract("checkpoint meta has unknown activation index"))?;
        Ok(NetConfig {
            resolution: get("resolution")?,
            channels: get("channels")?,
            num_domains: get("num_domains")?,
            style_dim: get("style_dim")?,
            base_channels: get("base_channels")?,
            activation,
        })
    }

    fn check_image(&self, x: &FeatureMap, who: &str) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.channels || h != self.resolution || w != self.resolution {
            return Err(Error::contract(format!(
                "{who}: expected input of shape ({}, {}, {}), got ({c}, {h}, {w})",
                self.channels, self.resolution, self.resolution
            )));
        }
        Ok(())
    }
}

/// Image-to-image generator: three downsampling conv blocks, three
/// upsampling blocks with style-conditioned normalization, tanh output.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: NetConfig,
    pub enc1: Conv2d,
    pub in1: InstanceNorm,
    pub enc2: Conv2d,
    pub in2: InstanceNorm,
    pub enc3: Conv2d,
    pub in3: InstanceNorm,
    pub dec1: Conv2d,
    pub sn1: StyleNorm,
    pub dec2: Conv2d,
    pub sn2: StyleNorm,
    pub dec3: Conv2d,
}

pub struct GeneratorCache {
    c_enc1: ConvCache,
    n1: NormCache,
    a1: FeatureMap,
    c_enc2: ConvCache,
    n2: NormCache,
    a2: FeatureMap,
    c_enc3: ConvCache,
    n3: NormCache,
    a3: FeatureMap,
    c_dec1: ConvCache,
    s1: StyleNormCache,
    a4: FeatureMap,
    c_dec2: ConvCache,
    s2: StyleNormCache,
    a5: FeatureMap,
    c_dec3: ConvCache,
    tanh_out: FeatureMap,
    style: Array1<f64>,
}

impl Generator {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c0 = cfg.base_channels;
        Generator {
            cfg: cfg.clone(),
            enc1: Conv2d::new("g.enc1", cfg.channels, c0, 3, 1, 1, 1.0, rng),
            in1: InstanceNorm::new("g.in1", c0),
            enc2: Conv2d::new("g.enc2", c0, 2 * c0, 3, 2, 1, 1.0, rng),
            in2: InstanceNorm::new("g.in2", 2 * c0),
            enc3: Conv2d::new("g.enc3", 2 * c0, 4 * c0, 3, 2, 1, 1.0, rng),
            in3: InstanceNorm::new("g.in3", 4 * c0),
            dec1: Conv2d::new("g.dec1", 4 * c0, 2 * c0, 3, 1, 1, 1.0, rng),
            sn1: StyleNorm::new("g.sn1", cfg.style_dim, 2 * c0, rng),
            dec2: Conv2d::new("g.dec2", 2 * c0, c0, 3, 1, 1, 1.0, rng),
            sn2: StyleNorm::new("g.sn2", cfg.style_dim, c0, rng),
            dec3: Conv2d::new("g.dec3", c0, cfg.channels, 3, 1, 1, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Generator {
            cfg: self.cfg.clone(),
            enc1: self.enc1.zeros_like(),
            in1: self.in1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            in2: self.in2.zeros_like(),
            enc3: self.enc3.zeros_like(),
            in3: self.in3.zeros_like(),
            dec1: self.dec1.zeros_like(),
            sn1: self.sn1.zeros_like(),
            dec2: self.dec2.zeros_like(),
            sn2: self.sn2.zeros_like(),
            dec3: self.dec3.zeros_like(),
        }
    }

    /// Translate `x` under style `s`. Output has the same shape as `x`
    /// with values in `[-1, 1]`.
    pub fn forward(&self, x: &FeatureMap, s: &Array1<f64>) -> Result<(FeatureMap, GeneratorCache)> {
        self.cfg.check_image(x, "generator")?;
        if s.len() != self.cfg.style_dim {
            return Err(Error::contract(format!(
                "generator: style code length {} != configured style_dim {}",
                s.len(),
                self.cfg.style_dim
            )));
        }
        let act = self.cfg.activation;

        let (h, c_enc1) = self.enc1.forward(x);
        let (h, n1) = self.in1.forward(&h);
        let (h, a1) = act.forward(h);

        let (h, c_enc2) = self.enc2.forward(&h);
        let (h, n2) = self.in2.forward(&h);
        let (h, a2) = act.forward(h);

        let (h, c_enc3) = self.enc3.forward(&h);
        let (h, n3) = self.in3.forward(&h);
        let (h, a3) = act.forward(h);

        let h = upsample2x(&h);
        let (h, c_dec1) = self.dec1.forward(&h);
        let (h, s1) = self.sn1.forward(&h, s);
        let (h, a4) = act.forward(h);

        let h = upsample2x(&h);
        let (h, c_dec2) = self.dec2.forward(&h);
        let (h, s2) = self.sn2.forward(&h, s);
        let (h, a5) = act.forward(h);

        let (h, c_dec3) = self.dec3.forward(&h);
        let (y, tanh_out) = tanh_forward(h);

        Ok((
            y,
            GeneratorCache {
                c_enc1,
                n1,
                a1,
                c_enc2,
                n2,
                a2,
                c_enc3,
                n3,
                a3,
                c_dec1,
                s1,
                a4,
                c_dec2,
                s2,
                a5,
                c_dec3,
                tanh_out,
                style: s.clone(),
            },
        ))
    }

    /// Backward pass. Returns `(dx, ds)` and accumulates parameter
    /// gradients into `grad`.
    pub fn backward(
        &self,
        dy: &FeatureMap,
        cache: &GeneratorCache,
        grad: &mut Generator,
    ) -> (FeatureMap, Array1<f64>) {
        let act = self.cfg.activation;
        let s = &cache.style;

        let g = tanh_backward(dy, &cache.tanh_out);
        let g = self.dec3.backward(&g, &cache.c_dec3, &mut grad.dec3);

        let g = act.backward(&g, &cache.a5);
        let (g, ds2) = self.sn2.backward(&g, &cache.s2, s, &mut grad.sn2);
        let g = self.dec2.backward(&g, &cache.c_dec2, &mut grad.dec2);
        let g = upsample2x_backward(&g);

        let g = act.backward(&g, &cache.a4);
        let (g, ds1) = self.sn1.backward(&g, &cache.s1, s, &mut grad.sn1);
        let g = self.dec1.backward(&g, &cache.c_dec1, &mut grad.dec1);
        let g = upsample2x_backward(&g);

        let g = act.backward(&g, &cache.a3);
        let g = self.in3.backward(&g, &cache.n3, &mut grad.in3);
        let g = self.enc3.backward(&g, &cache.c_enc3, &mut grad.enc3);

        let g = act.backward(&g, &cache.a2);
        let g = self.in2.backward(&g, &cache.n2, &mut grad.in2);
        let g = self.enc2.backward(&g, &cache.c_enc2, &mut grad.enc2);

        let g = act.backward(&g, &cache.a1);
        let g = self.in1.backward(&g, &cache.n1, &mut grad.in1);
        let dx = self.enc1.backward(&g, &cache.c_enc1, &mut grad.enc1);

        (dx, ds1 + &ds2)
    }
}

impl Params for Generator {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.enc1.visit(f);
        self.in1.visit(f);
        self.enc2.visit(f);
        self.in2.visit(f);
        self.enc3.visit(f);
        self.in3.visit(f);
        self.dec1.visit(f);
        self.sn1.visit(f);
        self.dec2.visit(f);
        self.sn2.visit(f);
        self.dec3.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.enc1.visit_mut(f);
        self.in1.visit_mut(f);
        self.enc2.visit_mut(f);
        self.in2.visit_mut(f);
        self.enc3.visit_mut(f);
        self.in3.visit_mut(f);
        self.dec1.visit_mut(f);
        self.sn1.visit_mut(f);
        self.dec2.visit_mut(f);
        self.sn2.visit_mut(f);
        self.dec3.visit_mut(f);
    }
}

/// Shared conv trunk used by the styling network and the discriminator:
/// four stride-2 blocks followed by global average pooling.
#[derive(Debug, Clone)]
struct Trunk {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    act: Activation,
}

struct TrunkCache {
    k1: ConvCache,
    a1: FeatureMap,
    k2: ConvCache,
    a2: FeatureMap,
    k3: ConvCache,
    a3: FeatureMap,
    k4: ConvCache,
    a4: FeatureMap,
    pooled_dims: (usize, usize, usize),
}

impl Trunk {
    fn new(prefix: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c0 = cfg.base_channels;
        Trunk {
            c1: Conv2d::new(&format!("{prefix}.c1"), cfg.channels, c0, 3, 2, 1, 1.0, rng),
            c2: Conv2d::new(&format!("{prefix}.c2"), c0, 2 * c0, 3, 2, 1, 1.0, rng),
            c3: Conv2d::new(&format!("{prefix}.c3"), 2 * c0, 4 * c0, 3, 2, 1, 1.0, rng),
            c4: Conv2d::new(&format!("{prefix}.c4"), 4 * c0, 4 * c0, 3, 2, 1, 1.0, rng),
            act: cfg.activation,
        }
    }

    fn zeros_like(&self) -> Self {
        Trunk {
            c1: self.c1.zeros_like(),
            c2: self.c2.zeros_like(),
            c3: self.c3.zeros_like(),
            c4: self.c4.zeros_like(),
            act: self.act,
        }
    }

    fn feature_dim(&self) -> usize {
        self.c4.cout
    }

    fn forward(&self, x: &FeatureMap) -> (Array1<f64>, TrunkCache) {
        let (h, k1) = self.c1.forward(x);
        let (h, a1) = self.act.forward(h);
        let (h, k2) = self.c2.forward(&h);
        let (h, a2) = self.act.forward(h);
        let (h, k3) = self.c3.forward(&h);
        let (h, a3) = self.act.forward(h);
        let (h, k4) = self.c4.forward(&h);
        let (h, a4) = self.act.forward(h);
        let pooled_dims = h.dim();
        let feat = global_avg_pool(&h);
        (
            feat,
            TrunkCache {
                k1,
                a1,
                k2,
                a2,
                k3,
                a3,
                k4,
                a4,
                pooled_dims,
            },
        )
    }

    fn backward(&self, dfeat: &Array1<f64>, cache: &TrunkCache, grad: &mut Trunk) -> FeatureMap {
        let (c, h, w) = cache.pooled_dims;
        let g = global_avg_pool_backward(dfeat, c, h, w);
        let g = self.act.backward(&g, &cache.a4);
        let g = self.c4.backward(&g, &cache.k4, &mut grad.c4);
        let g = self.act.backward(&g, &cache.a3);
        let g = self.c3.backward(&g, &cache.k3, &mut grad.c3);
        let g = self.act.backward(&g, &cache.a2);
        let g = self.c2.backward(&g, &cache.k2, &mut grad.c2);
        let g = self.act.backward(&g, &cache.a1);
        self.c1.backward(&g, &cache.k1, &mut grad.c1)
    }
}

impl Params for Trunk {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.c3.visit(f);
        self.c4.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.c1.visit_mut(f);
        self.c2.visit_mut(f);
        self.c3.visit_mut(f);
        self.c4.visit_mut(f);
    }
}

/// Multi-task style encoder: a shared trunk feeding one style head per
/// domain plus a softmax domain-classification head.
#[derive(Debug, Clone)]
pub struct StylingNetwork {
    pub cfg: NetConfig,
    trunk: Trunk,
    heads: Vec<Linear>,
    cls: Linear,
}

pub struct StylingOutput {
    /// Style code of the input for every domain; `codes[d]` is the code
    /// "for domain d".
    pub codes: Vec<Array1<f64>>,
    /// Raw classification logits over domains.
    pub logits: Array1<f64>,
    /// Softmax of `logits`.
    pub probs: Array1<f64>,
}

pub struct StylingCache {
    trunk: TrunkCache,
    feat: Array1<f64>,
}

impl StylingNetwork {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Trunk::new("s.trunk", cfg, rng);
        let fdim = trunk.feature_dim();
        let heads = (0..cfg.num_domains)
            .map(|d| Linear::new(&format!("s.head{d}"), fdim, cfg.style_dim, 1.0, rng))
            .collect();
        let cls = Linear::new("s.cls", fdim, cfg.num_domains, 1.0, rng);
        StylingNetwork {
            cfg: cfg.clone(),
            trunk,
            heads,
            cls,
        }
    }

    pub fn zeros_like(&self) -> Self {
        StylingNetwork {
            cfg: self.cfg.clone(),
            trunk: self.trunk.zeros_like(),
            heads: self.heads.iter().map(Linear::zeros_like).collect(),
            cls: self.cls.zeros_like(),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.heads.len()
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(StylingOutput, StylingCache)> {
        self.cfg.check_image(x, "styling network")?;
        let (feat, trunk) = self.trunk.forward(x);
        let codes: Vec<Array1<f64>> = self.heads.iter().map(|h| h.forward(&feat)).collect();
        let logits = self.cls.forward(&feat);
        let probs = softmax(&logits);
        Ok((
            StylingOutput {
                codes,
                logits,
                probs,
            },
            StylingCache { trunk, feat },
        ))
    }

    /// Backward through any subset of heads. `dcodes[d]` carries the
    /// gradient for domain-`d`'s style code; `dlogits` the gradient at the
    /// classification logits. Returns dx.
    pub fn backward(
        &self,
        dcodes: &[Option<Array1<f64>>],
        dlogits: Option<&Array1<f64>>,
        cache: &StylingCache,
        grad: &mut StylingNetwork,
    ) -> FeatureMap {
        let fdim = cache.feat.len();
        let mut dfeat = Array1::<f64>::zeros(fdim);
        for (d, dcode) in dcodes.iter().enumerate() {
            if let Some(dc) = dcode {
                dfeat += &self.heads[d].backward(dc, &cache.feat, &mut grad.heads[d]);
            }
        }
        if let Some(dl) = dlogits {
            dfeat += &self.cls.backward(dl, &cache.feat, &mut grad.cls);
        }
        self.trunk.backward(&dfeat, &cache.trunk, &mut grad.trunk)
    }

    /// Convenience: style code of `x` for domain `d`.
    pub fn style_code(&self, x: &FeatureMap, d: usize) -> Result<StyleCode> {
        if d >= self.num_domains() {
            return Err(Error::contract(format!(
                "styling network: domain index {d} out of range ({} domains)",
                self.num_domains()
            )));
        }
        let (out, _) = self.forward(x)?;
        StyleCode::new(out.codes[d].clone())
    }
}

impl Params for StylingNetwork {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.trunk.visit(f);
        for h in &self.heads {
            h.visit(f);
        }
        self.cls.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.trunk.visit_mut(f);
        for h in &mut self.heads {
            h.visit_mut(f);
        }
        self.cls.visit_mut(f);
    }
}

/// Discriminator with one real/synthetic logit branch per domain.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: NetConfig,
    trunk: Trunk,
    branches: Vec<Linear>,
}

pub struct DiscriminatorCache {
    trunk: TrunkCache,
    feat: Array1<f64>,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Trunk::new("d.trunk", cfg, rng);
        let fdim = trunk.feature_dim();
        let branches = (0..cfg.num_domains)
            .map(|d| Linear::new(&format!("d.branch{d}"), fdim, 1, 1.0, rng))
            .collect();
        Discriminator {
            cfg: cfg.clone(),
            trunk,
            branches,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Discriminator {
            cfg: self.cfg.clone(),
            trunk: self.trunk.zeros_like(),
            branches: self.branches.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.branches.len()
    }

    /// One real-vs-synthetic logit per domain. Branch `d`'s logit is read
    /// through a sigmoid as P(x is a real member of domain d).
    pub fn forward(&self, x: &FeatureMap) -> Result<(Array1<f64>, DiscriminatorCache)> {
        self.cfg.check_image(x, "discriminator")?;
        let (feat, trunk) = self.trunk.forward(x);
        let logits = Array1::from_iter(self.branches.iter().map(|b| b.forward(&feat)[0]));
        Ok((logits, DiscriminatorCache { trunk, feat }))
    }

    pub fn backward(
        &self,
        dlogits: &Array1<f64>,
        cache: &DiscriminatorCache,
        grad: &mut Discriminator,
    ) -> FeatureMap {
        let fdim = cache.feat.len();
        let mut dfeat = Array1::<f64>::zeros(fdim);
        for (d, branch) in self.branches.iter().enumerate() {
            if dlogits[d] != 0.0 {
                let dl = Array1::from(vec![dlogits[d]]);
                dfeat += &branch.backward(&dl, &cache.feat, &mut grad.branches[d]);
            }
        }
        self.trunk.backward(&dfeat, &cache.trunk, &mut grad.trunk)
    }
}

impl Params for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.trunk.visit(f);
        for b in &self.branches {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.trunk.visit_mut(f);
        for b in &mut self.branches {
            b.visit_mut(f);
        }
    }
}

/// The full trainable model: all three networks built from one seed.
#[derive(Debug, Clone)]
pub struct Model {
    pub generator: Generator,
    pub styling: StylingNetwork,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            generator: Generator::new(cfg, &mut rng),
            styling: StylingNetwork::new(cfg, &mut rng),
            discriminator: Discriminator::new(cfg, &mut rng),
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.generator.cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn cfg() -> NetConfig {
        NetConfig {
            resolution: 16,
            channels: 1,
            num_domains: 3,
            style_dim: 8,
            base_channels: 4,
            activation: Activation::Silu,
        }
    }

    fn rand_img(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> FeatureMap {
        Array3::from_shape_fn((cfg.channels, cfg.resolution, cfg.resolution), |_| {
            rng.gen_range(-1.0..1.0)
        })
    }

    #[test]
    fn generator_shape_and_range() {
        let cfg = cfg();
        let model = Model::new(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_img(&mut rng, &cfg);
        let s = Array1::from_shape_fn(cfg.style_dim, |_| rng.gen_range(-1.0..1.0));
        let (y, _) = model.generator.forward(&x, &s).unwrap();
        assert_eq!(y.dim(), x.dim());
        assert!(y.iter().all(|v| v.is_finite() && *v >= -1.0 && *v <= 1.0));
    }

    #[test]
    fn generator_is_pure() {
        let cfg = cfg();
        let model = Model::new(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_img(&mut rng, &cfg);
        let s = Array1::from_shape_fn(cfg.style_dim, |_| rng.gen_range(-1.0..1.0));
        let (y1, _) = model.generator.forward(&x, &s).unwrap();
        let (y2, _) = model.generator.forward(&x, &s).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn style_injection_is_not_degenerate() {
        let cfg = cfg();
        let model = Model::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_img(&mut rng, &cfg);
        let s = Array1::from_shape_fn(cfg.style_dim, |_| rng.gen_range(-1.0..1.0));
        let (y0, _) = model.generator.forward(&x, &s).unwrap();
        for i in 0..cfg.style_dim {
            let mut s2 = s.clone();
            s2[i] += 0.5;
            let (y1, _) = model.generator.forward(&x, &s2).unwrap();
            let delta: f64 = y0.iter().zip(y1.iter()).map(|(a, b)| (a - b).abs()).sum();
            assert!(delta > 0.0, "style entry {i} has no effect on the output");
        }
    }

    #[test]
    fn styling_outputs_probabilities_and_codes() {
        let cfg = cfg();
        let model = Model::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_img(&mut rng, &cfg);
        let (out, _) = model.styling.forward(&x).unwrap();
        assert_eq!(out.codes.len(), 3);
        assert!(out.codes.iter().all(|c| c.len() == cfg.style_dim));
        assert!((out.probs.sum() - 1.0).abs() < 1e-6);
        assert!(out.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn discriminator_logits_finite_and_pure() {
        let cfg = cfg();
        let model = Model::new(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_img(&mut rng, &cfg);
        let (l1, _) = model.discriminator.forward(&x).unwrap();
        let (l2, _) = model.discriminator.forward(&x).unwrap();
        assert_eq!(l1.len(), 3);
        assert!(l1.iter().all(|v| v.is_finite()));
        assert_eq!(l1, l2);
    }

    #[test]
    fn head_counts_match_registry() {
        let mut c = cfg();
        c.num_domains = 5;
        let model = Model::new(&c, 11).unwrap();
        assert_eq!(model.styling.num_domains(), 5);
        assert_eq!(model.discriminator.num_domains(), 5);
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let cfg = cfg();
        let model = Model::new(&cfg, 12).unwrap();
        let bad = Array3::zeros((1, 8, 8));
        assert!(model.discriminator.forward(&bad).is_err());
        assert!(model.styling.forward(&bad).is_err());
        let s = Array1::zeros(cfg.style_dim);
        assert!(model.generator.forward(&bad, &s).is_err());
        let good = Array3::zeros((1, 16, 16));
        let bad_s = Array1::zeros(3);
        assert!(model.generator.forward(&good, &bad_s).is_err());
    }

    #[test]
    fn flat_roundtrip_preserves_outputs() {
        let cfg = cfg();
        let model = Model::new(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_img(&mut rng, &cfg);
        let s = Array1::from_shape_fn(cfg.style_dim, |_| rng.gen_range(-1.0..1.0));
        let (y0, _) = model.generator.forward(&x, &s).unwrap();
        let flat = model.generator.to_flat();
        let mut g2 = Model::new(&cfg, 99).unwrap().generator;
        g2.load_flat(&flat);
        let (y1, _) = g2.forward(&x, &s).unwrap();
        assert_eq!(y0, y1);
    }

    /// Finite-difference check of the full generator/styling/discriminator
    /// backward passes through a scalar probe loss.
    #[test]
    fn network_backward_passes_match_finite_differences() {
        let cfg = cfg();
        let model = Model::new(&cfg, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_img(&mut rng, &cfg);
        let s = Array1::from_shape_fn(cfg.style_dim, |_| rng.gen_range(-1.0..1.0));
        let h = 1e-5;

        // generator: L = mean(y^2)
        {
            let g = &model.generator;
            let (y, cache) = g.forward(&x, &s).unwrap();
            let n = y.len() as f64;
            let dy = y.mapv(|v| 2.0 * v / n);
            let mut grad = g.zeros_like();
            let (_, ds) = g.backward(&dy, &cache, &mut grad);
            let gflat = grad.to_flat();
            let flat = g.to_flat();
            let loss = |gg: &Generator, ss: &Array1<f64>| {
                let (y, _) = gg.forward(&x, ss).unwrap();
                y.iter().map(|v| v * v).sum::<f64>() / n
            };
            let mut check_rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..12 {
                let idx = check_rng.gen_range(0..flat.len());
                let mut gp = g.clone();
                let mut gm = g.clone();
                let mut fp = flat.clone();
                fp[idx] += h;
                gp.load_flat(&fp);
                fp[idx] -= 2.0 * h;
                gm.load_flat(&fp);
                let num = (loss(&gp, &s) - loss(&gm, &s)) / (2.0 * h);
                let rel = (num - gflat[idx]).abs() / (num.abs() + gflat[idx].abs()).max(1e-8);
                assert!(rel < 1e-4, "generator param {idx}: fd {num} vs {}", gflat[idx]);
            }
            // style input gradient
            for i in 0..cfg.style_dim {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[i] += h;
                sm[i] -= h;
                let num = (loss(g, &sp) - loss(g, &sm)) / (2.0 * h);
                let rel = (num - ds[i]).abs() / (num.abs() + ds[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "generator ds[{i}]: fd {num} vs {}", ds[i]);
            }
        }

        // styling: L = probs[d] + sum(codes[1])  (exercises cls + one head)
        {
            let sn = &model.styling;
            let d = 2usize;
            let (out, cache) = sn.forward(&x).unwrap();
            // d probs[d] / d logits = p_d * (onehot - p)
            let pd = out.probs[d];
            let mut dlogits = out.probs.mapv(|p| -pd * p);
            dlogits[d] += pd;
            let mut dcodes: Vec<Option<Array1<f64>>> = vec![None; 3];
            dcodes[1] = Some(Array1::ones(cfg.style_dim));
            let mut grad = sn.zeros_like();
            sn.backward(&dcodes, Some(&dlogits), &cache, &mut grad);
            let gflat = grad.to_flat();
            let flat = sn.to_flat();
            let loss = |m: &StylingNetwork| {
                let (out, _) = m.forward(&x).unwrap();
                out.probs[d] + out.codes[1].sum()
            };
            let mut check_rng = ChaCha8Rng::seed_from_u64(18);
            for _ in 0..12 {
                let idx = check_rng.gen_range(0..flat.len());
                let mut p = sn.clone();
                let mut m = sn.clone();
                let mut fp = flat.clone();
                fp[idx] += h;
                p.load_flat(&fp);
                fp[idx] -= 2.0 * h;
                m.load_flat(&fp);
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let rel = (num - gflat[idx]).abs() / (num.abs() + gflat[idx].abs()).max(1e-8);
                assert!(rel < 1e-3, "styling param {idx}: fd {num} vs {}", gflat[idx]);
            }
        }

        // discriminator: L = sum of logits weighted by branch index
        {
            let dn = &model.discriminator;
            let (logits, cache) = dn.forward(&x).unwrap();
            let dlogits = Array1::from_shape_fn(logits.len(), |i| (i + 1) as f64);
            let mut grad = dn.zeros_like();
            dn.backward(&dlogits, &cache, &mut grad);
            let gflat = grad.to_flat();
            let flat = dn.to_flat();
            let loss = |m: &Discriminator| {
                let (l, _) = m.forward(&x).unwrap();
                l.iter()
                    .enumerate()
                    .map(|(i, v)| (i + 1) as f64 * v)
                    .sum::<f64>()
            };
            let mut check_rng = ChaCha8Rng::seed_from_u64(19);
            for _ in 0..12 {
                let idx = check_rng.gen_range(0..flat.len());
                let mut p = dn.clone();
                let mut m = dn.clone();
                let mut fp = flat.clone();
                fp[idx] += h;
                p.load_flat(&fp);
                fp[idx] -= 2.0 * h;
                m.load_flat(&fp);
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let rel = (num - gflat[idx]).abs() / (num.abs() + gflat[idx].abs()).max(1e-8);
                assert!(rel < 1e-4, "discriminator param {idx}: fd {num} vs {}", gflat[idx]);
            }
        }
    }
}
