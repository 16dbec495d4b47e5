//! Post-training synthesis: source-to-reference translation, bulk
//! synthetic-set generation, and the four PAD experiment compositions.
//!
//! Experiment recipes (train side; the test manifest is always the
//! untouched real test split):
//!   1. real bonafide + real PAs as-is (imbalanced baseline)
//!   2. half of each PA domain kept real, the held-out half serves as
//!      references for an equal number of synthetic replacements
//!   3. bonafide real, every PA sample synthetic (counts match 1)
//!   4. real PAs topped up with synthetic samples to a per-domain target

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{
    from_net, load_manifest, load_sample, save_png, write_manifest, DomainRegistry, ImageSample,
    Provenance, SampleDescriptor, Split, PA_BONAFIDE,
};
use crate::error::{Error, Result};
use crate::networks::{Model, NetConfig};

/// Translate `source` into the domain of `reference`:
/// `G(source, S_{d'}(reference))`. The result carries the reference's
/// domain and PA class and is tagged synthetic.
pub fn translate(
    model: &Model,
    source: &ImageSample,
    reference: &ImageSample,
) -> Result<ImageSample> {
    let cfg = model.cfg();
    check_resolution(cfg, source)?;
    check_resolution(cfg, reference)?;
    let (sout, _) = model.styling.forward(&reference.to_net())?;
    let s_prime = &sout.codes[reference.domain];
    let (out, _) = model.generator.forward(&source.to_net(), s_prime)?;
    Ok(ImageSample {
        pixels: from_net(&out),
        domain: reference.domain,
        split: source.split,
        pa_class: reference.pa_class.clone(),
        provenance: Provenance::Synthetic,
    })
}

fn check_resolution(cfg: &NetConfig, s: &ImageSample) -> Result<()> {
    let (h, w, c) = s.pixels.dim();
    if h != cfg.resolution || w != cfg.resolution || c != cfg.channels {
        return Err(Error::contract(format!(
            "sample shape ({h}, {w}, {c}) does not match checkpoint resolution ({}, {}, {})",
            cfg.resolution, cfg.resolution, cfg.channels
        )));
    }
    Ok(())
}

/// Generate `targets[d]` synthetic samples per domain.
///
/// Sources are consumed without replacement until exhausted, then
/// reshuffled; references are drawn uniformly from the target domain. The
/// whole pair schedule is fixed up front, after which translation runs in
/// parallel with a deterministic output order.
pub fn synthesize_set(
    model: &Model,
    registry: &DomainRegistry,
    sources: &[ImageSample],
    references: &[ImageSample],
    targets: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    let total: usize = targets.values().sum();
    if total == 0 {
        return Ok(Vec::new());
    }
    if sources.is_empty() {
        return Err(Error::contract("synthesis needs at least one source image"));
    }
    let mut refs_by_domain: Vec<Vec<&ImageSample>> = vec![Vec::new(); registry.count()];
    for r in references {
        refs_by_domain[r.domain].push(r);
    }
    for (&d, &count) in targets {
        if d >= registry.count() {
            return Err(Error::contract(format!(
                "target domain index {d} out of range"
            )));
        }
        if count > 0 && refs_by_domain[d].is_empty() {
            return Err(Error::NoReferences(registry.name(d).to_string()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source_order: Vec<usize> = (0..sources.len()).collect();
    shuffle(&mut source_order, &mut rng);
    let mut source_pos = 0usize;
    let mut schedule: Vec<(usize, usize, usize)> = Vec::with_capacity(total); // (src, domain, ref)
    for (&d, &count) in targets {
        for _ in 0..count {
            if source_pos == source_order.len() {
                shuffle(&mut source_order, &mut rng);
                source_pos = 0;
            }
            let src = source_order[source_pos];
            source_pos += 1;
            let r = rng.gen_range(0..refs_by_domain[d].len());
            schedule.push((src, d, r));
        }
    }

    // style codes per (domain, reference) are pure; cache them per domain
    let codes: Vec<Vec<ndarray::Array1<f64>>> = refs_by_domain
        .iter()
        .map(|refs| {
            refs.iter()
                .map(|r| {
                    let (sout, _) = model.styling.forward(&r.to_net())?;
                    Ok(sout.codes[r.domain].clone())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    schedule
        .par_iter()
        .map(|&(src, d, r)| {
            let (out, _) = model
                .generator
                .forward(&sources[src].to_net(), &codes[d][r])?;
            Ok(ImageSample {
                pixels: from_net(&out),
                domain: d,
                split: Split::Train,
                pa_class: refs_by_domain[d][r].pa_class.clone(),
                provenance: Provenance::Synthetic,
            })
        })
        .collect()
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// The four experimental compositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentId {
    One,
    Two,
    Three,
    Four,
}

impl ExperimentId {
    pub fn parse(n: u32) -> Option<Self> {
        match n {
            1 => Some(ExperimentId::One),
            2 => Some(ExperimentId::Two),
            3 => Some(ExperimentId::Three),
            4 => Some(ExperimentId::Four),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        match self {
            ExperimentId::One => 1,
            ExperimentId::Two => 2,
            ExperimentId::Three => 3,
            ExperimentId::Four => 4,
        }
    }
}

/// Experiment 2 split of one PA domain's real samples: keep the ceiling
/// half, use the floor half as references for an equal number of
/// synthetic replacements.
pub fn exp2_plan(n: usize) -> (usize, usize) {
    (n.div_ceil(2), n / 2)
}

/// Experiment 4 per-domain plan: `(kept_real, synthetic_topup)` against a
/// shared target count. Domains above the target are downsampled.
pub fn exp4_plan(real_counts: &[usize], target: usize) -> Vec<(usize, usize)> {
    real_counts
        .iter()
        .map(|&n| if n >= target { (target, 0) } else { (n, target - n) })
        .collect()
}

#[derive(Debug)]
pub struct ExperimentSet {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Build train/test manifests for one experiment from a real dataset
/// manifest, synthesizing PA samples with `model` where the protocol
/// requires them. Synthetic images land under `out_dir/synthetic/`.
#[allow(clippy::too_many_arguments)]
pub fn build_experiment_set(
    exp: ExperimentId,
    manifest: &Path,
    registry: &DomainRegistry,
    net: &NetConfig,
    model: &Model,
    out_dir: &Path,
    seed: u64,
    exp4_target: Option<usize>,
    filter: FilterType,
) -> Result<ExperimentSet> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let descs = load_manifest(manifest, registry)?;
    let train: Vec<&SampleDescriptor> = descs.iter().filter(|d| d.split == Split::Train).collect();
    let test: Vec<&SampleDescriptor> = descs.iter().filter(|d| d.split == Split::Test).collect();

    let bona_train: Vec<&SampleDescriptor> = train
        .iter()
        .copied()
        .filter(|d| d.pa_class == PA_BONAFIDE)
        .collect();
    if bona_train.is_empty() {
        return Err(Error::Config(
            "experiment protocols need bonafide training samples".into(),
        ));
    }
    // PA rows grouped by domain, in registry order
    let mut pa_by_domain: Vec<Vec<&SampleDescriptor>> = vec![Vec::new(); registry.count()];
    for d in train.iter().filter(|d| d.pa_class != PA_BONAFIDE) {
        pa_by_domain[d.domain].push(d);
    }
    let pa_domains: Vec<usize> = (0..registry.count())
        .filter(|&d| !pa_by_domain[d].is_empty())
        .collect();

    let decode =
        |d: &SampleDescriptor| -> Result<ImageSample> { load_sample(d, net.resolution, net.channels, filter) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comments: Vec<String> = Vec::new();
    let mut kept_real: Vec<SampleDescriptor> = Vec::new();
    let mut synth_targets: BTreeMap<usize, usize> = BTreeMap::new();
    let mut reference_rows: Vec<&SampleDescriptor> = Vec::new();

    match exp {
        ExperimentId::One => {
            for &d in &pa_domains {
                kept_real.extend(pa_by_domain[d].iter().map(|r| (*r).clone()));
            }
        }
        ExperimentId::Two => {
            for &d in &pa_domains {
                let mut order: Vec<usize> = (0..pa_by_domain[d].len()).collect();
                shuffle(&mut order, &mut rng);
                let (keep, synth) = exp2_plan(order.len());
                comments.push(format!(
                    "experiment-2 domain {}: real_kept={keep} synthetic={synth} (ceil/floor of {})",
                    registry.name(d),
                    order.len()
                ));
                let mut keep_idx: Vec<usize> = order[..keep].to_vec();
                keep_idx.sort_unstable();
                kept_real.extend(keep_idx.iter().map(|&i| pa_by_domain[d][i].clone()));
                reference_rows.extend(order[keep..].iter().map(|&i| pa_by_domain[d][i]));
                if synth > 0 {
                    synth_targets.insert(d, synth);
                }
            }
        }
        ExperimentId::Three => {
            for &d in &pa_domains {
                synth_targets.insert(d, pa_by_domain[d].len());
                reference_rows.extend(pa_by_domain[d].iter().copied());
            }
        }
        ExperimentId::Four => {
            let counts: Vec<usize> = pa_domains.iter().map(|&d| pa_by_domain[d].len()).collect();
            let target = exp4_target.unwrap_or_else(|| counts.iter().copied().max().unwrap_or(0));
            let plan = exp4_plan(&counts, target);
            for (&d, &(keep, synth)) in pa_domains.iter().zip(plan.iter()) {
                comments.push(format!(
                    "experiment-4 domain {}: target={target} real_kept={keep} synthetic={synth}",
                    registry.name(d)
                ));
                if keep < pa_by_domain[d].len() {
                    let mut order: Vec<usize> = (0..pa_by_domain[d].len()).collect();
                    shuffle(&mut order, &mut rng);
                    let mut keep_idx: Vec<usize> = order[..keep].to_vec();
                    keep_idx.sort_unstable();
                    kept_real.extend(keep_idx.iter().map(|&i| pa_by_domain[d][i].clone()));
                } else {
                    kept_real.extend(pa_by_domain[d].iter().map(|r| (*r).clone()));
                }
                if synth > 0 {
                    synth_targets.insert(d, synth);
                    reference_rows.extend(pa_by_domain[d].iter().copied());
                }
            }
        }
    }

    // synthesize where the protocol calls for it
    let mut synth_rows: Vec<SampleDescriptor> = Vec::new();
    if !synth_targets.is_empty() {
        let sources: Vec<ImageSample> = bona_train
            .iter()
            .map(|d| decode(d))
            .collect::<Result<Vec<_>>>()?;
        let references: Vec<ImageSample> = reference_rows
            .iter()
            .map(|d| decode(d))
            .collect::<Result<Vec<_>>>()?;
        let synth = synthesize_set(model, registry, &sources, &references, &synth_targets, seed)?;
        let synth_dir = out_dir.join("synthetic");
        let mut counters: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &synth {
            let dir = synth_dir.join(registry.name(s.domain));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let seq = counters.entry(s.domain).or_insert(0);
            let rel = PathBuf::from("synthetic")
                .join(registry.name(s.domain))
                .join(format!("{seq:05}.png"));
            *seq += 1;
            save_png(&out_dir.join(&rel), &s.pixels)?;
            synth_rows.push(SampleDescriptor {
                path: rel,
                domain: s.domain,
                split: Split::Train,
                pa_class: s.pa_class.clone(),
                provenance: Provenance::Synthetic,
            });
        }
    }

    // train manifest: bonafide, kept real PAs, synthetic PAs
    let mut train_rows: Vec<SampleDescriptor> = Vec::new();
    train_rows.extend(bona_train.iter().map(|r| (*r).clone()));
    train_rows.extend(kept_real);
    train_rows.extend(synth_rows);
    let train_manifest = out_dir.join(format!("train_exp{}.csv", exp.number()));
    write_manifest(&train_manifest, registry, &train_rows, true, &comments)?;

    // test manifest: the untouched real test split, byte-identical across
    // experiments for a fixed dataset
    let test_rows: Vec<SampleDescriptor> = test.iter().map(|r| (*r).clone()).collect();
    let test_manifest = out_dir.join("test_manifest.csv");
    write_manifest(&test_manifest, registry, &test_rows, true, &[])?;

    Ok(ExperimentSet {
        train_manifest,
        test_manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_domains, toy_registry, write_image_set, Dataset};
    use crate::networks::Model;
    use crate::nn::Activation;
    use tempfile::tempdir;

    fn tiny_net() -> NetConfig {
        NetConfig {
            resolution: 16,
            channels: 1,
            num_domains: 3,
            style_dim: 8,
            base_channels: 4,
            activation: Activation::Silu,
        }
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            registry: toy_registry(),
            samples: generate_toy_domains(3, 10, 16).unwrap(),
        }
    }

    #[test]
    fn translate_labels_and_shape() {
        let ds = toy_dataset();
        let model = Model::new(&tiny_net(), 0).unwrap();
        let src = ds.samples.iter().find(|s| s.domain == 0).unwrap();
        let rf = ds.samples.iter().find(|s| s.domain == 2).unwrap();
        let out = translate(&model, src, rf).unwrap();
        assert_eq!(out.pixels.dim(), src.pixels.dim());
        assert_eq!(out.domain, 2);
        assert_eq!(out.pa_class, rf.pa_class);
        assert_eq!(out.provenance, Provenance::Synthetic);
        let again = translate(&model, src, rf).unwrap();
        assert_eq!(out, again, "translation must be pure");
    }

    #[test]
    fn translate_rejects_wrong_resolution() {
        let ds = Dataset {
            registry: toy_registry(),
            samples: generate_toy_domains(3, 2, 32).unwrap(),
        };
        let model = Model::new(&tiny_net(), 0).unwrap();
        let err = translate(&model, &ds.samples[0], &ds.samples[1]);
        assert!(err.is_err());
    }

    #[test]
    fn synthesize_counts_and_determinism() {
        let ds = toy_dataset();
        let model = Model::new(&tiny_net(), 0).unwrap();
        let sources: Vec<ImageSample> =
            ds.samples.iter().filter(|s| s.domain == 0).cloned().collect();
        let refs: Vec<ImageSample> =
            ds.samples.iter().filter(|s| s.domain != 0).cloned().collect();
        let targets = BTreeMap::from([(1usize, 5usize), (2, 2)]);
        let a = synthesize_set(&model, &ds.registry, &sources, &refs, &targets, 9).unwrap();
        assert_eq!(a.iter().filter(|s| s.domain == 1).count(), 5);
        assert_eq!(a.iter().filter(|s| s.domain == 2).count(), 2);
        assert!(a.iter().all(|s| s.provenance == Provenance::Synthetic));
        let b = synthesize_set(&model, &ds.registry, &sources, &refs, &targets, 9).unwrap();
        assert_eq!(a, b);
        let c = synthesize_set(&model, &ds.registry, &sources, &refs, &targets, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn missing_references_name_the_domain() {
        let ds = toy_dataset();
        let model = Model::new(&tiny_net(), 0).unwrap();
        let sources: Vec<ImageSample> =
            ds.samples.iter().filter(|s| s.domain == 0).cloned().collect();
        let refs: Vec<ImageSample> =
            ds.samples.iter().filter(|s| s.domain == 1).cloned().collect();
        let targets = BTreeMap::from([(2usize, 3usize)]);
        match synthesize_set(&model, &ds.registry, &sources, &refs, &targets, 0).unwrap_err() {
            Error::NoReferences(name) => assert_eq!(name, "blobs"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn exp2_plan_splits_floor_ceil() {
        assert_eq!(exp2_plan(100), (50, 50));
        assert_eq!(exp2_plan(7), (4, 3));
        assert_eq!(exp2_plan(1), (1, 0));
        assert_eq!(exp2_plan(0), (0, 0));
    }

    #[test]
    fn exp4_plan_reproduces_balancing_arithmetic() {
        // the published composition: 276 + 4724 = 5000, 4014 + 986 = 5000,
        // 6016 real downsampled to 5000
        let plan = exp4_plan(&[276, 4014, 6016], 5000);
        assert_eq!(plan, vec![(276, 4724), (4014, 986), (5000, 0)]);
        assert!(plan.iter().all(|(k, s)| k + s == 5000));
        // toy example from the protocol definition
        assert_eq!(exp4_plan(&[10, 40, 60], 60), vec![(10, 50), (40, 20), (60, 0)]);
    }

    fn build_toy_experiment(
        exp: ExperimentId,
        dir: &Path,
        seed: u64,
    ) -> (ExperimentSet, DomainRegistry) {
        let reg = toy_registry();
        let samples = generate_toy_domains(21, 10, 16).unwrap();
        let data_dir = dir.join("data");
        let manifest = write_image_set(&data_dir, &reg, &samples, false).unwrap();
        let net = tiny_net();
        let model = Model::new(&net, 1).unwrap();
        let out = build_experiment_set(
            exp,
            &manifest,
            &reg,
            &net,
            &model,
            &dir.join(format!("exp{}", exp.number())),
            seed,
            None,
            FilterType::Triangle,
        )
        .unwrap();
        (out, reg)
    }

    #[test]
    fn experiment_one_keeps_reals_only() {
        let dir = tempdir().unwrap();
        let (set, reg) = build_toy_experiment(ExperimentId::One, dir.path(), 5);
        let rows = load_manifest(&set.train_manifest, &reg).unwrap();
        assert!(rows.iter().all(|r| r.provenance == Provenance::Real));
        // 5 train per domain
        assert_eq!(rows.len(), 15);
    }

    #[test]
    fn experiment_two_replaces_half() {
        let dir = tempdir().unwrap();
        let (set, reg) = build_toy_experiment(ExperimentId::Two, dir.path(), 5);
        let rows = load_manifest(&set.train_manifest, &reg).unwrap();
        for d in [1usize, 2] {
            let real = rows
                .iter()
                .filter(|r| r.domain == d && r.provenance == Provenance::Real)
                .count();
            let synth = rows
                .iter()
                .filter(|r| r.domain == d && r.provenance == Provenance::Synthetic)
                .count();
            // 5 train PAs per domain: ceil 3 kept, floor 2 synthetic
            assert_eq!((real, synth), (3, 2), "domain {d}");
        }
        let text = fs::read_to_string(&set.train_manifest).unwrap();
        assert!(text.contains("experiment-2 domain checker: real_kept=3 synthetic=2"));
    }

    #[test]
    fn experiment_three_makes_all_pas_synthetic() {
        let dir = tempdir().unwrap();
        let (set, reg) = build_toy_experiment(ExperimentId::Three, dir.path(), 5);
        let rows = load_manifest(&set.train_manifest, &reg).unwrap();
        for d in [1usize, 2] {
            let real = rows
                .iter()
                .filter(|r| r.domain == d && r.provenance == Provenance::Real)
                .count();
            let synth = rows
                .iter()
                .filter(|r| r.domain == d && r.provenance == Provenance::Synthetic)
                .count();
            assert_eq!((real, synth), (0, 5), "domain {d}");
        }
        // bonafide stays real
        assert!(rows
            .iter()
            .filter(|r| r.domain == 0)
            .all(|r| r.provenance == Provenance::Real));
    }

    #[test]
    fn test_manifests_are_byte_identical_across_experiments() {
        // one fixed dataset on disk, four experiment builds against it
        let dir = tempdir().unwrap();
        let reg = toy_registry();
        let samples = generate_toy_domains(21, 10, 16).unwrap();
        let manifest = write_image_set(&dir.path().join("data"), &reg, &samples, false).unwrap();
        let net = tiny_net();
        let model = Model::new(&net, 1).unwrap();
        let mut bytes: Vec<Vec<u8>> = Vec::new();
        for exp in [
            ExperimentId::One,
            ExperimentId::Two,
            ExperimentId::Three,
            ExperimentId::Four,
        ] {
            let set = build_experiment_set(
                exp,
                &manifest,
                &reg,
                &net,
                &model,
                &dir.path().join(format!("exp{}", exp.number())),
                5,
                None,
                FilterType::Triangle,
            )
            .unwrap();
            bytes.push(fs::read(&set.test_manifest).unwrap());
        }
        assert!(bytes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn no_test_leakage_into_synthesis() {
        let dir = tempdir().unwrap();
        let (set, reg) = build_toy_experiment(ExperimentId::Three, dir.path(), 5);
        let train_rows = load_manifest(&set.train_manifest, &reg).unwrap();
        let test_rows = load_manifest(&set.test_manifest, &reg).unwrap();
        let test_paths: std::collections::BTreeSet<_> =
            test_rows.iter().map(|r| r.path.clone()).collect();
        assert!(test_rows.iter().all(|r| r.provenance == Provenance::Real));
        assert!(train_rows.iter().all(|r| !test_paths.contains(&r.path)));
    }
}
