//! Presentation-attack-detection harness: the reference binary classifier,
//! TDR-at-FDR metrics, and the experiment protocol runner.
//!
//! Score polarity is fixed as higher-is-PA. The detection threshold for a
//! target false-detection rate `f` is the smallest observed score `t` with
//! `frac(bonafide >= t) <= f`; if no observed score satisfies the
//! constraint the threshold sits above every score and TDR is 0. This
//! convention is deterministic and directly checkable by exhaustive
//! threshold enumeration.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rayon::prelude::*;

use crate::classifier::{train_classifier, ClassifierConfig, SmallCnn, Target};
use crate::data::{load_manifest, load_sample, DomainRegistry, PA_BONAFIDE};
use crate::error::{Error, Result};
use crate::networks::{Model, NetConfig};
use crate::nn::FeatureMap;
use crate::translate::{build_experiment_set, ExperimentId, ExperimentSet};

/// Bonafide and PA score lists feeding the detection metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub bonafide_scores: Vec<f64>,
    pub pa_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.bonafide_scores.is_empty() || self.pa_scores.is_empty() {
            return Err(Error::contract(
                "score sets must contain both bonafide and PA scores",
            ));
        }
        if self
            .bonafide_scores
            .iter()
            .chain(self.pa_scores.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::contract("scores must be finite"));
        }
        Ok(())
    }
}

fn count_ge(sorted_asc: &[f64], t: f64) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|&x| x < t)
}

/// True detection rate at the given false detection rate targets.
pub fn tdr_at_fdr(scores: &ScoreSet, fdr_targets: &[f64]) -> Result<Vec<f64>> {
    scores.validate()?;
    for &f in fdr_targets {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::contract(format!(
                "FDR target {f} outside [0, 1]"
            )));
        }
    }
    let mut bona = scores.bonafide_scores.clone();
    let mut pa = scores.pa_scores.clone();
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pa.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates: Vec<f64> = bona.iter().chain(pa.iter()).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let nb = bona.len() as f64;
    let np = pa.len() as f64;
    Ok(fdr_targets
        .iter()
        .map(|&f| {
            for &t in &candidates {
                if count_ge(&bona, t) as f64 / nb <= f {
                    return count_ge(&pa, t) as f64 / np;
                }
            }
            0.0
        })
        .collect())
}

/// Full ROC sweep over every candidate threshold, sorted by increasing
/// FDR. Each point is `(fdr, tdr)`.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    scores.validate()?;
    let mut bona = scores.bonafide_scores.clone();
    let mut pa = scores.pa_scores.clone();
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pa.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates: Vec<f64> = bona.iter().chain(pa.iter()).cloned().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let nb = bona.len() as f64;
    let np = pa.len() as f64;
    let mut pts: Vec<(f64, f64)> = candidates
        .iter()
        .rev() // descending threshold = ascending fdr
        .map(|&t| {
            (
                count_ge(&bona, t) as f64 / nb,
                count_ge(&pa, t) as f64 / np,
            )
        })
        .collect();
    pts.insert(0, (0.0, 0.0));
    Ok(pts)
}

pub const FDR_TARGETS: [f64; 3] = [0.001, 0.002, 0.01];

#[derive(Debug, Clone)]
pub struct PadResult {
    pub experiment: u32,
    pub classifier: String,
    /// TDR at the FDR targets 0.1%, 0.2%, 1.0%.
    pub tdr: [f64; 3],
    pub roc: Vec<(f64, f64)>,
}

impl PadResult {
    pub fn csv_header() -> &'static str {
        "experiment,classifier,tdr_at_0.1,tdr_at_0.2,tdr_at_1.0"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6}",
            self.experiment, self.classifier, self.tdr[0], self.tdr[1], self.tdr[2]
        )
    }
}

pub fn write_results_csv(path: &Path, results: &[PadResult]) -> Result<()> {
    let mut text = String::from(PadResult::csv_header());
    text.push('\n');
    for r in results {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const CLASSIFIER_ID: &str = "reference-cnn";

fn decode_rows(
    manifest: &Path,
    registry: &DomainRegistry,
    cfg: &ClassifierConfig,
    filter: FilterType,
) -> Result<(Vec<FeatureMap>, Vec<bool>)> {
    let rows = load_manifest(manifest, registry)?;
    let decoded: Vec<Result<(FeatureMap, bool)>> = rows
        .par_iter()
        .map(|r| {
            let s = load_sample(r, cfg.resolution, cfg.channels, filter)?;
            Ok((s.to_net(), r.pa_class != PA_BONAFIDE))
        })
        .collect();
    let mut images = Vec::with_capacity(rows.len());
    let mut is_pa = Vec::with_capacity(rows.len());
    for d in decoded {
        let (img, pa) = d?;
        images.push(img);
        is_pa.push(pa);
    }
    Ok((images, is_pa))
}

/// Train the reference PAD classifier from a train manifest.
pub fn train_pad_classifier(
    manifest: &Path,
    registry: &DomainRegistry,
    cfg: &ClassifierConfig,
    filter: FilterType,
) -> Result<SmallCnn> {
    if cfg.num_outputs != 1 {
        return Err(Error::Config(
            "the PAD classifier uses a single sigmoid output".into(),
        ));
    }
    let (images, is_pa) = decode_rows(manifest, registry, cfg, filter)?;
    let n_pa = is_pa.iter().filter(|&&p| p).count();
    if n_pa == 0 {
        return Err(Error::Config(format!(
            "train manifest {} contains no PA samples",
            manifest.display()
        )));
    }
    if n_pa == is_pa.len() {
        return Err(Error::Config(format!(
            "train manifest {} contains no bonafide samples",
            manifest.display()
        )));
    }
    let targets: Vec<Target> = is_pa
        .iter()
        .map(|&p| Target::Binary(if p { 1.0 } else { 0.0 }))
        .collect();
    train_classifier(cfg, &images, &targets)
}

/// Score a test manifest with a trained PAD classifier.
pub fn score_manifest(
    net: &SmallCnn,
    manifest: &Path,
    registry: &DomainRegistry,
    filter: FilterType,
) -> Result<ScoreSet> {
    let (images, is_pa) = decode_rows(manifest, registry, &net.cfg, filter)?;
    let scores: Vec<Result<f64>> = images.par_iter().map(|x| net.score(x)).collect();
    let mut bona = Vec::new();
    let mut pa = Vec::new();
    for (s, &p) in scores.into_iter().zip(is_pa.iter()) {
        let s = s?;
        if p {
            pa.push(s);
        } else {
            bona.push(s);
        }
    }
    Ok(ScoreSet {
        bonafide_scores: bona,
        pa_scores: pa,
    })
}

/// Outputs of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub result: PadResult,
    pub sets: ExperimentSet,
    pub results_csv: PathBuf,
    pub roc_csv: PathBuf,
}

/// Run one full experiment: build the train/test composition, train the
/// reference classifier, score the fixed test set, and emit the result
/// CSVs into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    exp: ExperimentId,
    manifest: &Path,
    registry: &DomainRegistry,
    gan_net: &NetConfig,
    gan: &Model,
    pad_cfg: &ClassifierConfig,
    out_dir: &Path,
    seed: u64,
    exp4_target: Option<usize>,
    filter: FilterType,
) -> Result<ExperimentOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sets = build_experiment_set(
        exp, manifest, registry, gan_net, gan, out_dir, seed, exp4_target, filter,
    )?;
    let mut cfg = pad_cfg.clone();
    cfg.seed = seed;
    let clf = train_pad_classifier(&sets.train_manifest, registry, &cfg, filter)?;
    clf.save(&out_dir.join("pad_classifier.ckpt"), [0; 32], cfg.steps)?;
    let scores = score_manifest(&clf, &sets.test_manifest, registry, filter)?;
    let tdr = tdr_at_fdr(&scores, &FDR_TARGETS)?;
    let roc = roc_points(&scores)?;
    let result = PadResult {
        experiment: exp.number(),
        classifier: CLASSIFIER_ID.to_string(),
        tdr: [tdr[0], tdr[1], tdr[2]],
        roc,
    };
    let results_csv = out_dir.join(format!("pad_exp{}.csv", exp.number()));
    write_results_csv(&results_csv, std::slice::from_ref(&result))?;
    let roc_csv = out_dir.join(format!("roc_exp{}.csv", exp.number()));
    let mut text = String::from("fdr,tdr\n");
    for (f, t) in &result.roc {
        text.push_str(&format!("{f:.6},{t:.6}\n"));
    }
    fs::write(&roc_csv, text).map_err(|e| Error::io(&roc_csv, e))?;
    Ok(ExperimentOutcome {
        result,
        sets,
        results_csv,
        roc_csv,
    })
}
