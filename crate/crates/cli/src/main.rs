//! Command-line front end: toy-data generation, training, synthesis,
//! FID evaluation, PAD experiments, and report consolidation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use citgan::classifier::{train_classifier, ClassifierConfig, SmallCnn, Target};
use citgan::data::{
    generate_toy_domains, load_manifest, load_sample, registry_from_manifest, write_image_set,
    Dataset, DomainRegistry, Split,
};
use citgan::fid::{accumulate_stats, fid, fid_distribution, write_fid_report, ClassifierExtractor};
use citgan::pad::{run_experiment, PadResult};
use citgan::trainer::{load_model, train};
use citgan::translate::{synthesize_set, ExperimentId};
use citgan::{Config, Model};

#[derive(Parser)]
#[command(
    name = "citgan",
    version,
    about = "Multi-domain image translation GAN with FID evaluation and a PAD experiment harness"
)]
struct Cli {
    /// Print the default configuration and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three procedural toy domains as PNGs plus a manifest.
    Toydata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        per_domain: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Train the translation model on a manifest dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset manifest (CSV).
        #[arg(long)]
        data: PathBuf,
        /// Resume from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate sources into target domains with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of source images (bonafide by convention).
        #[arg(long)]
        sources: PathBuf,
        /// Manifest of reference images grouped by their domain column.
        #[arg(long)]
        references: PathBuf,
        /// Per-domain counts, e.g. `checker=100,blobs=50`.
        #[arg(long)]
        targets: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Frechet-distance report comparing real and synthetic manifests.
    Fid {
        /// Feature extractor checkpoint, or `auto` to train a domain
        /// classifier on the real manifest's train split.
        #[arg(long)]
        extractor: String,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// Bootstrap resample count (default: single full-set comparison).
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Synthetic subset size per resample (default: full set).
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value = "fid_report")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one PAD experiment end to end.
    Pad {
        #[arg(long)]
        experiment: u32,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Real dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Trained GAN checkpoint (required for experiments 2-4).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Consolidate PAD result CSVs under a directory into one table.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.print_defaults {
        print!("{}", Config::default().print());
        return;
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: a subcommand is required (try --help)");
        std::process::exit(2);
    };
    if let Err(e) = run(cmd) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// `CITGAN_SEED` overrides any configured or flag-provided seed.
fn effective_seed(seed: u64) -> Result<u64> {
    match std::env::var("CITGAN_SEED") {
        Ok(v) => v
            .parse()
            .with_context(|| format!("CITGAN_SEED must be an integer, got `{v}`")),
        Err(_) => Ok(seed),
    }
}

/// Provenance record: equal records imply equal outputs.
fn write_run_record(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config_hash: Option<String>,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let hash = config_hash
        .map(|h| format!("\"{h}\""))
        .unwrap_or_else(|| "null".into());
    let record = format!(
        "{{\n  \"tool\": \"citgan\",\n  \"version\": \"{}\",\n  \"command\": \"{command}\",\n  \"seed\": {seed},\n  \"config_hash\": {hash}\n}}\n",
        env!("CARGO_PKG_VERSION")
    );
    fs::write(out_dir.join("run.json"), record)?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Toydata {
            out,
            seed,
            per_domain,
            resolution,
        } => {
            let seed = effective_seed(seed)?;
            let samples = generate_toy_domains(seed, per_domain, resolution)?;
            let registry = citgan::data::toy_registry();
            let manifest = write_image_set(&out, &registry, &samples, false)?;
            write_run_record(&out, "toydata", seed, None)?;
            println!("wrote {} images and {}", samples.len(), manifest.display());
            Ok(())
        }

        Command::Train {
            config,
            out,
            data,
            resume,
        } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.seed = effective_seed(cfg.seed)?;
            let registry = registry_from_manifest(&data)?;
            let dataset =
                Dataset::load(&data, &registry, cfg.resolution, cfg.channels, cfg.filter()?)?;
            let net = cfg.net_config(registry.count());
            let outcome = train(
                &net,
                &cfg.train_config(),
                &dataset,
                &out,
                cfg.hash(),
                resume.as_deref(),
            )?;
            write_run_record(&out, "train", cfg.seed, Some(cfg.hash_hex()))?;
            println!(
                "trained {} steps; checkpoint {}; losses {}",
                cfg.steps,
                outcome.final_checkpoint.display(),
                outcome.loss_csv.display()
            );
            Ok(())
        }

        Command::Generate {
            checkpoint,
            sources,
            references,
            targets,
            out,
            seed,
        } => {
            let seed = effective_seed(seed)?;
            let (model, registry, _) = load_model(&checkpoint)?;
            let cfg = model.cfg().clone();
            let filter = citgan::data::parse_filter("bilinear").unwrap();
            let load_all = |manifest: &Path| -> Result<Vec<citgan::ImageSample>> {
                let descs = load_manifest(manifest, &registry)?;
                descs
                    .iter()
                    .map(|d| Ok(load_sample(d, cfg.resolution, cfg.channels, filter)?))
                    .collect()
            };
            let source_samples = load_all(&sources)?;
            let reference_samples = load_all(&references)?;
            let target_counts = parse_targets(&targets, &registry)?;
            let synth = synthesize_set(
                &model,
                &registry,
                &source_samples,
                &reference_samples,
                &target_counts,
                seed,
            )?;
            let manifest = write_image_set(&out, &registry, &synth, true)?;
            write_run_record(&out, "generate", seed, None)?;
            println!(
                "wrote {} synthetic images; manifest {}",
                synth.len(),
                manifest.display()
            );
            Ok(())
        }

        Command::Fid {
            extractor,
            real,
            synthetic,
            bootstrap,
            subset,
            out,
            config,
        } => {
            let cfg = match config {
                Some(p) => Config::from_file(&p)?,
                None => Config::default(),
            };
            let seed = effective_seed(cfg.seed)?;
            fs::create_dir_all(&out)?;
            let registry = registry_from_manifest(&real)?;
            let filter = cfg.filter()?;
            let load_by_domain = |manifest: &Path| -> Result<Vec<Vec<citgan::nn::FeatureMap>>> {
                let descs = load_manifest(manifest, &registry)?;
                let mut by_domain = vec![Vec::new(); registry.count()];
                for d in &descs {
                    let s = load_sample(d, cfg.resolution, cfg.channels, filter)?;
                    by_domain[d.domain].push(s.to_net());
                }
                Ok(by_domain)
            };
            let real_by_domain = load_by_domain(&real)?;
            let synth_by_domain = load_by_domain(&synthetic)?;

            let net = if extractor == "auto" {
                let net = train_domain_classifier(&real, &registry, &cfg, seed)?;
                let path = out.join("extractor.ckpt");
                net.save(&path, cfg.hash(), cfg.pad_steps)?;
                println!("trained feature extractor -> {}", path.display());
                net
            } else {
                SmallCnn::load(Path::new(&extractor))?
            };
            let ex = ClassifierExtractor::new(net);

            let mut sets = Vec::new();
            for d in 0..registry.count() {
                if synth_by_domain[d].len() >= 2 && real_by_domain[d].len() >= 2 {
                    sets.push((
                        registry.name(d).to_string(),
                        real_by_domain[d].clone(),
                        synth_by_domain[d].clone(),
                    ));
                }
            }
            if sets.is_empty() {
                bail!("no domain has at least 2 real and 2 synthetic images");
            }
            let report = match (bootstrap, subset) {
                (None, None) => {
                    let mut rows = Vec::new();
                    for (name, r, s) in &sets {
                        let rs = accumulate_stats(&ex, r)?;
                        let ss = accumulate_stats(&ex, s)?;
                        let v = fid(&rs, &ss)?;
                        rows.push(citgan::fid::DomainFid {
                            domain: name.clone(),
                            values: vec![v],
                            mean: v,
                            std: 0.0,
                        });
                    }
                    rows
                }
                (b, s) => {
                    let b = b.unwrap_or(1);
                    let min_synth = sets.iter().map(|(_, _, s)| s.len()).min().unwrap();
                    let s = s.unwrap_or(min_synth);
                    fid_distribution(&ex, &sets, b, s, seed)?
                }
            };
            write_fid_report(&out, &report, cfg.fid_bins)?;
            write_run_record(&out, "fid", seed, Some(cfg.hash_hex()))?;
            for d in &report {
                println!("{}: mean FID {:.4} (std {:.4})", d.domain, d.mean, d.std);
            }
            Ok(())
        }

        Command::Pad {
            experiment,
            config,
            out,
            data,
            checkpoint,
        } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.seed = effective_seed(cfg.seed)?;
            let exp = ExperimentId::parse(experiment)
                .with_context(|| format!("experiment must be 1..4, got {experiment}"))?;
            let needs_gan = exp != ExperimentId::One;
            let (model, registry) = match checkpoint {
                Some(p) => {
                    let (m, r, _) = load_model(&p)?;
                    (m, r)
                }
                None if needs_gan => {
                    bail!("experiment {experiment} needs --checkpoint (synthesis required)")
                }
                None => {
                    let registry = registry_from_manifest(&data)?;
                    let model = Model::new(&cfg.net_config(registry.count()), cfg.seed)?;
                    (model, registry)
                }
            };
            let net = model.cfg().clone();
            let mut pad_cfg = cfg.pad_classifier_config(1);
            pad_cfg.resolution = net.resolution;
            pad_cfg.channels = net.channels;
            let exp4_target = (cfg.exp4_target > 0).then_some(cfg.exp4_target);
            let outcome = run_experiment(
                exp,
                &data,
                &registry,
                &net,
                &model,
                &pad_cfg,
                &out,
                cfg.seed,
                exp4_target,
                cfg.filter()?,
            )?;
            write_run_record(&out, "pad", cfg.seed, Some(cfg.hash_hex()))?;
            let r = &outcome.result;
            println!(
                "experiment {}: TDR@0.1%={:.4} TDR@0.2%={:.4} TDR@1.0%={:.4} -> {}",
                r.experiment,
                r.tdr[0],
                r.tdr[1],
                r.tdr[2],
                outcome.results_csv.display()
            );
            Ok(())
        }

        Command::Report { runs } => {
            let mut rows: Vec<(u32, String)> = Vec::new();
            collect_pad_rows(&runs, &mut rows)?;
            if rows.is_empty() {
                bail!("no pad_exp*.csv files found under {}", runs.display());
            }
            rows.sort();
            let mut table = String::from(PadResult::csv_header());
            table.push('\n');
            for (_, row) in &rows {
                table.push_str(row);
                table.push('\n');
            }
            let path = runs.join("consolidated.csv");
            fs::write(&path, &table)?;
            print!("{table}");
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn parse_targets(spec: &str, registry: &DomainRegistry) -> Result<BTreeMap<usize, usize>> {
    let mut out = BTreeMap::new();
    for part in spec.split(',') {
        let (name, count) = part
            .split_once('=')
            .with_context(|| format!("bad target `{part}`, expected `domain=count`"))?;
        let d = registry
            .index(name.trim())
            .with_context(|| format!("unknown target domain `{name}`"))?;
        let count: usize = count
            .trim()
            .parse()
            .with_context(|| format!("bad count in target `{part}`"))?;
        out.insert(d, count);
    }
    Ok(out)
}

/// Train the default FID extractor: a domain classifier over the train
/// split of the given manifest.
fn train_domain_classifier(
    manifest: &Path,
    registry: &DomainRegistry,
    cfg: &Config,
    seed: u64,
) -> Result<SmallCnn> {
    let descs = load_manifest(manifest, registry)?;
    let mut images = Vec::new();
    let mut targets = Vec::new();
    for d in descs.iter().filter(|d| d.split == Split::Train) {
        let s = load_sample(d, cfg.resolution, cfg.channels, cfg.filter()?)?;
        images.push(s.to_net());
        targets.push(Target::Class(d.domain));
    }
    if images.is_empty() {
        bail!("manifest {} has no train-split rows", manifest.display());
    }
    let ccfg = ClassifierConfig {
        seed,
        ..cfg.pad_classifier_config(registry.count())
    };
    Ok(train_classifier(&ccfg, &images, &targets)?)
}

fn collect_pad_rows(dir: &Path, rows: &mut Vec<(u32, String)>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_pad_rows(&path, rows)?;
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("pad_exp") && name.ends_with(".csv") {
            let text = fs::read_to_string(&path)?;
            for line in text.lines().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let exp: u32 = line.split(',').next().unwrap_or("0").parse().unwrap_or(0);
                rows.push((exp, line.to_string()));
            }
        }
    }
    Ok(())
}
