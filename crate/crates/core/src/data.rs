//! Dataset plumbing: domain registry, manifest ingestion, procedural toy
//! domains, and PNG image I/O.
//!
//! Images are stored channel-last `(H, W, C)` with values in `[0, 1]`;
//! networks convert to `(C, H, W)` in `[-1, 1]` at their boundary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::FeatureMap;

pub const PA_BONAFIDE: &str = "bonafide";

/// Ordered set of domains with one-hot label encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    names: Vec<String>,
}

impl DomainRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("domain registry must not be empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("domain {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate domain name `{n}`")));
            }
        }
        Ok(DomainRegistry { names })
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn one_hot(&self, idx: usize) -> Array1<f64> {
        let mut v = Array1::zeros(self.count());
        v[idx] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Provenance::Real),
            "synthetic" => Some(Provenance::Synthetic),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Real => write!(f, "real"),
            Provenance::Synthetic => write!(f, "synthetic"),
        }
    }
}

/// One manifest row resolved against a registry; the image itself is
/// decoded lazily via [`load_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDescriptor {
    pub path: PathBuf,
    pub domain: usize,
    pub split: Split,
    pub pa_class: String,
    pub provenance: Provenance,
}

/// A decoded image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `(H, W, C)`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub domain: usize,
    pub split: Split,
    pub pa_class: String,
    pub provenance: Provenance,
}

impl ImageSample {
    pub fn validate(&self, registry: &DomainRegistry) -> Result<()> {
        if self.domain >= registry.count() {
            return Err(Error::contract(format!(
                "sample domain index {} out of range ({} domains)",
                self.domain,
                registry.count()
            )));
        }
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("pixel values outside [0, 1]"));
        }
        Ok(())
    }

    /// Network-side view: `(C, H, W)` scaled to `[-1, 1]`.
    pub fn to_net(&self) -> FeatureMap {
        let (h, w, c) = self.pixels.dim();
        let mut out = FeatureMap::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ci, i, j]] = 2.0 * self.pixels[[i, j, ci]] - 1.0;
                }
            }
        }
        out
    }
}

/// Convert a network-side `(C, H, W)` tensor in `[-1, 1]` back to the
/// canonical `(H, W, C)` range `[0, 1]`.
pub fn from_net(x: &FeatureMap) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((h, w, c));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[i, j, ci]] = ((x[[ci, i, j]] + 1.0) / 2.0).clamp(0.0, 1.0);
            }
        }
    }
    out
}

const MANIFEST_HEADER: &str = "path,domain,split,pa_class";
const MANIFEST_HEADER_PROV: &str = "path,domain,split,pa_class,provenance";

/// Parse a manifest CSV into sample descriptors.
///
/// The header must be exactly `path,domain,split,pa_class`, optionally with
/// a trailing `provenance` column. Lines starting with `#` after the header
/// are treated as comments. Fields may not contain commas. Unknown domains
/// are fatal with the offending row number; rows are numbered from 1 at the
/// header.
pub fn load_manifest(path: &Path, registry: &DomainRegistry) -> Result<Vec<SampleDescriptor>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Manifest {
        path: path.into(),
        message: "empty file (missing header)".into(),
    })?;
    let has_provenance = match header.trim_end() {
        MANIFEST_HEADER => false,
        MANIFEST_HEADER_PROV => true,
        other => {
            return Err(Error::Manifest {
                path: path.into(),
                message: format!("bad header `{other}`, expected `{MANIFEST_HEADER}`"),
            })
        }
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (lineno, line) in lines {
        let row = lineno + 1; // 1-based, header is row 1
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if has_provenance { 5 } else { 4 };
        if fields.len() != expected {
            return Err(Error::ManifestRow {
                path: path.into(),
                row,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let domain = registry.index(fields[1]).ok_or_else(|| Error::ManifestRow {
            path: path.into(),
            row,
            message: format!("unknown domain name `{}`", fields[1]),
        })?;
        let split = Split::parse(fields[2]).ok_or_else(|| Error::ManifestRow {
            path: path.into(),
            row,
            message: format!("bad split `{}` (expected train|test)", fields[2]),
        })?;
        let provenance = if has_provenance {
            Provenance::parse(fields[4]).ok_or_else(|| Error::ManifestRow {
                path: path.into(),
                row,
                message: format!("bad provenance `{}` (expected real|synthetic)", fields[4]),
            })?
        } else {
            Provenance::Real
        };
        let p = PathBuf::from(fields[0]);
        let path_abs = if p.is_absolute() { p } else { base.join(p) };
        out.push(SampleDescriptor {
            path: path_abs,
            domain,
            split,
            pa_class: fields[3].to_string(),
            provenance,
        });
    }
    if out.is_empty() {
        log::warn!("manifest {} contains no data rows", path.display());
    }
    Ok(out)
}

/// Build a registry from a manifest's domain column, ordered by first
/// appearance. Used when no explicit registry is configured.
pub fn registry_from_manifest(path: &Path) -> Result<DomainRegistry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(domain) = line.split(',').nth(1) {
            if !names.iter().any(|n| n == domain) {
                names.push(domain.to_string());
            }
        }
    }
    if names.is_empty() {
        return Err(Error::Manifest {
            path: path.into(),
            message: "no data rows to derive a domain registry from".into(),
        });
    }
    DomainRegistry::new(names)
}

/// Write a manifest. Paths are written as given; `header_comments` lines are
/// emitted right after the header prefixed with `#`.
pub fn write_manifest(
    path: &Path,
    registry: &DomainRegistry,
    rows: &[SampleDescriptor],
    with_provenance: bool,
    header_comments: &[String],
) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(if with_provenance {
        MANIFEST_HEADER_PROV
    } else {
        MANIFEST_HEADER
    });
    buf.push('\n');
    for c in header_comments {
        buf.push_str(&format!("# {c}\n"));
    }
    for r in rows {
        let p = r.path.to_string_lossy();
        if p.contains(',') || r.pa_class.contains(',') {
            return Err(Error::Manifest {
                path: path.into(),
                message: format!("field containing a comma cannot be written: `{p}`"),
            });
        }
        buf.push_str(&format!(
            "{},{},{},{}",
            p,
            registry.name(r.domain),
            r.split,
            r.pa_class
        ));
        if with_provenance {
            buf.push_str(&format!(",{}", r.provenance));
        }
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Decode one descriptor into an [`ImageSample`], resizing to
/// `resolution` x `resolution` with the given filter.
pub fn load_sample(
    desc: &SampleDescriptor,
    resolution: usize,
    channels: usize,
    filter: FilterType,
) -> Result<ImageSample> {
    let img = image::open(&desc.path).map_err(|e| Error::Image {
        path: desc.path.clone(),
        message: e.to_string(),
    })?;
    let img = img.resize_exact(resolution as u32, resolution as u32, filter);
    let pixels = match channels {
        1 => {
            let g = img.to_luma8();
            Array3::from_shape_fn((resolution, resolution, 1), |(i, j, _)| {
                g.get_pixel(j as u32, i as u32)[0] as f64 / 255.0
            })
        }
        3 => {
            let rgb = img.to_rgb8();
            Array3::from_shape_fn((resolution, resolution, 3), |(i, j, c)| {
                rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
            })
        }
        n => {
            return Err(Error::Config(format!(
                "unsupported channel count {n} (expected 1 or 3)"
            )))
        }
    };
    Ok(ImageSample {
        pixels,
        domain: desc.domain,
        split: desc.split,
        pa_class: desc.pa_class.clone(),
        provenance: desc.provenance,
    })
}

/// A fully decoded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub registry: DomainRegistry,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    /// Load every row of a manifest, skipping rows whose image fails to
    /// decode (with a logged warning), mirroring lossy ingestion of large
    /// corpora.
    pub fn load(
        manifest: &Path,
        registry: &DomainRegistry,
        resolution: usize,
        channels: usize,
        filter: FilterType,
    ) -> Result<Dataset> {
        let descs = load_manifest(manifest, registry)?;
        let mut samples = Vec::with_capacity(descs.len());
        for d in &descs {
            match load_sample(d, resolution, channels, filter) {
                Ok(s) => samples.push(s),
                Err(e) => log::warn!("skipping row: {e}"),
            }
        }
        Ok(Dataset {
            registry: registry.clone(),
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Indices of training samples grouped by domain.
    pub fn train_indices_by_domain(&self) -> Vec<Vec<usize>> {
        let mut by_domain = vec![Vec::new(); self.registry.count()];
        for (i, s) in self.samples.iter().enumerate() {
            if s.split == Split::Train {
                by_domain[s.domain].push(i);
            }
        }
        by_domain
    }
}

/// Parse a resize filter name.
pub fn parse_filter(name: &str) -> Option<FilterType> {
    match name {
        "nearest" => Some(FilterType::Nearest),
        "bilinear" => Some(FilterType::Triangle),
        "bicubic" => Some(FilterType::CatmullRom),
        "lanczos" => Some(FilterType::Lanczos3),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Procedural toy domains
// ---------------------------------------------------------------------------

/// Names of the three procedural domains, in registry order. The first
/// plays the bonafide role in PAD experiments; the others are PA classes.
pub const TOY_DOMAINS: [&str; 3] = ["stripes", "checker", "blobs"];

pub fn toy_registry() -> DomainRegistry {
    DomainRegistry::new(TOY_DOMAINS.iter().map(|s| s.to_string()).collect()).expect("static names")
}

pub fn toy_pa_class(domain: usize) -> &'static str {
    match domain {
        0 => PA_BONAFIDE,
        1 => "checker",
        2 => "blobs",
        _ => unreachable!("toy registry has 3 domains"),
    }
}

// Intensity levels are chosen so per-domain mean brightness bands stay
// disjoint across the whole contrast range, keeping the domains separable
// for a nearest-centroid classifier on raw pixels.
const STRIPE_LO: f64 = 0.6;
const STRIPE_HI: f64 = 1.0;
const CHECKER_LO: f64 = 0.0;
const CHECKER_HI: f64 = 0.55;

/// Horizontal stripes: rows alternate between low and high intensity in
/// blocks of `period`, then the whole image is scaled by `contrast`.
pub fn stripe_image(resolution: usize, period: usize, phase: usize, contrast: f64) -> Array3<f64> {
    Array3::from_shape_fn((resolution, resolution, 1), |(i, _, _)| {
        let band = (i + phase) / period;
        let v = if band % 2 == 0 { STRIPE_HI } else { STRIPE_LO };
        v * contrast
    })
}

/// Checkerboard with square cells of `cell`, offset by `(off_i, off_j)`,
/// scaled by `contrast`.
pub fn checker_image(
    resolution: usize,
    cell: usize,
    off_i: usize,
    off_j: usize,
    contrast: f64,
) -> Array3<f64> {
    Array3::from_shape_fn((resolution, resolution, 1), |(i, j, _)| {
        let parity = ((i + off_i) / cell + (j + off_j) / cell) % 2;
        let v = if parity == 0 { CHECKER_HI } else { CHECKER_LO };
        v * contrast
    })
}

/// Sum of isotropic Gaussian bumps at the given centers, clipped to `[0,1]`
/// and scaled by `contrast`.
pub fn blob_image(resolution: usize, centers: &[(f64, f64)], sigma: f64, contrast: f64) -> Array3<f64> {
    Array3::from_shape_fn((resolution, resolution, 1), |(i, j, _)| {
        let mut v: f64 = 0.0;
        for &(ci, cj) in centers {
            let di = i as f64 - ci;
            let dj = j as f64 - cj;
            v += (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
        v.min(1.0) * contrast
    })
}

/// Generate the three toy domains deterministically from a seed.
///
/// Produces `per_domain` samples for each domain, interleaving train/test
/// split tags so both splits cover every domain (even indices train,
/// odd test).
pub fn generate_toy_domains(seed: u64, per_domain: usize, resolution: usize) -> Result<Vec<ImageSample>> {
    if per_domain < 1 {
        return Err(Error::Config("per_domain must be at least 1".into()));
    }
    if resolution < 16 {
        return Err(Error::Config(format!(
            "toy resolution must be at least 16, got {resolution}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_domain);
    for domain in 0..3 {
        for k in 0..per_domain {
            let contrast = rng.gen_range(0.6..1.0);
            let pixels = match domain {
                0 => {
                    let period = rng.gen_range(3..=5);
                    let phase = rng.gen_range(0..2 * period);
                    stripe_image(resolution, period, phase, contrast)
                }
                1 => {
                    let cell = rng.gen_range(3..=5);
                    let off_i = rng.gen_range(0..cell);
                    let off_j = rng.gen_range(0..cell);
                    checker_image(resolution, cell, off_i, off_j, contrast)
                }
                _ => {
                    let count = rng.gen_range(2..=5);
                    let centers: Vec<(f64, f64)> = (0..count)
                        .map(|_| {
                            (
                                rng.gen_range(0.0..resolution as f64),
                                rng.gen_range(0.0..resolution as f64),
                            )
                        })
                        .collect();
                    let sigma = resolution as f64 / 12.0;
                    blob_image(resolution, &centers, sigma, contrast)
                }
            };
            out.push(ImageSample {
                pixels,
                domain,
                split: if k % 2 == 0 { Split::Train } else { Split::Test },
                pa_class: toy_pa_class(domain).to_string(),
                provenance: Provenance::Real,
            });
        }
    }
    Ok(out)
}

/// Write samples as 8-bit grayscale PNGs plus a manifest.
///
/// Layout: `out_dir/<domain>/<seq>.png`; the manifest lands at
/// `out_dir/manifest.csv` with paths relative to `out_dir`.
pub fn write_image_set(
    out_dir: &Path,
    registry: &DomainRegistry,
    samples: &[ImageSample],
    with_provenance: bool,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut counters: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        let seq = counters.entry(s.domain).or_insert(0);
        let dir = out_dir.join(registry.name(s.domain));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = PathBuf::from(registry.name(s.domain)).join(format!("{seq:05}.png"));
        *seq += 1;
        let abs = out_dir.join(&rel);
        save_png(&abs, &s.pixels)?;
        rows.push(SampleDescriptor {
            path: rel,
            domain: s.domain,
            split: s.split,
            pa_class: s.pa_class.clone(),
            provenance: s.provenance,
        });
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, registry, &rows, with_provenance, &[])?;
    Ok(manifest)
}

/// Save a `(H, W, C)` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(pixels[[y as usize, x as usize, 0]])])
            });
            img.save(path).map_err(|e| Error::Image {
                path: path.into(),
                message: e.to_string(),
            })
        }
        3 => {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    to_u8(pixels[[y as usize, x as usize, 0]]),
                    to_u8(pixels[[y as usize, x as usize, 1]]),
                    to_u8(pixels[[y as usize, x as usize, 2]]),
                ])
            });
            img.save(path).map_err(|e| Error::Image {
                path: path.into(),
                message: e.to_string(),
            })
        }
        n => Err(Error::Config(format!(
            "unsupported channel count {n} for PNG output"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn registry_rejects_duplicates_and_empties() {
        assert!(DomainRegistry::new(vec![]).is_err());
        assert!(DomainRegistry::new(vec!["a".into(), "a".into()]).is_err());
        assert!(DomainRegistry::new(vec!["a".into(), "".into()]).is_err());
        let r = DomainRegistry::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(r.count(), 2);
    }

    #[test]
    fn one_hot_has_single_one() {
        let r = toy_registry();
        for i in 0..r.count() {
            let v = r.one_hot(i);
            assert_eq!(v.sum(), 1.0);
            assert_eq!(v[i], 1.0);
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempdir().unwrap();
        let reg = toy_registry();
        let rows = vec![
            SampleDescriptor {
                path: "stripes/x.png".into(),
                domain: 0,
                split: Split::Train,
                pa_class: PA_BONAFIDE.into(),
                provenance: Provenance::Real,
            },
            SampleDescriptor {
                path: "checker/y.png".into(),
                domain: 1,
                split: Split::Test,
                pa_class: "checker".into(),
                provenance: Provenance::Synthetic,
            },
        ];
        let path = dir.path().join("m.csv");
        write_manifest(&path, &reg, &rows, true, &["a comment".into()]).unwrap();
        let loaded = load_manifest(&path, &reg).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].domain, 0);
        assert_eq!(loaded[1].provenance, Provenance::Synthetic);
        // paths come back resolved against the manifest directory
        assert_eq!(loaded[0].path, dir.path().join("stripes/x.png"));
    }

    #[test]
    fn manifest_with_four_rows_two_domains() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "path,domain,split,pa_class\n\
             a.png,stripes,train,bonafide\n\
             b.png,checker,train,checker\n\
             c.png,stripes,test,bonafide\n\
             d.png,checker,test,checker\n",
        )
        .unwrap();
        let reg = toy_registry();
        let rows = load_manifest(&path, &reg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| r.domain).collect::<Vec<_>>(),
            vec![0, 1, 0, 1]
        );
    }

    #[test]
    fn empty_manifest_yields_empty_list() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "path,domain,split,pa_class\n").unwrap();
        let rows = load_manifest(&path, &toy_registry()).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn unknown_domain_names_row_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "path,domain,split,pa_class\na.png,stripes,train,bonafide\nb.png,unknown,train,x\n",
        )
        .unwrap();
        let err = load_manifest(&path, &toy_registry()).unwrap_err();
        match err {
            Error::ManifestRow { row, message, .. } => {
                assert_eq!(row, 3);
                assert!(message.contains("unknown"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_manifest_is_fatal() {
        assert!(load_manifest(Path::new("/nonexistent/m.csv"), &toy_registry()).is_err());
    }

    #[test]
    fn toy_counts_and_determinism() {
        let a = generate_toy_domains(0, 10, 32).unwrap();
        assert_eq!(a.len(), 30);
        for d in 0..3 {
            assert_eq!(a.iter().filter(|s| s.domain == d).count(), 10);
        }
        let b = generate_toy_domains(0, 10, 32).unwrap();
        assert_eq!(a, b, "same seed must be bitwise identical");
        let c = generate_toy_domains(1, 10, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stripe_blocks_alternate() {
        // period 4, phase 0: rows 0..4 high, 4..8 low, ...
        let img = stripe_image(32, 4, 0, 1.0);
        for i in 0..32 {
            let expect = if (i / 4) % 2 == 0 { STRIPE_HI } else { STRIPE_LO };
            for j in 0..32 {
                assert_eq!(img[[i, j, 0]], expect, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn toy_domains_are_centroid_separable() {
        // nearest-centroid on raw pixels, per_domain=100, resolution=32
        let samples = generate_toy_domains(42, 100, 32).unwrap();
        let train: Vec<&ImageSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
        let test: Vec<&ImageSample> = samples.iter().filter(|s| s.split == Split::Test).collect();
        let n = 32 * 32;
        let mut centroids = vec![vec![0.0f64; n]; 3];
        let mut counts = [0usize; 3];
        for s in &train {
            counts[s.domain] += 1;
            for (acc, &v) in centroids[s.domain].iter_mut().zip(s.pixels.iter()) {
                *acc += v;
            }
        }
        for (c, &cnt) in centroids.iter_mut().zip(counts.iter()) {
            for v in c.iter_mut() {
                *v /= cnt as f64;
            }
        }
        let mut correct = 0;
        for s in &test {
            let mut best = (f64::INFINITY, 0);
            for (d, c) in centroids.iter().enumerate() {
                let dist: f64 = c
                    .iter()
                    .zip(s.pixels.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, d);
                }
            }
            if best.1 == s.domain {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc} below 0.95");
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempdir().unwrap();
        let samples = generate_toy_domains(7, 2, 32).unwrap();
        let reg = toy_registry();
        let manifest = write_image_set(dir.path(), &reg, &samples, false).unwrap();
        let descs = load_manifest(&manifest, &reg).unwrap();
        assert_eq!(descs.len(), samples.len());
        let loaded = load_sample(&descs[0], 32, 1, FilterType::Triangle).unwrap();
        let max_err = loaded
            .pixels
            .iter()
            .zip(samples[0].pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "quantization error {max_err}");
    }

    #[test]
    fn net_range_roundtrip() {
        let samples = generate_toy_domains(3, 1, 32).unwrap();
        let net = samples[0].to_net();
        assert!(net.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let back = from_net(&net);
        let max_err = back
            .iter()
            .zip(samples[0].pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12);
    }
}
