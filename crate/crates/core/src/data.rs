//! Synthetic styled-identity corpus and the P x K batch sampler.
//!
//! Each identity is a fixed spatial layout (two-tone body split, stripes,
//! a blob) with its own base colors. Each domain applies a photometric
//! transform drawn from its parameter ranges. Everything is seeded.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{snrt, Tensor};
use crate::error::{Error, Result};

/// Inclusive `[lo, hi]` range a parameter is drawn from.
pub type Span = [f64; 2];

fn draw(r: &mut impl Rng, s: Span) -> f64 {
    if s[0] == s[1] {
        s[0]
    } else {
        r.gen_range(s[0]..=s[1])
    }
}

/// Derives an independent seed from a base seed and a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(tag);
    r.next_u64()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    #[default]
    Source,
    Target,
}

/// Unspecified ranges default to the identity transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleDomainSpec {
    pub domain_id: usize,
    pub role: DomainRole,
    /// Per-channel multiplicative gain, drawn independently for each channel.
    pub gain: Span,
    /// Per-channel additive bias.
    pub bias: Span,
    pub gamma: Span,
    pub contrast: Span,
    /// Weight of the gray image (desaturation).
    pub blend: Span,
    pub noise: Span,
    pub seed: u64,
    /// First identity id and count rendered in this domain. Defaults to all
    /// corpus identities.
    pub identities: Option<[usize; 2]>,
}

impl Default for StyleDomainSpec {
    fn default() -> Self {
        Self::neutral(0, 0)
    }
}

impl StyleDomainSpec {
    /// A domain whose transform is the identity map.
    pub fn neutral(domain_id: usize, seed: u64) -> Self {
        Self {
            domain_id,
            role: DomainRole::Source,
            gain: [1.0, 1.0],
            bias: [0.0, 0.0],
            gamma: [1.0, 1.0],
            contrast: [1.0, 1.0],
            blend: [0.0, 0.0],
            noise: [0.0, 0.0],
            seed,
            identities: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain {}: {m}", self.domain_id)));
        let spans = [
            ("gain", self.gain),
            ("bias", self.bias),
            ("gamma", self.gamma),
            ("contrast", self.contrast),
            ("blend", self.blend),
            ("noise", self.noise),
        ];
        for (name, s) in spans {
            if !(s[0].is_finite() && s[1].is_finite()) || s[0] > s[1] {
                return bad(format!("{name} range {s:?} is not an ordered finite pair"));
            }
        }
        if self.gain[0] <= 0.0 {
            return bad("gains must be positive".into());
        }
        if self.gamma[0] < 0.3 || self.gamma[1] > 3.0 {
            return bad("gamma must lie in [0.3, 3]".into());
        }
        if self.blend[0] < 0.0 || self.blend[1] > 1.0 {
            return bad("blend must lie in [0, 1]".into());
        }
        if self.contrast[0] <= 0.0 || self.noise[0] < 0.0 {
            return bad("contrast must be positive and noise non-negative".into());
        }
        Ok(())
    }

    /// Concrete transform parameters for one instance.
    pub fn draw_params(&self, instance_seed: u64) -> StyleParams {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, instance_seed));
        StyleParams {
            gain: [0; 3].map(|_| draw(&mut r, self.gain)),
            bias: [0; 3].map(|_| draw(&mut r, self.bias)),
            gamma: draw(&mut r, self.gamma),
            contrast: draw(&mut r, self.contrast),
            blend: draw(&mut r, self.blend),
            noise: draw(&mut r, self.noise),
            noise_seed: r.next_u64(),
        }
    }
}

/// One drawn photometric transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    pub contrast: f64,
    pub blend: f64,
    pub noise: f64,
    pub noise_seed: u64,
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gain.iter().all(|g| g.is_finite() && *g > 0.0)
            && self.bias.iter().all(|b| b.is_finite())
            && (0.3..=3.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.blend)
            && self.contrast.is_finite()
            && self.contrast > 0.0
            && self.noise.is_finite()
            && self.noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "style parameters out of range: {self:?}"
            )))
        }
    }
}

/// Luma weights of the gray image used for desaturation.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Applies a photometric transform to a `[3, h, w]` image in `[0, 1]`:
/// blend with gray, per-channel gain and bias, clamp, gamma, per-channel
/// contrast about the mean, additive noise, clamp.
pub fn apply_style_params(image: &Tensor, p: &StyleParams) -> Result<Tensor> {
    p.validate()?;
    let (c, m) = match image.shape() {
        &[c, h, w] => (c, h * w),
        s => return Err(Error::shape(format!("expected [3, h, w], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let x = image.data();
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "pixel values must lie in [0, 1]".into(),
        ));
    }
    let mut y = vec![0.0; x.len()];
    for i in 0..m {
        let gray: f64 = (0..3).map(|k| LUMA[k] * x[k * m + i]).sum();
        for k in 0..3 {
            let v = p.blend * gray + (1.0 - p.blend) * (p.gain[k] * x[k * m + i] + p.bias[k]);
            y[k * m + i] = v.clamp(0.0, 1.0).powf(p.gamma);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
    for k in 0..3 {
        let ch = &mut y[k * m..(k + 1) * m];
        let mean = ch.iter().sum::<f64>() / m as f64;
        for v in ch.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            // skip the no-op forms so neutral parameters reproduce the input bit for bit
            if p.contrast != 1.0 {
                *v = mean + p.contrast * (*v - mean);
            }
            if p.noise > 0.0 {
                *v += p.noise * n;
            }
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape(), y)
}

/// Draws this instance's transform from the domain ranges and applies it.
pub fn apply_style(image: &Tensor, domain: &StyleDomainSpec, instance_seed: u64) -> Result<Tensor> {
    domain.validate()?;
    apply_style_params(image, &domain.draw_params(instance_seed))
}

/// Fixed appearance of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: usize,
    pub pattern_seed: u64,
    upper: [f64; 3],
    lower: [f64; 3],
    /// Row fraction where the upper body ends.
    split: f64,
    /// Stripe period in rows (0 = plain) and stripe color.
    stripe_period: usize,
    stripe: [f64; 3],
    /// Blob centre (row, col fractions), radius fraction and color.
    blob: [f64; 3],
    blob_color: [f64; 3],
    /// Vertical band: column fraction, width fraction.
    band: [f64; 2],
}

/// Per-instance geometric jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub shift: [f64; 2],
    pub scale: f64,
    pub noise: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            shift: [0.0, 0.0],
            scale: 1.0,
            noise: 0.0,
        }
    }
}

impl IdentitySpec {
    pub fn new(identity_id: usize, pattern_seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(pattern_seed);
        let color = |r: &mut ChaCha8Rng| [0; 3].map(|_| r.gen_range(0.1..0.9));
        let upper = color(&mut r);
        let lower = color(&mut r);
        let stripe = color(&mut r);
        let blob_color = color(&mut r);
        Self {
            identity_id,
            pattern_seed,
            upper,
            lower,
            split: r.gen_range(0.3..0.7),
            stripe_period: [0, 3, 4, 6, 8][r.gen_range(0..5)],
            stripe,
            blob: [
                r.gen_range(0.15..0.85),
                r.gen_range(0.2..0.8),
                r.gen_range(0.08..0.2),
            ],
            blob_color,
            band: [r.gen_range(0.1..0.9), r.gen_range(0.0..0.25)],
        }
    }

    /// Draws instance jitter: a few pixels of shift, +-10% scale, light noise.
    pub fn jitter(instance_seed: u64) -> Jitter {
        let mut r = ChaCha8Rng::seed_from_u64(instance_seed);
        Jitter {
            shift: [r.gen_range(-0.06..0.06), r.gen_range(-0.08..0.08)],
            scale: r.gen_range(0.9..1.1),
            noise: 0.03,
        }
    }

    /// Renders a `[3, h, w]` image in `[0, 1]`.
    pub fn render(&self, h: usize, w: usize, jitter: &Jitter, noise_seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let m = h * w;
        let mut out = vec![0.0; 3 * m];
        for i in 0..h {
            for j in 0..w {
                // normalized coordinates in the jittered frame
                let u = ((i as f64 + 0.5) / h as f64 - 0.5) / jitter.scale + 0.5 - jitter.shift[0];
                let v = ((j as f64 + 0.5) / w as f64 - 0.5) / jitter.scale + 0.5 - jitter.shift[1];
                let mut px = if u < self.split {
                    self.upper
                } else {
                    self.lower
                };
                if self.stripe_period > 0 && u < self.split {
                    let row = (u * h as f64).floor() as i64;
                    if row.rem_euclid(self.stripe_period as i64) == 0 {
                        px = self.stripe;
                    }
                }
                if (v - self.band[0]).abs() < self.band[1] / 2.0 && u >= self.split {
                    px = self.stripe;
                }
                let (du, dv) = (u - self.blob[0], (v - self.blob[1]) * w as f64 / h as f64);
                if (du * du + dv * dv).sqrt() < self.blob[2] {
                    px = self.blob_color;
                }
                for k in 0..3 {
                    let n: f64 = if jitter.noise > 0.0 {
                        jitter.noise * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    out[k * m + i * w + j] = (px[k] + n).clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(&[3, h, w], out).expect("sized")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub identity: usize,
    pub domain: usize,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut buf = Vec::new();
        for s in &self.samples {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a JSON-lines manifest; `path` may be the file or its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut samples = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if !line.trim().is_empty() {
                samples.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { root, samples })
    }

    pub fn select(&self, split: Split, domain: Option<usize>) -> Vec<&SampleRecord> {
        self.samples
            .iter()
            .filter(|s| s.split == split && domain.map_or(true, |d| s.domain == d))
            .collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.samples.iter().map(|s| s.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn load_image(&self, s: &SampleRecord) -> Result<Tensor> {
        snrt::read_file(&self.root.join(&s.path))
    }

    pub fn load_images(&self, samples: &[&SampleRecord]) -> Result<Vec<Tensor>> {
        samples.iter().map(|s| self.load_image(s)).collect()
    }
}

/// Corpus description consumed by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_identities: usize,
    pub instances_per_domain: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    pub seed: u64,
    pub domains: Vec<StyleDomainSpec>,
    /// Also write a PNG next to every tensor file.
    #[serde(default)]
    pub png: bool,
}

fn default_height() -> usize {
    64
}

fn default_width() -> usize {
    32
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.instances_per_domain < 2 {
            return Err(Error::Config(
                "need at least 2 instances per identity and domain".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("no domains".into()));
        }
        let mut ids: Vec<usize> = self.domains.iter().map(|d| d.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return Err(Error::Config("duplicate domain id".into()));
        }
        for d in &self.domains {
            d.validate()?;
            if let Some([_, n]) = d.identities {
                if n < 2 {
                    return Err(Error::Config(format!(
                        "domain {} renders fewer than 2 identities",
                        d.domain_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn identity(&self, id: usize) -> IdentitySpec {
        IdentitySpec::new(id, derive_seed(self.seed, id as u64))
    }
}

/// Renders every (domain, identity, instance) and writes the manifest.
pub fn generate_synthetic_domains(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut samples = Vec::new();
    for d in &spec.domains {
        let dir_name = format!("domain_{}", d.domain_id);
        let dir = out_dir.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let [first, count] = d.identities.unwrap_or([0, spec.num_identities]);
        for id in first..first + count {
            let ident = spec.identity(id);
            for k in 0..spec.instances_per_domain {
                let tag = ((d.domain_id as u64) << 40) ^ ((id as u64) << 16) ^ k as u64;
                let seed = derive_seed(spec.seed, tag);
                let base = ident.render(
                    spec.height,
                    spec.width,
                    &IdentitySpec::jitter(seed),
                    derive_seed(seed, 1),
                );
                let img = apply_style(&base, d, seed)?;
                let file = format!("id_{id}_{k}.snrt");
                snrt::write_file(&dir.join(&file), &img)?;
                if spec.png {
                    write_png(&dir.join(format!("id_{id}_{k}.png")), &img)?;
                }
                let split = match (d.role, k) {
                    (DomainRole::Source, _) => Split::Train,
                    (DomainRole::Target, 0) => Split::Query,
                    (DomainRole::Target, _) => Split::Gallery,
                };
                samples.push(SampleRecord {
                    path: format!("{dir_name}/{file}"),
                    identity: id,
                    domain: d.domain_id,
                    split,
                    seed,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        samples,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Writes a `[3, h, w]` image in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let [c, h, w] = match img.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(Error::shape(format!("expected [3, h, w], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape("png export needs 3 channels"));
    }
    let m = h * w;
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|k| (d[k * m + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Groups sample positions by identity for P x K batches.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: BTreeMap<usize, Vec<usize>>,
}

impl PkSampler {
    /// `labels[i]` is the identity of sample `i`.
    pub fn new(labels: &[usize]) -> Self {
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_identity.entry(l).or_default().push(i);
        }
        Self { by_identity }
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    /// `p` distinct identities with `k` samples each, grouped by identity.
    /// Identities with fewer than `k` samples are drawn with replacement.
    pub fn sample(&self, p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if p < 2 || k < 2 {
            return Err(Error::InvalidArgument(format!(
                "P x K batches need P >= 2 and K >= 2, got {p} x {k}"
            )));
        }
        if self.by_identity.len() < p {
            return Err(Error::InvalidArgument(format!(
                "{} identities available, {p} requested",
                self.by_identity.len()
            )));
        }
        let ids: Vec<&Vec<usize>> = self.by_identity.values().collect();
        let mut out = Vec::with_capacity(p * k);
        for which in index::sample(rng, ids.len(), p).into_iter() {
            let pool = ids[which];
            if pool.len() >= k {
                out.extend(
                    index::sample(rng, pool.len(), k)
                        .into_iter()
                        .map(|j| pool[j]),
                );
            } else {
                out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`PkSampler::sample`].
pub fn pk_sample(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    PkSampler::new(labels).sample(p, k, rng)
}

/// Training split loaded into memory with identities remapped to `0..n_ids`.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub identities: Vec<usize>,
}

impl TrainSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let records = manifest.select(Split::Train, None);
        if records.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut identities: Vec<usize> = records.iter().map(|r| r.identity).collect();
        identities.sort_unstable();
        identities.dedup();
        let labels = records
            .iter()
            .map(|r| identities.binary_search(&r.identity).expect("collected"))
            .collect();
        Ok(Self {
            images: manifest.load_images(&records)?,
            labels,
            identities,
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &self.images[i]).collect();
        Ok((
            Tensor::stack(&imgs)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}
