//! Synthetic multi-domain image data with a planted invariant feature and a
//! spurious one, plus leave-one-domain-out splitting and balanced batching.
//!
//! Channel 0 carries a class-specific shape template that is identical in
//! every domain. Channels 1 and 2 carry a flat colour code that agrees with
//! the label with probability `(1 + rho_d) / 2`, where `rho_d` is the domain's
//! spurious correlation. Flipping the sign of `rho` on the held-out domain is
//! the domain-shift knob.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 4] = b"DGPD";
const DATASET_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Image channels produced by the generator: shape, colour A, colour B.
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the shape template in channel 0.
    pub contrast: f64,
    /// Amplitude of the colour code in channels 1-2.
    pub color_strength: f64,
    /// Per-domain label/colour correlation in [-1, 1].
    pub correlations: Vec<f64>,
    pub noise_sigma: f64,
    pub samples_per_domain: usize,
    pub seed: u64,
    /// Optional display names; defaults to `D0`, `D1`, ...
    pub domain_names: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_classes: 4,
            height: 16,
            width: 16,
            contrast: 1.0,
            color_strength: 1.0,
            correlations: vec![0.8, 0.9, 0.95, -0.9],
            noise_sigma: 0.5,
            samples_per_domain: 300,
            seed: 0,
            domain_names: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_domains < 3 {
            return bad(format!("need at least 3 domains, got {}", self.n_domains));
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad("images must be at least 4x4".into());
        }
        if self.correlations.len() != self.n_domains {
            return bad(format!(
                "{} correlations for {} domains",
                self.correlations.len(),
                self.n_domains
            ));
        }
        if let Some(r) = self.correlations.iter().find(|r| !(-1.0..=1.0).contains(*r)) {
            return bad(format!("correlation {r} outside [-1, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if !self.contrast.is_finite() || !self.color_strength.is_finite() {
            return bad("amplitudes must be finite".into());
        }
        if self.samples_per_domain < 10 {
            return bad("need at least 10 samples per domain".into());
        }
        if !self.domain_names.is_empty() && self.domain_names.len() != self.n_domains {
            return bad("domain_names must be empty or one per domain".into());
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        if self.domain_names.is_empty() {
            (0..self.n_domains).map(|d| format!("D{d}")).collect()
        } else {
            self.domain_names.clone()
        }
    }
}

/// Images, labels and domain ids for every sample, grouped by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain_names: Vec<String>,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[n, C, H, W]`, row-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    /// Generator settings when the data is synthetic.
    pub spec: Option<SyntheticSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn domain_indices(&self, d: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domain_ids[i] == d).collect()
    }

    /// Stacks the given samples into a `[n, C, H, W]` tensor.
    pub fn gather<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let mut values = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            values.extend(self.image(i).iter().map(|&v| S::of(v)));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], values).expect("gather shape")
    }

    fn check(&self) -> Result<()> {
        let n = self.labels.len();
        if self.domain_ids.len() != n || self.images.len() != n * self.image_len() {
            return Err(Error::Corrupt("inconsistent sample counts".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: self.n_classes,
            });
        }
        if self.domain_ids.iter().any(|&d| d >= self.domain_names.len()) {
            return Err(Error::Corrupt("domain id out of range".into()));
        }
        Ok(())
    }

    /// Writes the `DGPD` container and its JSON manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u64(self.len() as u64);
        w.u32(self.channels as u32);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(self.n_classes as u32);
        w.u32(self.n_domains() as u32);
        w.u8(DTYPE_F64);
        w.f64s(self.images.iter().copied());
        for &l in &self.labels {
            w.u32(l as u32);
        }
        for &d in &self.domain_ids {
            w.u32(d as u32);
        }
        std::fs::write(path, w.into_inner())?;
        let manifest = Manifest {
            format: "DGPD".into(),
            version: DATASET_VERSION,
            domain_names: self.domain_names.clone(),
            spec: self.spec.clone(),
        };
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut ds = Self::from_container(&bytes)?;
        let mpath = manifest_path(path);
        if mpath.exists() {
            let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
            if manifest.domain_names.len() != ds.n_domains() {
                return Err(Error::Schema {
                    field: "domain_names".into(),
                    detail: format!("manifest lists {} domains, container {}", manifest.domain_names.len(), ds.n_domains()),
                });
            }
            ds.domain_names = manifest.domain_names;
            ds.spec = manifest.spec;
        }
        Ok(ds)
    }

    fn from_container(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let n = r.u64()? as usize;
        let channels = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let n_domains = r.u32()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Corrupt(format!("unsupported dtype tag {dtype}")));
        }
        let image_len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(n))
            .ok_or_else(|| Error::Corrupt("image size overflow".into()))?;
        let images = r.f64s(image_len)?;
        let labels = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let domain_ids = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let ds = Self {
            domain_names: (0..n_domains).map(|d| format!("D{d}")).collect(),
            n_classes,
            channels,
            height,
            width,
            images,
            labels,
            domain_ids,
            spec: None,
        };
        ds.check()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    domain_names: Vec<String>,
    spec: Option<SyntheticSpec>,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Derives an independent RNG stream from a seed and a list of stream tags.
pub(crate) fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    ChaCha8Rng::seed_from_u64(splitmix64(state))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Binary `{0, 1}` shape template for a class, `[H * W]` row-major.
pub fn shape_template(class: usize, height: usize, width: usize) -> Vec<f64> {
    let mut t = vec![0.0; height * width];
    let (h, w) = (height as isize, width as isize);
    let (cy, cx) = (h / 2, w / 2);
    let thick = (h.min(w) / 8).max(1);
    for y in 0..h {
        for x in 0..w {
            let on = match class {
                // horizontal bar
                0 => (y - cy).abs() < thick && x >= w / 8 && x < w - w / 8,
                // vertical bar
                1 => (x - cx).abs() < thick && y >= h / 8 && y < h - h / 8,
                // main diagonal
                2 => (x - y).abs() < thick && x >= w / 8 && x < w - w / 8,
                // hollow square
                3 => {
                    let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                    let r = h.min(w) / 3;
                    dy.max(dx) <= r && dy.max(dx) > r - thick
                }
                _ => false,
            };
            if on {
                t[(y * w + x) as usize] = 1.0;
            }
        }
    }
    if class >= 4 {
        // Fixed pseudo-random blob pattern, independent of any dataset seed.
        let mut rng = ChaCha8Rng::seed_from_u64(0xC1A5_5000 + class as u64);
        for v in t.iter_mut() {
            *v = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
        }
    }
    t
}

/// Colour code of a class in channels 1 and 2: points evenly spaced on a circle.
pub fn color_code(class: usize, n_classes: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / n_classes as f64;
    (angle.cos(), angle.sin())
}

/// Generates the full multi-domain dataset. Each domain draws from its own
/// RNG stream, so domains can be generated independently.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let templates: Vec<Vec<f64>> = (0..spec.n_classes).map(|k| shape_template(k, h, w)).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n_total = spec.n_domains * spec.samples_per_domain;
    let mut images = Vec::with_capacity(n_total * CHANNELS * plane);
    let mut labels = Vec::with_capacity(n_total);
    let mut domain_ids = Vec::with_capacity(n_total);
    for (d, &rho) in spec.correlations.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, &[d as u64]);
        let agree = (1.0 + rho) / 2.0;
        for _ in 0..spec.samples_per_domain {
            let label = rng.random_range(0..spec.n_classes);
            let color = if rng.random_bool(agree.clamp(0.0, 1.0)) {
                label
            } else {
                let other = rng.random_range(0..spec.n_classes - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            };
            let (ca, cb) = color_code(color, spec.n_classes);
            for &t in &templates[label] {
                images.push(spec.contrast * t + noise.sample(&mut rng));
            }
            for _ in 0..plane {
                images.push(spec.color_strength * ca + noise.sample(&mut rng));
            }
            for _ in 0..plane {
                images.push(spec.color_strength * cb + noise.sample(&mut rng));
            }
            labels.push(label);
            domain_ids.push(d);
        }
    }
    Ok(Dataset {
        domain_names: spec.names(),
        n_classes: spec.n_classes,
        channels: CHANNELS,
        height: h,
        width: w,
        images,
        labels,
        domain_ids,
        spec: Some(spec.clone()),
    })
}

/// Leave-one-domain-out partition with a 9:1 train/validation split per source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub held_out_domain: usize,
    /// Source domain ids in ascending order.
    pub source_domains: Vec<usize>,
    /// Training indices per source domain, aligned with `source_domains`.
    pub train: Vec<Vec<usize>>,
    /// Validation indices per source domain, aligned with `source_domains`.
    pub validation: Vec<Vec<usize>>,
    /// Every sample of the held-out domain.
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn validation_indices(&self) -> Vec<usize> {
        self.validation.iter().flatten().copied().collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.train.iter().flatten().copied().collect()
    }
}

pub fn split(dataset: &Dataset, held_out_domain: usize, seed: u64) -> Result<SplitPlan> {
    if held_out_domain >= dataset.n_domains() {
        return Err(Error::Config(format!(
            "held-out domain {held_out_domain} does not exist ({} domains)",
            dataset.n_domains()
        )));
    }
    let mut plan = SplitPlan {
        held_out_domain,
        source_domains: Vec::new(),
        train: Vec::new(),
        validation: Vec::new(),
        test: dataset.domain_indices(held_out_domain),
    };
    for d in (0..dataset.n_domains()).filter(|&d| d != held_out_domain) {
        let mut idx = dataset.domain_indices(d);
        if idx.len() < 10 {
            return Err(Error::Config(format!("domain {d} has only {} samples", idx.len())));
        }
        idx.shuffle(&mut stream_rng(seed, &[0x5B17, d as u64]));
        let n_train = (idx.len() * 9 + 5) / 10;
        let validation = idx.split_off(n_train);
        plan.source_domains.push(d);
        plan.train.push(idx);
        plan.validation.push(validation);
    }
    Ok(plan)
}

/// A mini-batch with rows grouped by source domain, equal count per domain.
#[derive(Clone, Debug)]
pub struct DomainBatch<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

impl<S: Scalar> DomainBatch<S> {
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Self {
        Self {
            images: dataset.gather(indices),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            domain_ids: indices.iter().map(|&i| dataset.domain_ids[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices per domain, in order of first appearance; errors unless balanced.
    pub fn domain_rows(&self) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (row, &d) in self.domain_ids.iter().enumerate() {
            match groups.iter_mut().find(|(id, _)| *id == d) {
                Some((_, rows)) => rows.push(row),
                None => groups.push((d, vec![row])),
            }
        }
        let Some(first) = groups.first().map(|(_, r)| r.len()) else {
            return Err(Error::UnbalancedBatch("empty batch".into()));
        };
        if let Some((d, rows)) = groups.iter().find(|(_, r)| r.len() != first) {
            return Err(Error::UnbalancedBatch(format!(
                "domain {d} has {} rows, expected {first}",
                rows.len()
            )));
        }
        Ok(groups)
    }
}

/// Seeded, domain-balanced mini-batch sampler over a split's training data.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    plan: &'a SplitPlan,
    per_domain: usize,
    seed: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, plan: &'a SplitPlan, batch_size: usize, seed: u64) -> Result<Self> {
        let n = plan.source_domains.len();
        if n == 0 || batch_size == 0 || !batch_size.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "batch size {batch_size} is not divisible by {n} source domains"
            )));
        }
        let per_domain = batch_size / n;
        if plan.train.iter().any(|t| t.len() < per_domain) {
            return Err(Error::Config(format!(
                "a source domain has fewer than {per_domain} training samples"
            )));
        }
        Ok(Self {
            dataset,
            plan,
            per_domain,
            seed,
        })
    }

    pub fn per_domain(&self) -> usize {
        self.per_domain
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.plan.train.iter().map(|t| t.len() / self.per_domain).min().unwrap_or(0)
    }

    /// Index lists of every batch in an epoch; ragged tails are dropped.
    pub fn epoch_indices(&self, epoch: u64) -> Vec<Vec<usize>> {
        let shuffled: Vec<Vec<usize>> = self
            .plan
            .train
            .iter()
            .zip(&self.plan.source_domains)
            .map(|(idx, &d)| {
                let mut idx = idx.clone();
                idx.shuffle(&mut stream_rng(self.seed, &[0xBA7C, epoch, d as u64]));
                idx
            })
            .collect();
        (0..self.batches_per_epoch())
            .map(|b| {
                shuffled
                    .iter()
                    .flat_map(|idx| idx[b * self.per_domain..(b + 1) * self.per_domain].iter().copied())
                    .collect()
            })
            .collect()
    }

    pub fn epoch<S: Scalar>(&self, epoch: u64) -> impl Iterator<Item = DomainBatch<S>> + '_ {
        self.epoch_indices(epoch)
            .into_iter()
            .map(move |idx| DomainBatch::from_indices(self.dataset, &idx))
    }
}
