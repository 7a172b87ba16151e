//! Synthetic multi-label samples with correlated labels and blob images.
//!
//! Every sample is a pure function of `(seed, index)`: a ChaCha8 stream
//! seeded from the spec seed is switched to stream `index` before drawing.
//! Each AU owns a fixed pair of blob positions mirrored about the vertical
//! axis, so a horizontal flip leaves the labels unchanged.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "FANTSYN\0"
//! version    u32      1
//! n_au       u32
//! n_samples  u64      samples the spec generates
//! seed       u64
//! image_size u32
//! noise_rate f64
//! n_groups   u32
//!   per group: len u32, then len × u32 AU indices
//! base_rates n_groups × f64
//! count      u64      samples stored in this file
//!   per sample: index u64, n_au bytes of 0/1 labels, 3·S·S f64 pixels
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
const MAGIC: &[u8; 8] = b"FANTSYN\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_au: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub groups: Vec<Vec<usize>>,
    pub base_rates: Vec<f64>,
    pub noise_rate: f64,
    pub image_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_au: 8,
            n_samples: 256,
            seed: 0,
            groups: vec![vec![0, 1], vec![2, 3, 4], vec![5], vec![6, 7]],
            base_rates: vec![0.4, 0.35, 0.3, 0.45],
            noise_rate: 0.05,
            image_size: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_au == 0 {
            return Err(Error::config("data.n_au must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("data.n_samples must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::config("data.image_size must be at least 8"));
        }
        let mut seen = vec![false; self.n_au];
        for group in &self.groups {
            if group.is_empty() {
                return Err(Error::config("data.groups contains an empty group"));
            }
            for &au in group {
                if au >= self.n_au || seen[au] {
                    return Err(Error::config(format!(
                        "data.groups must partition 0..{}; AU {au} is out of range or repeated",
                        self.n_au
                    )));
                }
                seen[au] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!("data.groups does not cover AU {missing}")));
        }
        if self.base_rates.len() != self.groups.len() {
            return Err(Error::config(format!(
                "data.base_rates has {} entries for {} groups",
                self.base_rates.len(),
                self.groups.len()
            )));
        }
        if self.base_rates.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::config("data.base_rates must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config("data.noise_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Blob centre `(row, col)` of AU `au` on the left half of the face; the
    /// right-half twin sits at `S - 1 - col`.
    pub fn blob_center(&self, au: usize) -> (f64, f64) {
        let s = self.image_size as f64;
        let row = s * (au as f64 + 0.5) / self.n_au as f64;
        let col = if au.is_multiple_of(2) { 0.2 * s } else { 0.35 * s };
        (row, col)
    }

    fn blob_sigma(&self) -> f64 {
        (self.image_size as f64 / (3.0 * self.n_au as f64)).max(0.8)
    }
}

/// Per-channel tint of AU `au`'s blob.
fn tint(au: usize) -> [f64; CHANNELS] {
    let mut t = [0.35; CHANNELS];
    t[au % CHANNELS] = 1.0;
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub index: usize,
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<bool>,
}

impl SynthSample {
    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.labels.len()], |i| if self.labels[i] { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<SynthSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<bool>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    /// First `n` samples, keeping the spec.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        encode_dataset(self, &mut buf);
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        decode_dataset(&buf)
    }
}

/// Draws sample `index`; a pure function of `(spec, index)`.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(rng::derive_seed(spec.seed, "synth"));
    rng.set_stream(index as u64);

    let mut labels = vec![false; spec.n_au];
    for (group, &rate) in spec.groups.iter().zip(&spec.base_rates) {
        let on = rng.random::<f64>() < rate;
        for &au in group {
            labels[au] = on;
        }
    }
    for label in labels.iter_mut() {
        if rng.random::<f64>() < spec.noise_rate {
            *label = !*label;
        }
    }

    let s = spec.image_size;
    let mut image = Tensor::from_fn(&[CHANNELS, s, s], |_| 0.08 * rng.random::<f64>());
    let sigma = spec.blob_sigma();
    let two_var = 2.0 * sigma * sigma;
    let reach = (3.0 * sigma).ceil() as isize;
    for au in (0..spec.n_au).filter(|&au| labels[au]) {
        let (r0, c0) = spec.blob_center(au);
        let dr = rng.random_range(-1.0..1.0);
        let dc = rng.random_range(-1.0..1.0);
        let amp = rng.random_range(0.6..1.0);
        let r = r0 + dr;
        let tint = tint(au);
        for c in [c0 + dc, (s - 1) as f64 - (c0 + dc)] {
            let (ri, ci) = (r.round() as isize, c.round() as isize);
            for y in (ri - reach).max(0)..=(ri + reach).min(s as isize - 1) {
                for x in (ci - reach).max(0)..=(ci + reach).min(s as isize - 1) {
                    let d2 = (y as f64 - r).powi(2) + (x as f64 - c).powi(2);
                    let v = amp * (-d2 / two_var).exp();
                    for (ch, &t) in tint.iter().enumerate() {
                        let off = (ch * s + y as usize) * s + x as usize;
                        image.data_mut()[off] += t * v;
                    }
                }
            }
        }
    }
    let image = image.map(|v| v.clamp(0.0, 1.0));
    SynthSample { index, image, labels }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples: (0..spec.n_samples).map(|i| generate_sample(spec, i)).collect(),
    })
}

/// Seeded shuffle into `(train, eval)` with `round(frac · n)` training samples.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::config(format!("train fraction {train_frac} must lie in (0, 1)")));
    }
    let n = data.len();
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::config(format!(
            "train fraction {train_frac} of {n} samples leaves an empty split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let pick = |idx: &[usize]| Dataset {
        spec: data.spec.clone(),
        samples: idx.iter().map(|&i| data.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

fn encode_dataset(data: &Dataset, out: &mut Vec<u8>) {
    let spec = &data.spec;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.n_au as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_samples as u64).to_le_bytes());
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out.extend_from_slice(&(spec.image_size as u32).to_le_bytes());
    out.extend_from_slice(&spec.noise_rate.to_le_bytes());
    out.extend_from_slice(&(spec.groups.len() as u32).to_le_bytes());
    for group in &spec.groups {
        out.extend_from_slice(&(group.len() as u32).to_le_bytes());
        for &au in group {
            out.extend_from_slice(&(au as u32).to_le_bytes());
        }
    }
    for &r in &spec.base_rates {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&(data.samples.len() as u64).to_le_bytes());
    for s in &data.samples {
        out.extend_from_slice(&(s.index as u64).to_le_bytes());
        out.extend(s.labels.iter().map(|&l| l as u8));
        for &v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Little-endian cursor over a byte buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    if r.bytes(8)? != MAGIC {
        return Err(Error::format("not a synthetic dataset file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let n_au = r.u32()? as usize;
    let n_samples = r.u64()? as usize;
    let seed = r.u64()?;
    let image_size = r.u32()? as usize;
    let noise_rate = r.f64()?;
    let n_groups = r.u32()? as usize;
    let mut groups = Vec::new();
    for _ in 0..n_groups {
        let len = r.u32()? as usize;
        groups.push((0..len).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
    }
    let base_rates = (0..n_groups).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        n_au,
        n_samples,
        seed,
        groups,
        base_rates,
        noise_rate,
        image_size,
    };
    spec.validate().map_err(|e| Error::format(format!("invalid spec in dataset header: {e}")))?;
    let count = r.u64()? as usize;
    let pixels = CHANNELS * image_size * image_size;
    let mut samples = Vec::new();
    for _ in 0..count {
        let index = r.u64()? as usize;
        let labels = r.bytes(n_au)?.iter().map(|&b| b != 0).collect();
        let data = (0..pixels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let image = Tensor::new(&[CHANNELS, image_size, image_size], data)?;
        samples.push(SynthSample { index, image, labels });
    }
    if !r.finished() {
        return Err(Error::format("trailing bytes after last sample"));
    }
    Ok(Dataset { spec, samples })
}
