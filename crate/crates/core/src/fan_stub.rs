//! Frozen feature stem standing in for a pretrained face-alignment network,
//! and the landmark-attention fusion that turns its outputs into `F_a`.
//!
//! The stem emits the same four tensors the alignment network would: low
//! level features `LF`, two penultimate hourglass maps `H1`/`H2` and per
//! landmark heatmaps `HM`. Fusion aggregates `HM` to one plane, gates
//! `H1`/`H2` with it, and concatenates `[LF, HM⊙H1, HM⊙H2]` on the channel
//! axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const TRUNK_WIDTH: usize = 16;
const TRUNK_CONVS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct StemConfig {
    pub seed: u64,
    pub d_lf: usize,
    pub d_h: usize,
    pub n_lmk: usize,
    pub h_a: usize,
    pub w_a: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            seed: 0,
            d_lf: 16,
            d_h: 8,
            n_lmk: 8,
            h_a: 16,
            w_a: 16,
        }
    }
}

impl StemConfig {
    /// Channel count of the fused tensor: `D_lf + 2·D_h`.
    pub fn d_a(&self) -> usize {
        self.d_lf + 2 * self.d_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_a != self.w_a {
            return Err(Error::config(format!(
                "stem output must be square, got {}x{}",
                self.h_a, self.w_a
            )));
        }
        if self.h_a < 8 || !self.h_a.is_power_of_two() {
            return Err(Error::config(format!(
                "stem.h_a must be a power of two >= 8, got {}",
                self.h_a
            )));
        }
        if self.d_lf == 0 || self.d_h == 0 || self.n_lmk == 0 {
            return Err(Error::config("stem channel counts must be positive"));
        }
        Ok(())
    }
}

/// Stem outputs for one sample (`[C, H, W]`) or a batch (`[B, C, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FanBundle {
    pub lf: Tensor,
    pub h1: Tensor,
    pub h2: Tensor,
    pub hm: Tensor,
}

/// Bundle tensors living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub lf: Var,
    pub h1: Var,
    pub h2: Var,
    pub hm: Var,
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

/// Fixed random convolutional stem. Weights are drawn once from the seeded
/// generator and stored as frozen parameters.
pub struct FixedStem {
    cfg: StemConfig,
    image_size: usize,
    store: ParamStore,
    trunk: Vec<ConvIds>,
    downsample: usize,
    lf: ConvIds,
    h1: ConvIds,
    h2: ConvIds,
    hm: ConvIds,
}

fn he_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvIds {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let w = store.add_normal(format!("{name}.weight"), &[c_out, c_in, k, k], std, rng);
    let b = store.add_normal(format!("{name}.bias"), &[c_out], 0.1, rng);
    store.get_mut(w).frozen = true;
    store.get_mut(b).frozen = true;
    ConvIds { w, b }
}

impl FixedStem {
    /// Builds the stem for `image_size`×`image_size` RGB inputs.
    pub fn new(cfg: &StemConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        if !image_size.is_multiple_of(cfg.h_a) || !(image_size / cfg.h_a).is_power_of_two() {
            return Err(Error::config(format!(
                "image size {image_size} cannot be reduced to {} by halving",
                cfg.h_a
            )));
        }
        let downsample = (image_size / cfg.h_a).trailing_zeros() as usize;
        if downsample > TRUNK_CONVS {
            return Err(Error::config(format!(
                "image size {image_size} needs {downsample} halvings to reach {}, stem has {TRUNK_CONVS}",
                cfg.h_a
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut trunk = Vec::new();
        let mut c_in = 3;
        for i in 0..TRUNK_CONVS {
            trunk.push(he_conv(&mut store, &mut rng, &format!("stem.trunk{i}"), TRUNK_WIDTH, c_in, 3));
            c_in = TRUNK_WIDTH;
        }
        let lf = he_conv(&mut store, &mut rng, "stem.lf", cfg.d_lf, TRUNK_WIDTH, 1);
        let h1 = he_conv(&mut store, &mut rng, "stem.h1", cfg.d_h, TRUNK_WIDTH, 1);
        let h2 = he_conv(&mut store, &mut rng, "stem.h2", cfg.d_h, TRUNK_WIDTH, 1);
        let hm = he_conv(&mut store, &mut rng, "stem.hm", cfg.n_lmk, TRUNK_WIDTH, 1);
        Ok(FixedStem {
            cfg: cfg.clone(),
            image_size,
            store,
            trunk,
            downsample,
            lf,
            h1,
            h2,
            hm,
        })
    }

    pub fn config(&self) -> &StemConfig {
        &self.cfg
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// The frozen weights.
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Runs the stem on a graph. `image` is `[3, S, S]` or `[B, 3, S, S]`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<BundleVars> {
        let shape = g.shape(image);
        let ok = match *shape {
            [3, h, w] | [_, 3, h, w] => h == self.image_size && w == self.image_size,
            _ => false,
        };
        if !ok {
            return Err(Error::dim(format!(
                "stem expects [3,{s},{s}] images, got {shape:?}",
                s = self.image_size
            )));
        }
        let mut x = image;
        for (i, conv) in self.trunk.iter().enumerate() {
            let w = g.param(&self.store, conv.w);
            let b = g.param(&self.store, conv.b);
            x = g.conv2d(x, w, Some(b), 1, 1)?;
            x = g.gelu(x)?;
            if i < self.downsample {
                x = g.max_pool2d(x, 2, 2)?;
            }
        }
        let head = |g: &mut Graph, ids: &ConvIds| -> Result<Var> {
            let w = g.param(&self.store, ids.w);
            let b = g.param(&self.store, ids.b);
            g.conv2d(x, w, Some(b), 1, 0)
        };
        let lf = head(g, &self.lf)?;
        let h1 = head(g, &self.h1)?;
        let h2 = head(g, &self.h2)?;
        let hm_logits = head(g, &self.hm)?;
        let hm = g.sigmoid(hm_logits)?;
        Ok(BundleVars { lf, h1, h2, hm })
    }

    /// Value-level stem evaluation.
    pub fn run(&self, image: &Tensor) -> Result<FanBundle> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let b = self.forward(&mut g, x)?;
        Ok(FanBundle {
            lf: g.value(b.lf).clone(),
            h1: g.value(b.h1).clone(),
            h2: g.value(b.h2).clone(),
            hm: g.value(b.hm).clone(),
        })
    }

    /// Stem followed by fusion: the `F_a` tensor for `image`.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let b = self.forward(&mut g, x)?;
        let fa = fuse_features_on(&mut g, b)?;
        Ok(g.value(fa).clone())
    }
}

fn channel_axis(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        _ => Err(Error::dim(format!("expected [C,H,W] or [B,C,H,W], got {shape:?}"))),
    }
}

/// Per-pixel sum over landmark channels, clamped to `[0, 1]`; the channel
/// axis is kept with extent 1.
pub fn aggregate_heatmaps_on(g: &mut Graph, hm: Var) -> Result<Var> {
    let axis = channel_axis(g.shape(hm))?;
    let mut shape = g.shape(hm).to_vec();
    shape[axis] = 1;
    let s = g.sum_axis(hm, axis)?;
    let c = g.clamp(s, 0.0, 1.0)?;
    g.reshape(c, &shape)
}

/// `concat(LF, HM_agg ⊙ H1, HM_agg ⊙ H2)` along the channel axis.
pub fn fuse_features_on(g: &mut Graph, b: BundleVars) -> Result<Var> {
    let axis = channel_axis(g.shape(b.lf))?;
    let spatial = |g: &Graph, v: Var| g.shape(v)[axis + 1..].to_vec();
    let lead = |g: &Graph, v: Var| g.shape(v)[..axis].to_vec();
    for v in [b.h1, b.h2, b.hm] {
        if g.shape(v).len() != g.shape(b.lf).len()
            || spatial(g, v) != spatial(g, b.lf)
            || lead(g, v) != lead(g, b.lf)
        {
            return Err(Error::dim(format!(
                "bundle spatial mismatch: {:?} vs {:?}",
                g.shape(v),
                g.shape(b.lf)
            )));
        }
    }
    if g.shape(b.h1) != g.shape(b.h2) {
        return Err(Error::dim("H1 and H2 must have the same shape"));
    }
    let agg = aggregate_heatmaps_on(g, b.hm)?;
    let g1 = g.mul(agg, b.h1)?;
    let g2 = g.mul(agg, b.h2)?;
    g.concat(&[b.lf, g1, g2], axis)
}

pub fn aggregate_heatmaps(hm: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(hm.clone());
    let out = aggregate_heatmaps_on(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn fuse_features(bundle: &FanBundle) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = BundleVars {
        lf: g.constant(bundle.lf.clone()),
        h1: g.constant(bundle.h1.clone()),
        h2: g.constant(bundle.h2.clone()),
        hm: g.constant(bundle.hm.clone()),
    };
    let out = fuse_features_on(&mut g, vars)?;
    Ok(g.value(out).clone())
}

/// Mirror an image (or any `[.., H, W]` tensor) left to right.
pub fn hflip(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let w = shape[shape.len() - 1];
    let rows = t.numel() / w;
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..rows {
        out.extend(t.data()[r * w..(r + 1) * w].iter().rev());
    }
    Tensor::new(shape, out).expect("same shape")
}
