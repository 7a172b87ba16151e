//! Convolution module (`F_a → F_c`) and the linear per-AU feature
//! assignment `F_au = F_c × W_au`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::params::{ParamId, ParamStore};

/// Spatial extent of `F_c`.
pub const H_C: usize = 4;

/// Number of conv + pool stages needed to bring `h_a` down to [`H_C`].
pub fn stage_count(h_a: usize) -> Result<usize> {
    if h_a < 2 * H_C || !h_a.is_power_of_two() {
        return Err(Error::config(format!(
            "conv head needs a power-of-two input extent >= {}, got {h_a}",
            2 * H_C
        )));
    }
    Ok((h_a / H_C).trailing_zeros() as usize)
}

/// Channel width after each stage, interpolated linearly from
/// `⌊D_a/4⌋` up to `D_c`.
pub fn stage_widths(d_a: usize, d_c: usize, stages: usize) -> Vec<usize> {
    let start = (d_a / 4).max(1);
    (1..=stages)
        .map(|s| {
            let num = start as isize * (stages - s) as isize + d_c as isize * s as isize;
            (num as f64 / stages as f64).round() as usize
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ConvHead {
    reduce: ConvLayer,
    stages: Vec<ConvLayer>,
    au_proj: ParamId,
    d_c: usize,
    n_au: usize,
}

impl ConvHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_a: usize, h_a: usize, d_c: usize, n_au: usize) -> Result<Self> {
        let n_stages = stage_count(h_a)?;
        let reduced = (d_a / 4).max(1);
        let reduce = ConvLayer::new(store, rng, "conv.reduce", reduced, d_a, 1);
        let mut stages = Vec::with_capacity(n_stages);
        let mut c_in = reduced;
        for (i, width) in stage_widths(d_a, d_c, n_stages).into_iter().enumerate() {
            stages.push(ConvLayer::new(store, rng, &format!("conv.stage{i}"), width, c_in, 3));
            c_in = width;
        }
        let hw = H_C * H_C;
        let au_proj = store.add_normal("conv.au_proj", &[hw, n_au], (1.0 / hw as f64).sqrt(), rng);
        Ok(ConvHead {
            reduce,
            stages,
            au_proj,
            d_c,
            n_au,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn au_proj_id(&self) -> ParamId {
        self.au_proj
    }

    /// `[B, D_a, H_a, W_a] → [B, D_c, 4, 4]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_a: Var) -> Result<Var> {
        let mut x = self.reduce.apply(g, store, f_a, 0)?;
        for stage in &self.stages {
            x = stage.apply(g, store, x, 1)?;
            x = g.gelu(x)?;
            x = g.max_pool2d(x, 2, 2)?;
        }
        Ok(x)
    }

    /// `[B, D_c, H_c, W_c] → [B, N_au, D_c]`: flatten spatially, multiply by
    /// `W_au`, and transpose so each row is one AU's feature vector.
    pub fn au_project(&self, g: &mut Graph, store: &ParamStore, f_c: Var) -> Result<Var> {
        let shape = g.shape(f_c).to_vec();
        let [b, d, h, w] = shape[..] else {
            return Err(Error::dim(format!("au_project expects [B,D_c,H_c,W_c], got {shape:?}")));
        };
        if d != self.d_c || h * w != H_C * H_C {
            return Err(Error::dim(format!(
                "au_project expects [B,{},{H_C},{H_C}], got {shape:?}",
                self.d_c
            )));
        }
        let flat = g.reshape(f_c, &[b * d, h * w])?;
        let wau = g.param(store, self.au_proj);
        let prod = g.matmul(flat, wau)?;
        let prod = g.reshape(prod, &[b, d, self.n_au])?;
        g.transpose(prod)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_arithmetic() {
        assert_eq!(stage_count(16).unwrap(), 2);
        assert_eq!(stage_count(64).unwrap(), 4);
        assert_eq!(stage_count(8).unwrap(), 1);
        assert!(stage_count(4).is_err());
        assert!(stage_count(24).is_err());
    }

    #[test]
    fn widths_end_at_d_c() {
        assert_eq!(stage_widths(32, 64, 2), vec![36, 64]);
        assert_eq!(stage_widths(32, 64, 1), vec![64]);
        let w = stage_widths(256, 64, 4);
        assert_eq!(*w.last().unwrap(), 64);
        assert_eq!(w[0], 64);
    }
}
