//! The two diverse heads.
//!
//! * One-to-one: `P_o = F_1 × W_o`; AU `i`'s logit reads only AU `i`'s token.
//! * One-to-many: `P̂_m = F_2 × W_m`, so row `j` holds the votes of AU `j`'s
//!   token for every AU. `P_m[i]` sums the `k` largest votes in column `i`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct O2oHead {
    w_o: ParamId,
    d: usize,
}

impl O2oHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        let w_o = store.add_normal(format!("{name}.w_o"), &[d, 1], INIT_STD, rng);
        O2oHead { w_o, d }
    }

    pub fn weight(&self) -> ParamId {
        self.w_o
    }

    /// `[B, N, D] → [B, N]` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f1: Var) -> Result<Var> {
        let s = g.shape(f1).to_vec();
        let [b, n, d] = s[..] else {
            return Err(Error::dim(format!("o2o head expects [B,N,D], got {s:?}")));
        };
        if d != self.d {
            return Err(Error::dim(format!("o2o head expects D = {}, got {d}", self.d)));
        }
        let flat = g.reshape(f1, &[b * n, d])?;
        let w = g.param(store, self.w_o);
        let p = g.matmul(flat, w)?;
        g.reshape(p, &[b, n])
    }
}

#[derive(Clone, Debug)]
pub struct O2mHead {
    w_m: ParamId,
    k: usize,
    d: usize,
    n_au: usize,
}

impl O2mHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, n_au: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n_au {
            return Err(Error::config(format!("o2m k = {k} must satisfy 1 <= k <= {n_au}")));
        }
        let w_m = store.add_normal(format!("{name}.w_m"), &[d, n_au], INIT_STD, rng);
        Ok(O2mHead { w_m, k, d, n_au })
    }

    pub fn weight(&self) -> ParamId {
        self.w_m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `[B, N, D] → (P̂_m [B, N, N], P_m [B, N])`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f2: Var) -> Result<(Var, Var)> {
        let s = g.shape(f2).to_vec();
        let [b, n, d] = s[..] else {
            return Err(Error::dim(format!("o2m head expects [B,N,D], got {s:?}")));
        };
        if d != self.d || n != self.n_au {
            return Err(Error::dim(format!(
                "o2m head expects [B,{},{}], got {s:?}",
                self.n_au, self.d
            )));
        }
        let flat = g.reshape(f2, &[b * n, d])?;
        let w = g.param(store, self.w_m);
        let votes = g.matmul(flat, w)?;
        let votes = g.reshape(votes, &[b, n, n])?;
        let p_m = topk_aggregate(g, votes, self.k)?;
        Ok((votes, p_m))
    }
}

/// Column-wise top-`k` sum over `[B, N, N]` votes: `out[b, i]` is the sum
/// of the `k` largest entries of `votes[b, :, i]`.
pub fn topk_aggregate(g: &mut Graph, votes: Var, k: usize) -> Result<Var> {
    g.topk_sum(votes, k, 1)
}

/// Classifier of the no-transformer baseline: global average pool over
/// `F_c` followed by a fully connected layer.
#[derive(Clone, Debug)]
pub struct PooledHead {
    fc: Linear,
}

impl PooledHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_c: usize, n_au: usize) -> Self {
        PooledHead {
            fc: Linear::new(store, rng, &format!("{name}.fc"), d_c, n_au, INIT_STD, true),
        }
    }

    /// `[B, D_c, H, W] → [B, N]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_c: Var) -> Result<Var> {
        let s = g.shape(f_c).to_vec();
        let flat = g.reshape(f_c, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        self.fc.apply(g, store, pooled)
    }
}
