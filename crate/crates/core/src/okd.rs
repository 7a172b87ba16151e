//! Online knowledge distillation: ensemble weights, ensemble target,
//! distillation and classification losses.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Probabilities entering a logarithm are clamped to `[EPS, 1 - EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Produces per-AU branch weights from `F_c`.
///
/// Two splits see different receptive fields: a plain global average pool,
/// and a 3×3 conv + GELU followed by the same pool. Their concatenation is
/// mapped to `2·N` logits, softmaxed over the branch axis.
#[derive(Clone, Debug)]
pub struct EnsembleGen {
    conv: ConvLayer,
    fc: Linear,
    n_au: usize,
}

impl EnsembleGen {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_c: usize, n_au: usize) -> Self {
        let d_e = (d_c / 2).max(1);
        let conv = ConvLayer::new(store, rng, "ens.conv", d_e, d_c, 3);
        let fc = Linear::new(store, rng, "ens.fc", d_c + d_e, 2 * n_au, 0.02, true);
        EnsembleGen { conv, fc, n_au }
    }

    /// `F_c [B, D_c, H, W] → (W_1 [B, N], W_2 [B, N])`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_c: Var) -> Result<(Var, Var)> {
        let s = g.shape(f_c).to_vec();
        let [b, d, h, w] = s[..] else {
            return Err(Error::dim(format!("ensemble generator expects [B,D,H,W], got {s:?}")));
        };
        let flat = g.reshape(f_c, &[b, d, h * w])?;
        let split1 = g.mean_axis(flat, 2)?;
        let c = self.conv.apply(g, store, f_c, 1)?;
        let c = g.gelu(c)?;
        let d_e = g.shape(c)[1];
        let c = g.reshape(c, &[b, d_e, h * w])?;
        let split2 = g.mean_axis(c, 2)?;
        let desc = g.concat(&[split1, split2], 1)?;
        let logits = self.fc.apply(g, store, desc)?;
        ensemble_softmax(g, logits, self.n_au)
    }
}

/// `[B, 2·N]` logits → branch weights, softmaxed over the branch axis.
pub fn ensemble_softmax(g: &mut Graph, logits: Var, n_au: usize) -> Result<(Var, Var)> {
    let b = g.shape(logits)[0];
    let l = g.reshape(logits, &[b, 2, n_au])?;
    let we = g.softmax(l, 1)?;
    let w1 = g.narrow(we, 1, 0, 1)?;
    let w1 = g.reshape(w1, &[b, n_au])?;
    let w2 = g.narrow(we, 1, 1, 1)?;
    let w2 = g.reshape(w2, &[b, n_au])?;
    Ok((w1, w2))
}

/// `P_t = W_1 ⊙ P_o + W_2 ⊙ P_m`.
pub fn ensemble_target(g: &mut Graph, p_o: Var, p_m: Var, w1: Var, w2: Var) -> Result<Var> {
    let a = g.mul(w1, p_o)?;
    let b = g.mul(w2, p_m)?;
    g.add(a, b)
}

fn clamped_sigmoid(g: &mut Graph, logits: Var) -> Result<Var> {
    let s = g.sigmoid(logits)?;
    g.clamp(s, PROB_EPS, 1.0 - PROB_EPS)
}

fn one_minus(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.scale(x, -1.0)?;
    g.add_scalar(n, 1.0)
}

/// Mean over all entries of the Bernoulli divergence
/// `KL(σ(P_t) ‖ σ(P_s))`. The teacher logits are detached.
pub fn kd_loss(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::dim(format!(
            "kd_loss shapes differ: {:?} vs {:?}",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let t_logits = g.detach(teacher);
    let t = clamped_sigmoid(g, t_logits)?;
    let t1 = one_minus(g, t)?;
    let log_t = g.log(t)?;
    let log_t1 = g.log(t1)?;

    let s = clamped_sigmoid(g, student)?;
    let s1 = one_minus(g, s)?;
    let log_s = g.log(s)?;
    let log_s1 = g.log(s1)?;

    let d_pos = g.sub(log_t, log_s)?;
    let d_neg = g.sub(log_t1, log_s1)?;
    let pos = g.mul(t, d_pos)?;
    let neg = g.mul(t1, d_neg)?;
    let kl = g.add(pos, neg)?;
    g.mean(kl)
}

/// Weighted binary cross-entropy on logits `[B, N]` against 0/1 labels
/// `[B, N]`, summed over AUs and averaged over the batch.
pub fn cls_loss(g: &mut Graph, logits: Var, labels: Var, weights: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if g.shape(labels) != s.as_slice() {
        return Err(Error::dim(format!(
            "labels {:?} do not match logits {s:?}",
            g.shape(labels)
        )));
    }
    let n = *s.last().unwrap();
    if g.shape(weights) != [n] {
        return Err(Error::dim(format!("class weights must be [{n}]")));
    }
    let batch = g.value(logits).numel() / n;
    let p = clamped_sigmoid(g, logits)?;
    let p1 = one_minus(g, p)?;
    let log_p = g.log(p)?;
    let log_p1 = g.log(p1)?;
    let y1 = one_minus(g, labels)?;
    let pos = g.mul(labels, log_p)?;
    let neg = g.mul(y1, log_p1)?;
    let ll = g.add(pos, neg)?;
    let weighted = g.mul(ll, weights)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / batch as f64)
}

/// Per-AU class weights from a training label matrix (rows are samples).
/// `w_i ∝ 1/f_i` with `f_i` the positive rate clamped to `[0.01, 0.99]`,
/// normalised so the weights average to one.
pub fn class_weights(labels: &[Vec<bool>]) -> Result<Vec<f64>> {
    let first = labels.first().ok_or_else(|| Error::usage("class weights of an empty label matrix"))?;
    let n_au = first.len();
    if n_au == 0 || labels.iter().any(|r| r.len() != n_au) {
        return Err(Error::usage("label rows must be non-empty and of equal length"));
    }
    let inv: Vec<f64> = (0..n_au)
        .map(|i| {
            let pos = labels.iter().filter(|r| r[i]).count();
            let f = (pos as f64 / labels.len() as f64).clamp(0.01, 0.99);
            1.0 / f
        })
        .collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total * n_au as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub class_weights: Vec<f64>,
}

impl LossWeights {
    pub fn new(lambda: f64, class_weights: Vec<f64>) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be a non-negative number, got {lambda}")));
        }
        if class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::config("class weights must be positive"));
        }
        Ok(LossWeights { lambda, class_weights })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[self.class_weights.len()], self.class_weights.clone()).expect("non-empty weights")
    }
}

/// Loss terms of one forward pass; absent terms belong to heads the model
/// variant does not have.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls_o2o: Option<Var>,
    pub cls_o2m: Option<Var>,
    pub cls_ens: Option<Var>,
    pub kd_o2o: Option<Var>,
    pub kd_o2m: Option<Var>,
}

/// `cls(P_o) + cls(P_m) + cls(P_t) + λ·[kd(P_o, P_t) + kd(P_m, P_t)]`.
pub fn total_loss(g: &mut Graph, p_o: Var, p_m: Var, p_t: Var, labels: Var, lw: &LossWeights) -> Result<LossParts> {
    total_loss_with_teacher(g, p_o, p_m, p_t, p_t, labels, lw)
}

/// [`total_loss`] with the distillation teacher given separately from the
/// `P_t` entering the ensemble classification term.
pub fn total_loss_with_teacher(
    g: &mut Graph,
    p_o: Var,
    p_m: Var,
    p_t: Var,
    teacher: Var,
    labels: Var,
    lw: &LossWeights,
) -> Result<LossParts> {
    let w = g.constant(lw.tensor());
    let cls_o2o = cls_loss(g, p_o, labels, w)?;
    let cls_o2m = cls_loss(g, p_m, labels, w)?;
    let cls_ens = cls_loss(g, p_t, labels, w)?;
    let kd_o2o = kd_loss(g, p_o, teacher)?;
    let kd_o2m = kd_loss(g, p_m, teacher)?;
    let cls = g.add(cls_o2o, cls_o2m)?;
    let cls = g.add(cls, cls_ens)?;
    let kd = g.add(kd_o2o, kd_o2m)?;
    let kd = g.scale(kd, lw.lambda)?;
    let total = g.add(cls, kd)?;
    Ok(LossParts {
        total,
        cls_o2o: Some(cls_o2o),
        cls_o2m: Some(cls_o2m),
        cls_ens: Some(cls_ens),
        kd_o2o: Some(kd_o2o),
        kd_o2m: Some(kd_o2m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_examples() {
        let rows = vec![vec![true, true], vec![false, false], vec![true, false], vec![false, false]];
        let w = class_weights(&rows).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-12);
        let eq = vec![vec![true, true, true], vec![false, false, false]];
        assert_eq!(class_weights(&eq).unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(matches!(class_weights(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn lambda_must_be_valid() {
        assert!(LossWeights::new(-0.1, vec![1.0]).is_err());
        assert!(LossWeights::new(0.2, vec![0.0]).is_err());
        assert!(LossWeights::new(0.2, vec![1.0]).is_ok());
    }
}
