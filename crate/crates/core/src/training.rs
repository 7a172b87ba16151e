//! Optimiser, learning-rate schedule, the epoch loop, inference and
//! checkpoints.
//!
//! # Checkpoint format
//!
//! All integers little-endian.
//!
//! ```text
//! magic     8 bytes  "FANTCKPT"
//! version   u32      1
//! config    u64 length + UTF-8 key=value lines (model section)
//! n_params  u64
//!   per parameter: name (u32 length + UTF-8), ndim u32, ndim × u64 dims,
//!                  numel × f64 values
//! has_opt   u8       0 or 1
//!   if 1: step u64, then for every trainable parameter in store order
//!         numel × f64 first moments followed by numel × f64 second moments
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::fan_stub::{self, FixedStem};
use crate::model::{FanTrans, ModelConfig, Outputs};
use crate::okd::{self, LossWeights};
use crate::params::ParamStore;
use crate::rng;
use crate::synth::{Dataset, Reader};
use crate::tensor::Tensor;

/// Any loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 1e-4,
            decay_factor: 0.7,
            decay_every: 4,
            epochs: 12,
        }
    }
}

impl Schedule {
    /// `base_lr · decay_factor^⌊epoch / decay_every⌋`.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr must be a non-negative number"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("train.decay_every must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moments are kept for trainable
/// parameters only, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update from the gradients held in `store`. Any
    /// non-finite gradient aborts before a parameter is touched.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (_, p) in store.iter().filter(|(_, p)| !p.frozen) {
            if let Some(i) = p.grad.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}' has non-finite entry {} at {i}",
                    p.name,
                    p.grad.data()[i]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * value[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Replace each sample by its mirror image with probability ½.
    pub hflip: bool,
    /// Seed for shuffling and augmentation draws.
    pub seed: u64,
    /// Stop once the deployed head reaches this macro-F1 on the monitor set.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::default(),
            batch_size: 16,
            hflip: true,
            seed: 0,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if let Some(t) = self.target_f1 {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("train.target_f1 must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Stem features computed once per sample, plus their mirrored copies.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub fa: Vec<Tensor>,
    pub fa_flip: Vec<Tensor>,
    pub labels: Vec<Vec<bool>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.fa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fa.is_empty()
    }

    pub fn n_au(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }
}

pub fn prepare(stem: &FixedStem, data: &Dataset) -> Result<Prepared> {
    let mut fa = Vec::with_capacity(data.len());
    let mut fa_flip = Vec::with_capacity(data.len());
    for s in &data.samples {
        fa.push(stem.features(&s.image)?);
        fa_flip.push(stem.features(&fan_stub::hflip(&s.image))?);
    }
    Ok(Prepared {
        fa,
        fa_flip,
        labels: data.labels(),
    })
}

/// Stacks `[C, H, W]` tensors into `[B, C, H, W]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::usage("cannot stack an empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!("cannot stack {:?} with {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

pub fn label_matrix(rows: &[&Vec<bool>]) -> Result<Tensor> {
    let n = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
    Tensor::new(&[rows.len(), n], data)
}

/// Scalar loss terms of one step; `None` for terms the variant lacks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls_o2o: Option<f64>,
    pub cls_o2m: Option<f64>,
    pub cls_ens: Option<f64>,
    pub kd_o2o: Option<f64>,
    pub kd_o2m: Option<f64>,
}

/// What one optimisation step leaves behind for inspection.
pub struct StepOutput {
    pub loss: LossValues,
    pub graph: Graph,
    pub outputs: Outputs,
}

/// Forward, loss, backward and one optimiser update on a single batch.
pub fn train_step(
    model: &mut FanTrans,
    opt: &mut AdamW,
    fa: Tensor,
    labels: Tensor,
    lw: &LossWeights,
    lr: f64,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let x = g.constant(fa);
    let y = g.constant(labels);
    let out = model.forward(&mut g, x)?;
    let parts = model.loss(&mut g, &out, y, lw)?;
    let val = |v: Option<crate::Var>| v.map(|v| g.value(v).item());
    let loss = LossValues {
        total: g.value(parts.total).item(),
        cls_o2o: val(parts.cls_o2o),
        cls_o2m: val(parts.cls_o2m),
        cls_ens: val(parts.cls_ens),
        kd_o2o: val(parts.kd_o2o),
        kd_o2m: val(parts.kd_o2m),
    };
    if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
        return Err(Error::Divergence(format!("loss reached {} (limit {DIVERGENCE_LIMIT:e})", loss.total)));
    }
    let grads = g.backward(parts.total)?;
    model.params.zero_grad();
    grads.accumulate_into(&g, &mut model.params);
    opt.update(&mut model.params, lr)?;
    Ok(StepOutput {
        loss,
        graph: g,
        outputs: out,
    })
}

/// Logits of every head present, one row per sample.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub o2o: Option<Vec<Vec<f64>>>,
    pub o2m: Option<Vec<Vec<f64>>>,
    pub ensemble: Option<Vec<Vec<f64>>>,
    pub baseline: Option<Vec<Vec<f64>>>,
    /// Tokens entering the deployed classifier, `N × D` per sample.
    pub tokens: Vec<Tensor>,
}

impl Predictions {
    pub fn deployed(&self) -> &[Vec<f64>] {
        self.o2m
            .as_ref()
            .or(self.o2o.as_ref())
            .or(self.baseline.as_ref())
            .expect("every variant has a head")
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let n = *t.shape().last().unwrap();
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

/// Full-graph forward over a prepared set without flips.
pub fn predict(model: &FanTrans, set: &Prepared, batch_size: usize) -> Result<Predictions> {
    let mut p = Predictions::default();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let fa = stack(&chunk.iter().map(|&i| &set.fa[i]).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let x = g.constant(fa);
        let out = model.forward(&mut g, x)?;
        let push = |dst: &mut Option<Vec<Vec<f64>>>, v: Option<crate::Var>| {
            if let Some(v) = v {
                dst.get_or_insert_with(Vec::new).extend(rows_of(g.value(v)));
            }
        };
        push(&mut p.o2o, out.p_o);
        push(&mut p.o2m, out.p_m);
        push(&mut p.ensemble, out.p_t);
        push(&mut p.baseline, out.p_baseline);
        if let Some(f) = out.f2.or(out.f1) {
            let t = g.value(f);
            let per = t.numel() / chunk.len();
            let shape = &t.shape()[1..];
            for c in t.data().chunks(per) {
                p.tokens.push(Tensor::new(shape, c.to_vec())?);
            }
        }
    }
    Ok(p)
}

/// `σ(x) > 0.5`, strictly.
pub fn binarize(logits: &[Vec<f64>]) -> Vec<Vec<bool>> {
    logits
        .iter()
        .map(|r| r.iter().map(|&x| crate::autograd::sigmoid(x) > 0.5).collect())
        .collect()
}

/// Output of the deployment path.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[B, N]`.
    pub logits: Tensor,
    pub predictions: Vec<Vec<bool>>,
}

/// Deployment path only (trunk, deployed transformer, deployed head) on
/// fused features `[B, D_a, H_a, W_a]`.
pub fn infer(model: &FanTrans, fa: &Tensor) -> Result<Inference> {
    let mut g = Graph::new();
    let x = g.constant(fa.clone());
    let logits = model.forward_deployed(&mut g, x)?;
    let logits = g.value(logits).clone();
    let predictions = binarize(&rows_of(&logits));
    Ok(Inference { logits, predictions })
}

/// Runs the frozen stem and then [`infer`] on raw `[B, 3, S, S]` images.
pub fn infer_images(model: &FanTrans, images: &Tensor) -> Result<Inference> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let bundle = model.stem().forward(&mut g, x)?;
    let fa = fan_stub::fuse_features_on(&mut g, bundle)?;
    let fa = g.value(fa).clone();
    infer(model, &fa)
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub f1_o2o: Option<f64>,
    pub f1_o2m: Option<f64>,
    pub f1_ensemble: Option<f64>,
    pub f1_deployed: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,loss_total,loss_cls_o2o,loss_cls_o2m,loss_cls_ens,loss_kd_o2o,loss_kd_o2m,f1_o2o,f1_o2m,f1_ensemble,f1_deployed";

fn opt_field(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.17e}")).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{},{},{},{},{},{},{},{},{:.17e}",
            self.epoch,
            self.lr,
            self.loss.total,
            opt_field(self.loss.cls_o2o),
            opt_field(self.loss.cls_o2m),
            opt_field(self.loss.cls_ens),
            opt_field(self.loss.kd_o2o),
            opt_field(self.loss.kd_o2m),
            opt_field(self.f1_o2o),
            opt_field(self.f1_o2m),
            opt_field(self.f1_ensemble),
            self.f1_deployed
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Macro-F1 of every head on a prepared set.
pub fn head_scores(model: &FanTrans, set: &Prepared, batch_size: usize) -> Result<(Predictions, HeadScores)> {
    let p = predict(model, set, batch_size)?;
    let score = |l: &Option<Vec<Vec<f64>>>| -> Result<Option<MetricsReport>> {
        l.as_ref().map(|l| evaluation::f1_scores(&binarize(l), &set.labels)).transpose()
    };
    let scores = HeadScores {
        o2o: score(&p.o2o)?,
        o2m: score(&p.o2m)?,
        ensemble: score(&p.ensemble)?,
        deployed: evaluation::f1_scores(&binarize(p.deployed()), &set.labels)?,
    };
    Ok((p, scores))
}

#[derive(Clone, Debug)]
pub struct HeadScores {
    pub o2o: Option<MetricsReport>,
    pub o2m: Option<MetricsReport>,
    pub ensemble: Option<MetricsReport>,
    pub deployed: MetricsReport,
}

pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub optimizer: AdamW,
}

/// The epoch loop. `monitor` is scored after every epoch; `on_epoch` sees
/// each metrics row as it is produced.
pub fn train(
    model: &mut FanTrans,
    train_set: &Prepared,
    monitor: &Prepared,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || monitor.is_empty() {
        return Err(Error::usage("training and monitor sets must be non-empty"));
    }
    let lw = LossWeights::new(model.config().lambda, okd::class_weights(&train_set.labels)?)?;
    let mut opt = AdamW::new(&model.params);
    let mut rng = rng::stream(cfg.seed, "train");
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let fa: Vec<&Tensor> = chunk
                .iter()
                .map(|&i| {
                    if cfg.hflip && rng.random::<bool>() {
                        &train_set.fa_flip[i]
                    } else {
                        &train_set.fa[i]
                    }
                })
                .collect();
            let labels: Vec<&Vec<bool>> = chunk.iter().map(|&i| &train_set.labels[i]).collect();
            let step = train_step(model, &mut opt, stack(&fa)?, label_matrix(&labels)?, &lw, lr)?;
            accumulate(&mut sums, &step.loss);
            batches += 1;
        }
        let mean = scale_losses(&sums, 1.0 / batches as f64);
        let (_, scores) = head_scores(model, monitor, cfg.batch_size)?;
        let row = EpochMetrics {
            epoch,
            lr,
            loss: mean,
            f1_o2o: scores.o2o.as_ref().map(|r| r.macro_f1),
            f1_o2m: scores.o2m.as_ref().map(|r| r.macro_f1),
            f1_ensemble: scores.ensemble.as_ref().map(|r| r.macro_f1),
            f1_deployed: scores.deployed.macro_f1,
        };
        on_epoch(&row);
        let done = cfg.target_f1.is_some_and(|t| row.f1_deployed >= t);
        history.push(row);
        if done {
            break;
        }
    }
    Ok(TrainReport { history, optimizer: opt })
}

fn accumulate(acc: &mut LossValues, v: &LossValues) {
    fn add(a: &mut Option<f64>, b: Option<f64>) {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + b);
        }
    }
    acc.total += v.total;
    add(&mut acc.cls_o2o, v.cls_o2o);
    add(&mut acc.cls_o2m, v.cls_o2m);
    add(&mut acc.cls_ens, v.cls_ens);
    add(&mut acc.kd_o2o, v.kd_o2o);
    add(&mut acc.kd_o2m, v.kd_o2m);
}

fn scale_losses(v: &LossValues, s: f64) -> LossValues {
    LossValues {
        total: v.total * s,
        cls_o2o: v.cls_o2o.map(|x| x * s),
        cls_o2m: v.cls_o2m.map(|x| x * s),
        cls_ens: v.cls_ens.map(|x| x * s),
        kd_o2o: v.kd_o2o.map(|x| x * s),
        kd_o2m: v.kd_o2m.map(|x| x * s),
    }
}

const CKPT_MAGIC: &[u8; 8] = b"FANTCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn from_model(model: &FanTrans, optimizer: Option<&AdamW>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model from the stored config and loads the weights.
    pub fn build(&self) -> Result<FanTrans> {
        let mut model = FanTrans::new(&self.config)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Loads weights into a model that must have been built from the same
    /// config.
    pub fn load_into(&self, model: &mut FanTrans) -> Result<()> {
        if model.config() != &self.config {
            return Err(Error::format("checkpoint was written for a different model config"));
        }
        model.params.load_values(self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let text = crate::config::model_config_text(&self.config);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    for &x in m.data().iter().chain(v.data()) {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(8)? != CKPT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| Error::format("config text is not UTF-8"))?;
        let config = crate::config::parse_model_config(text)?;
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(&shape, data).map_err(|e| Error::format(e.to_string()))?));
        }
        let optimizer = match r.bytes(1)?[0] {
            0 => None,
            1 => {
                let model = FanTrans::new(&config)?;
                let mut opt = AdamW::new(&model.params);
                opt.step = r.u64()?;
                for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
                    for x in m.data_mut().iter_mut().chain(v.data_mut().iter_mut()) {
                        *x = r.f64()?;
                    }
                }
                Some(opt)
            }
            b => return Err(Error::format(format!("bad optimizer flag {b}"))),
        };
        if !r.finished() {
            return Err(Error::format("trailing bytes after checkpoint body"));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let s = Schedule::default();
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(3), 1e-4);
        assert!((s.lr(4) - 7e-5).abs() < 1e-18);
        assert!((s.lr(11) - 4.9e-5).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::ones(&[2]), false);
        let mut opt = AdamW::new(&store);
        store.get_mut(id).grad = Tensor::new(&[2], vec![0.5, f64::NAN]).unwrap();
        assert!(matches!(opt.update(&mut store, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(store.get(id).value, Tensor::ones(&[2]));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(&[vec![0.0, 1e-9, -1e-9]]), vec![vec![false, true, false]]);
    }
}
