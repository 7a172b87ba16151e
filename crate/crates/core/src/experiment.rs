//! One train-and-evaluate cell of an ablation grid.

use crate::config::RunConfig;
use crate::error::Result;
use crate::evaluation::{self, CosineStats};
use crate::model::{FanTrans, Variant};
use crate::synth::{self, Dataset};
use crate::training::{self, binarize, EpochMetrics, Prepared};
use crate::transformer::DropMode;

/// Held-out scores of one trained model.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub variant: Variant,
    pub drop: DropMode,
    pub seed: u64,
    pub lambda: f64,
    pub depth: usize,
    pub f1_deployed: f64,
    pub f1_o2o: Option<f64>,
    pub f1_o2m: Option<f64>,
    pub f1_ensemble: Option<f64>,
    /// Pairwise cosine statistics of the tokens entering the deployed head.
    pub cosine: Option<CosineStats>,
    /// RMS distance between label and prediction correlation matrices.
    pub corr_dist_o2o: Option<f64>,
    pub corr_dist_o2m: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

pub const SUMMARY_HEADER: &str =
    "variant,drop,seed,lambda,depth,f1_deployed,f1_o2o,f1_o2m,f1_ensemble,cos_mean,corr_dist_o2o,corr_dist_o2m";

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{},{},{},{},{},{}",
            self.variant,
            self.drop,
            self.seed,
            self.lambda,
            self.depth,
            self.f1_deployed,
            opt(self.f1_o2o),
            opt(self.f1_o2m),
            opt(self.f1_ensemble),
            opt(self.cosine.as_ref().map(|c| c.mean)),
            opt(self.corr_dist_o2o),
            opt(self.corr_dist_o2m),
        )
    }
}

/// Generated data, its split, and the stem features of both halves.
pub struct PreparedData {
    pub data: Dataset,
    pub train: Prepared,
    pub eval: Prepared,
}

pub fn prepare_data(rc: &RunConfig, model: &FanTrans) -> Result<PreparedData> {
    let data = synth::generate(&rc.data_spec())?;
    let (tr, ev) = synth::split(&data, rc.train_frac, rc.split_seed())?;
    Ok(PreparedData {
        train: training::prepare(model.stem(), &tr)?,
        eval: training::prepare(model.stem(), &ev)?,
        data,
    })
}

/// Scores a trained model on `set`.
pub fn score(model: &FanTrans, set: &Prepared, rc: &RunConfig, history: Vec<EpochMetrics>) -> Result<CellResult> {
    let (pred, scores) = training::head_scores(model, set, rc.train.batch_size)?;
    let labels = evaluation::correlation_matrix(&set.labels)?;
    let dist = |logits: &Option<Vec<Vec<f64>>>| -> Result<Option<f64>> {
        logits
            .as_ref()
            .map(|l| evaluation::corr_distance(&labels, &evaluation::correlation_matrix(&binarize(l))?))
            .transpose()
    };
    let cfg = model.config();
    Ok(CellResult {
        variant: cfg.variant,
        drop: cfg.drop,
        seed: rc.seed,
        lambda: cfg.lambda,
        depth: cfg.depth,
        f1_deployed: scores.deployed.macro_f1,
        f1_o2o: scores.o2o.map(|r| r.macro_f1),
        f1_o2m: scores.o2m.map(|r| r.macro_f1),
        f1_ensemble: scores.ensemble.map(|r| r.macro_f1),
        cosine: if pred.tokens.is_empty() {
            None
        } else {
            Some(evaluation::cosine_stats(&pred.tokens)?)
        },
        corr_dist_o2o: dist(&pred.o2o)?,
        corr_dist_o2m: dist(&pred.o2m)?,
        history,
    })
}

/// Trains on the training split, monitors and scores on the held-out split.
pub fn run_cell(rc: &RunConfig) -> Result<(FanTrans, CellResult)> {
    rc.validate()?;
    let mut model = FanTrans::new(&rc.model_config())?;
    let data = prepare_data(rc, &model)?;
    let report = training::train(&mut model, &data.train, &data.eval, &rc.train_config(), |_| {})?;
    let result = score(&model, &data.eval, rc, report.history)?;
    Ok((model, result))
}
