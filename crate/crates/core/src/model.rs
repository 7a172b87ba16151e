//! Model assembly: shared convolution trunk, one or two AU transformers,
//! the diverse classifiers and the ensemble generator.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::classifiers::{O2mHead, O2oHead, PooledHead};
use crate::conv_head::ConvHead;
use crate::error::{Error, Result};
use crate::fan_stub::{FixedStem, StemConfig};
use crate::okd::{self, EnsembleGen, LossParts, LossWeights};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::transformer::{AttentionTrace, AuTransformer, DropMode};

/// Which ablation variant to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Pooled `F_c` + fully connected classifier, no transformer.
    Baseline,
    /// One transformer with the one-to-one head.
    O2oOnly,
    /// One transformer with the one-to-many head.
    O2mOnly,
    /// One transformer feeding both heads, distilled through the ensemble.
    SharedTrunk,
    /// Separate transformers per head (the full model).
    Diverse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::O2oOnly,
        Variant::O2mOnly,
        Variant::SharedTrunk,
        Variant::Diverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::O2oOnly => "o2o-only",
            Variant::O2mOnly => "o2m-only",
            Variant::SharedTrunk => "shared-trunk",
            Variant::Diverse => "diverse",
        }
    }

    pub fn is_two_branch(self) -> bool {
        matches!(self, Variant::SharedTrunk | Variant::Diverse)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!("unknown variant '{s}' (valid: {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_au: usize,
    pub d_c: usize,
    pub depth: usize,
    pub k: usize,
    pub lambda: f64,
    pub drop: DropMode,
    pub variant: Variant,
    pub image_size: usize,
    pub stem: StemConfig,
    /// Std of the normal init of learnable mask logits.
    pub mask_init_std: f64,
    /// Seed for trainable-parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_au: 8,
            d_c: 64,
            depth: 5,
            k: 2,
            lambda: 0.2,
            drop: DropMode::Learnable,
            variant: Variant::Diverse,
            image_size: 64,
            stem: StemConfig::default(),
            mask_init_std: 1.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by the gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            n_au: 4,
            d_c: 16,
            depth: 1,
            k: 2,
            lambda: 0.2,
            drop: DropMode::Full,
            variant: Variant::Diverse,
            image_size: 16,
            stem: StemConfig {
                seed: 1,
                d_lf: 4,
                d_h: 2,
                n_lmk: 3,
                h_a: 8,
                w_a: 8,
            },
            mask_init_std: 1.0,
            init_seed: 1,
        }
    }

    /// Derives the stem and init seeds from one root seed.
    pub fn with_root_seed(mut self, root: u64) -> Self {
        self.stem.seed = rng::derive_seed(root, "stem");
        self.init_seed = rng::derive_seed(root, "model-init");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        if self.n_au == 0 {
            return Err(Error::config("model.n_au must be positive"));
        }
        if self.d_c == 0 {
            return Err(Error::config("model.d_c must be positive"));
        }
        if !self.d_c.is_multiple_of(crate::transformer::head_count(self.d_c)) {
            return Err(Error::config("model.d_c must be divisible by its head count"));
        }
        if self.depth == 0 {
            return Err(Error::config("model.depth must be at least 1"));
        }
        if self.k == 0 || self.k > self.n_au {
            return Err(Error::config(format!("model.k must be in 1..={}", self.n_au)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda must be a non-negative number"));
        }
        crate::conv_head::stage_count(self.stem.h_a)?;
        Ok(())
    }
}

/// Everything a forward pass produces. Heads that the variant lacks are
/// `None`.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub f_c: Var,
    pub f_au: Option<Var>,
    /// Output of the transformer feeding the one-to-one head.
    pub f1: Option<Var>,
    /// Output of the transformer feeding the one-to-many head.
    pub f2: Option<Var>,
    pub p_o: Option<Var>,
    pub p_m_hat: Option<Var>,
    pub p_m: Option<Var>,
    pub w1: Option<Var>,
    pub w2: Option<Var>,
    pub p_t: Option<Var>,
    pub p_baseline: Option<Var>,
    pub attn1: Vec<AttentionTrace>,
    pub attn2: Vec<AttentionTrace>,
}

impl Outputs {
    /// Logits of the head deployed at inference time.
    pub fn deployed(&self) -> Var {
        self.p_m
            .or(self.p_o)
            .or(self.p_baseline)
            .expect("every variant has a head")
    }
}

/// The trainable model plus its frozen stem.
pub struct FanTrans {
    cfg: ModelConfig,
    stem: FixedStem,
    pub params: ParamStore,
    conv: ConvHead,
    t1: Option<AuTransformer>,
    t2: Option<AuTransformer>,
    o2o: Option<O2oHead>,
    o2m: Option<O2mHead>,
    ens: Option<EnsembleGen>,
    baseline: Option<PooledHead>,
}

impl FanTrans {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = FixedStem::new(&cfg.stem, cfg.image_size)?;
        let mut rng = rand::SeedableRng::seed_from_u64(cfg.init_seed);
        let rng: &mut rand_chacha::ChaCha8Rng = &mut rng;
        let mut params = ParamStore::new();
        let d_a = cfg.stem.d_a();
        let conv = ConvHead::new(&mut params, rng, d_a, cfg.stem.h_a, cfg.d_c, cfg.n_au)?;
        let mut tr = |params: &mut ParamStore, name: &str| {
            AuTransformer::new(params, rng, name, cfg.n_au, cfg.d_c, cfg.depth, cfg.drop, cfg.mask_init_std)
        };
        let (t1, t2) = match cfg.variant {
            Variant::Baseline => (None, None),
            Variant::O2oOnly | Variant::SharedTrunk => (Some(tr(&mut params, "t1")?), None),
            Variant::O2mOnly => (None, Some(tr(&mut params, "t2")?)),
            Variant::Diverse => (Some(tr(&mut params, "t1")?), Some(tr(&mut params, "t2")?)),
        };
        let o2o = matches!(cfg.variant, Variant::O2oOnly | Variant::SharedTrunk | Variant::Diverse)
            .then(|| O2oHead::new(&mut params, rng, "o2o", cfg.d_c));
        let o2m = if matches!(cfg.variant, Variant::O2mOnly | Variant::SharedTrunk | Variant::Diverse) {
            Some(O2mHead::new(&mut params, rng, "o2m", cfg.d_c, cfg.n_au, cfg.k)?)
        } else {
            None
        };
        let ens = cfg
            .variant
            .is_two_branch()
            .then(|| EnsembleGen::new(&mut params, rng, cfg.d_c, cfg.n_au));
        let baseline = (cfg.variant == Variant::Baseline).then(|| PooledHead::new(&mut params, rng, "baseline", cfg.d_c, cfg.n_au));
        Ok(FanTrans {
            cfg: cfg.clone(),
            stem,
            params,
            conv,
            t1,
            t2,
            o2o,
            o2m,
            ens,
            baseline,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stem(&self) -> &FixedStem {
        &self.stem
    }

    pub fn conv_head(&self) -> &ConvHead {
        &self.conv
    }

    /// Transformer feeding the deployed head.
    pub fn deployed_transformer(&self) -> Option<&AuTransformer> {
        self.t2.as_ref().or(self.t1.as_ref())
    }

    pub fn transformers(&self) -> impl Iterator<Item = &AuTransformer> {
        self.t1.iter().chain(self.t2.iter())
    }

    /// Full forward pass from fused features `F_a` (`[B, D_a, H_a, W_a]`).
    pub fn forward(&self, g: &mut Graph, f_a: Var) -> Result<Outputs> {
        self.forward_with(g, &self.params, f_a)
    }

    /// [`FanTrans::forward`] reading weights from `p`, which must have the
    /// layout of `self.params`.
    pub fn forward_with(&self, g: &mut Graph, p: &ParamStore, f_a: Var) -> Result<Outputs> {
        let f_c = self.conv.forward(g, p, f_a)?;
        let mut out = Outputs {
            f_c,
            f_au: None,
            f1: None,
            f2: None,
            p_o: None,
            p_m_hat: None,
            p_m: None,
            w1: None,
            w2: None,
            p_t: None,
            p_baseline: None,
            attn1: Vec::new(),
            attn2: Vec::new(),
        };
        if let Some(head) = &self.baseline {
            out.p_baseline = Some(head.forward(g, p, f_c)?);
            return Ok(out);
        }
        let f_au = self.conv.au_project(g, p, f_c)?;
        out.f_au = Some(f_au);
        if let Some(t1) = &self.t1 {
            let (f1, tr) = t1.forward(g, p, f_au)?;
            out.f1 = Some(f1);
            out.attn1 = tr;
        }
        if let Some(t2) = &self.t2 {
            let (f2, tr) = t2.forward(g, p, f_au)?;
            out.f2 = Some(f2);
            out.attn2 = tr;
        } else if self.cfg.variant == Variant::SharedTrunk {
            out.f2 = out.f1;
        }
        if let (Some(head), Some(f1)) = (&self.o2o, out.f1) {
            out.p_o = Some(head.forward(g, p, f1)?);
        }
        if let (Some(head), Some(f2)) = (&self.o2m, out.f2) {
            let (hat, pm) = head.forward(g, p, f2)?;
            out.p_m_hat = Some(hat);
            out.p_m = Some(pm);
        }
        if let Some(ens) = &self.ens {
            let (w1, w2) = ens.forward(g, p, f_c)?;
            let p_t = okd::ensemble_target(g, out.p_o.unwrap(), out.p_m.unwrap(), w1, w2)?;
            out.w1 = Some(w1);
            out.w2 = Some(w2);
            out.p_t = Some(p_t);
        }
        Ok(out)
    }

    /// Inference path: trunk, the deployed transformer and its head only.
    pub fn forward_deployed(&self, g: &mut Graph, f_a: Var) -> Result<Var> {
        let p = &self.params;
        let f_c = self.conv.forward(g, p, f_a)?;
        if let Some(head) = &self.baseline {
            return head.forward(g, p, f_c);
        }
        let f_au = self.conv.au_project(g, p, f_c)?;
        let t = self.deployed_transformer().expect("non-baseline variants have a transformer");
        let (f, _) = t.forward(g, p, f_au)?;
        match &self.o2m {
            Some(head) => Ok(head.forward(g, p, f)?.1),
            None => self.o2o.as_ref().expect("o2o head").forward(g, p, f),
        }
    }

    /// Training objective for this variant.
    pub fn loss(&self, g: &mut Graph, out: &Outputs, labels: Var, lw: &LossWeights) -> Result<LossParts> {
        self.loss_with_teacher(g, out, labels, lw, None)
    }

    /// [`FanTrans::loss`] with the distillation teacher pinned to fixed
    /// logits. Finite-difference checks use this to hold the detached
    /// teacher at its value from the unperturbed point.
    pub fn loss_with_teacher(
        &self,
        g: &mut Graph,
        out: &Outputs,
        labels: Var,
        lw: &LossWeights,
        teacher: Option<&Tensor>,
    ) -> Result<LossParts> {
        if let (Some(p_o), Some(p_m), Some(p_t)) = (out.p_o, out.p_m, out.p_t) {
            let t = match teacher {
                Some(t) => g.constant(t.clone()),
                None => p_t,
            };
            return okd::total_loss_with_teacher(g, p_o, p_m, p_t, t, labels, lw);
        }
        let w = g.constant(lw.tensor());
        let logits = out.deployed();
        let cls = okd::cls_loss(g, logits, labels, w)?;
        Ok(LossParts {
            total: cls,
            cls_o2o: out.p_o.map(|_| cls),
            cls_o2m: out.p_m.map(|_| cls),
            cls_ens: None,
            kd_o2o: None,
            kd_o2m: None,
        })
    }
}
