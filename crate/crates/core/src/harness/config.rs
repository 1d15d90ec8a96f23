use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmoe::{routing_strategies, LMoEConfig, FEATURE_ROUTED, LANGUAGE_GUIDED};
use crate::matching::{assignment_solvers, MatchingConfig};
use crate::numkernel::AdamConfig;
use crate::objectives::{ContrastConfig, DistillConfig, LossWeights};
use crate::scenegen::SceneConfig;

pub const CFG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    /// Use an LMoE block in every layer; `moe_layers` overrides per layer.
    pub moe: bool,
    pub moe_layers: Option<Vec<bool>>,
    /// Hidden width of the plain feed-forward block used where LMoE is off.
    pub ffn_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub routed_hidden: usize,
    pub shared_hidden: usize,
    pub renormalize: bool,
    pub router: String,
    pub router_init: f64,
    pub expert_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let l = LMoEConfig::default();
        Self {
            layers: 2,
            moe: true,
            moe_layers: None,
            ffn_hidden: 2048,
            num_experts: l.num_experts,
            top_k: l.top_k,
            routed_hidden: l.routed_hidden,
            shared_hidden: l.shared_hidden,
            renormalize: l.renormalize,
            router: l.router,
            router_init: l.router_init,
            expert_gain: l.expert_gain,
        }
    }
}

impl ModelConfig {
    pub fn lmoe(&self, query_dim: usize, lang_dim: usize) -> LMoEConfig {
        LMoEConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            query_dim,
            lang_dim,
            routed_hidden: self.routed_hidden,
            shared_hidden: self.shared_hidden,
            renormalize: self.renormalize,
            router: self.router.clone(),
            router_init: self.router_init,
            expert_gain: self.expert_gain,
        }
    }

    pub fn layer_uses_moe(&self, layer: usize) -> bool {
        match &self.moe_layers {
            Some(v) => v[layer],
            None => self.moe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Auxiliary query-language alignment loss at every layer.
    pub align: bool,
    /// Distillation from teacher similarities.
    pub distill: bool,
    /// Expert balance loss (only meaningful with LMoE layers).
    pub balance: bool,
    pub weights: LossWeights,
    /// Weight of the final-head focal classification loss.
    pub cls_weight: f64,
    pub center_weight: f64,
    pub contrast: ContrastConfig,
    pub kd: DistillConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            align: true,
            distill: true,
            balance: true,
            weights: LossWeights::default(),
            cls_weight: 1.0,
            center_weight: 1.0,
            contrast: ContrastConfig::default(),
            kd: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            train_scenes: 500,
            eval_scenes: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { model: 0, data: 0 }
    }
}

impl Seeds {
    /// First scene seed of the training corpus.
    pub fn train_base(&self) -> u64 {
        self.data << 32
    }

    /// First scene seed of the held-out corpus; disjoint from training.
    pub fn eval_base(&self) -> u64 {
        (self.data << 32) | (1 << 31)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cfg_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cfg_version: CFG_VERSION,
            name: "default".into(),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            matching: MatchingConfig::default(),
            optimizer: AdamConfig::default(),
            train: TrainConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.cfg_version != CFG_VERSION {
            return bad(format!("cfg_version {} unsupported (expected {CFG_VERSION})", self.cfg_version));
        }
        self.scene.validate()?;
        let m = &self.model;
        if m.layers == 0 {
            return bad("model.layers must be >= 1".into());
        }
        if let Some(v) = &m.moe_layers {
            if v.len() != m.layers {
                return bad(format!("moe_layers has {} entries for {} layers", v.len(), m.layers));
            }
        }
        if m.ffn_hidden == 0 {
            return bad("ffn_hidden must be >= 1".into());
        }
        if !routing_strategies().contains(&m.router) {
            return bad(format!(
                "unknown router `{}` (available: {LANGUAGE_GUIDED}, {FEATURE_ROUTED})",
                m.router
            ));
        }
        m.lmoe(self.scene.obs_dim, self.scene.embeddings.dim)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let l = &self.losses;
        for (name, w) in [
            ("weights.contrast", l.weights.contrast),
            ("weights.kd", l.weights.kd),
            ("weights.balance", l.weights.balance),
            ("cls_weight", l.cls_weight),
            ("center_weight", l.center_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("losses.{name} must be finite and >= 0, got {w}"));
            }
        }
        l.kd.validate()?;
        if !(l.contrast.logit_scale > 0.0) || !(0.0..=1.0).contains(&l.contrast.alpha) || !(l.contrast.gamma >= 0.0) {
            return bad("contrast needs logit_scale > 0, alpha in [0, 1], gamma >= 0".into());
        }
        if !assignment_solvers().contains(&self.matching.solver) {
            return bad(format!("unknown assignment solver `{}`", self.matching.solver));
        }
        if !(self.matching.lambda_cls >= 0.0 && self.matching.lambda_center >= 0.0) {
            return bad("matching weights must be >= 0".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optimizer needs lr > 0, betas in [0, 1), eps > 0".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.train_scenes == 0 || t.eval_scenes == 0 {
            return bad("batch_size, train_scenes and eval_scenes must be >= 1".into());
        }
        Ok(())
    }
}
