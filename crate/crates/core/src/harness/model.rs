//! Toy query-refinement detector. Each layer applies a residual affine
//! transform (standing in for attention over observations) followed by a
//! residual LMoE or plain feed-forward block.

use rand::Rng;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lmoe::{LMoELayer, RoutingDecision};
use crate::nn::{FeedForward, Linear};
use crate::numkernel::{ParamSet, Tape, Tensor, Var};
use crate::objectives::DistillParams;
use crate::scenegen::Scene;

pub enum Block {
    Moe(LMoELayer),
    /// Plain FFN with its own language projection for the per-layer alignment loss.
    Ffn { ffn: FeedForward, projection: Linear },
}

pub struct Layer {
    pub transform: Linear,
    pub block: Block,
}

pub struct Model {
    pub layers: Vec<Layer>,
    pub cls_proj: Linear,
    pub center_head: Linear,
    pub distill: DistillParams,
    pub logit_scale: f64,
    /// Centers are regressed in units of this many meters.
    pub center_scale: f64,
    pub n_classes: usize,
    pub query_dim: usize,
    pub lang_dim: usize,
}

/// Tape handles produced by one forward pass over stacked queries.
pub struct ForwardPass {
    /// `k×n` scaled cosine logits.
    pub logits: Var,
    /// `k×3` centers in units of `center_scale`.
    pub centers: Var,
    /// `Q̂` of every layer.
    pub projected: Vec<Var>,
    /// Softmax weights and decisions of each LMoE layer, by layer index.
    pub routing: Vec<Option<(Var, RoutingDecision)>>,
    /// Final refined queries.
    pub qbar: Var,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: &ExperimentConfig, n_classes: usize, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d_q = cfg.scene.obs_dim;
        let d_l = cfg.scene.embeddings.dim;
        let m = &cfg.model;
        let lmoe_cfg = m.lmoe(d_q, d_l);
        let layers = (0..m.layers)
            .map(|l| {
                let transform = Linear::gaussian(params, &format!("layer{l}.transform"), d_q, d_q, 1.0, rng);
                let block = if m.layer_uses_moe(l) {
                    Block::Moe(LMoELayer::new(&lmoe_cfg, n_classes, params, rng, &format!("layer{l}.moe"))?)
                } else {
                    Block::Ffn {
                        ffn: FeedForward::new(params, &format!("layer{l}.ffn"), d_q, m.ffn_hidden, m.expert_gain, rng),
                        projection: Linear::gaussian(params, &format!("layer{l}.proj"), d_q, d_l, 1.0, rng),
                    }
                };
                Ok(Layer { transform, block })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            cls_proj: Linear::gaussian(params, "head.cls_proj", d_q, d_l, 1.0, rng),
            center_head: Linear::gaussian(params, "head.center", d_q, 3, 1.0, rng),
            distill: DistillParams::new(params, d_q, d_l, rng),
            logit_scale: cfg.losses.contrast.logit_scale,
            center_scale: cfg.scene.max_range,
            n_classes,
            query_dim: d_q,
            lang_dim: d_l,
        })
    }

    pub fn moe_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l.block, Block::Moe(_))).count()
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, queries: Var, language: Var) -> Result<ForwardPass> {
        let q = tape.value(queries);
        if q.cols() != self.query_dim {
            return Err(Error::shape("model forward", q.shape(), &[q.rows(), self.query_dim]));
        }
        let l = tape.value(language);
        if l.rows() != self.n_classes || l.cols() != self.lang_dim {
            return Err(Error::shape("model forward language", l.shape(), &[self.n_classes, self.lang_dim]));
        }
        let mut x = queries;
        let mut projected = Vec::with_capacity(self.layers.len());
        let mut routing = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let t = layer.transform.forward(tape, params, x)?;
            let t = tape.relu(t);
            let x1 = tape.add(x, t)?;
            let (y, proj, route) = match &layer.block {
                Block::Moe(moe) => {
                    let out = moe.forward(tape, params, x1, language)?;
                    (out.output, out.projected, Some((out.weights, out.decision)))
                }
                Block::Ffn { ffn, projection } => {
                    let y = ffn.forward(tape, params, x1)?;
                    let p = projection.forward(tape, params, x1)?;
                    (y, p, None)
                }
            };
            x = tape.add(x1, y)?;
            projected.push(proj);
            routing.push(route);
        }
        let cls = self.cls_proj.forward(tape, params, x)?;
        let sim = tape.cosine_similarity(cls, language)?;
        let logits = tape.scale(sim, self.logit_scale);
        let centers = self.center_head.forward(tape, params, x)?;
        Ok(ForwardPass {
            logits,
            centers,
            projected,
            routing,
            qbar: x,
        })
    }
}

/// Frozen outputs for one scene.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    /// Centers in meters.
    pub centers: Tensor,
    /// Routing decisions of each LMoE layer, by layer index.
    pub routing: Vec<Option<RoutingDecision>>,
    /// Final-layer `Q̂`.
    pub embedding: Tensor,
}

pub trait Predictor {
    fn predict(&self, scene: &Scene, language: &Tensor) -> Result<Prediction>;
}

/// A model together with its parameter values.
pub struct Trained<'a> {
    pub model: &'a Model,
    pub params: &'a ParamSet,
}

impl Predictor for Trained<'_> {
    fn predict(&self, scene: &Scene, language: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let q = tape.constant(scene.observations.clone());
        let l = tape.constant(language.clone());
        let fp = self.model.forward(&mut tape, self.params, q, l)?;
        let scale = self.model.center_scale;
        Ok(Prediction {
            logits: tape.value(fp.logits).clone(),
            centers: tape.value(fp.centers).map(|v| v * scale),
            routing: fp.routing.into_iter().map(|r| r.map(|(_, d)| d)).collect(),
            embedding: tape.value(*fp.projected.last().expect("at least one layer")).clone(),
        })
    }
}
