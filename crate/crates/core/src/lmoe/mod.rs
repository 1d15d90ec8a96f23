//! Language-guided mixture-of-experts layer.
//!
//! Queries are projected into the language space, compared against every
//! class embedding by cosine similarity, and that similarity vector is what
//! the router sees. The top-k routed experts are mixed with their softmax
//! weights and an always-on shared expert is added on top.

mod routing;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::numkernel::{topk_rows, ParamSet, Tape, Tensor, Var};

pub use routing::{
    routing_strategies, FeatureRouted, LanguageGuided, RoutingStrategy, FEATURE_ROUTED,
    LANGUAGE_GUIDED,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LMoEConfig {
    /// Routed expert count `M`.
    pub num_experts: usize,
    pub top_k: usize,
    /// Query dimension `D`.
    pub query_dim: usize,
    /// Language embedding dimension `d`.
    pub lang_dim: usize,
    pub routed_hidden: usize,
    pub shared_hidden: usize,
    /// Rescale the selected weights to sum to one per query.
    pub renormalize: bool,
    /// Registered routing strategy name.
    pub router: String,
    /// Uniform init bound of the router weights; small keeps initial routing near uniform.
    pub router_init: f64,
    /// Output-layer gain of expert initialization.
    pub expert_gain: f64,
}

impl Default for LMoEConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            query_dim: 256,
            lang_dim: 64,
            routed_hidden: 512,
            shared_hidden: 1024,
            renormalize: false,
            router: LANGUAGE_GUIDED.into(),
            router_init: 1e-3,
            expert_gain: 0.5,
        }
    }
}

impl LMoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={} (num_experts)",
                self.top_k, self.num_experts
            )));
        }
        for (name, v) in [
            ("query_dim", self.query_dim),
            ("lang_dim", self.lang_dim),
            ("routed_hidden", self.routed_hidden),
            ("shared_hidden", self.shared_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !routing_strategies().contains(&self.router) {
            return Err(Error::Config(format!("unknown router `{}`", self.router)));
        }
        Ok(())
    }
}

/// Per-query routing outcome: full softmax weights `W (k×M)` and the
/// top-k selection, strongest first.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub weights: Tensor,
    pub indices: Vec<Vec<usize>>,
    pub selected: Vec<Vec<f64>>,
}

impl RoutingDecision {
    pub fn from_weights(weights: Tensor, top_k: usize) -> Result<Self> {
        let (indices, selected) = topk_rows(&weights, top_k)?;
        Ok(Self {
            weights,
            indices,
            selected,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_experts(&self) -> usize {
        self.weights.cols()
    }

    pub fn top_k(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    /// `F_i`: fraction of queries whose selection contains expert `i`.
    pub fn utilization(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.num_experts()];
        for sel in &self.indices {
            for &i in sel {
                f[i] += 1.0;
            }
        }
        let b = self.len().max(1) as f64;
        f.iter_mut().for_each(|v| *v /= b);
        f
    }

    /// `P_i`: mean routing probability of expert `i`.
    pub fn mean_probability(&self) -> Vec<f64> {
        let m = self.num_experts();
        let mut p = vec![0.0; m];
        for r in 0..self.weights.rows() {
            for (acc, w) in p.iter_mut().zip(self.weights.row(r)) {
                *acc += w;
            }
        }
        let b = self.len().max(1) as f64;
        p.iter_mut().for_each(|v| *v /= b);
        p
    }

    /// `M · Σ F_i P_i` evaluated on frozen values.
    pub fn balance_value(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::invalid("balance loss over an empty batch"));
        }
        let m = self.num_experts() as f64;
        Ok(m * self
            .utilization()
            .iter()
            .zip(self.mean_probability())
            .map(|(f, p)| f * p)
            .sum::<f64>())
    }
}

pub struct LMoELayer {
    pub config: LMoEConfig,
    pub projection: Linear,
    pub router: Linear,
    pub experts: Vec<FeedForward>,
    pub shared: FeedForward,
    strategy: Arc<dyn RoutingStrategy>,
}

/// Everything a forward pass exposes to losses and reports.
pub struct LMoEOutput {
    /// `Q̄ = Σ_{i∈𝒯} W_i E_i(Q) + E_s(Q)`.
    pub output: Var,
    /// `Q̂`, the queries in language space.
    pub projected: Var,
    pub router_input: Var,
    pub weights: Var,
    pub decision: RoutingDecision,
}

impl LMoELayer {
    pub fn new<R: Rng + ?Sized>(
        config: &LMoEConfig,
        n_classes: usize,
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
    ) -> Result<Self> {
        config.validate()?;
        let strategy = routing_strategies().get(&config.router)?;
        let (dq, dl) = (config.query_dim, config.lang_dim);
        let projection = Linear::gaussian(params, &format!("{name}.proj"), dq, dl, 1.0, rng);
        let width = strategy.input_width(dq, n_classes);
        let router = Linear::uniform(
            params,
            &format!("{name}.router"),
            width,
            config.num_experts,
            config.router_init,
            rng,
        );
        let experts = (0..config.num_experts)
            .map(|i| {
                FeedForward::new(
                    params,
                    &format!("{name}.expert{i}"),
                    dq,
                    config.routed_hidden,
                    config.expert_gain,
                    rng,
                )
            })
            .collect();
        let shared = FeedForward::new(
            params,
            &format!("{name}.shared"),
            dq,
            config.shared_hidden,
            config.expert_gain,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            projection,
            router,
            experts,
            shared,
            strategy,
        })
    }

    pub fn strategy(&self) -> &dyn RoutingStrategy {
        self.strategy.as_ref()
    }

    /// `Q̂ = Linear(Q)`.
    pub fn project_queries(&self, tape: &mut Tape, params: &ParamSet, queries: Var) -> Result<Var> {
        self.projection.forward(tape, params, queries)
    }

    /// Router logits, softmax weights and top-k selection for a prepared router input.
    pub fn route(&self, tape: &mut Tape, params: &ParamSet, router_input: Var) -> Result<(Var, RoutingDecision)> {
        let width = tape.value(router_input).cols();
        if width != self.router.in_dim {
            return Err(Error::shape(
                "route",
                tape.value(router_input).shape(),
                &[self.router.in_dim, self.config.num_experts],
            ));
        }
        let logits = self.router.forward(tape, params, router_input)?;
        let weights = tape.row_softmax(logits)?;
        let decision = RoutingDecision::from_weights(tape.value(weights).clone(), self.config.top_k)?;
        Ok((weights, decision))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        queries: Var,
        language: Var,
    ) -> Result<LMoEOutput> {
        let qd = tape.value(queries).cols();
        if qd != self.config.query_dim {
            return Err(Error::shape(
                "lmoe_forward",
                tape.value(queries).shape(),
                &[tape.value(queries).rows(), self.config.query_dim],
            ));
        }
        let projected = self.project_queries(tape, params, queries)?;
        let router_input = self.strategy.router_input(tape, queries, projected, language)?;
        let (weights, decision) = self.route(tape, params, router_input)?;
        let k = decision.len();

        let mix = if self.config.renormalize {
            let mut mask = Tensor::zeros(k, self.config.num_experts);
            for (r, sel) in decision.indices.iter().enumerate() {
                for &i in sel {
                    mask.set(r, i, 1.0);
                }
            }
            let masked = tape.mul_const(weights, mask)?;
            let total = tape.row_sum(masked);
            let inv = tape.recip(total)?;
            tape.mul_col(masked, inv)?
        } else {
            weights
        };

        let mut routed: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = decision
                .indices
                .iter()
                .enumerate()
                .filter(|(_, sel)| sel.contains(&i))
                .map(|(r, _)| r)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(queries, &rows)?;
            let y = expert.forward(tape, params, x)?;
            let col = tape.select_col(mix, i)?;
            let w = tape.gather_rows(col, &rows)?;
            let weighted = tape.mul_col(y, w)?;
            let placed = tape.scatter_rows(weighted, &rows, k)?;
            routed = Some(match routed {
                Some(acc) => tape.add(acc, placed)?,
                None => placed,
            });
        }
        let shared = self.shared.forward(tape, params, queries)?;
        let output = match routed {
            Some(r) => tape.add(r, shared)?,
            None => shared,
        };
        Ok(LMoEOutput {
            output,
            projected,
            router_input,
            weights,
            decision,
        })
    }
}

/// `L = M · Σ_i F_i · P_i`; gradient reaches `W` through `P_i` only.
pub fn balance_loss(tape: &mut Tape, weights: Var, decision: &RoutingDecision) -> Result<Var> {
    if decision.is_empty() {
        return Err(Error::invalid("balance loss over an empty batch"));
    }
    let m = decision.num_experts();
    if tape.value(weights).shape() != decision.weights.shape() {
        return Err(Error::shape(
            "balance_loss",
            tape.value(weights).shape(),
            decision.weights.shape(),
        ));
    }
    let f = Tensor::raw(1, m, decision.utilization());
    let p = tape.col_mean(weights);
    let fp = tape.mul_const(p, f)?;
    let s = tape.sum(fp);
    Ok(tape.scale(s, m as f64))
}

/// Class × expert selection counts (the routing matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    pub top_k: usize,
    pub counts: Vec<Vec<usize>>,
}

impl RoutingMatrix {
    pub fn new(n_classes: usize, num_experts: usize, top_k: usize) -> Self {
        Self {
            top_k,
            counts: vec![vec![0; num_experts]; n_classes],
        }
    }

    /// Adds every query whose label is `Some(class)`.
    pub fn accumulate(&mut self, decision: &RoutingDecision, labels: &[Option<usize>]) -> Result<()> {
        if labels.len() != decision.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} routed queries",
                labels.len(),
                decision.len()
            )));
        }
        for (sel, label) in decision.indices.iter().zip(labels) {
            let Some(c) = *label else { continue };
            let row = self
                .counts
                .get_mut(c)
                .ok_or_else(|| Error::invalid(format!("class {c} out of range")))?;
            for &i in sel {
                row[i] += 1;
            }
        }
        Ok(())
    }

    pub fn class_queries(&self, class: usize) -> usize {
        self.counts[class].iter().sum::<usize>() / self.top_k.max(1)
    }

    /// Share of a class's queries that select its most-used expert; `None`
    /// for classes never seen. Equals max-entry / row-sum when `top_k = 1`.
    pub fn purity(&self, class: usize) -> Option<f64> {
        let n = self.class_queries(class);
        (n > 0).then(|| *self.counts[class].iter().max().unwrap_or(&0) as f64 / n as f64)
    }

    pub fn mean_purity(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.counts.len()).filter_map(|c| self.purity(c)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Routing matrix of a single decision against per-query class labels.
pub fn routing_matrix(decision: &RoutingDecision, labels: &[usize], n_classes: usize) -> Result<RoutingMatrix> {
    let mut m = RoutingMatrix::new(n_classes, decision.num_experts(), decision.top_k());
    let labels: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
    m.accumulate(decision, &labels)?;
    Ok(m)
}

#[cfg(test)]
mod tests;
