//! Router input strategies. The router itself is always one affine map to
//! `M` logits; strategies differ only in what they feed it.

use std::sync::Arc;

use crate::error::Result;
use crate::numkernel::{Tape, Var};
use crate::registry::Registry;

pub const LANGUAGE_GUIDED: &str = "language_guided";
pub const FEATURE_ROUTED: &str = "feature_routed";

pub trait RoutingStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Width of the router input given query dim `D` and class count `n`.
    fn input_width(&self, query_dim: usize, n_classes: usize) -> usize;

    /// Builds the router input from raw queries `Q (k×D)`, projected queries
    /// `Q̂ (k×d)` and the language matrix `P (n×d)`.
    fn router_input(&self, tape: &mut Tape, queries: Var, projected: Var, language: Var) -> Result<Var>;
}

/// Routes on `S = sim(Q̂, P)`: each query's cosine similarity to every class name.
pub struct LanguageGuided;

impl RoutingStrategy for LanguageGuided {
    fn name(&self) -> &'static str {
        LANGUAGE_GUIDED
    }

    fn input_width(&self, _query_dim: usize, n_classes: usize) -> usize {
        n_classes
    }

    fn router_input(&self, tape: &mut Tape, _queries: Var, projected: Var, language: Var) -> Result<Var> {
        tape.cosine_similarity(projected, language)
    }
}

/// Routes on the raw query features, as a conventional MoE gate does.
pub struct FeatureRouted;

impl RoutingStrategy for FeatureRouted {
    fn name(&self) -> &'static str {
        FEATURE_ROUTED
    }

    fn input_width(&self, query_dim: usize, _n_classes: usize) -> usize {
        query_dim
    }

    fn router_input(&self, _tape: &mut Tape, queries: Var, _projected: Var, _language: Var) -> Result<Var> {
        Ok(queries)
    }
}

pub fn routing_strategies() -> Registry<dyn RoutingStrategy> {
    let mut reg: Registry<dyn RoutingStrategy> = Registry::new("routing strategy");
    reg.register(LANGUAGE_GUIDED, Arc::new(LanguageGuided));
    reg.register(FEATURE_ROUTED, Arc::new(FeatureRouted));
    reg
}
