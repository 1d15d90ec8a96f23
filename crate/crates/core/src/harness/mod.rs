//! Experiment driver: builds the toy detector, trains it on a generated
//! corpus, evaluates on a disjoint one and assembles the report.

pub mod ablation;
pub mod checks;
pub mod config;
pub mod eval;
pub mod model;
pub mod report;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablation::{ablation_run, parse_toggles, AblationReport, RowSpec, Summary, Toggle};
pub use checks::{run_grad_checks, GradCheckOutcome};
pub use config::{ExperimentConfig, CFG_VERSION};
pub use eval::{evaluate, Evaluation, Metrics};
pub use model::{Model, Prediction, Predictor, Trained};
pub use report::{emit_ablation, emit_reports, RunReport};
pub use train::{train, training_step, StepLosses};

use crate::error::Result;
use crate::numkernel::ParamSet;
use crate::scenegen::SceneGenerator;

/// Generates both corpora, trains, evaluates and returns the full report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let generator = SceneGenerator::new(&cfg.scene)?;
    let train_corpus = generator.corpus(cfg.train.train_scenes, cfg.seeds.train_base())?;
    let eval_corpus = generator.corpus(cfg.train.eval_scenes, cfg.seeds.eval_base())?;
    let mut vocab = generator.vocabulary().clone();
    vocab.set_frequency_groups(&train_corpus.stats.frequency_groups)?;
    let language = &generator.language().matrix;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.model);
    let mut params = ParamSet::new();
    let model = Model::new(cfg, vocab.len(), &mut params, &mut rng)?;
    let trace = train(&model, &mut params, &train_corpus.scenes, language, cfg)?;
    let evaluation = evaluate(
        &Trained { model: &model, params: &params },
        &eval_corpus.scenes,
        language,
        &vocab,
        &cfg.matching,
    )?;
    Ok(RunReport {
        config: cfg.clone(),
        config_sha256: report::config_digest(cfg),
        class_names: vocab.names().iter().map(|s| s.to_string()).collect(),
        param_count: params.scalar_count(),
        moe_layers: (0..cfg.model.layers).filter(|&l| cfg.model.layer_uses_moe(l)).collect(),
        num_experts: cfg.model.num_experts,
        embedding_dim: cfg.scene.embeddings.dim,
        train_stats: train_corpus.stats,
        final_loss: trace.last().copied(),
        metrics: evaluation.metrics,
        trace,
        embeddings: evaluation.embeddings,
    })
}

#[cfg(test)]
mod tests;
