use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::model::Model;
use crate::error::Result;
use crate::geometry::{flatten_extrinsics, visible_crops};
use crate::lmoe::balance_loss;
use crate::matching::{assignment_solvers, build_cost, target_matrix, Assignment};
use crate::numkernel::{sigmoid, Adam, ParamSet, Tape, Tensor, Var};
use crate::objectives::{
    camera_align, contrastive_loss, kd_loss, student_similarity, teacher_similarity, view_weights, weighted_total,
    MatchedSample,
};
use crate::scenegen::Scene;

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub cls: f64,
    pub center: f64,
    pub contrast: f64,
    pub kd: f64,
    pub balance: f64,
    /// The batch had no matched crop samples, so `kd` is a constant zero.
    pub kd_empty: bool,
}

/// Row-stacked observations of several scenes.
pub struct Batch<'a> {
    pub scenes: Vec<&'a Scene>,
    pub offsets: Vec<usize>,
    pub observations: Tensor,
}

impl<'a> Batch<'a> {
    pub fn new(scenes: Vec<&'a Scene>) -> Result<Self> {
        let dim = scenes.first().map_or(0, |s| s.observations.cols());
        let mut offsets = Vec::with_capacity(scenes.len());
        let mut data = Vec::new();
        let mut rows = 0;
        for s in &scenes {
            offsets.push(rows);
            rows += s.num_queries();
            data.extend_from_slice(s.observations.data());
        }
        Ok(Self {
            observations: Tensor::matrix(rows, dim, data)?,
            scenes,
            offsets,
        })
    }

    pub fn rows(&self) -> usize {
        self.observations.rows()
    }
}

/// Hungarian (or configured solver) assignment per scene from current predictions.
pub fn match_batch(logits: &Tensor, centers_scaled: &Tensor, scale: f64, batch: &Batch<'_>, cfg: &ExperimentConfig) -> Result<Vec<Assignment>> {
    let solver = assignment_solvers().get(&cfg.matching.solver)?;
    batch
        .scenes
        .iter()
        .zip(&batch.offsets)
        .map(|(scene, &off)| {
            let k = scene.num_queries();
            let n = logits.cols();
            let probs: Vec<f64> = (off..off + k).flat_map(|r| logits.row(r).iter().map(|&v| sigmoid(v))).collect();
            let centers: Vec<f64> = (off..off + k).flat_map(|r| centers_scaled.row(r).iter().map(|&v| v * scale)).collect();
            let cost = build_cost(
                &Tensor::matrix(k, n, probs)?,
                &Tensor::matrix(k, 3, centers)?,
                &scene.gt_classes(),
                &scene.gt_centers(),
                &cfg.matching,
            )?;
            solver.solve(&cost)
        })
        .collect()
}

/// The step's scalar loss and its parts, as tape handles.
pub struct LossGraph {
    pub total: Var,
    pub cls: Var,
    pub center: Var,
    pub contrast: Option<Var>,
    pub kd: Option<Var>,
    pub kd_empty: bool,
    pub balance: Option<Var>,
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / vars.len() as f64)))
}

/// Builds the full training objective for a batch under fixed assignments.
pub fn build_loss(
    tape: &mut Tape,
    model: &Model,
    params: &ParamSet,
    batch: &Batch<'_>,
    language: &Tensor,
    assignments: &[Assignment],
    cfg: &ExperimentConfig,
) -> Result<LossGraph> {
    let losses = &cfg.losses;
    let q = tape.constant(batch.observations.clone());
    let lang = tape.constant(language.clone());
    let fp = model.forward(tape, params, q, lang)?;
    let (k, n) = (batch.rows(), model.n_classes);

    let mut targets = Tensor::zeros(k, n);
    let mut matched_rows = Vec::new();
    let mut matched_centers = Vec::new();
    let mut samples = Vec::new();
    let mut teachers = Vec::new();
    let mut extrinsics = Vec::new();
    let mut gt_base = 0;
    for ((scene, &off), assignment) in batch.scenes.iter().zip(&batch.offsets).zip(assignments) {
        let t = target_matrix(assignment, &scene.gt_classes(), scene.num_queries(), n)?;
        for r in 0..scene.num_queries() {
            targets.row_mut(off + r).copy_from_slice(t.row(r));
        }
        let cam_base = extrinsics.len() / 16;
        extrinsics.extend_from_slice(flatten_extrinsics(&scene.rig)?.data());
        for &(qi, g) in &assignment.pairs {
            let obj = &scene.objects[g];
            matched_rows.push(off + qi);
            matched_centers.extend(obj.bbox.center.map(|c| c / model.center_scale));
            for crop in visible_crops(&obj.bbox, &scene.rig) {
                samples.push(MatchedSample {
                    gt: gt_base + g,
                    query: off + qi,
                    camera: cam_base + crop.camera,
                });
                teachers.extend_from_slice(&obj.teacher);
            }
        }
        gt_base += scene.objects.len();
    }

    let focal = tape.sigmoid_focal(fp.logits, targets.clone(), losses.contrast.alpha, losses.contrast.gamma)?;
    let cls = tape.mean(focal);

    let center = if matched_rows.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let pred = tape.gather_rows(fp.centers, &matched_rows)?;
        let gt = Tensor::matrix(matched_rows.len(), 3, matched_centers)?;
        let gt = gt.map(|v| -v);
        let diff = tape.add_const(pred, &gt)?;
        let abs = tape.abs(diff);
        let total = tape.sum(abs);
        tape.scale(total, 1.0 / matched_rows.len() as f64)
    };

    let contrast = if losses.align {
        let per_layer = fp
            .projected
            .iter()
            .map(|&p| contrastive_loss(tape, p, lang, &targets, &losses.contrast))
            .collect::<Result<Vec<_>>>()?;
        mean_of(tape, &per_layer)?
    } else {
        None
    };

    let (kd, kd_empty) = if losses.distill {
        let e = tape.constant(Tensor::matrix(extrinsics.len() / 16, 16, extrinsics)?);
        let aligned = camera_align(tape, params, &model.distill, fp.qbar, e)?;
        let d = language.cols();
        let (student, teacher) = if samples.is_empty() {
            (None, Tensor::zeros(0, n))
        } else {
            let visual = Tensor::matrix(samples.len(), d, teachers)?;
            (
                Some(student_similarity(tape, &aligned, &samples, lang)?),
                teacher_similarity(&visual, language)?,
            )
        };
        let w = view_weights(&samples);
        let out = kd_loss(tape, student, &teacher, Some(&w), &losses.kd)?;
        (Some(out.loss), out.empty)
    } else {
        (None, false)
    };

    let balance = if losses.balance {
        let per_layer = fp
            .routing
            .iter()
            .flatten()
            .map(|(w, d)| balance_loss(tape, *w, d))
            .collect::<Result<Vec<_>>>()?;
        mean_of(tape, &per_layer)?
    } else {
        None
    };

    let aux = weighted_total(tape, contrast, kd, balance, &losses.weights)?;
    let c1 = tape.scale(cls, losses.cls_weight);
    let c2 = tape.scale(center, losses.center_weight);
    let task = tape.add(c1, c2)?;
    let total = tape.add(task, aux)?;
    Ok(LossGraph {
        total,
        cls,
        center,
        contrast,
        kd,
        kd_empty,
        balance,
    })
}

/// Assignments from a forward pass at the current parameters.
pub fn current_assignments(model: &Model, params: &ParamSet, batch: &Batch<'_>, language: &Tensor, cfg: &ExperimentConfig) -> Result<Vec<Assignment>> {
    let mut tape = Tape::new();
    let q = tape.constant(batch.observations.clone());
    let l = tape.constant(language.clone());
    let fp = model.forward(&mut tape, params, q, l)?;
    match_batch(tape.value(fp.logits), tape.value(fp.centers), model.center_scale, batch, cfg)
}

/// Match, build the objective, backpropagate and take one optimizer step.
pub fn training_step(
    model: &Model,
    params: &mut ParamSet,
    opt: &mut Adam,
    batch: &Batch<'_>,
    language: &Tensor,
    cfg: &ExperimentConfig,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let q = tape.constant(batch.observations.clone());
    let l = tape.constant(language.clone());
    let fp = model.forward(&mut tape, params, q, l)?;
    let assignments = match_batch(tape.value(fp.logits), tape.value(fp.centers), model.center_scale, batch, cfg)?;
    // The graph is rebuilt on a fresh tape so the matched forward and the
    // differentiated forward are the same computation.
    let mut tape = Tape::new();
    let g = build_loss(&mut tape, model, params, batch, language, &assignments, cfg)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let losses = StepLosses {
        total: tape.value(g.total).item(),
        cls: tape.value(g.cls).item(),
        center: tape.value(g.center).item(),
        contrast: val(g.contrast),
        kd: val(g.kd),
        balance: val(g.balance),
        kd_empty: g.kd_empty,
    };
    tape.backward_into(g.total, params)?;
    opt.step(params);
    Ok(losses)
}

/// Runs `cfg.train.steps` optimizer steps on batches drawn uniformly with
/// replacement from `scenes`; returns the per-step loss trace.
pub fn train(model: &Model, params: &mut ParamSet, scenes: &[Scene], language: &Tensor, cfg: &ExperimentConfig) -> Result<Vec<StepLosses>> {
    if scenes.is_empty() {
        return Err(crate::error::Error::invalid("training corpus is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    rng.set_stream(BATCH_STREAM);
    let mut opt = Adam::new(cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.train.steps);
    for _ in 0..cfg.train.steps {
        let picked = (0..cfg.train.batch_size).map(|_| &scenes[rng.random_range(0..scenes.len())]).collect();
        let batch = Batch::new(picked)?;
        let losses = training_step(model, params, &mut opt, &batch, language, cfg)?;
        if !losses.total.is_finite() {
            return Err(crate::error::Error::NonFinite("training loss"));
        }
        trace.push(losses);
    }
    Ok(trace)
}

const BATCH_STREAM: u64 = 7;
