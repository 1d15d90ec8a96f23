//! Distillation, alignment and balance losses and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numkernel::{cosine_similarity, row_softmax, ParamSet, Tape, Tensor, Var};

/// Which softened distribution is the KL reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`
    StudentTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            direction: KlDirection::TeacherStudent,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// The two affine maps whose outputs are multiplied to form camera-aware queries.
#[derive(Clone, Debug)]
pub struct DistillParams {
    pub query_align: Linear,
    pub extrinsic_embed: Linear,
}

impl DistillParams {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, query_dim: usize, lang_dim: usize, rng: &mut R) -> Self {
        Self {
            query_align: Linear::gaussian(params, "distill.query_align", query_dim, lang_dim, 1.0, rng),
            extrinsic_embed: Linear::gaussian(params, "distill.extrinsic_embed", 16, lang_dim, 1.0, rng),
        }
    }
}

/// Both factors of the broadcast product, kept separate so individual
/// `(camera, query)` rows can be formed without materializing `C×k×d`.
#[derive(Clone, Copy, Debug)]
pub struct CameraAligned {
    pub queries: Var,
    pub cameras: Var,
}

pub fn camera_align(tape: &mut Tape, params: &ParamSet, dp: &DistillParams, qbar: Var, extrinsics: Var) -> Result<CameraAligned> {
    if tape.value(extrinsics).cols() != 16 {
        return Err(Error::shape("camera_align", tape.value(extrinsics).shape(), &[0, 16]));
    }
    Ok(CameraAligned {
        queries: dp.query_align.forward(tape, params, qbar)?,
        cameras: dp.extrinsic_embed.forward(tape, params, extrinsics)?,
    })
}

impl CameraAligned {
    /// Full `Q_c` as one `k×d` block per camera.
    pub fn expand(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        let c = tape.value(self.cameras).rows();
        (0..c)
            .map(|cam| {
                let row = tape.gather_rows(self.cameras, &[cam])?;
                tape.mul_row(self.queries, row)
            })
            .collect()
    }

    /// Rows `Q_c[c, q, :]` for the given `(query, camera)` pairs.
    pub fn rows(&self, tape: &mut Tape, samples: &[MatchedSample]) -> Result<Var> {
        let qs: Vec<usize> = samples.iter().map(|s| s.query).collect();
        let cs: Vec<usize> = samples.iter().map(|s| s.camera).collect();
        let a = tape.gather_rows(self.queries, &qs)?;
        let b = tape.gather_rows(self.cameras, &cs)?;
        tape.mul(a, b)
    }
}

/// One matched object seen by one camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchedSample {
    pub gt: usize,
    pub query: usize,
    pub camera: usize,
}

/// Per-sample weights `1 / (views_g · G)`: views of an object are averaged,
/// then objects are averaged.
pub fn view_weights(samples: &[MatchedSample]) -> Vec<f64> {
    let mut views = std::collections::BTreeMap::<usize, usize>::new();
    for s in samples {
        *views.entry(s.gt).or_default() += 1;
    }
    let g = views.len() as f64;
    samples.iter().map(|s| 1.0 / (views[&s.gt] as f64 * g)).collect()
}

/// `sim(Q_c rows, P)` for each sample, `G×n`.
pub fn student_similarity(
    tape: &mut Tape,
    aligned: &CameraAligned,
    samples: &[MatchedSample],
    language: Var,
) -> Result<Var> {
    let rows = aligned.rows(tape, samples)?;
    tape.cosine_similarity(rows, language)
}

/// `sim(visual, P)`; plain tensors, so never differentiated.
pub fn teacher_similarity(visual: &Tensor, language: &Tensor) -> Result<Tensor> {
    cosine_similarity(visual, language)
}

#[derive(Clone, Copy, Debug)]
pub struct KdOutput {
    pub loss: Var,
    /// True when the batch had no matched crops and the loss is a constant zero.
    pub empty: bool,
}

/// Weighted sum of per-sample `KL` between temperature-softened similarity rows.
/// `weights` defaults to a plain mean.
pub fn kd_loss(
    tape: &mut Tape,
    student: Option<Var>,
    teacher: &Tensor,
    weights: Option<&[f64]>,
    cfg: &DistillConfig,
) -> Result<KdOutput> {
    cfg.validate()?;
    let Some(student) = student.filter(|&s| tape.value(s).rows() > 0) else {
        return Ok(KdOutput {
            loss: tape.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    };
    let g = tape.value(student).rows();
    if tape.value(student).shape() != teacher.shape() {
        return Err(Error::shape("kd_loss", tape.value(student).shape(), teacher.shape()));
    }
    let w = match weights {
        Some(w) if w.len() != g => return Err(Error::shape("kd_loss weights", &[w.len()], &[g])),
        Some(w) => w.to_vec(),
        None => vec![1.0 / g as f64; g],
    };
    let inv_t = 1.0 / cfg.temperature;
    let s = tape.scale(student, inv_t);
    let s = tape.row_softmax(s)?;
    let t = tape.constant(row_softmax(&teacher.map(|v| v * inv_t))?);
    let kl = match cfg.direction {
        KlDirection::TeacherStudent => tape.kl_rows(t, s)?,
        KlDirection::StudentTeacher => tape.kl_rows(s, t)?,
    };
    let weighted = tape.mul_const(kl, Tensor::matrix(g, 1, w)?)?;
    Ok(KdOutput {
        loss: tape.sum(weighted),
        empty: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Multiplier on the cosine logits before the sigmoid.
    pub logit_scale: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            logit_scale: 1.0,
        }
    }
}

/// Mean sigmoid-focal loss of `scale · sim(Q̂, P)` against the target matrix.
pub fn contrastive_loss(
    tape: &mut Tape,
    projected: Var,
    language: Var,
    targets: &Tensor,
    cfg: &ContrastConfig,
) -> Result<Var> {
    let sim = tape.cosine_similarity(projected, language)?;
    let logits = tape.scale(sim, cfg.logit_scale);
    let focal = tape.sigmoid_focal(logits, targets.clone(), cfg.alpha, cfg.gamma)?;
    Ok(tape.mean(focal))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub contrast: f64,
    pub kd: f64,
    pub balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrast: 1.0,
            kd: 0.5,
            balance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossBundle {
    pub contrast: f64,
    pub kd: f64,
    pub balance: f64,
    pub weights: LossWeights,
}

pub fn total_loss(b: &LossBundle) -> f64 {
    b.weights.contrast * b.contrast + b.weights.kd * b.kd + b.weights.balance * b.balance
}

/// Tape version of [`total_loss`]; absent components count as zero.
pub fn weighted_total(
    tape: &mut Tape,
    contrast: Option<Var>,
    kd: Option<Var>,
    balance: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for (term, weight) in [(contrast, w.contrast), (kd, w.kd), (balance, w.balance)] {
        if let Some(v) = term {
            let scaled = tape.scale(v, weight);
            acc = tape.add(acc, scaled)?;
        }
    }
    Ok(acc)
}
