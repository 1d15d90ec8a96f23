use std::collections::BTreeMap;

use serde::Serialize;

use super::model::{Prediction, Predictor};
use crate::error::{Error, Result};
use crate::lmoe::RoutingMatrix;
use crate::matching::{assignment_solvers, build_cost, MatchingConfig};
use crate::numkernel::{sigmoid, Tensor};
use crate::scenegen::Scene;
use crate::semantics::{ClassVocabulary, FrequencyGroup};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub group: FrequencyGroup,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRouting {
    pub layer: usize,
    pub matrix: RoutingMatrix,
    pub mean_purity: Option<f64>,
    /// `F_i` over all evaluated queries.
    pub utilization: Vec<f64>,
    /// `P_i` over all evaluated queries.
    pub mean_probability: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub scenes: usize,
    pub matched: usize,
    pub overall_accuracy: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub groups: BTreeMap<String, GroupMetrics>,
    /// Mean L1 distance in meters between matched predicted and true centers.
    pub center_l1: Option<f64>,
    pub routing: Vec<LayerRouting>,
}

/// Final-layer `Q̂` of one matched query.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub class_id: usize,
    pub coords: Vec<f64>,
}

pub struct Evaluation {
    pub metrics: Metrics,
    pub embeddings: Vec<EmbeddingRow>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Accumulator {
    n_classes: usize,
    count: Vec<usize>,
    correct: Vec<usize>,
    center_sum: f64,
    matched: usize,
    routing: Vec<Option<(RoutingMatrix, Vec<f64>, Vec<f64>, usize)>>,
    embeddings: Vec<EmbeddingRow>,
}

impl Accumulator {
    fn add(&mut self, scene: &Scene, pred: &Prediction, matching: &MatchingConfig) -> Result<()> {
        let k = scene.num_queries();
        if pred.logits.shape() != [k, self.n_classes] || pred.centers.shape() != [k, 3] {
            return Err(Error::shape("evaluate", pred.logits.shape(), &[k, self.n_classes]));
        }
        let probs = pred.logits.map(sigmoid);
        let gt_classes = scene.gt_classes();
        let cost = build_cost(&probs, &pred.centers, &gt_classes, &scene.gt_centers(), matching)?;
        let assignment = assignment_solvers().get(&matching.solver)?.solve(&cost)?;
        let mut labels = vec![None; k];
        for &(q, g) in &assignment.pairs {
            let truth = gt_classes[g];
            labels[q] = Some(truth);
            self.count[truth] += 1;
            if argmax(pred.logits.row(q)) == truth {
                self.correct[truth] += 1;
            }
            let c = scene.objects[g].bbox.center;
            self.center_sum += pred.centers.row(q).iter().zip(c).map(|(p, t)| (p - t).abs()).sum::<f64>();
            self.matched += 1;
            self.embeddings.push(EmbeddingRow {
                class_id: truth,
                coords: pred.embedding.row(q).to_vec(),
            });
        }
        if self.routing.is_empty() {
            self.routing = vec![None; pred.routing.len()];
        }
        if self.routing.len() != pred.routing.len() {
            return Err(Error::invalid("layer count changed between predictions"));
        }
        for (slot, decision) in self.routing.iter_mut().zip(&pred.routing) {
            let Some(d) = decision else { continue };
            let (m, util, prob, rows) =
                slot.get_or_insert_with(|| (RoutingMatrix::new(self.n_classes, d.num_experts(), d.top_k()), vec![0.0; d.num_experts()], vec![0.0; d.num_experts()], 0));
            m.accumulate(d, &labels)?;
            let n = d.len() as f64;
            for (acc, v) in util.iter_mut().zip(d.utilization()) {
                *acc += v * n;
            }
            for (acc, v) in prob.iter_mut().zip(d.mean_probability()) {
                *acc += v * n;
            }
            *rows += d.len();
        }
        Ok(())
    }
}

/// Matches each scene's predictions to ground truth and aggregates accuracy,
/// center error and routing statistics. Frequency groups come from `vocab`.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    scenes: &[Scene],
    language: &Tensor,
    vocab: &ClassVocabulary,
    matching: &MatchingConfig,
) -> Result<Evaluation> {
    let n = vocab.len();
    let mut acc = Accumulator {
        n_classes: n,
        count: vec![0; n],
        correct: vec![0; n],
        center_sum: 0.0,
        matched: 0,
        routing: Vec::new(),
        embeddings: Vec::new(),
    };
    for scene in scenes {
        let pred = predictor.predict(scene, language)?;
        acc.add(scene, &pred, matching)?;
    }
    let per_class: Vec<ClassMetrics> = (0..n)
        .map(|c| ClassMetrics {
            name: vocab.name(c).to_string(),
            group: vocab.frequency_group(c),
            count: acc.count[c],
            correct: acc.correct[c],
            accuracy: ratio(acc.correct[c], acc.count[c]),
        })
        .collect();
    let groups = FrequencyGroup::ALL
        .iter()
        .map(|&g| {
            let (count, correct) = per_class
                .iter()
                .filter(|c| c.group == g)
                .fold((0, 0), |(n, k), c| (n + c.count, k + c.correct));
            (
                g.as_str().to_string(),
                GroupMetrics {
                    count,
                    correct,
                    accuracy: ratio(correct, count),
                },
            )
        })
        .collect();
    let routing = acc
        .routing
        .into_iter()
        .enumerate()
        .filter_map(|(layer, r)| {
            r.map(|(matrix, util, prob, rows)| {
                let norm = |v: Vec<f64>| v.into_iter().map(|x| x / rows.max(1) as f64).collect();
                LayerRouting {
                    layer,
                    mean_purity: matrix.mean_purity(),
                    matrix,
                    utilization: norm(util),
                    mean_probability: norm(prob),
                }
            })
        })
        .collect();
    let total_correct: usize = acc.correct.iter().sum();
    Ok(Evaluation {
        metrics: Metrics {
            scenes: scenes.len(),
            matched: acc.matched,
            overall_accuracy: ratio(total_correct, acc.matched),
            per_class,
            groups,
            center_l1: (acc.matched > 0).then(|| acc.center_sum / acc.matched as f64),
            routing,
        },
        embeddings: acc.embeddings,
    })
}
