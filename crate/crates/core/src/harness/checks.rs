//! Gradient verification over every tape op plus the composites the
//! training objective is built from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{default_rig, flatten_extrinsics};
use crate::lmoe::{balance_loss, LMoEConfig, LMoELayer};
use crate::numkernel::catalog::{differentiable_ops, LossFn, OpCase};
use crate::numkernel::{check_gradient, l2_normalize_rows, GradCheckConfig, ParamSet, Tensor};
use crate::objectives::{
    camera_align, contrastive_loss, kd_loss, student_similarity, teacher_similarity, view_weights, ContrastConfig,
    DistillConfig, DistillParams, MatchedSample,
};

fn unit_rows(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    l2_normalize_rows(&Tensor::randn(r, c, 1.0, rng)).values
}

fn lmoe_balance(seed: u64) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = LMoEConfig {
        num_experts: 4,
        top_k: 2,
        query_dim: 6,
        lang_dim: 5,
        routed_hidden: 7,
        shared_hidden: 9,
        router_init: 0.5,
        ..LMoEConfig::default()
    };
    let layer = LMoELayer::new(&cfg, 5, &mut ps, &mut rng, "moe").expect("valid config");
    let q = Tensor::randn(8, 6, 1.0, &mut rng);
    let lang = unit_rows(5, 5, &mut rng);
    let w = Tensor::randn(8, 6, 1.0, &mut rng);
    let loss: LossFn = Box::new(move |tape, ps| {
        let qv = tape.constant(q.clone());
        let lv = tape.constant(lang.clone());
        let out = layer.forward(tape, ps, qv, lv)?;
        let weighted = tape.mul_const(out.output, w.clone())?;
        let task = tape.sum(weighted);
        let bal = balance_loss(tape, out.weights, &out.decision)?;
        tape.add(task, bal)
    });
    (ps, loss)
}

fn camera_align_kd(seed: u64) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let (k, dq, dl, n) = (5, 6, 4, 3);
    let dp = DistillParams::new(&mut ps, dq, dl, &mut rng);
    let qbar = ps.add("qbar", Tensor::randn(k, dq, 1.0, &mut rng));
    let ext = flatten_extrinsics(&default_rig()).expect("default rig is valid");
    let lang = unit_rows(n, dl, &mut rng);
    let visual = unit_rows(4, dl, &mut rng);
    let teacher = teacher_similarity(&visual, &lang).expect("shapes agree");
    let samples = vec![
        MatchedSample { gt: 0, query: 1, camera: 0 },
        MatchedSample { gt: 0, query: 1, camera: 1 },
        MatchedSample { gt: 1, query: 3, camera: 4 },
        MatchedSample { gt: 2, query: 0, camera: 5 },
    ];
    let weights = view_weights(&samples);
    let cfg = DistillConfig { temperature: 0.7, ..DistillConfig::default() };
    let loss: LossFn = Box::new(move |tape, ps| {
        let q = tape.param(ps, qbar);
        let e = tape.constant(ext.clone());
        let l = tape.constant(lang.clone());
        let aligned = camera_align(tape, ps, &dp, q, e)?;
        let s = student_similarity(tape, &aligned, &samples, l)?;
        Ok(kd_loss(tape, Some(s), &teacher, Some(&weights), &cfg)?.loss)
    });
    (ps, loss)
}

fn contrastive(seed: u64) -> (ParamSet, LossFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let (k, d, n) = (6, 5, 4);
    let projected = ps.add("projected", Tensor::randn(k, d, 1.0, &mut rng));
    let language = ps.add("language", unit_rows(n, d, &mut rng));
    let mut targets = Tensor::zeros(k, n);
    for q in 0..k / 2 {
        targets.set(q, (q + seed as usize) % n, 1.0);
    }
    let cfg = ContrastConfig { logit_scale: 3.0, ..ContrastConfig::default() };
    let loss: LossFn = Box::new(move |tape, ps| {
        let p = tape.param(ps, projected);
        let l = tape.param(ps, language);
        contrastive_loss(tape, p, l, &targets, &cfg)
    });
    (ps, loss)
}

pub fn composite_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "lmoe_forward+balance", build: lmoe_balance },
        OpCase { name: "camera_align->kd_loss", build: camera_align_kd },
        OpCase { name: "contrastive_loss", build: contrastive },
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs every op case and composite on seeds `0..seeds`.
pub fn run_grad_checks(seeds: u64) -> Result<Vec<GradCheckOutcome>> {
    let mut out = Vec::new();
    for case in differentiable_ops().into_iter().chain(composite_cases()) {
        for seed in 0..seeds {
            let (mut ps, loss) = (case.build)(seed);
            let report = check_gradient(&mut ps, loss, GradCheckConfig::default())?;
            out.push(GradCheckOutcome {
                name: case.name.to_string(),
                seed,
                max_rel_error: report.max_rel_error(),
                passed: report.passed(),
            });
        }
    }
    Ok(out)
}
