use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lmoe::{RoutingDecision, FEATURE_ROUTED, LANGUAGE_GUIDED};
use crate::matching::Assignment;
use crate::numkernel::{check_gradient, cosine_similarity, matmul, GradCheckConfig, Tape, Tensor};
use crate::scenegen::{Scene, SceneConfig};
use crate::semantics::{EmbeddingSource, FrequencyGroup};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene = SceneConfig {
        obs_dim: 12,
        embeddings: EmbeddingSource { dim: 8, ..EmbeddingSource::default() },
        distractors: 2,
        objects_min: 2,
        objects_max: 4,
        ..SceneConfig::default()
    };
    cfg.model.layers = 2;
    cfg.model.routed_hidden = 8;
    cfg.model.shared_hidden = 8;
    cfg.model.ffn_hidden = 16;
    cfg.train.steps = 5;
    cfg.train.batch_size = 2;
    cfg.train.train_scenes = 10;
    cfg.train.eval_scenes = 6;
    cfg
}

fn build(cfg: &ExperimentConfig) -> (Model, ParamSet, SceneGenerator) {
    let generator = SceneGenerator::new(&cfg.scene).unwrap();
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.model);
    let model = Model::new(cfg, generator.vocabulary().len(), &mut params, &mut rng).unwrap();
    (model, params, generator)
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn affine(params: &ParamSet, l: &crate::nn::Linear, x: &Tensor) -> Tensor {
    let y = matmul(x, params.value(l.weight)).unwrap();
    let b = params.value(l.bias);
    let mut out = y.clone();
    for r in 0..out.rows() {
        for (v, bb) in out.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bb;
        }
    }
    out
}

#[test]
fn ffn_only_model_matches_reference_forward() {
    let mut cfg = tiny();
    cfg.model.moe = false;
    let (model, params, generator) = build(&cfg);
    assert_eq!(model.moe_layer_count(), 0);
    let scene = generator.generate(3).unwrap();
    let lang = &generator.language().matrix;
    let pred = Trained { model: &model, params: &params }.predict(&scene, lang).unwrap();
    assert!(pred.routing.iter().all(Option::is_none));

    let mut x = scene.observations.clone();
    for layer in &model.layers {
        let t = relu(&affine(&params, &layer.transform, &x));
        let x1 = x.zip_map(&t, |a, b| a + b);
        let model::Block::Ffn { ffn, .. } = &layer.block else { panic!("expected ffn block") };
        assert_eq!(ffn.hidden(), 16);
        let y = affine(&params, &ffn.down, &relu(&affine(&params, &ffn.up, &x1)));
        x = x1.zip_map(&y, |a, b| a + b);
    }
    let logits = cosine_similarity(&affine(&params, &model.cls_proj, &x), lang)
        .unwrap()
        .map(|v| v * model.logit_scale);
    assert!(logits.zip_map(&pred.logits, |a, b| (a - b).abs()).max_abs() < 1e-12);
    let centers = affine(&params, &model.center_head, &x).map(|v| v * model.center_scale);
    assert!(centers.zip_map(&pred.centers, |a, b| (a - b).abs()).max_abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let (model, params, generator) = build(&tiny());
    let scene = generator.generate(1).unwrap();
    let lang = &generator.language().matrix;
    let p = Trained { model: &model, params: &params };
    let a = p.predict(&scene, lang).unwrap();
    let b = p.predict(&scene, lang).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.logits), bits(&b.logits));
    assert_eq!(a.routing, b.routing);
    assert_eq!(model.moe_layer_count(), 2);
}

#[test]
fn zero_weights_leave_only_the_center_term() {
    let mut cfg = tiny();
    cfg.losses.weights = crate::objectives::LossWeights { contrast: 0.0, kd: 0.0, balance: 0.0 };
    cfg.losses.cls_weight = 0.0;
    cfg.optimizer.lr = 1e-2;
    let (model, mut params, generator) = build(&cfg);
    let lang = generator.language().matrix.clone();
    let corpus = generator.corpus(4, 0).unwrap();
    let batch = train::Batch::new(corpus.scenes.iter().collect()).unwrap();
    let assignments = train::current_assignments(&model, &params, &batch, &lang, &cfg).unwrap();

    let mut tape = Tape::new();
    let g = train::build_loss(&mut tape, &model, &params, &batch, &lang, &assignments, &cfg).unwrap();
    assert!(tape.value(g.kd.unwrap()).item() > 0.0);
    let (mut total, mut center) = (params.clone(), params.clone());
    tape.backward_into(g.total, &mut total).unwrap();
    tape.backward_into(g.center, &mut center).unwrap();
    for id in params.ids() {
        assert_eq!(total.grad(id), center.grad(id), "{}", params.get(id).name);
    }

    let before = params.clone();
    let mut opt = crate::numkernel::Adam::new(cfg.optimizer);
    training_step(&model, &mut params, &mut opt, &batch, &lang, &cfg).unwrap();
    for (a, b) in before.iter().zip(params.iter()) {
        let frozen = a.name.starts_with("head.cls_proj") || a.name.starts_with("distill") || a.name.ends_with(".proj.weight");
        if a.name.starts_with("head.center") {
            assert_ne!(a.value, b.value);
        }
        if frozen && !a.name.contains("moe") {
            assert_eq!(a.value, b.value, "{} moved", a.name);
        }
    }
}

#[test]
fn micro_instance_total_loss_gradient() {
    let mut cfg = tiny();
    cfg.scene.classes = Some(crate::semantics::ClassVocabulary::two_group().entries()[..2].to_vec());
    cfg.scene.confusion = vec![];
    cfg.scene.objects_min = 2;
    cfg.scene.objects_max = 2;
    cfg.scene.distractors = 1;
    cfg.model.layers = 1;
    cfg.model.num_experts = 2;
    cfg.model.top_k = 1;
    cfg.model.router_init = 0.5;
    let (model, mut params, generator) = build(&cfg);
    let scene = generator.generate(0).unwrap();
    assert_eq!(scene.num_queries(), 3);
    let lang = generator.language().matrix.clone();
    let batch = train::Batch::new(vec![&scene]).unwrap();
    let assignments = vec![Assignment { pairs: vec![(0, 0), (2, 1)] }];
    let report = check_gradient(
        &mut params,
        |tape: &mut Tape, ps: &ParamSet| Ok(train::build_loss(tape, &model, ps, &batch, &lang, &assignments, &cfg)?.total),
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "max rel error {}", report.max_rel_error());
}

#[test]
fn loss_decreases_on_noiseless_corpus() {
    let mut cfg = tiny();
    cfg.scene.obs_noise = 0.0;
    cfg.scene.confusion = vec![];
    cfg.scene.modes_per_class = 1;
    cfg.scene.distractors = 0;
    cfg.optimizer.lr = 1e-2;
    cfg.train.steps = 200;
    cfg.train.batch_size = 4;
    cfg.train.train_scenes = 20;
    let (model, mut params, generator) = build(&cfg);
    let corpus = generator.corpus(cfg.train.train_scenes, 0).unwrap();
    let trace = train(&model, &mut params, &corpus.scenes, &generator.language().matrix, &cfg).unwrap();
    let head: f64 = trace[..10].iter().map(|l| l.total).sum::<f64>() / 10.0;
    let tail: f64 = trace[190..].iter().map(|l| l.total).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "initial {head}, final {tail}");
}

struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, scene: &Scene, language: &Tensor) -> crate::Result<Prediction> {
        let (k, n) = (scene.num_queries(), language.rows());
        let mut logits = Tensor::full(k, n, -10.0);
        let mut centers = Tensor::full(k, 3, 500.0);
        for (q, owner) in scene.slots.iter().enumerate() {
            if let Some(o) = owner {
                let obj = &scene.objects[*o];
                logits.set(q, obj.class_id(), 10.0);
                centers.row_mut(q).copy_from_slice(&obj.bbox.center);
            }
        }
        Ok(Prediction { logits, centers, routing: vec![], embedding: Tensor::zeros(k, 2) })
    }
}

struct Random(u64);

impl Predictor for Random {
    fn predict(&self, scene: &Scene, language: &Tensor) -> crate::Result<Prediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ scene.seed);
        let (k, n) = (scene.num_queries(), language.rows());
        Ok(Prediction {
            logits: Tensor::randn(k, n, 1.0, &mut rng),
            centers: Tensor::randn(k, 3, 10.0, &mut rng),
            routing: vec![],
            embedding: Tensor::zeros(k, 2),
        })
    }
}

fn eval_setup() -> (SceneGenerator, crate::semantics::ClassVocabulary, Vec<Scene>) {
    let cfg = tiny();
    let generator = SceneGenerator::new(&cfg.scene).unwrap();
    let corpus = generator.corpus(300, 0).unwrap();
    let mut vocab = generator.vocabulary().clone();
    vocab.set_frequency_groups(&corpus.stats.frequency_groups).unwrap();
    (generator, vocab, corpus.scenes)
}

#[test]
fn oracle_and_random_evaluation() {
    let (generator, vocab, scenes) = eval_setup();
    let lang = &generator.language().matrix;
    let m = evaluate(&Oracle, &scenes, lang, &vocab, &Default::default()).unwrap().metrics;
    assert_eq!(m.overall_accuracy, Some(1.0));
    assert!(m.center_l1.unwrap() < 1e-12);
    for g in FrequencyGroup::ALL {
        assert_eq!(m.groups[g.as_str()].accuracy, Some(1.0));
    }
    let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
    assert_eq!(m.matched, objects);

    let m = evaluate(&Random(9), &scenes, lang, &vocab, &Default::default()).unwrap().metrics;
    let n = vocab.len() as f64;
    let p = 1.0 / n;
    let sigma = (p * (1.0 - p) / m.matched as f64).sqrt();
    let acc = m.overall_accuracy.unwrap();
    assert!((acc - p).abs() < 3.0 * sigma, "{acc} vs {p} ± {sigma}");
    let weighted: f64 = m
        .groups
        .values()
        .map(|g| g.accuracy.unwrap_or(0.0) * g.count as f64)
        .sum::<f64>()
        / m.matched as f64;
    assert!((weighted - acc).abs() < 1e-12);
}

#[test]
fn feature_router_never_reads_language() {
    let mut cfg = tiny();
    cfg.model.router = FEATURE_ROUTED.into();
    cfg.model.router_init = 0.5;
    let (model, params, generator) = build(&cfg);
    let scene = generator.generate(2).unwrap();
    let lang = generator.language().matrix.clone();
    let sentinel = Tensor::full(lang.rows(), lang.cols(), 1234.5);
    let p = Trained { model: &model, params: &params };
    let a: Vec<Option<RoutingDecision>> = p.predict(&scene, &lang).unwrap().routing;
    let b = p.predict(&scene, &sentinel).unwrap().routing;
    assert_eq!(a, b);

    cfg.model.router = LANGUAGE_GUIDED.into();
    let (model, params, _) = build(&cfg);
    let p = Trained { model: &model, params: &params };
    let a = p.predict(&scene, &lang).unwrap().routing;
    let b = p.predict(&scene, &Tensor::randn(lang.rows(), lang.cols(), 1.0, &mut ChaCha8Rng::seed_from_u64(4))).unwrap().routing;
    assert_ne!(a, b);
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn empty_run_reports_have_headers_only() {
    let mut cfg = tiny();
    cfg.train.steps = 0;
    cfg.train.eval_scenes = 1;
    let mut report = run_experiment(&cfg).unwrap();
    report.embeddings.clear();
    for r in &mut report.metrics.routing {
        r.matrix.counts.clear();
    }
    let dir = tempfile::tempdir().unwrap();
    let files = emit_reports(&report, dir.path()).unwrap();
    assert_eq!(files.len(), 1 + 2 + 2);
    let (h, rows) = read_csv(&dir.path().join("loss_trace.csv"));
    assert_eq!(h, report::LOSS_TRACE_HEADER);
    assert!(rows.is_empty());
    let (h, rows) = read_csv(&dir.path().join("embeddings_final.csv"));
    assert_eq!(h.len(), 1 + cfg.scene.embeddings.dim);
    assert!(rows.is_empty());
    let (h, rows) = read_csv(&dir.path().join("routing_layer0.csv"));
    assert_eq!(h, ["class", "expert_0", "expert_1", "expert_2", "expert_3"]);
    assert!(rows.is_empty());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(json["final_loss"].is_null());
}

#[test]
fn reports_parse_and_routing_rows_conserve() {
    let cfg = tiny();
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&report, dir.path()).unwrap();
    let (_, trace) = read_csv(&dir.path().join("loss_trace.csv"));
    assert_eq!(trace.len(), cfg.train.steps);
    for row in &trace {
        for v in &row[1..7] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
    let (_, emb) = read_csv(&dir.path().join("embeddings_final.csv"));
    assert_eq!(emb.len(), report.metrics.matched);
    for layer in &report.moe_layers {
        let (_, rows) = read_csv(&dir.path().join(format!("routing_layer{layer}.csv")));
        assert_eq!(rows.len(), report.class_names.len());
        for (c, row) in rows.iter().enumerate() {
            assert_eq!(row[0], report.class_names[c]);
            let sum: usize = row[1..].iter().map(|v| v.parse::<usize>().unwrap()).sum();
            assert_eq!(sum, cfg.model.top_k * report.metrics.per_class[c].count);
        }
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_reports(&run_experiment(&cfg).unwrap(), a.path()).unwrap();
    emit_reports(&run_experiment(&cfg).unwrap(), b.path()).unwrap();
    for f in ["metrics.json", "loss_trace.csv", "embeddings_final.csv", "routing_layer0.csv", "routing_layer1.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_rows_and_duplicates() {
    let cfg = tiny();
    let rows = parse_toggles("moe;moe").unwrap();
    let report = ablation_run(&cfg, &rows).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].delta.overall, Some(0.0));
    assert_eq!(report.rows[1].summary, report.rows[2].summary);
    let dir = tempfile::tempdir().unwrap();
    emit_ablation(&report, dir.path()).unwrap();
    let (h, rows) = read_csv(&dir.path().join("ablation.csv"));
    assert_eq!(h, report::ABLATION_HEADER);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][1], "moe");
}
