//! Deterministic synthetic long-tailed multi-camera scenes.
//!
//! Every scene is a pure function of `(SceneConfig, scene seed)`. Fixed
//! per-world tables (observation prototypes, positional basis, class sizes)
//! depend on the config only.

mod format;

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_rig, visible_crops, Box3D, Camera, RigConfig};
use crate::numkernel::Tensor;
use crate::semantics::{
    cosine, embedding_providers, ClassEntry, ClassVocabulary, EmbeddingSource, FrequencyGroup, LanguageEmbeddings,
    VisualSynth,
};

pub use format::{read_corpus, write_corpus, SCN_MAGIC};

/// Instances of class `a` that sometimes look like class `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionPair {
    pub a: String,
    pub b: String,
    /// Cosine between a confused instance's base embedding and `b`'s language row.
    pub cos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Named preset: `driving18` or `two_group`. Ignored when `classes` is set.
    pub vocabulary: String,
    pub classes: Option<Vec<ClassEntry>>,
    pub zipf_exponent: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub modes_per_class: usize,
    pub confusion: Vec<ConfusionPair>,
    /// Share of class-`a` instances drawn with the confused base.
    pub confusion_fraction: f64,
    pub obs_dim: usize,
    pub obs_noise: f64,
    pub class_signal: f64,
    pub mode_signal: f64,
    pub position_signal: f64,
    pub distractors: usize,
    pub distractor_scale: f64,
    pub teacher_noise: f64,
    pub teacher_mode_scale: f64,
    pub embeddings: EmbeddingSource,
    pub rig: RigConfig,
    pub min_range: f64,
    pub max_range: f64,
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let pair = |a: &str, b: &str| ConfusionPair {
            a: a.into(),
            b: b.into(),
            cos: 0.8,
        };
        Self {
            vocabulary: "driving18".into(),
            classes: None,
            zipf_exponent: 1.0,
            objects_min: 4,
            objects_max: 10,
            modes_per_class: 3,
            confusion: vec![
                pair("police_officer", "adult"),
                pair("emergency_vehicle", "car"),
                pair("stroller", "pushable_pullable"),
                pair("debris", "traffic_cone"),
            ],
            confusion_fraction: 0.5,
            obs_dim: 32,
            obs_noise: 0.3,
            class_signal: 1.0,
            mode_signal: 0.5,
            position_signal: 1.0,
            distractors: 4,
            distractor_scale: 1.0,
            teacher_noise: 0.3,
            teacher_mode_scale: 0.3,
            embeddings: EmbeddingSource::default(),
            rig: RigConfig::default(),
            min_range: 4.0,
            max_range: 30.0,
            min_separation: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        if let Some(classes) = &self.classes {
            return ClassVocabulary::new(classes.clone());
        }
        match self.vocabulary.as_str() {
            "driving18" => Ok(ClassVocabulary::driving18()),
            "two_group" => Ok(ClassVocabulary::two_group()),
            other => Err(Error::Config(format!(
                "unknown vocabulary `{other}` (available: driving18, two_group)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.zipf_exponent > 0.0) {
            return bad(format!("zipf_exponent must be > 0, got {}", self.zipf_exponent));
        }
        if self.modes_per_class == 0 {
            return bad("modes_per_class must be >= 1".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad(format!("bad object range {}..={}", self.objects_min, self.objects_max));
        }
        if self.obs_dim == 0 {
            return bad("obs_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.confusion_fraction) {
            return bad(format!("confusion_fraction {} outside [0, 1]", self.confusion_fraction));
        }
        for (name, v) in [
            ("obs_noise", self.obs_noise),
            ("class_signal", self.class_signal),
            ("mode_signal", self.mode_signal),
            ("position_signal", self.position_signal),
            ("distractor_scale", self.distractor_scale),
            ("teacher_noise", self.teacher_noise),
            ("teacher_mode_scale", self.teacher_mode_scale),
            ("min_separation", self.min_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.min_range > 0.0 && self.max_range > self.min_range) {
            return bad(format!("bad range {}..{}", self.min_range, self.max_range));
        }
        let vocab = self.vocabulary()?;
        let names = vocab.names();
        for p in &self.confusion {
            if !(0.0..1.0).contains(&p.cos) {
                return bad(format!("confusion cosine {} outside [0, 1)", p.cos));
            }
            for n in [&p.a, &p.b] {
                if !names.contains(&n.as_str()) {
                    return bad(format!("confusion class `{n}` not in vocabulary"));
                }
            }
            if p.a == p.b {
                return bad(format!("class `{}` confused with itself", p.a));
            }
        }
        Ok(())
    }
}

/// Draws a class rank with `P(r) ∝ (r + 1)^(−s)`.
pub fn sample_class<R: Rng + ?Sized>(zipf_exponent: f64, n: usize, rng: &mut R) -> Result<usize> {
    Ok(zipf(zipf_exponent, n)?.sample(rng) as usize - 1)
}

fn zipf(s: f64, n: usize) -> Result<Zipf<f64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    Zipf::new(n as f64, s).map_err(|e| Error::invalid(format!("zipf({n}, {s}): {e}")))
}

/// Analytic `P(r)` for ranks `0..n`.
pub fn zipf_masses(s: f64, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// `count ≥ cut_many` is Many, `count ≤ cut_few` is Few, anything between is Medium.
pub fn frequency_groups(counts: &[usize], cut_many: f64, cut_few: f64) -> Result<Vec<FrequencyGroup>> {
    if !(cut_many > cut_few && cut_few >= 0.0) {
        return Err(Error::invalid(format!("need cut_many > cut_few >= 0, got {cut_many}, {cut_few}")));
    }
    Ok(counts
        .iter()
        .map(|&c| {
            let c = c as f64;
            if c >= cut_many {
                FrequencyGroup::Many
            } else if c <= cut_few {
                FrequencyGroup::Few
            } else {
                FrequencyGroup::Medium
            }
        })
        .collect())
}

/// Cuts splitting the range of `ln(1 + count)` into three equal parts,
/// returned as `(cut_many, cut_few)` in count units. `None` when all counts are equal.
pub fn log_range_cuts(counts: &[usize]) -> Option<(f64, f64)> {
    let logs: Vec<f64> = counts.iter().map(|&c| (1.0 + c as f64).ln()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let step = (hi - lo) / 3.0;
    Some(((lo + 2.0 * step).exp() - 1.0, (lo + step).exp() - 1.0))
}

/// Frequency groups under the default log-range cuts.
pub fn default_frequency_groups(counts: &[usize]) -> Vec<FrequencyGroup> {
    match log_range_cuts(counts) {
        Some((many, few)) => frequency_groups(counts, many, few).expect("cuts are ordered"),
        None => vec![FrequencyGroup::Many; counts.len()],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub bbox: Box3D,
    pub mode: usize,
    pub confused_with: Option<usize>,
    /// Unit-norm teacher visual embedding.
    pub teacher: Vec<f64>,
}

impl SceneObject {
    pub fn class_id(&self) -> usize {
        self.bbox.class_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    /// Query slot `i` holds object `slots[i]`, or a distractor when `None`.
    pub slots: Vec<Option<usize>>,
    /// `k×D`, one row per slot.
    pub observations: Tensor,
    pub rig: Vec<Camera>,
}

impl Scene {
    pub fn num_queries(&self) -> usize {
        self.slots.len()
    }

    pub fn gt_classes(&self) -> Vec<usize> {
        self.objects.iter().map(SceneObject::class_id).collect()
    }

    pub fn gt_centers(&self) -> Tensor {
        let data = self.objects.iter().flat_map(|o| o.bbox.center).collect();
        Tensor::matrix(self.objects.len(), 3, data).expect("finite centers")
    }

    /// Class of the object behind each slot.
    pub fn slot_labels(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.map(|o| self.objects[o].class_id())).collect()
    }
}

/// Holds everything fixed for a world; produces scenes by seed.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    config: SceneConfig,
    vocab: ClassVocabulary,
    language: LanguageEmbeddings,
    rig: Vec<Camera>,
    zipf: Zipf<f64>,
    /// Observation prototypes per class, `n×D`.
    class_protos: Vec<Vec<f64>>,
    /// Mode offsets per class and mode.
    mode_protos: Vec<Vec<Vec<f64>>>,
    /// `D×8` positional basis.
    pos_basis: Vec<Vec<f64>>,
    /// `D×d` map from embedding space to observation space.
    lift: Vec<Vec<f64>>,
    sizes: Vec<[f64; 3]>,
    confusion: HashMap<usize, (usize, f64)>,
    teacher_synth: VisualSynth,
}

const POS_FEATURES: usize = 8;

fn unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn apply(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Unit vector `normalize(a + β·b)` with cosine `t` to `b`; `a` itself when
/// it is already at least that close.
fn bias_toward(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let rho = cosine(a, b);
    if rho >= t {
        return a.to_vec();
    }
    let beta = -rho + t * (1.0 - rho * rho).sqrt() / (1.0 - t * t).sqrt();
    normalize(a.iter().zip(b).map(|(x, y)| x + beta * y).collect())
}

impl SceneGenerator {
    pub fn new(config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocabulary()?;
        let provider = embedding_providers().get(&config.embeddings.provider)?;
        let language = provider.provide(&vocab, &config.embeddings)?;
        let rig = build_rig(&config.rig)?;
        let n = vocab.len();
        let d = language.dim();
        let big_d = config.obs_dim;

        let mut world = ChaCha8Rng::seed_from_u64(config.seed);
        world.set_stream(1);
        let lift: Vec<Vec<f64>> = (0..big_d)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut world)).collect())
            .collect();
        let class_protos = (0..n)
            .map(|c| {
                let v = normalize(apply(&lift, language.row(c)));
                v.into_iter().map(|x| x * config.class_signal).collect()
            })
            .collect();
        let mode_protos = (0..n)
            .map(|_| {
                (0..config.modes_per_class)
                    .map(|_| unit(big_d, &mut world).into_iter().map(|x| x * config.mode_signal).collect())
                    .collect()
            })
            .collect();
        let pos_basis = (0..big_d)
            .map(|_| {
                (0..POS_FEATURES)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut world);
                        z / (POS_FEATURES as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        let sizes = (0..n)
            .map(|_| {
                [
                    world.random_range(0.5..5.0),
                    world.random_range(0.5..2.5),
                    world.random_range(0.8..3.0),
                ]
            })
            .collect();
        let names = vocab.names();
        let idx = |s: &str| names.iter().position(|n| *n == s).expect("validated");
        let confusion = config
            .confusion
            .iter()
            .map(|p| (idx(&p.a), (idx(&p.b), p.cos)))
            .collect();
        Ok(Self {
            zipf: zipf(config.zipf_exponent, n)?,
            config: config.clone(),
            vocab,
            language,
            rig,
            class_protos,
            mode_protos,
            pos_basis,
            lift,
            sizes,
            confusion,
            teacher_synth: VisualSynth {
                mode_seed: config.seed ^ 0x5EED,
                mode_scale: config.teacher_mode_scale,
            },
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn language(&self) -> &LanguageEmbeddings {
        &self.language
    }

    pub fn rig(&self) -> &[Camera] {
        &self.rig
    }

    /// Positional term added to an instance's observation.
    pub fn position_encoding(&self, center: [f64; 3]) -> Vec<f64> {
        let r = self.config.max_range;
        let (x, y) = (center[0] / r, center[1] / r);
        let feat = [
            x,
            y,
            (PI * x).sin(),
            (PI * x).cos(),
            (PI * y).sin(),
            (PI * y).cos(),
            (2.0 * PI * x).sin(),
            (2.0 * PI * y).cos(),
        ];
        apply(&self.pos_basis, &feat)
            .into_iter()
            .map(|v| v * self.config.position_signal)
            .collect()
    }

    /// Observation row without position or noise, for a given base embedding.
    fn semantic_part(&self, class: usize, mode: usize, base: &[f64]) -> Vec<f64> {
        let proto = if base == self.language.row(class) {
            self.class_protos[class].clone()
        } else {
            normalize(apply(&self.lift, base))
                .into_iter()
                .map(|v| v * self.config.class_signal)
                .collect()
        };
        proto.iter().zip(&self.mode_protos[class][mode]).map(|(a, b)| a + b).collect()
    }

    fn place<R: Rng + ?Sized>(&self, class: usize, placed: &[Box3D], rng: &mut R) -> Result<Box3D> {
        let cfg = &self.config;
        let base = self.sizes[class];
        for _ in 0..1000 {
            let r = rng.random_range(cfg.min_range * cfg.min_range..cfg.max_range * cfg.max_range).sqrt();
            let theta = rng.random_range(-PI..PI);
            let size = base.map(|s| s * rng.random_range(0.9..1.1));
            let yaw = -rng.random_range(-PI..PI);
            let b = Box3D::new([r * theta.cos(), r * theta.sin(), size[2] / 2.0], size, yaw, class)?;
            let far = placed.iter().all(|o| {
                let dx = o.center[0] - b.center[0];
                let dy = o.center[1] - b.center[1];
                (dx * dx + dy * dy).sqrt() >= cfg.min_separation
            });
            if far && !visible_crops(&b, &self.rig).is_empty() {
                return Ok(b);
            }
        }
        Err(Error::invalid(format!(
            "could not place object {} with separation {} after 1000 tries",
            placed.len(),
            cfg.min_separation
        )))
    }

    pub fn generate(&self, seed: u64) -> Result<Scene> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cfg.seed.wrapping_add(2));
        let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
        let big_d = cfg.obs_dim;
        let per_coord = 1.0 / (big_d as f64).sqrt();

        let mut objects = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count + cfg.distractors);
        let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
        for _ in 0..count {
            let class = self.zipf.sample(&mut rng) as usize - 1;
            let mode = rng.random_range(0..cfg.modes_per_class);
            let bbox = self.place(class, &boxes, &mut rng)?;
            let own = self.language.row(class);
            let confused_with = match self.confusion.get(&class) {
                Some(&(b, _)) if rng.random::<f64>() < cfg.confusion_fraction => Some(b),
                _ => None,
            };
            let base = match confused_with {
                Some(b) => bias_toward(own, self.language.row(b), self.confusion[&class].1),
                None => own.to_vec(),
            };
            let teacher = self
                .teacher_synth
                .embed_from_base(&base, class, mode, cfg.teacher_noise, &mut rng)?
                .vector;
            let pe = self.position_encoding(bbox.center);
            let row: Vec<f64> = self
                .semantic_part(class, mode, &base)
                .iter()
                .zip(&pe)
                .map(|(s, p)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s + p + cfg.obs_noise * per_coord * z
                })
                .collect();
            rows.push(row);
            boxes.push(bbox.clone());
            objects.push(SceneObject {
                bbox,
                mode,
                confused_with,
                teacher,
            });
        }
        for _ in 0..cfg.distractors {
            rows.push(
                (0..big_d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cfg.distractor_scale * per_coord * z
                    })
                    .collect(),
            );
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut rng);
        let slots = order.iter().map(|&i| (i < count).then_some(i)).collect();
        let data = order.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        Ok(Scene {
            seed,
            objects,
            slots,
            observations: Tensor::matrix(order.len(), big_d, data)?,
            rig: self.rig.clone(),
        })
    }

    /// Scenes with seeds `base_seed..base_seed + n`, plus summary statistics.
    pub fn corpus(&self, n: usize, base_seed: u64) -> Result<Corpus> {
        if n == 0 {
            return Err(Error::invalid("corpus needs at least one scene"));
        }
        let scenes = (0..n as u64)
            .into_par_iter()
            .map(|i| self.generate(base_seed + i))
            .collect::<Result<Vec<_>>>()?;
        let stats = CorpusStats::from_scenes(&scenes, self.vocab.len());
        Ok(Corpus { scenes, stats })
    }
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    SceneGenerator::new(config)?.generate(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub scenes: usize,
    pub objects: usize,
    pub class_counts: Vec<usize>,
    pub frequency_groups: Vec<FrequencyGroup>,
}

impl CorpusStats {
    pub fn from_scenes(scenes: &[Scene], n_classes: usize) -> Self {
        let mut class_counts = vec![0; n_classes];
        for s in scenes {
            for o in &s.objects {
                class_counts[o.class_id()] += 1;
            }
        }
        Self {
            scenes: scenes.len(),
            objects: class_counts.iter().sum(),
            frequency_groups: default_frequency_groups(&class_counts),
            class_counts,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub stats: CorpusStats,
}

pub fn corpus(config: &SceneConfig, n: usize, base_seed: u64) -> Result<Corpus> {
    SceneGenerator::new(config)?.corpus(n, base_seed)
}
