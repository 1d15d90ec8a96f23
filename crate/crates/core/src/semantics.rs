//! Class vocabulary, language embeddings (synthetic or file-ingested) and
//! per-instance visual teacher embeddings.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::registry::Registry;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum FrequencyGroup {
    Many,
    Medium,
    Few,
}

impl FrequencyGroup {
    pub const ALL: [FrequencyGroup; 3] = [Self::Many, Self::Medium, Self::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Many => "many",
            Self::Medium => "medium",
            Self::Few => "few",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub semantic_group: usize,
    pub frequency_group: FrequencyGroup,
}

/// Ordered class list. Index order is also the frequency rank used by the
/// long-tail sampler (index 0 is the most frequent class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

impl TryFrom<Vec<ClassEntry>> for ClassVocabulary {
    type Error = Error;
    fn try_from(entries: Vec<ClassEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<ClassVocabulary> for Vec<ClassEntry> {
    fn from(v: ClassVocabulary) -> Self {
        v.entries
    }
}

impl ClassVocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::invalid("vocabulary needs at least 2 classes"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::invalid(format!("duplicate class name `{}`", e.name)));
            }
            if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "class name `{}` must be non-empty without whitespace",
                    e.name
                )));
            }
        }
        let groups: HashSet<usize> = entries.iter().map(|e| e.semantic_group).collect();
        if (0..groups.len()).any(|g| !groups.contains(&g)) {
            return Err(Error::invalid("semantic group ids must be contiguous from 0"));
        }
        Ok(Self { entries })
    }

    /// Builds a vocabulary from `(name, semantic group)` pairs in frequency-rank
    /// order; frequency groups start as rank tertiles.
    pub fn ranked(classes: &[(&str, usize)]) -> Result<Self> {
        let n = classes.len();
        let entries = classes
            .iter()
            .enumerate()
            .map(|(rank, &(name, group))| ClassEntry {
                name: name.to_string(),
                semantic_group: group,
                frequency_group: match rank * 3 / n.max(1) {
                    0 => FrequencyGroup::Many,
                    1 => FrequencyGroup::Medium,
                    _ => FrequencyGroup::Few,
                },
            })
            .collect();
        Self::new(entries)
    }

    /// The 18 driving classes in rough frequency order, in three semantic
    /// groups: 0 vehicle-like, 1 human-like, 2 static.
    pub fn driving18() -> Self {
        Self::ranked(&[
            ("car", 0),
            ("adult", 1),
            ("barrier", 2),
            ("traffic_cone", 2),
            ("truck", 0),
            ("trailer", 0),
            ("construction_vehicle", 0),
            ("pushable_pullable", 2),
            ("bus", 0),
            ("motorcycle", 0),
            ("bicycle", 0),
            ("construction_worker", 1),
            ("police_officer", 1),
            ("child", 1),
            ("debris", 2),
            ("stroller", 1),
            ("personal_mobility", 1),
            ("emergency_vehicle", 0),
        ])
        .expect("static vocabulary is valid")
    }

    /// Eight classes in two semantic groups (0 vehicle-like, 1 human-like).
    pub fn two_group() -> Self {
        Self::ranked(&[
            ("car", 0),
            ("adult", 1),
            ("truck", 0),
            ("construction_worker", 1),
            ("bus", 0),
            ("child", 1),
            ("emergency_vehicle", 0),
            ("police_officer", 1),
        ])
        .expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn name(&self, class: usize) -> &str {
        &self.entries[class].name
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn group_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.semantic_group + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn semantic_group(&self, class: usize) -> usize {
        self.entries[class].semantic_group
    }

    pub fn frequency_group(&self, class: usize) -> FrequencyGroup {
        self.entries[class].frequency_group
    }

    pub fn set_frequency_groups(&mut self, groups: &[FrequencyGroup]) -> Result<()> {
        if groups.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "{} frequency groups for {} classes",
                groups.len(),
                self.entries.len()
            )));
        }
        for (e, &g) in self.entries.iter_mut().zip(groups) {
            e.frequency_group = g;
        }
        Ok(())
    }
}

/// One prompt per class, in vocabulary order. `template` must contain exactly one `{}`.
pub fn prompt_strings(vocab: &ClassVocabulary, template: &str) -> Result<Vec<String>> {
    if template.matches("{}").count() != 1 {
        return Err(Error::invalid(format!(
            "prompt template `{template}` must contain exactly one `{{}}` placeholder"
        )));
    }
    Ok(vocab
        .entries()
        .iter()
        .map(|e| template.replacen("{}", &e.name, 1))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, intra_group_cos: f64 },
    File { path: String, checksum: String },
}

/// `n×d` matrix of unit rows; row `i` belongs to vocabulary entry `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEmbeddings {
    pub matrix: Tensor,
    pub provenance: Provenance,
}

impl LanguageEmbeddings {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.matrix.row(class)
    }
}

fn unit_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n >= crate::numkernel::EPS_NORM {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(crate::numkernel::EPS_NORM)
}

/// Synthetic language embeddings with controlled group structure: one
/// near-orthogonal anchor per semantic group, each class a noisy copy of its
/// group anchor with expected within-group cosine `intra_group_cos`.
pub fn synth_language_embeddings(
    vocab: &ClassVocabulary,
    d: usize,
    seed: u64,
    intra_group_cos: f64,
) -> Result<LanguageEmbeddings> {
    if d < 8 {
        return Err(Error::invalid(format!("embedding dimension {d} < 8")));
    }
    if !(0.0..1.0).contains(&intra_group_cos) {
        return Err(Error::invalid(format!(
            "intra_group_cos {intra_group_cos} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<Vec<f64>> = Vec::new();
    for g in 0..vocab.group_count() {
        let mut tries = 0;
        let anchor = loop {
            tries += 1;
            if tries > 1000 {
                return Err(Error::invalid(format!(
                    "could not place {} near-orthogonal group anchors in {d} dimensions (stuck at group {g})",
                    vocab.group_count()
                )));
            }
            let cand = unit_gaussian(d, &mut rng);
            if anchors.iter().all(|a| dot(a, &cand).abs() < 0.2) {
                break cand;
            }
        };
        anchors.push(anchor);
    }
    let (wa, wn) = (intra_group_cos.sqrt(), (1.0 - intra_group_cos).sqrt());
    let mut data = Vec::with_capacity(vocab.len() * d);
    for e in vocab.entries() {
        let noise = unit_gaussian(d, &mut rng);
        let anchor = &anchors[e.semantic_group];
        let v: Vec<f64> = anchor
            .iter()
            .zip(&noise)
            .map(|(a, n)| wa * a + wn * n)
            .collect();
        data.extend(normalized(v));
    }
    Ok(LanguageEmbeddings {
        matrix: Tensor::matrix(vocab.len(), d, data)?,
        provenance: Provenance::Synthetic {
            seed,
            intra_group_cos,
        },
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn checksum_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    s.into()
}

/// Writes `EMB v1 n d` followed by one `name v1 … vd` line per class, plus a
/// sibling `.sha256` file holding the digest of the embedding file.
pub fn save_embeddings(path: &Path, vocab: &ClassVocabulary, emb: &LanguageEmbeddings) -> Result<()> {
    if vocab.len() != emb.n() {
        return Err(Error::invalid(format!(
            "vocabulary has {} classes but embeddings have {} rows",
            vocab.len(),
            emb.n()
        )));
    }
    let mut out = format!("EMB v1 {} {}\n", emb.n(), emb.dim());
    for c in 0..emb.n() {
        out.push_str(vocab.name(c));
        for v in emb.row(c) {
            write!(out, " {v:?}").expect("write to string");
        }
        out.push('\n');
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path, e))?;
    let sidecar = checksum_path(path);
    std::fs::write(&sidecar, format!("{}\n", sha256_hex(out.as_bytes())))
        .map_err(|e| Error::io(sidecar, e))
}

/// Reads an embedding file written by [`save_embeddings`] (or any tool
/// emitting the same format). Rows whose norm is not already 1 are normalized.
pub fn load_embeddings(path: &Path, vocab: &ClassVocabulary) -> Result<LanguageEmbeddings> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let fmt_err = |reason: String| Error::Format {
        path: shown.clone(),
        reason,
    };
    let checksum = sha256_hex(&bytes);
    let sidecar = checksum_path(path);
    if sidecar.exists() {
        let expected = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let expected = expected.split_whitespace().next().unwrap_or("");
        if !expected.eq_ignore_ascii_case(&checksum) {
            return Err(fmt_err(format!(
                "checksum mismatch: file {checksum}, sidecar {expected}"
            )));
        }
    }
    let text = String::from_utf8(bytes).map_err(|_| fmt_err("not UTF-8".into()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| fmt_err("empty file".into()))?
        .split_whitespace()
        .collect();
    if header.len() != 4 || header[0] != "EMB" {
        return Err(fmt_err("missing `EMB` magic".into()));
    }
    if header[1] != "v1" {
        return Err(fmt_err(format!("unsupported version `{}`", header[1])));
    }
    let n: usize = header[2].parse().map_err(|_| fmt_err("bad row count".into()))?;
    let d: usize = header[3].parse().map_err(|_| fmt_err("bad dimension".into()))?;
    if n != vocab.len() {
        return Err(fmt_err(format!(
            "file has {n} classes, vocabulary has {}",
            vocab.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for c in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| fmt_err(format!("truncated: expected {n} rows, found {c}")))?;
        let mut fields = line.split_whitespace();
        let name = fields.next().unwrap_or("");
        if name != vocab.name(c) {
            return Err(fmt_err(format!(
                "row {c} is `{name}`, vocabulary expects `{}`",
                vocab.name(c)
            )));
        }
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fmt_err(format!("row {c}: unparsable value")))?;
        if row.len() != d {
            return Err(fmt_err(format!("row {c}: {} values, expected {d}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(format!("row {c}: non-finite value")));
        }
        let nrm = norm(&row);
        if nrm < crate::numkernel::EPS_NORM {
            return Err(fmt_err(format!("row {c}: zero vector")));
        }
        if (nrm - 1.0).abs() > 1e-12 {
            data.extend(row.into_iter().map(|v| v / nrm));
        } else {
            data.extend(row);
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(fmt_err("trailing data after last row".into()));
    }
    Ok(LanguageEmbeddings {
        matrix: Tensor::matrix(n, d, data)?,
        provenance: Provenance::File {
            path: shown.clone(),
            checksum,
        },
    })
}

/// Where language embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSource {
    pub provider: String,
    pub dim: usize,
    pub seed: u64,
    pub intra_group_cos: f64,
    pub path: Option<String>,
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        Self {
            provider: "synthetic".into(),
            dim: 64,
            seed: 7,
            intra_group_cos: 0.5,
            path: None,
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn provide(&self, vocab: &ClassVocabulary, source: &EmbeddingSource) -> Result<LanguageEmbeddings>;
}

struct SyntheticProvider;

impl EmbeddingProvider for SyntheticProvider {
    fn provide(&self, vocab: &ClassVocabulary, s: &EmbeddingSource) -> Result<LanguageEmbeddings> {
        synth_language_embeddings(vocab, s.dim, s.seed, s.intra_group_cos)
    }
}

struct FileProvider;

impl EmbeddingProvider for FileProvider {
    fn provide(&self, vocab: &ClassVocabulary, s: &EmbeddingSource) -> Result<LanguageEmbeddings> {
        let path = s
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("file embedding provider needs `path`".into()))?;
        let emb = load_embeddings(Path::new(path), vocab)?;
        if emb.dim() != s.dim {
            return Err(Error::Config(format!(
                "embedding file has dimension {}, config says {}",
                emb.dim(),
                s.dim
            )));
        }
        Ok(emb)
    }
}

pub fn embedding_providers() -> Registry<dyn EmbeddingProvider> {
    let mut reg: Registry<dyn EmbeddingProvider> = Registry::new("embedding provider");
    reg.register("synthetic", Arc::new(SyntheticProvider));
    reg.register("file", Arc::new(FileProvider));
    reg
}

/// A unit-norm visual embedding standing in for an image-encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub mode_id: usize,
}

/// Produces teacher visual embeddings. Each (class, mode) has a fixed offset
/// of norm `mode_scale` derived from `mode_seed`; mode 0 has no offset.
/// Noise is isotropic with expected norm `noise_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualSynth {
    pub mode_seed: u64,
    pub mode_scale: f64,
}

impl VisualSynth {
    pub fn mode_offset(&self, class: usize, mode: usize, d: usize) -> Vec<f64> {
        if mode == 0 || self.mode_scale == 0.0 {
            return vec![0.0; d];
        }
        let key = self
            .mode_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((class as u64) << 32 | mode as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        unit_gaussian(d, &mut rng)
            .into_iter()
            .map(|v| v * self.mode_scale)
            .collect()
    }

    /// `normalize(base + offset(class, mode) + noise)` for an arbitrary unit `base`.
    pub fn embed_from_base<R: Rng + ?Sized>(
        &self,
        base: &[f64],
        class: usize,
        mode: usize,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<VisualEmbedding> {
        if !(noise_scale >= 0.0) {
            return Err(Error::invalid(format!("noise_scale {noise_scale} < 0")));
        }
        let d = base.len();
        let offset = self.mode_offset(class, mode, d);
        let per_coord = noise_scale / (d as f64).sqrt();
        let v: Vec<f64> = base
            .iter()
            .zip(&offset)
            .map(|(b, o)| {
                let n: f64 = StandardNormal.sample(rng);
                b + o + per_coord * n
            })
            .collect();
        Ok(VisualEmbedding {
            vector: normalized(v),
            class_id: class,
            mode_id: mode,
        })
    }

    pub fn embed<R: Rng + ?Sized>(
        &self,
        class: usize,
        mode: usize,
        noise_scale: f64,
        language: &LanguageEmbeddings,
        rng: &mut R,
    ) -> Result<VisualEmbedding> {
        if class >= language.n() {
            return Err(Error::invalid(format!(
                "class id {class} out of range for {} classes",
                language.n()
            )));
        }
        self.embed_from_base(language.row(class), class, mode, noise_scale, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts() {
        let vocab = ClassVocabulary::driving18();
        let p = prompt_strings(&vocab, DEFAULT_PROMPT_TEMPLATE).unwrap();
        assert_eq!(p.len(), 18);
        assert_eq!(p[0], "a photo of a car");
        assert_eq!(p[17], "a photo of a emergency_vehicle");
        assert!(prompt_strings(&vocab, "no placeholder").is_err());
        assert!(prompt_strings(&vocab, "{} and {}").is_err());
    }

    #[test]
    fn vocabulary_validation() {
        let e = |n: &str, g| ClassEntry {
            name: n.into(),
            semantic_group: g,
            frequency_group: FrequencyGroup::Many,
        };
        assert!(ClassVocabulary::new(vec![e("a", 0)]).is_err());
        assert!(ClassVocabulary::new(vec![e("a", 0), e("a", 0)]).is_err());
        assert!(ClassVocabulary::new(vec![e("a", 0), e("b", 2)]).is_err());
        assert!(ClassVocabulary::new(vec![e("a", 0), e("b", 1)]).is_ok());
        let v = ClassVocabulary::driving18();
        assert_eq!(v.group_count(), 3);
        assert_eq!(v.frequency_group(0), FrequencyGroup::Many);
        assert_eq!(v.frequency_group(17), FrequencyGroup::Few);
    }

    #[test]
    fn synthetic_embeddings_are_deterministic_and_unit() {
        let vocab = ClassVocabulary::driving18();
        let a = synth_language_embeddings(&vocab, 64, 11, 0.5).unwrap();
        let b = synth_language_embeddings(&vocab, 64, 11, 0.5).unwrap();
        assert_eq!(a.matrix.data(), b.matrix.data());
        for c in 0..a.n() {
            assert!((norm(a.row(c)) - 1.0).abs() < 1e-9);
        }
        assert!(synth_language_embeddings(&vocab, 4, 11, 0.5).is_err());
        assert!(synth_language_embeddings(&vocab, 64, 11, 1.0).is_err());
    }

    #[test]
    fn orthogonal_when_no_group_structure() {
        let vocab = ClassVocabulary::driving18();
        for seed in 0..5 {
            let e = synth_language_embeddings(&vocab, 64, seed, 0.0).unwrap();
            let s = crate::numkernel::cosine_similarity(&e.matrix, &e.matrix).unwrap();
            for i in 0..18 {
                for j in 0..18 {
                    if i != j {
                        assert!(s.get(i, j).abs() < 0.5, "seed {seed} {i} {j} {}", s.get(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn group_structure_monte_carlo() {
        let vocab = ClassVocabulary::ranked(&[("a", 0), ("b", 0), ("c", 0), ("d", 1), ("e", 1), ("f", 1)]).unwrap();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for seed in 0..30 {
            let e = synth_language_embeddings(&vocab, 64, seed, 0.8).unwrap();
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let c = cosine(e.row(i), e.row(j));
                    if vocab.semantic_group(i) == vocab.semantic_group(j) {
                        within += c;
                        nw += 1;
                    } else {
                        cross += c.abs();
                        nc += 1;
                    }
                }
            }
        }
        let (within, cross) = (within / nw as f64, cross / nc as f64);
        assert!((0.7..=0.9).contains(&within), "{within}");
        assert!(cross < 0.2, "{cross}");
    }

    #[test]
    fn visual_equals_language_without_noise_or_mode() {
        let vocab = ClassVocabulary::two_group();
        let lang = synth_language_embeddings(&vocab, 32, 1, 0.3).unwrap();
        let synth = VisualSynth {
            mode_seed: 9,
            mode_scale: 0.6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = synth.embed(3, 0, 0.0, &lang, &mut rng).unwrap();
        for (a, b) in v.vector.iter().zip(lang.row(3)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(synth.embed(99, 0, 0.0, &lang, &mut rng).is_err());
        assert!(synth.embed(0, 0, -1.0, &lang, &mut rng).is_err());
    }

    #[test]
    fn modes_cluster() {
        let vocab = ClassVocabulary::two_group();
        let lang = synth_language_embeddings(&vocab, 64, 2, 0.3).unwrap();
        let synth = VisualSynth {
            mode_seed: 5,
            mode_scale: 0.8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = |mode, rng: &mut ChaCha8Rng| synth.embed(2, mode, 0.3, &lang, rng).unwrap().vector;
        let (mut same, mut diff) = (0.0, 0.0);
        for _ in 0..100 {
            let a = draw(1, &mut rng);
            let b = draw(1, &mut rng);
            let c = draw(2, &mut rng);
            same += cosine(&a, &b);
            diff += cosine(&a, &c);
        }
        assert!(same > diff, "{same} vs {diff}");
    }

    #[test]
    fn teacher_argmax_recovers_class() {
        let vocab = ClassVocabulary::driving18();
        let lang = synth_language_embeddings(&vocab, 64, 3, 0.0).unwrap();
        let synth = VisualSynth {
            mode_seed: 1,
            mode_scale: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hits = 0;
        for t in 0..1000 {
            let class = t % 18;
            let v = synth.embed(class, 0, 0.3, &lang, &mut rng).unwrap();
            let best = (0..18)
                .max_by(|&i, &j| {
                    cosine(&v.vector, lang.row(i)).total_cmp(&cosine(&v.vector, lang.row(j)))
                })
                .unwrap();
            hits += usize::from(best == class);
        }
        assert!(hits >= 950, "{hits}");
    }

    #[test]
    fn visual_closer_to_own_class() {
        let vocab = ClassVocabulary::driving18();
        let lang = synth_language_embeddings(&vocab, 64, 8, 0.5).unwrap();
        let synth = VisualSynth {
            mode_seed: 3,
            mode_scale: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // class 0 (vehicle group) vs class 1 (human group, not confused)
        let (mut own, mut other) = (0.0, 0.0);
        for t in 0..100 {
            let v = synth.embed(0, t % 3, 0.3, &lang, &mut rng).unwrap();
            own += cosine(&v.vector, lang.row(0));
            other += cosine(&v.vector, lang.row(1));
        }
        assert!(own > other);
    }

    #[test]
    fn embedding_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClassVocabulary::two_group();
        let emb = synth_language_embeddings(&vocab, 16, 5, 0.4).unwrap();
        let path = dir.path().join("emb.txt");
        save_embeddings(&path, &vocab, &emb).unwrap();
        let back = load_embeddings(&path, &vocab).unwrap();
        assert_eq!(back.matrix.data(), emb.matrix.data());
        assert!(matches!(back.provenance, Provenance::File { .. }));

        // tampering trips the sidecar checksum
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("car", "car ", 1)).unwrap();
        assert!(load_embeddings(&path, &vocab).unwrap_err().to_string().contains("checksum"));

        // truncated file without sidecar
        std::fs::remove_file(dir.path().join("emb.txt.sha256")).unwrap();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, truncated).unwrap();
        let err = load_embeddings(&path, &vocab).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        // class count mismatch names both counts
        std::fs::write(&path, &text).unwrap();
        let err = load_embeddings(&path, &ClassVocabulary::driving18()).unwrap_err().to_string();
        assert!(err.contains('8') && err.contains("18"), "{err}");

        std::fs::write(&path, text.replacen("EMB v1", "EMB v2", 1)).unwrap();
        assert!(load_embeddings(&path, &vocab).unwrap_err().to_string().contains("version"));
        std::fs::write(&path, text.replacen("EMB", "XYZ", 1)).unwrap();
        assert!(load_embeddings(&path, &vocab).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn file_rows_are_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClassVocabulary::ranked(&[("a", 0), ("b", 0)]).unwrap();
        let path = dir.path().join("e.txt");
        std::fs::write(&path, "EMB v1 2 2\na 3 4\nb 0 2\n").unwrap();
        let e = load_embeddings(&path, &vocab).unwrap();
        assert_eq!(e.row(0), &[0.6, 0.8]);
        assert_eq!(e.row(1), &[0.0, 1.0]);
        std::fs::write(&path, "EMB v1 2 2\na 3 nan\nb 0 2\n").unwrap();
        assert!(load_embeddings(&path, &vocab).is_err());
    }

    #[test]
    fn providers_registry() {
        let reg = embedding_providers();
        assert_eq!(reg.names(), vec!["file", "synthetic"]);
        let vocab = ClassVocabulary::two_group();
        let e = reg
            .get("synthetic")
            .unwrap()
            .provide(&vocab, &EmbeddingSource::default())
            .unwrap();
        assert_eq!(e.dim(), 64);
        assert!(reg.get("file").unwrap().provide(&vocab, &EmbeddingSource::default()).is_err());
    }
}
