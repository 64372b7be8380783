//! Deterministic synthetic dataset generation.
//!
//! Videos are feature matrices from [`stub_visual_features`]: background
//! noise plus a class prototype inside each planted instance. Class
//! prototypes for RGB and Flow are drawn from a shared low-rank latent so
//! that the two streams carry consistent class geometry.
//!
//! The `text_visual_coupling` knob makes zero-shot transfer measurable:
//! class names and attribute descriptions are assembled greedily from a
//! word pool so that their embeddings under the seeded frozen text encoder
//! land near the class's visual prototype direction after a fixed random
//! linear map. At coupling 0 the texts are random words and carry no
//! visual information; at high coupling an aligner trained on base classes
//! can place novel classes correctly from text alone. Everything is a pure
//! function of the spec.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Stream;
use crate::data::{
    save_descriptions, ActionInstance, ClassDescription, Manifest, ManifestAnnotation,
    ManifestVideo, Subset,
};
use crate::encoders::{stub_visual_features, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::params::{derive_seed, standard_normal};

fn default_d_rgb() -> usize {
    16
}
fn default_d_flow() -> usize {
    16
}
fn default_d_text() -> usize {
    32
}
fn default_encoder_seed() -> u64 {
    1913
}
fn default_pool_size() -> usize {
    120
}
fn default_max_desc_words() -> usize {
    12
}
fn default_name_words() -> usize {
    2
}

/// Everything that defines a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_train_videos: usize,
    pub n_test_videos: usize,
    /// Snippets per video.
    #[serde(rename = "T")]
    pub snippets: usize,
    /// Inclusive range of instances planted per video.
    pub instances_per_video: (usize, usize),
    /// Inclusive instance length range in snippets.
    pub length_range: (usize, usize),
    /// Feature noise standard deviation.
    pub noise: f64,
    /// Target cosine between mapped text embeddings and visual prototypes.
    pub text_visual_coupling: f64,
    pub seed: u64,

    #[serde(default = "default_d_rgb")]
    pub d_rgb: usize,
    #[serde(default = "default_d_flow")]
    pub d_flow: usize,
    #[serde(default = "default_d_text")]
    pub d_text: usize,
    /// Rank of the shared latent behind the class prototypes; low rank
    /// keeps novel classes inside the span of the base classes.
    #[serde(default)]
    pub latent_rank: Option<usize>,
    /// Must match the text-encoder seed used at training time.
    #[serde(default = "default_encoder_seed")]
    pub encoder_seed: u64,
    /// Candidate words available to the greedy search (capped at 200).
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Description length cap in words (capped at 20).
    #[serde(default = "default_max_desc_words")]
    pub max_desc_words: usize,
    /// Words per class name.
    #[serde(default = "default_name_words")]
    pub name_words: usize,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 {
            return Err(Error::validation("n_classes must be >= 1"));
        }
        if self.length_range.0 < 1 || self.length_range.0 > self.length_range.1 {
            return Err(Error::validation("length_range must satisfy 1 <= min <= max"));
        }
        if self.length_range.1 >= self.snippets {
            return Err(Error::validation(format!(
                "length_range max {} must be < T = {}",
                self.length_range.1, self.snippets
            )));
        }
        if self.instances_per_video.0 > self.instances_per_video.1 {
            return Err(Error::validation("instances_per_video range is inverted"));
        }
        if !(0.0..=1.0).contains(&self.text_visual_coupling) {
            return Err(Error::validation("text_visual_coupling must be in [0, 1]"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::validation("noise must be >= 0"));
        }
        if self.d_text % 4 != 0 {
            return Err(Error::validation("d_text must be a multiple of 4"));
        }
        if self.pool_size < self.name_words || self.pool_size > WORD_POOL.len() {
            return Err(Error::validation(format!(
                "pool_size must be in [{}, {}]",
                self.name_words,
                WORD_POOL.len()
            )));
        }
        if self.max_desc_words > 20 {
            return Err(Error::validation("max_desc_words is capped at 20"));
        }
        Ok(())
    }

    fn rank(&self) -> usize {
        self.latent_rank
            .unwrap_or_else(|| self.n_classes.min(6))
            .max(1)
    }
}

/// Candidate words for synthetic names and descriptions.
const WORD_POOL: [&str; 200] = [
    "river", "stone", "jump", "glide", "spin", "field", "sprint", "arc", "board", "wave",
    "ladder", "rope", "chalk", "vault", "drift", "pedal", "track", "pool", "mat", "ring",
    "dash", "hill", "climb", "swing", "kick", "throw", "catch", "roll", "slide", "dive",
    "paddle", "ramp", "frame", "wheel", "grip", "torch", "sand", "grass", "court", "net",
    "bar", "beam", "disc", "spear", "bow", "target", "goal", "post", "line", "lane",
    "water", "ice", "snow", "wind", "cliff", "shore", "lake", "peak", "trail", "bridge",
    "drum", "whistle", "flag", "glove", "helmet", "saddle", "oar", "sail", "anchor", "knot",
    "stride", "pivot", "twist", "flip", "tuck", "lunge", "press", "pull", "push", "lift",
    "sweep", "block", "serve", "volley", "pitch", "bat", "run", "walk", "leap", "bound",
    "crouch", "stretch", "bend", "reach", "hold", "release", "aim", "strike", "punch", "parry",
    "gallop", "trot", "pace", "surge", "coast", "skate", "ski", "surf", "row", "swim",
    "float", "sink", "rise", "fall", "hover", "dart", "weave", "dodge", "feint", "guard",
    "meadow", "arena", "stadium", "gym", "rink", "slope", "valley", "canyon", "forest", "creek",
    "harbor", "dock", "pier", "street", "plaza", "garden", "yard", "roof", "wall", "fence",
    "ball", "puck", "shuttle", "racket", "club", "stick", "pole", "hoop", "basket", "cone",
    "marker", "timer", "scale", "bell", "horn", "tape", "cord", "strap", "pad", "vest",
    "breeze", "current", "tide", "frost", "mist", "shade", "light", "dawn", "dusk", "noon",
    "circle", "square", "angle", "curve", "edge", "corner", "center", "side", "top", "base",
    "quick", "slow", "high", "low", "long", "short", "wide", "narrow", "deep", "steep",
    "smooth", "rough", "steady", "sharp", "soft", "firm", "light2", "heavy", "early", "late",
];

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let norm = row.mapv(|v| v * v).sum().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nb = b.mapv(|v| v * v).sum().sqrt();
    if na <= 0.0 || nb <= 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Latent class vectors and the per-stream prototypes derived from them.
struct ClassGeometry {
    prototypes_rgb: Array2<f64>,
    prototypes_flow: Array2<f64>,
}

fn class_geometry(spec: &SynthSpec) -> ClassGeometry {
    let rank = spec.rank();
    let c = spec.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "latent"));
    // Draw latent rows with a minimum pairwise separation so no two
    // classes collapse onto each other.
    let mut latent = Array2::zeros((c, rank));
    for i in 0..c {
        loop {
            let candidate =
                Array1::from_shape_fn(rank, |_| standard_normal(&mut rng));
            let candidate = &candidate / candidate.mapv(|v| v * v).sum().sqrt().max(1e-12);
            let too_close = (0..i).any(|j| {
                let row = latent.row(j).to_owned();
                cosine(&candidate.to_owned(), &row).abs() > 0.9
            });
            if !too_close {
                latent.row_mut(i).assign(&candidate);
                break;
            }
        }
    }
    let basis_rgb = Array2::from_shape_fn((rank, spec.d_rgb), |_| standard_normal(&mut rng));
    let basis_flow = Array2::from_shape_fn((rank, spec.d_flow), |_| standard_normal(&mut rng));
    ClassGeometry {
        prototypes_rgb: normalize_rows(latent.dot(&basis_rgb)),
        prototypes_flow: normalize_rows(latent.dot(&basis_flow)),
    }
}

/// Fixed random linear map from text space to RGB prototype space, with
/// orthonormal columns (Gram-Schmidt over seeded Gaussian draws).
fn text_to_visual_map(spec: &SynthSpec) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "text_map"));
    let mut columns: Vec<Array1<f64>> = Vec::with_capacity(spec.d_rgb);
    while columns.len() < spec.d_rgb {
        let mut v = Array1::from_shape_fn(spec.d_text, |_| standard_normal(&mut rng));
        for u in &columns {
            let proj: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            v.zip_mut_with(u, |a, &b| *a -= proj * b);
        }
        let norm = v.mapv(|x| x * x).sum().sqrt();
        if norm < 1e-6 {
            continue;
        }
        columns.push(v / norm);
    }
    let mut map = Array2::zeros((spec.d_text, spec.d_rgb));
    for (j, col) in columns.iter().enumerate() {
        map.column_mut(j).assign(col);
    }
    map
}

struct TextSearch<'a> {
    encoder: &'a TextEncoder,
    map: &'a Array2<f64>,
    pool: &'a [&'static str],
    /// Candidates probed per greedy step.
    step_candidates: usize,
}

impl<'a> TextSearch<'a> {
    fn score(&self, words: &[&str], target: &Array1<f64>) -> f64 {
        let text = words.join(" ");
        let embedding = match self.encoder.encode_text(&text) {
            Ok(e) => e,
            Err(_) => return -1.0,
        };
        let mapped = embedding.dot(self.map);
        cosine(&mapped, target)
    }

    /// Greedily append words until the mapped embedding reaches the target
    /// cosine or the budget runs out. Best effort by construction.
    fn assemble(
        &self,
        target: &Array1<f64>,
        goal: f64,
        max_words: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<&'static str>, f64) {
        let mut words: Vec<&'static str> = Vec::new();
        let mut best = -1.0f64;
        for _ in 0..max_words {
            if best >= goal {
                break;
            }
            let mut shuffled: Vec<&'static str> = self.pool.to_vec();
            shuffled.shuffle(rng);
            let mut step_best: Option<(&'static str, f64)> = None;
            for &candidate in shuffled.iter().take(self.step_candidates) {
                words.push(candidate);
                let score = self.score(&words, target);
                words.pop();
                if step_best.map_or(true, |(_, s)| score > s) {
                    step_best = Some((candidate, score));
                }
            }
            match step_best {
                Some((word, score)) if score > best + 1e-6 => {
                    words.push(word);
                    best = score;
                }
                _ => break,
            }
        }
        (words, best)
    }

    fn random_words(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
        (0..count)
            .map(|_| self.pool[rng.gen_range(0..self.pool.len())])
            .collect()
    }
}

/// Generate the dataset under `out_dir`, returning the manifest path.
///
/// Writes `manifest.json`, `descriptions.json`, and one `.f32` feature
/// file per video and stream. Byte-identical for identical specs.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let geometry = class_geometry(spec);
    let map = text_to_visual_map(spec);
    let encoder = TextEncoder::new(TextEncoderConfig {
        vocab_size: 49408,
        max_tokens: 77,
        dim: spec.d_text,
        seed: spec.encoder_seed,
    });
    let search = TextSearch {
        encoder: &encoder,
        map: &map,
        pool: &WORD_POOL[..spec.pool_size],
        step_candidates: 40.min(spec.pool_size),
    };

    // Class names: short coupled word pairs (or random at coupling zero),
    // kept unique.
    let mut names: Vec<String> = Vec::with_capacity(spec.n_classes);
    let mut name_couplings: Vec<f64> = Vec::with_capacity(spec.n_classes);
    let mut used: BTreeSet<String> = BTreeSet::new();
    for class_idx in 0..spec.n_classes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("name/{class_idx}")));
        let target = geometry.prototypes_rgb.row(class_idx).to_owned();
        let (mut words, achieved) = if spec.text_visual_coupling > 0.0 {
            search.assemble(&target, spec.text_visual_coupling, spec.name_words, &mut rng)
        } else {
            let words = search.random_words(spec.name_words, &mut rng);
            (words, 0.0)
        };
        if words.is_empty() {
            words = search.random_words(spec.name_words, &mut rng);
        }
        let mut name = words.join(" ");
        // disambiguate collisions deterministically
        let mut extra = 0usize;
        while used.contains(&name) {
            name = format!("{} {}", words.join(" "), search.pool[extra % search.pool.len()]);
            extra += 1;
        }
        used.insert(name.clone());
        names.push(name);
        name_couplings.push(achieved);
    }

    // Descriptions: three independently assembled word lists per class.
    let mut descriptions = std::collections::BTreeMap::new();
    let mut desc_couplings: Vec<f64> = Vec::with_capacity(spec.n_classes);
    for class_idx in 0..spec.n_classes {
        let target = geometry.prototypes_rgb.row(class_idx).to_owned();
        let mut per_attr = Vec::with_capacity(3);
        let mut achieved_min = f64::INFINITY;
        for attr in ["what", "where", "how"] {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                &format!("desc/{class_idx}/{attr}"),
            ));
            let (words, achieved) = if spec.text_visual_coupling > 0.0 {
                search.assemble(
                    &target,
                    spec.text_visual_coupling,
                    spec.max_desc_words,
                    &mut rng,
                )
            } else {
                (search.random_words(spec.max_desc_words.min(8), &mut rng), 0.0)
            };
            achieved_min = achieved_min.min(achieved);
            per_attr.push(words.join(" "));
        }
        desc_couplings.push(achieved_min);
        descriptions.insert(
            names[class_idx].clone(),
            ClassDescription {
                what: per_attr[0].clone(),
                where_: per_attr[1].clone(),
                how: per_attr[2].clone(),
            },
        );
    }

    // Videos: classes assigned round-robin so every class appears in
    // training; instances packed without overlap.
    let mut videos = Vec::new();
    let class_names = names.clone();
    for (subset, count, tag) in [
        (Subset::Train, spec.n_train_videos, "train"),
        (Subset::Test, spec.n_test_videos, "test"),
    ] {
        for idx in 0..count {
            let class_idx = idx % spec.n_classes;
            let video_id = format!("{tag}_{idx:04}");
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("video/{video_id}")));
            let annotations =
                plant_instances(spec, &mut rng, &class_names[class_idx]).map_err(|e| {
                    Error::validation(format!("video {video_id}: {e}"))
                })?;

            let instances: Vec<ActionInstance> = annotations
                .iter()
                .map(|a| ActionInstance::new(a.start, a.end, a.class.clone()))
                .collect::<Result<_>>()?;
            let rgb = stub_visual_features(
                Stream::Rgb,
                &video_id,
                spec.snippets,
                &class_names,
                &geometry.prototypes_rgb,
                &instances,
                spec.noise,
                spec.seed,
            )?;
            let flow = stub_visual_features(
                Stream::Flow,
                &video_id,
                spec.snippets,
                &class_names,
                &geometry.prototypes_flow,
                &instances,
                spec.noise,
                spec.seed,
            )?;
            let rgb_file = format!("{video_id}.rgb.f32");
            let flow_file = format!("{video_id}.flow.f32");
            crate::data::write_f32_matrix(&out_dir.join(&rgb_file), &rgb)?;
            crate::data::write_f32_matrix(&out_dir.join(&flow_file), &flow)?;
            videos.push(ManifestVideo {
                id: video_id,
                num_snippets: spec.snippets,
                rgb_file,
                flow_file,
                subset,
                annotations,
            });
        }
    }

    let meta = serde_json::json!({
        "generator": "synthdata",
        "latent_rank": spec.rank(),
        "coupling_target": spec.text_visual_coupling,
        "description_coupling_min": desc_couplings.iter().cloned().fold(f64::INFINITY, f64::min),
        "description_coupling_mean":
            desc_couplings.iter().sum::<f64>() / desc_couplings.len().max(1) as f64,
        "name_coupling_mean":
            name_couplings.iter().sum::<f64>() / name_couplings.len().max(1) as f64,
    });
    let manifest = Manifest {
        classes: names,
        d_rgb: spec.d_rgb,
        d_flow: spec.d_flow,
        videos,
        meta: Some(meta),
    };
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    save_descriptions(&out_dir.join("descriptions.json"), &descriptions)?;
    Ok(manifest_path)
}

/// Place `k` non-overlapping instances (gap >= 1 snippet) of one class.
fn plant_instances(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    class: &str,
) -> Result<Vec<ManifestAnnotation>> {
    let k = rng.gen_range(spec.instances_per_video.0..=spec.instances_per_video.1);
    if k == 0 {
        return Ok(Vec::new());
    }
    let lengths: Vec<usize> = (0..k)
        .map(|_| rng.gen_range(spec.length_range.0..=spec.length_range.1))
        .collect();
    let needed: usize = lengths.iter().sum::<usize>() + (k - 1);
    if needed > spec.snippets {
        return Err(Error::validation(format!(
            "cannot fit {k} instances totalling {needed} snippets into T={}",
            spec.snippets
        )));
    }
    'attempt: for _ in 0..200 {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(k);
        for &len in &lengths {
            let start = rng.gen_range(0..=spec.snippets - len);
            let candidate = (start, start + len);
            // require a >= 1 snippet gap between instances
            if placed
                .iter()
                .any(|&(s, e)| candidate.0 < e + 1 && s < candidate.1 + 1)
            {
                continue 'attempt;
            }
            placed.push(candidate);
        }
        placed.sort();
        return Ok(placed
            .into_iter()
            .map(|(s, e)| ManifestAnnotation {
                start: s as f64,
                end: e as f64,
                class: class.to_string(),
            })
            .collect());
    }
    Err(Error::validation(format!(
        "failed to pack {k} instances into T={} after 200 attempts",
        spec.snippets
    )))
}
