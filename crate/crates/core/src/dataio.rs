//! Corpus and dataset ingestion, train/validation splitting and task sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::TrainExample;
use crate::image::{DepthMap, Field3, ImageRGB};
use crate::io;
use crate::rng::Rng;
use crate::synthgen::{DistortionConfig, Manifest, SynthParams, SynthSample};

const DEPTH_SUFFIX: &str = ".depth.aqf";
const REF_SUFFIX: &str = ".ref.png";
const PNG_SUFFIX: &str = ".png";

/// A validated RGB-D scene on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub height: usize,
    pub width: usize,
    pub rgb_sha256: String,
    pub depth_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    /// Sorted by id.
    pub entries: Vec<CorpusEntry>,
    /// Orphans and rejected pairs, one line each.
    pub warnings: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn list_dir(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            if let Some(name) = entry.file_name().to_str() {
                names.push((name.to_owned(), entry.path()));
            }
        }
    }
    names.sort();
    Ok(names)
}

fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

/// Pairs `<id>.png` with `<id>.depth.aqf` in `dir`.
///
/// Orphans and pairs whose dimensions disagree are reported in
/// `warnings`; no valid pair at all is an error.
pub fn index_corpus(dir: &Path) -> Result<CorpusIndex> {
    let mut rgb = BTreeMap::new();
    let mut depth = BTreeMap::new();
    for (name, path) in list_dir(dir)? {
        if let Some(id) = name.strip_suffix(DEPTH_SUFFIX) {
            depth.insert(id.to_owned(), path);
        } else if let Some(id) = name.strip_suffix(PNG_SUFFIX) {
            rgb.insert(id.to_owned(), path);
        }
    }
    let mut index = CorpusIndex::default();
    for id in depth.keys().filter(|id| !rgb.contains_key(*id)) {
        index
            .warnings
            .push(format!("orphan depth map {id}{DEPTH_SUFFIX}"));
    }
    for (id, rgb_path) in rgb {
        let Some(depth_path) = depth.get(&id) else {
            index
                .warnings
                .push(format!("orphan image {id}{PNG_SUFFIX}"));
            continue;
        };
        let checked = png_dims(&rgb_path).and_then(|dims| {
            let d = io::FloatGrid::read(depth_path)?;
            if d.channels != 1 {
                return Err(Error::format(
                    depth_path,
                    format!("depth has {} channels", d.channels),
                ));
            }
            if (d.height, d.width) != dims {
                return Err(Error::ShapeMismatch {
                    expected: dims,
                    actual: (d.height, d.width),
                });
            }
            Ok(dims)
        });
        match checked {
            Ok((height, width)) => index.entries.push(CorpusEntry {
                rgb_sha256: sha256_file(&rgb_path)?,
                depth_sha256: sha256_file(depth_path)?,
                id,
                rgb: rgb_path,
                depth: depth_path.clone(),
                height,
                width,
            }),
            Err(e) => index.warnings.push(format!("rejected {id}: {e}")),
        }
    }
    for w in &index.warnings {
        log::warn!("{}: {w}", dir.display());
    }
    if index.entries.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no valid RGB-D pairs in {}",
            dir.display()
        )));
    }
    Ok(index)
}

/// Writes one scene in corpus layout.
pub fn write_corpus_entry(dir: &Path, id: &str, rgb: &ImageRGB, depth: &DepthMap) -> Result<()> {
    io::write_png(&dir.join(format!("{id}{PNG_SUFFIX}")), rgb)?;
    io::write_depth(&dir.join(format!("{id}{DEPTH_SUFFIX}")), depth)
}

/// A degraded image and its reference rendition.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub degraded: ImageRGB,
    pub reference: ImageRGB,
}

impl ImagePair {
    pub fn to_example(&self) -> TrainExample {
        TrainExample {
            input: self.degraded.clone(),
            clean: self.reference.clone(),
            background: None,
            transmission: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pub pairs: Vec<ImagePair>,
    pub warnings: Vec<String>,
}

/// Loads `<id>.png` + `<id>.ref.png` pairs, skipping incomplete or
/// mismatched ones with a warning.
pub fn load_pairs(dir: &Path) -> Result<PairSet> {
    let files = list_dir(dir)?;
    let refs: BTreeMap<String, PathBuf> = files
        .iter()
        .filter_map(|(n, p)| {
            n.strip_suffix(REF_SUFFIX)
                .map(|id| (id.to_owned(), p.clone()))
        })
        .collect();
    let mut set = PairSet::default();
    for (name, path) in &files {
        if name.ends_with(REF_SUFFIX) {
            continue;
        }
        let Some(id) = name.strip_suffix(PNG_SUFFIX) else {
            continue;
        };
        let Some(ref_path) = refs.get(id) else {
            set.warnings
                .push(format!("{name}: missing reference {id}{REF_SUFFIX}"));
            continue;
        };
        let loaded = io::read_png(path).and_then(|d| {
            let r = io::read_png(ref_path)?;
            d.ensure_same_shape(&r)?;
            Ok((d, r))
        });
        match loaded {
            Ok((degraded, reference)) => set.pairs.push(ImagePair {
                id: id.to_owned(),
                degraded,
                reference,
            }),
            Err(e) => set.warnings.push(format!("rejected {id}: {e}")),
        }
    }
    for id in refs.keys() {
        if !files.iter().any(|(n, _)| n == &format!("{id}{PNG_SUFFIX}")) {
            set.warnings
                .push(format!("orphan reference {id}{REF_SUFFIX}"));
        }
    }
    for w in &set.warnings {
        log::warn!("{}: {w}", dir.display());
    }
    Ok(set)
}

/// A rendered example tagged with its source scene.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image_id: String,
    pub example: TrainExample,
}

impl From<SynthSample> for LabeledExample {
    fn from(s: SynthSample) -> Self {
        Self {
            image_id: s.provenance,
            example: TrainExample {
                input: s.degraded,
                clean: s.clean,
                background: Some(s.background),
                transmission: Some(s.transmission),
            },
        }
    }
}

/// All renderings for one distortion configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSet {
    pub id: String,
    pub params: SynthParams,
    pub samples: Vec<LabeledExample>,
}

/// Distortion sets split into train and validation by configuration.
#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub sets: Vec<DistortionSet>,
    /// Indices into `sets`.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Number of configurations held out: `ceil(fraction·n)`, at least one
/// when `n ≥ 2`, never all of them.
pub fn validation_count(n: usize, fraction: f64) -> usize {
    if n < 2 || fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64).ceil() as usize).clamp(1, n - 1)
}

const STREAM_SPLIT: u64 = 2;

impl MetaDataset {
    /// Holds out configurations chosen by a seeded shuffle of their ids.
    pub fn new(mut sets: Vec<DistortionSet>, val_fraction: f64, seed: u64) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InsufficientData(
                "no distortion configurations".into(),
            ));
        }
        sets.sort_by(|a, b| a.id.cmp(&b.id));
        let n = sets.len();
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(seed).split(STREAM_SPLIT).shuffle(&mut order);
        let n_val = validation_count(n, val_fraction);
        let mut validation = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            sets,
            train,
            validation,
        })
    }

    /// Renders `scenes` under each configuration in memory.
    pub fn render(
        scenes: &[(String, ImageRGB, DepthMap)],
        configs: &[DistortionConfig],
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let sets = configs
            .iter()
            .map(|cfg| {
                let samples = scenes
                    .iter()
                    .map(|(id, rgb, depth)| {
                        crate::synthgen::synthesize(rgb, depth, &cfg.params, id.clone())
                            .map(LabeledExample::from)
                    })
                    .collect::<Result<_>>()?;
                Ok(DistortionSet {
                    id: cfg.id.clone(),
                    params: cfg.params.clone(),
                    samples,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(sets, val_fraction, seed)
    }

    /// Loads a directory written by [`crate::synthgen::build_dataset`].
    pub fn load(dir: &Path, val_fraction: f64, seed: u64) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let clean: BTreeMap<&str, ImageRGB> = manifest
            .images
            .iter()
            .map(|img| Ok((img.id.as_str(), io::read_png(&dir.join(&img.clean))?)))
            .collect::<Result<_>>()?;
        let mut sets: BTreeMap<&str, DistortionSet> = manifest
            .distortions
            .iter()
            .map(|d| {
                (
                    d.id.as_str(),
                    DistortionSet {
                        id: d.id.clone(),
                        params: d.params.clone(),
                        samples: Vec::new(),
                    },
                )
            })
            .collect();
        for s in &manifest.samples {
            let clean = clean.get(s.image_id.as_str()).ok_or_else(|| {
                Error::format(
                    dir.join("manifest.json"),
                    format!("unknown image {}", s.image_id),
                )
            })?;
            let set = sets.get_mut(s.distortion_id.as_str()).ok_or_else(|| {
                Error::format(
                    dir.join("manifest.json"),
                    format!("unknown distortion {}", s.distortion_id),
                )
            })?;
            let example = TrainExample {
                input: io::read_png(&dir.join(&s.degraded))?,
                clean: clean.clone(),
                background: Some(io::read_field(&dir.join(&s.background))?),
                transmission: Some(io::read_field(&dir.join(&s.transmission))?),
            };
            example.validate()?;
            set.samples.push(LabeledExample {
                image_id: s.image_id.clone(),
                example,
            });
        }
        Self::new(sets.into_values().collect(), val_fraction, seed)
    }

    pub fn train_sets(&self) -> impl Iterator<Item = &DistortionSet> {
        self.train.iter().map(|&i| &self.sets[i])
    }

    pub fn validation_sets(&self) -> impl Iterator<Item = &DistortionSet> {
        self.validation.iter().map(|&i| &self.sets[i])
    }
}

/// Support and query examples drawn from one distortion configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<E = TrainExample> {
    pub distortion_id: String,
    pub support: Vec<E>,
    pub query: Vec<E>,
}

pub type TaskBatch = Vec<Task>;

/// Crops a `size`×`size` window at a random position, mirror-padding
/// first when the image is smaller. The same window is applied to every
/// field of the example.
pub fn random_crop(example: &TrainExample, size: usize, rng: &mut Rng) -> Result<TrainExample> {
    let (h, w) = example.shape();
    let (ph, pw) = (h.max(size), w.max(size));
    let top = rng.below(ph - size + 1);
    let left = rng.below(pw - size + 1);
    crop_example(example, top, left, size)
}

/// Centered `size`×`size` window, mirror-padded when needed.
pub fn center_crop(example: &TrainExample, size: usize) -> Result<TrainExample> {
    let (h, w) = example.shape();
    let (ph, pw) = (h.max(size), w.max(size));
    crop_example(example, (ph - size) / 2, (pw - size) / 2, size)
}

fn crop_example(
    example: &TrainExample,
    top: usize,
    left: usize,
    size: usize,
) -> Result<TrainExample> {
    let (h, w) = example.shape();
    let (ph, pw) = (h.max(size), w.max(size));
    let cut = |f: &Field3| -> Result<Field3> {
        let padded = if (ph, pw) == (h, w) {
            std::borrow::Cow::Borrowed(f)
        } else {
            std::borrow::Cow::Owned(f.reflect_pad(ph, pw)?)
        };
        padded.crop(top, left, size, size)
    };
    Ok(TrainExample {
        input: cut(&example.input)?,
        clean: cut(&example.clean)?,
        background: example.background.as_ref().map(cut).transpose()?,
        transmission: example.transmission.as_ref().map(cut).transpose()?,
    })
}

/// Draws `k` distinct training configurations, and from each disjoint
/// support and query samples cropped to `patch`.
pub fn sample_tasks(
    ds: &MetaDataset,
    rng: &mut Rng,
    k: usize,
    support_n: usize,
    query_n: usize,
    patch: usize,
) -> Result<TaskBatch> {
    if k == 0 || support_n == 0 || query_n == 0 {
        return Err(Error::InvalidArgument(
            "k, support and query sizes must be positive".into(),
        ));
    }
    if ds.train.len() < k {
        return Err(Error::InsufficientData(format!(
            "need {k} training distortion configurations, have {}",
            ds.train.len()
        )));
    }
    let need = support_n + query_n;
    if let Some(set) = ds.train_sets().find(|s| s.samples.len() < need) {
        return Err(Error::InsufficientData(format!(
            "configuration {} has {} samples, need {need} ({support_n} support + {query_n} query)",
            set.id,
            set.samples.len()
        )));
    }
    let picks = rng.choose_distinct(ds.train.len(), k);
    picks
        .into_iter()
        .map(|p| {
            let set = &ds.sets[ds.train[p]];
            let chosen = rng.choose_distinct(set.samples.len(), need);
            let mut crops = chosen
                .iter()
                .map(|&i| random_crop(&set.samples[i].example, patch, rng))
                .collect::<Result<Vec<_>>>()?;
            let query = crops.split_off(support_n);
            Ok(Task {
                distortion_id: set.id.clone(),
                support: crops,
                query,
            })
        })
        .collect()
}
