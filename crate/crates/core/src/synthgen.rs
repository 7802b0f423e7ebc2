//! Synthetic underwater renderings from RGB-D scenes.
//!
//! For each water type and parameter draw the renderer builds an
//! illumination field from surface light and a Gaussian artificial beam,
//! derives the background light, and degrades the clean scene:
//!
//! ```text
//! E(x) = ω_a·E_S·e^{−c·D} + ω_b·E_A(x)·e^{−c·d(x)}
//! B(x) = κ·E(x) / c
//! I(x) = t(x)·J(x)·E(x)/E_S + B(x)·(1 − t(x)),   t(x) = e^{−c·d(x)}
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::CorpusIndex;
use crate::error::{Error, Result};
use crate::image::{DepthMap, Field3, ImageRGB, ScalarField3};
use crate::io;
use crate::rng::Rng;
use crate::uwmodel::{compose_underwater, transmission_from_depth, Attenuation};

/// Corpus depths outside this range (meters) are linearly rescaled into it.
pub const DEPTH_RANGE: (f64, f64) = (0.5, 10.0);

pub const WATER_DEPTH_RANGE: (f64, f64) = (5.0, 20.0);
pub const SURFACE_LIGHT_RANGE: (f64, f64) = (0.7, 1.0);
pub const ARTIFICIAL_PEAK_RANGE: (f64, f64) = (0.7, 1.0);
pub const SIGMA_RATE_RANGE: (f64, f64) = (0.2, 1.1);
pub const KAPPA_RANGE: (f64, f64) = (0.7, 1.1);

/// The nine water types: five Jerlov classes plus blue, green and yellow casts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WaterType {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "B")]
    Blue,
    #[serde(rename = "3")]
    Coastal3,
    #[serde(rename = "G")]
    Green,
    #[serde(rename = "5")]
    Coastal5,
    #[serde(rename = "7")]
    Coastal7,
    #[serde(rename = "Y")]
    Yellow,
}

impl WaterType {
    pub const ALL: [WaterType; 9] = [
        WaterType::I,
        WaterType::II,
        WaterType::III,
        WaterType::Blue,
        WaterType::Coastal3,
        WaterType::Green,
        WaterType::Coastal5,
        WaterType::Coastal7,
        WaterType::Yellow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WaterType::I => "I",
            WaterType::II => "II",
            WaterType::III => "III",
            WaterType::Blue => "B",
            WaterType::Coastal3 => "3",
            WaterType::Green => "G",
            WaterType::Coastal5 => "5",
            WaterType::Coastal7 => "7",
            WaterType::Yellow => "Y",
        }
    }

    /// Per-meter decay factors `e^{−c}` in (R, G, B) order.
    pub fn factors(self) -> [f64; 3] {
        match self {
            WaterType::I => [0.805, 0.961, 0.982],
            WaterType::II => [0.8, 0.925, 0.94],
            WaterType::III => [0.75, 0.885, 0.89],
            WaterType::Blue => [0.70, 0.80, 0.88],
            WaterType::Coastal3 => [0.71, 0.82, 0.8],
            WaterType::Green => [0.69, 0.79, 0.75],
            WaterType::Coastal5 => [0.67, 0.73, 0.67],
            WaterType::Coastal7 => [0.62, 0.61, 0.5],
            WaterType::Yellow => [0.61, 0.60, 0.40],
        }
    }

    pub fn attenuation(self) -> Attenuation {
        Attenuation::new(self.factors()).expect("table factors are in (0, 1)")
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&w| w == self).unwrap() as u64
    }
}

impl fmt::Display for WaterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaterType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown water type {s:?}")))
    }
}

/// One draw of every rendering parameter for a water type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub water_type: WaterType,
    /// Water depth `D` in meters.
    pub water_depth: f64,
    /// Surface light `E_S` per channel.
    pub surface_light: [f64; 3],
    /// Artificial-light peak `E_art` per channel.
    pub artificial_peak: [f64; 3],
    /// Beam center `(row, col)` in pixels of `reference_shape`.
    pub light_center: [f64; 2],
    /// Image shape the center was drawn for.
    pub reference_shape: [usize; 2],
    /// Beam standard deviation as a fraction of image width.
    pub sigma_rate: f64,
    pub omega_a: f64,
    pub omega_b: f64,
    /// Camera scalar `κ`.
    pub kappa: f64,
}

impl SynthParams {
    pub fn attenuation(&self) -> Attenuation {
        self.water_type.attenuation()
    }

    /// Beam center mapped proportionally onto an image of `shape`.
    pub fn light_center_for(&self, shape: (usize, usize)) -> [f64; 2] {
        let [rh, rw] = self.reference_shape;
        if [shape.0, shape.1] == self.reference_shape {
            return self.light_center;
        }
        let map = |v: f64, from: usize, to: usize| {
            if from <= 1 {
                0.0
            } else {
                v * (to.max(1) - 1) as f64 / (from - 1) as f64
            }
        };
        [
            map(self.light_center[0], rh, shape.0),
            map(self.light_center[1], rw, shape.1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let ok = self.water_depth.is_finite()
            && self.water_depth >= 0.0
            && self.surface_light.iter().all(|&e| e > 0.0 && e.is_finite())
            && self
                .artificial_peak
                .iter()
                .all(|&e| e >= 0.0 && e.is_finite())
            && self.sigma_rate > 0.0
            && self.sigma_rate.is_finite()
            && in_range(self.omega_a, (0.0, 1.0))
            && in_range(self.omega_b, (0.0, 1.0))
            && self.kappa >= 0.0
            && self.kappa.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid synthesis parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Draws every parameter uniformly from its range, in a fixed order.
pub fn sample_params(rng: &mut Rng, water_type: WaterType, shape: (usize, usize)) -> SynthParams {
    let mut draw = |(lo, hi): (f64, f64)| rng.uniform(lo, hi).expect("ranges are ordered");
    let water_depth = draw(WATER_DEPTH_RANGE);
    let surface_light = [(); 3].map(|_| draw(SURFACE_LIGHT_RANGE));
    let artificial_peak = [(); 3].map(|_| draw(ARTIFICIAL_PEAK_RANGE));
    let light_center = [
        draw((0.0, shape.0.saturating_sub(1) as f64)),
        draw((0.0, shape.1.saturating_sub(1) as f64)),
    ];
    let sigma_rate = draw(SIGMA_RATE_RANGE);
    let omega_a = draw((0.0, 1.0));
    let kappa = draw(KAPPA_RANGE);
    SynthParams {
        water_type,
        water_depth,
        surface_light,
        artificial_peak,
        light_center,
        reference_shape: [shape.0, shape.1],
        sigma_rate,
        omega_a,
        omega_b: 1.0 - omega_a,
        kappa,
    }
}

/// Isotropic Gaussian beam `E_art·exp(−‖x − x̃‖² / 2σ²)` with `σ = rate·W`.
pub fn artificial_light_field(params: &SynthParams, shape: (usize, usize)) -> ScalarField3 {
    let (h, w) = shape;
    let sigma = params.sigma_rate * w as f64;
    let denom = 2.0 * sigma * sigma;
    let [cy, cx] = params.light_center_for(shape);
    let profile: Vec<f64> = (0..h * w)
        .map(|i| {
            let dy = (i / w) as f64 - cy;
            let dx = (i % w) as f64 - cx;
            (-(dy * dy + dx * dx) / denom).exp()
        })
        .collect();
    Field3::from_fn(h, w, |c, y, x| {
        params.artificial_peak[c] * profile[y * w + x]
    })
}

/// Illumination field `E = ω_a·E_S·e^{−c·D} + ω_b·E_A·e^{−c·d}`.
pub fn illumination(params: &SynthParams, depth: &DepthMap) -> ScalarField3 {
    let a = params.attenuation();
    let artificial = artificial_light_field(params, depth.shape());
    let ambient = [0, 1, 2]
        .map(|c| params.omega_a * params.surface_light[c] * a.survival(c, params.water_depth));
    Field3::from_fn(depth.height(), depth.width(), |c, y, x| {
        ambient[c] + params.omega_b * artificial.get(c, y, x) * a.survival(c, depth.get(y, x))
    })
}

/// `B = clamp01(κ·E / c)`.
pub fn background_light(
    illum: &ScalarField3,
    attenuation: &Attenuation,
    kappa: f64,
) -> ScalarField3 {
    let coeff = attenuation.coefficients();
    let plane = illum.plane_len();
    let mut out = illum.clone();
    for (c, &k) in coeff.iter().enumerate() {
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = (kappa * *v / k).clamp(0.0, 1.0);
        }
    }
    out
}

/// One rendered training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub degraded: ImageRGB,
    pub clean: ImageRGB,
    pub transmission: ScalarField3,
    pub background: ScalarField3,
    pub params: SynthParams,
    /// Id of the source RGB-D scene.
    pub provenance: String,
}

/// Relit scene `J·E/E_S`, the radiance term attenuated by `t`.
pub fn relight(
    clean: &ImageRGB,
    illum: &ScalarField3,
    surface_light: [f64; 3],
) -> Result<ImageRGB> {
    clean.ensure_same_shape(illum)?;
    let plane = clean.plane_len();
    let mut out = clean.clone();
    for (c, &es) in surface_light.iter().enumerate() {
        let e = &illum.data()[c * plane..(c + 1) * plane];
        for (v, &ev) in out.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(e) {
            *v *= ev / es;
        }
    }
    Ok(out)
}

/// Renders the degraded observation of `clean` at `depth` under `params`.
pub fn synthesize(
    clean: &ImageRGB,
    depth: &DepthMap,
    params: &SynthParams,
    provenance: impl Into<String>,
) -> Result<SynthSample> {
    if clean.shape() != depth.shape() {
        return Err(Error::ShapeMismatch {
            expected: clean.shape(),
            actual: depth.shape(),
        });
    }
    params.validate()?;
    let attenuation = params.attenuation();
    let transmission = transmission_from_depth(depth, &attenuation);
    let illum = illumination(params, depth);
    let background = background_light(&illum, &attenuation, params.kappa);
    let relit = relight(clean, &illum, params.surface_light)?;
    let degraded = compose_underwater(&relit, &transmission, &background)?;
    Ok(SynthSample {
        degraded,
        clean: clean.clone(),
        transmission,
        background,
        params: params.clone(),
        provenance: provenance.into(),
    })
}

/// One water type × draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub id: String,
    pub params: SynthParams,
}

/// Samples `draws_per_type` configurations for each of `types`, in order.
///
/// Draw `k` of a type uses the stream `seed → type → k`, so a subset of
/// types reproduces the same parameters as the full set.
pub fn distortion_configs(
    seed: u64,
    types: &[WaterType],
    draws_per_type: usize,
    shape: (usize, usize),
) -> Vec<DistortionConfig> {
    let root = Rng::new(seed).split(STREAM_PARAMS);
    types
        .iter()
        .flat_map(|&wt| {
            let root = root.clone();
            (0..draws_per_type).map(move |draw| {
                let mut rng = root.split(wt.index()).split(draw as u64);
                DistortionConfig {
                    id: format!("{}-{draw}", wt.name()),
                    params: sample_params(&mut rng, wt, shape),
                }
            })
        })
        .collect()
}

const STREAM_PARAMS: u64 = 1;

/// Rescales into [`DEPTH_RANGE`] when any value falls outside it.
pub fn normalize_depth(depth: &DepthMap) -> (DepthMap, bool) {
    let (lo, hi) = depth.min_max();
    if lo >= DEPTH_RANGE.0 && hi <= DEPTH_RANGE.1 {
        (depth.clone(), false)
    } else {
        (depth.rescaled(DEPTH_RANGE.0, DEPTH_RANGE.1), true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    /// Clean scene, relative to the output directory.
    pub clean: String,
    pub height: usize,
    pub width: usize,
    pub depth_rescaled: bool,
    pub rgb_sha256: String,
    pub depth_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image_id: String,
    pub distortion_id: String,
    pub degraded: String,
    pub transmission: String,
    pub background: String,
}

/// Index of a built dataset, written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub draws_per_type: usize,
    pub types: Vec<WaterType>,
    pub depth_range: [f64; 2],
    pub distortions: Vec<DistortionConfig>,
    pub images: Vec<ManifestImage>,
    pub samples: Vec<ManifestSample>,
    /// Corpus entries that could not be read.
    pub skipped: Vec<String>,
    /// Effective configuration of the producing command, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLEAN_DIR: &str = "clean";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub seed: u64,
    pub draws_per_type: usize,
    pub types: Vec<WaterType>,
    /// Echoed into the manifest.
    pub config: Option<serde_json::Value>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            draws_per_type: 3,
            types: WaterType::ALL.to_vec(),
            config: None,
        }
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

type Rendered = (ManifestImage, Vec<ManifestSample>);

fn render_image(
    entry: &crate::dataio::CorpusEntry,
    out: &Path,
    configs: &[DistortionConfig],
) -> Result<Rendered> {
    let clean = io::read_png(&entry.rgb)?;
    let depth = io::read_depth(&entry.depth)?;
    let (depth, depth_rescaled) = normalize_depth(&depth);
    let clean_rel = format!("{CLEAN_DIR}/{}.png", entry.id);
    io::write_png(&out.join(&clean_rel), &clean)?;
    let samples = configs
        .par_iter()
        .map(|cfg| {
            let sample = synthesize(&clean, &depth, &cfg.params, entry.id.clone())?;
            let stem = format!("{}/{}", cfg.id, entry.id);
            let rec = ManifestSample {
                image_id: entry.id.clone(),
                distortion_id: cfg.id.clone(),
                degraded: format!("{stem}.png"),
                transmission: format!("{stem}.t.aqf"),
                background: format!("{stem}.b.aqf"),
            };
            io::write_png(&out.join(&rec.degraded), &sample.degraded)?;
            io::write_field(&out.join(&rec.transmission), &sample.transmission)?;
            io::write_field(&out.join(&rec.background), &sample.background)?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        ManifestImage {
            id: entry.id.clone(),
            clean: clean_rel,
            height: clean.height(),
            width: clean.width(),
            depth_rescaled,
            rgb_sha256: entry.rgb_sha256.clone(),
            depth_sha256: entry.depth_sha256.clone(),
        },
        samples,
    ))
}

/// Renders every corpus scene under every distortion configuration.
///
/// Output layout under `out`: `clean/<id>.png`, `<distortion>/<id>.png`,
/// `<distortion>/<id>.t.aqf`, `<distortion>/<id>.b.aqf` and
/// `manifest.json`. Unreadable scenes are skipped with a warning. Output is
/// independent of thread count.
pub fn build_dataset(corpus: &CorpusIndex, out: &Path, opts: &BuildOptions) -> Result<Manifest> {
    if corpus.entries.is_empty() {
        return Err(Error::InsufficientData("corpus has no RGB-D pairs".into()));
    }
    if opts.draws_per_type == 0 || opts.types.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one water type and one draw".into(),
        ));
    }
    let first = &corpus.entries[0];
    let configs = distortion_configs(
        opts.seed,
        &opts.types,
        opts.draws_per_type,
        (first.height, first.width),
    );
    mkdir(out)?;
    mkdir(&out.join(CLEAN_DIR))?;
    for cfg in &configs {
        mkdir(&out.join(&cfg.id))?;
    }
    let rendered: Vec<(PathBuf, Result<Rendered>)> = corpus
        .entries
        .par_iter()
        .map(|e| (e.rgb.clone(), render_image(e, out, &configs)))
        .collect();

    let mut images = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (path, result) in rendered {
        match result {
            Ok((img, recs)) => {
                images.push(img);
                samples.extend(recs);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(format!("{}: {e}", path.display()));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::InsufficientData(
            "no corpus entry could be rendered".into(),
        ));
    }
    let manifest = Manifest {
        seed: opts.seed,
        draws_per_type: opts.draws_per_type,
        types: opts.types.clone(),
        depth_range: [DEPTH_RANGE.0, DEPTH_RANGE.1],
        distortions: configs,
        images,
        samples,
        skipped,
        config: opts.config.clone(),
    };
    manifest.save(out)?;
    Ok(manifest)
}
