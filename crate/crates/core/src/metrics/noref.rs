use serde::{Deserialize, Serialize};

use super::color::{chroma, hsv_saturation, srgb_to_lab};
use crate::image::{ImageRGB, BLUE, GREEN, RED};

pub const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2575];
pub const UIQM_WEIGHTS: [f64; 3] = [0.0282, 0.2953, 3.5753];

/// Largest CIELab chroma reachable in sRGB (pure blue); divides the
/// chroma standard deviation.
pub const CHROMA_MAX: f64 = 133.807_614_853_761_66;
/// Share of pixels averaged at each end of the L* distribution.
pub const CONTRAST_TAIL: f64 = 0.01;
pub const L_MAX: f64 = 100.0;

/// Share of sorted opponent values trimmed from each end for UICM.
pub const UICM_TRIM: f64 = 0.1;
pub const UICM_MEAN_WEIGHT: f64 = -0.0268;
pub const UICM_SPREAD_WEIGHT: f64 = 0.1586;
pub const BLOCK: usize = 8;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UciqeReport {
    pub sigma_c: f64,
    pub con_l: f64,
    pub mu_s: f64,
    pub score: f64,
}

impl UciqeReport {
    pub fn from_components(sigma_c: f64, con_l: f64, mu_s: f64) -> Self {
        let [a, b, c] = UCIQE_WEIGHTS;
        Self {
            sigma_c,
            con_l,
            mu_s,
            score: a * sigma_c + b * con_l + c * mu_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiqmReport {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub score: f64,
}

impl UiqmReport {
    pub fn from_components(uicm: f64, uism: f64, uiconm: f64) -> Self {
        let [a, b, c] = UIQM_WEIGHTS;
        Self {
            uicm,
            uism,
            uiconm,
            score: a * uicm + b * uism + c * uiconm,
        }
    }
}

fn pixel(img: &ImageRGB, i: usize) -> [f64; 3] {
    [
        img.channel(RED)[i],
        img.channel(GREEN)[i],
        img.channel(BLUE)[i],
    ]
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()).sqrt()
}

/// Chroma spread, luminance contrast and mean saturation in CIELab/HSV.
pub fn uciqe(img: &ImageRGB) -> UciqeReport {
    let n = img.plane_len();
    if n == 0 {
        return UciqeReport::from_components(0.0, 0.0, 0.0);
    }
    let mut lightness = Vec::with_capacity(n);
    let mut chromas = Vec::with_capacity(n);
    let mut sats = Vec::with_capacity(n);
    for i in 0..n {
        let rgb = pixel(img, i);
        let lab = srgb_to_lab(rgb);
        lightness.push(lab[0]);
        chromas.push(chroma(lab));
        sats.push(hsv_saturation(rgb));
    }
    lightness.sort_by(f64::total_cmp);
    let tail = ((CONTRAST_TAIL * n as f64).ceil() as usize).max(1);
    let con_l = (mean(&lightness[n - tail..]) - mean(&lightness[..tail])) / L_MAX;
    UciqeReport::from_components(std_dev(&chromas) / CHROMA_MAX, con_l, mean(&sats))
}

/// Asymmetric alpha-trimmed mean and the variance about it.
fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    let k = v.len();
    v.sort_by(f64::total_cmp);
    let lo = (UICM_TRIM * k as f64).ceil() as usize;
    let hi = (UICM_TRIM * k as f64).floor() as usize;
    let mu = if lo + hi < k {
        mean(&v[lo..k - hi])
    } else {
        mean(&v)
    };
    let var = mean(&v.iter().map(|x| (x - mu) * (x - mu)).collect::<Vec<_>>());
    (mu, var)
}

fn uicm(img: &ImageRGB) -> f64 {
    let n = img.plane_len();
    let (mut rg, mut yb) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let [r, g, b] = pixel(img, i).map(|v| v * 255.0);
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let (mrg, vrg) = trimmed_stats(rg);
    let (myb, vyb) = trimmed_stats(yb);
    UICM_MEAN_WEIGHT * mrg.hypot(myb) + UICM_SPREAD_WEIGHT * (vrg + vyb).sqrt()
}

/// Sobel gradient magnitude with replicated borders.
fn sobel(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        plane[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = gx.hypot(gy);
        }
    }
    out
}

/// Min and max of each `BLOCK`×`BLOCK` tile; edge tiles may be smaller.
fn block_extrema(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by..(by + BLOCK).min(h) {
                for &v in &plane[y * w + bx..y * w + (bx + BLOCK).min(w)] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            out.push((lo, hi));
        }
    }
    out
}

/// Enhancement measure: `2/(k1·k2)·Σ ln(max/min)`, skipping tiles with a
/// zero extreme.
fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let blocks = block_extrema(plane, h, w);
    let sum: f64 = blocks
        .iter()
        .filter(|(lo, hi)| *lo > 0.0 && *hi > 0.0)
        .map(|(lo, hi)| (hi / lo).ln())
        .sum();
    2.0 * sum / blocks.len() as f64
}

fn uism(img: &ImageRGB) -> f64 {
    let (h, w) = img.shape();
    [RED, GREEN, BLUE]
        .iter()
        .zip(LUMA)
        .map(|(&c, weight)| {
            let plane: Vec<f64> = img.channel(c).iter().map(|v| v * 255.0).collect();
            let edges: Vec<f64> = sobel(&plane, h, w)
                .iter()
                .zip(&plane)
                .map(|(e, v)| e * v)
                .collect();
            weight * eme(&edges, h, w)
        })
        .sum()
}

/// Log-AMEE: `−1/(k1·k2)·Σ r·ln r` with `r = (max − min)/(max + min)`
/// per tile; tiles with `r = 0` contribute nothing.
fn uiconm(img: &ImageRGB) -> f64 {
    let (h, w) = img.shape();
    let gray: Vec<f64> = (0..img.plane_len())
        .map(|i| {
            let p = pixel(img, i);
            255.0 * (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        })
        .collect();
    let blocks = block_extrema(&gray, h, w);
    let sum: f64 = blocks
        .iter()
        .filter(|(lo, hi)| hi + lo > 0.0 && hi - lo > 0.0)
        .map(|(lo, hi)| {
            let r = (hi - lo) / (hi + lo);
            r * r.ln()
        })
        .sum();
    -sum / blocks.len() as f64
}

/// Colorfulness, sharpness and contrast measured on the 0–255 scale.
pub fn uiqm(img: &ImageRGB) -> UiqmReport {
    if img.plane_len() == 0 {
        return UiqmReport::from_components(0.0, 0.0, 0.0);
    }
    UiqmReport::from_components(uicm(img), uism(img), uiconm(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Field3;
    use crate::rng::Rng;

    #[test]
    fn component_injection() {
        assert!((UciqeReport::from_components(1.0, 1.0, 1.0).score - 1.0).abs() < 1e-9);
        assert!((UciqeReport::from_components(0.5, 0.8, 0.3).score - 0.53085).abs() < 1e-12);
        assert!((UiqmReport::from_components(1.0, 1.0, 1.0).score - 3.8988).abs() < 1e-9);
        assert_eq!(UiqmReport::from_components(0.0, 0.0, 0.0).score, 0.0);
    }

    #[test]
    fn chroma_max_is_the_gamut_maximum() {
        assert!((chroma(srgb_to_lab([0.0, 0.0, 1.0])) - CHROMA_MAX).abs() < 1e-9);
        let steps = 24;
        let mut best: f64 = 0.0;
        for r in 0..=steps {
            for g in 0..=steps {
                for b in 0..=steps {
                    let rgb = [r, g, b].map(|v| v as f64 / steps as f64);
                    best = best.max(chroma(srgb_to_lab(rgb)));
                }
            }
        }
        assert!(best <= CHROMA_MAX + 1e-9);
    }

    #[test]
    fn uniform_gray_scores_zero() {
        let gray = Field3::filled(16, 16, 0.5);
        let u = uciqe(&gray);
        assert!(u.sigma_c.abs() < 1e-12 && u.con_l == 0.0 && u.mu_s == 0.0);
        assert!(u.score.abs() < 1e-12);
        let q = uiqm(&gray);
        assert_eq!(q.uism, 0.0);
        assert_eq!(q.uiconm, 0.0);
        assert!(q.uicm.abs() < 1e-12);
    }

    #[test]
    fn contrast_of_a_black_white_split() {
        let img = Field3::from_fn(10, 10, |_, y, _| if y < 5 { 0.0 } else { 1.0 });
        let u = uciqe(&img);
        assert!((u.con_l - 1.0).abs() < 1e-3);
        assert_eq!(u.mu_s, 0.0);
    }

    #[test]
    fn trimmed_mean_drops_tails() {
        let v: Vec<f64> = (0..10).map(f64::from).chain([1000.0]).collect();
        // 11 values: drop 2 lowest, 1 highest.
        let (mu, _) = trimmed_stats(v);
        assert!((mu - (2..10).sum::<i32>() as f64 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn noise_is_sharper_than_a_ramp() {
        let mut rng = Rng::new(1);
        let noisy = Field3::from_fn(32, 32, |_, _, _| rng.uniform(0.1, 1.0).unwrap());
        let ramp = Field3::from_fn(32, 32, |_, _, x| 0.1 + x as f64 / 40.0);
        assert!(uiqm(&noisy).uism > uiqm(&ramp).uism);
    }

    #[test]
    fn log_amee_of_one_block() {
        // Gray levels 50 and 150 in one 8×8 tile: r = 100/200.
        let img = Field3::from_fn(
            8,
            8,
            |_, y, _| if y < 4 { 50.0 / 255.0 } else { 150.0 / 255.0 },
        );
        let want = -0.5 * 0.5f64.ln();
        assert!((uiqm(&img).uiconm - want).abs() < 1e-12);
    }

    #[test]
    fn eme_of_one_block() {
        let plane: Vec<f64> = (0..64).map(|i| if i == 0 { 2.0 } else { 8.0 }).collect();
        assert!((eme(&plane, 8, 8) - 2.0 * 4f64.ln()).abs() < 1e-12);
        let zeros = vec![0.0; 64];
        assert_eq!(eme(&zeros, 8, 8), 0.0);
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(2);
        let img = Field3::from_fn(12, 20, |_, _, _| rng.uniform(0.0, 1.0).unwrap());
        assert_eq!(uciqe(&img), uciqe(&img));
        assert_eq!(uiqm(&img), uiqm(&img));
    }
}
