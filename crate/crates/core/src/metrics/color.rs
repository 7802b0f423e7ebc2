//! sRGB (D65) to CIELab and HSV saturation.

/// D65 reference white.
pub const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_xyz([r, g, b]: [f64; 3]) -> [f64; 3] {
    [
        0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b,
        0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b,
        0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b,
    ]
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// `[L*, a*, b*]` of an sRGB triple in [0, 1].
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = linear_to_xyz(rgb.map(srgb_to_linear));
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(xyz[i] / WHITE_D65[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn chroma([_, a, b]: [f64; 3]) -> f64 {
    a.hypot(b)
}

/// HSV saturation `(max − min)/max`, zero for black.
pub fn hsv_saturation([r, g, b]: [f64; 3]) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_lab_values() {
        let white = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(srgb_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
        // Pure red, reference L*a*b* (53.24, 80.09, 67.20).
        let red = srgb_to_lab([1.0, 0.0, 0.0]);
        for (got, want) in red.iter().zip([53.24, 80.09, 67.20]) {
            assert!((got - want).abs() < 0.01, "{red:?}");
        }
    }

    #[test]
    fn saturation() {
        assert_eq!(hsv_saturation([0.0; 3]), 0.0);
        assert_eq!(hsv_saturation([0.5, 0.5, 0.5]), 0.0);
        assert_eq!(hsv_saturation([1.0, 0.0, 0.5]), 1.0);
        assert!((hsv_saturation([0.8, 0.4, 0.6]) - 0.5).abs() < 1e-15);
    }
}
