//! Underwater image formation: `I = J·t + B·(1 − t)` with `t = e^{−c·d}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp01, DepthMap, Field3, ImageRGB, ScalarField3};

/// Lower bound on the transmission divisor when inverting the model.
pub const T_FLOOR: f64 = 0.05;

/// Per-channel decay factor per meter, `e^{−c}`, in (R, G, B) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attenuation {
    factors: [f64; 3],
}

impl Attenuation {
    /// Each factor must lie strictly inside (0, 1).
    pub fn new(factors: [f64; 3]) -> Result<Self> {
        for (c, &f) in factors.iter().enumerate() {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "attenuation factor {f} for channel {c} not in (0, 1)"
                )));
            }
        }
        Ok(Self { factors })
    }

    /// Decay factor per meter, `e^{−c_λ}`.
    pub fn factors(&self) -> [f64; 3] {
        self.factors
    }

    pub fn factor(&self, channel: usize) -> f64 {
        self.factors[channel]
    }

    /// Attenuation coefficient `c_λ = −ln(factor)` in 1/m.
    pub fn coefficient(&self, channel: usize) -> f64 {
        -self.factors[channel].ln()
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| self.coefficient(c))
    }

    /// `factor^meters`, the surviving fraction over a path of `meters`.
    #[inline]
    pub fn survival(&self, channel: usize, meters: f64) -> f64 {
        self.factors[channel].powf(meters)
    }
}

/// `t_λ(x) = (e^{−c_λ})^{d(x)}`, in (0, 1].
pub fn transmission_from_depth(depth: &DepthMap, attenuation: &Attenuation) -> ScalarField3 {
    Field3::from_fn(depth.height(), depth.width(), |c, y, x| {
        attenuation.survival(c, depth.get(y, x))
    })
}

/// Forward model `I = J·t + B·(1 − t)`, clamped to [0, 1].
pub fn compose_underwater(
    clean: &ImageRGB,
    transmission: &ScalarField3,
    background: &ScalarField3,
) -> Result<ImageRGB> {
    clean.ensure_same_shape(transmission)?;
    clean.ensure_same_shape(background)?;
    let data = clean
        .data()
        .iter()
        .zip(transmission.data())
        .zip(background.data())
        .map(|((&j, &t), &b)| j * t + b * (1.0 - t))
        .collect();
    clamp01(&Field3::new(clean.height(), clean.width(), data)?)
}

/// Algebraic inverse `J = (I − B·(1 − t)) / max(t, T_FLOOR)`, clamped to [0, 1].
pub fn invert_underwater(
    observed: &ImageRGB,
    transmission: &ScalarField3,
    background: &ScalarField3,
) -> Result<ImageRGB> {
    observed.ensure_same_shape(transmission)?;
    observed.ensure_same_shape(background)?;
    let data = observed
        .data()
        .iter()
        .zip(transmission.data())
        .zip(background.data())
        .map(|((&i, &t), &b)| (i - b * (1.0 - t)) / t.max(T_FLOOR))
        .collect();
    clamp01(&Field3::new(observed.height(), observed.width(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_field(rng: &mut Rng, h: usize, w: usize, lo: f64, hi: f64) -> Field3 {
        Field3::from_fn(h, w, |_, _, _| rng.uniform(lo, hi).unwrap())
    }

    #[test]
    fn zero_depth_is_clear() {
        let a = Attenuation::new([0.8, 0.9, 0.95]).unwrap();
        let t = transmission_from_depth(&DepthMap::filled(2, 3, 0.0).unwrap(), &a);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_meter_blue_type_one() {
        let a = Attenuation::new([0.805, 0.961, 0.982]).unwrap();
        let t = transmission_from_depth(&DepthMap::filled(1, 1, 1.0).unwrap(), &a);
        assert!((t.get(2, 0, 0) - 0.982).abs() < 1e-15);
    }

    #[test]
    fn exponent_law() {
        let a = Attenuation::new([0.62, 0.61, 0.5]).unwrap();
        let t = transmission_from_depth(&DepthMap::filled(1, 1, 2.0).unwrap(), &a);
        assert_eq!(t.get(2, 0, 0), 0.25);
    }

    #[test]
    fn attenuation_bounds() {
        assert!(Attenuation::new([1.0, 0.5, 0.5]).is_err());
        assert!(Attenuation::new([0.0, 0.5, 0.5]).is_err());
        let a = Attenuation::new([0.61, 0.5, 0.5]).unwrap();
        assert!((a.coefficient(0) - 0.494_296_321_814_617).abs() < 1e-12);
    }

    #[test]
    fn compose_scalar_example() {
        let j = Field3::filled(1, 1, 0.8);
        let b = Field3::filled(1, 1, 0.2);
        let t = Field3::filled(1, 1, 0.5);
        let i = compose_underwater(&j, &t, &b).unwrap();
        assert!((i.get(0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compose_limits() {
        let mut rng = Rng::new(2);
        let j = random_field(&mut rng, 3, 3, 0.0, 1.0);
        let b = random_field(&mut rng, 3, 3, 0.0, 1.0);
        let clear = compose_underwater(&j, &Field3::filled(3, 3, 1.0), &b).unwrap();
        assert_eq!(clear, j);
        let murky = compose_underwater(&j, &Field3::filled(3, 3, 1e-12), &b).unwrap();
        for (m, bb) in murky.data().iter().zip(b.data()) {
            assert!((m - bb).abs() < 1e-11);
        }
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let j = Field3::zeros(2, 2);
        let t = Field3::zeros(2, 3);
        assert!(matches!(
            compose_underwater(&j, &t, &j),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invert_of_pure_background() {
        // I = B: (B − B(1 − t)) / t = B
        let b = Field3::filled(1, 1, 0.3);
        let t = Field3::filled(1, 1, 0.4);
        let j = invert_underwater(&b, &t, &b).unwrap();
        assert!((j.get(0, 0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invert_floors_small_transmission() {
        let i = Field3::filled(1, 1, 0.1);
        let b = Field3::filled(1, 1, 0.0);
        let t = Field3::filled(1, 1, T_FLOOR / 2.0);
        let j = invert_underwater(&i, &t, &b).unwrap();
        // 0.1 / 0.05 = 2, clamped
        assert_eq!(j.get(0, 0, 0), 1.0);
        let i = Field3::filled(1, 1, 0.01);
        let j = invert_underwater(&i, &t, &b).unwrap();
        assert!((j.get(0, 0, 0) - 0.2).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn round_trip(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let j = random_field(&mut rng, 4, 4, 0.0, 1.0);
            let b = random_field(&mut rng, 4, 4, 0.0, 1.0);
            let t = random_field(&mut rng, 4, 4, T_FLOOR, 1.0);
            let back = invert_underwater(&compose_underwater(&j, &t, &b).unwrap(), &t, &b).unwrap();
            for (x, y) in back.data().iter().zip(j.data()) {
                proptest::prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn compose_is_convex(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let j = random_field(&mut rng, 3, 3, 0.0, 1.0);
            let b = random_field(&mut rng, 3, 3, 0.0, 1.0);
            let t = random_field(&mut rng, 3, 3, 0.0, 1.0);
            let i = compose_underwater(&j, &t, &b).unwrap();
            for k in 0..i.data().len() {
                let (jj, bb, ii) = (j.data()[k], b.data()[k], i.data()[k]);
                proptest::prop_assert!(ii >= jj.min(bb) - 1e-15 && ii <= jj.max(bb) + 1e-15);
            }
        }

        #[test]
        fn deeper_never_clearer(d in 0.0f64..30.0, extra in 0.0f64..10.0, f in 0.01f64..0.99) {
            let a = Attenuation::new([f, f, f]).unwrap();
            let near = transmission_from_depth(&DepthMap::filled(1, 1, d).unwrap(), &a);
            let far = transmission_from_depth(&DepthMap::filled(1, 1, d + extra).unwrap(), &a);
            for c in 0..3 {
                proptest::prop_assert!(far.get(c, 0, 0) <= near.get(c, 0, 0));
            }
        }
    }
}
