//! The composite L1 objective `L = c_J·L_J + c_B·L_B + c_T·L_T + c_I·L_I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Prediction, TrainExample};
use crate::image::Field3;

/// Non-negative weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "c_J")]
    pub c_j: f64,
    #[serde(rename = "c_B")]
    pub c_b: f64,
    #[serde(rename = "c_T")]
    pub c_t: f64,
    #[serde(rename = "c_I")]
    pub c_i: f64,
}

impl LossWeights {
    pub const fn new(c_j: f64, c_b: f64, c_t: f64, c_i: f64) -> Self {
        Self { c_j, c_b, c_t, c_i }
    }

    /// Meta-training on synthetic data: (1, 1, 1, 0.5).
    pub const PRETRAIN: LossWeights = LossWeights::new(1.0, 1.0, 1.0, 0.5);
    /// Fine-tuning on real pairs, which have no B/t targets: (1, 0, 0, 1).
    pub const FINETUNE: LossWeights = LossWeights::new(1.0, 0.0, 0.0, 1.0);
    pub const ZERO: LossWeights = LossWeights::new(0.0, 0.0, 0.0, 0.0);

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("c_J", self.c_j),
            ("c_B", self.c_b),
            ("c_T", self.c_t),
            ("c_I", self.c_i),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }

    /// Errors when a weighted term has no target in `example`.
    pub fn check_targets(&self, example: &TrainExample) -> Result<()> {
        if self.c_b > 0.0 && example.background.is_none() {
            return Err(Error::MissingTarget { term: "L_B" });
        }
        if self.c_t > 0.0 && example.transmission.is_none() {
            return Err(Error::MissingTarget { term: "L_T" });
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PRETRAIN
    }
}

/// Mean absolute errors. `background`/`transmission` are `None` when the
/// example carries no such target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub clean: f64,
    pub background: Option<f64>,
    pub transmission: Option<f64>,
    pub physics: f64,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            clean: 0.0,
            background: Some(0.0),
            transmission: Some(0.0),
            physics: 0.0,
        }
    }
}

impl LossTerms {
    pub fn new(clean: f64, background: f64, transmission: f64, physics: f64) -> Self {
        Self {
            clean,
            background: Some(background),
            transmission: Some(transmission),
            physics,
        }
    }

    pub(crate) fn accumulate(&mut self, other: &LossTerms) {
        self.clean += other.clean;
        self.physics += other.physics;
        self.background = self.background.zip(other.background).map(|(a, b)| a + b);
        self.transmission = self
            .transmission
            .zip(other.transmission)
            .map(|(a, b)| a + b);
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.clean *= s;
        self.physics *= s;
        self.background = self.background.map(|v| v * s);
        self.transmission = self.transmission.map(|v| v * s);
    }

    /// Names the first weighted term that is not finite.
    pub fn ensure_finite(&self, w: &LossWeights) -> Result<()> {
        let checks = [
            ("L_J", w.c_j, Some(self.clean)),
            ("L_B", w.c_b, self.background),
            ("L_T", w.c_t, self.transmission),
            ("L_I", w.c_i, Some(self.physics)),
        ];
        for (term, weight, value) in checks {
            if weight > 0.0 && !value.is_some_and(f64::is_finite) {
                return Err(Error::NonFiniteLoss { term });
            }
        }
        Ok(())
    }
}

/// `c_J·L_J + c_B·L_B + c_T·L_T + c_I·L_I`. Zero-weight and absent terms
/// contribute nothing.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    let term = |weight: f64, value: Option<f64>| {
        if weight == 0.0 {
            0.0
        } else {
            weight * value.unwrap_or(0.0)
        }
    };
    term(w.c_j, Some(terms.clean))
        + term(w.c_b, terms.background)
        + term(w.c_t, terms.transmission)
        + term(w.c_i, Some(terms.physics))
}

fn mean_abs_diff(a: &Field3, b: &Field3) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// The recomposed observation `J·t + B·(1 − t)`, unclamped.
pub fn recompose(pred: &Prediction) -> Field3 {
    let data = pred
        .clean
        .data()
        .iter()
        .zip(pred.transmission.data())
        .zip(pred.background.data())
        .map(|((&j, &t), &b)| j * t + b * (1.0 - t))
        .collect();
    Field3::new(pred.clean.height(), pred.clean.width(), data).expect("same shape")
}

/// The four L1 terms; `L_I` compares the observed input with the
/// recomposition of the three predicted fields.
pub fn loss_components(pred: &Prediction, example: &TrainExample) -> Result<LossTerms> {
    example.validate()?;
    pred.clean.ensure_same_shape(&example.input)?;
    Ok(LossTerms {
        clean: mean_abs_diff(&pred.clean, &example.clean)?,
        background: example
            .background
            .as_ref()
            .map(|b| mean_abs_diff(&pred.background, b))
            .transpose()?,
        transmission: example
            .transmission
            .as_ref()
            .map(|t| mean_abs_diff(&pred.transmission, t))
            .transpose()?,
        physics: mean_abs_diff(&recompose(pred), &example.input)?,
    })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of the weighted loss with respect to the predicted clean,
/// background and transmission fields, in that order.
///
/// The subgradient of `|x|` at 0 is taken as 0.
pub fn loss_gradients(
    pred: &Prediction,
    example: &TrainExample,
    w: &LossWeights,
) -> Result<[Vec<f64>; 3]> {
    w.check_targets(example)?;
    let n = pred.clean.data().len();
    let inv = 1.0 / n as f64;
    let mut g_clean = vec![0.0; n];
    let mut g_back = vec![0.0; n];
    let mut g_trans = vec![0.0; n];
    let j = pred.clean.data();
    let b = pred.background.data();
    let t = pred.transmission.data();
    if w.c_j > 0.0 {
        for (g, (p, y)) in g_clean.iter_mut().zip(j.iter().zip(example.clean.data())) {
            *g += w.c_j * inv * sign(p - y);
        }
    }
    if let (true, Some(target)) = (w.c_b > 0.0, &example.background) {
        for (g, (p, y)) in g_back.iter_mut().zip(b.iter().zip(target.data())) {
            *g += w.c_b * inv * sign(p - y);
        }
    }
    if let (true, Some(target)) = (w.c_t > 0.0, &example.transmission) {
        for (g, (p, y)) in g_trans.iter_mut().zip(t.iter().zip(target.data())) {
            *g += w.c_t * inv * sign(p - y);
        }
    }
    if w.c_i > 0.0 {
        let obs = example.input.data();
        for k in 0..n {
            let s = w.c_i * inv * sign(j[k] * t[k] + b[k] * (1.0 - t[k]) - obs[k]);
            g_clean[k] += s * t[k];
            g_back[k] += s * (1.0 - t[k]);
            g_trans[k] += s * (j[k] - b[k]);
        }
    }
    Ok([g_clean, g_back, g_trans])
}
