//! Bounded smooth test functions for weak errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    /// `tanh(z_i)`.
    Tanh {
        component: usize,
    },
    /// `exp(−|z − c|²/(2w²))` with `c` repeated in every coordinate.
    GaussianBump {
        center: f64,
        width: f64,
    },
    /// `c·tanh(|z|²/c)`: quadratic near zero, bounded by `c`.
    ClippedQuadratic {
        clip: f64,
    },
    Constant {
        value: f64,
    },
}

impl TestFunction {
    pub fn default_panel() -> Vec<TestFunction> {
        vec![
            TestFunction::Tanh { component: 0 },
            TestFunction::GaussianBump {
                center: 0.0,
                width: 1.0,
            },
            TestFunction::ClippedQuadratic { clip: 4.0 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TestFunction::GaussianBump { width, center } if !(width > 0.0) || !center.is_finite() => {
                Err(Error::Config(format!("gaussian bump width {width} must be positive")))
            }
            TestFunction::ClippedQuadratic { clip } if !(clip > 0.0) => {
                Err(Error::Config(format!("clip {clip} must be positive")))
            }
            TestFunction::Constant { value } if !value.is_finite() => {
                Err(Error::Config("constant must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Short identifier used in file names.
    pub fn label(&self) -> String {
        match self {
            TestFunction::Tanh { component } => format!("tanh_{component}"),
            TestFunction::GaussianBump { .. } => "gaussian_bump".into(),
            TestFunction::ClippedQuadratic { .. } => "clipped_quadratic".into(),
            TestFunction::Constant { .. } => "constant".into(),
        }
    }

    #[inline]
    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            TestFunction::Tanh { component } => z.get(component).map_or(0.0, |v| v.tanh()),
            TestFunction::GaussianBump { center, width } => {
                let r2: f64 = z.iter().map(|v| (v - center).powi(2)).sum();
                (-r2 / (2.0 * width * width)).exp()
            }
            TestFunction::ClippedQuadratic { clip } => clip * (z.iter().map(|v| v * v).sum::<f64>() / clip).tanh(),
            TestFunction::Constant { value } => value,
        }
    }
}
