//! Imaging conditions, difficulty bands and per-image parameter records.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_6, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "fb")]
    FocusBlur,
    #[serde(rename = "mb")]
    MotionBlur,
    #[serde(rename = "po")]
    PoseChange,
    #[serde(rename = "de")]
    Deformation,
    #[serde(rename = "eo")]
    ExternalOcclusion,
    #[serde(rename = "sc")]
    Scale,
    #[serde(rename = "li")]
    Lighting,
}

impl Condition {
    /// All conditions in their canonical order.
    pub const ALL: [Condition; 7] = [
        Condition::FocusBlur,
        Condition::MotionBlur,
        Condition::PoseChange,
        Condition::Deformation,
        Condition::ExternalOcclusion,
        Condition::Scale,
        Condition::Lighting,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::FocusBlur => "fb",
            Condition::MotionBlur => "mb",
            Condition::PoseChange => "po",
            Condition::Deformation => "de",
            Condition::ExternalOcclusion => "eo",
            Condition::Scale => "sc",
            Condition::Lighting => "li",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| Error::UnknownCondition(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    /// Baseline only; never part of a training schedule.
    Canonical,
}

impl Difficulty {
    /// The bands a training schedule walks through, in order.
    pub const TRAINING: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Canonical => "canonical",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" | "e" => Ok(Difficulty::Easy),
            "medium" | "m" => Ok(Difficulty::Medium),
            "hard" | "h" => Ok(Difficulty::Hard),
            "canonical" => Ok(Difficulty::Canonical),
            _ => Err(Error::UnknownDifficulty(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightBranch {
    Dark,
    Bright,
}

/// Condition-specific numeric parameters. Percentages are relative to the
/// larger image dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "condition")]
pub enum Payload {
    #[serde(rename = "fb")]
    FocusBlur { kernel_pct: f64 },
    #[serde(rename = "mb")]
    MotionBlur { length_pct: f64, angle: f64 },
    #[serde(rename = "po")]
    PoseChange {
        roll: f64,
        pitch: f64,
        yaw: f64,
        /// Metres, in the camera frame.
        translation: [f64; 3],
    },
    #[serde(rename = "de")]
    Deformation { ruling_count: usize },
    #[serde(rename = "eo")]
    ExternalOcclusion { visibility: f64 },
    #[serde(rename = "sc")]
    Scale { factor: f64 },
    #[serde(rename = "li")]
    Lighting {
        irradiance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        branch: Option<LightBranch>,
    },
}

impl Payload {
    pub fn condition(&self) -> Condition {
        match self {
            Payload::FocusBlur { .. } => Condition::FocusBlur,
            Payload::MotionBlur { .. } => Condition::MotionBlur,
            Payload::PoseChange { .. } => Condition::PoseChange,
            Payload::Deformation { .. } => Condition::Deformation,
            Payload::ExternalOcclusion { .. } => Condition::ExternalOcclusion,
            Payload::Scale { .. } => Condition::Scale,
            Payload::Lighting { .. } => Condition::Lighting,
        }
    }
}

/// One sampled imaging-condition instance (θ). Serializes to a flat JSON
/// object: `{"difficulty":"hard","condition":"fb","kernel_pct":2.5}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionParams {
    pub difficulty: Difficulty,
    #[serde(flatten)]
    pub payload: Payload,
}

/// Closed interval.
pub type Interval = (f64, f64);

/// Ruling counts for the deformation condition (easy, medium, hard, canonical).
pub const RULING_COUNTS: [usize; 4] = [3, 5, 8, 2];

fn band(d: Difficulty, e: Interval, m: Interval, h: Interval) -> Interval {
    match d {
        Difficulty::Easy => e,
        Difficulty::Medium => m,
        Difficulty::Hard => h,
        Difficulty::Canonical => (0.0, 0.0),
    }
}

pub fn focus_kernel_range(d: Difficulty) -> Interval {
    band(d, (0.39, 0.97), (1.17, 1.95), (2.14, 2.92))
}

pub fn motion_length_range(d: Difficulty) -> Interval {
    band(d, (0.39, 0.97), (1.17, 2.92), (3.12, 4.88))
}

pub const MOTION_ANGLE_RANGE: Interval = (0.0, PI);

pub fn pose_angle_range(d: Difficulty) -> Interval {
    band(d, (0.0, FRAC_PI_6), (FRAC_PI_6, FRAC_PI_3), (FRAC_PI_3, FRAC_PI_2))
}

pub fn pose_position_range(d: Difficulty) -> Interval {
    band(d, (0.0, 0.5), (0.5, 1.0), (1.0, 2.0))
}

pub fn ruling_count(d: Difficulty) -> usize {
    match d {
        Difficulty::Easy => RULING_COUNTS[0],
        Difficulty::Medium => RULING_COUNTS[1],
        Difficulty::Hard => RULING_COUNTS[2],
        Difficulty::Canonical => RULING_COUNTS[3],
    }
}

pub fn scale_small_range(d: Difficulty) -> Interval {
    band(d, (0.75, 1.0), (0.5, 0.75), (0.1, 0.5))
}

pub fn scale_large_range(d: Difficulty) -> Interval {
    band(d, (1.0, 1.5), (1.5, 2.25), (2.25, 3.0))
}

pub fn visibility_range(d: Difficulty) -> Interval {
    band(d, (0.7, 0.9), (0.3, 0.7), (0.1, 0.3))
}

pub fn irradiance_range(d: Difficulty, branch: LightBranch) -> Interval {
    match branch {
        LightBranch::Dark => band(d, (0.5, 1.0), (0.05, 0.5), (0.01, 0.05)),
        LightBranch::Bright => band(d, (0.5, 1.0), (1.0, 5.0), (5.0, 10.0)),
    }
}

fn inside(v: f64, (lo, hi): Interval) -> bool {
    v >= lo && v <= hi
}

impl ConditionParams {
    pub fn condition(&self) -> Condition {
        self.payload.condition()
    }

    /// Checks every numeric field against its band for the record's
    /// condition and difficulty.
    pub fn validate(&self) -> Result<()> {
        let d = self.difficulty;
        let bad = |what: &str| {
            Err(Error::invalid(format!(
                "{} {} {what} outside its range",
                self.condition(),
                d
            )))
        };
        if d == Difficulty::Canonical {
            return if *self == canonical_params(self.condition()) {
                Ok(())
            } else {
                bad("payload (canonical expected)")
            };
        }
        match self.payload {
            Payload::FocusBlur { kernel_pct } => {
                if !inside(kernel_pct, focus_kernel_range(d)) {
                    return bad("kernel_pct");
                }
            }
            Payload::MotionBlur { length_pct, angle } => {
                if !inside(length_pct, motion_length_range(d)) {
                    return bad("length_pct");
                }
                if !inside(angle, MOTION_ANGLE_RANGE) {
                    return bad("angle");
                }
            }
            Payload::PoseChange {
                roll,
                pitch,
                yaw,
                translation,
            } => {
                let r = pose_angle_range(d);
                if ![roll, pitch, yaw].iter().all(|a| inside(*a, r)) {
                    return bad("pose angle");
                }
                let norm = translation.iter().map(|t| t * t).sum::<f64>().sqrt();
                let (lo, hi) = pose_position_range(d);
                if !(norm >= lo - 1e-12 && norm <= hi + 1e-12) {
                    return bad("translation");
                }
            }
            Payload::Deformation { ruling_count: n } => {
                if n != ruling_count(d) {
                    return bad("ruling_count");
                }
            }
            Payload::ExternalOcclusion { visibility } => {
                if !inside(visibility, visibility_range(d)) {
                    return bad("visibility");
                }
            }
            Payload::Scale { factor } => {
                if !inside(factor, scale_small_range(d)) && !inside(factor, scale_large_range(d)) {
                    return bad("factor");
                }
            }
            Payload::Lighting { irradiance, branch } => {
                let ok = match branch {
                    Some(b) => inside(irradiance, irradiance_range(d, b)),
                    None => false,
                };
                if !ok {
                    return bad("irradiance");
                }
            }
        }
        Ok(())
    }
}

/// The baseline record for `c`: no blur, frontal pose, two rulings, unit
/// scale, full visibility, unit irradiance.
pub fn canonical_params(c: Condition) -> ConditionParams {
    let payload = match c {
        Condition::FocusBlur => Payload::FocusBlur { kernel_pct: 0.0 },
        Condition::MotionBlur => Payload::MotionBlur {
            length_pct: 0.0,
            angle: 0.0,
        },
        Condition::PoseChange => Payload::PoseChange {
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            translation: [0.0; 3],
        },
        Condition::Deformation => Payload::Deformation {
            ruling_count: ruling_count(Difficulty::Canonical),
        },
        Condition::ExternalOcclusion => Payload::ExternalOcclusion { visibility: 1.0 },
        Condition::Scale => Payload::Scale { factor: 1.0 },
        Condition::Lighting => Payload::Lighting {
            irradiance: 1.0,
            branch: None,
        },
    };
    ConditionParams {
        difficulty: Difficulty::Canonical,
        payload,
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): Interval) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws one record for `(c, d)`.
pub fn sample_params<R: Rng>(c: Condition, d: Difficulty, rng: &mut R) -> Result<ConditionParams> {
    if d == Difficulty::Canonical {
        return Err(Error::invalid(
            "canonical difficulty is not sampled; use canonical_params",
        ));
    }
    let payload = match c {
        Condition::FocusBlur => Payload::FocusBlur {
            kernel_pct: uniform(rng, focus_kernel_range(d)),
        },
        Condition::MotionBlur => Payload::MotionBlur {
            length_pct: uniform(rng, motion_length_range(d)),
            angle: uniform(rng, MOTION_ANGLE_RANGE),
        },
        Condition::PoseChange => {
            let r = pose_angle_range(d);
            let roll = uniform(rng, r);
            let pitch = uniform(rng, r);
            let yaw = uniform(rng, r);
            let magnitude = uniform(rng, pose_position_range(d));
            // uniform direction on the unit sphere
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..(2.0 * PI));
            let rho = (1.0 - z * z).max(0.0).sqrt();
            Payload::PoseChange {
                roll,
                pitch,
                yaw,
                translation: [magnitude * rho * phi.cos(), magnitude * rho * phi.sin(), magnitude * z],
            }
        }
        Condition::Deformation => Payload::Deformation {
            ruling_count: ruling_count(d),
        },
        Condition::ExternalOcclusion => Payload::ExternalOcclusion {
            visibility: uniform(rng, visibility_range(d)),
        },
        Condition::Scale => {
            let range = if rng.random_bool(0.5) {
                scale_small_range(d)
            } else {
                scale_large_range(d)
            };
            Payload::Scale {
                factor: uniform(rng, range),
            }
        }
        Condition::Lighting => {
            let branch = if rng.random_bool(0.5) {
                LightBranch::Dark
            } else {
                LightBranch::Bright
            };
            Payload::Lighting {
                irradiance: uniform(rng, irradiance_range(d, branch)),
                branch: Some(branch),
            }
        }
    };
    Ok(ConditionParams { difficulty: d, payload })
}

/// `n` independent records for `(c, d)`, deterministic in `rng_seed`.
pub fn generate_parameters(c: Condition, d: Difficulty, n: usize, rng_seed: u64) -> Result<Vec<ConditionParams>> {
    if d == Difficulty::Canonical {
        return Err(Error::invalid(
            "canonical difficulty is not sampled; use canonical_params",
        ));
    }
    let mut rng = seed::rng(seed::derive(rng_seed, &[c.tag().into(), d.name().into()]));
    (0..n).map(|_| sample_params(c, d, &mut rng)).collect()
}
