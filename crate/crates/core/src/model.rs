//! Trainable state and the matching gradient layout.

use std::fmt;

use crate::encoders::{EncoderStack, FusionParameters};
use crate::error::{ensure, Result};
use crate::math::SeededRng;
use crate::text_mass::{RadiusParameters, RadiusVariant};

/// Initial temperature 0.07 expressed as `ln(1/0.07)`.
pub const DEFAULT_LOG_LOGIT_SCALE: f64 = 2.659_260_036_932_779;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Learnable contrastive temperature `λ = min(exp(log_lambda), 100)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitScale {
    pub log_lambda: f64,
}

impl Default for LogitScale {
    fn default() -> Self {
        Self {
            log_lambda: DEFAULT_LOG_LOGIT_SCALE,
        }
    }
}

impl LogitScale {
    pub fn fixed(lambda: f64) -> Self {
        Self {
            log_lambda: lambda.ln(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp().min(MAX_LOGIT_SCALE)
    }

    /// d λ / d log_lambda; zero while the clamp is active.
    pub fn jacobian(&self) -> f64 {
        let raw = self.log_lambda.exp();
        if raw > MAX_LOGIT_SCALE {
            0.0
        } else {
            raw
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    BackboneAdapter,
    Head,
}

/// Every trainable tensor, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamName {
    TextAdapter,
    FrameAdapter,
    QueryMap,
    KeyMap,
    ValueMap,
    OutputMap,
    RadiusTheta,
    RadiusWeight,
    LogLogitScale,
}

impl ParamName {
    pub const ALL: [ParamName; 9] = [
        Self::TextAdapter,
        Self::FrameAdapter,
        Self::QueryMap,
        Self::KeyMap,
        Self::ValueMap,
        Self::OutputMap,
        Self::RadiusTheta,
        Self::RadiusWeight,
        Self::LogLogitScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TextAdapter => "encoder.text_adapter",
            Self::FrameAdapter => "encoder.frame_adapter",
            Self::QueryMap => "fusion.query_map",
            Self::KeyMap => "fusion.key_map",
            Self::ValueMap => "fusion.value_map",
            Self::OutputMap => "fusion.output_map",
            Self::RadiusTheta => "radius.theta",
            Self::RadiusWeight => "radius.weight",
            Self::LogLogitScale => "logit_scale.log_lambda",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == name)
    }

    pub fn group(self) -> ParamGroup {
        match self {
            Self::TextAdapter | Self::FrameAdapter => ParamGroup::BackboneAdapter,
            _ => ParamGroup::Head,
        }
    }

    pub fn decays(self) -> bool {
        self != Self::LogLogitScale
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape and initialization knobs for a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dim: usize,
    pub concepts: usize,
    pub frames: usize,
    pub variant: RadiusVariant,
    pub text_mass: bool,
    pub adapters: bool,
    pub dropout: f64,
    pub tower_mismatch: f64,
    pub log_logit_scale: f64,
    /// Pins θ at this value and excludes it from training.
    pub frozen_theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub encoders: EncoderStack,
    pub fusion: FusionParameters,
    pub radius: RadiusParameters,
    pub logit_scale: LogitScale,
    /// `false` collapses the text mass to the point `t` (the "w/o R" model).
    pub text_mass: bool,
}

/// Stream tag for the frozen projections.
const PROJECTION_STREAM: u64 = 0x5052_4F4A;

impl ModelParameters {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        ensure(spec.frames >= 1, || "model needs at least one sampled frame".into())?;
        let mut rng = SeededRng::keyed(seed, &[PROJECTION_STREAM]);
        let encoders = EncoderStack::new(spec.dim, spec.concepts, spec.tower_mismatch, spec.adapters, &mut rng)?;
        let fusion = FusionParameters::identity(spec.dim, spec.dropout)?;
        let mut radius = RadiusParameters::new(spec.variant, spec.frames, spec.dim);
        if let Some(theta) = spec.frozen_theta {
            radius.theta = theta;
            radius.theta_frozen = true;
        }
        Ok(Self {
            encoders,
            fusion,
            radius,
            logit_scale: LogitScale {
                log_lambda: spec.log_logit_scale,
            },
            text_mass: spec.text_mass,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoders.dim()
    }

    pub fn frames(&self) -> usize {
        self.radius.frames()
    }

    /// Names that receive gradients and optimizer updates.
    pub fn trainable(&self) -> Vec<ParamName> {
        ParamName::ALL
            .into_iter()
            .filter(|&p| match p {
                ParamName::TextAdapter | ParamName::FrameAdapter => self.encoders.adapters_enabled,
                ParamName::RadiusTheta => {
                    self.text_mass && self.radius.variant == RadiusVariant::Scalar && !self.radius.theta_frozen
                }
                ParamName::RadiusWeight => self.text_mass && self.radius.variant == RadiusVariant::Linear,
                _ => true,
            })
            .collect()
    }

    pub fn shape(&self, name: ParamName) -> Vec<usize> {
        let d = self.dim();
        match name {
            ParamName::RadiusTheta | ParamName::LogLogitScale => vec![],
            ParamName::RadiusWeight => vec![self.radius.frames(), d],
            _ => vec![d, d],
        }
    }

    pub fn get(&self, name: ParamName) -> &[f64] {
        match name {
            ParamName::TextAdapter => self.encoders.text_adapter.as_slice(),
            ParamName::FrameAdapter => self.encoders.frame_adapter.as_slice(),
            ParamName::QueryMap => self.fusion.query_map.as_slice(),
            ParamName::KeyMap => self.fusion.key_map.as_slice(),
            ParamName::ValueMap => self.fusion.value_map.as_slice(),
            ParamName::OutputMap => self.fusion.output_map.as_slice(),
            ParamName::RadiusTheta => std::slice::from_ref(&self.radius.theta),
            ParamName::RadiusWeight => self.radius.weight.as_slice(),
            ParamName::LogLogitScale => std::slice::from_ref(&self.logit_scale.log_lambda),
        }
    }

    pub fn get_mut(&mut self, name: ParamName) -> &mut [f64] {
        match name {
            ParamName::TextAdapter => self.encoders.text_adapter.as_mut_slice(),
            ParamName::FrameAdapter => self.encoders.frame_adapter.as_mut_slice(),
            ParamName::QueryMap => self.fusion.query_map.as_mut_slice(),
            ParamName::KeyMap => self.fusion.key_map.as_mut_slice(),
            ParamName::ValueMap => self.fusion.value_map.as_mut_slice(),
            ParamName::OutputMap => self.fusion.output_map.as_mut_slice(),
            ParamName::RadiusTheta => std::slice::from_mut(&mut self.radius.theta),
            ParamName::RadiusWeight => self.radius.weight.as_mut_slice(),
            ParamName::LogLogitScale => std::slice::from_mut(&mut self.logit_scale.log_lambda),
        }
    }

    /// Trainable values concatenated in canonical order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.trainable()
            .into_iter()
            .flat_map(|p| self.get(p).to_vec())
            .collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.trainable().iter().map(|&p| self.get(p).len()).sum();
        ensure(flat.len() == total, || {
            format!("expected {total} trainable values, got {}", flat.len())
        })?;
        let mut offset = 0;
        for p in self.trainable() {
            let slot = self.get_mut(p);
            let n = slot.len();
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        ParamName::ALL
            .into_iter()
            .all(|p| self.get(p).iter().all(|x| x.is_finite()))
    }
}

/// Gradients for exactly the trainable tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    entries: Vec<(ParamName, Vec<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Self {
            entries: params
                .trainable()
                .into_iter()
                .map(|p| (p, vec![0.0; params.get(p).len()]))
                .collect(),
        }
    }

    pub(crate) fn from_entries(entries: Vec<(ParamName, Vec<f64>)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: ParamName) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = ParamName> + '_ {
        self.entries.iter().map(|(p, _)| *p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamName, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, g)| g.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    /// Checks that the layout mirrors `params` exactly.
    pub fn check_layout(&self, params: &ModelParameters) -> Result<()> {
        let names: Vec<ParamName> = self.names().collect();
        ensure(names == params.trainable(), || {
            format!("gradient set covers {names:?}, model trains {:?}", params.trainable())
        })?;
        for (p, g) in self.iter() {
            ensure(g.len() == params.get(p).len(), || {
                format!("gradient for {p} has {} entries, parameter has {}", g.len(), params.get(p).len())
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: RadiusVariant, text_mass: bool) -> ModelSpec {
        ModelSpec {
            dim: 6,
            concepts: 4,
            frames: 3,
            variant,
            text_mass,
            adapters: true,
            dropout: 0.0,
            tower_mismatch: 0.5,
            log_logit_scale: DEFAULT_LOG_LOGIT_SCALE,
            frozen_theta: None,
        }
    }

    #[test]
    fn trainable_sets_follow_variant_and_mode() {
        let linear = ModelParameters::init(&spec(RadiusVariant::Linear, true), 1).unwrap();
        assert!(linear.trainable().contains(&ParamName::RadiusWeight));
        assert!(!linear.trainable().contains(&ParamName::RadiusTheta));
        let scalar = ModelParameters::init(&spec(RadiusVariant::Scalar, true), 1).unwrap();
        assert!(scalar.trainable().contains(&ParamName::RadiusTheta));
        let fixed = ModelParameters::init(&spec(RadiusVariant::FixedMean, true), 1).unwrap();
        assert!(!fixed.trainable().iter().any(|p| matches!(p, ParamName::RadiusTheta | ParamName::RadiusWeight)));
        let baseline = ModelParameters::init(&spec(RadiusVariant::Linear, false), 1).unwrap();
        assert!(!baseline.trainable().contains(&ParamName::RadiusWeight));
    }

    #[test]
    fn flat_round_trip() {
        let mut m = ModelParameters::init(&spec(RadiusVariant::Linear, true), 3).unwrap();
        let mut flat = m.flatten_trainable();
        flat.iter_mut().enumerate().for_each(|(i, x)| *x += i as f64 * 1e-3);
        m.set_flat_trainable(&flat).unwrap();
        assert_eq!(m.flatten_trainable(), flat);
        assert!(m.set_flat_trainable(&flat[1..]).is_err());
    }

    #[test]
    fn logit_scale_clamps() {
        assert!((LogitScale::default().lambda() - 1.0 / 0.07).abs() < 1e-9);
        let big = LogitScale { log_lambda: 10.0 };
        assert_eq!(big.lambda(), MAX_LOGIT_SCALE);
        assert_eq!(big.jacobian(), 0.0);
    }
}
