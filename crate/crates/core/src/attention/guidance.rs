use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::AttentionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceVariant {
    /// Text and layout terms, frozen network for the first two.
    #[default]
    Eq5,
    /// Single guidance weight between unconditional and layout predictions.
    Eq7,
    /// Same arithmetic as `Eq5`, adapted network for every term.
    Eq8,
}

impl FromStr for GuidanceVariant {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "eq5" => Ok(Self::Eq5),
            "eq7" => Ok(Self::Eq7),
            "eq8" => Ok(Self::Eq8),
            other => Err(AttentionError::InvalidConfig(format!("unknown guidance variant '{other}'"))),
        }
    }
}

impl fmt::Display for GuidanceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eq5 => "eq5",
            Self::Eq7 => "eq7",
            Self::Eq8 => "eq8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub variant: GuidanceVariant,
    pub g1: f64,
    pub g2: f64,
    pub g: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            variant: GuidanceVariant::Eq5,
            g1: 5.5,
            g2: 5.5,
            g: 5.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if [self.g1, self.g2, self.g].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AttentionError::InvalidConfig("guidance weights must be finite".into()))
        }
    }

    /// Network expected to have produced the unconditional/text predictions.
    pub fn base_network(&self) -> Network {
        match self.variant {
            GuidanceVariant::Eq5 => Network::Frozen,
            GuidanceVariant::Eq7 | GuidanceVariant::Eq8 => Network::Adapted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Uncond,
    Text,
    TextLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Frozen,
    Adapted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub values: Array2<f64>,
    pub condition: Condition,
    pub network: Network,
}

impl NoisePrediction {
    pub fn new(values: Array2<f64>, condition: Condition, network: Network) -> Result<Self, AttentionError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("noise prediction"));
        }
        Ok(Self {
            values,
            condition,
            network,
        })
    }
}

fn expect_tag(p: &NoisePrediction, role: &str, condition: Condition, network: Network) -> Result<(), AttentionError> {
    if p.condition != condition || p.network != network {
        return Err(AttentionError::TagMismatch(format!(
            "{role} prediction is {:?}/{:?}, expected {condition:?}/{network:?}",
            p.condition, p.network
        )));
    }
    Ok(())
}

fn same_shape(a: &NoisePrediction, b: &NoisePrediction) -> Result<(), AttentionError> {
    if a.values.dim() != b.values.dim() {
        return Err(AttentionError::ShapeMismatch(format!(
            "noise predictions {:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    Ok(())
}

/// Combine noise predictions under classifier-free guidance.
///
/// `text` is ignored (and may be `None`) for `Eq7`. Degenerate weights are
/// evaluated in a form that reduces exactly: `g2 == 0` is plain text guidance
/// and `g1 == g2` drops the text term.
pub fn cfg_combine(
    uncond: &NoisePrediction,
    text: Option<&NoisePrediction>,
    layout: &NoisePrediction,
    cfg: &GuidanceConfig,
) -> Result<NoisePrediction, AttentionError> {
    cfg.validate()?;
    let base = cfg.base_network();
    expect_tag(uncond, "unconditional", Condition::Uncond, base)?;
    expect_tag(layout, "layout", Condition::TextLayout, Network::Adapted)?;
    same_shape(uncond, layout)?;
    let e0 = &uncond.values;
    let el = &layout.values;
    let values = match cfg.variant {
        GuidanceVariant::Eq7 => e0 + &((el - e0) * cfg.g),
        GuidanceVariant::Eq5 | GuidanceVariant::Eq8 => {
            let text = text.ok_or_else(|| AttentionError::TagMismatch("text prediction required".into()))?;
            expect_tag(text, "text", Condition::Text, base)?;
            same_shape(uncond, text)?;
            let et = &text.values;
            if cfg.g2 == 0.0 {
                e0 + &((et - e0) * cfg.g1)
            } else if cfg.g1 == cfg.g2 {
                el + &((el - e0) * (cfg.g1 - 1.0))
            } else {
                e0 + &((et - e0) * cfg.g1) + &((el - et) * cfg.g2)
            }
        }
    };
    NoisePrediction::new(values, Condition::TextLayout, Network::Adapted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub total_steps: usize,
    pub laca_fraction: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            laca_fraction: 0.2,
        }
    }
}

impl GateConfig {
    pub fn new(total_steps: usize, laca_fraction: f64) -> Result<Self, AttentionError> {
        let g = Self {
            total_steps,
            laca_fraction,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.total_steps == 0 {
            return Err(AttentionError::InvalidConfig("total_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.laca_fraction) {
            return Err(AttentionError::InvalidConfig("laca_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Number of leading steps with the layout adapter enabled: `ceil(fraction * T)`.
pub fn gated_step_count(gate: &GateConfig) -> usize {
    let x = gate.laca_fraction * gate.total_steps as f64;
    let r = x.round();
    // products like 0.2 * 35 land a hair above the integer
    let n = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (n as usize).min(gate.total_steps)
}

pub fn laca_gate(step: usize, gate: &GateConfig) -> bool {
    step < gated_step_count(gate)
}
