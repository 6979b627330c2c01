use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    block_forward, cfg_combine, laca_gate, AttentionError, BlockMasks, BlockWeights, Condition, GateConfig,
    GuidanceConfig, GuidanceVariant, LatentGrid, Network, NoisePrediction, TextEmbeddings,
};
use crate::tokens::BoundLayout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub seed: u64,
    pub resolution: usize,
    pub channels: usize,
    pub text_dim: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 8,
            channels: 4,
            text_dim: 8,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseStats {
    pub steps: usize,
    pub gated_steps: usize,
    pub forward_passes: usize,
    pub layout_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrace {
    /// Initial latent followed by the latent after every step.
    pub trajectory: Vec<LatentGrid>,
    pub stats: DenoiseStats,
}

#[derive(Default)]
struct Counters {
    passes: AtomicUsize,
    layout: AtomicUsize,
}

struct Stub<'a> {
    weights: &'a BlockWeights,
    masks: Option<BlockMasks<'a>>,
    text: &'a TextEmbeddings,
    empty: &'a TextEmbeddings,
    counters: &'a Counters,
}

impl Stub<'_> {
    /// Noise estimate: the block's residual update.
    fn predict(&self, z: &LatentGrid, cond: Condition, network: Network) -> Result<NoisePrediction, AttentionError> {
        self.counters.passes.fetch_add(1, Ordering::Relaxed);
        let (text, layout_on) = match cond {
            Condition::Uncond => (self.empty, false),
            Condition::Text => (self.text, false),
            Condition::TextLayout => {
                self.counters.layout.fetch_add(1, Ordering::Relaxed);
                (self.text, true)
            }
        };
        let out = block_forward(z, text, self.masks, self.weights, layout_on)?;
        NoisePrediction::new(out.values() - z.values(), cond, network)
    }
}

fn alpha_bars(cfg: &DenoiseConfig, steps: usize) -> Vec<f64> {
    let mut acc = 1.0;
    (0..steps)
        .map(|k| {
            let frac = if steps > 1 { k as f64 / (steps - 1) as f64 } else { 0.0 };
            acc *= 1.0 - (cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start));
            acc
        })
        .collect()
}

/// Deterministic DDIM-style loop with a block as the noise model.
///
/// Gated steps run unconditional, text and layout passes; ungated steps run
/// the first two and apply plain text guidance.
pub fn demo_denoise(
    cfg: &DenoiseConfig,
    bound: &BoundLayout,
    masks: Option<BlockMasks<'_>>,
    weights: &BlockWeights,
    guidance: &GuidanceConfig,
    gate: &GateConfig,
) -> Result<DenoiseTrace, AttentionError> {
    guidance.validate()?;
    gate.validate()?;
    weights.validate()?;
    let n = bound.token_count();
    if weights.channels() != cfg.channels || weights.text_dim() != cfg.text_dim {
        return Err(AttentionError::ShapeMismatch(format!(
            "weights are c={} d={}, demo expects c={} d={}",
            weights.channels(),
            weights.text_dim(),
            cfg.channels,
            cfg.text_dim
        )));
    }
    if let Some(m) = masks {
        if m.cross.token_count() != n {
            return Err(AttentionError::ShapeMismatch(format!(
                "cross mask has {} tokens, layout has {n}",
                m.cross.token_count()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let text = TextEmbeddings::random(n, cfg.text_dim, &mut rng);
    let empty = TextEmbeddings::new(Array2::zeros((n, cfg.text_dim)))?;
    let mut z = LatentGrid::random(cfg.resolution, cfg.channels, &mut rng);

    let counters = Counters::default();
    let stub = Stub {
        weights,
        masks,
        text: &text,
        empty: &empty,
        counters: &counters,
    };
    let base = guidance.base_network();
    let text_weight = match guidance.variant {
        GuidanceVariant::Eq7 => guidance.g,
        GuidanceVariant::Eq5 | GuidanceVariant::Eq8 => guidance.g1,
    };

    let steps = gate.total_steps;
    let abar = alpha_bars(cfg, steps);
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(z.clone());
    let mut gated_steps = 0;
    for t in 0..steps {
        let tau = steps - 1 - t;
        let eps = if laca_gate(t, gate) {
            gated_steps += 1;
            let layout = || stub.predict(&z, Condition::TextLayout, Network::Adapted);
            if guidance.variant == GuidanceVariant::Eq7 {
                let (u, l) = rayon::join(|| stub.predict(&z, Condition::Uncond, base), layout);
                cfg_combine(&u?, None, &l?, guidance)?.values
            } else {
                let ((u, tx), l) = rayon::join(
                    || {
                        rayon::join(
                            || stub.predict(&z, Condition::Uncond, base),
                            || stub.predict(&z, Condition::Text, base),
                        )
                    },
                    layout,
                );
                cfg_combine(&u?, Some(&tx?), &l?, guidance)?.values
            }
        } else {
            let (u, tx) = rayon::join(
                || stub.predict(&z, Condition::Uncond, base),
                || stub.predict(&z, Condition::Text, base),
            );
            let (u, tx) = (u?, tx?);
            &u.values + &((&tx.values - &u.values) * text_weight)
        };
        let a = abar[tau];
        let a_prev = if tau == 0 { 1.0 } else { abar[tau - 1] };
        let x0 = (z.values() - &(&eps * (1.0 - a).sqrt())) / a.sqrt();
        let next = &x0 * a_prev.sqrt() + &eps * (1.0 - a_prev).sqrt();
        z = LatentGrid::new(cfg.resolution, next)?;
        trajectory.push(z.clone());
    }
    Ok(DenoiseTrace {
        trajectory,
        stats: DenoiseStats {
            steps,
            gated_steps,
            forward_passes: counters.passes.load(Ordering::Relaxed),
            layout_passes: counters.layout.load(Ordering::Relaxed),
        },
    })
}
