//! Dense f64 reference for masked attention blocks.
//!
//! Latents are stored as `p^2 x c` matrices whose row index is the flat cell
//! index `p * i + j`, the same layout the mask compiler uses.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::mask::{CrossMask, SelfMask};

mod demo;
mod fixture;
mod guidance;

pub use demo::{demo_denoise, DenoiseConfig, DenoiseStats, DenoiseTrace};
pub use fixture::{load_trajectory, load_weights, save_trajectory, save_weights, FixtureError};
pub use guidance::{
    cfg_combine, gated_step_count, laca_gate, Condition, GateConfig, GuidanceConfig, GuidanceVariant, Network,
    NoisePrediction,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("condition tag mismatch: {0}")]
    TagMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn shape_err(msg: impl Into<String>) -> AttentionError {
    AttentionError::ShapeMismatch(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    p: usize,
    values: Array2<f64>,
}

impl LatentGrid {
    pub fn new(p: usize, values: Array2<f64>) -> Result<Self, AttentionError> {
        if p == 0 || values.nrows() != p * p || values.ncols() == 0 {
            return Err(shape_err(format!(
                "latent of shape {:?} does not fit resolution {p}",
                values.dim()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("latent"));
        }
        Ok(Self { p, values })
    }

    pub fn zeros(p: usize, c: usize) -> Self {
        Self {
            p,
            values: Array2::zeros((p * p, c)),
        }
    }

    pub fn random<R: Rng + ?Sized>(p: usize, c: usize, rng: &mut R) -> Self {
        Self {
            p,
            values: Array2::from_shape_simple_fn((p * p, c), || rng.sample(StandardNormal)),
        }
    }

    pub fn resolution(&self) -> usize {
        self.p
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Feature vector at cell `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.values.row(self.p * i + j)
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        max_abs_diff(self.values.view(), other.values.view())
    }

    fn add(&self, delta: &Array2<f64>) -> LatentGrid {
        LatentGrid {
            p: self.p,
            values: &self.values + delta,
        }
    }
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_abs_diff on different shapes");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    values: Array2<f64>,
}

impl TextEmbeddings {
    pub fn new(values: Array2<f64>) -> Result<Self, AttentionError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(shape_err("text embeddings must be non-empty"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AttentionError::NonFinite("text embeddings"));
        }
        Ok(Self { values })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        Self {
            values: Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal)),
        }
    }

    pub fn token_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Query/key/value/output projections for one attention layer.
///
/// `wq` is `c x k`, `wk` and `wv` are `src x k`, `wo` is `k x c`, where `src`
/// is the key/value feature width and `k` is split evenly across heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn random<R: Rng + ?Sized>(c: usize, src: usize, inner: usize, heads: usize, rng: &mut R) -> Self {
        let mut init = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
        };
        Self {
            wq: init(c, inner),
            wk: init(src, inner),
            wv: init(src, inner),
            wo: init(inner, c),
            heads,
        }
    }

    pub fn query_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn source_dim(&self) -> usize {
        self.wk.nrows()
    }

    pub fn inner_dim(&self) -> usize {
        self.wq.ncols()
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let k = self.inner_dim();
        if self.heads == 0 || k == 0 || k % self.heads != 0 {
            return Err(shape_err(format!("inner dim {k} not divisible into {} heads", self.heads)));
        }
        if self.wk.ncols() != k || self.wv.ncols() != k || self.wo.nrows() != k {
            return Err(shape_err("projection inner dims disagree"));
        }
        if self.wv.nrows() != self.source_dim() {
            return Err(shape_err("key and value source dims disagree"));
        }
        if self.wo.ncols() != self.query_dim() {
            return Err(shape_err("output projection does not return to query width"));
        }
        Ok(())
    }
}

/// Weights for one transformer block: frozen SA and CA plus the two adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub sa: AttentionWeights,
    pub ca: AttentionWeights,
    pub laca: AttentionWeights,
    pub lasa: AttentionWeights,
    pub laca_gain: Array1<f64>,
    pub lasa_gain: Array1<f64>,
}

impl BlockWeights {
    /// Random frozen layers; adapters start as copies with zero output gains.
    pub fn random<R: Rng + ?Sized>(c: usize, d: usize, inner: usize, heads: usize, rng: &mut R) -> Self {
        let sa = AttentionWeights::random(c, c, inner, heads, rng);
        let ca = AttentionWeights::random(c, d, inner, heads, rng);
        Self::from_frozen(sa, ca)
    }

    pub fn from_frozen(sa: AttentionWeights, ca: AttentionWeights) -> Self {
        let c = sa.query_dim();
        Self {
            laca: ca.clone(),
            lasa: sa.clone(),
            sa,
            ca,
            laca_gain: Array1::zeros(c),
            lasa_gain: Array1::zeros(c),
        }
    }

    pub fn channels(&self) -> usize {
        self.sa.query_dim()
    }

    pub fn text_dim(&self) -> usize {
        self.ca.source_dim()
    }

    pub fn with_gains(mut self, gain: f64) -> Self {
        self.laca_gain.fill(gain);
        self.lasa_gain.fill(gain);
        self
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let c = self.channels();
        for (name, w, src) in [
            ("sa", &self.sa, c),
            ("lasa", &self.lasa, c),
            ("ca", &self.ca, self.text_dim()),
            ("laca", &self.laca, self.text_dim()),
        ] {
            w.validate()?;
            if w.query_dim() != c || w.source_dim() != src {
                return Err(shape_err(format!("{name} projections do not match c={c}, src={src}")));
            }
        }
        if self.laca_gain.len() != c || self.lasa_gain.len() != c {
            return Err(shape_err("zero-conv gains must have one entry per channel"));
        }
        Ok(())
    }
}

/// Softmax over `scores` where entries with `permitted[k] == false` are set to
/// negative infinity first. A row with nothing permitted is left unmasked.
pub fn masked_softmax(scores: ArrayView1<'_, f64>, permitted: &[bool]) -> Array1<f64> {
    assert_eq!(scores.len(), permitted.len(), "score/mask length mismatch");
    let any = permitted.iter().any(|&b| b);
    let masked: Array1<f64> = scores
        .iter()
        .zip(permitted)
        .map(|(&s, &ok)| if ok || !any { s } else { f64::NEG_INFINITY })
        .collect();
    let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = masked.mapv(|s| (s - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Key-permission predicate for one query row.
type Permit<'a> = &'a dyn Fn(usize, &mut [bool]);

/// Per-head attention probabilities (`L x S` each) and the projected output (`L x c`).
fn attend(
    x: ArrayView2<'_, f64>,
    src: ArrayView2<'_, f64>,
    w: &AttentionWeights,
    permit: Option<Permit<'_>>,
) -> Result<(Vec<Array2<f64>>, Array2<f64>), AttentionError> {
    w.validate()?;
    if x.ncols() != w.query_dim() {
        return Err(shape_err(format!("query width {} != {}", x.ncols(), w.query_dim())));
    }
    if src.ncols() != w.source_dim() {
        return Err(shape_err(format!("source width {} != {}", src.ncols(), w.source_dim())));
    }
    let q = x.dot(&w.wq);
    let k = src.dot(&w.wk);
    let v = src.dot(&w.wv);
    let head_dim = w.inner_dim() / w.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (l, s_len) = (x.nrows(), src.nrows());
    let mut mixed = Array2::<f64>::zeros((l, w.inner_dim()));
    let mut probs = Vec::with_capacity(w.heads);
    let mut permitted = vec![true; s_len];
    for h in 0..w.heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let mut p = Array2::<f64>::zeros((l, s_len));
        for row in 0..l {
            match permit {
                Some(f) => f(row, &mut permitted),
                None => permitted.fill(true),
            }
            p.row_mut(row).assign(&masked_softmax(scores.row(row), &permitted));
        }
        mixed.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    Ok((probs, mixed.dot(&w.wo)))
}

fn check_cross(z: &LatentGrid, text: &TextEmbeddings, mask: &CrossMask) -> Result<(), AttentionError> {
    if mask.resolution() != z.resolution() {
        return Err(shape_err(format!(
            "cross mask resolution {} != latent resolution {}",
            mask.resolution(),
            z.resolution()
        )));
    }
    if mask.token_count() != text.token_count() {
        return Err(shape_err(format!(
            "cross mask has {} tokens, text has {}",
            mask.token_count(),
            text.token_count()
        )));
    }
    Ok(())
}

fn check_self(z: &LatentGrid, mask: &SelfMask) -> Result<(), AttentionError> {
    if mask.resolution() != z.resolution() {
        return Err(shape_err(format!(
            "self mask resolution {} != latent resolution {}",
            mask.resolution(),
            z.resolution()
        )));
    }
    Ok(())
}

fn cross_permit(mask: &CrossMask) -> impl Fn(usize, &mut [bool]) + '_ {
    move |q, out| {
        for (slot, bit) in out.iter_mut().zip(mask.cell(q).iter()) {
            *slot = *bit;
        }
    }
}

fn self_permit(mask: &SelfMask) -> impl Fn(usize, &mut [bool]) + '_ {
    move |q, out| {
        for (slot, bit) in out.iter_mut().zip(mask.row(q).iter()) {
            *slot = *bit;
        }
    }
}

/// Unmasked cross-attention update (`p^2 x c`) with the given weights.
pub fn cross_attention(z: &LatentGrid, text: &TextEmbeddings, w: &AttentionWeights) -> Result<Array2<f64>, AttentionError> {
    Ok(attend(z.values.view(), text.values.view(), w, None)?.1)
}

/// Unmasked self-attention update (`p^2 x c`) with the given weights.
pub fn self_attention(z: &LatentGrid, w: &AttentionWeights) -> Result<Array2<f64>, AttentionError> {
    Ok(attend(z.values.view(), z.values.view(), w, None)?.1)
}

/// Per-head `p^2 x N` attention probabilities of the masked cross-attention.
pub fn cross_attention_probs(
    z: &LatentGrid,
    text: &TextEmbeddings,
    mask: &CrossMask,
    w: &AttentionWeights,
) -> Result<Vec<Array2<f64>>, AttentionError> {
    check_cross(z, text, mask)?;
    let permit = cross_permit(mask);
    Ok(attend(z.values.view(), text.values.view(), w, Some(&permit))?.0)
}

/// Per-head `p^2 x p^2` attention probabilities of the masked self-attention.
pub fn self_attention_probs(z: &LatentGrid, mask: &SelfMask, w: &AttentionWeights) -> Result<Vec<Array2<f64>>, AttentionError> {
    check_self(z, mask)?;
    let permit = self_permit(mask);
    Ok(attend(z.values.view(), z.values.view(), w, Some(&permit))?.0)
}

fn gate(update: Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
    update * gain
}

/// LACA update: cross-attention restricted by `mask`, scaled by the LACA gain.
pub fn masked_cross_attention(
    z: &LatentGrid,
    text: &TextEmbeddings,
    mask: &CrossMask,
    w: &BlockWeights,
) -> Result<Array2<f64>, AttentionError> {
    w.validate()?;
    check_cross(z, text, mask)?;
    let permit = cross_permit(mask);
    let (_, out) = attend(z.values.view(), text.values.view(), &w.laca, Some(&permit))?;
    Ok(gate(out, &w.laca_gain))
}

/// LASA update: self-attention restricted by `mask`, scaled by the LASA gain.
pub fn masked_self_attention(z: &LatentGrid, mask: &SelfMask, w: &BlockWeights) -> Result<Array2<f64>, AttentionError> {
    w.validate()?;
    check_self(z, mask)?;
    let permit = self_permit(mask);
    let (_, out) = attend(z.values.view(), z.values.view(), &w.lasa, Some(&permit))?;
    Ok(gate(out, &w.lasa_gain))
}

/// Masks available to a block at its resolution.
#[derive(Debug, Clone, Copy)]
pub struct BlockMasks<'a> {
    pub cross: &'a CrossMask,
    pub self_attn: Option<&'a SelfMask>,
}

/// Residual SA, then LACA and LASA when layout is on, then CA.
pub fn block_forward(
    z: &LatentGrid,
    text: &TextEmbeddings,
    masks: Option<BlockMasks<'_>>,
    w: &BlockWeights,
    layout_on: bool,
) -> Result<LatentGrid, AttentionError> {
    w.validate()?;
    if z.channels() != w.channels() {
        return Err(shape_err(format!("latent has {} channels, weights expect {}", z.channels(), w.channels())));
    }
    let mut z = z.add(&self_attention(z, &w.sa)?);
    if let (true, Some(m)) = (layout_on, masks) {
        z = z.add(&masked_cross_attention(&z, text, m.cross, w)?);
        if let Some(sm) = m.self_attn {
            z = z.add(&masked_self_attention(&z, sm, w)?);
        }
    }
    Ok(z.add(&cross_attention(&z, text, &w.ca)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, p: usize, n: usize, heads: usize) -> (LatentGrid, TextEmbeddings, BlockWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = LatentGrid::random(p, 6, &mut rng);
        let text = TextEmbeddings::random(n, 5, &mut rng);
        let w = BlockWeights::random(6, 5, 8, heads, &mut rng);
        (z, text, w)
    }

    #[test]
    fn softmax_masks_and_normalizes() {
        let s = Array1::from(vec![1.0, 3.0, -2.0, 0.5]);
        let p = masked_softmax(s.view(), &[true, false, true, false]);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[3], 0.0);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        let e = [1f64.exp(), (-2f64).exp()];
        assert_abs_diff_eq!(p[0], e[0] / (e[0] + e[1]), epsilon = 1e-12);

        let single = masked_softmax(s.view(), &[false, false, true, false]);
        assert_eq!(single.to_vec(), vec![0.0, 0.0, 1.0, 0.0]);

        let none = masked_softmax(s.view(), &[false; 4]);
        let plain = masked_softmax(s.view(), &[true; 4]);
        assert_eq!(none, plain);
    }

    #[test]
    fn zero_gain_gives_exact_zero_delta() {
        let (z, text, w) = setup(1, 4, 5, 1);
        let d = masked_cross_attention(&z, &text, &CrossMask::ones(4, 5), &w).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        let d = masked_self_attention(&z, &SelfMask::ones(4), &w).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_masks_match_plain_attention() {
        for heads in [1, 2, 4] {
            let (z, text, w) = setup(2, 4, 5, heads);
            let w = w.with_gains(1.0);
            let masked = masked_cross_attention(&z, &text, &CrossMask::ones(4, 5), &w).unwrap();
            let plain = cross_attention(&z, &text, &w.ca).unwrap();
            assert!(max_abs_diff(masked.view(), plain.view()) <= 1e-12);
            let masked = masked_self_attention(&z, &SelfMask::ones(4), &w).unwrap();
            let plain = self_attention(&z, &w.sa).unwrap();
            assert!(max_abs_diff(masked.view(), plain.view()) <= 1e-12);
        }
    }

    #[test]
    fn single_token_rows_return_that_value_projection() {
        let (z, text, w) = setup(3, 3, 4, 1);
        let w = w.with_gains(1.0);
        let mut mask = CrossMask::zeros(3, 4);
        for i in 0..3 {
            for j in 0..3 {
                mask.set(i, j, (i + 2 * j) % 4, true);
            }
        }
        let out = masked_cross_attention(&z, &text, &mask, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let t = (i + 2 * j) % 4;
                let expected = text.values().row(t).dot(&w.laca.wv).dot(&w.laca.wo);
                for (a, b) in out.row(3 * i + j).iter().zip(expected.iter()) {
                    assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn diagonal_self_mask_returns_own_value_projection() {
        let (z, _, w) = setup(4, 3, 2, 2);
        let w = w.with_gains(1.0);
        let mut mask = SelfMask::zeros(3);
        for q in 0..9 {
            mask.set(q, q, true);
        }
        let out = masked_self_attention(&z, &mask, &w).unwrap();
        let expected = z.values().dot(&w.lasa.wv).dot(&w.lasa.wo);
        assert!(max_abs_diff(out.view(), expected.view()) <= 1e-12);
    }

    #[test]
    fn block_order_and_identities() {
        let (z, text, w) = setup(5, 4, 5, 2);
        let cross = CrossMask::ones(4, 5);
        let sm = SelfMask::ones(4);
        let masks = Some(BlockMasks { cross: &cross, self_attn: Some(&sm) });

        let vanilla = block_forward(&z, &text, None, &w, false).unwrap();
        let off = block_forward(&z, &text, masks, &w, false).unwrap();
        assert_eq!(vanilla, off);
        let zero_init = block_forward(&z, &text, masks, &w, true).unwrap();
        assert_eq!(vanilla, zero_init);

        let w1 = w.clone().with_gains(1.0);
        let got = block_forward(&z, &text, masks, &w1, true).unwrap();
        let mut r = z.values().clone();
        r = &r + &self_attention(&LatentGrid::new(4, r.clone()).unwrap(), &w.sa).unwrap();
        r = &r + &cross_attention(&LatentGrid::new(4, r.clone()).unwrap(), &text, &w.ca).unwrap();
        r = &r + &self_attention(&LatentGrid::new(4, r.clone()).unwrap(), &w.sa).unwrap();
        r = &r + &cross_attention(&LatentGrid::new(4, r.clone()).unwrap(), &text, &w.ca).unwrap();
        assert!(max_abs_diff(got.values().view(), r.view()) <= 1e-9);
    }

    #[test]
    fn shape_errors() {
        let (z, text, w) = setup(6, 4, 5, 1);
        assert!(matches!(
            masked_cross_attention(&z, &text, &CrossMask::ones(2, 5), &w),
            Err(AttentionError::ShapeMismatch(_))
        ));
        assert!(matches!(
            masked_cross_attention(&z, &text, &CrossMask::ones(4, 3), &w),
            Err(AttentionError::ShapeMismatch(_))
        ));
        assert!(matches!(
            masked_self_attention(&z, &SelfMask::ones(8), &w),
            Err(AttentionError::ShapeMismatch(_))
        ));
        let mut bad = w.clone();
        bad.laca_gain = Array1::zeros(2);
        assert!(bad.validate().is_err());
        assert!(LatentGrid::new(3, Array2::zeros((8, 2))).is_err());
        assert!(LatentGrid::new(2, Array2::from_elem((4, 2), f64::NAN)).is_err());
    }
}
