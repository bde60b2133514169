//! Attention readout: turn a bank of memory tokens into a foreground
//! probability map for a query feature map, then threshold it into a mask.
//!
//! Every query location attends over all tokens with scaled dot-product
//! attention (softmax with max subtraction, so arbitrarily large logits
//! stay finite) and reads out the convex combination of the token labels.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::memory::Token;
use crate::metrics::Mask;
use crate::numerics::{FeatureMap, SpatialMap};

/// Attention temperature and binarisation threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutConfig {
    /// Dot products are divided by this before the softmax.
    pub temperature: f64,
    /// Probability at or above which a pixel is predicted foreground.
    pub threshold: f64,
}

impl ReadoutConfig {
    /// The usual scaling for `c`-channel features: temperature `sqrt(c)`,
    /// threshold 0.5.
    pub fn for_channels(c: usize) -> Self {
        Self { temperature: libm::sqrt(c as f64), threshold: 0.5 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig { what: "readout temperature must be positive" });
        }
        if !(self.threshold.is_finite() && (0.0..=1.0).contains(&self.threshold)) {
            return Err(Error::InvalidConfig { what: "readout threshold outside [0, 1]" });
        }
        Ok(())
    }
}

/// Soft foreground probability at every query location.
pub fn attend(query: &FeatureMap, tokens: &[Token<'_>], cfg: &ReadoutConfig) -> Result<SpatialMap> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    let c = query.c();
    for t in tokens {
        if t.feature.len() != c {
            return Err(Error::ChannelMismatch { expected: c, got: t.feature.len() });
        }
        if !t.feature.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "memory token feature" });
        }
        if !(t.label >= 0.0 && t.label <= 1.0) {
            return Err(Error::LabelRange { got: t.label });
        }
    }
    let mut out = SpatialMap::zeros(query.h(), query.w())?;
    let mut logits: Vec<f64> = Vec::with_capacity(tokens.len());
    for i in 0..query.h() {
        for j in 0..query.w() {
            let q = query.location(i, j);
            logits.clear();
            let mut max_logit = f64::NEG_INFINITY;
            for t in tokens {
                let dot: f64 = q.iter().zip(t.feature).map(|(a, b)| a * b).sum();
                let l = dot / cfg.temperature;
                if l > max_logit {
                    max_logit = l;
                }
                logits.push(l);
            }
            let mut norm = 0.0;
            let mut acc = 0.0;
            for (l, t) in logits.iter().zip(tokens) {
                let e = libm::exp(l - max_logit);
                norm += e;
                acc += e * t.label;
            }
            // norm >= 1 because the maximal logit contributes exp(0); the
            // clamp only absorbs last-bit rounding of the convex combination.
            let p = (acc / norm).clamp(0.0, 1.0);
            out.set(i, j, p);
        }
    }
    Ok(out)
}

/// Threshold the attention probabilities into a mask. The returned score
/// is the mean probability over predicted-foreground pixels (0 when the
/// prediction is empty) and serves as the admission confidence for
/// score-gated memory policies.
pub fn predict_mask(query: &FeatureMap, tokens: &[Token<'_>], cfg: &ReadoutConfig) -> Result<(Mask, f64)> {
    let probs = attend(query, tokens, cfg)?;
    let mask = Mask::from_fn(query.h(), query.w(), |i, j| probs.get(i, j) >= cfg.threshold)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..query.h() {
        for j in 0..query.w() {
            if mask.get(i, j) {
                sum += probs.get(i, j);
                n += 1;
            }
        }
    }
    let confidence = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok((mask, confidence))
}
