use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Statistics scope of the normalization layers inside the edge-conv stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Each cloud is normalized over its own points.
    #[default]
    PerCloud,
    /// Source and target of a pair share statistics, like a two-sample batch.
    PairBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of each edge-conv layer.
    pub filters: Vec<usize>,
    /// Feature-space neighbors per point (clamped to `n - 1`).
    pub k: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Correction-walk layer widths; the last must be 3.
    pub correction: Vec<usize>,
    /// Feature width `c`; equals the last edge-conv width.
    pub embed_dim: usize,
    /// Edge feature `(F_i, F_k - F_i)` instead of `(F_i, F_k)`.
    pub edge_difference: bool,
    pub norm: NormMode,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            filters: vec![16, 16, 32, 32, 64],
            k: 10,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            correction: vec![64, 32, 16, 3],
            embed_dim: 64,
            edge_difference: false,
            norm: NormMode::PerCloud,
            norm_eps: 1e-5,
        }
    }

    /// Full-size widths: 512-wide embedding, K = 20, four heads.
    pub fn full() -> Self {
        ModelConfig {
            filters: vec![64, 64, 128, 256, 512],
            k: 20,
            heads: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            correction: vec![512, 256, 512, 256, 128, 16, 3],
            embed_dim: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let Some(&last) = self.filters.last() else {
            return bad("model.filters is empty".into());
        };
        if self.filters.contains(&0) || self.correction.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.embed_dim != last {
            return bad(format!("model.embed_dim {} != last filter width {last}", self.embed_dim));
        }
        if self.correction.last() != Some(&3) {
            return bad(format!("model.correction must end in 3, got {:?}", self.correction));
        }
        if self.k == 0 {
            return bad("model.k must be >= 1".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("model.heads {} must divide embed_dim {}", self.heads, self.embed_dim));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer each".into());
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad("model.norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `(fan_in, fan_out)` of each correction-walk layer.
    pub fn correction_chain(&self) -> Vec<(usize, usize)> {
        let mut prev = 2 * self.embed_dim;
        self.correction
            .iter()
            .map(|&w| {
                let io = (prev, w);
                prev = w;
                io
            })
            .collect()
    }
}
