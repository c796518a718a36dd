//! Feature attention highlight module.
//!
//! A support embedding goes through the coarse highlighter (three
//! fully-connected layers, ReLU between them, sigmoid at the end) and then the
//! fine highlighter (one fully-connected layer). Both outputs are per-channel
//! vectors. They act as 1×1 depth-wise correlation kernels on the query
//! features, coarse first and fine second.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, SupportEmbedding};
use crate::nn::{join, relu_backward_in_place, relu_in_place, sigmoid, Linear, Module, Param};
use crate::tensor::Tensor3;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorStage {
    Coarse,
    Fine,
}

/// Per-class channel vector emitted by a highlighter.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitingFactor {
    pub values: Vec<f64>,
    pub class_id: ClassId,
    pub stage: FactorStage,
}

impl ExcitingFactor {
    /// The factor as a C×1×1 depth-wise kernel.
    pub fn as_kernels(&self) -> Tensor3 {
        Tensor3::from_vec(self.values.len(), 1, 1, self.values.clone()).expect("shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FineActivation {
    #[default]
    Sigmoid,
    Identity,
}

/// What the fine highlighter reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FineInput {
    #[default]
    CoarseFactor,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlighterConfig {
    pub hidden: (usize, usize),
    pub fine_activation: FineActivation,
    pub fine_input: FineInput,
}

impl Default for HighlighterConfig {
    fn default() -> Self {
        Self {
            hidden: (256, 192),
            fine_activation: FineActivation::Sigmoid,
            fine_input: FineInput::CoarseFactor,
        }
    }
}

/// Coarse (`D → d1 → d2 → C`) and fine (`C → C`, or `D → C`) layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HighlighterParams {
    pub coarse: [Linear; 3],
    pub fine: Linear,
    pub fine_activation: FineActivation,
    pub fine_input: FineInput,
}

/// Intermediate values of one highlighter pass.
#[derive(Debug, Clone)]
pub struct HighlightTrace {
    embedding: Vec<f64>,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    coarse: Vec<f64>,
    fine: Vec<f64>,
}

impl HighlighterParams {
    pub fn new<R: Rng + ?Sized>(
        embedding_dim: usize,
        feature_channels: usize,
        config: &HighlighterConfig,
        rng: &mut R,
    ) -> Self {
        let (d1, d2) = config.hidden;
        let fine_in = match config.fine_input {
            FineInput::CoarseFactor => feature_channels,
            FineInput::Embedding => embedding_dim,
        };
        Self {
            coarse: [
                Linear::new(embedding_dim, d1, rng),
                Linear::new(d1, d2, rng),
                Linear::with_std(d2, feature_channels, (1.0 / d2 as f64).sqrt(), rng),
            ],
            fine: Linear::with_std(fine_in, feature_channels, (1.0 / fine_in as f64).sqrt(), rng),
            fine_activation: config.fine_activation,
            fine_input: config.fine_input,
        }
    }

    /// Builds parameters from explicit layers.
    pub fn from_layers(
        coarse: [Linear; 3],
        fine: Linear,
        fine_activation: FineActivation,
        fine_input: FineInput,
    ) -> Result<Self> {
        if coarse[0].out_features() != coarse[1].in_features()
            || coarse[1].out_features() != coarse[2].in_features()
        {
            return Err(Error::Shape("coarse highlighter layers do not compose".into()));
        }
        let c = coarse[2].out_features();
        let fine_in = match fine_input {
            FineInput::CoarseFactor => c,
            FineInput::Embedding => coarse[0].in_features(),
        };
        if fine.in_features() != fine_in || fine.out_features() != c {
            return Err(Error::Shape(format!(
                "fine highlighter must map {fine_in} -> {c}, got {} -> {}",
                fine.in_features(),
                fine.out_features()
            )));
        }
        Ok(Self {
            coarse,
            fine,
            fine_activation,
            fine_input,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.coarse[0].in_features()
    }

    pub fn feature_channels(&self) -> usize {
        self.coarse[2].out_features()
    }

    fn coarse_values(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "embedding has {} values, highlighter expects {}",
                embedding.len(),
                self.embedding_dim()
            )));
        }
        let mut h1 = self.coarse[0].forward(embedding, 1)?;
        relu_in_place(&mut h1);
        let mut h2 = self.coarse[1].forward(&h1, 1)?;
        relu_in_place(&mut h2);
        let mut out = self.coarse[2].forward(&h2, 1)?;
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok((h1, h2, out))
    }

    fn fine_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.fine.forward(input, 1)?;
        if self.fine_activation == FineActivation::Sigmoid {
            out.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        Ok(out)
    }

    /// Both factors with the intermediates needed by [`Self::backward`].
    pub fn forward_traced(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>, HighlightTrace)> {
        let (hidden1, hidden2, coarse) = self.coarse_values(embedding)?;
        let fine = match self.fine_input {
            FineInput::CoarseFactor => self.fine_values(&coarse)?,
            FineInput::Embedding => self.fine_values(embedding)?,
        };
        Ok((
            coarse.clone(),
            fine.clone(),
            HighlightTrace {
                embedding: embedding.to_vec(),
                hidden1,
                hidden2,
                coarse,
                fine,
            },
        ))
    }

    /// Accumulates parameter gradients given the gradients of both factors and
    /// returns the embedding gradient.
    pub fn backward(&mut self, trace: &HighlightTrace, grad_coarse: &[f64], grad_fine: &[f64]) -> Vec<f64> {
        let mut g_fine: Vec<f64> = grad_fine.to_vec();
        if self.fine_activation == FineActivation::Sigmoid {
            for (g, y) in g_fine.iter_mut().zip(&trace.fine) {
                *g *= y * (1.0 - y);
            }
        }
        let mut g_coarse = grad_coarse.to_vec();
        let mut g_embedding = vec![0.0; trace.embedding.len()];
        match self.fine_input {
            FineInput::CoarseFactor => {
                let back = self.fine.backward(&trace.coarse, &g_fine, 1);
                g_coarse.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
            FineInput::Embedding => {
                let back = self.fine.backward(&trace.embedding, &g_fine, 1);
                g_embedding.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }
        for (g, y) in g_coarse.iter_mut().zip(&trace.coarse) {
            *g *= y * (1.0 - y);
        }
        let mut g2 = self.coarse[2].backward(&trace.hidden2, &g_coarse, 1);
        relu_backward_in_place(&trace.hidden2, &mut g2);
        let mut g1 = self.coarse[1].backward(&trace.hidden1, &g2, 1);
        relu_backward_in_place(&trace.hidden1, &mut g1);
        let g0 = self.coarse[0].backward(&trace.embedding, &g1, 1);
        g_embedding.iter_mut().zip(&g0).for_each(|(a, b)| *a += b);
        g_embedding
    }

    /// Fine factor computed straight from the embedding; only valid when the
    /// fine highlighter reads embeddings.
    pub fn fine_from_embedding(&self, embedding: &SupportEmbedding) -> Result<ExcitingFactor> {
        if self.fine_input != FineInput::Embedding {
            return Err(Error::Usage("fine highlighter is configured to read the coarse factor".into()));
        }
        if embedding.values.len() != self.embedding_dim() {
            return Err(Error::Shape("embedding length mismatch".into()));
        }
        Ok(ExcitingFactor {
            values: self.fine_values(&embedding.values)?,
            class_id: embedding.class_id,
            stage: FactorStage::Fine,
        })
    }
}

impl Module for HighlighterParams {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.coarse.iter().enumerate() {
            l.params(&join(prefix, &format!("coarse{i}")), out);
        }
        self.fine.params(&join(prefix, "fine"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, l) in self.coarse.iter_mut().enumerate() {
            l.params_mut(&join(prefix, &format!("coarse{i}")), out);
        }
        self.fine.params_mut(&join(prefix, "fine"), out);
    }
}

/// `sigmoid(A3·relu(A2·relu(A1·e + b1) + b2) + b3)`
pub fn coarse_highlight(embedding: &SupportEmbedding, params: &HighlighterParams) -> Result<ExcitingFactor> {
    let (_, _, values) = params.coarse_values(&embedding.values)?;
    Ok(ExcitingFactor {
        values,
        class_id: embedding.class_id,
        stage: FactorStage::Coarse,
    })
}

/// `act(W·f + b)` on a coarse factor.
pub fn fine_highlight(coarse_factor: &ExcitingFactor, params: &HighlighterParams) -> Result<ExcitingFactor> {
    if coarse_factor.stage != FactorStage::Coarse {
        return Err(Error::Usage("fine highlighter expects a coarse-stage factor".into()));
    }
    if params.fine_input != FineInput::CoarseFactor {
        return Err(Error::Usage("fine highlighter is configured to read embeddings".into()));
    }
    if coarse_factor.values.len() != params.feature_channels() {
        return Err(Error::Shape(format!(
            "coarse factor has {} channels, expected {}",
            coarse_factor.values.len(),
            params.feature_channels()
        )));
    }
    Ok(ExcitingFactor {
        values: params.fine_values(&coarse_factor.values)?,
        class_id: coarse_factor.class_id,
        stage: FactorStage::Fine,
    })
}

fn check_correlation(features: &Tensor3, kernels: &Tensor3) -> Result<()> {
    if features.channels() != kernels.channels() {
        return Err(Error::Shape(format!(
            "features have {} channels, kernels {}",
            features.channels(),
            kernels.channels()
        )));
    }
    if kernels.height() > features.height() || kernels.width() > features.width() || kernels.plane_len() == 0 {
        return Err(Error::Shape(format!(
            "kernel {}x{} does not fit map {}x{}",
            kernels.height(),
            kernels.width(),
            features.height(),
            features.width()
        )));
    }
    Ok(())
}

/// Valid-mode cross correlation of channel `c` of `features` with channel
/// `c` of `kernels`, for every channel independently.
pub fn correlate_channels(features: &Tensor3, kernels: &Tensor3) -> Result<Tensor3> {
    check_correlation(features, kernels)?;
    let (c, h, w) = features.shape();
    let (kh, kw) = (kernels.height(), kernels.width());
    if kh == 1 && kw == 1 {
        let mut out = features.clone();
        for ch in 0..c {
            let k = kernels.data()[ch];
            out.plane_mut(ch).iter_mut().for_each(|v| *v *= k);
        }
        return Ok(out);
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Tensor3::zeros(c, oh, ow);
    for ch in 0..c {
        let src = features.plane(ch);
        let ker = kernels.plane(ch);
        let dst = out.plane_mut(ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let kv = ker[ky * kw + kx];
                for oy in 0..oh {
                    let row = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                    for (d, s) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(row) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`correlate_channels`] with respect to features and kernels.
pub fn correlate_channels_backward(
    features: &Tensor3,
    kernels: &Tensor3,
    grad_out: &Tensor3,
) -> Result<(Tensor3, Tensor3)> {
    check_correlation(features, kernels)?;
    let (c, h, w) = features.shape();
    let (kh, kw) = (kernels.height(), kernels.width());
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    if grad_out.shape() != (c, oh, ow) {
        return Err(Error::Shape("gradient shape does not match correlation output".into()));
    }
    let mut g_features = Tensor3::zeros(c, h, w);
    let mut g_kernels = Tensor3::zeros(c, kh, kw);
    for ch in 0..c {
        let src = features.plane(ch);
        let ker = kernels.plane(ch);
        let g = grad_out.plane(ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let kv = ker[ky * kw + kx];
                let mut acc = 0.0;
                let gf = g_features.plane_mut(ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = (oy + ky) * w + ox + kx;
                        let go = g[oy * ow + ox];
                        acc += go * src[idx];
                        gf[idx] += go * kv;
                    }
                }
                g_kernels.plane_mut(ch)[ky * kw + kx] = acc;
            }
        }
    }
    Ok((g_features, g_kernels))
}

/// Depth-wise cross correlation of a feature map with `C×kh×kw` kernels.
pub fn dw_cross_correlate(features: &FeatureMap, kernels: &Tensor3) -> Result<FeatureMap> {
    Ok(FeatureMap {
        values: correlate_channels(&features.values, kernels)?,
        stride: features.stride,
    })
}

/// Class-specific feature maps: coarse factor then fine factor, each applied
/// as 1×1 depth-wise kernels.
pub fn apply_highlight(
    features: &FeatureMap,
    support_embeddings: &[SupportEmbedding],
    params: &HighlighterParams,
) -> Result<BTreeMap<ClassId, FeatureMap>> {
    let mut out = BTreeMap::new();
    for e in support_embeddings {
        if out.contains_key(&e.class_id) {
            return Err(Error::Usage(format!("two support embeddings for class {}", e.class_id)));
        }
        let (coarse, fine, _) = params.forward_traced(&e.values)?;
        let kc = Tensor3::from_vec(coarse.len(), 1, 1, coarse)?;
        let kf = Tensor3::from_vec(fine.len(), 1, 1, fine)?;
        let once = dw_cross_correlate(features, &kc)?;
        out.insert(e.class_id, dw_cross_correlate(&once, &kf)?);
    }
    Ok(out)
}
