//! Shared residual CNN feature extractor.
//!
//! The query path keeps the spatial feature map; the support path runs the
//! very same layers and global-average-pools the result. There is no
//! support-specific parameter anywhere.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{SupportCrop, SUPPORT_SIZE};
use crate::nn::{join, relu_backward_in_place, relu_in_place, Conv2d, Module, Param};
use crate::tensor::Tensor3;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the four stride-2 stages; the last is `C_feat`.
    pub widths: [usize; 4],
    /// Whether each stage ends with a residual 3×3 convolution.
    pub residual: [bool; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            residual: [false, false, true, true],
        }
    }
}

impl BackboneConfig {
    pub fn feature_channels(&self) -> usize {
        self.widths[3]
    }
}

/// C×H×W activations with `H = ceil(input_H / stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor3,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.channels()
    }
}

/// Globally pooled support features.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportEmbedding {
    pub values: Vec<f64>,
    pub class_id: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    down: Conv2d,
    residual: Option<Conv2d>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    input: Tensor3,
    /// Per stage: post-ReLU downsampled map and post-ReLU stage output.
    stages: Vec<(Tensor3, Option<Tensor3>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

pub const BACKBONE_STRIDE: usize = 16;

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let down = Conv2d::new(in_ch, w, 3, 2, 1, rng);
            // residual branch starts small so each block begins near identity
            let residual = config.residual[i].then(|| {
                let std = (2.0 / (9.0 * w as f64)).sqrt() * 0.5;
                Conv2d::with_std(w, w, 3, 1, 1, std, rng)
            });
            stages.push(Stage { down, residual });
            in_ch = w;
        }
        Self {
            config: config.clone(),
            stages,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        BACKBONE_STRIDE
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {}", x.channels())));
        }
        if x.height() < BACKBONE_STRIDE || x.width() < BACKBONE_STRIDE {
            return Err(Error::Shape(format!(
                "image {}x{} smaller than stride {BACKBONE_STRIDE}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn forward_traced(&self, input: Tensor3) -> Result<(Tensor3, BackboneTrace)> {
        self.check_input(&input)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut x = input.clone();
        for st in &self.stages {
            let mut a = st.down.forward(&x)?;
            relu_in_place(a.data_mut());
            match &st.residual {
                Some(res) => {
                    let mut r = res.forward(&a)?;
                    r.add_assign(&a);
                    relu_in_place(r.data_mut());
                    x = r.clone();
                    stages.push((a, Some(r)));
                }
                None => {
                    x = a.clone();
                    stages.push((a, None));
                }
            }
        }
        Ok((x, BackboneTrace { input, stages }))
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3> {
        self.check_input(input)?;
        let mut x = input.clone();
        for st in &self.stages {
            let mut a = st.down.forward(&x)?;
            relu_in_place(a.data_mut());
            x = match &st.residual {
                Some(res) => {
                    let mut r = res.forward(&a)?;
                    r.add_assign(&a);
                    relu_in_place(r.data_mut());
                    r
                }
                None => a,
            };
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for one traced forward pass.
    pub fn backward(&mut self, trace: &BackboneTrace, grad_out: Tensor3) {
        let mut grad = grad_out;
        for i in (0..self.stages.len()).rev() {
            let (a, r) = &trace.stages[i];
            let st = &mut self.stages[i];
            if let (Some(res), Some(r)) = (st.residual.as_mut(), r) {
                relu_backward_in_place(r.data(), grad.data_mut());
                let through = res.backward(a, &grad);
                grad.add_assign(&through);
            }
            relu_backward_in_place(a.data(), grad.data_mut());
            if i == 0 {
                st.down.backward_weights(&trace.input, &grad);
            } else {
                let x = match &trace.stages[i - 1] {
                    (_, Some(r)) => r,
                    (a, None) => a,
                };
                grad = st.down.backward(x, &grad);
            }
        }
    }

    pub fn extract_features(&self, image: &RgbImage) -> Result<FeatureMap> {
        let values = self.forward(&Tensor3::from_image(image))?;
        Ok(FeatureMap {
            values,
            stride: BACKBONE_STRIDE,
        })
    }

    pub fn embed_support(&self, crop: &SupportCrop) -> Result<SupportEmbedding> {
        check_crop(crop)?;
        let features = self.forward(&Tensor3::from_image(&crop.patch))?;
        Ok(SupportEmbedding {
            values: features.global_average(),
            class_id: crop.class_id,
        })
    }
}

pub(crate) fn check_crop(crop: &SupportCrop) -> Result<()> {
    if crop.patch.dimensions() != (SUPPORT_SIZE, SUPPORT_SIZE) {
        return Err(Error::Shape(format!(
            "support crop must be {SUPPORT_SIZE}x{SUPPORT_SIZE}, got {:?}",
            crop.patch.dimensions()
        )));
    }
    Ok(())
}

impl Module for Backbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, st) in self.stages.iter().enumerate() {
            st.down.params(&join(prefix, &format!("stage{i}.down")), out);
            if let Some(r) = &st.residual {
                r.params(&join(prefix, &format!("stage{i}.residual")), out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            st.down.params_mut(&join(prefix, &format!("stage{i}.down")), out);
            if let Some(r) = &mut st.residual {
                r.params_mut(&join(prefix, &format!("stage{i}.residual")), out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CropSource;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(seed: u64) -> Backbone {
        Backbone::new(&BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn crop_of(img: RgbImage) -> SupportCrop {
        SupportCrop {
            class_id: ClassId(0),
            patch: img,
            source: CropSource {
                image_id: "x".into(),
                box_index: 0,
            },
        }
    }

    fn pattern(w: u32, h: u32, k: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([((x * k) % 256) as u8, ((y * 3 + k) % 256) as u8, ((x ^ y) % 256) as u8]))
    }

    #[test]
    fn feature_shape_for_256_input() {
        let f = backbone(0).extract_features(&RgbImage::new(256, 256)).unwrap();
        assert_eq!(f.values.shape(), (128, 16, 16));
        assert_eq!(f.stride, 16);
    }

    #[test]
    fn feature_shape_rounds_up() {
        let f = backbone(0).extract_features(&RgbImage::new(100, 33)).unwrap();
        assert_eq!(f.values.shape(), (128, 3, 7));
    }

    #[test]
    fn all_zero_input_is_finite() {
        let f = backbone(1).extract_features(&RgbImage::new(64, 64)).unwrap();
        assert!(f.values.is_finite());
    }

    #[test]
    fn different_images_give_different_features() {
        let b = backbone(2);
        let a = b.extract_features(&pattern(64, 64, 7)).unwrap();
        let c = b.extract_features(&pattern(64, 64, 13)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn too_small_image_is_a_shape_error() {
        assert!(matches!(
            backbone(0).extract_features(&RgbImage::new(15, 64)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn embedding_length_is_feature_channels() {
        let e = backbone(0).embed_support(&crop_of(pattern(224, 224, 3))).unwrap();
        assert_eq!(e.values.len(), 128);
    }

    #[test]
    fn wrong_crop_shape_is_rejected() {
        assert!(matches!(
            backbone(0).embed_support(&crop_of(RgbImage::new(200, 224))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn embedding_is_pooled_query_features() {
        let b = backbone(4);
        let img = pattern(224, 224, 5);
        let e = b.embed_support(&crop_of(img.clone())).unwrap();
        let f = b.extract_features(&img).unwrap();
        assert_eq!(e.values, f.values.global_average());
    }

    #[test]
    fn constant_crop_pools_to_interior_response() {
        // Zero padding only disturbs a three-cell border of the 14x14 map; the
        // interior of a constant input is itself constant per channel.
        let b = backbone(6);
        let img = RgbImage::from_pixel(224, 224, Rgb([90, 140, 30]));
        let f = b.extract_features(&img).unwrap().values;
        let (c, h, w) = f.shape();
        let trim = 3;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut n = 0.0;
            for y in trim..h - trim {
                for x in trim..w - trim {
                    sum += f.at(ch, y, x);
                    n += 1.0;
                }
            }
            let pooled = sum / n;
            let centre = f.at(ch, h / 2, w / 2);
            assert!((pooled - centre).abs() < 1e-5, "channel {ch}: {pooled} vs {centre}");
        }
    }

    #[test]
    fn inference_is_bit_deterministic() {
        let b = backbone(3);
        let img = pattern(96, 80, 11);
        assert_eq!(b.extract_features(&img).unwrap(), b.extract_features(&img).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = BackboneConfig {
            widths: [2, 3, 3, 4],
            residual: [false, true, false, true],
        };
        let mut b = Backbone::new(&cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let x = Tensor3::from_image(&pattern(32, 32, 9));
        let (y, trace) = b.forward_traced(x.clone()).unwrap();
        let r: Vec<f64> = (0..y.data().len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let grad = Tensor3::from_vec(y.channels(), y.height(), y.width(), r.clone()).unwrap();
        b.backward(&trace, grad);
        let loss = |b: &Backbone| -> f64 { b.forward(&x).unwrap().data().iter().zip(&r).map(|(a, c)| a * c).sum() };
        let h = 1e-6;
        let names: Vec<String> = b.named_params().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let len = b.named_params().iter().find(|(n, _)| *n == name).unwrap().1.len();
            for i in (0..len).step_by(7) {
                let analytic = b.named_params().iter().find(|(n, _)| *n == name).unwrap().1.grad[i];
                let mut bp = b.clone();
                bp.named_params_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.value[i] += h;
                let mut bm = b.clone();
                bm.named_params_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.value[i] -= h;
                let fd = (loss(&bp) - loss(&bm)) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}[{i}]: {fd} vs {analytic}");
            }
        }
    }
}
