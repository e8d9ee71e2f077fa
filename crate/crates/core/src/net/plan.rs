use serde::Serialize;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerExtent {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HeadExtent {
    /// Pixel size is `2^level` km; level 0 is the final output.
    pub level: usize,
    pub h: usize,
    pub w: usize,
    /// Side of the loss window in head pixels.
    pub loss_crop: usize,
}

/// Extents of every layer for one input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapePlan {
    pub input_h: usize,
    pub input_w: usize,
    pub layers: Vec<LayerExtent>,
    /// Coarsest first; the last entry is the 1 km output.
    pub heads: Vec<HeadExtent>,
}

impl ShapePlan {
    pub fn output(&self) -> HeadExtent {
        *self.heads.last().expect("plan has a final output")
    }

    pub fn head(&self, level: usize) -> Option<HeadExtent> {
        self.heads.iter().copied().find(|h| h.level == level)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerExtent> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Every head must contain its loss window, and the patch must contain the
    /// 1 km window.
    pub fn check_loss_crops(&self, config: &ModelConfig) -> Result<()> {
        if self.input_h < config.loss_crop_km || self.input_w < config.loss_crop_km {
            return Err(Error::Config(format!(
                "patch {}x{} smaller than the {} km loss window",
                self.input_h, self.input_w, config.loss_crop_km
            )));
        }
        for head in &self.heads {
            if !config.loss_crop_km.is_multiple_of(1 << head.level) {
                return Err(Error::Config(format!(
                    "loss window {} km not divisible by the {} km pixel size",
                    config.loss_crop_km,
                    1 << head.level
                )));
            }
            if head.loss_crop > head.h || head.loss_crop > head.w {
                return Err(Error::shape(
                    format!("head{}", head.level),
                    format!("loss crop {} exceeds head extent {}x{}", head.loss_crop, head.h, head.w),
                ));
            }
        }
        Ok(())
    }
}

struct AxisPlan {
    layers: Vec<(String, usize, usize)>,
    heads: Vec<(usize, usize)>,
}

fn check_crop(layer: &str, from: usize, to: usize) -> Result<()> {
    if from < to {
        return Err(Error::NegativeExtent { layer: layer.to_string(), input: from, required: to });
    }
    if !(from - to).is_multiple_of(2) {
        return Err(Error::OddCrop { layer: layer.to_string(), from, to });
    }
    Ok(())
}

fn plan_axis(c: &ModelConfig, input: usize) -> Result<AxisPlan> {
    let mut layers = Vec::new();
    let mut n = input;
    let mut enc_out = Vec::with_capacity(c.levels.len());
    for (l, stage) in c.levels.iter().enumerate() {
        for i in 0..stage.conv_count {
            let name = format!("enc{l}_conv{i}");
            n = conv_output_extent(&name, n, c.kernel, 1)?;
            layers.push((name, n, stage.channels));
        }
        enc_out.push(n);
        let next = c.levels.get(l + 1).unwrap_or(&c.bottleneck).channels;
        let name = format!("down{l}");
        n = conv_output_extent(&name, n, c.down_kernel, c.down_stride)?;
        layers.push((name, n, next));
    }
    for i in 0..c.bottleneck.conv_count {
        let name = format!("bottleneck_conv{i}");
        n = conv_output_extent(&name, n, c.kernel, 1)?;
        layers.push((name, n, c.bottleneck.channels));
    }

    let bl = c.bottleneck_level();
    let mut features = vec![0; bl + 1];
    features[bl] = n;
    for l in (0..bl).rev() {
        let up = n * c.down_stride;
        check_crop(&format!("dec{l}_skip"), enc_out[l], up)?;
        let name = format!("dec{l}_conv");
        n = conv_output_extent(&name, up, c.kernel, 1)?;
        layers.push((name, n, c.decoder_channels[bl - 1 - l]));
        features[l] = n;
    }

    let mut heads = Vec::new();
    let mut prev: Option<usize> = None;
    for l in (1..=c.coarsest_head_level).rev() {
        if let Some(p) = prev {
            check_crop(&format!("head{l}_up"), p * c.down_stride, features[l])?;
        }
        let name = format!("head{l}");
        let e = conv_output_extent(&name, features[l], c.head_kernel, 1)?;
        layers.push((name, e, c.output_frames));
        heads.push((l, e));
        prev = Some(e);
    }
    if let Some(p) = prev {
        check_crop("final_up", p * c.down_stride, features[0])?;
    }
    let mut n = features[0];
    for (i, &ch) in c.final_channels.iter().enumerate() {
        let name = format!("final{i}");
        n = conv_output_extent(&name, n, c.kernel, 1)?;
        layers.push((name, n, ch));
    }
    heads.push((0, n));
    Ok(AxisPlan { layers, heads })
}

/// Per-layer extent table for an `h x w` input.
pub fn infer_shapes(config: &ModelConfig, h: usize, w: usize) -> Result<ShapePlan> {
    config.validate()?;
    let ph = plan_axis(config, h)?;
    let pw = plan_axis(config, w)?;
    let layers = ph
        .layers
        .into_iter()
        .zip(pw.layers)
        .map(|((name, eh, ch), (_, ew, _))| LayerExtent { name, h: eh, w: ew, channels: ch })
        .collect();
    let heads = ph
        .heads
        .into_iter()
        .zip(pw.heads)
        .map(|((level, eh), (_, ew))| HeadExtent {
            level,
            h: eh,
            w: ew,
            loss_crop: config.loss_crop_km >> level,
        })
        .collect();
    Ok(ShapePlan { input_h: h, input_w: w, layers, heads })
}

/// Nearest accepted square input sizes below and above `n`.
pub fn nearest_valid_sizes(config: &ModelConfig, n: usize) -> (Option<usize>, Option<usize>) {
    let ok = |s: usize| infer_shapes(config, s, s).is_ok();
    let below = (1..n).rev().find(|&s| ok(s));
    let above = (n + 1..n.saturating_mul(2).max(n + 64)).find(|&s| ok(s));
    (below, above)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_plan_matches_hand_arithmetic() {
        let plan = infer_shapes(&ModelConfig::canonical(), 256, 256).unwrap();
        let ext: Vec<usize> = plan.layers.iter().map(|l| l.h).collect();
        // encoder, bottleneck, decoder, heads 3..1, final convs
        assert_eq!(
            ext,
            vec![254, 252, 126, 124, 62, 60, 30, 28, 14, 12, 22, 42, 82, 162, 22, 42, 82, 160, 158, 156]
        );
        let heads: Vec<(usize, usize)> = plan.heads.iter().map(|h| (h.level, h.h)).collect();
        assert_eq!(heads, vec![(3, 22), (2, 42), (1, 82), (0, 156)]);
        assert_eq!(plan.output().loss_crop, 48);
        assert_eq!(plan.head(3).unwrap().loss_crop, 6);
        plan.check_loss_crops(&ModelConfig::canonical()).unwrap();
    }

    #[test]
    fn canonical_translation() {
        let c = ModelConfig::canonical();
        let a = infer_shapes(&c, 256, 256).unwrap().output().h;
        let b = infer_shapes(&c, 288, 288).unwrap().output().h;
        assert_eq!(b, 188);
        assert_eq!(b - a, 32);
    }

    #[test]
    fn tiny_plan() {
        let plan = infer_shapes(&ModelConfig::tiny(), 70, 70).unwrap();
        let ext: Vec<usize> = plan.layers.iter().map(|l| l.h).collect();
        assert_eq!(ext, vec![68, 34, 32, 62, 32, 60]);
        assert_eq!(plan.output().h, 60);
        assert_eq!(plan.head(1).unwrap().h, 32);
        plan.check_loss_crops(&ModelConfig::tiny()).unwrap();
    }

    #[test]
    fn small_input_fails() {
        match infer_shapes(&ModelConfig::canonical(), 32, 32) {
            Err(Error::NegativeExtent { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn odd_skip_crop_is_rejected() {
        // 71 -> 69 -> 34 -> 32 -> up 64; skip crop 69 -> 64 is odd.
        match infer_shapes(&ModelConfig::tiny(), 71, 70) {
            Err(Error::OddCrop { layer, from, to }) => {
                assert_eq!(layer, "dec0_skip");
                assert_eq!((from, to), (69, 64));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rectangular_inputs_plan_each_axis() {
        let plan = infer_shapes(&ModelConfig::tiny(), 70, 102).unwrap();
        assert_eq!((plan.output().h, plan.output().w), (60, 92));
    }

    #[test]
    fn loss_crop_must_fit() {
        let c = ModelConfig::tiny().with_patch(40);
        let plan = infer_shapes(&c, 40, 40).unwrap();
        assert!(plan.check_loss_crops(&c).is_err());
    }

    #[test]
    fn nearest_sizes_are_valid() {
        let c = ModelConfig::tiny();
        let (lo, hi) = nearest_valid_sizes(&c, 71);
        assert!(infer_shapes(&c, lo.unwrap(), lo.unwrap()).is_ok());
        assert!(infer_shapes(&c, hi.unwrap(), hi.unwrap()).is_ok());
    }
}
