use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(alias = "seg")]
    Segmentation,
    #[serde(alias = "loc")]
    Localization,
}

impl Task {
    pub fn out_channels(self) -> usize {
        match self {
            Task::Segmentation => 1,
            Task::Localization => 2,
        }
    }

    pub fn byte(self) -> u8 {
        match self {
            Task::Segmentation => 0,
            Task::Localization => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Task::Segmentation),
            1 => Some(Task::Localization),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(Task::Segmentation),
            "loc" | "localization" => Ok(Task::Localization),
            other => Err(Error::config(format!("unknown task `{other}` (expected seg or loc)"))),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Localization => "loc",
        }
    }
}

/// One MobileNetV2 bottleneck group: `n` inverted residuals of expansion `t`
/// producing `c` channels, the first with stride `s`. `tap` marks the group
/// whose output feeds a decoder skip fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub t: usize,
    pub c: usize,
    pub n: usize,
    pub s: usize,
    pub tap: bool,
}

impl EncoderStage {
    pub const fn new(t: usize, c: usize, n: usize, s: usize, tap: bool) -> Self {
        Self { t, c, n, s, tap }
    }
}

pub const STEM_CHANNELS: usize = 32;
pub const DEFAULT_INPUT_SIZE: usize = 224;
pub const DECODER_EXPANSION: usize = 6;

/// Standard MobileNetV2 bottleneck sequence without the final 1×1 conv.
pub const MOBILENET_V2_STAGES: [EncoderStage; 7] = [
    EncoderStage::new(1, 16, 1, 1, true),
    EncoderStage::new(6, 24, 2, 2, true),
    EncoderStage::new(6, 32, 3, 2, true),
    EncoderStage::new(6, 64, 4, 2, false),
    EncoderStage::new(6, 96, 3, 1, true),
    EncoderStage::new(6, 160, 3, 2, false),
    EncoderStage::new(6, 320, 1, 1, false),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Square input side; the input tensor is `(3, input_size, input_size)`.
    pub input_size: usize,
    pub stem_channels: usize,
    pub encoder_stages: Vec<EncoderStage>,
    /// Transposed convolutions interleaved with inverted residuals, ending
    /// with the head transposed convolution.
    pub decoder_stages: Vec<LayerSpec>,
}

/// Stage-by-stage `(channels, height, width)` trace of a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub stem: (usize, usize, usize),
    /// Output of every encoder group.
    pub encoder: Vec<(usize, usize, usize)>,
    /// Skip tensors X1, X2, ... in encoder order.
    pub taps: Vec<(usize, usize, usize)>,
    pub decoder: Vec<(usize, usize, usize)>,
    pub output: (usize, usize, usize),
}

impl ModelConfig {
    pub fn new(task: Task) -> Self {
        Self::with_input_size(task, DEFAULT_INPUT_SIZE)
    }

    pub fn segmentation() -> Self {
        Self::new(Task::Segmentation)
    }

    pub fn localization() -> Self {
        Self::new(Task::Localization)
    }

    pub fn with_input_size(task: Task, input_size: usize) -> Self {
        let encoder_stages = MOBILENET_V2_STAGES.to_vec();
        let decoder_stages = default_decoder(&encoder_stages, task.out_channels());
        Self {
            task,
            input_size,
            stem_channels: STEM_CHANNELS,
            encoder_stages,
            decoder_stages,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.task.out_channels()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [3, self.input_size, self.input_size]
    }

    /// Composes every stage shape and reports the first stage that fails.
    pub fn validate(&self) -> Result<ShapePlan> {
        let fail = |stage: String, why: String| Error::config(format!("stage {stage}: {why}"));
        if self.input_size == 0 {
            return Err(fail("input".into(), "input size must be positive".into()));
        }
        let stem = LayerSpec::standard_conv(3, self.stem_channels, 3, 2);
        let stem_shape = stem
            .output_shape(self.input_size, self.input_size)
            .map_err(|e| fail("encoder.stem".into(), e.to_string()))?;

        let mut shape = stem_shape;
        let mut encoder = Vec::new();
        let mut taps = Vec::new();
        for (i, st) in self.encoder_stages.iter().enumerate() {
            for j in 0..st.n {
                let s = if j == 0 { st.s } else { 1 };
                let spec = LayerSpec::inverted_residual(shape.0, st.c, s, st.t);
                shape = spec
                    .validate()
                    .and_then(|_| spec.output_shape(shape.1, shape.2))
                    .map_err(|e| fail(format!("encoder group {i} block {j}"), e.to_string()))?;
            }
            encoder.push(shape);
            if st.tap {
                taps.push(shape);
            }
        }

        let n_up = self.decoder_stages.iter().filter(|s| s.kind == LayerKind::TransposedConv).count();
        let n_ir = self.decoder_stages.iter().filter(|s| s.kind == LayerKind::InvertedResidual).count();
        if n_up != 5 || n_ir != 4 || self.decoder_stages.len() != 9 {
            return Err(fail(
                "decoder".into(),
                format!(
                    "expected 5 transposed convs and 4 inverted residuals, found {n_up} and {n_ir} in {} stages",
                    self.decoder_stages.len()
                ),
            ));
        }
        if taps.len() != n_ir {
            return Err(fail(
                "decoder".into(),
                format!("{} skip taps cannot pair with {n_ir} fusion points", taps.len()),
            ));
        }

        let mut decoder = Vec::new();
        let mut skips = taps.iter().rev();
        let mut up_idx = 0;
        let mut ir_idx = 0;
        for (i, spec) in self.decoder_stages.iter().enumerate() {
            let name = match spec.kind {
                LayerKind::TransposedConv => {
                    up_idx += 1;
                    format!("decoder.up{up_idx}")
                }
                LayerKind::InvertedResidual => {
                    ir_idx += 1;
                    format!("decoder.block{ir_idx}")
                }
                other => return Err(fail(format!("decoder {i}"), format!("unsupported layer kind {other:?}"))),
            };
            let expected_kind = if i % 2 == 0 { LayerKind::TransposedConv } else { LayerKind::InvertedResidual };
            if spec.kind != expected_kind {
                return Err(fail(name, "transposed convs and inverted residuals must alternate".into()));
            }
            if spec.kind == LayerKind::InvertedResidual && spec.s != 1 {
                return Err(fail(name, format!("decoder inverted residuals need stride 1, got {}", spec.s)));
            }
            if spec.in_channels != shape.0 {
                return Err(fail(
                    name,
                    format!("expects {} input channels but receives {:?}", spec.in_channels, shape),
                ));
            }
            shape = spec
                .validate()
                .and_then(|_| spec.output_shape(shape.1, shape.2))
                .map_err(|e| fail(name.clone(), e.to_string()))?;
            if spec.kind == LayerKind::TransposedConv && up_idx <= 4 {
                let skip = *skips.next().expect("tap count checked");
                if skip != shape {
                    return Err(fail(
                        name,
                        format!("output {shape:?} cannot be added to encoder skip {skip:?}"),
                    ));
                }
            }
            decoder.push(shape);
        }
        let want = (self.out_channels(), self.input_size, self.input_size);
        if shape != want {
            return Err(fail(
                "decoder.up5".into(),
                format!("output {shape:?} differs from the required {want:?}"),
            ));
        }
        Ok(ShapePlan {
            stem: stem_shape,
            encoder,
            taps,
            decoder,
            output: shape,
        })
    }
}

/// Decoder whose widths follow the skip taps from deepest to shallowest.
pub fn default_decoder(stages: &[EncoderStage], out_channels: usize) -> Vec<LayerSpec> {
    let mut widths: Vec<usize> = stages.iter().filter(|s| s.tap).map(|s| s.c).collect();
    widths.reverse();
    let mut cin = stages.last().map_or(0, |s| s.c);
    let mut out = Vec::new();
    for &w in &widths {
        out.push(LayerSpec::transposed_conv(cin, w));
        out.push(LayerSpec::inverted_residual(w, w, 1, DECODER_EXPANSION));
        cin = w;
    }
    out.push(LayerSpec::transposed_conv(cin, out_channels));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan() {
        let plan = ModelConfig::segmentation().validate().unwrap();
        assert_eq!(plan.stem, (32, 112, 112));
        assert_eq!(
            plan.taps,
            vec![(16, 112, 112), (24, 56, 56), (32, 28, 28), (96, 14, 14)]
        );
        assert_eq!(plan.encoder.last(), Some(&(320, 7, 7)));
        assert_eq!(plan.output, (1, 224, 224));
        assert_eq!(ModelConfig::localization().validate().unwrap().output, (2, 224, 224));
    }

    #[test]
    fn decoder_resolutions_double() {
        let plan = ModelConfig::segmentation().validate().unwrap();
        let ups: Vec<usize> = plan.decoder.iter().step_by(2).map(|s| s.1).collect();
        assert_eq!(ups, vec![14, 28, 56, 112, 224]);
    }

    #[test]
    fn encoder_resolutions_never_increase() {
        let plan = ModelConfig::segmentation().validate().unwrap();
        let mut prev = plan.stem.1;
        for s in plan.encoder {
            assert!(s.1 <= prev);
            prev = s.1;
        }
    }

    #[test]
    fn mismatched_skip_names_the_stage() {
        let mut cfg = ModelConfig::segmentation();
        cfg.decoder_stages[2] = LayerSpec::transposed_conv(96, 24);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("decoder.up2"), "{err}");
    }

    #[test]
    fn odd_input_size_fails_at_the_first_fusion() {
        let err = ModelConfig::with_input_size(Task::Segmentation, 100)
            .validate()
            .unwrap_err()
            .to_string();
        assert!(err.contains("decoder.up1"), "{err}");
    }

    #[test]
    fn wrong_decoder_count() {
        let mut cfg = ModelConfig::segmentation();
        cfg.decoder_stages.pop();
        assert!(cfg.validate().unwrap_err().to_string().contains("5 transposed convs"));
    }
}
