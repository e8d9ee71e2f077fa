use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub conv_count: usize,
    pub channels: usize,
}

/// Declarative description of the encoder/decoder network.
///
/// Resolution level `l` has a pixel size of `2^l` km. Each entry of `levels`
/// is an encoder stage at level `l` followed by a stride-2 downsampling conv;
/// `bottleneck` runs at level `levels.len()`. Decoding walks back up one level
/// at a time, and output heads are attached from `coarsest_head_level` down to
/// the final 1 km output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_frames: usize,
    pub output_frames: usize,
    pub kernel: usize,
    pub levels: Vec<EncoderStage>,
    pub bottleneck: EncoderStage,
    pub down_kernel: usize,
    pub down_stride: usize,
    /// Decoder conv channels, coarse to fine; one per encoder level.
    pub decoder_channels: Vec<usize>,
    /// Convs applied at 1 km after the last decode; the last one is linear and
    /// must produce `output_frames` channels.
    pub final_channels: Vec<usize>,
    pub head_kernel: usize,
    pub coarsest_head_level: usize,
    pub loss_crop_km: usize,
    /// Training patch size the loss crops are validated against.
    pub patch: usize,
}

impl ModelConfig {
    /// Four-level network used for full-size 256 px patches (256 -> 156 at 1 km).
    pub fn canonical() -> Self {
        ModelConfig {
            input_frames: 7,
            output_frames: 6,
            kernel: 3,
            levels: vec![
                EncoderStage { conv_count: 2, channels: 32 },
                EncoderStage { conv_count: 1, channels: 64 },
                EncoderStage { conv_count: 1, channels: 128 },
                EncoderStage { conv_count: 1, channels: 192 },
            ],
            bottleneck: EncoderStage { conv_count: 1, channels: 256 },
            down_kernel: 2,
            down_stride: 2,
            decoder_channels: vec![128, 96, 64, 48],
            final_channels: vec![32, 32, 6],
            head_kernel: 1,
            coarsest_head_level: 3,
            loss_crop_km: 48,
            patch: 256,
        }
    }

    /// Two-resolution network for tests and desk-scale training (70 -> 60 at 1 km).
    pub fn tiny() -> Self {
        ModelConfig {
            input_frames: 7,
            output_frames: 6,
            kernel: 3,
            levels: vec![EncoderStage { conv_count: 1, channels: 8 }],
            bottleneck: EncoderStage { conv_count: 1, channels: 16 },
            down_kernel: 2,
            down_stride: 2,
            decoder_channels: vec![8],
            final_channels: vec![6],
            head_kernel: 1,
            coarsest_head_level: 1,
            loss_crop_km: 48,
            patch: 70,
        }
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch = patch;
        self
    }

    /// Level index of the bottleneck, i.e. the number of downsamplings.
    pub fn bottleneck_level(&self) -> usize {
        self.levels.len()
    }

    /// Input offsets must be multiples of this for outputs to shift in lockstep.
    pub fn alignment(&self) -> usize {
        self.down_stride.pow(self.levels.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.levels.is_empty() {
            return bad("need at least two resolution levels");
        }
        if self.decoder_channels.len() != self.levels.len() {
            return bad("decoder_channels must have one entry per encoder level");
        }
        if self.final_channels.last() != Some(&self.output_frames) {
            return bad("last final conv must produce output_frames channels");
        }
        if self.coarsest_head_level > self.bottleneck_level() {
            return bad("coarsest_head_level beyond the bottleneck");
        }
        if self.kernel == 0 || self.down_kernel == 0 || self.down_stride < 2 || self.head_kernel == 0 {
            return bad("kernels must be >= 1 and down_stride >= 2");
        }
        if self.input_frames == 0 || self.output_frames == 0 {
            return bad("frame counts must be >= 1");
        }
        let widths = self
            .levels
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .map(|s| s.channels)
            .chain(self.decoder_channels.iter().copied())
            .chain(self.final_channels.iter().copied());
        if widths.into_iter().any(|c| c == 0) {
            return bad("channel counts must be >= 1");
        }
        if self.bottleneck.conv_count == 0 {
            return bad("bottleneck needs at least one conv");
        }
        Ok(())
    }

    /// Stable textual form used for hashing.
    pub fn canonical_string(&self) -> String {
        let stages: Vec<String> =
            self.levels.iter().map(|s| format!("{}x{}", s.conv_count, s.channels)).collect();
        format!(
            "nowcast-model/v1;in={};out={};k={};levels=[{}];bottleneck={}x{};down={}s{};dec={:?};final={:?};head_k={};coarsest={};crop={};patch={}",
            self.input_frames,
            self.output_frames,
            self.kernel,
            stages.join(","),
            self.bottleneck.conv_count,
            self.bottleneck.channels,
            self.down_kernel,
            self.down_stride,
            self.decoder_channels,
            self.final_channels,
            self.head_kernel,
            self.coarsest_head_level,
            self.loss_crop_km,
            self.patch,
        )
    }

    pub fn hash(&self) -> u64 {
        hash_str(&self.canonical_string())
    }
}

/// First eight bytes (little-endian) of the SHA-256 digest.
pub fn hash_str(s: &str) -> u64 {
    hash_bytes(s.as_bytes())
}

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
