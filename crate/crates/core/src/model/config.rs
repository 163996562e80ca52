use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};

/// Fusion wiring. `Full` is the bottlenecked model; the rest are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// One joint generator over concatenated audio/video features, no tokens.
    #[serde(rename = "no_bottleneck")]
    NoBottleneck,
    /// Tokens never cross modalities.
    #[serde(rename = "no_c")]
    NoC,
    /// No audio token; both branches read the video token.
    #[serde(rename = "no_cA")]
    NoCA,
    /// No video token; both branches read the audio token.
    #[serde(rename = "no_cV")]
    NoCV,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoBottleneck, Variant::NoC, Variant::NoCA, Variant::NoCV];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBottleneck => "no_bottleneck",
            Variant::NoC => "no_c",
            Variant::NoCA => "no_cA",
            Variant::NoCV => "no_cV",
        }
    }

    pub fn has_audio_token(self) -> bool {
        matches!(self, Variant::Full | Variant::NoC | Variant::NoCV)
    }

    pub fn has_video_token(self) -> bool {
        matches!(self, Variant::Full | Variant::NoC | Variant::NoCA)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Config(vec![format!(
                "unknown variant {s:?} (expected one of full, no_bottleneck, no_c, no_cA, no_cV)"
            )])
        })
    }
}

/// Architecture hyperparameters. Serialized keys follow the usual symbols:
/// `M, T, K_A, S_A, C_A, F_A, C_V, F_V, C_H, R, D, d_v, variant`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// M
    pub speakers: usize,
    /// T, waveform length in samples
    pub samples: usize,
    /// K_A
    pub enc_kernel: usize,
    /// S_A
    pub enc_stride: usize,
    /// C_A
    pub audio_channels: usize,
    /// C_V
    pub video_channels: usize,
    /// F_V, raw cue frames before interpolation
    pub video_frames: usize,
    /// C_H, shared by both modality tokens
    pub token_channels: usize,
    /// R
    pub iterations: usize,
    /// D, multi-scale depth
    pub depth: usize,
    /// d_v, cue channels per speaker
    pub cue_dims: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            speakers: 2,
            samples: 16000,
            enc_kernel: 32,
            enc_stride: 16,
            audio_channels: 64,
            video_channels: 32,
            video_frames: 50,
            token_channels: 16,
            iterations: 4,
            depth: 3,
            cue_dims: 4,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// F_A = floor((T − K_A) / S_A) + 1.
    pub fn audio_frames(&self) -> usize {
        if self.samples < self.enc_kernel || self.enc_stride == 0 {
            return 0;
        }
        (self.samples - self.enc_kernel) / self.enc_stride + 1
    }

    pub fn with_iterations(mut self, r: usize) -> Self {
        self.iterations = r;
        self
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("M", self.speakers),
            ("T", self.samples),
            ("K_A", self.enc_kernel),
            ("S_A", self.enc_stride),
            ("C_A", self.audio_channels),
            ("C_V", self.video_channels),
            ("F_V", self.video_frames),
            ("R", self.iterations),
            ("d_v", self.cue_dims),
        ];
        for (k, val) in positive {
            if val == 0 {
                v.push(format!("{k} must be at least 1"));
            }
        }
        if self.variant != Variant::NoBottleneck && self.token_channels == 0 {
            v.push("C_H must be at least 1".into());
        }
        if self.samples < self.enc_kernel {
            v.push(format!("T = {} is shorter than K_A = {}", self.samples, self.enc_kernel));
        }
        if self.depth >= 32 || self.audio_frames() < (1usize << self.depth.min(31)) {
            v.push(format!("F_A = {} must be at least 2^D = 2^{}", self.audio_frames(), self.depth));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("M", self.speakers.to_string()),
            ("T", self.samples.to_string()),
            ("K_A", self.enc_kernel.to_string()),
            ("S_A", self.enc_stride.to_string()),
            ("C_A", self.audio_channels.to_string()),
            ("F_A", self.audio_frames().to_string()),
            ("C_V", self.video_channels.to_string()),
            ("F_V", self.video_frames.to_string()),
            ("C_H", self.token_channels.to_string()),
            ("R", self.iterations.to_string()),
            ("D", self.depth.to_string()),
            ("d_v", self.cue_dims.to_string()),
            ("variant", self.variant.to_string()),
        ])
    }

    /// Reads model keys from `map`; absent keys keep their defaults. A stated
    /// `F_A` must agree with the one derived from `T`, `K_A`, `S_A`.
    pub fn from_kv(map: &mut KvMap) -> Result<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            speakers: map.get_or("M", d.speakers)?,
            samples: map.get_or("T", d.samples)?,
            enc_kernel: map.get_or("K_A", d.enc_kernel)?,
            enc_stride: map.get_or("S_A", d.enc_stride)?,
            audio_channels: map.get_or("C_A", d.audio_channels)?,
            video_channels: map.get_or("C_V", d.video_channels)?,
            video_frames: map.get_or("F_V", d.video_frames)?,
            token_channels: map.get_or("C_H", d.token_channels)?,
            iterations: map.get_or("R", d.iterations)?,
            depth: map.get_or("D", d.depth)?,
            cue_dims: map.get_or("d_v", d.cue_dims)?,
            variant: map.get_or("variant", d.variant)?,
        };
        if let Some(fa) = map.get::<usize>("F_A")? {
            if fa != cfg.audio_frames() {
                return Err(Error::Config(vec![format!(
                    "F_A = {fa} disagrees with floor((T − K_A)/S_A) + 1 = {}",
                    cfg.audio_frames()
                )]));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let cfg = Self::from_kv(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }
}
