use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Architecture family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Separate text and video encoders feeding a joint encoder with both heads.
    #[default]
    Transpotter,
    /// Same stacks, classification head only.
    TranspotterNoLoc,
    /// Video encoder, text decoder with `[CLS]` on the text side; no localization.
    EncVidDecText,
    /// Text encoder, video decoder with `[CLS]` on the video side.
    EncTextDecVid,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Transpotter,
        Variant::TranspotterNoLoc,
        Variant::EncVidDecText,
        Variant::EncTextDecVid,
    ];

    pub fn localizes(self) -> bool {
        matches!(self, Variant::Transpotter | Variant::EncTextDecVid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Transpotter => "transpotter",
            Variant::TranspotterNoLoc => "transpotter_no_loc",
            Variant::EncVidDecText => "enc_vid_dec_text",
            Variant::EncTextDecVid => "enc_text_dec_vid",
        }
    }

    fn has_text_encoder(self) -> bool {
        !matches!(self, Variant::EncVidDecText)
    }

    fn has_video_encoder(self) -> bool {
        !matches!(self, Variant::EncTextDecVid)
    }

    pub(crate) fn is_decoder(self) -> bool {
        matches!(self, Variant::EncVidDecText | Variant::EncTextDecVid)
    }

    pub(crate) fn stacks(self) -> (bool, bool) {
        (self.has_text_encoder(), self.has_video_encoder())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Localization output kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocHead {
    /// Independent per-frame sigmoid probabilities.
    #[default]
    FrameSigmoid,
    /// Start and end distributions over frames.
    SpanSoftmax,
}

impl FromStr for LocHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_sigmoid" => Ok(LocHead::FrameSigmoid),
            "span_softmax" => Ok(LocHead::SpanSoftmax),
            _ => Err(Error::Config(format!("unknown loc_head {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub video_layers: usize,
    pub joint_layers: usize,
    /// Width of the incoming per-frame features.
    pub input_dim: usize,
    /// Phoneme identifiers including PAD.
    pub vocab_size: usize,
    pub max_frames: usize,
    pub max_phonemes: usize,
    pub variant: Variant,
    pub loc_head: LocHead,
    pub modality_embeddings: bool,
    pub ffn_mult: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            text_layers: 3,
            video_layers: 6,
            joint_layers: 6,
            input_dim: 512,
            vocab_size: 40,
            max_frames: 160,
            max_phonemes: 40,
            variant: Variant::Transpotter,
            loc_head: LocHead::FrameSigmoid,
            modality_embeddings: false,
            ffn_mult: 4,
            activation: Activation::Relu,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even for sinusoidal encodings".into());
        }
        if self.text_layers == 0 || self.video_layers == 0 || self.joint_layers == 0 {
            return bad("every stack needs at least one layer".into());
        }
        if self.input_dim == 0 || self.vocab_size < 2 || self.ffn_mult == 0 {
            return bad("input_dim, ffn_mult must be positive and vocab_size >= 2".into());
        }
        if self.max_frames == 0 || self.max_phonemes == 0 {
            return bad("length limits must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if self.loc_head == LocHead::SpanSoftmax && !self.variant.localizes() {
            return bad(format!(
                "variant {} has no localization output for loc_head span_softmax",
                self.variant
            ));
        }
        if self.modality_embeddings && self.variant.is_decoder() {
            return bad(format!(
                "modality_embeddings apply to the joint encoder, not {}",
                self.variant
            ));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}
