use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolutional-recurrent encoder shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrnnConfig {
    /// Output channels of each convolution; max pooling follows the first.
    pub conv_channels: Vec<usize>,
    pub kernel_time: usize,
    pub kernel_freq: usize,
    pub linear_units: usize,
    pub lstm_cells: usize,
    pub leaky_slope: f64,
    pub input_channels: usize,
    pub frames: usize,
    pub mel_bands: usize,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        CrnnConfig {
            conv_channels: vec![128, 256, 256, 256, 256, 256],
            kernel_time: 5,
            kernel_freq: 3,
            linear_units: 768,
            lstm_cells: 128,
            leaky_slope: 0.01,
            input_channels: 3,
            frames: 300,
            mel_bands: 40,
        }
    }
}

impl CrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid("at least one convolution with nonzero channels is required"));
        }
        if self.kernel_time % 2 == 0 || self.kernel_freq % 2 == 0 {
            return Err(Error::invalid("kernel extents must be odd for same padding"));
        }
        if self.frames < 2 || self.mel_bands < 2 {
            return Err(Error::invalid("input must be at least 2x2 for pooling"));
        }
        if self.linear_units == 0 || self.lstm_cells == 0 || self.input_channels == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.frames, self.mel_bands]
    }

    /// Frames after the 2x2 pool.
    pub fn pooled_frames(&self) -> usize {
        self.frames / 2
    }

    pub fn pooled_bands(&self) -> usize {
        self.mel_bands / 2
    }

    /// Width of each frame entering the linear layer.
    pub fn flattened_width(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.pooled_bands()
    }

    /// Dimension of the bidirectional encoder output.
    pub fn encoder_dim(&self) -> usize {
        2 * self.lstm_cells
    }
}

/// Which pooling layer sits between the encoder and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Softmax-weighted pooling with a single learned scoring vector.
    SelfAttention,
    /// Queries from this tower attend over keys/values from this tower and a
    /// frozen speaker tower.
    SpeakerAttention,
}

/// Shape of one classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub crnn: CrnnConfig,
    pub attention: AttentionKind,
    pub embedding: usize,
    pub classes: usize,
}

pub const SPEAKER_EMBEDDING: usize = 64;
pub const EMOTION_EMBEDDING: usize = 128;
pub const EMOTION_CLASSES: usize = 4;

impl ClassifierSpec {
    pub fn speaker(crnn: CrnnConfig, speakers: usize) -> Self {
        ClassifierSpec {
            crnn,
            attention: AttentionKind::SelfAttention,
            embedding: SPEAKER_EMBEDDING,
            classes: speakers,
        }
    }

    pub fn emotion(crnn: CrnnConfig, attention: AttentionKind) -> Self {
        ClassifierSpec {
            crnn,
            attention,
            embedding: EMOTION_EMBEDDING,
            classes: EMOTION_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.crnn.validate()?;
        if self.embedding == 0 || self.classes < 2 {
            return Err(Error::invalid("embedding must be positive and there must be at least 2 classes"));
        }
        Ok(())
    }
}
