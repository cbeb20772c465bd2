//! Network configuration and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{DsnetError, Result};

/// Optional components. Everything on is the full network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    /// Mask-aware operators in the embedding stream; off treats every cell as observed.
    pub sparse: bool,
    pub thumbnail_stream: bool,
    pub embedding_stream: bool,
    /// Off replaces each multi-scale block by a single 3×3 separable conv.
    pub multi_scale: bool,
    /// Off replaces each bottleneck block by a plain 3×3 sparse conv.
    pub concurrent_bottleneck: bool,
    /// Off keeps the channel bottleneck but runs both inner convs at full resolution.
    pub spatial_bottleneck: bool,
    pub stream_attention: bool,
    pub channel_attention: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            sparse: true,
            thumbnail_stream: true,
            embedding_stream: true,
            multi_scale: true,
            concurrent_bottleneck: true,
            spatial_bottleneck: true,
            stream_attention: true,
            channel_attention: true,
        }
    }
}

impl Components {
    /// The ablation rows: full model first, then one row per removed component
    /// and the attention on/off combinations.
    pub fn ablation_rows() -> Vec<(&'static str, Components)> {
        let full = Components::default();
        vec![
            ("full", full),
            ("no_sparsity", Components { sparse: false, ..full }),
            ("no_embedding_stream", Components { embedding_stream: false, ..full }),
            ("no_thumbnail_stream", Components { thumbnail_stream: false, ..full }),
            ("no_multi_scale", Components { multi_scale: false, ..full }),
            ("no_concurrent_bottleneck", Components { concurrent_bottleneck: false, ..full }),
            ("no_spatial_bottleneck", Components { spatial_bottleneck: false, ..full }),
            (
                "no_stream_no_channel_attention",
                Components {
                    stream_attention: false,
                    channel_attention: false,
                    ..full
                },
            ),
            ("no_stream_attention", Components { stream_attention: false, ..full }),
            ("no_channel_attention", Components { channel_attention: false, ..full }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsnetConfig {
    /// Thumbnail levels; the thumbnail input has `3·levels` channels.
    pub levels: usize,
    pub embedding_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub thumbnail_widths: Vec<usize>,
    pub thumbnail_strides: Vec<usize>,
    pub ms_kernels: Vec<usize>,
    pub embedding_widths: Vec<usize>,
    pub embedding_strides: Vec<usize>,
    pub cb_kernel: usize,
    pub cb_reduction: usize,
    pub se_reduction: usize,
    pub head_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub components: Components,
}

impl Default for DsnetConfig {
    fn default() -> Self {
        DsnetConfig {
            levels: 3,
            embedding_channels: 128,
            stem_channels: 32,
            stem_kernel: 7,
            thumbnail_widths: vec![64, 144, 256, 320],
            thumbnail_strides: vec![1, 2, 2, 1],
            ms_kernels: vec![3, 5, 7],
            embedding_widths: vec![144, 224, 256, 320],
            embedding_strides: vec![2, 1, 2, 1],
            cb_kernel: 5,
            cb_reduction: 4,
            se_reduction: 4,
            head_channels: 640,
            hidden: 160,
            classes: 2,
            components: Components::default(),
        }
    }
}

impl DsnetConfig {
    pub fn thumbnail_channels(&self) -> usize {
        3 * self.levels
    }

    /// Width both streams emit into the aggregation.
    pub fn fused_channels(&self) -> usize {
        if self.components.embedding_stream {
            *self.embedding_widths.last().unwrap_or(&0)
        } else {
            *self.thumbnail_widths.last().unwrap_or(&0)
        }
    }

    /// Downsampling of the embedding grid by the embedding stream.
    pub fn embedding_reduction(&self) -> usize {
        self.embedding_strides.iter().product()
    }

    /// Downsampling of the thumbnail grid by the thumbnail stream.
    pub fn thumbnail_reduction(&self) -> usize {
        2 * self.thumbnail_strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DsnetError::Config(m));
        let c = &self.components;
        if !c.thumbnail_stream && !c.embedding_stream {
            return bad("at least one stream is required".into());
        }
        if self.levels == 0 || self.embedding_channels == 0 || self.classes < 2 {
            return bad("levels, embedding channels and classes must be positive (classes >= 2)".into());
        }
        if self.thumbnail_widths.len() != self.thumbnail_strides.len() || self.thumbnail_widths.is_empty() {
            return bad("thumbnail widths and strides must be non-empty and of equal length".into());
        }
        if self.embedding_widths.len() != self.embedding_strides.len() || self.embedding_widths.is_empty() {
            return bad("embedding widths and strides must be non-empty and of equal length".into());
        }
        if self
            .thumbnail_strides
            .iter()
            .chain(&self.embedding_strides)
            .any(|&s| s != 1 && s != 2)
        {
            return bad("block strides must be 1 or 2".into());
        }
        if self.ms_kernels.is_empty() || self.ms_kernels.iter().chain([&self.cb_kernel, &self.stem_kernel]).any(|k| k % 2 == 0) {
            return bad("kernels must be odd".into());
        }
        if c.thumbnail_stream && c.embedding_stream {
            let (t, e) = (self.thumbnail_widths.last(), self.embedding_widths.last());
            if t != e {
                return bad(format!("stream widths differ: thumbnail {t:?} vs embedding {e:?}"));
            }
            // thumbnail grid is twice the embedding grid
            if self.thumbnail_reduction() != 2 * self.embedding_reduction() {
                return bad("stream strides do not bring both grids to the same extent".into());
            }
        }
        let mut cin = self.embedding_channels;
        for &w in &self.embedding_widths {
            if w < cin {
                return bad(format!("embedding stream narrows {cin} -> {w}; the residual shortcut only widens"));
            }
            if cin / self.cb_reduction == 0 {
                return bad(format!("bottleneck of {cin} channels at ratio {} is empty", self.cb_reduction));
            }
            cin = w;
        }
        if self.se_reduction == 0 || self.fused_channels() / self.se_reduction == 0 {
            return bad("channel attention reduction leaves no hidden units".into());
        }
        Ok(())
    }
}
