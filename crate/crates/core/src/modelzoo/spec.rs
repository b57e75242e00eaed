use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Stacked conv → BN → ReLU → max-pool stages (CNN).
    Standard,
    /// Residual blocks per stage (RCNN).
    Residual,
    /// One standard branch per kernel size (MCNN).
    MultiscaleStandard,
    /// One residual branch per kernel size (MRCNN).
    MultiscaleResidual,
}

impl ExtractorKind {
    pub fn is_multiscale(self) -> bool {
        matches!(self, ExtractorKind::MultiscaleStandard | ExtractorKind::MultiscaleResidual)
    }

    pub fn is_residual(self) -> bool {
        matches!(self, ExtractorKind::Residual | ExtractorKind::MultiscaleResidual)
    }

    /// Short architecture name as used in reports (`CNN`, `RCNN`, ...).
    pub fn short_name(self) -> &'static str {
        match self {
            ExtractorKind::Standard => "CNN",
            ExtractorKind::Residual => "RCNN",
            ExtractorKind::MultiscaleStandard => "MCNN",
            ExtractorKind::MultiscaleResidual => "MRCNN",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Single dense layer with a softmax over the known classes.
    Softmax,
    /// One independent sigmoid branch per known class.
    Ovrn,
}

impl HeadKind {
    pub fn short_name(self) -> &'static str {
        match self {
            HeadKind::Softmax => "Softmax",
            HeadKind::Ovrn => "OVRN",
        }
    }
}

/// Architecture description: feature extractor plus classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub extractor: ExtractorKind,
    /// Square kernel sizes, one per branch.
    pub kernel_sizes: Vec<usize>,
    /// Output channels of each stage; every stage ends in a 2x2 max-pool.
    pub channels: Vec<usize>,
    /// Residual blocks per stage (ignored by standard extractors).
    pub depth: usize,
    pub head: HeadKind,
    /// Hidden units of each one-vs-rest branch.
    pub ovrn_hidden: usize,
    pub classes: usize,
    /// Input window: `window` time steps by `variables` process variables.
    pub window: usize,
    pub variables: usize,
}

impl ModelSpec {
    /// Desk-scale defaults: two stages of 8 and 16 channels, one residual
    /// block per stage, 32 hidden units per one-vs-rest branch.
    pub fn new(extractor: ExtractorKind, head: HeadKind, classes: usize, window: usize, variables: usize) -> Self {
        let kernel_sizes = if extractor.is_multiscale() { vec![3, 5, 7] } else { vec![5] };
        ModelSpec {
            extractor,
            kernel_sizes,
            channels: vec![8, 16],
            depth: 1,
            head,
            ovrn_hidden: 32,
            classes,
            window,
            variables,
        }
    }

    /// Report name such as `MRCNN-OVRN`.
    pub fn name(&self) -> String {
        format!("{}-{}", self.extractor.short_name(), self.head.short_name())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if self.extractor.is_multiscale() {
            if self.kernel_sizes.len() < 2 {
                return bad(format!("{:?} needs at least 2 kernel sizes", self.extractor));
            }
        } else if self.kernel_sizes.len() != 1 {
            return bad(format!(
                "{:?} takes exactly one kernel size, got {:?}",
                self.extractor, self.kernel_sizes
            ));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return bad(format!("kernel size {k} must be odd and positive"));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel widths must be non-empty and positive: {:?}", self.channels));
        }
        if self.extractor.is_residual() && self.depth == 0 {
            return bad("residual extractors need depth >= 1".into());
        }
        if self.head == HeadKind::Ovrn && self.ovrn_hidden == 0 {
            return bad("ovrn_hidden must be positive".into());
        }
        if self.window == 0 || self.variables == 0 {
            return bad("input extents must be positive".into());
        }
        // Same padding keeps extents, so a kernel only has to fit the
        // padded input: k <= extent + k - 1 holds for any extent >= 1.
        Ok(())
    }

    /// Spatial extents after every stage's 2x2 pool (floor semantics; an
    /// axis already of extent 1 is left unpooled).
    pub fn pooled_extents(&self) -> (usize, usize) {
        self.channels.iter().fold((self.window, self.variables), |(h, w), _| {
            (pool_extent(h), pool_extent(w))
        })
    }

    /// Width of the flattened feature vector fed to the head.
    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.pooled_extents();
        self.kernel_sizes.len() * self.channels.last().copied().unwrap_or(0) * h * w
    }
}

pub(crate) fn pool_window(extent: usize) -> usize {
    extent.min(2)
}

pub(crate) fn pool_extent(extent: usize) -> usize {
    let p = pool_window(extent);
    (extent - p) / p + 1
}
