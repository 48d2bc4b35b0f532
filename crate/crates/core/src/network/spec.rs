//! Declarative description of the detector; the default backbone mirrors the
//! reference layer table.

use crate::error::config_err;
use crate::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

/// A feature-map shape written the way the reference table does: `(H, W, C)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hwc(pub usize, pub usize, pub usize);

impl Hwc {
    /// From a `[C,H,W]` tensor shape.
    pub fn from_chw(shape: &[usize]) -> Option<Self> {
        match shape {
            [c, h, w] => Some(Hwc(*h, *w, *c)),
            _ => None,
        }
    }

    pub fn channels(&self) -> usize {
        self.2
    }
}

impl fmt::Display for Hwc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0, self.1, self.2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    ConvModule { stride: usize, kernel: usize },
    StarBlock,
    C2f { depth: usize, shortcut: bool },
    Sppf,
    DeformableAttention { heads: usize },
    /// Marks the previous layer's output as a pyramid feature (1-based level).
    Feat { level: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub input: Option<Hwc>,
    pub output: Hwc,
    /// False for layers that are not rows of the reference table.
    pub table_row: bool,
}

impl LayerSpec {
    /// Operation name as printed in the reference table.
    pub fn label(&self) -> String {
        match &self.kind {
            LayerKind::ConvModule { .. } => "ConvModule".into(),
            LayerKind::StarBlock => "Star Block".into(),
            LayerKind::C2f { .. } => "CSPLayer_2Conv".into(),
            LayerKind::Sppf => "SPPF".into(),
            LayerKind::DeformableAttention { .. } => "Deformable Attention".into(),
            LayerKind::Feat { level } => format!("Feat{level}"),
        }
    }

    /// `(step, kernel)` columns of the table, where the table fills them in.
    pub fn step_kernel(&self) -> (Option<usize>, Option<usize>) {
        match self.kind {
            LayerKind::ConvModule { stride, kernel } => (Some(stride), Some(kernel)),
            LayerKind::C2f { .. } => (Some(1), Some(1)),
            _ => (None, None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeckSpec {
    pub ema_groups: usize,
    pub c2f_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Width of both 3×3 stacks in each branch.
    pub hidden: usize,
    pub strides: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Hwc,
    pub backbone: Vec<LayerSpec>,
    pub neck: NeckSpec,
    pub head: HeadSpec,
    pub classes: Vec<String>,
}

/// One row of the reference table: operation, input, output, step, kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub op: &'static str,
    pub input: Option<Hwc>,
    pub output: Hwc,
    pub step: Option<usize>,
    pub kernel: Option<usize>,
}

const fn row(op: &'static str, input: Option<Hwc>, output: Hwc, step: Option<usize>, kernel: Option<usize>) -> TableRow {
    TableRow { op, input, output, step, kernel }
}

/// The reference backbone table, row for row.
pub const TABLE1: [TableRow; 13] = [
    row("ConvModule", Some(Hwc(640, 640, 3)), Hwc(320, 320, 8), Some(2), Some(3)),
    row("Star Block", Some(Hwc(320, 320, 8)), Hwc(320, 320, 8), None, None),
    row("ConvModule", Some(Hwc(320, 320, 32)), Hwc(160, 160, 32), Some(2), Some(3)),
    row("ConvModule", Some(Hwc(160, 160, 32)), Hwc(80, 80, 64), Some(2), Some(3)),
    row("CSPLayer_2Conv", Some(Hwc(80, 80, 64)), Hwc(80, 80, 64), Some(1), Some(1)),
    row("Feat1", None, Hwc(80, 80, 64), None, None),
    row("ConvModule", Some(Hwc(80, 80, 64)), Hwc(40, 40, 128), Some(2), Some(3)),
    row("Feat2", None, Hwc(40, 40, 128), None, None),
    row("ConvModule", Some(Hwc(40, 40, 128)), Hwc(20, 20, 256), Some(2), Some(3)),
    row("CSPLayer_2Conv", Some(Hwc(20, 20, 256)), Hwc(20, 20, 256), Some(1), Some(1)),
    row("SPPF", Some(Hwc(20, 20, 256)), Hwc(20, 20, 256), None, None),
    row("Deformable Attention", Some(Hwc(20, 20, 256)), Hwc(20, 20, 256), None, None),
    row("Feat3", None, Hwc(20, 20, 256), None, None),
];

fn layer(name: &str, kind: LayerKind, input: Option<Hwc>, output: Hwc) -> LayerSpec {
    LayerSpec { name: name.into(), kind, input, output, table_row: true }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        use LayerKind::*;
        let conv = |stride, kernel| ConvModule { stride, kernel };
        let c2f = C2f { depth: 1, shortcut: true };
        let backbone = vec![
            layer("stem", conv(2, 3), Some(Hwc(640, 640, 3)), Hwc(320, 320, 8)),
            layer("star", StarBlock, Some(Hwc(320, 320, 8)), Hwc(320, 320, 8)),
            LayerSpec { table_row: false, ..layer("bridge", conv(1, 1), Some(Hwc(320, 320, 8)), Hwc(320, 320, 32)) },
            layer("down1", conv(2, 3), Some(Hwc(320, 320, 32)), Hwc(160, 160, 32)),
            layer("down2", conv(2, 3), Some(Hwc(160, 160, 32)), Hwc(80, 80, 64)),
            layer("c2f1", c2f.clone(), Some(Hwc(80, 80, 64)), Hwc(80, 80, 64)),
            layer("feat1", Feat { level: 1 }, None, Hwc(80, 80, 64)),
            layer("down3", conv(2, 3), Some(Hwc(80, 80, 64)), Hwc(40, 40, 128)),
            layer("feat2", Feat { level: 2 }, None, Hwc(40, 40, 128)),
            layer("down4", conv(2, 3), Some(Hwc(40, 40, 128)), Hwc(20, 20, 256)),
            layer("c2f2", c2f, Some(Hwc(20, 20, 256)), Hwc(20, 20, 256)),
            layer("sppf", Sppf, Some(Hwc(20, 20, 256)), Hwc(20, 20, 256)),
            layer("deform", DeformableAttention { heads: 8 }, Some(Hwc(20, 20, 256)), Hwc(20, 20, 256)),
            layer("feat3", Feat { level: 3 }, None, Hwc(20, 20, 256)),
        ];
        Self {
            input: Hwc(640, 640, 3),
            backbone,
            neck: NeckSpec { ema_groups: 8, c2f_depth: 1 },
            head: HeadSpec { hidden: 64, strides: vec![8, 16, 32] },
            classes: vec!["pomelo".into()],
        }
    }
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| config_err!("network spec: {e}"))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// First eight bytes of SHA-256 over the compact JSON form, little-endian.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Layers that are rows of the reference table, in order.
    pub fn table_rows(&self) -> impl Iterator<Item = &LayerSpec> {
        self.backbone.iter().filter(|l| l.table_row)
    }

    /// Index into `backbone` of the layer whose output is feature `level`.
    pub fn feat_source(&self, level: usize) -> Option<usize> {
        let at = self.backbone.iter().position(|l| l.kind == LayerKind::Feat { level })?;
        self.backbone[..at].iter().rposition(|l| !matches!(l.kind, LayerKind::Feat { .. }))
    }

    /// Declared channel counts of Feat1..Feat3.
    pub fn feat_channels(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (i, c) in out.iter_mut().enumerate() {
            let l = self
                .backbone
                .iter()
                .find(|l| l.kind == LayerKind::Feat { level: i + 1 })
                .ok_or_else(|| config_err!("spec has no Feat{} marker", i + 1))?;
            *c = l.output.channels();
        }
        Ok(out)
    }

    /// Declared shapes chain, every feature level is present once, and the
    /// neck and head settings fit the channel counts.
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input;
        for l in &self.backbone {
            if let Some(input) = l.input {
                if input != prev {
                    return Err(config_err!("layer '{}' declares input {input} but receives {prev}", l.name));
                }
            }
            match l.kind {
                LayerKind::Feat { .. } | LayerKind::StarBlock | LayerKind::DeformableAttention { .. } if l.output != prev => {
                    return Err(config_err!("layer '{}' must keep shape {prev}, declares {}", l.name, l.output));
                }
                LayerKind::DeformableAttention { heads } if heads == 0 || !prev.channels().is_multiple_of(heads) => {
                    return Err(config_err!("layer '{}': {heads} heads do not divide {} channels", l.name, prev.channels()));
                }
                LayerKind::ConvModule { stride, kernel } if stride == 0 || kernel == 0 => {
                    return Err(config_err!("layer '{}': stride and kernel must be positive", l.name));
                }
                _ => {}
            }
            prev = l.output;
        }
        for level in 1..=3 {
            let n = self.backbone.iter().filter(|l| l.kind == LayerKind::Feat { level }).count();
            if n != 1 || self.feat_source(level).is_none() {
                return Err(config_err!("spec needs exactly one Feat{level} marker after a layer"));
            }
        }
        let feats = self.feat_channels()?;
        let g = self.neck.ema_groups;
        if let Some(c) = feats.iter().find(|&&c| g == 0 || c % g != 0) {
            return Err(config_err!("EMA group count {g} does not divide neck width {c}"));
        }
        if self.head.strides.len() != 3 {
            return Err(config_err!("head needs three strides, got {:?}", self.head.strides));
        }
        if self.classes.is_empty() {
            return Err(config_err!("spec lists no classes"));
        }
        Ok(())
    }
}
