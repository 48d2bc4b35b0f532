//! The SDE-DET detector: spec, weights, forward passes, decoding and Grad-CAM.

mod conformance;
mod gradcam;
mod head;
mod model;
mod spec;
mod weights;

pub use conformance::{check_table1, RowCheck};
pub use gradcam::{cam_from, gradcam};
pub use head::{decode, detect, forward_logits, head_decode, head_forward, nms, DetectConfig, Detection, HeadOutput};
pub use model::{
    backbone_forward, neck_forward, param_count, trace_shapes, HeadLevel, Hook, Layer, LevelVars, Model,
    NamedLayer, Neck, NECK_OUTPUTS,
};
pub use spec::{HeadSpec, Hwc, LayerKind, LayerSpec, NeckSpec, NetworkSpec, TableRow, TABLE1};
pub use weights::{build_model, load_weights, save_weights, WeightStore, MAGIC, VERSION};
