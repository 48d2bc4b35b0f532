//! Decoding head logits into boxes, greedy NMS and the end-to-end `detect`.

use super::model::{LevelVars, Model};
use crate::bbox::BBox;
use crate::error::dim_err;
use crate::{Graph, Result, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    /// `class score x_min y_min x_max y_max` with six decimals.
    pub fn to_line(&self) -> String {
        let b = &self.bbox;
        format!("{} {:.6} {:.6} {:.6} {:.6} {:.6}", self.class, self.score, b.x_min, b.y_min, b.x_max, b.y_max)
    }
}

/// Head logits of one level, detached from the graph.
#[derive(Clone, Debug)]
pub struct HeadOutput<T: Scalar> {
    pub stride: usize,
    pub boxes: Tensor<T>,
    pub cls: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectConfig {
    pub conf: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { conf: 0.25, nms_iou: 0.7 }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Per cell: the best class's sigmoid score; distances to the four edges are
/// `softplus(logit)·stride` around the cell centre. Boxes are clipped to
/// `[0, image_size]`. Cells scoring below `conf` are dropped.
pub fn decode<T: Scalar>(levels: &[HeadOutput<T>], image_size: f64, conf: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for lv in levels {
        let (bs, cs) = (lv.boxes.shape(), lv.cls.shape());
        if bs.len() != 3 || bs[0] != 4 || cs.len() != 3 || cs[1..] != bs[1..] {
            return Err(dim_err!("head level: boxes {bs:?} and classes {cs:?} do not pair"));
        }
        let (nc, h, w) = (cs[0], cs[1], cs[2]);
        let hw = h * w;
        let s = lv.stride as f64;
        let (bd, cd) = (lv.boxes.data(), lv.cls.data());
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let (class, logit) = (0..nc)
                    .map(|k| (k, cd[k * hw + cell].as_f64()))
                    .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
                let score = 1.0 / (1.0 + (-logit).exp());
                if score < conf {
                    continue;
                }
                let d = |k: usize| softplus(bd[k * hw + cell].as_f64()) * s;
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let bbox = BBox::new(cx - d(0), cy - d(1), cx + d(2), cy + d(3)).clip(0.0, image_size);
                out.push(Detection { class, score, bbox });
            }
        }
    }
    Ok(out)
}

/// Greedy suppression in descending score order: keep a box, drop every
/// remaining box whose IoU with it exceeds `iou_thresh`. Ties keep input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut alive = vec![true; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if alive[j] && dets[i].bbox.iou(&dets[j].bbox) > iou_thresh {
                alive[j] = false;
            }
        }
    }
    keep
}

fn detach<T: Scalar>(g: &Graph<T>, levels: &[LevelVars]) -> Vec<HeadOutput<T>> {
    levels
        .iter()
        .map(|l| HeadOutput { stride: l.stride, boxes: g.value(l.boxes).clone(), cls: g.value(l.cls).clone() })
        .collect()
}

/// Head logits for a neck pyramid.
pub fn head_forward<T: Scalar>(model: &Model<T>, pyramid: (&Tensor<T>, &Tensor<T>, &Tensor<T>)) -> Result<Vec<HeadOutput<T>>> {
    let mut g = Graph::inference();
    let p = [g.constant(pyramid.0.clone()), g.constant(pyramid.1.clone()), g.constant(pyramid.2.clone())];
    let levels = model.head_forward(&mut g, p)?;
    Ok(detach(&g, &levels))
}

/// Pre-NMS detections of a neck pyramid at confidence `conf`.
pub fn head_decode<T: Scalar>(
    model: &Model<T>,
    pyramid: (&Tensor<T>, &Tensor<T>, &Tensor<T>),
    conf: f64,
) -> Result<Vec<Detection>> {
    decode(&head_forward(model, pyramid)?, model.spec().input.0 as f64, conf)
}

/// Head logits of a full forward pass plus its flop count.
pub fn forward_logits<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<(Vec<HeadOutput<T>>, u64)> {
    let mut g = Graph::inference();
    let x = g.constant(image.clone());
    let levels = model.forward(&mut g, x)?;
    Ok((detach(&g, &levels), g.flops()))
}

/// Backbone, neck, head, confidence filter, NMS.
pub fn detect<T: Scalar>(model: &Model<T>, image: &Tensor<T>, cfg: DetectConfig) -> Result<Vec<Detection>> {
    let (levels, _) = forward_logits(model, image)?;
    let dets = decode(&levels, model.spec().input.0 as f64, cfg.conf)?;
    Ok(nms(&dets, cfg.nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, b: [f64; 4]) -> Detection {
        Detection { class: 0, score, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
    }

    #[test]
    fn nms_examples() {
        let one = vec![det(0.5, [0.0, 0.0, 1.0, 1.0])];
        assert_eq!(nms(&one, 0.5), one);
        let same = vec![det(0.8, [0.0, 0.0, 2.0, 2.0]), det(0.9, [0.0, 0.0, 2.0, 2.0])];
        let kept = nms(&same, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let apart = vec![det(0.8, [0.0, 0.0, 1.0, 1.0]), det(0.9, [5.0, 5.0, 6.0, 6.0])];
        assert_eq!(nms(&apart, 0.5).len(), 2);
    }

    #[test]
    fn zero_logits_score_one_half() {
        let lv = HeadOutput::<f64> { stride: 8, boxes: Tensor::zeros(&[4, 2, 3]), cls: Tensor::zeros(&[1, 2, 3]) };
        let kept = decode(&[lv.clone()], 640.0, 0.25).unwrap();
        assert_eq!(kept.len(), 6);
        assert!(kept.iter().all(|d| d.score == 0.5));
        assert!(decode(&[lv], 640.0, 0.6).unwrap().is_empty());
    }

    #[test]
    fn single_hot_cell() {
        let mut cls = Tensor::<f64>::full(&[1, 4, 4], -10.0);
        cls.set(&[0, 2, 1], 5.0);
        let lv = HeadOutput { stride: 16, boxes: Tensor::zeros(&[4, 4, 4]), cls };
        let d = decode(&[lv], 640.0, 0.25).unwrap();
        assert_eq!(d.len(), 1);
        let half = 2f64.ln() * 16.0;
        let (cx, cy) = (1.5 * 16.0, 2.5 * 16.0);
        let b = d[0].bbox;
        assert!((b.x_min - (cx - half)).abs() < 1e-9 && (b.y_max - (cy + half)).abs() < 1e-9);
    }

    #[test]
    fn boxes_are_clipped() {
        let lv = HeadOutput::<f64> { stride: 32, boxes: Tensor::full(&[4, 2, 2], 30.0), cls: Tensor::full(&[1, 2, 2], 3.0) };
        for d in decode(&[lv], 64.0, 0.0).unwrap() {
            let b = d.bbox;
            assert!(b.is_valid() && b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 64.0 && b.y_max <= 64.0);
        }
    }

    #[test]
    fn line_format() {
        let d = det(0.5, [1.0, 2.0, 3.5, 4.25]);
        assert_eq!(d.to_line(), "0 0.500000 1.000000 2.000000 3.500000 4.250000");
    }
}
