//! Traced backbone shapes against the reference layer table.

use super::model::Model;
use super::spec::{Hwc, LayerKind, TABLE1};
use crate::rng::SplitMix64;
use crate::{Graph, Result, Scalar, Tensor};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct RowCheck {
    /// 1-based row of the table.
    pub row: usize,
    pub op: &'static str,
    /// Spec layer that produced the row, if the spec has one.
    pub layer: Option<String>,
    pub expected: Hwc,
    pub actual: Option<Hwc>,
}

impl RowCheck {
    pub fn ok(&self) -> bool {
        self.actual == Some(self.expected)
    }
}

/// Runs the backbone once on a seeded image of the spec's input size and
/// pairs each table row with the shape the matching spec layer produced.
pub fn check_table1<T: Scalar>(model: &Model<T>, seed: u64) -> Result<Vec<RowCheck>> {
    let spec = model.spec();
    let Hwc(h, w, c) = spec.input;
    let mut rng = SplitMix64::new(seed);
    let image = Tensor::<T>::from_fn(&[c, h, w], |_| T::lit(rng.next_f64()));

    let mut traced: HashMap<String, Hwc> = HashMap::new();
    let mut g = Graph::inference();
    let x = g.constant(image);
    model.backbone_hooked(&mut g, x, &mut |name, g, v| {
        if let Some(s) = Hwc::from_chw(g.shape(v)) {
            traced.insert(name.to_string(), s);
        }
        Ok(v)
    })?;

    let actual_of = |i: usize| {
        let at = match spec.backbone[i].kind {
            LayerKind::Feat { level } => spec.feat_source(level)?,
            _ => i,
        };
        traced.get(&spec.backbone[at].name).copied()
    };
    let rows: Vec<usize> = (0..spec.backbone.len()).filter(|&i| spec.backbone[i].table_row).collect();
    Ok(TABLE1
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let i = rows.get(k).copied();
            RowCheck {
                row: k + 1,
                op: t.op,
                layer: i.map(|i| spec.backbone[i].name.clone()),
                expected: t.output,
                actual: i.and_then(actual_of),
            }
        })
        .collect())
}
