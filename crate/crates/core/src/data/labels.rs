//! YOLO-format annotation and prediction text files.

use crate::bbox::BBox;
use crate::{Error, Result};
use std::path::Path;

/// One normalized box: `class cx cy w h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Label {
    pub fn bbox(&self) -> BBox {
        BBox::from_cxcywh(self.cx, self.cy, self.w, self.h)
    }

    /// Six-decimal `class cx cy w h`.
    pub fn to_line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6} {:.6}", self.class, self.cx, self.cy, self.w, self.h)
    }

    /// Coordinates in `[0,1]`, positive extents, and the box inside the unit
    /// square up to `1e-6`.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} is outside [0,1]"));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("box extent must be positive, got w = {}, h = {}", self.w, self.h));
        }
        let b = self.bbox();
        let tol = 1e-6;
        if b.x_min < -tol || b.y_min < -tol || b.x_max > 1.0 + tol || b.y_max > 1.0 + tol {
            return Err("box extends outside the unit square".into());
        }
        Ok(())
    }
}

/// A scored prediction line: `class score cx cy w h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub label: Label,
}

fn fields(line: &str, n: usize) -> std::result::Result<Vec<&str>, String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != n {
        return Err(format!("expected {n} fields, found {}", f.len()));
    }
    Ok(f)
}

fn class_id(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("class '{s}' is not a non-negative integer"))
}

fn real(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

fn parse_lines<R>(text: &str, path: &Path, mut f: impl FnMut(&str) -> std::result::Result<R, String>) -> Result<Vec<R>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(f(line).map_err(|msg| Error::Label { path: path.to_path_buf(), line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Label>> {
    parse_lines(text, path, |line| {
        let f = fields(line, 5)?;
        let l = Label { class: class_id(f[0])?, cx: real(f[1])?, cy: real(f[2])?, w: real(f[3])?, h: real(f[4])? };
        l.validate()?;
        Ok(l)
    })
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<Prediction>> {
    parse_lines(text, path, |line| {
        let f = fields(line, 6)?;
        let score = real(f[1])?;
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("score {score} is outside [0,1]"));
        }
        let label = Label { class: class_id(f[0])?, cx: real(f[2])?, cy: real(f[3])?, w: real(f[4])?, h: real(f[5])? };
        label.validate()?;
        Ok(Prediction { score, label })
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Label>> {
    let path = path.as_ref();
    parse_labels(&read(path)?, path)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    parse_predictions(&read(path)?, path)
}

pub fn format_labels(labels: &[Label]) -> String {
    labels.iter().map(|l| l.to_line() + "\n").collect()
}
