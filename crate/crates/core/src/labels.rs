//! Per-image detection label files: one `class cx cy w h` line per instance,
//! coordinates normalized to the image size with six decimals.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelLine {
    pub class_index: usize,
    /// `[cx, cy, w, h]`, normalized.
    pub normalized: [f64; 4],
}

impl LabelLine {
    pub fn from_box(class_index: usize, b: &BoundingBox, width: u32, height: u32) -> Self {
        LabelLine {
            class_index,
            normalized: b.to_normalized_cxcywh(width, height),
        }
    }

    pub fn to_box(&self, width: u32, height: u32) -> Result<BoundingBox> {
        BoundingBox::from_normalized_cxcywh(self.normalized, width, height)
    }
}

pub fn format_labels(lines: &[LabelLine]) -> String {
    let mut out = String::new();
    for l in lines {
        let [cx, cy, w, h] = l.normalized;
        writeln!(out, "{} {cx:.6} {cy:.6} {w:.6} {h:.6}", l.class_index).expect("string write");
    }
    out
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::InvalidInput(format!("label line {}: `{line}`", n + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let class_index = fields[0].parse::<usize>().map_err(|_| bad())?;
        let mut normalized = [0.0; 4];
        for (slot, f) in normalized.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|_| bad())?;
            if !slot.is_finite() {
                return Err(bad());
            }
        }
        out.push(LabelLine {
            class_index,
            normalized,
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

/// Reads a class list: either a JSON array of strings or one name per line.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim_start();
    let classes: Vec<String> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| Error::json(path.display().to_string(), e))?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()
    };
    Ok(classes)
}

pub fn format_class_list(classes: &[String]) -> String {
    let mut s = classes.join("\n");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_six_decimals() {
        let b = BoundingBox::new(10.0, 20.0, 50.0, 80.0).unwrap();
        let text = format_labels(&[LabelLine::from_box(3, &b, 100, 200)]);
        assert_eq!(text, "3 0.300000 0.250000 0.400000 0.300000\n");
        let back = parse_labels(&text).unwrap();
        assert_eq!(back[0].class_index, 3);
        let bb = back[0].to_box(100, 200).unwrap();
        assert!((bb.x_min - 10.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_labels("1 0.5 0.5 0.1").is_err());
        assert!(parse_labels("x 0.5 0.5 0.1 0.1").is_err());
        assert!(parse_labels("\n\n").unwrap().is_empty());
    }
}
