//! Sensor layouts: named channels with 2-D head positions on the unit square.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{MegError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    pub channels: Vec<String>,
    /// Positions in [0,1]^2, one (x, y) per channel.
    pub positions: Vec<[f64; 2]>,
}

impl SensorLayout {
    /// Builds a layout, min-max normalizing each axis to [0,1] when any raw
    /// coordinate falls outside the unit square. Coordinates already inside
    /// are kept untouched so hand-written layouts stay exact.
    pub fn new(channels: Vec<String>, mut positions: Vec<[f64; 2]>) -> Result<Self> {
        if channels.is_empty() {
            return Err(MegError::Invalid("layout has no channels".into()));
        }
        if channels.len() != positions.len() {
            return Err(MegError::Shape(format!(
                "{} channel names for {} positions",
                channels.len(),
                positions.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &channels {
            if !seen.insert(name.as_str()) {
                return Err(MegError::Invalid(format!("duplicate channel {name:?}")));
            }
        }
        for (name, p) in channels.iter().zip(&positions) {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(MegError::NonFinite(format!("position of channel {name:?}")));
            }
        }
        let outside = positions
            .iter()
            .any(|p| p.iter().any(|&v| !(0.0..=1.0).contains(&v)));
        if outside {
            for axis in 0..2 {
                let lo = positions.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
                let hi = positions.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                for p in positions.iter_mut() {
                    p[axis] = if span > 0.0 { (p[axis] - lo) / span } else { 0.5 };
                }
            }
        }
        Ok(SensorLayout { channels, positions })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Reads a `channel\tx\ty` TSV (header required).
pub fn read_layout(path: &Path) -> Result<SensorLayout> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| MegError::Format("layout file is empty".into()))?;
    if header.split('\t').collect::<Vec<_>>() != ["channel", "x", "y"] {
        return Err(MegError::Format(format!(
            "layout header must be 'channel\\tx\\ty', got {header:?}"
        )));
    }
    let mut channels = Vec::new();
    let mut positions = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(MegError::Format(format!(
                "layout line {}: expected 3 fields, got {}",
                no + 2,
                fields.len()
            )));
        }
        let x: f64 = fields[1].parse().map_err(|_| {
            MegError::Format(format!("layout line {}: bad x {:?}", no + 2, fields[1]))
        })?;
        let y: f64 = fields[2].parse().map_err(|_| {
            MegError::Format(format!("layout line {}: bad y {:?}", no + 2, fields[2]))
        })?;
        channels.push(fields[0].to_string());
        positions.push([x, y]);
    }
    SensorLayout::new(channels, positions)
}

pub fn write_layout(path: &Path, layout: &SensorLayout) -> Result<()> {
    let mut out = String::from("channel\tx\ty\n");
    for (name, p) in layout.channels.iter().zip(&layout.positions) {
        out.push_str(&format!("{name}\t{}\t{}\n", p[0], p[1]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn in_range_positions_kept_exact() {
        let l = SensorLayout::new(
            vec!["a".into(), "b".into()],
            vec![[0.25, 0.75], [1.0, 0.0]],
        )
        .unwrap();
        assert_eq!(l.positions, vec![[0.25, 0.75], [1.0, 0.0]]);
    }

    #[test]
    fn out_of_range_positions_normalized_per_axis() {
        let l = SensorLayout::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![[-10.0, 0.0], [0.0, 50.0], [10.0, 100.0]],
        )
        .unwrap();
        for p in &l.positions {
            assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }
        assert_eq!(l.positions[0], [0.0, 0.0]);
        assert_eq!(l.positions[2], [1.0, 1.0]);
    }

    #[test]
    fn rejects_duplicates_and_nan() {
        assert!(SensorLayout::new(
            vec!["a".into(), "a".into()],
            vec![[0.0, 0.0], [1.0, 1.0]],
        )
        .is_err());
        assert!(matches!(
            SensorLayout::new(vec!["a".into()], vec![[f64::NAN, 0.0]]),
            Err(MegError::NonFinite(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("layout.tsv");
        let l = SensorLayout::new(
            vec!["MEG001".into(), "MEG002".into()],
            vec![[0.1, 0.9], [0.5, 0.5]],
        )
        .unwrap();
        write_layout(&path, &l).unwrap();
        assert_eq!(read_layout(&path).unwrap(), l);
    }
}
