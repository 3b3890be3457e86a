//! Flat parameter storage with named segments.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// All trainable values of a field in one vector. Segments are contiguous,
/// non-overlapping and cover the whole vector in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamSet {
    /// Zero-filled parameters for the given `(name, length)` layout.
    pub fn with_layout(layout: &[(&str, usize)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(layout.len());
        let mut start = 0;
        for &(name, len) in layout {
            if segments.iter().any(|s: &Segment| s.name == name) {
                return invalid(format!("duplicate segment {name:?}"));
            }
            segments.push(Segment {
                name: name.to_string(),
                start,
                len,
            });
            start += len;
        }
        Ok(Self {
            values: vec![0.0; start],
            segments,
        })
    }

    pub fn from_parts(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut start = 0;
        for s in &segments {
            if s.start != start {
                return invalid(format!("segment {:?} is not contiguous", s.name));
            }
            start += s.len;
        }
        if start != values.len() {
            return invalid(format!(
                "segments cover {start} values but {} were given",
                values.len()
            ));
        }
        let p = Self { values, segments };
        p.check_finite()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<Range<usize>> {
        self.segments.iter().find(|s| s.name == name).map(Segment::range)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|r| &self.values[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.segment(name).map(move |r| &mut self.values[r])
    }

    /// Name of the segment holding flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&str> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.name.as_str())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.segments == other.segments
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NumericFailure(format!(
                "parameter {i} in segment {:?} is not finite",
                self.segment_of(i).unwrap_or("?")
            ))),
        }
    }
}
