use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};

/// One named, shaped block inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Shape as a matrix: vectors become a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

/// A flat parameter array with a segment layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
    offsets: Vec<usize>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vector from a layout and values, checking that the sizes agree.
    pub fn from_parts(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let total: usize = segments.iter().map(Segment::numel).sum();
        check_dim("parameter values", total, values.len())?;
        let mut offsets = Vec::with_capacity(segments.len());
        let mut off = 0;
        for s in &segments {
            offsets.push(off);
            off += s.numel();
        }
        Ok(Self {
            values,
            segments,
            offsets,
        })
    }

    /// Appends a segment and returns its index.
    pub fn push_segment(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let seg = Segment {
            name: name.into(),
            shape,
        };
        assert_eq!(seg.numel(), values.len(), "segment `{}` size", seg.name);
        self.offsets.push(self.values.len());
        self.values.extend(values);
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &[f64] {
        let off = self.offsets[idx];
        &self.values[off..off + self.segments[idx].numel()]
    }

    pub fn segment_mut(&mut self, idx: usize) -> &mut [f64] {
        let off = self.offsets[idx];
        let n = self.segments[idx].numel();
        &mut self.values[off..off + n]
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn segment_by_name(&self, name: &str) -> Result<&[f64]> {
        self.segment_index(name)
            .map(|i| self.segment(i))
            .ok_or_else(|| Error::MissingSegment { name: name.into() })
    }

    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    /// Squared L2 norm of all values.
    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    /// Replaces the values, keeping the layout.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        check_dim("parameter values", self.values.len(), values.len())?;
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

/// Polyak averaging `target ← ι·source + (1 − ι)·target`, elementwise.
pub fn polyak_update(source: &ParamVector, target: &mut ParamVector, iota: f64) -> Result<()> {
    if !(iota > 0.0 && iota <= 1.0) {
        return Err(crate::error::invalid("iota", "must lie in (0, 1]"));
    }
    check_dim("polyak update", target.len(), source.len())?;
    if !source.same_layout(target) {
        return Err(crate::error::invalid("polyak update", "needs matching segment layouts"));
    }
    let keep = 1.0 - iota;
    for (t, &s) in target.values.iter_mut().zip(&source.values) {
        *t = iota * s + keep * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn layout_bookkeeping() {
        let mut p = ParamVector::new();
        let a = p.push_segment("a", vec![2, 3], vec![1.0; 6]);
        let b = p.push_segment("b", vec![3], vec![2.0; 3]);
        assert_eq!(p.len(), 9);
        assert_eq!(p.offset(b), 6);
        assert_eq!(p.segment(a).len(), 6);
        assert_eq!(p.segment_by_name("b").unwrap(), &[2.0, 2.0, 2.0]);
        assert!(p.segment_by_name("c").is_err());
        assert_eq!(p.segments()[a].matrix_shape(), (2, 3));
        assert_eq!(p.segments()[b].matrix_shape(), (1, 3));
    }

    #[test]
    fn from_parts_rejects_bad_length() {
        let segs = vec![Segment {
            name: "w".into(),
            shape: vec![2, 2],
        }];
        assert!(ParamVector::from_parts(segs.clone(), vec![0.0; 3]).is_err());
        assert!(ParamVector::from_parts(segs, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn polyak_examples() {
        let mut src = ParamVector::new();
        src.push_segment("w", vec![1], vec![1.0]);
        let mut tgt = ParamVector::new();
        tgt.push_segment("w", vec![1], vec![0.0]);
        polyak_update(&src, &mut tgt, 0.005).unwrap();
        assert_eq!(tgt.values(), &[0.005]);
        polyak_update(&src, &mut tgt, 1.0).unwrap();
        assert_eq!(tgt.values(), &[1.0]);
        assert!(polyak_update(&src, &mut tgt, 0.0).is_err());
        assert!(polyak_update(&src, &mut tgt, 1.5).is_err());
    }

    #[test]
    fn polyak_converges_geometrically() {
        let mut src = ParamVector::new();
        src.push_segment("w", vec![1], vec![2.0]);
        let mut tgt = ParamVector::new();
        tgt.push_segment("w", vec![1], vec![-1.0]);
        let iota = 0.1;
        for k in 1..=50 {
            polyak_update(&src, &mut tgt, iota).unwrap();
            let expect = 3.0 * libm::pow(1.0 - iota, k as f64);
            let gap = (tgt.values()[0] - 2.0).abs();
            assert!((gap - expect).abs() < 1e-13, "k = {k}");
        }
    }
}
