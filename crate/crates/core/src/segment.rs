use crate::error::{Error, Result};

/// One ground-truth segment `(c, m)`: a real class id in `1..=K` and a
/// binary mask over `H·W` pixels stored as 0/1 floats.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSegment {
    pub class: usize,
    pub mask: Vec<f64>,
}

impl TargetSegment {
    pub fn new(class: usize, mask: Vec<f64>) -> Result<Self> {
        if class == 0 {
            return Err(Error::Input("class ids start at 1".into()));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input("target masks must be binary".into()));
        }
        Ok(Self { class, mask })
    }

    pub fn from_bools(class: usize, mask: &[bool]) -> Result<Self> {
        Self::new(class, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0.0).count()
    }
}
