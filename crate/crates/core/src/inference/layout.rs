//! Named parameter layout and per-block bijections to unconstrained space.

use serde::{Deserialize, Serialize};

use crate::math::{sigmoid, softplus};
use crate::scalar::Real;

/// Map from an unconstrained coordinate `u` to the constrained value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// `c = exp(u)`, for positive parameters.
    Log,
    /// `c = lower + (upper − lower)·sigmoid(u)`.
    ScaledLogit {
        lower: f64,
        upper: f64,
    },
}

impl Transform {
    pub fn constrain<T: Real>(&self, u: T) -> T {
        match *self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::ScaledLogit { lower, upper } => {
                T::lit(lower) + T::lit(upper - lower) * sigmoid(u)
            }
        }
    }

    pub fn unconstrain<T: Real>(&self, c: T) -> T {
        match *self {
            Transform::Identity => c,
            Transform::Log => c.ln(),
            Transform::ScaledLogit { lower, upper } => {
                ((c - T::lit(lower)) / (T::lit(upper) - c)).ln()
            }
        }
    }

    /// `log |dc/du|`
    pub fn log_jacobian<T: Real>(&self, u: T) -> T {
        match *self {
            Transform::Identity => T::zero(),
            Transform::Log => u,
            Transform::ScaledLogit { lower, upper } => {
                T::lit((upper - lower).ln()) - softplus(-u) - softplus(u)
            }
        }
    }

    /// `dc/du`
    pub fn dconstrain<T: Real>(&self, u: T) -> T {
        match *self {
            Transform::Identity => T::one(),
            Transform::Log => u.exp(),
            Transform::ScaledLogit { lower, upper } => {
                let s = sigmoid(u);
                T::lit(upper - lower) * s * (T::one() - s)
            }
        }
    }

    /// `d log|dc/du| / du`
    pub fn dlog_jacobian<T: Real>(&self, u: T) -> T {
        match *self {
            Transform::Identity => T::zero(),
            Transform::Log => T::one(),
            Transform::ScaledLogit { .. } => T::one() - T::lit(2.0) * sigmoid(u),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub transform: Transform,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered, gap-free partition of a flat parameter vector into named blocks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<Block>,
    dim: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a block and return its index range.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        len: usize,
        transform: Transform,
    ) -> std::ops::Range<usize> {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate block `{name}`");
        let block = Block {
            name,
            start: self.dim,
            len,
            transform,
        };
        let r = block.range();
        self.dim += len;
        self.blocks.push(block);
        r
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Block containing flat coordinate `i`.
    pub fn block_of(&self, i: usize) -> Option<&Block> {
        self.blocks.iter().find(|b| b.range().contains(&i))
    }

    /// Human-readable coordinate name, e.g. `eta_mu[2][1]`.
    pub fn coordinate_name(&self, i: usize) -> String {
        match self.block_of(i) {
            Some(b) if b.len == 1 => b.name.clone(),
            Some(b) => format!("{}[{}]", b.name, i - b.start),
            None => format!("#{i}"),
        }
    }

    /// True when the blocks tile `0..dim` exactly once.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for b in &self.blocks {
            if b.start != next {
                return false;
            }
            next += b.len;
        }
        next == self.dim
    }

    pub fn constrain<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        for b in &self.blocks {
            for v in &mut out[b.range()] {
                *v = b.transform.constrain(*v);
            }
        }
        out
    }

    pub fn unconstrain<T: Real>(&self, c: &[T]) -> Vec<T> {
        let mut out = c.to_vec();
        for b in &self.blocks {
            for v in &mut out[b.range()] {
                *v = b.transform.unconstrain(*v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_layout() -> Layout {
        let mut l = Layout::new();
        l.push("mu", 2, Transform::Identity);
        l.push("sigma", 2, Transform::Log);
        l.push(
            "noise",
            1,
            Transform::ScaledLogit {
                lower: 0.0,
                upper: 100.0,
            },
        );
        l
    }

    #[test]
    fn blocks_tile_the_vector() {
        let l = sample_layout();
        assert!(l.is_partition());
        assert_eq!(l.dim(), 5);
        assert_eq!(l.coordinate_name(3), "sigma[1]");
        assert_eq!(l.coordinate_name(4), "noise");
    }

    #[test]
    fn jacobian_derivatives_match_finite_differences() {
        let h = 1e-6;
        for t in [
            Transform::Identity,
            Transform::Log,
            Transform::ScaledLogit {
                lower: 0.0,
                upper: 100.0,
            },
        ] {
            for &u in &[-3.0f64, -0.2, 0.0, 1.5] {
                let fd_c = (t.constrain(u + h) - t.constrain(u - h)) / (2.0 * h);
                assert!((fd_c - t.dconstrain(u)).abs() < 1e-6 * fd_c.abs().max(1.0));
                let fd_j = (t.log_jacobian(u + h) - t.log_jacobian(u - h)) / (2.0 * h);
                assert!((fd_j - t.dlog_jacobian(u)).abs() < 1e-7);
                assert!((t.log_jacobian(u) - t.dconstrain(u).ln()).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn transform_round_trip(u in prop::collection::vec(-8.0f64..8.0, 5)) {
            let l = sample_layout();
            let back = l.unconstrain(&l.constrain(&u));
            for (a, b) in back.iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0) + 1e-12);
            }
        }
    }
}
