//! A tiny randomly initialized strided conv stack standing in for a
//! pretrained feature extractor.
//!
//! 2D convolutions reuse the 4D kernel on `[H, W, 1, 1, C]` volumes.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv4d;
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const PREFIX: &str = "backbone";

/// `(level, pyramid layer, stride, out channels)` of every emitted map.
/// A stem conv (stride 2, 8 channels) precedes level 1.
pub const LEVELS: [(usize, usize, usize, usize); 6] =
    [(1, 3, 2, 16), (2, 3, 1, 16), (3, 4, 2, 32), (4, 4, 1, 32), (5, 5, 2, 32), (6, 5, 1, 32)];
const STEM_CHANNELS: usize = 8;

/// One emitted feature map inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct Feature {
    pub level: usize,
    pub layer: usize,
    /// `[h, w, c]`.
    pub var: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv4d,
    convs: Vec<Conv4d>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let k = [3, 3, 1, 1];
        let stem = Conv4d::new(store, rng, &format!("{PREFIX}.stem"), k, 3, STEM_CHANNELS, [2, 2, 1, 1])?;
        let mut cin = STEM_CHANNELS;
        let mut convs = Vec::new();
        for (level, _, s, cout) in LEVELS {
            convs.push(Conv4d::new(store, rng, &format!("{PREFIX}.conv{level}"), k, cin, cout, [s, s, 1, 1])?);
            cin = cout;
        }
        Ok(Backbone { stem, convs })
    }

    /// Channel count of `level`.
    pub fn channels(level: usize) -> Option<usize> {
        LEVELS.iter().find(|l| l.0 == level).map(|l| l.3)
    }

    /// Layer tag of `level`.
    pub fn layer_of(level: usize) -> Option<usize> {
        LEVELS.iter().find(|l| l.0 == level).map(|l| l.1)
    }

    /// Spatial extent of `level` for a square input of side `size`.
    pub fn extent(level: usize, size: usize) -> Option<usize> {
        let mut n = size.div_ceil(2);
        for (l, _, s, _) in LEVELS {
            n = n.div_ceil(s);
            if l == level {
                return Some(n);
            }
        }
        None
    }

    /// Pre-activation feature maps of every level for an `[H, W, 3]` image.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Feature>> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(dim_err!("backbone expects an [H, W, 3] image, got {:?}", s));
        }
        let x = g.reshape(image, &[s[0], s[1], 1, 1, 3])?;
        let x = self.stem.forward(g, store, x)?;
        let mut x = g.relu(x);
        let mut out = Vec::with_capacity(LEVELS.len());
        for (conv, (level, layer, _, _)) in self.convs.iter().zip(LEVELS) {
            let y = conv.forward(g, store, x)?;
            let ys = g.shape(y).to_vec();
            let var = g.reshape(y, &[ys[0], ys[1], ys[4]])?;
            out.push(Feature { level, layer, var });
            x = g.relu(y);
        }
        Ok(out)
    }
}
