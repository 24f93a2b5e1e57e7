//! Densely connected EdgeConv feature extractor.
//!
//! The neighbour graph is built once from the input coordinates and shared
//! by every layer. Layer `l` consumes the concatenation of the input
//! coordinates and all earlier layer outputs; a final affine projection maps
//! the full concatenation to `out_dim` channels. The extractor works on raw
//! coordinates and is therefore not rotation invariant.

use rand::Rng;

use crate::diffmath::{knn_indices, KnnIndices, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::params::{Bound, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub k_feat: usize,
    pub widths: Vec<usize>,
    pub out_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            k_feat: 16,
            widths: vec![32, 32, 64],
            out_dim: 64,
        }
    }
}

/// Per-point features `N x D` recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub values: Var,
}

impl FeatureConfig {
    fn layer_inputs(&self) -> Vec<usize> {
        let mut c = 3;
        self.widths
            .iter()
            .map(|w| {
                let input = c;
                c += w;
                input
            })
            .collect()
    }

    pub fn concat_width(&self) -> usize {
        3 + self.widths.iter().sum::<usize>()
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        for (l, (&cin, &w)) in self.layer_inputs().iter().zip(&self.widths).enumerate() {
            params.init_linear(&format!("feat.edge{l}"), 2 * cin, w, rng);
        }
        params.init_linear("feat.proj", self.concat_width(), self.out_dim, rng);
    }
}

/// One EdgeConv layer: for every point `i` and neighbour `j` the edge
/// feature `concat(x_i, x_j − x_i)` goes through the shared affine map
/// `{prefix}.weight` (`2C x C_out`) / `{prefix}.bias`, then ReLU, then a max
/// over the neighbourhood.
pub fn edge_conv_layer(
    tape: &Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    neighbors: &KnnIndices,
) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c) = (xv.rows(), xv.cols());
    if neighbors.k > n {
        return Err(Error::InvalidInput(format!(
            "edge_conv_layer: k_feat = {} exceeds {n} points",
            neighbors.k
        )));
    }
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = bound.var(&format!("{prefix}.bias"))?;
    if tape.value(w).rows() != 2 * c {
        return Err(Error::shape(
            "edge_conv_layer",
            format!("weight {:?} for {c} input channels", tape.value(w).shape()),
        ));
    }
    let w_self = tape.slice_rows(w, 0, c)?;
    let w_nbr = tape.slice_rows(w, c, 2 * c)?;
    let w_center = tape.sub(w_self, w_nbr)?;
    let center = tape.matmul(x, w_center)?;
    let center = tape.add_row(center, b)?;
    let nbr = tape.matmul(x, w_nbr)?;
    tape.edge_max(center, nbr, neighbors)
}

pub fn extract_features(
    tape: &Tape,
    bound: &Bound,
    config: &FeatureConfig,
    cloud: &PointCloud,
) -> Result<FeatureMap> {
    if config.k_feat > cloud.len() {
        return Err(Error::InvalidInput(format!(
            "k_feat = {} exceeds {} points",
            config.k_feat,
            cloud.len()
        )));
    }
    let coords = cloud.to_tensor();
    let neighbors = knn_indices(&coords, &coords, config.k_feat)?;
    let x0 = tape.constant(coords);
    let mut stack = vec![x0];
    for l in 0..config.widths.len() {
        let input = if stack.len() == 1 {
            x0
        } else {
            tape.concat_cols(&stack)?
        };
        let h = edge_conv_layer(tape, bound, &format!("feat.edge{l}"), input, &neighbors)?;
        stack.push(h);
    }
    let all = tape.concat_cols(&stack)?;
    let values = bound.linear(tape, "feat.proj", all)?;
    Ok(FeatureMap { values })
}
