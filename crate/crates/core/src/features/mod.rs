//! Point-wise features (μ), downsampling (g) and global aggregation (h).
//!
//! μ is a fixed set of ten local-geometry features fed through a small
//! per-point network with a KNN max-aggregation step; h is GeM pooling
//! followed by a linear projection and ℓ2 normalisation. Gradients flow
//! through the network and projection only; the handcrafted features and
//! the neighbour graph are fixed inputs.

mod handcrafted;
mod network;
mod pooling;

use std::fmt;

use ndarray::Array2;

pub use handcrafted::{handcrafted_features, handcrafted_from_neighbors, HANDCRAFTED_DIM, HANDCRAFTED_NAMES};
pub use network::{
    feature_map_backward, feature_map_backward_into, feature_map_forward, DenseLayer, FeatureMapCache, FeatureParams,
    LEAKY_SLOPE,
};
pub use pooling::{aggregate, aggregate_backward, aggregate_forward, AggregateCache, Projection};

use crate::error::{invalid, Result};
use crate::geometry::PointCloud;
use crate::spatial::{knn, NeighborTable};

/// Per-point feature rows.
pub type FeatureMatrix = Array2<f64>;

/// Default global descriptor length.
pub const DESCRIPTOR_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Virtual,
    Real,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Virtual => "virtual",
            Domain::Real => "real",
        })
    }
}

/// Unit-norm global descriptor of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub domain: Domain,
    pub frame_id: u64,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Descriptor) -> f64 {
        crate::numeric::dot(&self.values, &other.values)
    }
}

/// Neighbourhood size and GeM exponent of the descriptor pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorConfig {
    /// Used for both the handcrafted neighbourhoods and the graph aggregation.
    pub k: usize,
    pub gem_p: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self { k: 20, gem_p: 3.0 }
    }
}

/// Fixed (non-differentiated) inputs of the feature network for one cloud.
#[derive(Debug, Clone)]
pub struct CloudInputs {
    pub raw: FeatureMatrix,
    pub neighbors: NeighborTable,
}

impl CloudInputs {
    pub fn prepare(cloud: &PointCloud, k: usize) -> Result<Self> {
        let neighbors = knn(cloud, k)?;
        let raw = handcrafted_from_neighbors(cloud, &neighbors);
        Ok(Self { raw, neighbors })
    }
}

/// μ: handcrafted rows through the per-point network, graph built from `cloud`.
pub fn feature_map(cloud: &PointCloud, raw: &FeatureMatrix, params: &FeatureParams, k: usize) -> Result<FeatureMatrix> {
    if raw.nrows() != cloud.len() {
        return invalid("feature rows do not match the cloud");
    }
    let neighbors = knn(cloud, k)?;
    feature_map_forward(raw, &neighbors, params).map(|(out, _)| out)
}

/// g: keeps the rows and points at `keep`, in the given order.
pub fn downsample(psi: &FeatureMatrix, cloud: &PointCloud, keep: &[usize]) -> Result<(FeatureMatrix, PointCloud)> {
    if psi.nrows() != cloud.len() {
        return invalid("feature rows do not match the cloud");
    }
    let mut seen = vec![false; cloud.len()];
    for &i in keep {
        if i >= cloud.len() {
            return invalid(format!("index {i} out of range for {} points", cloud.len()));
        }
        if std::mem::replace(&mut seen[i], true) {
            return invalid(format!("index {i} selected twice"));
        }
    }
    let rows = psi.select(ndarray::Axis(0), keep);
    Ok((rows, cloud.select(keep)?))
}

/// Descriptor together with the caches needed for backpropagation.
#[derive(Debug, Clone)]
pub struct DescriptorTrace {
    pub descriptor: Vec<f64>,
    pub point_features: FeatureMatrix,
    pub map_cache: FeatureMapCache,
    pub agg_cache: AggregateCache,
}

pub fn descriptor_forward(
    inputs: &CloudInputs,
    params: &FeatureParams,
    proj: &Projection,
    gem_p: f64,
) -> Result<DescriptorTrace> {
    let (z, map_cache) = feature_map_forward(&inputs.raw, &inputs.neighbors, params)?;
    let (descriptor, agg_cache) = aggregate_forward(&z, proj, gem_p)?;
    Ok(DescriptorTrace {
        descriptor,
        point_features: z,
        map_cache,
        agg_cache,
    })
}

/// Accumulates parameter gradients for `dL/d(descriptor)`.
pub fn descriptor_backward(
    trace: &DescriptorTrace,
    params: &FeatureParams,
    proj: &Projection,
    ddesc: &[f64],
    grad_features: &mut FeatureParams,
    grad_proj: &mut Projection,
) {
    let (gp, dz) = aggregate_backward(proj, &trace.agg_cache, ddesc);
    grad_proj.weight += &gp.weight;
    feature_map_backward_into(params, &trace.map_cache, &dz, grad_features);
}

/// Full single-cloud inference: handcrafted → μ → (g = identity) → h.
pub fn extract_descriptor(
    cloud: &PointCloud,
    params: &FeatureParams,
    proj: &Projection,
    cfg: &DescriptorConfig,
    domain: Domain,
) -> Result<Descriptor> {
    let inputs = CloudInputs::prepare(cloud, cfg.k)?;
    let trace = descriptor_forward(&inputs, params, proj, cfg.gem_p)?;
    Ok(Descriptor {
        values: trace.descriptor,
        domain,
        frame_id: cloud.frame_id,
    })
}
