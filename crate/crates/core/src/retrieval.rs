//! Descriptor database, place-recognition recall and registration metrics.
//!
//! Rows are stored sorted by `frame_id`, so the `(distance, row)` order used
//! by both search backends is also the tie order by frame id.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{invalid, Error, Result};
use crate::geometry::RigidTransform;
use crate::io::{read_descriptor_meta, read_vdsc, write_descriptor_meta, write_vdsc, DescriptorMeta};
use crate::numeric::squared_distance;
use crate::spatial::{brute_force_nearest, KdTree};

/// Allowed deviation of a stored descriptor's norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchBackend {
    #[default]
    Exhaustive,
    Tree,
}

impl FromStr for SearchBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(Self::Exhaustive),
            "tree" => Ok(Self::Tree),
            _ => invalid(format!("unknown search backend '{s}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    dim: usize,
    data: Vec<f64>,
    meta: Vec<DescriptorMeta>,
    backend: SearchBackend,
    tree: Option<KdTree>,
}

/// One ranked database match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub frame_id: u64,
    pub row: usize,
    pub distance: f64,
}

pub fn build_index(descriptors: &[Vec<f64>], meta: &[DescriptorMeta], backend: SearchBackend) -> Result<DescriptorIndex> {
    if descriptors.is_empty() {
        return invalid("index needs at least one descriptor");
    }
    if descriptors.len() != meta.len() {
        return invalid(format!(
            "{} descriptors but {} metadata rows",
            descriptors.len(),
            meta.len()
        ));
    }
    let dim = descriptors[0].len();
    if dim == 0 {
        return invalid("descriptors are empty");
    }
    for (i, d) in descriptors.iter().enumerate() {
        if d.len() != dim {
            return invalid(format!("descriptor {i} has dimension {}, expected {dim}", d.len()));
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
            return invalid(format!("descriptor {i} is not unit-norm ({norm})"));
        }
    }
    let mut order: Vec<usize> = (0..meta.len()).collect();
    order.sort_by_key(|&i| meta[i].frame_id);
    if order.windows(2).any(|w| meta[w[0]].frame_id == meta[w[1]].frame_id) {
        return invalid("duplicate frame ids in index");
    }
    let data: Vec<f64> = order.iter().flat_map(|&i| descriptors[i].iter().copied()).collect();
    let meta: Vec<DescriptorMeta> = order.iter().map(|&i| meta[i].clone()).collect();
    let mut index = DescriptorIndex {
        dim,
        data,
        meta,
        backend: SearchBackend::Exhaustive,
        tree: None,
    };
    index.set_backend(backend);
    Ok(index)
}

impl DescriptorIndex {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend(&self) -> SearchBackend {
        self.backend
    }

    pub fn set_backend(&mut self, backend: SearchBackend) {
        self.tree = match backend {
            SearchBackend::Tree => Some(KdTree::new(self.data.clone(), self.dim).expect("validated buffer")),
            SearchBackend::Exhaustive => None,
        };
        self.backend = backend;
    }

    /// Metadata in row (frame id) order.
    pub fn meta(&self) -> &[DescriptorMeta] {
        &self.meta
    }

    pub fn descriptor(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn descriptors(&self) -> Vec<Vec<f64>> {
        self.data.chunks_exact(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn row_of(&self, frame_id: u64) -> Option<usize> {
        self.meta.binary_search_by_key(&frame_id, |m| m.frame_id).ok()
    }

    /// Ranked matches, optionally skipping one frame.
    pub fn search(&self, q: &[f64], n: usize, exclude_frame: Option<u64>) -> Result<Vec<Hit>> {
        if q.len() != self.dim {
            return invalid(format!("query has dimension {}, index has {}", q.len(), self.dim));
        }
        let exclude = exclude_frame.and_then(|f| self.row_of(f));
        let available = self.len() - usize::from(exclude.is_some());
        if n == 0 || n > available {
            return invalid(format!("n = {n} outside 1..={available}"));
        }
        let raw = match &self.tree {
            Some(t) => t.nearest(q, n, exclude),
            None => brute_force_nearest(&self.data, self.dim, q, n, exclude),
        };
        Ok(raw
            .into_iter()
            .map(|(d2, row)| Hit {
                frame_id: self.meta[row].frame_id,
                row,
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Writes `descriptors.vdsc` and `meta.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_vdsc(&dir.join("descriptors.vdsc"), &self.descriptors())?;
        write_descriptor_meta(&dir.join("meta.csv"), &self.meta)
    }

    pub fn load(dir: &Path, backend: SearchBackend) -> Result<Self> {
        let descs = read_vdsc(&dir.join("descriptors.vdsc"))?;
        let meta = read_descriptor_meta(&dir.join("meta.csv"))?;
        build_index(&descs, &meta, backend)
    }
}

/// Ascending ℓ2 distance, ties by frame id.
pub fn query_top_n(index: &DescriptorIndex, q: &[f64], n: usize) -> Result<Vec<Hit>> {
    index.search(q, n, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecallVariant {
    Top1,
    Top1Percent,
}

impl RecallVariant {
    /// Retrieval depth for a database of `m` frames.
    pub fn depth(self, m: usize) -> usize {
        match self {
            Self::Top1 => 1,
            Self::Top1Percent => m.div_ceil(100).max(1),
        }
    }
}

impl FromStr for RecallVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Self::Top1),
            "top1percent" => Ok(Self::Top1Percent),
            _ => invalid(format!("unknown recall variant '{s}'")),
        }
    }
}

impl fmt::Display for RecallVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Top1 => "top1",
            Self::Top1Percent => "top1percent",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallQuery {
    pub frame_id: u64,
    pub descriptor: Vec<f64>,
    pub position: Vector3<f64>,
}

/// Fraction of queries with a retrieved frame within `r_pos` of their position.
///
/// With `exclude_self`, a query never retrieves its own frame id; without it,
/// a query whose frame id is in the index is rejected.
pub fn recall_at(
    index: &DescriptorIndex,
    queries: &[RecallQuery],
    variant: RecallVariant,
    r_pos: f64,
    exclude_self: bool,
) -> Result<f64> {
    if queries.is_empty() {
        return invalid("no queries");
    }
    if !(r_pos >= 0.0) {
        return invalid("r_pos must be non-negative");
    }
    let n = variant.depth(index.len());
    let mut hits = 0usize;
    for q in queries {
        let present = index.row_of(q.frame_id).is_some();
        if present && !exclude_self {
            return invalid(format!("query frame {} is in the index", q.frame_id));
        }
        let available = index.len() - usize::from(present);
        let ranked = index.search(&q.descriptor, n.min(available), Some(q.frame_id))?;
        if ranked
            .iter()
            .any(|h| (index.meta[h.row].position() - q.position).norm() <= r_pos)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Rotation errors over Z-Y-X Euler angles (degrees), translation over components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegMetrics {
    pub mse_r: f64,
    pub mae_r: f64,
    pub mse_t: f64,
    pub mae_t: f64,
}

/// Maps an angle difference in degrees to (−180, 180].
pub fn wrap_degrees(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

pub fn registration_metrics(estimates: &[RigidTransform], truths: &[RigidTransform]) -> Result<RegMetrics> {
    if estimates.len() != truths.len() {
        return invalid(format!("{} estimates but {} truths", estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return invalid("no poses to compare");
    }
    let mut m = RegMetrics::default();
    for (e, t) in estimates.iter().zip(truths) {
        let (ea, ta) = (e.euler().as_array(), t.euler().as_array());
        for k in 0..3 {
            let dr = wrap_degrees(ea[k] - ta[k]);
            let dt = e.translation[k] - t.translation[k];
            m.mse_r += dr * dr;
            m.mae_r += dr.abs();
            m.mse_t += dt * dt;
            m.mae_t += dt.abs();
        }
    }
    let count = 3.0 * estimates.len() as f64;
    m.mse_r /= count;
    m.mae_r /= count;
    m.mse_t /= count;
    m.mae_t /= count;
    Ok(m)
}

/// ℓ2 distance between two descriptors.
pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}
