//! Hierarchical 2^d partition of an ideal d-dimensional index domain.
//!
//! The domain is the integer grid [0, n)^d, refined recursively into 2^d
//! congruent half-open boxes until boxes reach `leaf_size` per dimension.
//! Geometric quantities live on the continuous unit cube: index `i` maps
//! to coordinate `i / n`.
//!
//! Degrees of freedom carry a canonical global ordering: tree leaves in
//! child order (Z-order), row-major within a leaf. Every tree node then
//! covers a contiguous range of that ordering, so restricting a vector to
//! any node is a slice.

use crate::error::{Error, Result};
use serde::Serialize;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DomainConfig {
    /// Spatial dimension, 1 to 3.
    pub d: usize,
    /// Grid points per dimension; a power of two.
    pub n: usize,
    /// Points per dimension in a leaf box; divides n.
    pub leaf_size: usize,
}

impl DomainConfig {
    pub fn new(d: usize, n: usize, leaf_size: usize) -> Result<Self> {
        let cfg = DomainConfig { d, n, leaf_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > MAX_DIM {
            return Err(Error::InvalidConfig(format!(
                "d = {} not in {{1, 2, 3}}",
                self.d
            )));
        }
        if self.n == 0 || !self.n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "n = {} is not a power of two",
                self.n
            )));
        }
        if self.leaf_size == 0 || !self.n.is_multiple_of(self.leaf_size) {
            return Err(Error::InvalidConfig(format!(
                "leaf_size = {} does not divide n = {}",
                self.leaf_size, self.n
            )));
        }
        if !(self.n / self.leaf_size).is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "n / leaf_size = {} is not a power of two",
                self.n / self.leaf_size
            )));
        }
        Ok(())
    }

    /// Total DOFs N = n^d.
    pub fn total_dofs(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Children per non-leaf node.
    pub fn fanout(&self) -> usize {
        1 << self.d
    }

    /// Number of refinement levels below the root.
    pub fn refinement_levels(&self) -> usize {
        (self.n / self.leaf_size).trailing_zeros() as usize
    }
}

/// Half-open integer index box [lo, hi) per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IndexBox {
    pub lo: [usize; MAX_DIM],
    pub hi: [usize; MAX_DIM],
    pub level: usize,
}

impl IndexBox {
    /// DOF count |box| over the first `d` dimensions.
    pub fn dof_count(&self, d: usize) -> usize {
        (0..d).map(|k| self.hi[k] - self.lo[k]).product()
    }

    /// Side length in index units (equal across dimensions on ideal domains).
    pub fn side(&self) -> usize {
        self.hi[0] - self.lo[0]
    }

    /// True when the index sets intersect.
    pub fn intersects(&self, other: &IndexBox, d: usize) -> bool {
        (0..d).all(|k| self.lo[k] < other.hi[k] && other.lo[k] < self.hi[k])
    }

    /// Euclidean distance between the closed continuous boxes; touching
    /// boxes are at distance zero.
    pub fn distance(&self, other: &IndexBox, config: &DomainConfig) -> f64 {
        let inv_n = 1.0 / config.n as f64;
        let mut sq = 0.0;
        for k in 0..config.d {
            let gap = other.lo[k]
                .saturating_sub(self.hi[k])
                .max(self.lo[k].saturating_sub(other.hi[k]));
            let g = gap as f64 * inv_n;
            sq += g * g;
        }
        sq.sqrt()
    }
}

/// Euclidean diagonal of the continuous box and its center point.
pub fn box_geometry(b: &IndexBox, config: &DomainConfig) -> (f64, Vec<f64>) {
    let inv_n = 1.0 / config.n as f64;
    let mut sq = 0.0;
    let mut center = Vec::with_capacity(config.d);
    for k in 0..config.d {
        let side = (b.hi[k] - b.lo[k]) as f64 * inv_n;
        sq += side * side;
        center.push((b.lo[k] + b.hi[k]) as f64 * 0.5 * inv_n);
    }
    (sq.sqrt(), center)
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct DomainNode {
    pub bbox: IndexBox,
    pub parent: Option<NodeId>,
    /// Canonical DOF range of the node in the global ordering.
    pub dof_start: usize,
    pub dof_end: usize,
}

#[derive(Debug, Clone)]
pub struct DomainTree {
    pub config: DomainConfig,
    nodes: Vec<DomainNode>,
    /// Index of the first node of each level; levels are stored contiguously.
    level_offsets: Vec<usize>,
}

impl DomainTree {
    pub fn node(&self, id: NodeId) -> &DomainNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of levels (root level included).
    pub fn levels(&self) -> usize {
        self.level_offsets.len() - 1
    }

    pub fn level_nodes(&self, level: usize) -> std::ops::Range<NodeId> {
        self.level_offsets[level]..self.level_offsets[level + 1]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].bbox.level + 1 == self.levels()
    }

    pub fn leaf_count(&self) -> usize {
        let last = self.levels() - 1;
        self.level_offsets[last + 1] - self.level_offsets[last]
    }

    pub fn level_of(&self, id: NodeId) -> usize {
        self.nodes[id].bbox.level
    }

    /// Child `c` (Z-order: bit k of c picks the upper half in dimension k).
    pub fn child(&self, id: NodeId, c: usize) -> Option<NodeId> {
        if self.is_leaf(id) {
            return None;
        }
        let level = self.level_of(id);
        let idx_in_level = id - self.level_offsets[level];
        Some(self.level_offsets[level + 1] + idx_in_level * self.config.fanout() + c)
    }

    pub fn children(&self, id: NodeId) -> Vec<NodeId> {
        (0..self.config.fanout())
            .filter_map(|c| self.child(id, c))
            .collect()
    }

    pub fn dof_range(&self, id: NodeId) -> std::ops::Range<usize> {
        self.nodes[id].dof_start..self.nodes[id].dof_end
    }

    pub fn root(&self) -> NodeId {
        0
    }
}

/// Build the domain tree for a validated config.
pub fn build_domain_tree(config: DomainConfig) -> Result<DomainTree> {
    config.validate()?;
    let levels = config.refinement_levels() + 1;
    let fanout = config.fanout();

    let mut nodes: Vec<DomainNode> = Vec::new();
    let mut level_offsets = vec![0usize];

    let mut root_box = IndexBox {
        lo: [0; MAX_DIM],
        hi: [0; MAX_DIM],
        level: 0,
    };
    for k in 0..config.d {
        root_box.hi[k] = config.n;
    }
    nodes.push(DomainNode {
        bbox: root_box,
        parent: None,
        dof_start: 0,
        dof_end: config.total_dofs(),
    });
    level_offsets.push(1);

    for level in 1..levels {
        let parents = level_offsets[level - 1]..level_offsets[level];
        for p in parents {
            let parent = nodes[p].clone();
            let half = parent.bbox.side() / 2;
            let child_dofs = parent.bbox.dof_count(config.d) / fanout;
            for c in 0..fanout {
                let mut bb = IndexBox {
                    lo: [0; MAX_DIM],
                    hi: [0; MAX_DIM],
                    level,
                };
                for k in 0..config.d {
                    let lo = parent.bbox.lo[k] + if (c >> k) & 1 == 1 { half } else { 0 };
                    bb.lo[k] = lo;
                    bb.hi[k] = lo + half;
                }
                let dof_start = parent.dof_start + c * child_dofs;
                nodes.push(DomainNode {
                    bbox: bb,
                    parent: Some(p),
                    dof_start,
                    dof_end: dof_start + child_dofs,
                });
            }
        }
        level_offsets.push(nodes.len());
    }

    Ok(DomainTree {
        config,
        nodes,
        level_offsets,
    })
}
