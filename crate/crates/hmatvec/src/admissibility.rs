//! Admissibility of (target, source) domain pairs.
//!
//! Weak admissibility asks for disjoint index sets. Standard admissibility
//! compares the smaller diameter against the scaled distance between the
//! closed continuous boxes, so boxes sharing an edge or corner are never
//! standard-admissible.

use crate::domain_tree::{box_geometry, DomainConfig, DomainTree, IndexBox, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdmissibilityRule {
    Weak,
    /// min(diam, diam) <= rho * dist.
    Standard {
        rho: f64,
    },
}

impl AdmissibilityRule {
    /// Standard rule with the default buffer constant rho = sqrt(d).
    pub fn standard_default(d: usize) -> Self {
        AdmissibilityRule::Standard {
            rho: (d as f64).sqrt(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AdmissibilityRule::Weak => "weak",
            AdmissibilityRule::Standard { .. } => "standard",
        }
    }
}

pub fn is_admissible(
    rule: AdmissibilityRule,
    target: &IndexBox,
    source: &IndexBox,
    config: &DomainConfig,
) -> bool {
    match rule {
        AdmissibilityRule::Weak => !target.intersects(source, config.d),
        AdmissibilityRule::Standard { rho } => {
            let dt = box_geometry(target, config).0;
            let ds = box_geometry(source, config).0;
            dt.min(ds) <= rho * target.distance(source, config)
        }
    }
}

/// Number of admissible pairs among the children of two non-leaf nodes.
pub fn count_admissible_child_pairs(
    rule: AdmissibilityRule,
    tree: &DomainTree,
    parent_target: NodeId,
    parent_source: NodeId,
) -> Result<usize> {
    if tree.is_leaf(parent_target) {
        return Err(Error::LeafNode(parent_target));
    }
    if tree.is_leaf(parent_source) {
        return Err(Error::LeafNode(parent_source));
    }
    let mut count = 0;
    for t in tree.children(parent_target) {
        for s in tree.children(parent_source) {
            if is_admissible(rule, &tree.node(t).bbox, &tree.node(s).bbox, &tree.config) {
                count += 1;
            }
        }
    }
    Ok(count)
}
