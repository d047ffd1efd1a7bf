//! Block structure of the hierarchical matrix.
//!
//! A single recursion classifies every (target, source) node pair in the
//! order dense / low-rank / hierarchical and records the result as a flat
//! pre-order list. The list index of a block is its canonical pre-order
//! rank; traversals, packing orders, and accumulation orders all derive
//! from it. Hierarchical blocks carry no data and exist for recursion.

use crate::admissibility::{is_admissible, AdmissibilityRule};
use crate::domain_tree::{DomainTree, NodeId};
use crate::keyed::BlockKey;
use serde::Serialize;
use std::sync::Arc;

/// Path of (target-child, source-child) steps from the root pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct BlockPath(pub Vec<(u8, u8)>);

impl BlockPath {
    pub fn level(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockKind {
    Dense,
    LowRank,
    Hier,
}

#[derive(Debug, Clone)]
pub struct BlockInfo {
    pub path: BlockPath,
    pub kind: BlockKind,
    pub target: NodeId,
    pub source: NodeId,
}

impl BlockInfo {
    pub fn level(&self) -> usize {
        self.path.level()
    }

    pub fn is_data(&self) -> bool {
        self.kind != BlockKind::Hier
    }
}

/// Flat pre-order block list plus node-indexed lookups.
#[derive(Debug)]
pub struct BlockStructure {
    pub rule: AdmissibilityRule,
    blocks: Vec<BlockInfo>,
    /// Data block indices, in pre-order.
    data_blocks: Vec<usize>,
    /// Data block indices grouped by level, pre-order within each level.
    data_by_level: Vec<Vec<usize>>,
    /// Data block indices by target node / source node, pre-order.
    by_target: Vec<Vec<usize>>,
    by_source: Vec<Vec<usize>>,
}

impl BlockStructure {
    pub fn build(tree: &DomainTree, rule: AdmissibilityRule) -> Arc<Self> {
        let mut blocks = Vec::new();
        let mut stack_path: Vec<(u8, u8)> = Vec::new();
        classify_rec(
            tree,
            rule,
            tree.root(),
            tree.root(),
            &mut stack_path,
            &mut blocks,
        );

        let mut data_blocks = Vec::new();
        let mut data_by_level = vec![Vec::new(); tree.levels()];
        let mut by_target = vec![Vec::new(); tree.node_count()];
        let mut by_source = vec![Vec::new(); tree.node_count()];
        for (i, b) in blocks.iter().enumerate() {
            if b.is_data() {
                data_blocks.push(i);
                data_by_level[b.level()].push(i);
                by_target[b.target].push(i);
                by_source[b.source].push(i);
            }
        }
        Arc::new(BlockStructure {
            rule,
            blocks,
            data_blocks,
            data_by_level,
            by_target,
            by_source,
        })
    }

    pub fn block(&self, idx: usize) -> &BlockInfo {
        &self.blocks[idx]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn all_blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    /// Pre-order indices of dense and low-rank blocks.
    pub fn data_blocks(&self) -> &[usize] {
        &self.data_blocks
    }

    pub fn data_blocks_at_level(&self, level: usize) -> &[usize] {
        &self.data_by_level[level]
    }

    pub fn data_blocks_with_target(&self, node: NodeId) -> &[usize] {
        &self.by_target[node]
    }

    pub fn data_blocks_with_source(&self, node: NodeId) -> &[usize] {
        &self.by_source[node]
    }

    pub fn key(&self, idx: usize, seed: u64) -> BlockKey {
        BlockKey::new(seed, &self.blocks[idx].path.0)
    }

    pub fn count_kind(&self, kind: BlockKind) -> usize {
        self.blocks.iter().filter(|b| b.kind == kind).count()
    }
}

fn classify_rec(
    tree: &DomainTree,
    rule: AdmissibilityRule,
    target: NodeId,
    source: NodeId,
    path: &mut Vec<(u8, u8)>,
    out: &mut Vec<BlockInfo>,
) {
    let kind = classify(tree, rule, target, source);
    out.push(BlockInfo {
        path: BlockPath(path.clone()),
        kind,
        target,
        source,
    });
    if kind == BlockKind::Hier {
        for tc in 0..tree.config.fanout() {
            let t = tree.child(target, tc).expect("hier block has children");
            for sc in 0..tree.config.fanout() {
                let s = tree.child(source, sc).expect("hier block has children");
                path.push((tc as u8, sc as u8));
                classify_rec(tree, rule, t, s, path, out);
                path.pop();
            }
        }
    }
}

/// Classification per the three ordered conditions: leaf pair is dense,
/// admissible pair is low-rank, anything else recurses.
pub fn classify(
    tree: &DomainTree,
    rule: AdmissibilityRule,
    target: NodeId,
    source: NodeId,
) -> BlockKind {
    if tree.is_leaf(target) || tree.is_leaf(source) {
        BlockKind::Dense
    } else if is_admissible(
        rule,
        &tree.node(target).bbox,
        &tree.node(source).bbox,
        &tree.config,
    ) {
        BlockKind::LowRank
    } else {
        BlockKind::Hier
    }
}
