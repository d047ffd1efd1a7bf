//! Process groups over the domain tree.
//!
//! The full rank range [0, P) is assigned to the root and split
//! recursively: when a node has at least as many ranks as children, the
//! range is divided into contiguous subranges proportional to child DOFs
//! (largest remainder, ties to the lower-index child); when children
//! outnumber ranks, the children are grouped in canonical order into
//! contiguous parts with balanced DOF totals, one rank per part. A rank
//! assigned alone to a node owns the node's whole subtree; the union of a
//! rank's owned subtrees is its domain slice.
//!
//! Group leaders are the smallest rank of each range, so a leader stays
//! the leader of the first subgroup it joins all the way down.

use crate::domain_tree::{DomainTree, NodeId};
use crate::error::{Error, Result};
use serde::Serialize;
use std::ops::Range;

/// Contiguous rank range [first, last] assigned to a domain node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProcessGroup {
    pub first: usize,
    pub last: usize,
}

impl ProcessGroup {
    pub fn leader(&self) -> usize {
        self.first
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_singleton(&self) -> bool {
        self.first == self.last
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.first <= rank && rank <= self.last
    }

    pub fn ranks(&self) -> Range<usize> {
        self.first..self.last + 1
    }
}

#[derive(Debug)]
pub struct ProcessAssignment {
    pub p: usize,
    /// Group per domain node.
    groups: Vec<ProcessGroup>,
    /// Maximal singly-owned subtree roots per rank, in canonical order.
    owned_roots: Vec<Vec<NodeId>>,
    /// Canonical DOF slice of each rank (union of its owned subtrees).
    owned_dofs: Vec<Range<usize>>,
    /// Chain node per (rank, level) while the rank's group has > 1 rank.
    shared_chain: Vec<Vec<NodeId>>,
    /// Deepest level with a multi-rank group, plus one; 0 when P = 1.
    pub l_p: usize,
    levels: usize,
}

impl ProcessAssignment {
    pub fn group_of(&self, node: NodeId) -> Result<ProcessGroup> {
        self.groups
            .get(node)
            .copied()
            .ok_or(Error::UnknownNode(node))
    }

    pub fn leader_of(&self, node: NodeId) -> usize {
        self.groups[node].leader()
    }

    /// The one group per tree level containing `rank`; below the rank's
    /// ownership level the group is the singleton {rank}.
    pub fn leader_chain(&self, rank: usize) -> Vec<(usize, ProcessGroup)> {
        let mut chain = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            let group = match self.shared_chain[rank].get(level) {
                Some(&node) => self.groups[node],
                None => ProcessGroup {
                    first: rank,
                    last: rank,
                },
            };
            chain.push((level, group));
        }
        chain
    }

    /// Node on the rank's chain at `level` when the group there has more
    /// than one rank (the only levels where tree communication happens).
    pub fn shared_chain_node(&self, rank: usize, level: usize) -> Option<NodeId> {
        self.shared_chain[rank]
            .get(level)
            .copied()
            .filter(|&n| !self.groups[n].is_singleton())
    }

    pub fn owned_roots(&self, rank: usize) -> &[NodeId] {
        &self.owned_roots[rank]
    }

    pub fn owned_dofs(&self, rank: usize) -> Range<usize> {
        self.owned_dofs[rank].clone()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Per-level table of (node, rank range, leader) for debug dumps.
    pub fn level_table(&self, tree: &DomainTree) -> Vec<AssignmentRow> {
        let mut rows = Vec::new();
        for level in 0..self.levels {
            for node in tree.level_nodes(level) {
                let g = self.groups[node];
                rows.push(AssignmentRow {
                    level,
                    node,
                    first: g.first,
                    last: g.last,
                    leader: g.leader(),
                });
            }
        }
        rows
    }
}

#[derive(Debug, Serialize)]
pub struct AssignmentRow {
    pub level: usize,
    pub node: NodeId,
    pub first: usize,
    pub last: usize,
    pub leader: usize,
}

/// Split `count` ranks over children proportionally to `weights` using
/// largest-remainder rounding; ties go to the lower-index child and every
/// positive-weight child receives at least one rank.
fn proportional_split(count: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    debug_assert!(count >= weights.len());
    debug_assert!(weights.iter().all(|&w| w > 0));
    let mut sizes: Vec<usize> = weights.iter().map(|&w| count * w / total).collect();
    let assigned: usize = sizes.iter().sum();
    // Distribute the remainder by descending fractional part, lower index first.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| {
        let rem = count * weights[i] % total;
        (std::cmp::Reverse(rem), i)
    });
    for &i in order.iter().take(count - assigned) {
        sizes[i] += 1;
    }
    // Guarantee one rank per child, taking from the largest subgroup.
    while let Some(zero) = sizes.iter().position(|&s| s == 0) {
        let donor = (0..sizes.len())
            .max_by_key(|&i| (sizes[i], std::cmp::Reverse(i)))
            .unwrap();
        sizes[donor] -= 1;
        sizes[zero] += 1;
    }
    sizes
}

/// Group `weights.len()` children into `parts` contiguous runs with
/// balanced weight totals via greedy prefix sums.
fn contiguous_parts(parts: usize, weights: &[usize]) -> Vec<Range<usize>> {
    let total: usize = weights.iter().sum();
    let n = weights.len();
    debug_assert!(parts <= n);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    let mut cum = 0usize;
    for part in 0..parts {
        let mut end = start;
        let remaining_parts = parts - part - 1;
        while end < n - remaining_parts {
            cum += weights[end];
            end += 1;
            // Cut once this part's prefix reaches its share.
            if cum * parts >= (part + 1) * total {
                break;
            }
        }
        out.push(start..end);
        start = end;
    }
    debug_assert_eq!(start, n);
    out
}

pub fn assign_processes(tree: &DomainTree, p: usize) -> Result<ProcessAssignment> {
    let leaves = tree.leaf_count();
    if p == 0 || p > leaves {
        return Err(Error::ProcessCount { p, leaves });
    }

    let mut groups = vec![ProcessGroup { first: 0, last: 0 }; tree.node_count()];
    let mut owned_roots = vec![Vec::new(); p];
    let mut shared_chain: Vec<Vec<NodeId>> = vec![Vec::new(); p];
    let mut deepest_multi: Option<usize> = None;

    // Stack of (node, rank range) assignments to process.
    let mut stack: Vec<(NodeId, Range<usize>)> = vec![(tree.root(), 0..p)];
    while let Some((node, ranks)) = stack.pop() {
        let g = ranks.len();
        groups[node] = ProcessGroup {
            first: ranks.start,
            last: ranks.end - 1,
        };
        let level = tree.level_of(node);
        if g > 1 {
            deepest_multi = Some(deepest_multi.map_or(level, |d: usize| d.max(level)));
            for rank in ranks.clone() {
                debug_assert_eq!(shared_chain[rank].len(), level);
                shared_chain[rank].push(node);
            }
        }

        if g == 1 {
            // Sole owner: the rank owns this whole subtree.
            let rank = ranks.start;
            owned_roots[rank].push(node);
            let mut sub = vec![node];
            while let Some(nd) = sub.pop() {
                groups[nd] = ProcessGroup {
                    first: rank,
                    last: rank,
                };
                sub.extend(tree.children(nd));
            }
            continue;
        }

        debug_assert!(!tree.is_leaf(node), "multi-rank group on a leaf");
        let children = tree.children(node);
        let weights: Vec<usize> = children
            .iter()
            .map(|&c| tree.node(c).bbox.dof_count(tree.config.d))
            .collect();
        if children.len() <= g {
            let sizes = proportional_split(g, &weights);
            let mut start = ranks.start;
            // Push in reverse so the stack pops children in canonical order.
            let assignments: Vec<_> = children
                .iter()
                .zip(&sizes)
                .map(|(&c, &s)| {
                    let r = start..start + s;
                    start += s;
                    (c, r)
                })
                .collect();
            debug_assert_eq!(start, ranks.end);
            stack.extend(assignments.into_iter().rev());
        } else {
            let parts = contiguous_parts(g, &weights);
            for (i, part) in parts.iter().enumerate().rev() {
                let rank = ranks.start + i;
                for &c in children[part.clone()].iter().rev() {
                    stack.push((c, rank..rank + 1));
                }
            }
        }
    }

    // Owned roots were discovered in stack order; make them canonical and
    // derive each rank's DOF slice.
    let mut owned_dofs = Vec::with_capacity(p);
    for roots in &mut owned_roots {
        roots.sort_unstable();
        let start = tree.dof_range(roots[0]).start;
        let end = tree.dof_range(*roots.last().unwrap()).end;
        // Contiguity of the union.
        let mut cursor = start;
        for &nd in roots.iter() {
            debug_assert_eq!(tree.dof_range(nd).start, cursor);
            cursor = tree.dof_range(nd).end;
        }
        debug_assert_eq!(cursor, end);
        owned_dofs.push(start..end);
    }

    Ok(ProcessAssignment {
        p,
        groups,
        owned_roots,
        owned_dofs,
        shared_chain,
        l_p: deepest_multi.map_or(0, |d| d + 1),
        levels: tree.levels(),
    })
}
