//! Hierarchical matrix with keyed random entries and the sequential
//! matvec oracle.
//!
//! Dense blocks store the full submatrix; low-rank blocks store the two
//! factors U (|target| x r) and V (|source| x r) representing U V^T. Block
//! values are a pure function of (config, block path, row, col), so the
//! same matrix content can be regenerated shard by shard elsewhere.

use crate::admissibility::AdmissibilityRule;
use crate::domain_tree::{build_domain_tree, DomainConfig, DomainTree};
use crate::error::{Error, Result};
use crate::keyed::{BlockKey, Factor};
use crate::mat::Mat;
use crate::structure::{BlockKind, BlockStructure};
use serde::Serialize;
use std::sync::Arc;

pub const DEFAULT_DENSIFY_CAP: usize = 4096;

#[derive(Debug, Clone, Copy)]
pub struct HMatrixConfig {
    pub domain: DomainConfig,
    pub rule: AdmissibilityRule,
    /// Low-rank block rank.
    pub r: usize,
    pub seed: u64,
}

impl HMatrixConfig {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.r == 0 {
            return Err(Error::InvalidConfig("rank r must be >= 1".into()));
        }
        Ok(())
    }
}

/// Data held by one block of the built matrix.
#[derive(Debug, Clone)]
pub enum BlockData {
    None,
    Dense(Mat),
    LowRank { u: Mat, v: Mat },
}

#[derive(Debug)]
pub struct HMatrix {
    pub config: HMatrixConfig,
    pub tree: Arc<DomainTree>,
    pub structure: Arc<BlockStructure>,
    /// Aligned with `structure` blocks; `None` for hierarchical entries.
    data: Vec<BlockData>,
}

/// Dense matrix a block materializes to, generated entry by entry.
pub fn generate_dense(key: BlockKey, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |i, j| key.entry(Factor::Dense, i, j))
}

pub fn generate_factor(key: BlockKey, factor: Factor, rows: usize, r: usize) -> Mat {
    Mat::from_fn(rows, r, |i, j| key.entry(factor, i, j))
}

/// Build the full matrix on one address space.
pub fn build_hmatrix(config: HMatrixConfig) -> Result<HMatrix> {
    config.validate()?;
    let tree = Arc::new(build_domain_tree(config.domain)?);
    let structure = BlockStructure::build(&tree, config.rule);
    let data = crate::parallel::map_indexed(structure.len(), |i| {
        let b = structure.block(i);
        let key = structure.key(i, config.seed);
        match b.kind {
            BlockKind::Hier => BlockData::None,
            BlockKind::Dense => {
                let rows = tree.dof_range(b.target).len();
                let cols = tree.dof_range(b.source).len();
                BlockData::Dense(generate_dense(key, rows, cols))
            }
            BlockKind::LowRank => {
                let rows = tree.dof_range(b.target).len();
                let cols = tree.dof_range(b.source).len();
                BlockData::LowRank {
                    u: generate_factor(key, Factor::U, rows, config.r),
                    v: generate_factor(key, Factor::V, cols, config.r),
                }
            }
        }
    });
    Ok(HMatrix {
        config,
        tree,
        structure,
        data,
    })
}

impl HMatrix {
    pub fn n(&self) -> usize {
        self.config.domain.total_dofs()
    }

    pub fn data(&self, idx: usize) -> &BlockData {
        &self.data[idx]
    }

    /// y = K x, accumulating data blocks in canonical pre-order.
    pub fn sequential_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
                context: "sequential_matvec input".into(),
            });
        }
        let mut y = vec![0.0; n];
        for &i in self.structure.data_blocks() {
            let b = self.structure.block(i);
            let tr = self.tree.dof_range(b.target);
            let sr = self.tree.dof_range(b.source);
            match &self.data[i] {
                BlockData::Dense(d) => {
                    d.matvec_acc(&x[sr], 1.0, &mut y[tr]);
                }
                BlockData::LowRank { u, v } => {
                    let z = v.matvec_transpose(&x[sr]);
                    u.matvec_acc(&z, 1.0, &mut y[tr]);
                }
                BlockData::None => unreachable!("data block without data"),
            }
        }
        Ok(y)
    }

    /// Materialize the full N x N matrix (low-rank blocks as U V^T).
    pub fn densify(&self) -> Result<Mat> {
        self.densify_capped(DEFAULT_DENSIFY_CAP)
    }

    pub fn densify_capped(&self, cap: usize) -> Result<Mat> {
        let n = self.n();
        if n > cap {
            return Err(Error::DensifyCap { n, cap });
        }
        let mut full = Mat::zeros(n, n);
        for &i in self.structure.data_blocks() {
            let b = self.structure.block(i);
            let tr = self.tree.dof_range(b.target);
            let sr = self.tree.dof_range(b.source);
            match &self.data[i] {
                BlockData::Dense(d) => {
                    for (li, gi) in tr.clone().enumerate() {
                        for (lj, gj) in sr.clone().enumerate() {
                            full.set(gi, gj, d.at(li, lj));
                        }
                    }
                }
                BlockData::LowRank { u, v } => {
                    for (li, gi) in tr.clone().enumerate() {
                        for (lj, gj) in sr.clone().enumerate() {
                            let mut acc = 0.0;
                            for k in 0..self.config.r {
                                acc += u.at(li, k) * v.at(lj, k);
                            }
                            full.set(gi, gj, acc);
                        }
                    }
                }
                BlockData::None => unreachable!(),
            }
        }
        Ok(full)
    }

    pub fn flop_counts(&self) -> FlopBreakdown {
        flop_counts(&self.tree, &self.structure, self.config.r)
    }

    /// Exact multiply-add count of `sequential_matvec`.
    pub fn flop_count(&self) -> u64 {
        self.flop_counts().total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopBreakdown {
    /// 2 * rows * cols per dense block.
    pub dense: u64,
    /// 2 * r * (rows + cols) per low-rank block.
    pub low_rank: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.dense + self.low_rank
    }
}

pub fn flop_counts(tree: &DomainTree, structure: &BlockStructure, r: usize) -> FlopBreakdown {
    let mut out = FlopBreakdown {
        dense: 0,
        low_rank: 0,
    };
    for &i in structure.data_blocks() {
        let b = structure.block(i);
        let rows = tree.dof_range(b.target).len() as u64;
        let cols = tree.dof_range(b.source).len() as u64;
        match b.kind {
            BlockKind::Dense => out.dense += 2 * rows * cols,
            BlockKind::LowRank => out.low_rank += 2 * r as u64 * (rows + cols),
            BlockKind::Hier => unreachable!(),
        }
    }
    out
}

/// Structure dump entry for the inspect interface.
#[derive(Debug, Serialize)]
pub struct BlockDump {
    pub path: Vec<(u8, u8)>,
    pub kind: BlockKind,
    pub level: usize,
    pub target_lo: Vec<usize>,
    pub target_hi: Vec<usize>,
    pub source_lo: Vec<usize>,
    pub source_hi: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

pub fn dump_structure(tree: &DomainTree, structure: &BlockStructure) -> Vec<BlockDump> {
    let d = tree.config.d;
    structure
        .all_blocks()
        .iter()
        .map(|b| {
            let t = &tree.node(b.target).bbox;
            let s = &tree.node(b.source).bbox;
            BlockDump {
                path: b.path.0.clone(),
                kind: b.kind,
                level: b.level(),
                target_lo: t.lo[..d].to_vec(),
                target_hi: t.hi[..d].to_vec(),
                source_lo: s.lo[..d].to_vec(),
                source_hi: s.hi[..d].to_vec(),
                rows: tree.dof_range(b.target).len(),
                cols: tree.dof_range(b.source).len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::rel_l2;

    fn config(
        d: usize,
        n: usize,
        ls: usize,
        rule: AdmissibilityRule,
        r: usize,
        seed: u64,
    ) -> HMatrixConfig {
        HMatrixConfig {
            domain: DomainConfig::new(d, n, ls).unwrap(),
            rule,
            r,
            seed,
        }
    }

    #[test]
    fn tiny_1d_is_a_2x2_dense_block_matrix() {
        let k = build_hmatrix(config(1, 2, 1, AdmissibilityRule::Weak, 2, 1)).unwrap();
        assert_eq!(k.structure.data_blocks().len(), 4);
        let x = vec![0.3, -0.7];
        let y = k.sequential_matvec(&x).unwrap();
        // Assemble the explicit 2x2 matrix from the four dense blocks.
        let full = k.densify().unwrap();
        let expect = full.matvec(&x);
        assert_eq!(y[0].to_bits(), expect[0].to_bits());
        assert_eq!(y[1].to_bits(), expect[1].to_bits());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let k = build_hmatrix(config(2, 4, 1, AdmissibilityRule::Weak, 4, 9)).unwrap();
        let y = k.sequential_matvec(&vec![0.0; k.n()]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rebuild_is_bitwise_identical() {
        let cfg = config(2, 8, 2, AdmissibilityRule::standard_default(2), 3, 77);
        let a = build_hmatrix(cfg).unwrap();
        let b = build_hmatrix(cfg).unwrap();
        for i in 0..a.structure.len() {
            match (a.data(i), b.data(i)) {
                (BlockData::Dense(x), BlockData::Dense(y)) => assert_eq!(x, y),
                (BlockData::LowRank { u: u1, v: v1 }, BlockData::LowRank { u: u2, v: v2 }) => {
                    assert_eq!(u1, u2);
                    assert_eq!(v1, v2);
                }
                (BlockData::None, BlockData::None) => {}
                _ => panic!("structure mismatch at block {i}"),
            }
        }
    }

    #[test]
    fn matvec_matches_densify_oracle() {
        for seed in 0..10 {
            for (d, n, ls) in [(1, 16, 2), (2, 8, 2)] {
                for rule in [
                    AdmissibilityRule::Weak,
                    AdmissibilityRule::standard_default(d),
                ] {
                    let k = build_hmatrix(config(d, n, ls, rule, 4, seed)).unwrap();
                    let x: Vec<f64> = (0..k.n())
                        .map(|i| crate::keyed::vector_entry(seed, 0, i))
                        .collect();
                    let y = k.sequential_matvec(&x).unwrap();
                    let expect = k.densify().unwrap().matvec(&x);
                    assert!(rel_l2(&y, &expect) <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn densify_cap_enforced() {
        let k = build_hmatrix(config(1, 256, 4, AdmissibilityRule::Weak, 2, 5)).unwrap();
        assert!(k.densify_capped(128).is_err());
        assert!(k.densify_capped(256).is_ok());
    }

    #[test]
    fn densify_rank_one_outer_product() {
        // A hand-built low-rank block with U = e1, V = e1 materializes to a
        // single 1 at the block's (0, 0).
        let mut k = build_hmatrix(config(1, 4, 1, AdmissibilityRule::Weak, 1, 3)).unwrap();
        let idx = k
            .structure
            .data_blocks()
            .iter()
            .copied()
            .find(|&i| k.structure.block(i).kind == BlockKind::LowRank)
            .unwrap();
        let b = k.structure.block(idx);
        let (rows, cols) = (
            k.tree.dof_range(b.target).len(),
            k.tree.dof_range(b.source).len(),
        );
        let (t0, s0) = (
            k.tree.dof_range(b.target).start,
            k.tree.dof_range(b.source).start,
        );
        k.data[idx] = BlockData::LowRank {
            u: Mat::from_fn(rows, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }),
            v: Mat::from_fn(cols, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        };
        let full = k.densify().unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let expect = if i == 0 && j == 0 { 1.0 } else { 0.0 };
                assert_eq!(full.at(t0 + i, s0 + j), expect);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = build_hmatrix(config(1, 4, 1, AdmissibilityRule::Weak, 2, 1)).unwrap();
        assert!(k.sequential_matvec(&[1.0]).is_err());
    }

    #[test]
    fn flop_count_tiny_case() {
        let k = build_hmatrix(config(1, 2, 1, AdmissibilityRule::Weak, 4, 1)).unwrap();
        // Four 1x1 dense blocks, 2 flops each.
        assert_eq!(k.flop_count(), 8);
    }

    #[test]
    fn flop_count_quasilinear_growth() {
        // Calibrate C at the smallest size, then check C * N * log2(N)
        // bounds the count within a factor of two across the sweep.
        let measure = |n: usize| {
            build_hmatrix(config(1, n, 1, AdmissibilityRule::Weak, 4, 1))
                .unwrap()
                .flop_count() as f64
        };
        let c = measure(8) / (8.0 * 3.0);
        for k in 4..=10 {
            let n = 1usize << k;
            let f = measure(n);
            let model = c * n as f64 * (n as f64).log2();
            assert!(f <= 2.0 * model, "n={n}: {f} vs model {model}");
            assert!(f >= model / 2.0, "n={n}: {f} vs model {model}");
        }
    }

    #[test]
    fn doubling_rank_doubles_low_rank_flops() {
        let k4 = build_hmatrix(config(2, 8, 1, AdmissibilityRule::Weak, 4, 1)).unwrap();
        let k8 = build_hmatrix(config(2, 8, 1, AdmissibilityRule::Weak, 8, 1)).unwrap();
        let (f4, f8) = (k4.flop_counts(), k8.flop_counts());
        assert_eq!(f8.low_rank, 2 * f4.low_rank);
        assert_eq!(f8.dense, f4.dense);
    }
}
