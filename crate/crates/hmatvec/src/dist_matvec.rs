//! Five-step distributed matvec over the simulated network.
//!
//! 1. Source-side local products per block (no communication).
//! 2. Tree-reduction of concatenated per-level payload arrays toward
//!    source group leaders, deepest level first; a round at level l moves
//!    the prefix covering levels 1..=l, so deeper rounds piggyback the
//!    shallower partial sums of ranks that then drop out.
//! 3. One packed message per (source leader, target leader) pair;
//!    same-rank pairs are local copies.
//! 4. Tree-broadcast of the prefixes back down the target groups,
//!    shallowest level first; subgroup leaders append their own chunk
//!    before forwarding.
//! 5. Target-side accumulation into y, in block pre-order.
//!
//! Rounds within a level run a binomial tree over the collective
//! participants (subgroup leaders), leader at index 0. Every send, its
//! payload length, and the accumulation order are pure functions of the
//! plan, so two runs are bitwise identical for any worker count.

use crate::distribution::{
    build_all_stores, DistContext, PayloadDest, RankLocalStore, SourceShard, TargetShard,
};
use crate::domain_tree::build_domain_tree;
use crate::error::{Error, Result};
use crate::hmatrix::HMatrixConfig;
use crate::process_tree::{assign_processes, ProcessAssignment};
use crate::simnet::{self, CostLedger, Message, RankProgram, RunOptions, StepOutput, Tag};
use crate::structure::BlockStructure;
use serde::Serialize;
use std::sync::Arc;

/// Vector distributed in block-row fashion: rank p owns the slice over
/// its singly-owned domain; concatenation in rank order is the full
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedVector {
    pub slices: Vec<Vec<f64>>,
}

impl DistributedVector {
    pub fn scatter(assignment: &ProcessAssignment, x: &[f64]) -> Self {
        let slices = (0..assignment.p)
            .map(|rank| x[assignment.owned_dofs(rank)].to_vec())
            .collect();
        DistributedVector { slices }
    }

    /// Keyed random vector, identical to scattering the keyed full vector.
    pub fn random(assignment: &ProcessAssignment, seed: u64, trial: u64) -> Self {
        let slices = (0..assignment.p)
            .map(|rank| {
                assignment
                    .owned_dofs(rank)
                    .map(|i| crate::keyed::vector_entry(seed, trial, i))
                    .collect()
            })
            .collect();
        DistributedVector { slices }
    }

    pub fn gather(&self) -> Vec<f64> {
        self.slices.iter().flatten().copied().collect()
    }

    pub fn zeros_like(&self) -> Self {
        DistributedVector {
            slices: self.slices.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }
}

/// Global superstep layout shared by all ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reduce { level: usize, stage: usize },
    Transfer,
    Bcast { level: usize, stage: usize },
}

fn ceil_log2(m: usize) -> usize {
    if m <= 1 {
        0
    } else {
        (usize::BITS - (m - 1).leading_zeros()) as usize
    }
}

#[allow(clippy::needless_range_loop)]
pub fn build_phases(ctx: &DistContext) -> Vec<Phase> {
    let deepest = ctx.reduce_levels;
    let stages: Vec<usize> = (0..=deepest)
        .map(|l| ceil_log2(ctx.max_participants[l]))
        .collect();
    let mut phases = Vec::new();
    for level in (1..=deepest).rev() {
        for stage in 0..stages[level] {
            phases.push(Phase::Reduce { level, stage });
        }
    }
    phases.push(Phase::Transfer);
    for level in 1..=deepest {
        for stage in (0..stages[level]).rev() {
            phases.push(Phase::Bcast { level, stage });
        }
    }
    phases
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopTally {
    /// Multiply-adds of source-side local products.
    pub step1: u64,
    /// Multiply-adds of target-side accumulation.
    pub step5: u64,
    /// Bookkeeping additions: reduction sums and payload adds into y.
    pub aux: u64,
}

impl FlopTally {
    pub fn compute(&self) -> u64 {
        self.step1 + self.step5
    }

    pub fn total(&self) -> u64 {
        self.step1 + self.step5 + self.aux
    }
}

pub struct RankOutput {
    pub rank: usize,
    pub y: Vec<f64>,
    pub flops: FlopTally,
    pub arena: Option<Vec<f64>>,
}

struct MatvecProgram {
    rank: usize,
    stores: Arc<Vec<RankLocalStore>>,
    phases: Arc<Vec<Phase>>,
    x: Vec<f64>,
    y: Vec<f64>,
    alpha: f64,
    arena: Vec<f64>,
    reduce_buf: Vec<f64>,
    /// prefix_end[l] = end of the level-l chunk within the buffers;
    /// a round at level l moves buf[0..prefix_end[l]].
    reduce_prefix_end: Vec<usize>,
    bcast_buf: Vec<f64>,
    bcast_prefix_end: Vec<usize>,
    flops: FlopTally,
    capture: bool,
}

impl MatvecProgram {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rank: usize,
        stores: Arc<Vec<RankLocalStore>>,
        phases: Arc<Vec<Phase>>,
        x: Vec<f64>,
        alpha: f64,
        beta: f64,
        y_in: Option<&[f64]>,
        capture: bool,
    ) -> Self {
        let store = &stores[rank];
        let levels = store.reduce_chunks.len();
        let mut reduce_prefix_end = vec![0usize; levels];
        let mut bcast_prefix_end = vec![0usize; levels];
        let mut racc = 0;
        let mut bacc = 0;
        for level in 0..levels {
            racc += store.reduce_chunks[level].total_len;
            bacc += store.bcast_chunks[level].total_len;
            reduce_prefix_end[level] = racc;
            bcast_prefix_end[level] = bacc;
        }
        let mut flops = FlopTally::default();
        let y = match y_in {
            Some(prev) => {
                flops.aux += prev.len() as u64;
                prev.iter().map(|v| beta * v).collect()
            }
            None => vec![0.0; x.len()],
        };
        MatvecProgram {
            rank,
            arena: vec![0.0; stores[rank].arena_len],
            reduce_buf: vec![0.0; racc],
            bcast_buf: vec![0.0; bacc],
            stores,
            phases,
            x,
            y,
            alpha,
            reduce_prefix_end,
            bcast_prefix_end,
            flops,
            capture,
        }
    }

    fn store(&self) -> &RankLocalStore {
        &self.stores[self.rank]
    }

    fn run_step1(&mut self) {
        let store = &self.stores[self.rank];
        for task in &store.step1 {
            let x = &self.x[task.x_offset..task.x_offset + task.x_len];
            let z = match &task.shard {
                SourceShard::VRows { mat, .. } => {
                    self.flops.step1 += 2 * mat.len() as u64;
                    mat.matvec_transpose(x)
                }
                SourceShard::DenseFull { mat } => {
                    self.flops.step1 += 2 * mat.len() as u64;
                    mat.matvec(x)
                }
                SourceShard::DenseTransposeRows { mat, .. } => {
                    self.flops.step1 += 2 * mat.len() as u64;
                    mat.matvec_transpose(x)
                }
                SourceShard::PassThrough => x.to_vec(),
            };
            match task.dest {
                PayloadDest::Chunk { level, offset } => {
                    let base = self.reduce_prefix_end[level - 1];
                    self.reduce_buf[base + offset..base + offset + z.len()].copy_from_slice(&z);
                }
                PayloadDest::Arena { offset } => {
                    self.arena[offset..offset + z.len()].copy_from_slice(&z);
                }
            }
        }
    }

    /// Copy completed reduce sums into arena slots for every level this
    /// rank leads.
    fn unpack_reduce_chunks(&mut self) {
        let store = &self.stores[self.rank];
        for level in 1..store.reduce_chunks.len() {
            let Some(role) = &store.roles[level] else {
                continue;
            };
            if role.my_index != 0 {
                continue;
            }
            let chunk = &store.reduce_chunks[level];
            let mut cursor = self.reduce_prefix_end[level - 1];
            for &(offset, len) in &chunk.slots {
                for k in 0..len {
                    self.arena[offset + k] = self.reduce_buf[cursor + k];
                }
                cursor += len;
            }
        }
    }

    fn run_step5(&mut self) {
        let store = &self.stores[self.rank];
        for task in &store.step5 {
            let z = &self.arena[task.slot.0..task.slot.0 + task.slot.1];
            let y = &mut self.y[task.y_offset..task.y_offset + task.y_len];
            match &task.shard {
                TargetShard::URows { mat, .. } | TargetShard::DenseRows { mat, .. } => {
                    self.flops.step5 += 2 * mat.len() as u64;
                    mat.matvec_acc(z, self.alpha, y);
                }
                TargetShard::AddPayload => {
                    self.flops.aux += z.len() as u64;
                    for (yi, zi) in y.iter_mut().zip(z) {
                        *yi += self.alpha * zi;
                    }
                }
            }
        }
    }

    fn absorb(&mut self, phase: Phase, inbox: &[Message], round: usize) -> Result<()> {
        let expect_err = |detail: String| Error::ScheduleMismatch {
            rank: self.rank,
            round,
            detail,
        };
        match phase {
            Phase::Reduce { level, stage } => {
                let expected = self.reduce_recv_peer(level, stage);
                match (expected, inbox.len()) {
                    (None, 0) => Ok(()),
                    (Some((peer, len)), 1) => {
                        let msg = &inbox[0];
                        if msg.src != peer || msg.payload.len() != len {
                            return Err(expect_err(format!(
                                "reduce level {level} stage {stage}: got {} scalars from {}, expected {len} from {peer}",
                                msg.payload.len(),
                                msg.src
                            )));
                        }
                        for (acc, v) in self.reduce_buf[..len].iter_mut().zip(&msg.payload) {
                            *acc += v;
                        }
                        self.flops.aux += len as u64;
                        Ok(())
                    }
                    (expected, n) => Err(expect_err(format!(
                        "reduce level {level} stage {stage}: {n} messages, expected {expected:?}"
                    ))),
                }
            }
            Phase::Transfer => {
                let store = &self.stores[self.rank];
                if inbox.len() != store.peer_in.len() {
                    return Err(expect_err(format!(
                        "transfer: {} messages, expected {}",
                        inbox.len(),
                        store.peer_in.len()
                    )));
                }
                // Inbox is sorted by sender; peer_in likewise.
                for (msg, transfer) in inbox.iter().zip(&store.peer_in) {
                    if msg.src != transfer.peer || msg.payload.len() != transfer.total_len {
                        return Err(expect_err(format!(
                            "transfer: got {} scalars from {}, expected {} from {}",
                            msg.payload.len(),
                            msg.src,
                            transfer.total_len,
                            transfer.peer
                        )));
                    }
                    let mut cursor = 0;
                    for &(offset, len) in &transfer.slots {
                        self.arena[offset..offset + len]
                            .copy_from_slice(&msg.payload[cursor..cursor + len]);
                        cursor += len;
                    }
                }
                // Leaders stage their broadcast chunks now that every
                // payload has arrived.
                for level in 1..store.bcast_chunks.len() {
                    let Some(role) = &store.roles[level] else {
                        continue;
                    };
                    if role.my_index != 0 {
                        continue;
                    }
                    let chunk = &store.bcast_chunks[level];
                    let mut cursor = self.bcast_prefix_end[level - 1];
                    for &(offset, len) in &chunk.slots {
                        for k in 0..len {
                            self.bcast_buf[cursor + k] = self.arena[offset + k];
                        }
                        cursor += len;
                    }
                }
                Ok(())
            }
            Phase::Bcast { level, stage } => {
                let expected = self.bcast_recv_peer(level, stage);
                match (expected, inbox.len()) {
                    (None, 0) => Ok(()),
                    (Some((peer, len)), 1) => {
                        let msg = &inbox[0];
                        if msg.src != peer || msg.payload.len() != len {
                            return Err(expect_err(format!(
                                "bcast level {level} stage {stage}: got {} scalars from {}, expected {len} from {peer}",
                                msg.payload.len(),
                                msg.src
                            )));
                        }
                        self.bcast_buf[..len].copy_from_slice(&msg.payload);
                        Ok(())
                    }
                    (expected, n) => Err(expect_err(format!(
                        "bcast level {level} stage {stage}: {n} messages, expected {expected:?}"
                    ))),
                }
            }
        }
    }

    fn emit(&mut self, phase: Phase) -> Vec<Message> {
        match phase {
            Phase::Reduce { level, stage } => {
                let Some((peer, len)) = self.reduce_send_peer(level, stage) else {
                    return vec![];
                };
                if len == 0 {
                    return vec![];
                }
                vec![Message {
                    src: self.rank,
                    dst: peer,
                    tag: Tag::new(2, level as u32, stage as u64),
                    payload: self.reduce_buf[..len].to_vec(),
                }]
            }
            Phase::Transfer => {
                self.unpack_reduce_chunks();
                let store = &self.stores[self.rank];
                let mut out = Vec::with_capacity(store.peer_out.len());
                for transfer in &store.peer_out {
                    let mut payload = Vec::with_capacity(transfer.total_len);
                    for &(offset, len) in &transfer.slots {
                        payload.extend_from_slice(&self.arena[offset..offset + len]);
                    }
                    out.push(Message {
                        src: self.rank,
                        dst: transfer.peer,
                        tag: Tag::new(3, 0, 0),
                        payload,
                    });
                }
                out
            }
            Phase::Bcast { level, stage } => {
                let Some((peer, len)) = self.bcast_send_peer(level, stage) else {
                    return vec![];
                };
                if len == 0 {
                    return vec![];
                }
                vec![Message {
                    src: self.rank,
                    dst: peer,
                    tag: Tag::new(4, level as u32, stage as u64),
                    payload: self.bcast_buf[..len].to_vec(),
                }]
            }
        }
    }

    /// In a reduce round the odd participant of each distance-2^stage
    /// pair sends its prefix to the even one.
    fn reduce_send_peer(&self, level: usize, stage: usize) -> Option<(usize, usize)> {
        let role = self.store().roles[level].as_ref()?;
        let i = role.my_index;
        let half = 1 << stage;
        if i % (half << 1) == half {
            Some((role.participants[i - half], self.reduce_prefix_end[level]))
        } else {
            None
        }
    }

    fn reduce_recv_peer(&self, level: usize, stage: usize) -> Option<(usize, usize)> {
        let role = self.store().roles[level].as_ref()?;
        let i = role.my_index;
        let half = 1 << stage;
        if i % (half << 1) == 0 && i + half < role.participants.len() {
            let len = self.reduce_prefix_end[level];
            if len == 0 {
                return None;
            }
            Some((role.participants[i + half], len))
        } else {
            None
        }
    }

    fn bcast_send_peer(&self, level: usize, stage: usize) -> Option<(usize, usize)> {
        let role = self.store().roles[level].as_ref()?;
        let i = role.my_index;
        let half = 1 << stage;
        if i % (half << 1) == 0 && i + half < role.participants.len() {
            Some((role.participants[i + half], self.bcast_prefix_end[level]))
        } else {
            None
        }
    }

    fn bcast_recv_peer(&self, level: usize, stage: usize) -> Option<(usize, usize)> {
        let role = self.store().roles[level].as_ref()?;
        let i = role.my_index;
        let half = 1 << stage;
        if i % (half << 1) == half {
            let len = self.bcast_prefix_end[level];
            if len == 0 {
                return None;
            }
            Some((role.participants[i - half], len))
        } else {
            None
        }
    }

    /// Write received broadcast chunks into arena slots. Level leaders
    /// already hold theirs; every other member got the chunk inside some
    /// round's prefix, whether or not it took part in that level's
    /// collective itself.
    fn unpack_bcast_chunks(&mut self) {
        let store = &self.stores[self.rank];
        for level in 1..store.bcast_chunks.len() {
            let chunk = &store.bcast_chunks[level];
            if chunk.total_len == 0 {
                continue;
            }
            let leads = matches!(&store.roles[level], Some(role) if role.my_index == 0);
            if leads {
                continue;
            }
            let mut cursor = self.bcast_prefix_end[level - 1];
            for &(offset, len) in &chunk.slots {
                for k in 0..len {
                    self.arena[offset + k] = self.bcast_buf[cursor + k];
                }
                cursor += len;
            }
        }
    }
}

impl RankProgram for MatvecProgram {
    fn step(&mut self, round: usize, inbox: &[Message]) -> Result<StepOutput> {
        if round == 0 {
            if !inbox.is_empty() {
                return Err(Error::ScheduleMismatch {
                    rank: self.rank,
                    round,
                    detail: "messages before the first round".into(),
                });
            }
            self.run_step1();
        } else {
            self.absorb(self.phases[round - 1], inbox, round)?;
        }
        if round < self.phases.len() {
            Ok(StepOutput {
                sends: self.emit(self.phases[round]),
                done: false,
            })
        } else {
            self.unpack_bcast_chunks();
            self.run_step5();
            Ok(StepOutput {
                sends: vec![],
                done: true,
            })
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatvecOptions {
    pub alpha: f64,
    pub beta: f64,
    pub record_log: bool,
    pub capture_payloads: bool,
}

impl Default for MatvecOptions {
    fn default() -> Self {
        MatvecOptions {
            alpha: 1.0,
            beta: 0.0,
            record_log: false,
            capture_payloads: false,
        }
    }
}

pub struct MatvecRun {
    pub y: DistributedVector,
    pub ledger: CostLedger,
    pub flops: Vec<FlopTally>,
    pub arenas: Vec<Option<Vec<f64>>>,
    pub log: Vec<(usize, usize, Tag, usize)>,
}

/// A sharded H-matrix ready for repeated distributed matvecs.
pub struct DistributedHMatrix {
    pub ctx: Arc<DistContext>,
    pub stores: Arc<Vec<RankLocalStore>>,
    pub phases: Arc<Vec<Phase>>,
}

impl DistributedHMatrix {
    pub fn build(config: HMatrixConfig, p: usize) -> Result<Self> {
        config.validate()?;
        let tree = Arc::new(build_domain_tree(config.domain)?);
        let structure = BlockStructure::build(&tree, config.rule);
        let assignment = Arc::new(assign_processes(&tree, p)?);
        let ctx = Arc::new(DistContext::new(config, tree, structure, assignment)?);
        let stores = Arc::new(build_all_stores(&ctx));
        let phases = Arc::new(build_phases(&ctx));
        Ok(DistributedHMatrix {
            ctx,
            stores,
            phases,
        })
    }

    pub fn p(&self) -> usize {
        self.ctx.p()
    }

    pub fn assignment(&self) -> &ProcessAssignment {
        &self.ctx.assignment
    }

    /// y = K x.
    pub fn matvec(&self, x: &DistributedVector) -> Result<MatvecRun> {
        self.run(x, None, MatvecOptions::default())
    }

    /// y = alpha K x + beta y_in.
    pub fn gemv(
        &self,
        alpha: f64,
        x: &DistributedVector,
        beta: f64,
        y_in: &DistributedVector,
    ) -> Result<MatvecRun> {
        self.run(
            x,
            Some(y_in),
            MatvecOptions {
                alpha,
                beta,
                ..Default::default()
            },
        )
    }

    pub fn run(
        &self,
        x: &DistributedVector,
        y_in: Option<&DistributedVector>,
        opts: MatvecOptions,
    ) -> Result<MatvecRun> {
        let p = self.p();
        if x.slices.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: x.slices.len(),
                context: "distributed vector slices".into(),
            });
        }
        for rank in 0..p {
            let expect = self.ctx.assignment.owned_dofs(rank).len();
            if x.slices[rank].len() != expect {
                return Err(Error::DimensionMismatch {
                    expected: expect,
                    got: x.slices[rank].len(),
                    context: format!("x slice of rank {rank}"),
                });
            }
        }
        let programs: Vec<MatvecProgram> = (0..p)
            .map(|rank| {
                MatvecProgram::new(
                    rank,
                    Arc::clone(&self.stores),
                    Arc::clone(&self.phases),
                    x.slices[rank].clone(),
                    opts.alpha,
                    opts.beta,
                    y_in.map(|y| y.slices[rank].as_slice()),
                    opts.capture_payloads,
                )
            })
            .collect();
        let report = simnet::run(
            programs,
            |prog| RankOutput {
                rank: prog.rank,
                arena: prog.capture.then(|| prog.arena.clone()),
                y: prog.y,
                flops: prog.flops,
            },
            RunOptions {
                record_log: opts.record_log,
                ..Default::default()
            },
        )?;
        let mut y_slices = vec![Vec::new(); p];
        let mut flops = vec![FlopTally::default(); p];
        let mut arenas = vec![None; p];
        for out in report.outputs {
            flops[out.rank] = out.flops;
            arenas[out.rank] = out.arena;
            y_slices[out.rank] = out.y;
        }
        Ok(MatvecRun {
            y: DistributedVector { slices: y_slices },
            ledger: report.ledger,
            flops,
            arenas,
            log: report.log,
        })
    }
}
