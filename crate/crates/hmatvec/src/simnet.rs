//! Deterministic in-process message-passing runtime.
//!
//! P logical ranks run as superstep programs: each round the engine calls
//! every rank with the messages addressed to it (sorted by sender and
//! tag), collects the messages it emits, and delivers them next round.
//! A rank's step is a pure function of its state and inbox, so outputs
//! and cost counters do not depend on how many workers execute the ranks.
//!
//! Messages are matched by (src, dst, tag); a duplicate key within one
//! round or a message left undelivered when its receiver finished is an
//! error.

use crate::error::{Error, Result};
use serde::Serialize;

/// (step id, level, canonical pair id) message tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Tag {
    pub step: u8,
    pub level: u32,
    pub pair: u64,
}

impl Tag {
    pub fn new(step: u8, level: u32, pair: u64) -> Self {
        Tag { step, level, pair }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step{}/level{}/pair{}", self.step, self.level, self.pair)
    }
}

#[derive(Debug, Clone)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub tag: Tag,
    pub payload: Vec<f64>,
}

/// What a rank did in one superstep.
pub struct StepOutput {
    pub sends: Vec<Message>,
    pub done: bool,
}

/// A rank's superstep program. `round` counts from zero; the inbox of
/// round k holds exactly the messages sent to this rank in round k-1.
pub trait RankProgram: Send {
    fn step(&mut self, round: usize, inbox: &[Message]) -> Result<StepOutput>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub messages_sent: u64,
    pub messages_received: u64,
    pub scalars_sent: u64,
    pub scalars_received: u64,
}

impl Counters {
    fn add_send(&mut self, scalars: u64) {
        self.messages_sent += 1;
        self.scalars_sent += scalars;
    }

    fn add_recv(&mut self, scalars: u64) {
        self.messages_received += 1;
        self.scalars_received += scalars;
    }

    pub fn messages(&self) -> u64 {
        self.messages_sent + self.messages_received
    }

    pub fn scalars(&self) -> u64 {
        self.scalars_sent + self.scalars_received
    }
}

pub const STEP_IDS: [u8; 3] = [2, 3, 4];

/// Per-rank, per-step communication counters.
#[derive(Debug, Clone, Serialize)]
pub struct CostLedger {
    pub per_rank: Vec<RankCounters>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RankCounters {
    pub total: Counters,
    /// Indexed by pipeline step id (0..=5); only 2, 3, 4 carry traffic.
    pub per_step: [Counters; 6],
}

impl CostLedger {
    fn new(p: usize) -> Self {
        CostLedger {
            per_rank: vec![RankCounters::default(); p],
        }
    }

    pub fn p(&self) -> usize {
        self.per_rank.len()
    }

    pub fn rank(&self, r: usize) -> &RankCounters {
        &self.per_rank[r]
    }

    pub fn total_sent(&self) -> (u64, u64) {
        let msgs = self.per_rank.iter().map(|r| r.total.messages_sent).sum();
        let scalars = self.per_rank.iter().map(|r| r.total.scalars_sent).sum();
        (msgs, scalars)
    }

    pub fn total_received(&self) -> (u64, u64) {
        let msgs = self
            .per_rank
            .iter()
            .map(|r| r.total.messages_received)
            .sum();
        let scalars = self.per_rank.iter().map(|r| r.total.scalars_received).sum();
        (msgs, scalars)
    }

    /// Max over ranks of (messages, scalars) seen in one step.
    pub fn max_rank_step(&self, step: u8) -> (u64, u64) {
        let msgs = self
            .per_rank
            .iter()
            .map(|r| r.per_step[step as usize].messages())
            .max()
            .unwrap_or(0);
        let scalars = self
            .per_rank
            .iter()
            .map(|r| r.per_step[step as usize].scalars())
            .max()
            .unwrap_or(0);
        (msgs, scalars)
    }

    /// alpha * messages + beta * scalars for one rank, over all steps.
    pub fn rank_cost(&self, rank: usize, alpha: f64, beta: f64) -> f64 {
        let c = &self.per_rank[rank].total;
        alpha * c.messages() as f64 + beta * c.scalars() as f64
    }

    /// Per-rank cost per step id plus the total.
    pub fn rank_cost_breakdown(&self, rank: usize, alpha: f64, beta: f64) -> Vec<(u8, f64)> {
        let mut out: Vec<(u8, f64)> = STEP_IDS
            .iter()
            .map(|&s| {
                let c = &self.per_rank[rank].per_step[s as usize];
                (s, alpha * c.messages() as f64 + beta * c.scalars() as f64)
            })
            .collect();
        out.push((0, self.rank_cost(rank, alpha, beta)));
        out
    }

    /// CSV export: rank, step, messages, scalars.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,step,messages,scalars\n");
        for (rank, rc) in self.per_rank.iter().enumerate() {
            for &s in &STEP_IDS {
                let c = &rc.per_step[s as usize];
                out.push_str(&format!("{rank},{s},{},{}\n", c.messages(), c.scalars()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Abort after this many rounds without completion.
    pub max_rounds: usize,
    /// Record every delivered message (src, dst, tag, len) for tests.
    pub record_log: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_rounds: 10_000,
            record_log: false,
        }
    }
}

#[derive(Debug)]
pub struct RunReport<O> {
    pub outputs: Vec<O>,
    pub ledger: CostLedger,
    /// Delivered messages in canonical order, when recording was on.
    pub log: Vec<(usize, usize, Tag, usize)>,
}

/// Drive P rank programs to completion and return their outputs together
/// with the communication ledger.
pub fn run<P, O>(
    mut programs: Vec<P>,
    finish: impl Fn(P) -> O + Sync + Send,
    opts: RunOptions,
) -> Result<RunReport<O>>
where
    P: RankProgram,
    O: Send,
{
    let p = programs.len();
    let mut ledger = CostLedger::new(p);
    let mut log = Vec::new();
    let mut inboxes: Vec<Vec<Message>> = (0..p).map(|_| Vec::new()).collect();
    let mut done = vec![false; p];
    let mut round = 0usize;

    loop {
        if round >= opts.max_rounds {
            return Err(Error::Deadlock(format!(
                "no completion after {} rounds",
                opts.max_rounds
            )));
        }

        let inputs: Vec<Vec<Message>> = inboxes.iter_mut().map(std::mem::take).collect();
        let work: Vec<(usize, &mut P, Vec<Message>)> = programs
            .iter_mut()
            .zip(inputs)
            .enumerate()
            .filter(|(rank, _)| !done[*rank])
            .map(|(rank, (prog, inbox))| (rank, prog, inbox))
            .collect();
        let results: Vec<(usize, Result<StepOutput>)> =
            crate::parallel::map_vec(work, |(rank, prog, inbox)| (rank, prog.step(round, &inbox)));

        // Gather sends and completion flags in rank order.
        let mut seen = std::collections::HashSet::new();
        for (rank, res) in results {
            let out = res?;
            if out.done {
                done[rank] = true;
            }
            for msg in out.sends {
                if msg.src != rank {
                    return Err(Error::ScheduleMismatch {
                        rank,
                        round,
                        detail: format!("message claims src {}", msg.src),
                    });
                }
                if msg.payload.is_empty() {
                    return Err(Error::ScheduleMismatch {
                        rank,
                        round,
                        detail: format!("empty payload to {} tag {}", msg.dst, msg.tag),
                    });
                }
                if !seen.insert((msg.src, msg.dst, msg.tag)) {
                    return Err(Error::DuplicateMessage {
                        src: msg.src,
                        dst: msg.dst,
                        tag: msg.tag.to_string(),
                    });
                }
                let scalars = msg.payload.len() as u64;
                ledger.per_rank[msg.src].total.add_send(scalars);
                ledger.per_rank[msg.src].per_step[msg.tag.step as usize].add_send(scalars);
                ledger.per_rank[msg.dst].total.add_recv(scalars);
                ledger.per_rank[msg.dst].per_step[msg.tag.step as usize].add_recv(scalars);
                inboxes[msg.dst].push(msg);
            }
        }

        // Canonical delivery order regardless of scheduling.
        for inbox in &mut inboxes {
            inbox.sort_by_key(|m| (m.src, m.tag));
        }
        if opts.record_log {
            for inbox in &inboxes {
                for m in inbox {
                    log.push((m.src, m.dst, m.tag, m.payload.len()));
                }
            }
        }

        // Messages addressed to finished ranks can never be received.
        let pending: Vec<String> = inboxes
            .iter()
            .enumerate()
            .filter(|(rank, inbox)| done[*rank] && !inbox.is_empty())
            .flat_map(|(_, inbox)| {
                inbox
                    .iter()
                    .map(|m| format!("{} -> {} ({})", m.src, m.dst, m.tag))
            })
            .collect();
        if !pending.is_empty() {
            return Err(Error::Deadlock(pending.join(", ")));
        }

        if done.iter().all(|&d| d) {
            break;
        }
        round += 1;
    }

    let outputs = crate::parallel::map_vec(programs, &finish);
    Ok(RunReport {
        outputs,
        ledger,
        log,
    })
}

impl<T: RankProgram + ?Sized> RankProgram for Box<T>
where
    Box<T>: Send,
{
    fn step(&mut self, round: usize, inbox: &[Message]) -> Result<StepOutput> {
        (**self).step(round, inbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ping {
        rank: usize,
        got: Vec<f64>,
    }

    impl RankProgram for Ping {
        fn step(&mut self, round: usize, inbox: &[Message]) -> Result<StepOutput> {
            match (self.rank, round) {
                (0, 0) => Ok(StepOutput {
                    sends: vec![Message {
                        src: 0,
                        dst: 1,
                        tag: Tag::new(2, 0, 0),
                        payload: vec![1.0, 2.0, 3.0, 4.0, 5.0],
                    }],
                    done: true,
                }),
                (1, 0) => Ok(StepOutput {
                    sends: vec![],
                    done: false,
                }),
                (1, 1) => {
                    assert_eq!(inbox.len(), 1);
                    self.got = inbox[0].payload.clone();
                    Ok(StepOutput {
                        sends: vec![],
                        done: true,
                    })
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn ping_counts_messages_and_scalars() {
        let programs = vec![
            Ping {
                rank: 0,
                got: vec![],
            },
            Ping {
                rank: 1,
                got: vec![],
            },
        ];
        let report = run(programs, |p| p.got, RunOptions::default()).unwrap();
        assert_eq!(report.outputs[1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let l = &report.ledger;
        assert_eq!(l.rank(0).total.messages_sent, 1);
        assert_eq!(l.rank(0).total.scalars_sent, 5);
        assert_eq!(l.rank(0).total.messages_received, 0);
        assert_eq!(l.rank(1).total.messages_received, 1);
        assert_eq!(l.rank(1).total.scalars_received, 5);
        // Conservation.
        assert_eq!(l.total_sent(), l.total_received());
    }

    struct Silent;

    impl RankProgram for Silent {
        fn step(&mut self, _round: usize, _inbox: &[Message]) -> Result<StepOutput> {
            Ok(StepOutput {
                sends: vec![],
                done: true,
            })
        }
    }

    #[test]
    fn empty_program_empty_ledger() {
        let report = run(vec![Silent], |_| (), RunOptions::default()).unwrap();
        assert_eq!(report.ledger.total_sent(), (0, 0));
    }

    struct SendToFinished {
        rank: usize,
    }

    impl RankProgram for SendToFinished {
        fn step(&mut self, round: usize, _inbox: &[Message]) -> Result<StepOutput> {
            if self.rank == 0 {
                return Ok(StepOutput {
                    sends: vec![],
                    done: true,
                });
            }
            // Rank 1 sends to rank 0 after rank 0 finished.
            if round == 0 {
                return Ok(StepOutput {
                    sends: vec![],
                    done: false,
                });
            }
            Ok(StepOutput {
                sends: vec![Message {
                    src: 1,
                    dst: 0,
                    tag: Tag::new(3, 0, 7),
                    payload: vec![1.0],
                }],
                done: true,
            })
        }
    }

    #[test]
    fn unmatched_send_is_a_deadlock_error() {
        let err = run(
            vec![SendToFinished { rank: 0 }, SendToFinished { rank: 1 }],
            |_| (),
            RunOptions::default(),
        )
        .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("1 -> 0"), "{text}");
        assert!(text.contains("step3"), "{text}");
    }

    struct Duplicator;

    impl RankProgram for Duplicator {
        fn step(&mut self, _round: usize, _inbox: &[Message]) -> Result<StepOutput> {
            let msg = Message {
                src: 0,
                dst: 1,
                tag: Tag::new(2, 1, 1),
                payload: vec![1.0],
            };
            Ok(StepOutput {
                sends: vec![msg.clone(), msg],
                done: true,
            })
        }
    }

    struct Sink;

    impl RankProgram for Sink {
        fn step(&mut self, round: usize, inbox: &[Message]) -> Result<StepOutput> {
            Ok(StepOutput {
                sends: vec![],
                done: round > 0 || !inbox.is_empty(),
            })
        }
    }

    #[test]
    fn duplicate_tag_is_an_error() {
        let err = run(
            vec![
                Box::new(Duplicator) as Box<dyn RankProgram>,
                Box::new(Sink) as Box<dyn RankProgram>,
            ],
            |_| (),
            RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateMessage { .. }), "{err}");
    }

    #[test]
    fn cost_formula() {
        let mut ledger = CostLedger::new(1);
        for _ in 0..3 {
            ledger.per_rank[0].total.add_send(4);
            ledger.per_rank[0].per_step[2].add_send(4);
        }
        assert!((ledger.rank_cost(0, 1.0, 0.1) - 4.2).abs() < 1e-12);
        assert_eq!(ledger.rank_cost(0, 0.0, 1.0), 12.0);
        assert_eq!(ledger.rank_cost(0, 1.0, 0.0), 3.0);
    }
}
