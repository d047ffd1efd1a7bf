//! Command-line driver: verification runs, counter sweeps, and structure
//! inspection. Reports are pure functions of the parsed spec, so two
//! invocations with the same arguments produce byte-identical output for
//! any worker count.

use crate::admissibility::AdmissibilityRule;
use crate::dist_matvec::{DistributedHMatrix, DistributedVector};
use crate::domain_tree::DomainConfig;
use crate::error::{Error, Result};
use crate::hmatrix::{build_hmatrix, HMatrixConfig, DEFAULT_DENSIFY_CAP};
use crate::mat::rel_l2;
use crate::metrics::{speedup_efficiency, CostParams, RunRecord};
use crate::structure::{BlockKind, BlockStructure};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

pub const VERIFY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(
    name = "hmatvec",
    version,
    about = "Distributed H-matrix matvec simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare the distributed matvec against the sequential oracle.
    Verify(RunSpec),
    /// Sweep (n, P) cells and emit counter, balance, and cost reports.
    Sweep(RunSpec),
    /// Dump the block structure as JSON plus a text raster.
    Inspect(RunSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdmChoice {
    Weak,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct RunSpec {
    /// Spatial dimension (1, 2, or 3).
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Grid points per dimension; comma list for sweeps.
    #[arg(long, value_delimiter = ',', default_value = "16", required = false)]
    pub n: Vec<usize>,
    /// Points per dimension in a leaf box.
    #[arg(long, default_value_t = 4)]
    pub leaf_size: usize,
    /// Admissibility condition.
    #[arg(long, value_enum, default_value_t = AdmChoice::Weak)]
    pub adm: AdmChoice,
    /// Low-rank block rank r.
    #[arg(long = "rank", default_value_t = 4)]
    pub r: usize,
    /// Process counts; comma list.
    #[arg(long = "procs", value_delimiter = ',', default_value = "1")]
    pub procs: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random input vectors per configuration.
    #[arg(long, default_value_t = 128)]
    pub trials: usize,
    /// Buffer-zone constant for standard admissibility.
    #[arg(long, conflicts_with = "rho_default")]
    pub rho: Option<f64>,
    /// Use the default rho = sqrt(d) (also the behavior without --rho).
    #[arg(long)]
    pub rho_default: bool,
    /// Cost per message.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Cost per transferred scalar.
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    /// Flops per simulated cost unit.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

impl RunSpec {
    pub fn rule(&self) -> AdmissibilityRule {
        match self.adm {
            AdmChoice::Weak => AdmissibilityRule::Weak,
            AdmChoice::Standard => match self.rho {
                Some(rho) => AdmissibilityRule::Standard { rho },
                None => AdmissibilityRule::standard_default(self.d),
            },
        }
    }

    pub fn cost_params(&self) -> CostParams {
        CostParams {
            alpha: self.alpha,
            beta: self.beta,
            rate: self.rate,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.procs.is_empty() {
            return Err(Error::InvalidConfig("empty --n or --procs list".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("--trials must be >= 1".into()));
        }
        Ok(())
    }

    fn matrix_config(&self, n: usize) -> Result<HMatrixConfig> {
        Ok(HMatrixConfig {
            domain: DomainConfig::new(self.d, n, self.leaf_size)?,
            rule: self.rule(),
            r: self.r,
            seed: self.seed,
        })
    }

    fn adm_label(&self) -> String {
        match self.rule() {
            AdmissibilityRule::Weak => "weak".to_string(),
            AdmissibilityRule::Standard { rho } => format!("standard(rho={rho})"),
        }
    }
}

/// Top-level dispatch; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify(spec) => {
            let report = verify_report(&spec)?;
            print!("{}", report.text);
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Sweep(spec) => {
            let report = sweep_report(&spec)?;
            let body = match spec.format {
                Format::Csv => &report.csv,
                Format::Json => &report.json,
            };
            match &spec.output {
                Some(path) => {
                    let mut f = std::fs::File::create(path)?;
                    f.write_all(body.as_bytes())?;
                    println!("wrote {}", path.display());
                }
                None => print!("{body}"),
            }
            Ok(0)
        }
        Command::Inspect(spec) => {
            let report = inspect_report(&spec)?;
            print!("{}", report.raster);
            match &spec.output {
                Some(path) => {
                    let mut f = std::fs::File::create(path)?;
                    f.write_all(report.json.as_bytes())?;
                    println!("wrote {}", path.display());
                }
                None => println!("{}", report.json),
            }
            Ok(0)
        }
    }
}

#[derive(Debug)]
pub struct VerifyReport {
    pub text: String,
    pub passed: bool,
}

/// Build each configuration, run `trials` fresh random vectors per
/// process count, and report the max relative error.
pub fn verify_report(spec: &RunSpec) -> Result<VerifyReport> {
    spec.validate()?;
    let mut text = String::new();
    let mut passed = true;
    if let AdmissibilityRule::Standard { rho } = spec.rule() {
        text.push_str(&format!(
            "standard admissibility with rho = {rho}{}\n",
            if spec.rho.is_none() {
                " (default sqrt(d))"
            } else {
                ""
            }
        ));
    }
    for &n in &spec.n {
        let config = spec.matrix_config(n)?;
        let n_total = config.domain.total_dofs();
        if n_total > DEFAULT_DENSIFY_CAP {
            return Err(Error::DensifyCap {
                n: n_total,
                cap: DEFAULT_DENSIFY_CAP,
            });
        }
        let k = build_hmatrix(config)?;
        for &p in &spec.procs {
            let dk = DistributedHMatrix::build(config, p)?;
            let errs = crate::parallel::map_indexed(spec.trials, |trial| {
                let x =
                    DistributedVector::random(dk.assignment(), spec.seed ^ 0x5eed, trial as u64);
                let y_seq = k.sequential_matvec(&x.gather())?;
                let run = dk.matvec(&x)?;
                Ok::<f64, Error>(rel_l2(&run.y.gather(), &y_seq))
            });
            let mut max_err = 0.0f64;
            for e in errs {
                max_err = max_err.max(e?);
            }
            let ok = max_err <= VERIFY_TOLERANCE;
            passed &= ok;
            text.push_str(&format!(
                "verify d={} n={} adm={} r={} P={} trials={} max_rel_err={:e} {}\n",
                spec.d,
                n,
                spec.adm_label(),
                spec.r,
                p,
                spec.trials,
                max_err,
                if ok { "PASS" } else { "FAIL" }
            ));
            if !ok {
                return Ok(VerifyReport { text, passed });
            }
        }
    }
    Ok(VerifyReport { text, passed })
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub d: usize,
    pub n: usize,
    pub n_total: usize,
    pub adm: String,
    pub r: usize,
    pub p: usize,
    pub seed: u64,
    pub trials: usize,
    pub step2_max_msgs: u64,
    pub step2_max_scalars: u64,
    pub step3_max_msgs: u64,
    pub step3_max_scalars: u64,
    pub step4_max_msgs: u64,
    pub step4_max_scalars: u64,
    pub storage_balance: f64,
    pub flop_balance: f64,
    pub sim_cost: f64,
    pub speedup: f64,
    pub eff: f64,
}

pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
    pub csv: String,
    pub json: String,
}

/// One instrumented cell per (n, P); counters are independent of the
/// input vectors, so a single run per cell carries the sweep.
pub fn sweep_record(spec: &RunSpec, n: usize, p: usize) -> Result<RunRecord> {
    let config = spec.matrix_config(n)?;
    let dk = DistributedHMatrix::build(config, p)?;
    let start = std::time::Instant::now();
    let x = DistributedVector::random(dk.assignment(), spec.seed ^ 0x5eed, 0);
    let run = dk.matvec(&x)?;
    let wall = start.elapsed().as_secs_f64();
    let balance = crate::distribution::measure_balance(&dk.stores)?;
    let tree = &dk.ctx.tree;
    let structure = &dk.ctx.structure;
    Ok(RunRecord {
        d: spec.d,
        n,
        leaf_size: spec.leaf_size,
        adm: spec.adm_label(),
        r: spec.r,
        p,
        seed: spec.seed,
        per_rank_flops: run.flops.clone(),
        ledger: run.ledger,
        wall_seconds: wall,
        storage_balance: balance.factor,
        flop_balance: RunRecord::flop_balance(&run.flops),
        seq_flops: crate::hmatrix::flop_counts(tree, structure, spec.r).total(),
    })
}

pub fn sweep_report(spec: &RunSpec) -> Result<SweepReport> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> = spec
        .n
        .iter()
        .flat_map(|&n| spec.procs.iter().map(move |&p| (n, p)))
        .collect();
    let records: Vec<RunRecord> =
        crate::parallel::map_vec(cells, |(n, p)| sweep_record(spec, n, p))
            .into_iter()
            .collect::<Result<_>>()?;

    let params = spec.cost_params();
    let mut rows = Vec::with_capacity(records.len());
    for &n in &spec.n {
        let group: Vec<&RunRecord> = records.iter().filter(|r| r.n == n).collect();
        let table = speedup_efficiency(&group, params, None)?;
        // Rows come out in spec order; the table is sorted by P.
        for rec in &group {
            let srow = table.iter().find(|row| row.p == rec.p).unwrap();
            let (s2m, s2s) = rec.ledger.max_rank_step(2);
            let (s3m, s3s) = rec.ledger.max_rank_step(3);
            let (s4m, s4s) = rec.ledger.max_rank_step(4);
            rows.push(SweepRow {
                d: rec.d,
                n: rec.n,
                n_total: rec.n_total(),
                adm: rec.adm.clone(),
                r: rec.r,
                p: rec.p,
                seed: rec.seed,
                trials: spec.trials,
                step2_max_msgs: s2m,
                step2_max_scalars: s2s,
                step3_max_msgs: s3m,
                step3_max_scalars: s3s,
                step4_max_msgs: s4m,
                step4_max_scalars: s4s,
                storage_balance: rec.storage_balance,
                flop_balance: rec.flop_balance,
                sim_cost: srow.cost,
                speedup: srow.speedup,
                eff: srow.eff,
            });
        }
    }

    let mut csv = String::from(
        "d,n,N,adm,r,P,seed,trials,step2_max_msgs,step2_max_scalars,step3_max_msgs,step3_max_scalars,step4_max_msgs,step4_max_scalars,storage_balance,flop_balance,sim_cost,speedup,eff\n",
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.d,
            row.n,
            row.n_total,
            row.adm,
            row.r,
            row.p,
            row.seed,
            row.trials,
            row.step2_max_msgs,
            row.step2_max_scalars,
            row.step3_max_msgs,
            row.step3_max_scalars,
            row.step4_max_msgs,
            row.step4_max_scalars,
            row.storage_balance,
            row.flop_balance,
            row.sim_cost,
            row.speedup,
            row.eff
        ));
    }
    let json = serde_json::to_string_pretty(&rows)?;
    Ok(SweepReport {
        rows,
        records,
        csv,
        json,
    })
}

#[derive(Debug, Serialize)]
struct InspectDump {
    config: InspectConfig,
    blocks: Vec<crate::hmatrix::BlockDump>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assignment: Option<Vec<crate::process_tree::AssignmentRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stores: Option<Vec<crate::distribution::StoreSummary>>,
}

#[derive(Debug, Serialize)]
struct InspectConfig {
    d: usize,
    n: usize,
    leaf_size: usize,
    adm: String,
    r: usize,
}

pub struct InspectReport {
    pub raster: String,
    pub json: String,
}

const MAX_RASTER_SIDE: usize = 128;

/// Leaf-resolution raster: one character per (target leaf, source leaf)
/// cell, D for dense coverage and L for low-rank.
pub fn structure_raster(
    tree: &crate::domain_tree::DomainTree,
    structure: &BlockStructure,
) -> Result<String> {
    let leaves = tree.leaf_count();
    if leaves > MAX_RASTER_SIDE {
        return Err(Error::InvalidConfig(format!(
            "raster limited to {MAX_RASTER_SIDE} leaves per side, have {leaves}"
        )));
    }
    let leaf_dofs = tree.config.total_dofs() / leaves;
    let mut grid = vec![b'?'; leaves * leaves];
    for &i in structure.data_blocks() {
        let b = structure.block(i);
        let ch = match b.kind {
            BlockKind::Dense => b'D',
            BlockKind::LowRank => b'L',
            BlockKind::Hier => unreachable!(),
        };
        let tr = tree.dof_range(b.target);
        let sr = tree.dof_range(b.source);
        for row in tr.start / leaf_dofs..tr.end / leaf_dofs {
            for col in sr.start / leaf_dofs..sr.end / leaf_dofs {
                grid[row * leaves + col] = ch;
            }
        }
    }
    let mut out = String::with_capacity(leaves * (2 * leaves + 1));
    for row in 0..leaves {
        for col in 0..leaves {
            out.push(grid[row * leaves + col] as char);
            out.push(if col + 1 == leaves { '\n' } else { ' ' });
        }
    }
    Ok(out)
}

pub fn inspect_report(spec: &RunSpec) -> Result<InspectReport> {
    spec.validate()?;
    let n = spec.n[0];
    let config = spec.matrix_config(n)?;
    let tree = std::sync::Arc::new(crate::domain_tree::build_domain_tree(config.domain)?);
    let structure = BlockStructure::build(&tree, config.rule);
    let raster = structure_raster(&tree, &structure)?;

    let (assignment_rows, stores) = if spec.procs.len() == 1 {
        let p = spec.procs[0];
        let assignment = std::sync::Arc::new(crate::process_tree::assign_processes(&tree, p)?);
        let ctx = crate::distribution::DistContext::new(
            config,
            std::sync::Arc::clone(&tree),
            std::sync::Arc::clone(&structure),
            std::sync::Arc::clone(&assignment),
        )?;
        let stores = crate::distribution::build_all_stores(&ctx);
        (
            Some(assignment.level_table(&tree)),
            Some(stores.iter().map(|s| s.summary(&ctx)).collect()),
        )
    } else {
        (None, None)
    };

    let dump = InspectDump {
        config: InspectConfig {
            d: spec.d,
            n,
            leaf_size: spec.leaf_size,
            adm: spec.adm_label(),
            r: spec.r,
        },
        blocks: crate::hmatrix::dump_structure(&tree, &structure),
        assignment: assignment_rows,
        stores,
    };
    Ok(InspectReport {
        raster,
        json: serde_json::to_string_pretty(&dump)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(args: &[&str]) -> RunSpec {
        let mut full = vec!["hmatvec", "verify"];
        full.extend_from_slice(args);
        match Cli::parse_from(full).command {
            Command::Verify(s) | Command::Sweep(s) | Command::Inspect(s) => s,
        }
    }

    #[test]
    fn verify_small_weak_passes() {
        let s = spec(&[
            "--d",
            "2",
            "--n",
            "16",
            "--leaf-size",
            "4",
            "--adm",
            "weak",
            "--rank",
            "4",
            "--procs",
            "1,2,4,8",
            "--seed",
            "7",
            "--trials",
            "8",
        ]);
        let report = verify_report(&s).unwrap();
        assert!(report.passed, "{}", report.text);
        assert_eq!(report.text.matches("PASS").count(), 4);
    }

    #[test]
    fn verify_rejects_p_beyond_leaves() {
        let s = spec(&[
            "--d",
            "1",
            "--n",
            "4",
            "--leaf-size",
            "1",
            "--procs",
            "16",
            "--trials",
            "1",
        ]);
        let err = verify_report(&s).unwrap_err();
        assert!(matches!(err, Error::ProcessCount { .. }), "{err}");
    }

    #[test]
    fn verify_standard_logs_default_rho() {
        let s = spec(&[
            "--d",
            "2",
            "--n",
            "8",
            "--leaf-size",
            "2",
            "--adm",
            "standard",
            "--rho-default",
            "--procs",
            "1,4",
            "--trials",
            "4",
        ]);
        let report = verify_report(&s).unwrap();
        assert!(report.passed);
        assert!(
            report.text.contains("rho = 1.4142135623730951"),
            "{}",
            report.text
        );
    }

    #[test]
    fn sweep_is_deterministic() {
        let s = spec(&[
            "--d",
            "1",
            "--n",
            "32,64",
            "--leaf-size",
            "4",
            "--procs",
            "1,2,4",
            "--trials",
            "2",
        ]);
        let a = sweep_report(&s).unwrap();
        let b = sweep_report(&s).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.json, b.json);
    }

    #[test]
    fn sweep_cost_strong_scaling_monotone() {
        let s = spec(&[
            "--d",
            "2",
            "--n",
            "32",
            "--leaf-size",
            "2",
            "--adm",
            "weak",
            "--procs",
            "1,4,16",
            "--trials",
            "1",
        ]);
        let report = sweep_report(&s).unwrap();
        let costs: Vec<f64> = report.rows.iter().map(|r| r.sim_cost).collect();
        assert!(costs.windows(2).all(|w| w[1] < w[0]), "{costs:?}");
    }

    #[test]
    fn sweep_max_messages_growth_bounded() {
        let s = spec(&[
            "--d",
            "1",
            "--n",
            "256",
            "--leaf-size",
            "1",
            "--procs",
            "8,16,32",
            "--trials",
            "1",
        ]);
        let report = sweep_report(&s).unwrap();
        let totals: Vec<u64> = report
            .rows
            .iter()
            .map(|r| r.step2_max_msgs + r.step3_max_msgs + r.step4_max_msgs)
            .collect();
        for w in totals.windows(2) {
            assert!(w[1] >= w[0]);
            assert!(w[1] - w[0] <= 8, "{totals:?}");
        }
    }

    #[test]
    fn raster_1d_weak_shape() {
        let s = spec(&["--d", "1", "--n", "8", "--leaf-size", "1"]);
        let report = inspect_report(&s).unwrap();
        let expect = "\
D D L L L L L L
D D L L L L L L
L L D D L L L L
L L D D L L L L
L L L L D D L L
L L L L D D L L
L L L L L L D D
L L L L L L D D
";
        assert_eq!(report.raster, expect);
    }

    #[test]
    fn raster_2d_weak_level1_low_rank_count() {
        let s = spec(&["--d", "2", "--n", "4", "--leaf-size", "1"]);
        let report = inspect_report(&s).unwrap();
        // 12 of the 16 level-1 pairs are low-rank, each spanning 4x4
        // leaf cells of the 16x16 raster.
        let l_cells = report.raster.chars().filter(|&c| c == 'L').count();
        assert_eq!(l_cells, 12 * 16);
    }

    #[test]
    fn raster_1d_standard_band() {
        let s = spec(&[
            "--d",
            "1",
            "--n",
            "16",
            "--leaf-size",
            "1",
            "--adm",
            "standard",
        ]);
        let report = inspect_report(&s).unwrap();
        let rows: Vec<&str> = report.raster.lines().collect();
        let cell = |r: usize, c: usize| rows[r].split(' ').nth(c).unwrap();
        // Dense band hugs the diagonal; far pairs are low-rank.
        for i in 0..16 {
            assert_eq!(cell(i, i), "D");
            if i + 1 < 16 {
                assert_eq!(cell(i, i + 1), "D");
            }
            if i >= 8 {
                assert_eq!(cell(0, i), "L");
            }
        }
    }

    #[test]
    fn inspect_with_procs_includes_assignment() {
        let s = spec(&["--d", "1", "--n", "8", "--leaf-size", "1", "--procs", "8"]);
        let report = inspect_report(&s).unwrap();
        assert!(report.json.contains("\"assignment\""));
        assert!(report.json.contains("\"stores\""));
    }
}
