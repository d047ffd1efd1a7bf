//! Counter-based complexity model checks over instrumented sweeps.

use clap::Parser;
use hmatvec::cli::{sweep_record, Cli, Command};
use hmatvec::metrics::{fit_complexity, CostParams};

fn weak_1d_records() -> Vec<hmatvec::metrics::RunRecord> {
    let args = [
        "hmatvec",
        "sweep",
        "--d",
        "1",
        "--leaf-size",
        "4",
        "--adm",
        "weak",
        "--rank",
        "4",
        "--seed",
        "1",
        "--trials",
        "1",
    ];
    let Command::Sweep(spec) = Cli::parse_from(args).command else {
        unreachable!()
    };
    let mut records = Vec::new();
    for n in [64usize, 256, 1024, 4096] {
        for p in [2usize, 4, 8, 16, 32, 64] {
            if p <= n / 4 {
                records.push(sweep_record(&spec, n, p).unwrap());
            }
        }
    }
    records
}

#[test]
fn weak_1d_cost_fits_model_within_quarter() {
    let records = weak_1d_records();
    let refs: Vec<_> = records.iter().collect();
    let fit = fit_complexity(&refs, CostParams::default(), false).unwrap();
    assert!(
        fit.max_rel_residual <= 0.25,
        "max relative residual {} over {} points",
        fit.max_rel_residual,
        refs.len()
    );
}

#[test]
fn flop_term_dominates_at_small_p() {
    let records = weak_1d_records();
    let refs: Vec<_> = records.iter().collect();
    let fit = fit_complexity(&refs, CostParams::default(), false).unwrap();
    let rec = records.iter().find(|r| r.p == 2 && r.n == 4096).unwrap();
    let nf = rec.n_total() as f64;
    let a_term = fit.coeffs[0] * nf * nf.log2() / rec.p as f64;
    let share = a_term / rec.sim_cost(CostParams::default());
    assert!(share >= 0.90, "a-term share {share}");
}

#[test]
fn standard_model_fit_runs_with_extra_terms() {
    let args = [
        "hmatvec",
        "sweep",
        "--d",
        "2",
        "--leaf-size",
        "2",
        "--adm",
        "standard",
        "--rank",
        "4",
        "--seed",
        "1",
        "--trials",
        "1",
    ];
    let Command::Sweep(spec) = Cli::parse_from(args).command else {
        unreachable!()
    };
    let mut records = Vec::new();
    for n in [16usize, 32, 64] {
        for p in [2usize, 4, 8, 16] {
            records.push(sweep_record(&spec, n, p).unwrap());
        }
    }
    let refs: Vec<_> = records.iter().collect();
    let fit = fit_complexity(&refs, CostParams::default(), true).unwrap();
    assert_eq!(fit.coeffs.len(), 5);
    assert!(fit.coeffs.iter().all(|&c| c >= 0.0));
    assert!(fit.predictions.iter().all(|&p| p > 0.0));
}
