//! Derived measurements: simulated cost, speedup/efficiency tables, and
//! least-squares fits of the counter data against the complexity model.
//!
//! "Time" here is the simulated per-rank cost max_p(flops_p / rate +
//! alpha * messages_p + beta * scalars_p); desk-scale wall clocks of a
//! simulated run say nothing about the algorithm, while counter-based
//! costs are exactly reproducible.

use crate::dist_matvec::FlopTally;
use crate::error::{Error, Result};
use crate::simnet::CostLedger;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostParams {
    /// Cost per message.
    pub alpha: f64,
    /// Cost per transferred scalar.
    pub beta: f64,
    /// Flops per cost unit.
    pub rate: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            alpha: 1.0,
            beta: 0.01,
            rate: 1.0,
        }
    }
}

/// One instrumented distributed matvec.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub d: usize,
    pub n: usize,
    pub leaf_size: usize,
    pub adm: String,
    pub r: usize,
    pub p: usize,
    pub seed: u64,
    pub per_rank_flops: Vec<FlopTally>,
    pub ledger: CostLedger,
    /// Informational only; never used in derived quantities.
    pub wall_seconds: f64,
    pub storage_balance: f64,
    pub flop_balance: f64,
    pub seq_flops: u64,
}

impl RunRecord {
    pub fn n_total(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Simulated parallel time: the busiest rank's cost.
    pub fn sim_cost(&self, params: CostParams) -> f64 {
        (0..self.p)
            .map(|rank| {
                self.per_rank_flops[rank].total() as f64 / params.rate
                    + self.ledger.rank_cost(rank, params.alpha, params.beta)
            })
            .fold(0.0, f64::max)
    }

    /// Max over ranks of step-1 plus step-5 flop imbalance.
    pub fn flop_balance(per_rank: &[FlopTally]) -> f64 {
        let max = per_rank.iter().map(|f| f.compute()).max().unwrap_or(0);
        let min = per_rank.iter().map(|f| f.compute()).min().unwrap_or(0);
        if min == 0 {
            if max == 0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            max as f64 / min as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupRow {
    pub n_total: usize,
    pub r: usize,
    pub p: usize,
    pub cost: f64,
    pub speedup: f64,
    pub eff: f64,
}

/// Speedup = P0 t0 / t1 and Eff = 100 P0 t0 / (P1 t1) for one config
/// group (same matrix, varying P). `baseline` defaults to the smallest P.
pub fn speedup_efficiency(
    records: &[&RunRecord],
    params: CostParams,
    baseline: Option<usize>,
) -> Result<Vec<SpeedupRow>> {
    if records.is_empty() {
        return Err(Error::MissingBaseline { p0: 0 });
    }
    let p0 = baseline.unwrap_or_else(|| records.iter().map(|r| r.p).min().unwrap());
    let base = records
        .iter()
        .find(|r| r.p == p0)
        .ok_or(Error::MissingBaseline { p0 })?;
    let t0 = base.sim_cost(params);
    let mut rows: Vec<SpeedupRow> = records
        .iter()
        .map(|rec| {
            let t1 = rec.sim_cost(params);
            let speedup = p0 as f64 * t0 / t1;
            SpeedupRow {
                n_total: rec.n_total(),
                r: rec.r,
                p: rec.p,
                cost: t1,
                speedup,
                eff: 100.0 * speedup / rec.p as f64,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.n_total, r.r, r.p));
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub coeffs: Vec<f64>,
    pub predictions: Vec<f64>,
    pub rel_residuals: Vec<f64>,
    pub max_rel_residual: f64,
}

/// Nonnegative least squares with per-point weights, by iterated
/// elimination of negative coefficients. Errors on a rank-deficient
/// design.
pub fn nnls(design: &[Vec<f64>], y: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let k = design.first().map_or(0, Vec::len);
    let m = design.len();
    if m < k {
        return Err(Error::FitDesign(format!("{m} points for {k} parameters")));
    }
    let mut free: Vec<usize> = (0..k).collect();
    loop {
        // Weighted normal equations over the free columns.
        let kk = free.len();
        let mut ata = vec![vec![0.0; kk]; kk];
        let mut aty = vec![0.0; kk];
        for (row, (&yv, &w)) in design.iter().zip(y.iter().zip(weights)) {
            for (a, &ca) in free.iter().enumerate() {
                aty[a] += w * row[ca] * yv;
                for (b, &cb) in free.iter().enumerate() {
                    ata[a][b] += w * row[ca] * row[cb];
                }
            }
        }
        let sol = solve_dense(&mut ata, &mut aty)?;
        // Clamp the most negative coefficient to zero and retry.
        let worst = sol
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < 0.0)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap());
        match worst {
            None => {
                let mut full = vec![0.0; k];
                for (i, &c) in free.iter().enumerate() {
                    full[c] = sol[i];
                }
                return Ok(full);
            }
            Some((idx, _)) => {
                free.remove(idx);
                if free.is_empty() {
                    return Ok(vec![0.0; k]);
                }
            }
        }
    }
}

/// Gaussian elimination with partial pivoting for the small normal
/// systems of the fits.
#[allow(clippy::needless_range_loop)]
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() <= 1e-12 * scale.max(1e-300) {
            return Err(Error::FitDesign("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

fn fit(design: Vec<Vec<f64>>, y: Vec<f64>) -> Result<FitResult> {
    // Relative least squares: weight each point by 1 / y^2.
    let weights: Vec<f64> = y.iter().map(|&v| 1.0 / (v * v).max(1e-300)).collect();
    let coeffs = nnls(&design, &y, &weights)?;
    let predictions: Vec<f64> = design
        .iter()
        .map(|row| row.iter().zip(&coeffs).map(|(a, c)| a * c).sum())
        .collect();
    let rel_residuals: Vec<f64> = predictions
        .iter()
        .zip(&y)
        .map(|(p, v)| (p - v).abs() / v.abs().max(1e-300))
        .collect();
    let max_rel_residual = rel_residuals.iter().copied().fold(0.0, f64::max);
    Ok(FitResult {
        coeffs,
        predictions,
        rel_residuals,
        max_rel_residual,
    })
}

/// Fit per-rank cost to a (N log N) / P + b log P + c log^2 P, plus the
/// standard-admissibility extra terms log(N/P) and (N/P)^((d-1)/d) when
/// `standard_terms` is set. Requires at least three P values and two N
/// values.
pub fn fit_complexity(
    records: &[&RunRecord],
    params: CostParams,
    standard_terms: bool,
) -> Result<FitResult> {
    let mut ps: Vec<usize> = records.iter().map(|r| r.p).collect();
    ps.sort_unstable();
    ps.dedup();
    let mut ns: Vec<usize> = records.iter().map(|r| r.n_total()).collect();
    ns.sort_unstable();
    ns.dedup();
    if ps.len() < 3 || ns.len() < 2 {
        return Err(Error::FitDesign(format!(
            "need >= 3 process counts and >= 2 problem sizes, got {} and {}",
            ps.len(),
            ns.len()
        )));
    }
    let mut design = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    for rec in records {
        let n = rec.n_total() as f64;
        let p = rec.p as f64;
        let logp = p.log2();
        let mut row = vec![n * n.log2() / p, logp, logp * logp];
        if standard_terms {
            let d = rec.d as f64;
            row.push((n / p).log2());
            row.push((n / p).powf((d - 1.0) / d));
        }
        design.push(row);
        y.push(rec.sim_cost(params));
    }
    fit(design, y)
}

/// Fit step-3 transfer volume to C1 r log2(N/P) + C2 (N/P)^((d-1)/d)
/// over (N, P, volume) points.
pub fn fit_transfer_volume(
    points: &[(usize, usize, f64)],
    d: usize,
    r: usize,
) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::FitDesign(format!(
            "need >= 3 sweep points, got {}",
            points.len()
        )));
    }
    let mut design = Vec::with_capacity(points.len());
    let mut y = Vec::with_capacity(points.len());
    for &(n_total, p, volume) in points {
        let ratio = n_total as f64 / p as f64;
        design.push(vec![
            r as f64 * ratio.log2(),
            ratio.powf((d as f64 - 1.0) / d as f64),
        ]);
        y.push(volume);
    }
    fit(design, y)
}
