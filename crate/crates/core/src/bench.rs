//! Benchmark aggregation: recovery statistics, fit metrics, Pareto fronts,
//! and the report files the command-line tools emit.
//!
//! A benchmark run produces one [`RunSummary`] per (problem, seed); this
//! module folds them into per-problem and overall numbers. Confidence
//! intervals use the binomial normal approximation — the choice is recorded
//! in the report metadata so downstream readers know what the ± means.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{RunStatus, RunTrace};

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("targets have zero variance; R² is undefined")]
    ZeroVariance,
    #[error("target value at row {row} is zero; relative accuracy is undefined")]
    DivisionByZeroTarget { row: usize },
    #[error("metric inputs have mismatched lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("no run summaries to aggregate")]
    Empty,
}

// ---------------------------------------------------------------------------
// Recovery statistics
// ---------------------------------------------------------------------------

/// Recovery fraction with a 95% binomial-normal confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub recovered: usize,
    pub total: usize,
    /// Fraction in [0, 1].
    pub rate: f64,
    /// Half-width of the 95% interval, `1.96·sqrt(p(1−p)/n)`.
    pub ci_95: f64,
}

impl RecoveryStats {
    pub fn from_counts(recovered: usize, total: usize) -> Self {
        assert!(total >= 1, "recovery rate needs at least one run");
        assert!(recovered <= total);
        let p = recovered as f64 / total as f64;
        RecoveryStats {
            recovered,
            total,
            rate: p,
            ci_95: 1.96 * (p * (1.0 - p) / total as f64).sqrt(),
        }
    }
}

/// Recovery statistics over one problem's run traces.
pub fn recovery_rate(traces: &[RunTrace]) -> RecoveryStats {
    let recovered = traces
        .iter()
        .filter(|t| t.status == RunStatus::Recovered)
        .count();
    RecoveryStats::from_counts(recovered, traces.len())
}

/// Mean evaluations-to-recovery over the recovered runs only; `None` when
/// nothing recovered (reported as DNF rather than skewing an average).
pub fn mean_evals_to_recovery(traces: &[RunTrace]) -> Option<f64> {
    let recovered: Vec<u64> = traces.iter().filter_map(|t| t.recovered_at).collect();
    if recovered.is_empty() {
        return None;
    }
    Some(recovered.iter().sum::<u64>() as f64 / recovered.len() as f64)
}

// ---------------------------------------------------------------------------
// Fit metrics
// ---------------------------------------------------------------------------

/// Coefficient of determination, `1 − Σ(y−ŷ)²/Σ(y−ȳ)²`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64, BenchError> {
    if y.len() != y_hat.len() {
        return Err(BenchError::LengthMismatch {
            left: y.len(),
            right: y_hat.len(),
        });
    }
    assert!(y.len() >= 2, "R² needs at least two observations");
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(BenchError::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Accuracy-to-tolerance: true iff the worst relative error stays within
/// `tau`. Fails on zero targets, where relative error is undefined.
pub fn acc_tau(y: &[f64], y_hat: &[f64], tau: f64) -> Result<bool, BenchError> {
    if y.len() != y_hat.len() {
        return Err(BenchError::LengthMismatch {
            left: y.len(),
            right: y_hat.len(),
        });
    }
    let mut worst = 0.0f64;
    for (row, (&yi, &fi)) in y.iter().zip(y_hat).enumerate() {
        if yi == 0.0 {
            return Err(BenchError::DivisionByZeroTarget { row });
        }
        worst = worst.max(((fi - yi) / yi).abs());
    }
    Ok(worst <= tau)
}

// ---------------------------------------------------------------------------
// Pareto front
// ---------------------------------------------------------------------------

/// A candidate on the complexity/accuracy trade-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub complexity: u32,
    pub nmse: f64,
    /// Infix rendering, carried along for plot labels.
    pub equation: String,
}

/// Non-dominated set under (minimize complexity, minimize NMSE), sorted by
/// complexity. Ties on complexity keep the lowest NMSE, so the returned
/// front is strictly decreasing in NMSE as complexity grows.
pub fn pareto_front(candidates: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[a]
            .complexity
            .cmp(&candidates[b].complexity)
            .then(candidates[a].nmse.total_cmp(&candidates[b].nmse))
            .then(a.cmp(&b))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best_nmse = f64::INFINITY;
    for idx in order {
        let c = &candidates[idx];
        if c.nmse < best_nmse {
            best_nmse = c.nmse;
            front.push(c.clone());
        }
    }
    front
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Everything one (problem, seed) run contributes to a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub seed: u64,
    pub status: RunStatus,
    pub evaluations: u64,
    pub recovered_at: Option<u64>,
    pub best_prefix: String,
    pub best_infix: String,
    pub best_reward: f64,
    pub complexity: u32,
    /// Normalized mean squared error on the held-out test split; `None` when
    /// the equation left the reals on test points.
    pub test_nmse: Option<f64>,
    pub r_squared: Option<f64>,
    /// Accuracy at the report's tolerance (see [`BenchReport::tau`]);
    /// `None` when relative error is undefined on the test targets.
    pub acc_tau: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemReport {
    pub problem: String,
    pub recovery: RecoveryStats,
    /// Mean evaluations at recovery over recovered runs; `None` = DNF.
    pub mean_evals_to_recovery: Option<f64>,
    /// Means over the runs where the metric was defined.
    pub mean_test_nmse: Option<f64>,
    pub mean_r_squared: Option<f64>,
    /// Fraction of metric-defined runs whose best equation met the tolerance.
    pub acc_tau_rate: Option<f64>,
    pub pareto: Vec<ParetoPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub problems: Vec<ProblemReport>,
    /// Mean of the per-problem recovery rates, as a percentage.
    pub aggregate_recovery_percent: f64,
    /// Mean of the per-problem CI half-widths, as a percentage.
    pub aggregate_ci_percent: f64,
    /// Relative-error tolerance used for the accuracy column.
    pub tau: f64,
    /// How the confidence intervals were computed.
    pub ci_method: String,
}

impl BenchReport {
    /// Aggregates per-(problem, seed) summaries, grouping by problem name in
    /// first-appearance order.
    pub fn from_summaries(summaries: &[RunSummary], tau: f64) -> Result<Self, BenchError> {
        if summaries.is_empty() {
            return Err(BenchError::Empty);
        }
        let mut names: Vec<&str> = Vec::new();
        for s in summaries {
            if !names.contains(&s.problem.as_str()) {
                names.push(&s.problem);
            }
        }
        let mut problems = Vec::with_capacity(names.len());
        for name in &names {
            let runs: Vec<&RunSummary> =
                summaries.iter().filter(|s| s.problem == *name).collect();
            let recovered = runs
                .iter()
                .filter(|s| s.status == RunStatus::Recovered)
                .count();
            let recovery = RecoveryStats::from_counts(recovered, runs.len());
            let recovered_evals: Vec<u64> =
                runs.iter().filter_map(|s| s.recovered_at).collect();
            let mean_evals_to_recovery = if recovered_evals.is_empty() {
                None
            } else {
                Some(recovered_evals.iter().sum::<u64>() as f64 / recovered_evals.len() as f64)
            };
            let points: Vec<ParetoPoint> = runs
                .iter()
                .filter_map(|s| {
                    Some(ParetoPoint {
                        complexity: s.complexity,
                        nmse: s.test_nmse?,
                        equation: s.best_infix.clone(),
                    })
                })
                .collect();
            let mean_defined = |vals: Vec<f64>| {
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let accs: Vec<bool> = runs.iter().filter_map(|s| s.acc_tau).collect();
            problems.push(ProblemReport {
                problem: name.to_string(),
                recovery,
                mean_evals_to_recovery,
                mean_test_nmse: mean_defined(runs.iter().filter_map(|s| s.test_nmse).collect()),
                mean_r_squared: mean_defined(runs.iter().filter_map(|s| s.r_squared).collect()),
                acc_tau_rate: (!accs.is_empty())
                    .then(|| accs.iter().filter(|&&a| a).count() as f64 / accs.len() as f64),
                pareto: pareto_front(&points),
            });
        }
        let m = problems.len() as f64;
        Ok(BenchReport {
            aggregate_recovery_percent: problems.iter().map(|p| p.recovery.rate).sum::<f64>()
                / m
                * 100.0,
            aggregate_ci_percent: problems.iter().map(|p| p.recovery.ci_95).sum::<f64>() / m
                * 100.0,
            problems,
            tau,
            ci_method: "binomial normal approximation, 1.96·sqrt(p(1-p)/n)".to_string(),
        })
    }

    /// Per-problem rows, comma-separated with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "problem,seeds,recovered,recovery_rate,ci_95,mean_evals_to_recovery,\
             mean_test_nmse,mean_r_squared,acc_tau_rate\n",
        );
        for p in &self.problems {
            let gamma = p
                .mean_evals_to_recovery
                .map(|g| format!("{g:.1}"))
                .unwrap_or_else(|| "DNF".to_string());
            let opt = |v: Option<f64>, f: fn(f64) -> String| {
                v.map(f).unwrap_or_else(|| "NA".to_string())
            };
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{},{},{},{}\n",
                p.problem,
                p.recovery.total,
                p.recovery.recovered,
                p.recovery.rate,
                p.recovery.ci_95,
                gamma,
                opt(p.mean_test_nmse, |v| format!("{v:.6e}")),
                opt(p.mean_r_squared, |v| format!("{v:.6}")),
                opt(p.acc_tau_rate, |v| format!("{v:.4}")),
            ));
        }
        out
    }

    /// Plot-ready Pareto rows for one problem: complexity, NMSE, equation.
    pub fn pareto_csv(&self, problem: &str) -> Option<String> {
        let report = self.problems.iter().find(|p| p.problem == problem)?;
        let mut out = String::from("complexity,nmse,equation\n");
        for pt in &report.pareto {
            out.push_str(&format!(
                "{},{:.6e},\"{}\"\n",
                pt.complexity, pt.nmse, pt.equation
            ));
        }
        Some(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_stream;
    use rand::Rng;

    fn trace_with_status(status: RunStatus, recovered_at: Option<u64>) -> RunTrace {
        RunTrace {
            records: Vec::new(),
            status,
            evaluations: recovered_at.unwrap_or(1000),
            recovered_at,
        }
    }

    #[test]
    fn recovery_rate_hand_values() {
        let all: Vec<RunTrace> = (0..10)
            .map(|i| trace_with_status(RunStatus::Recovered, Some(100 * (i + 1))))
            .collect();
        let s = recovery_rate(&all);
        assert_eq!(s.rate, 1.0);
        assert_eq!(s.ci_95, 0.0);

        let none: Vec<RunTrace> = (0..10)
            .map(|_| trace_with_status(RunStatus::BudgetExhausted, None))
            .collect();
        assert_eq!(recovery_rate(&none).rate, 0.0);

        let mixed: Vec<RunTrace> = (0..10)
            .map(|i| {
                if i < 7 {
                    trace_with_status(RunStatus::Recovered, Some(50))
                } else {
                    trace_with_status(RunStatus::Converged, None)
                }
            })
            .collect();
        let s = recovery_rate(&mixed);
        assert!((s.rate - 0.7).abs() < 1e-12);
        // 1.96·sqrt(0.7·0.3/10) ≈ 0.284
        assert!((s.ci_95 - 0.284).abs() < 1e-3, "ci was {}", s.ci_95);
    }

    #[test]
    fn evals_to_recovery_averages_recovered_runs_only() {
        let traces = vec![
            trace_with_status(RunStatus::Recovered, Some(100)),
            trace_with_status(RunStatus::BudgetExhausted, None),
            trace_with_status(RunStatus::Recovered, Some(300)),
        ];
        assert_eq!(mean_evals_to_recovery(&traces), Some(200.0));
        assert_eq!(
            mean_evals_to_recovery(&[trace_with_status(RunStatus::Converged, None)]),
            None
        );
    }

    #[test]
    fn r_squared_hand_values() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        let mean = [2.0, 2.0, 2.0];
        assert_eq!(r_squared(&y, &mean).unwrap(), 0.0);
        // ss_res = 1, ss_tot = 2.
        let off = [1.0, 2.0, 4.0];
        assert!((r_squared(&y, &off).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            r_squared(&[5.0, 5.0], &[5.0, 5.0]),
            Err(BenchError::ZeroVariance)
        );
    }

    #[test]
    fn acc_tau_hand_values() {
        let y = [1.0, 2.0];
        assert!(acc_tau(&y, &y, 0.0).unwrap());
        assert!(acc_tau(&y, &[1.04, 2.0], 0.05).unwrap());
        assert!(!acc_tau(&y, &[1.06, 2.0], 0.05).unwrap());
        assert_eq!(
            acc_tau(&[1.0, 0.0], &[1.0, 0.0], 0.05),
            Err(BenchError::DivisionByZeroTarget { row: 1 })
        );
    }

    #[test]
    fn fit_metrics_are_permutation_invariant() {
        let mut rng = rng_stream(31, 0);
        for _ in 0..50 {
            let y: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..4.0)).collect();
            let y_hat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            let mut perm: Vec<usize> = (0..y.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let fp: Vec<f64> = perm.iter().map(|&i| y_hat[i]).collect();
            let a = r_squared(&y, &y_hat).unwrap();
            let b = r_squared(&yp, &fp).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert_eq!(
                acc_tau(&y, &y_hat, 0.1).unwrap(),
                acc_tau(&yp, &fp, 0.1).unwrap()
            );
        }
    }

    fn pt(complexity: u32, nmse: f64) -> ParetoPoint {
        ParetoPoint {
            complexity,
            nmse,
            equation: format!("eq-{complexity}"),
        }
    }

    #[test]
    fn pareto_hand_values() {
        let single = vec![pt(4, 0.3)];
        assert_eq!(pareto_front(&single), single);

        let three = vec![pt(3, 0.5), pt(4, 0.2), pt(5, 0.3)];
        assert_eq!(pareto_front(&three), vec![pt(3, 0.5), pt(4, 0.2)]);
    }

    /// O(n²) dominance filter plus the same-complexity tie rule; the sweep
    /// implementation must agree exactly.
    fn pareto_brute_force(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
        let mut keep: Vec<ParetoPoint> = Vec::new();
        for (i, a) in points.iter().enumerate() {
            let dominated = points.iter().enumerate().any(|(j, b)| {
                j != i
                    && b.complexity <= a.complexity
                    && b.nmse <= a.nmse
                    && (b.complexity < a.complexity || b.nmse < a.nmse)
            });
            if !dominated {
                keep.push(a.clone());
            }
        }
        keep.sort_by(|a, b| {
            a.complexity
                .cmp(&b.complexity)
                .then(a.nmse.total_cmp(&b.nmse))
        });
        keep.dedup_by(|later, first| later.complexity == first.complexity);
        keep
    }

    #[test]
    fn pareto_matches_brute_force_on_random_sets() {
        let mut rng = rng_stream(77, 0);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let points: Vec<ParetoPoint> = (0..n)
                .map(|_| pt(rng.random_range(1..15), rng.random_range(0.0..2.0)))
                .collect();
            let fast = pareto_front(&points);
            let slow = pareto_brute_force(&points);
            assert_eq!(fast, slow);
            for w in fast.windows(2) {
                assert!(w[0].complexity < w[1].complexity);
                assert!(w[0].nmse > w[1].nmse, "front must strictly improve");
            }
        }
    }

    fn summary(problem: &str, seed: u64, recovered: bool, evals: u64) -> RunSummary {
        RunSummary {
            problem: problem.to_string(),
            seed,
            status: if recovered {
                RunStatus::Recovered
            } else {
                RunStatus::BudgetExhausted
            },
            evaluations: evals,
            recovered_at: recovered.then_some(evals),
            best_prefix: "mul x1 x1".to_string(),
            best_infix: "(x1 * x1)".to_string(),
            best_reward: if recovered { 1.0 } else { 0.8 },
            complexity: 3 + (seed as u32 % 3),
            test_nmse: Some(if recovered { 0.0 } else { 0.1 + seed as f64 * 0.01 }),
            r_squared: Some(0.99),
            acc_tau: Some(recovered),
        }
    }

    #[test]
    fn report_aggregates_per_problem_then_averages() {
        let mut summaries = Vec::new();
        for seed in 0..4 {
            summaries.push(summary("A", seed, seed < 2, 500 + seed * 100));
        }
        for seed in 0..4 {
            summaries.push(summary("B", seed, true, 200));
        }
        let report = BenchReport::from_summaries(&summaries, 0.05).unwrap();
        assert_eq!(report.problems.len(), 2);
        let a = &report.problems[0];
        assert_eq!(a.recovery.recovered, 2);
        assert_eq!(a.mean_evals_to_recovery, Some(550.0));
        let b = &report.problems[1];
        assert_eq!(b.recovery.rate, 1.0);
        // (0.5 + 1.0)/2 · 100.
        assert!((report.aggregate_recovery_percent - 75.0).abs() < 1e-9);

        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("A,4,2,"));
        let json: BenchReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json.problems.len(), 2);
        assert!(report.pareto_csv("A").unwrap().starts_with("complexity,"));
        assert!(report.pareto_csv("missing").is_none());
    }

    #[test]
    fn empty_summaries_are_rejected() {
        assert!(matches!(
            BenchReport::from_summaries(&[], 0.05),
            Err(BenchError::Empty)
        ));
    }

    #[test]
    fn undefined_metrics_average_over_defined_runs_only() {
        let mut a = summary("A", 0, false, 100);
        a.test_nmse = None;
        a.r_squared = None;
        a.acc_tau = None;
        let b = summary("A", 1, false, 100);
        let report = BenchReport::from_summaries(&[a.clone(), b.clone()], 0.05).unwrap();
        let p = &report.problems[0];
        assert_eq!(p.mean_test_nmse, b.test_nmse);
        assert_eq!(p.mean_r_squared, b.r_squared);
        assert_eq!(p.acc_tau_rate, Some(0.0));
        assert_eq!(p.pareto.len(), 1, "undefined runs stay off the front");

        a.r_squared = None;
        let only_undefined =
            BenchReport::from_summaries(&[summary_without_metrics("B", 0)], 0.05).unwrap();
        let q = &only_undefined.problems[0];
        assert_eq!(q.mean_test_nmse, None);
        assert!(only_undefined.to_csv().contains("NA"));
    }

    fn summary_without_metrics(problem: &str, seed: u64) -> RunSummary {
        let mut s = summary(problem, seed, false, 100);
        s.test_nmse = None;
        s.r_squared = None;
        s.acc_tau = None;
        s
    }
}
