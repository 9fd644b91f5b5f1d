//! Signal-dimension estimation by sequences of tests of `H0r`.
//!
//! `divide_conquer` binary-searches for the smallest non-rejected `r`,
//! `forward_estimate` tests `r = 0, 1, …` in turn, and `threshold_estimate`
//! takes the first `r ≥ 1` whose statistic falls below a threshold `c_n`.

use serde::{Deserialize, Serialize};

use crate::diag::SbssSolution;
use crate::dimtest::{df_each, statistics, test_statistic};
use crate::error::{Result, SbssError};
use crate::special::chi2_quantile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    DivideConquer,
    Forward,
    Threshold,
}

impl std::str::FromStr for Strategy {
    type Err = SbssError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divide-conquer" | "dc" => Ok(Strategy::DivideConquer),
            "forward" => Ok(Strategy::Forward),
            "threshold" => Ok(Strategy::Threshold),
            other => Err(SbssError::InvalidArgument(format!(
                "unknown strategy '{other}' (expected divide-conquer, forward or threshold)"
            ))),
        }
    }
}

/// One decision of an estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub r: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// `H0r` rejected, i.e. the evidence says `q > r`.
    pub rejected: bool,
}

/// Decision rule behind an estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Criterion {
    Alpha { alpha: f64 },
    ChiSquareQuantile { alpha: f64 },
    Constant { c_n: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub q_hat: usize,
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub trace: Vec<TraceEntry>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(SbssError::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

fn record(trace: &mut Vec<TraceEntry>, r: usize, p_value: f64, alpha: f64) -> bool {
    let rejected = p_value < alpha;
    trace.push(TraceEntry {
        r,
        p_value: Some(p_value),
        statistic: None,
        threshold: None,
        rejected,
    });
    rejected
}

/// Binary search over `r ∈ [0, p]` for the smallest `r` whose test is not
/// rejected at level `alpha`; `r = 0` is a candidate.
pub fn divide_conquer<F>(test: F, p: usize, alpha: f64) -> Result<EstimateResult>
where
    F: FnMut(usize) -> Result<f64>,
{
    divide_conquer_with(test, p, alpha, true)
}

/// As [`divide_conquer`]; with `include_zero = false` the search range
/// starts at `r = 1` and `q̂ ≥ 1`.
pub fn divide_conquer_with<F>(mut test: F, p: usize, alpha: f64, include_zero: bool) -> Result<EstimateResult>
where
    F: FnMut(usize) -> Result<f64>,
{
    check_alpha(alpha)?;
    let mut trace = Vec::new();
    let mut lower = 0;
    let mut upper = p;
    let mut middle = lower + (upper - lower) / 2;
    while middle != lower && middle != upper {
        if record(&mut trace, middle, test(middle)?, alpha) {
            lower = middle;
        } else {
            upper = middle;
        }
        middle = lower + (upper - lower) / 2;
    }
    // the loop never tests its lower bound, which is only untested when it is 0
    if include_zero && lower == 0 && upper == 1 && !record(&mut trace, 0, test(0)?, alpha) {
        upper = 0;
    }
    Ok(EstimateResult {
        q_hat: upper,
        strategy: Strategy::DivideConquer,
        criterion: Criterion::Alpha { alpha },
        trace,
    })
}

/// Tests `r = 0, 1, …, p-1` and returns the first non-rejected `r`, or `p`.
pub fn forward_estimate<F>(test: F, p: usize, alpha: f64) -> Result<EstimateResult>
where
    F: FnMut(usize) -> Result<f64>,
{
    forward_estimate_with(test, p, alpha, true)
}

pub fn forward_estimate_with<F>(mut test: F, p: usize, alpha: f64, include_zero: bool) -> Result<EstimateResult>
where
    F: FnMut(usize) -> Result<f64>,
{
    check_alpha(alpha)?;
    let mut trace = Vec::new();
    let start = usize::from(!include_zero);
    let mut q_hat = p;
    for r in start..p {
        if !record(&mut trace, r, test(r)?, alpha) {
            q_hat = r;
            break;
        }
    }
    Ok(EstimateResult {
        q_hat,
        strategy: Strategy::Forward,
        criterion: Criterion::Alpha { alpha },
        trace,
    })
}

/// `q̂ = min{r ∈ 1..p-1 : t_r ≤ c_n}`, or `p` when no statistic qualifies.
///
/// `stats` holds `t_1, …, t_{p-1}`, so `p = stats.len() + 1`.
pub fn threshold_estimate(stats: &[f64], c_n: f64) -> usize {
    stats
        .iter()
        .position(|&t| t <= c_n)
        .map_or(stats.len() + 1, |i| i + 1)
}

/// Threshold rule applied to a fit. Without `c_n` the threshold for `r` is
/// the `1 - alpha` quantile of the `χ²_{k(p-r)(p-r+1)/2}` null.
pub fn threshold_on_solution(
    sol: &SbssSolution,
    c_n: Option<f64>,
    alpha: f64,
    include_zero: bool,
) -> Result<EstimateResult> {
    let p = sol.p();
    let k = sol.k();
    let criterion = match c_n {
        Some(c) if c > 0.0 && c.is_finite() => Criterion::Constant { c_n: c },
        Some(c) => {
            return Err(SbssError::InvalidArgument(format!("c_n must be positive, got {c}")));
        }
        None => {
            check_alpha(alpha)?;
            if alpha >= 1.0 {
                return Err(SbssError::InvalidArgument(
                    "the chi-square threshold needs alpha < 1".into(),
                ));
            }
            Criterion::ChiSquareQuantile { alpha }
        }
    };
    let stats = statistics(sol);
    let mut trace = Vec::new();
    let mut q_hat = p;
    for (r, &t) in stats.iter().enumerate().skip(usize::from(!include_zero)) {
        let threshold = match c_n {
            Some(c) => c,
            None => chi2_quantile(1.0 - alpha, (k * df_each(p, r)) as f64),
        };
        let rejected = t > threshold;
        trace.push(TraceEntry {
            r,
            p_value: None,
            statistic: Some(t),
            threshold: Some(threshold),
            rejected,
        });
        if !rejected {
            q_hat = r;
            break;
        }
    }
    Ok(EstimateResult {
        q_hat,
        strategy: Strategy::Threshold,
        criterion,
        trace,
    })
}

/// Estimates `q` from one fit with the asymptotic tests (the fit does not
/// depend on `r`, so it is shared by every test of the sequence).
pub fn estimate_asymptotic(
    sol: &SbssSolution,
    strategy: Strategy,
    alpha: f64,
    include_zero: bool,
) -> Result<EstimateResult> {
    let stats = statistics(sol);
    let test = |r: usize| test_statistic(sol, r, stats[r]).map(|res| res.p_value);
    match strategy {
        Strategy::DivideConquer => divide_conquer_with(test, sol.p(), alpha, include_zero),
        Strategy::Forward => forward_estimate_with(test, sol.p(), alpha, include_zero),
        Strategy::Threshold => threshold_on_solution(sol, None, alpha, include_zero),
    }
}
