use crate::data::RctRound;
use crate::error::{Error, Result};

/// Difference in means for one intervention, pooled over rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RctEstimate {
    pub tau: f64,
    /// `s1^2/n1 + s0^2/n0` with unbiased arm variances (0 for a single-record arm).
    pub var: f64,
    pub n: usize,
    /// Set when both arms have no spread, so `var == 0`.
    pub degenerate: bool,
}

#[derive(Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, y: f64) {
        self.n += 1;
        let d = y - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (y - self.mean);
    }

    fn var_of_mean(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64 / self.n as f64
        }
    }
}

/// Treated-minus-control mean among records whose randomized intervention is `j`.
pub fn rct_estimate(rounds: &[RctRound], j: usize) -> Result<RctEstimate> {
    let (mut treated, mut control) = (Moments::default(), Moments::default());
    for r in rounds {
        for rec in r.records().iter().filter(|rec| rec.w == j) {
            if rec.base.treated(j) {
                treated.push(rec.base.y());
            } else {
                control.push(rec.base.y());
            }
        }
    }
    if treated.n == 0 || control.n == 0 {
        return Err(Error::InsufficientData {
            j: j + 1,
            msg: format!(
                "randomized arm counts treated = {}, control = {}",
                treated.n, control.n
            ),
        });
    }
    let var = treated.var_of_mean() + control.var_of_mean();
    Ok(RctEstimate {
        tau: treated.mean - control.mean,
        var,
        n: treated.n + control.n,
        degenerate: var == 0.0,
    })
}

/// Number of randomized records with `w == j`, for each `j`.
pub fn rct_counts(rounds: &[RctRound], n_interventions: usize) -> Vec<usize> {
    let mut counts = vec![0; n_interventions];
    for r in rounds {
        for rec in r.records() {
            counts[rec.w] += 1;
        }
    }
    counts
}

/// Per-intervention variance of the difference in means; `None` where no
/// randomized records exist. Off-diagonal covariances are structurally zero.
pub fn upsilon_hat(rounds: &[RctRound], n_interventions: usize) -> Result<Vec<Option<f64>>> {
    rct_counts(rounds, n_interventions)
        .into_iter()
        .enumerate()
        .map(|(j, c)| if c == 0 { Ok(None) } else { rct_estimate(rounds, j).map(|e| Some(e.var)) })
        .collect()
}
