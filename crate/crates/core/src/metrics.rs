//! Sample-quality metrics: log-likelihood under the true product, covariance
//! error of fitted two-mode mixtures, and the assignment-based W2 distance.

use std::fmt;
use std::str::FromStr;

use crate::targets::{ProductTarget, FLOOR_LOG_DENSITY};
use crate::{Error, Point, Result};

/// Mean log-likelihood plus the number of samples outside the support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlReport {
    pub mean: f64,
    pub out_of_support: usize,
}

/// Mean of `log p(x)` under `target`; samples outside its support count as
/// [`FLOOR_LOG_DENSITY`].
pub fn ll_metric(samples: &[Point], target: &ProductTarget) -> Result<LlReport> {
    if samples.is_empty() {
        return Err(Error::Config("empty sample batch".into()));
    }
    let mut total = 0.0;
    let mut out_of_support = 0;
    for &x in samples {
        match target.log_density(x) {
            Some(l) => total += l,
            None => {
                total += FLOOR_LOG_DENSITY;
                out_of_support += 1;
            }
        }
    }
    Ok(LlReport {
        mean: total / samples.len() as f64,
        out_of_support,
    })
}

/// Symmetric 2x2 matrix stored as `[xx, xy, yy]`.
pub type Cov2 = [f64; 3];

fn det(c: &Cov2) -> f64 {
    c[0] * c[2] - c[1] * c[1]
}

fn gauss_logpdf(x: Point, mean: Point, c: &Cov2) -> f64 {
    let d = det(c);
    let dx = [x[0] - mean[0], x[1] - mean[1]];
    let q = (c[2] * dx[0] * dx[0] - 2.0 * c[1] * dx[0] * dx[1] + c[0] * dx[1] * dx[1]) / d;
    -0.5 * q - 0.5 * d.ln() - (2.0 * std::f64::consts::PI).ln()
}

/// Fitted two-component full-covariance mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub weights: [f64; 2],
    pub means: [Point; 2],
    pub covs: [Cov2; 2],
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Whether a covariance was regularised during fitting.
    pub regularised: bool,
}

/// EM settings for [`fit_gmm2`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub init_means: [Point; 2],
    pub init_var: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            init_means: [[0.0, 0.5], [0.0, -0.5]],
            init_var: 0.03 * 0.03,
            max_iterations: 200,
            tolerance: 1e-9,
        }
    }
}

/// Expectation-maximisation for a two-component Gaussian mixture. Stops
/// after `max_iterations` or when the mean log-likelihood changes by less
/// than `tolerance`.
pub fn fit_gmm2(xs: &[Point], config: &EmConfig) -> Result<GmmFit> {
    if xs.len() < 2 {
        return Err(Error::Config("EM needs at least 2 points".into()));
    }
    let n = xs.len();
    let mut weights: [f64; 2] = [0.5, 0.5];
    let mut means = config.init_means;
    let v = config.init_var;
    let mut covs = [[v, 0.0, v], [v, 0.0, v]];
    let mut resp = vec![[0.0; 2]; n];
    let mut prev = f64::NEG_INFINITY;
    let mut regularised = false;
    let mut iterations = 0;
    let mut ll = prev;
    for it in 0..config.max_iterations {
        iterations = it + 1;
        // E step
        let mut total = 0.0;
        for (x, r) in xs.iter().zip(resp.iter_mut()) {
            let l0 = weights[0].ln() + gauss_logpdf(*x, means[0], &covs[0]);
            let l1 = weights[1].ln() + gauss_logpdf(*x, means[1], &covs[1]);
            let m = l0.max(l1);
            let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
            total += lse;
            *r = [(l0 - lse).exp(), (l1 - lse).exp()];
        }
        ll = total / n as f64;
        // M step
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum::<f64>().max(1e-300);
            let mu = [
                xs.iter().zip(&resp).map(|(x, r)| r[k] * x[0]).sum::<f64>() / nk,
                xs.iter().zip(&resp).map(|(x, r)| r[k] * x[1]).sum::<f64>() / nk,
            ];
            let mut c = [0.0; 3];
            for (x, r) in xs.iter().zip(&resp) {
                let d = [x[0] - mu[0], x[1] - mu[1]];
                c[0] += r[k] * d[0] * d[0];
                c[1] += r[k] * d[0] * d[1];
                c[2] += r[k] * d[1] * d[1];
            }
            for e in &mut c {
                *e /= nk;
            }
            if det(&c) < 1e-12 {
                log::warn!("degenerate covariance in EM component {k}; adding 1e-9 I");
                c[0] += 1e-9;
                c[2] += 1e-9;
                regularised = true;
            }
            weights[k] = nk / n as f64;
            means[k] = mu;
            covs[k] = c;
        }
        if (ll - prev).abs() < config.tolerance {
            break;
        }
        prev = ll;
    }
    Ok(GmmFit {
        weights,
        means,
        covs,
        iterations,
        log_likelihood: ll,
        regularised,
    })
}

/// Pairs each component of `truth` (in index order) with the nearest unused
/// component of `model`; ties go to the lower index.
pub fn match_components(truth: &GmmFit, model: &GmmFit) -> [usize; 2] {
    let dist = |a: Point, b: Point| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let first = if dist(truth.means[0], model.means[1]) < dist(truth.means[0], model.means[0]) {
        1
    } else {
        0
    };
    [first, 1 - first]
}

fn frobenius_diff(a: &Cov2, b: &Cov2) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + 2.0 * d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Mean Frobenius norm of covariance differences between matched components
/// of two-mode fits to `model` and `truth`.
pub fn gmm_cov_metric(model: &[Point], truth: &[Point], config: &EmConfig) -> Result<f64> {
    let fm = fit_gmm2(model, config)?;
    let ft = fit_gmm2(truth, config)?;
    let pairs = match_components(&ft, &fm);
    Ok((0..2)
        .map(|k| frobenius_diff(&ft.covs[k], &fm.covs[pairs[k]]))
        .sum::<f64>()
        / 2.0)
}

/// Exact minimum-cost assignment for a square `n x n` row-major cost
/// matrix (shortest augmenting paths with dual potentials). Returns the
/// column assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::SizeMismatch(cost.len(), n * n));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Config("assignment costs must be finite".into()));
    }
    // 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Normalisation of the W2 distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum W2Convention {
    /// `sqrt(sum_i |x_i - y_pi(i)|^2)`.
    #[default]
    Sum,
    /// `sqrt(mean_i |x_i - y_pi(i)|^2)`.
    Mean,
}

impl fmt::Display for W2Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            W2Convention::Sum => "sum",
            W2Convention::Mean => "mean",
        })
    }
}

impl FromStr for W2Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(W2Convention::Sum),
            "mean" => Ok(W2Convention::Mean),
            other => Err(Error::Config(format!("unknown W2 convention `{other}`"))),
        }
    }
}

pub fn squared_distance_matrix(a: &[Point], b: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2));
        }
    }
    out
}

/// Optimal-assignment W2 distance between equal-size point sets.
pub fn w2_metric(a: &[Point], b: &[Point], convention: W2Convention) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len();
    let cost = squared_distance_matrix(a, b);
    let assignment = solve_assignment(&cost, n)?;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(match convention {
        W2Convention::Sum => total.sqrt(),
        W2Convention::Mean => (total / n as f64).sqrt(),
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub run_id: usize,
    pub parameterisation: String,
    pub sampler: String,
    pub estimator: String,
    pub points: Option<usize>,
    pub path: String,
    pub ll: f64,
    pub w2: f64,
    pub gmm: f64,
    pub oos_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "run_id,parameterisation,sampler,estimator,K,path,LL,W2,GMM,oos_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.parameterisation,
            self.sampler,
            self.estimator,
            self.points.map(|k| k.to_string()).unwrap_or_default(),
            self.path,
            self.ll,
            self.w2,
            self.gmm,
            self.oos_count
        )
    }

    pub fn parse_csv_row(line: &str, line_no: usize) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if f.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("bad {what} `{s}`")))
        };
        let int = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| err(format!("bad {what} `{s}`")))
        };
        Ok(Self {
            run_id: int(f[0], "run_id")?,
            parameterisation: f[1].to_string(),
            sampler: f[2].to_string(),
            estimator: f[3].to_string(),
            points: if f[4].is_empty() {
                None
            } else {
                Some(int(f[4], "K")?)
            },
            path: f[5].to_string(),
            ll: num(f[6], "LL")?,
            w2: num(f[7], "W2")?,
            gmm: num(f[8], "GMM")?,
            oos_count: int(f[9], "oos_count")?,
        })
    }
}
