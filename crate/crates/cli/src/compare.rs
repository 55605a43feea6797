//! Policy ordering reports over sweep results files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;
use crate::table::Table;

/// One parsed sweep row.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub policy: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Grid point key: the textual `lambda` and `epsilon` cells.
type Point = (String, String);

#[derive(Clone, Debug, PartialEq)]
pub struct ResultSet {
    pub path: PathBuf,
    pub rows: Vec<ResultRow>,
}

fn parse_opt(path: &Path, field: &str, s: &str) -> Result<Option<f64>, CliError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| CliError::Results {
        path: path.to_path_buf(),
        message: format!("{field}: {s:?} is not a number"),
    })
}

impl ResultSet {
    /// Reads a sweep CSV (columns `lambda, epsilon, policy, mean_cost,
    /// ci_low, ci_high, ...`).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Results {
            path: path.to_path_buf(),
            message: m,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| bad(format!("missing column {name:?}")))
        };
        let (cl, ce, cp, cm, clo, chi) = (
            col("lambda")?,
            col("epsilon")?,
            col("policy")?,
            col("mean_cost")?,
            col("ci_low")?,
            col("ci_high")?,
        );
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |k: usize, f: &str| -> Result<f64, CliError> {
                parse_opt(path, f, &rec[k])?.ok_or_else(|| bad(format!("{f}: empty")))
            };
            rows.push(ResultRow {
                lambda: parse_opt(path, "lambda", &rec[cl])?,
                epsilon: parse_opt(path, "epsilon", &rec[ce])?,
                policy: rec[cp].to_string(),
                mean: num(cm, "mean_cost")?,
                ci_low: num(clo, "ci_low")?,
                ci_high: num(chi, "ci_high")?,
            });
        }
        Ok(ResultSet {
            path: path.to_path_buf(),
            rows,
        })
    }

    pub fn from_rows(path: impl Into<PathBuf>, rows: Vec<ResultRow>) -> Self {
        ResultSet {
            path: path.into(),
            rows,
        }
    }

    fn points(&self) -> Vec<Point> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.rows {
            let p = point(r);
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        out
    }

    fn by_key(&self) -> BTreeMap<(Point, String), &ResultRow> {
        self.rows.iter().map(|r| ((point(r), r.policy.clone()), r)).collect()
    }

    /// Mean over grid points of `(best benchmark - baseline) / best benchmark`.
    pub fn mean_relative_gain(&self, baseline: &str) -> Option<f64> {
        let verdicts = ordering(self, baseline);
        let mut gains = Vec::new();
        for p in self.points() {
            let best = verdicts
                .iter()
                .filter(|v| v.point == p)
                .min_by(|a, b| a.benchmark_mean.total_cmp(&b.benchmark_mean))?;
            gains.push(best.relative_gain);
        }
        (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64)
    }
}

fn point(r: &ResultRow) -> Point {
    let s = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    (s(r.lambda), s(r.epsilon))
}

/// Baseline against one benchmark at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    #[serde(skip)]
    point: Point,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub benchmark: String,
    pub baseline_mean: f64,
    pub benchmark_mean: f64,
    pub relative_gain: f64,
    pub baseline_not_worse: bool,
    /// Baseline CI lies entirely below the benchmark CI.
    pub ci_separated: bool,
}

pub fn ordering(set: &ResultSet, baseline: &str) -> Vec<Verdict> {
    let by_key = set.by_key();
    let mut out = Vec::new();
    for p in set.points() {
        let Some(base) = by_key.get(&(p.clone(), baseline.to_string())) else { continue };
        for r in set.rows.iter().filter(|r| point(r) == p && r.policy != baseline) {
            out.push(Verdict {
                point: p.clone(),
                lambda: r.lambda,
                epsilon: r.epsilon,
                benchmark: r.policy.clone(),
                baseline_mean: base.mean,
                benchmark_mean: r.mean,
                relative_gain: if r.mean != 0.0 { (r.mean - base.mean) / r.mean } else { 0.0 },
                baseline_not_worse: base.mean <= r.mean,
                ci_separated: base.ci_high < r.ci_low,
            });
        }
    }
    out
}

/// Same policy, same grid point, two result files.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub policy: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub difference: f64,
    pub ci_separated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub verdicts: Vec<Verdict>,
    pub paired: Vec<PairedRow>,
    pub points: usize,
    pub baseline_not_worse_fraction: f64,
    pub separated_fraction: f64,
    pub mean_relative_gain_a: Option<f64>,
    pub mean_relative_gain_b: Option<f64>,
}

fn fraction(xs: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for x in xs {
        n += 1;
        hit += x as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// With one file: baseline against every other policy per grid point. With
/// two: additionally pairs identical keys across files, which must cover the
/// same grid.
pub fn compare(a: &ResultSet, b: Option<&ResultSet>, baseline: &str) -> Result<Comparison, CliError> {
    let verdicts = ordering(a, baseline);
    let mut paired = Vec::new();
    if let Some(b) = b {
        let ka = a.by_key();
        let kb = b.by_key();
        let keys_a: BTreeSet<_> = ka.keys().collect();
        let keys_b: BTreeSet<_> = kb.keys().collect();
        if keys_a != keys_b {
            let only_a = keys_a.difference(&keys_b).count();
            let only_b = keys_b.difference(&keys_a).count();
            return Err(CliError::GridMismatch(format!(
                "{} has {only_a} rows without counterpart, {} has {only_b}",
                a.path.display(),
                b.path.display()
            )));
        }
        for r in &a.rows {
            let other = kb[&(point(r), r.policy.clone())];
            paired.push(PairedRow {
                lambda: r.lambda,
                epsilon: r.epsilon,
                policy: r.policy.clone(),
                mean_a: r.mean,
                mean_b: other.mean,
                difference: r.mean - other.mean,
                ci_separated: r.ci_high < other.ci_low || other.ci_high < r.ci_low,
            });
        }
    }
    let separated = if b.is_some() {
        fraction(paired.iter().map(|p| p.ci_separated))
    } else {
        fraction(verdicts.iter().map(|v| v.ci_separated))
    };
    Ok(Comparison {
        baseline: baseline.to_string(),
        points: a.points().len(),
        baseline_not_worse_fraction: fraction(verdicts.iter().map(|v| v.baseline_not_worse)),
        separated_fraction: separated,
        mean_relative_gain_a: a.mean_relative_gain(baseline),
        mean_relative_gain_b: b.and_then(|b| b.mean_relative_gain(baseline)),
        verdicts,
        paired,
    })
}

impl Comparison {
    pub fn table(&self) -> Table {
        if !self.paired.is_empty() {
            let mut t = Table::new(&["lambda", "epsilon", "policy", "mean_a", "mean_b", "difference", "ci_separated"]);
            for p in &self.paired {
                t.push(vec![
                    p.lambda.into(),
                    p.epsilon.into(),
                    p.policy.as_str().into(),
                    p.mean_a.into(),
                    p.mean_b.into(),
                    p.difference.into(),
                    p.ci_separated.into(),
                ]);
            }
            return t;
        }
        let mut t = Table::new(&[
            "lambda",
            "epsilon",
            "benchmark",
            "baseline_mean",
            "benchmark_mean",
            "relative_gain",
            "baseline_not_worse",
            "ci_separated",
        ]);
        for v in &self.verdicts {
            t.push(vec![
                v.lambda.into(),
                v.epsilon.into(),
                v.benchmark.as_str().into(),
                v.baseline_mean.into(),
                v.benchmark_mean.into(),
                v.relative_gain.into(),
                v.baseline_not_worse.into(),
                v.ci_separated.into(),
            ]);
        }
        t
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| v.to_string());
        vec![
            format!("grid points: {}", self.points),
            format!("{} not worse than benchmark: {}", self.baseline, self.baseline_not_worse_fraction),
            format!("CI-separated fraction: {}", self.separated_fraction),
            format!("mean relative gain (A): {}", opt(self.mean_relative_gain_a)),
            format!("mean relative gain (B): {}", opt(self.mean_relative_gain_b)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(l: f64, p: &str, m: f64, half: f64) -> ResultRow {
        ResultRow {
            lambda: Some(l),
            epsilon: Some(0.2),
            policy: p.into(),
            mean: m,
            ci_low: m - half,
            ci_high: m + half,
        }
    }

    fn set() -> ResultSet {
        ResultSet::from_rows(
            "a.csv",
            vec![
                row(0.1, "whittle", 0.40, 0.01),
                row(0.1, "age_greedy", 0.50, 0.01),
                row(0.1, "on_demand_whittle", 0.45, 0.01),
                row(0.5, "whittle", 0.20, 0.01),
                row(0.5, "age_greedy", 0.21, 0.01),
                row(0.5, "on_demand_whittle", 0.20, 0.01),
            ],
        )
    }

    #[test]
    fn single_file_ordering() {
        let c = compare(&set(), None, "whittle").unwrap();
        assert_eq!(c.points, 2);
        assert_eq!(c.verdicts.len(), 4);
        assert_eq!(c.baseline_not_worse_fraction, 1.0);
        assert!(c.verdicts[0].ci_separated);
        assert!(!c.verdicts[2].ci_separated);
        let g = c.mean_relative_gain_a.unwrap();
        assert!((g - (0.05 / 0.45 + 0.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_files_have_no_differences() {
        let s = set();
        let c = compare(&s, Some(&s), "whittle").unwrap();
        assert!(c.paired.iter().all(|p| p.difference == 0.0 && !p.ci_separated));
        assert_eq!(c.separated_fraction, 0.0);
    }

    #[test]
    fn grid_mismatch() {
        let mut other = set();
        other.rows.pop();
        assert!(matches!(compare(&set(), Some(&other), "whittle"), Err(CliError::GridMismatch(_))));
    }
}
