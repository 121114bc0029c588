//! Two-sample metrics and scatter plots for low-dimensional samples.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::gaussian_noise;
use crate::tensor::Tensor;

pub const DEFAULT_PROJECTIONS: usize = 128;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of `|a_i - b_j|` over all pairs, accumulated row by row so the
/// order of additions is fixed.
fn cross_sum(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .map(|i| {
            let ai = a.row(i);
            (0..b.rows()).map(|j| dist(ai, b.row(j))).sum::<f64>()
        })
        .sum()
}

/// Sum over ordered pairs `i != j` within one set.
fn self_sum(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        let ai = a.row(i);
        for j in i + 1..n {
            s += dist(ai, a.row(j));
        }
    }
    2.0 * s
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::contract("two-sample metrics need non-empty sets"));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("sample dims {} vs {}", a.cols(), b.cols())));
    }
    Ok(())
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` with the within-set means taken
/// over distinct pairs. Can be slightly negative.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let aa = if a.rows() > 1 { self_sum(a) / (n * (n - 1.0)) } else { 0.0 };
    let bb = if b.rows() > 1 { self_sum(b) / (m * (m - 1.0)) } else { 0.0 };
    Ok(2.0 * cross_sum(a, b) / (n * m) - aa - bb)
}

/// Plug-in (V-statistic) energy distance; non-negative and exactly zero
/// for identical sets.
pub fn energy_distance_plugin(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    // full ordered-pair sums so identical inputs cancel exactly
    let v = 2.0 * cross_sum(a, b) / (n * m) - cross_sum(a, a) / (n * n) - cross_sum(b, b) / (m * m);
    Ok(v.max(0.0))
}

/// Random unit directions, reproducible from `seed`.
pub fn random_directions(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = gaussian_noise(&mut rng, 1, d).into_data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// 1-D Wasserstein-1 distance between two empirical distributions:
/// the integral of `|F_a^{-1}(u) - F_b^{-1}(u)|` over `u`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    // walk the merged quantile breakpoints k/n and l/m
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Mean over `n_projections` random directions of the projected 1-D
/// Wasserstein-1 distance.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    check_pair(a, b)?;
    if n_projections == 0 {
        return Err(Error::contract("need at least one projection"));
    }
    let project = |t: &Tensor, u: &[f64]| -> Vec<f64> {
        (0..t.rows()).map(|r| t.row(r).iter().zip(u).map(|(x, y)| x * y).sum()).collect()
    };
    let dirs = random_directions(a.cols(), n_projections, seed);
    Ok(dirs.iter().map(|u| wasserstein_1d(&project(a, u), &project(b, u))).sum::<f64>() / n_projections as f64)
}

/// Squared distance from every row of `q` to its nearest row of `r`,
/// skipping identical indices when `exclude_self` is set (same set).
fn nearest_sq(q: &Tensor, r: &Tensor, exclude_self: bool) -> Vec<f64> {
    (0..q.rows())
        .map(|i| {
            let qi = q.row(i);
            let mut best = f64::INFINITY;
            for j in 0..r.rows() {
                if exclude_self && i == j {
                    continue;
                }
                let d: f64 = qi.iter().zip(r.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best {
                    best = d;
                }
            }
            best
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Three times the median nearest-neighbour spacing within `reference`.
pub fn coverage_radius(reference: &Tensor) -> Result<f64> {
    if reference.rows() < 2 {
        return Err(Error::contract("coverage radius needs at least two reference points"));
    }
    Ok(3.0 * median(nearest_sq(reference, reference, true)).sqrt())
}

/// `(coverage, adherence)`: the fraction of reference points with a
/// generated point within `delta`, and the fraction of generated points
/// within `delta` of a reference point.
pub fn coverage_adherence(generated: &Tensor, reference: &Tensor, delta: f64) -> Result<(f64, f64)> {
    check_pair(generated, reference)?;
    let d2 = delta * delta;
    let cov = nearest_sq(reference, generated, false).iter().filter(|&&d| d <= d2).count();
    let adh = nearest_sq(generated, reference, false).iter().filter(|&&d| d <= d2).count();
    Ok((cov as f64 / reference.rows() as f64, adh as f64 / generated.rows() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Plug-in estimate.
    pub energy_distance: f64,
    pub energy_distance_unbiased: f64,
    pub sliced_wasserstein: f64,
    pub n_projections: usize,
    pub projection_seed: u64,
    pub coverage: f64,
    pub adherence: f64,
    pub delta: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub sample_seed: u64,
}

impl EvalReport {
    pub fn compute(generated: &Tensor, reference: &Tensor, projection_seed: u64, sample_seed: u64) -> Result<Self> {
        let delta = coverage_radius(reference)?;
        let (coverage, adherence) = coverage_adherence(generated, reference, delta)?;
        Ok(Self {
            energy_distance: energy_distance_plugin(generated, reference)?,
            energy_distance_unbiased: energy_distance(generated, reference)?,
            sliced_wasserstein: sliced_wasserstein(generated, reference, DEFAULT_PROJECTIONS, projection_seed)?,
            n_projections: DEFAULT_PROJECTIONS,
            projection_seed,
            coverage,
            adherence,
            delta,
            n_generated: generated.rows(),
            n_reference: reference.rows(),
            sample_seed,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Scatter plot of generated samples over a reference set, as SVG with
/// one `<g>` layer per set and a legend.
pub fn scatter_svg(samples: &Tensor, reference: &Tensor) -> Result<String> {
    for t in [samples, reference] {
        if t.rows() > 0 && t.cols() != 2 {
            return Err(Error::Shape(format!("scatter plots need 2-D points, got {:?}", t.shape())));
        }
    }
    let (w, h, pad) = (480.0, 480.0, 40.0);
    let all: Vec<&[f64]> = (0..reference.rows())
        .map(|r| reference.row(r))
        .chain((0..samples.rows()).map(|r| samples.row(r)))
        .collect();
    let (mut lo, mut hi) = ([-1.0f64, -1.0], [1.0f64, 1.0]);
    if !all.is_empty() {
        lo = [f64::INFINITY; 2];
        hi = [f64::NEG_INFINITY; 2];
        for p in &all {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..2 {
            if hi[k] - lo[k] < 1e-12 {
                lo[k] -= 1.0;
                hi[k] += 1.0;
            }
        }
    }
    let sx = |x: f64| pad + (x - lo[0]) / (hi[0] - lo[0]) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - lo[1]) / (hi[1] - lo[1]) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r##"<g id="axes" stroke="#444444" stroke-width="1"><line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y}"/></g>"##,
        y = h - pad,
        x2 = w - pad
    );
    for (id, color, t) in [("reference", "#9aa5b1", reference), ("samples", "#d9480f", samples)] {
        let _ = writeln!(s, r#"<g id="{id}" fill="{color}" fill-opacity="0.6">"#);
        for r in 0..t.rows() {
            let p = t.row(r);
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, sx(p[0]), sy(p[1]));
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r##"<g id="legend" font-family="sans-serif" font-size="12"><rect x="{x}" y="12" width="10" height="10" fill="#9aa5b1"/><text x="{tx}" y="21">reference ({nr})</text><rect x="{x}" y="28" width="10" height="10" fill="#d9480f"/><text x="{tx}" y="37">samples ({ns})</text></g>"##,
        x = w - 150.0,
        tx = w - 135.0,
        nr = reference.rows(),
        ns = samples.rows()
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_scatter_svg(samples: &Tensor, reference: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, scatter_svg(samples, reference)?)?;
    Ok(())
}
