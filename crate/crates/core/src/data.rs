//! Synthetic datasets with seeded, reproducible generation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::GaussianMixture;
use crate::tensor::Tensor;

const T_MIN: f64 = 1.5 * std::f64::consts::PI;
const T_MAX: f64 = 4.5 * std::f64::consts::PI;

/// Default isotropic noise added to swiss-roll points.
pub const SWISS_ROLL_NOISE: f64 = 0.05;

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SwissRoll { n: usize, noise_std: f64, seed: u64 },
    Gmm { mixture: GaussianMixture, n: usize, seed: u64 },
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::SwissRoll { n, noise_std, seed } => swiss_roll(*n, *noise_std, *seed),
            DatasetSpec::Gmm { mixture, n, seed } => gmm_dataset(mixture, *n, *seed),
        }
    }
}

/// Points plus the spec that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Tensor,
    pub spec: DatasetSpec,
}

/// `s_norm` making the noiseless roll unit-RMS: `E[t^2]` for `t ~ U(a, b)`
/// is `(a^2 + ab + b^2) / 3`.
pub fn swiss_roll_scale() -> f64 {
    ((T_MIN * T_MIN + T_MIN * T_MAX + T_MAX * T_MAX) / 3.0).sqrt()
}

/// Two-turn spiral `(t cos t, t sin t) / s_norm` plus isotropic noise.
pub fn swiss_roll(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !(noise_std >= 0.0) {
        return Err(Error::contract(format!("swiss_roll needs n >= 1 and noise >= 0, got {n}, {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = Uniform::new(T_MIN, T_MAX).expect("valid range");
    let s = swiss_roll_scale();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t: f64 = ts.sample(&mut rng);
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        data.push(t * t.cos() / s + noise_std * e0);
        data.push(t * t.sin() / s + noise_std * e1);
    }
    Ok(Dataset {
        points: Tensor::matrix(n, 2, data)?,
        spec: DatasetSpec::SwissRoll { n, noise_std, seed },
    })
}

/// I.i.d. draws from a Gaussian mixture.
pub fn gmm_dataset(mixture: &GaussianMixture, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::contract("gmm_dataset needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Dataset {
        points: mixture.sample(n, &mut rng),
        spec: DatasetSpec::Gmm { mixture: mixture.clone(), n, seed },
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Per-dimension RMS, used as `sigma_data`.
    pub fn rms(&self) -> f64 {
        (self.points.sq_norm() / self.points.numel() as f64).sqrt()
    }

    /// Splits into `(train, holdout)` with a seeded shuffle; the holdout
    /// gets `round(fraction * n)` rows.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> Result<(Tensor, Tensor)> {
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::contract("holdout fraction must be in [0, 1)"));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let h = (holdout_fraction * n as f64).round() as usize;
        Ok((self.points.select_rows(&idx[h..]), self.points.select_rows(&idx[..h])))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(&self.points, path)
    }
}

/// Float CSV with header `x0,x1,...`. Zero rows still get a header.
pub fn write_csv(points: &Tensor, path: &Path) -> Result<()> {
    let d = if points.shape().len() == 2 { points.cols() } else { 0 };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for r in 0..points.rows() {
        let row: Vec<String> = points.row(r).iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`] (header required).
pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::contract("CSV has no header"))?;
    let d = if header.trim().is_empty() { 0 } else { header.split(',').count() };
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::contract(format!("CSV line {}: {e}", i + 2)))?;
        if vals.len() != d {
            return Err(Error::contract(format!("CSV line {} has {} fields, expected {d}", i + 2, vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::matrix(rows, d, data)
}

/// Epoch-wise shuffled minibatches over the rows of `points`. The
/// trailing partial batch of each epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    points: Tensor,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(points: Tensor, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > points.rows() {
            return Err(Error::contract(format!(
                "batch size {batch_size} for {} points",
                points.rows()
            )));
        }
        let order = (0..points.rows()).collect();
        let mut it = Self {
            points,
            batch_size,
            order,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.points.rows() / self.batch_size
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let idx = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        idx
    }

    pub fn next_batch(&mut self) -> Tensor {
        let idx = self.next_indices();
        self.points.select_rows(&idx)
    }

    /// Position inside the current epoch, for checkpointing.
    pub fn state(&self) -> (Vec<usize>, usize, ChaCha8Rng) {
        (self.order.clone(), self.cursor, self.rng.clone())
    }

    pub fn restore(&mut self, order: Vec<usize>, cursor: usize, rng: ChaCha8Rng) -> Result<()> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..self.points.rows()).collect::<Vec<_>>() || cursor > order.len() {
            return Err(Error::Checkpoint("batch iterator state does not match dataset".into()));
        }
        self.order = order;
        self.cursor = cursor;
        self.rng = rng;
        Ok(())
    }
}

impl Iterator for BatchIterator {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_roll_radius_equals_angle() {
        let d = swiss_roll(2000, 0.0, 1).unwrap();
        let s = swiss_roll_scale();
        for r in 0..d.len() {
            let p = d.points.row(r);
            let t = (p[0] * p[0] + p[1] * p[1]).sqrt() * s;
            assert!((T_MIN..=T_MAX).contains(&t));
            // recover t from the angle, up to whole turns
            let ang = p[1].atan2(p[0]);
            let turns = ((t - ang) / std::f64::consts::TAU).round();
            assert!((ang + turns * std::f64::consts::TAU - t).abs() < 1e-9);
        }
    }

    #[test]
    fn roll_is_deterministic_and_unit_rms() {
        assert_eq!(swiss_roll(100, 0.05, 3).unwrap(), swiss_roll(100, 0.05, 3).unwrap());
        assert_ne!(swiss_roll(100, 0.05, 3).unwrap().points, swiss_roll(100, 0.05, 4).unwrap().points);
        let d = swiss_roll(100_000, 0.05, 5).unwrap();
        let rms_norm = (d.points.sq_norm() / d.len() as f64).sqrt();
        assert!((rms_norm - 1.0).abs() < 0.05, "{rms_norm}");
        assert!(swiss_roll(0, 0.05, 0).is_err());
    }

    #[test]
    fn gmm_dataset_cases() {
        let gm = GaussianMixture::gaussian(vec![1.0, -2.0], 0.25).unwrap();
        let n = 20_000;
        let d = gmm_dataset(&gm, n, 7).unwrap();
        for j in 0..2 {
            let m = (0..n).map(|r| d.points.get2(r, j)).sum::<f64>() / n as f64;
            assert!((m - gm.means()[0][j]).abs() < 3.0 * 0.5 / (n as f64).sqrt());
        }
        assert_eq!(d, gmm_dataset(&gm, n, 7).unwrap());
        let two = GaussianMixture::new(vec![1.0, 0.0], vec![vec![-5.0], vec![5.0]], vec![0.01, 0.01]).unwrap();
        let d = gmm_dataset(&two, 1000, 1).unwrap();
        assert!(d.points.data().iter().all(|&x| x < 0.0));
    }

    #[test]
    fn split_is_disjoint_partition() {
        let d = swiss_roll(1000, 0.05, 2).unwrap();
        let (train, hold) = d.split(0.2, 9).unwrap();
        assert_eq!((train.rows(), hold.rows()), (800, 200));
        let key = |p: &[f64]| (p[0].to_bits(), p[1].to_bits());
        let tset: std::collections::HashSet<_> = (0..train.rows()).map(|r| key(train.row(r))).collect();
        assert!((0..hold.rows()).all(|r| !tset.contains(&key(hold.row(r)))));
    }

    #[test]
    fn batches_partition_each_epoch() {
        let pts = Tensor::column((0..12).map(f64::from).collect());
        let mut it = BatchIterator::new(pts.clone(), 4, 0).unwrap();
        let mut seen: Vec<f64> = (0..3).flat_map(|_| it.next_batch().into_data()).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, pts.data());
        let mut full = BatchIterator::new(pts.clone(), 12, 1).unwrap();
        let mut b = full.next_batch().into_data();
        b.sort_by(f64::total_cmp);
        assert_eq!(b, pts.data());
        let a: Vec<_> = BatchIterator::new(pts.clone(), 5, 3).unwrap().take(7).collect();
        let c: Vec<_> = BatchIterator::new(pts.clone(), 5, 3).unwrap().take(7).collect();
        assert_eq!(a, c);
        assert!(BatchIterator::new(pts, 13, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = swiss_roll(50, 0.05, 1).unwrap();
        d.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(read_csv(&path).unwrap(), d.points);
        write_csv(&Tensor::zeros(&[0, 2]), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x0,x1\n");
        assert_eq!(read_csv(&path).unwrap().rows(), 0);
    }
}
