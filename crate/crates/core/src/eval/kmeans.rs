use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl KMeans {
    pub fn assign(&self, x: ArrayView1<f64>) -> usize {
        nearest(&self.centers, x).0
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &Array2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

const INIT_CANDIDATES: usize = 64;

/// Lloyd iterations from a seeded farthest-point initialization over sampled candidates.
pub fn kmeans(data: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = data.nrows();
    if k == 0 || n < k {
        return Err(Error::Vocabulary(format!("cannot fit {k} clusters to {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((k, data.ncols()));
    centers.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut min_d: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let cands = sample(&mut rng, n, INIT_CANDIDATES.min(n));
        let pick = cands
            .iter()
            .max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a)))
            .expect("candidates");
        centers.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(r, centers.row(c)));
        }
    }
    let mut assignments = vec![usize::MAX; n];
    let mut inertia = 0.0;
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        inertia = 0.0;
        for (i, r) in data.rows().into_iter().enumerate() {
            let (c, d) = nearest(&centers, r);
            inertia += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in data.rows().into_iter().enumerate() {
            let mut s = sums.row_mut(assignments[i]);
            s += &r;
            counts[assignments[i]] += 1;
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        inertia,
    })
}

/// Mean silhouette coefficient; singleton clusters score 0.
pub fn silhouette(data: ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = data.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = data.row(i);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(xi, data.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}
