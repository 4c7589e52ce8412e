//! Naive reference implementations shared by the integration tests.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0))
}

pub fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn naive_center(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len() as f64;
    let d = m[0].len();
    let means: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    m.iter().map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn oracle_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        total += dot(ra, rb) / (dot(ra, ra).sqrt() * dot(rb, rb).sqrt());
    }
    total / a.len() as f64
}

/// Linear CKA through centred Gram matrices: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L)).
pub fn oracle_cka(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let gram = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| dot(&m[i], &m[j])).collect()).collect()
    };
    let centre = |g: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let row_means: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let total = row_means.iter().sum::<f64>() / n as f64;
        (0..n)
            .map(|i| (0..n).map(|j| g[i][j] - row_means[i] - row_means[j] + total).collect())
            .collect()
    };
    let k = centre(gram(a));
    let l = centre(gram(b));
    let hsic = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> f64 {
        (0..n).map(|i| (0..n).map(|j| x[i][j] * y[j][i]).sum::<f64>()).sum()
    };
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Neighbours by a full sort of all other samples on (distance, index).
pub fn oracle_neighbours(m: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..m.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..m.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = m[i].iter().zip(&m[j]).map(|(x, y)| (x - y) * (x - y)).sum();
                    (d, j)
                })
                .collect();
            others.sort_by(|x, y| x.partial_cmp(y).unwrap());
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn oracle_mutual_knn(a: &[Vec<f64>], b: &[Vec<f64>], k: usize) -> f64 {
    let na = oracle_neighbours(a, k);
    let nb = oracle_neighbours(b, k);
    let shared: usize = na
        .iter()
        .zip(&nb)
        .map(|(x, y)| x.iter().filter(|i| y.contains(i)).count())
        .sum();
    shared as f64 / (a.len() * k) as f64
}

pub fn seeded_matrix(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-3.0..3.0))
}

/// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
pub fn orthogonal(seed: u64, d: usize) -> Array2<f64> {
    let m = seeded_matrix(seed ^ 0x5eed, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = m.column(j).to_owned();
        for i in 0..j {
            let qi = q.column(i).to_owned();
            let proj = v.dot(&qi);
            v.scaled_add(-proj, &qi);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}
