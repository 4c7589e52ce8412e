//! Layer-to-layer representation similarity.
//!
//! Three metrics are provided, all evaluated on column-centered `n x d`
//! matrices whose rows correspond to the same input samples:
//!
//! * row-wise cosine similarity averaged over samples,
//! * linear CKA, `|Aj^T Ai|_F^2 / (|Ai^T Ai|_F |Aj^T Aj|_F)`,
//! * mutual k-nearest-neighbour overlap, the mean fraction of shared
//!   neighbours between the two spaces.
//!
//! A sample is never counted as its own neighbour and distance ties are
//! broken by ascending sample index.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationDump, CenteredView};
use crate::error::{Error, Result};
use crate::numfmt;
use crate::parallel;

pub const DEFAULT_K: usize = 8;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Cka,
    MutualKnn,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::Cka, Metric::MutualKnn];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Cka => "cka",
            Metric::MutualKnn => "mutual_knn",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "cka" => Ok(Metric::Cka),
            "mutual_knn" | "knn" => Ok(Metric::MutualKnn),
            other => Err(Error::Parameter(format!("unknown metric {other:?}"))),
        }
    }
}

/// `L x L` similarity matrix under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub metric: Metric,
    pub k: Option<usize>,
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn num_layers(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// L rows of L comma-separated values with 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|&v| numfmt::significant(v, 9)).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            metric: Metric,
            k: Option<usize>,
            num_layers: usize,
            values: Vec<Vec<f64>>,
            #[serde(skip_serializing_if = "Option::is_none")]
            note: Option<&'a str>,
        }
        let doc = Doc {
            metric: self.metric,
            k: self.k,
            num_layers: self.num_layers(),
            values: self.values.rows().into_iter().map(|r| r.to_vec()).collect(),
            note: None,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Mean similarity inside the two blocks `0..split` and `split..L`
    /// (0-based, diagonal included) and across them.
    pub fn block_means(&self, split: usize) -> (f64, f64) {
        block_means(self.values.view(), split)
    }
}

pub(crate) fn block_means(values: ArrayView2<'_, f64>, split: usize) -> (f64, f64) {
    let l = values.nrows();
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..l {
        for j in 0..l {
            if (i < split) == (j < split) {
                within += values[[i, j]];
                nw += 1;
            } else {
                cross += values[[i, j]];
                nc += 1;
            }
        }
    }
    (within / nw.max(1) as f64, cross / nc.max(1) as f64)
}

/// Per-sample k-nearest-neighbour index sets, in neighbour order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub k: usize,
    pub sets: Vec<Vec<usize>>,
}

impl NeighborSets {
    /// Mean overlap fraction with another neighbour structure on the same samples.
    pub fn overlap(&self, other: &NeighborSets) -> f64 {
        debug_assert_eq!(self.sets.len(), other.sets.len());
        debug_assert_eq!(self.k, other.k);
        let n = self.sets.len();
        let shared: usize = self
            .sets
            .iter()
            .zip(&other.sets)
            .map(|(a, b)| a.iter().filter(|x| b.contains(x)).count())
            .sum();
        shared as f64 / (n * self.k) as f64
    }
}

pub fn cosine_similarity(ai: &CenteredView, aj: &CenteredView) -> Result<f64> {
    if ai.view().dim() != aj.view().dim() {
        return Err(Error::Shape(format!(
            "cosine similarity needs equal shapes, got {:?} and {:?}",
            ai.view().dim(),
            aj.view().dim()
        )));
    }
    let (a, b) = (ai.view(), aj.view());
    let n = a.nrows();
    let mut total = 0.0;
    for (row, (x, y)) in a.rows().into_iter().zip(b.rows()).enumerate() {
        let nx = x.dot(&x).sqrt();
        let ny = y.dot(&y).sqrt();
        if nx < NORM_FLOOR {
            return Err(Error::DegenerateRow { layer: 0, row });
        }
        if ny < NORM_FLOOR {
            return Err(Error::DegenerateRow { layer: 1, row });
        }
        total += x.dot(&y) / (nx * ny);
    }
    Ok(total / n as f64)
}

pub fn cka(ai: &CenteredView, aj: &CenteredView) -> Result<f64> {
    if ai.nrows() != aj.nrows() {
        return Err(Error::Shape(format!(
            "CKA needs equal sample counts, got {} and {}",
            ai.nrows(),
            aj.nrows()
        )));
    }
    let self_i = gram_norm(ai.view());
    let self_j = gram_norm(aj.view());
    if self_i == 0.0 || self_j == 0.0 {
        return Err(Error::DegenerateInput(
            "CKA of an all-zero matrix is undefined".into(),
        ));
    }
    Ok(cka_with_norms(ai.view(), aj.view(), self_i, self_j))
}

fn gram_norm(a: ArrayView2<'_, f64>) -> f64 {
    frobenius_sq(&a.t().dot(&a)).sqrt()
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn cka_with_norms(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, na: f64, nb: f64) -> f64 {
    frobenius_sq(&b.t().dot(&a)) / (na * nb)
}

pub fn knn_sets(a: &CenteredView, k: usize) -> Result<NeighborSets> {
    let n = a.nrows();
    check_k(k, n)?;
    let m = a.view();
    let mut dist = vec![0.0f64; n * n];
    for p in 0..n {
        for q in (p + 1)..n {
            let d: f64 = m
                .row(p)
                .iter()
                .zip(m.row(q).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dist[p * n + q] = d;
            dist[q * n + p] = d;
        }
    }
    let sets = parallel::map_indices(n, |p| {
        let row = &dist[p * n..(p + 1) * n];
        let by_distance = |x: &usize, y: &usize| -> Ordering {
            row[*x].total_cmp(&row[*y]).then(x.cmp(y))
        };
        let mut others: Vec<usize> = (0..n).filter(|&q| q != p).collect();
        if k < others.len() {
            others.select_nth_unstable_by(k - 1, by_distance);
            others.truncate(k);
        }
        others.sort_by(by_distance);
        others
    });
    Ok(NeighborSets { k, sets })
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!(
            "k must satisfy 0 < k < n (k={k}, n={n})"
        )));
    }
    Ok(())
}

pub fn mutual_knn(ai: &CenteredView, aj: &CenteredView, k: usize) -> Result<f64> {
    if ai.nrows() != aj.nrows() {
        return Err(Error::Shape(format!(
            "mutual kNN needs equal sample counts, got {} and {}",
            ai.nrows(),
            aj.nrows()
        )));
    }
    Ok(knn_sets(ai, k)?.overlap(&knn_sets(aj, k)?))
}

/// Similarity between every pair of layers of `dump`, on centered layers.
///
/// Only the upper triangle is computed; the lower one is mirrored.
pub fn similarity_matrix(
    dump: &ActivationDump,
    metric: Metric,
    k: Option<usize>,
) -> Result<SimilarityMatrix> {
    dump.validate()?;
    let l = dump.num_layers();
    let centered: Vec<CenteredView> = parallel::map_indices(l, |i| dump.centered_layer(i));
    let pairs: Vec<(usize, usize)> = (0..l)
        .flat_map(|i| (i..l).map(move |j| (i, j)))
        .collect();
    let annotate = |i: usize, j: usize| {
        move |e: Error| {
            let e = match e {
                Error::DegenerateRow { layer, row } => Error::DegenerateRow {
                    layer: if layer == 0 { i } else { j },
                    row,
                },
                other => other,
            };
            Error::LayerPair {
                i,
                j,
                source: Box::new(e),
            }
        }
    };

    let (k_used, scores) = match metric {
        Metric::Cosine => {
            let s = parallel::try_map_indices(pairs.len(), |p| {
                let (i, j) = pairs[p];
                cosine_similarity(&centered[i], &centered[j]).map_err(annotate(i, j))
            })?;
            (None, s)
        }
        Metric::Cka => {
            let norms = parallel::map_slice(&centered, |c| gram_norm(c.view()));
            if let Some(i) = norms.iter().position(|&v| v == 0.0) {
                return Err(annotate(i, i)(Error::DegenerateInput(format!(
                    "layer {i} is all zero after centering"
                ))));
            }
            let s = parallel::map_indices(pairs.len(), |p| {
                let (i, j) = pairs[p];
                cka_with_norms(centered[i].view(), centered[j].view(), norms[i], norms[j])
            });
            (None, s)
        }
        Metric::MutualKnn => {
            let k = k.unwrap_or(DEFAULT_K);
            let sets = parallel::try_map_indices(l, |i| knn_sets(&centered[i], k).map_err(annotate(i, i)))?;
            let s = parallel::map_indices(pairs.len(), |p| {
                let (i, j) = pairs[p];
                sets[i].overlap(&sets[j])
            });
            (Some(k), s)
        }
    };

    let mut values = Array2::zeros((l, l));
    for (&(i, j), &v) in pairs.iter().zip(&scores) {
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    Ok(SimilarityMatrix {
        metric,
        k: k_used,
        values,
    })
}
