//! Depth pruning: block-influence scores, deletion orders, stitching and
//! retention curves.
//!
//! Blocks are numbered from 1 as in the unpruned stack. Block 1 is never
//! deleted. Deleted blocks are simply skipped; the survivors keep their
//! weights and feed into each other directly.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationDump, CenteredView};
use crate::error::{Error, Result};
use crate::model::{evaluate, SynthDataset, ToyTransformer};
use crate::numfmt;
use crate::parallel;
use crate::rng::substream;
use crate::similarity::{self, block_means, SimilarityMatrix, DEFAULT_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiVariant {
    CosineBi,
    KnnBi,
}

/// Block influence `1 - S(b-1, b)` for blocks `b = 2..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfluence {
    pub variant: BiVariant,
    pub k: Option<usize>,
    /// `scores[b - 2]` belongs to block `b`.
    pub scores: Vec<f64>,
}

impl BlockInfluence {
    pub fn score_of(&self, block: usize) -> Option<f64> {
        block.checked_sub(2).and_then(|i| self.scores.get(i)).copied()
    }
}

pub fn block_influence(dump: &ActivationDump, variant: BiVariant, k: Option<usize>) -> Result<BlockInfluence> {
    dump.validate()?;
    let l = dump.num_layers();
    let centered: Vec<CenteredView> = parallel::map_indices(l, |i| dump.centered_layer(i));
    let pair_err = |i: usize, j: usize| {
        move |e: Error| Error::LayerPair {
            i,
            j,
            source: Box::new(match e {
                Error::DegenerateRow { layer, row } => Error::DegenerateRow {
                    layer: if layer == 0 { i } else { j },
                    row,
                },
                other => other,
            }),
        }
    };
    let (k_used, scores) = match variant {
        BiVariant::CosineBi => {
            let s = parallel::try_map_indices(l - 1, |p| {
                similarity::cosine_similarity(&centered[p], &centered[p + 1])
                    .map(|s| 1.0 - s)
                    .map_err(pair_err(p, p + 1))
            })?;
            (None, s)
        }
        BiVariant::KnnBi => {
            let k = k.unwrap_or(DEFAULT_K);
            let sets = parallel::try_map_indices(l, |i| {
                similarity::knn_sets(&centered[i], k).map_err(pair_err(i, i))
            })?;
            (Some(k), (0..l - 1).map(|p| 1.0 - sets[p].overlap(&sets[p + 1])).collect())
        }
    };
    Ok(BlockInfluence {
        variant,
        k: k_used,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    Forward,
    Backward,
    Bi,
    KnnBi,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [Heuristic::Forward, Heuristic::Backward, Heuristic::Bi, Heuristic::KnnBi];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Forward => "forward",
            Heuristic::Backward => "backward",
            Heuristic::Bi => "bi",
            Heuristic::KnnBi => "knn_bi",
        }
    }

    pub fn bi_variant(self) -> Option<BiVariant> {
        match self {
            Heuristic::Bi => Some(BiVariant::CosineBi),
            Heuristic::KnnBi => Some(BiVariant::KnnBi),
            _ => None,
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Heuristic::Forward),
            "backward" => Ok(Heuristic::Backward),
            "bi" => Ok(Heuristic::Bi),
            "knn_bi" | "knn-bi" => Ok(Heuristic::KnnBi),
            other => Err(Error::Parameter(format!("unknown heuristic {other:?}"))),
        }
    }
}

/// Blocks to delete, in deletion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub heuristic: Heuristic,
    pub order: Vec<usize>,
}

impl PrunePlan {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &b in &self.order {
            if b == 1 {
                return Err(Error::PlanViolation("block 1 is never pruned".into()));
            }
            if b == 0 || b > num_blocks {
                return Err(Error::PlanViolation(format!(
                    "block {b} out of range 2..={num_blocks}"
                )));
            }
            if !seen.insert(b) {
                return Err(Error::PlanViolation(format!("block {b} listed twice")));
            }
        }
        Ok(())
    }

    pub fn prefix(&self, len: usize) -> &[usize] {
        &self.order[..len.min(self.order.len())]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn prune_order(heuristic: Heuristic, bi: Option<&BlockInfluence>, num_blocks: usize) -> Result<PrunePlan> {
    let order = match heuristic {
        Heuristic::Forward => (2..=num_blocks).collect(),
        Heuristic::Backward => (2..=num_blocks).rev().collect(),
        Heuristic::Bi | Heuristic::KnnBi => {
            let want = heuristic.bi_variant().expect("score heuristic");
            let bi = bi.ok_or_else(|| Error::Parameter(format!("heuristic {heuristic} needs block-influence scores")))?;
            if bi.variant != want {
                return Err(Error::Parameter(format!(
                    "heuristic {heuristic} needs {want:?} scores, got {:?}",
                    bi.variant
                )));
            }
            if bi.scores.len() + 1 != num_blocks {
                return Err(Error::Parameter(format!(
                    "{} scores do not match {num_blocks} blocks",
                    bi.scores.len()
                )));
            }
            let mut blocks: Vec<usize> = (2..=num_blocks).collect();
            blocks.sort_by(|a, b| bi.scores[a - 2].total_cmp(&bi.scores[b - 2]).then(a.cmp(b)));
            blocks
        }
    };
    Ok(PrunePlan { heuristic, order })
}

/// Copy of `model` without the blocks whose original ids are in `deleted`.
pub fn apply_prune(model: &ToyTransformer, deleted: &BTreeSet<usize>) -> Result<ToyTransformer> {
    if deleted.contains(&1) {
        return Err(Error::PlanViolation("block 1 is never pruned".into()));
    }
    if let Some(missing) = deleted.iter().find(|b| !model.block_ids.contains(b)) {
        return Err(Error::PlanViolation(format!(
            "block {missing} is not present in the model (blocks {:?})",
            model.block_ids
        )));
    }
    let keep: Vec<usize> = model
        .block_ids
        .iter()
        .copied()
        .filter(|b| !deleted.contains(b))
        .collect();
    let mut pruned = model.clone();
    pruned.retain_blocks(&keep)?;
    Ok(pruned)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub num_pruned: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub heuristic: Heuristic,
    pub num_blocks: usize,
    pub chance_level: f64,
    pub points: Vec<RetentionPoint>,
}

impl RetentionCurve {
    pub fn baseline(&self) -> f64 {
        self.points.first().map(|p| p.accuracy).unwrap_or(0.0)
    }

    pub fn retention(&self, num_pruned: usize) -> Option<f64> {
        let base = self.baseline();
        self.points
            .iter()
            .find(|p| p.num_pruned == num_pruned)
            .map(|p| if base > 0.0 { p.accuracy / base } else { 0.0 })
    }

    /// Largest prefix length whose retention, and that of every shorter
    /// prefix, stays at or above `threshold`.
    pub fn max_pruned_at(&self, threshold: f64) -> usize {
        let base = self.baseline();
        self.points
            .iter()
            .take_while(|p| p.accuracy >= threshold * base)
            .last()
            .map(|p| p.num_pruned)
            .unwrap_or(0)
    }

    /// Columns: num_pruned, fraction_pruned, accuracy, retention_ratio.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "num_pruned,fraction_pruned,accuracy,retention_ratio")?;
        let base = self.baseline();
        for p in &self.points {
            let ratio = if base > 0.0 { p.accuracy / base } else { 0.0 };
            writeln!(
                out,
                "{},{},{},{}",
                p.num_pruned,
                numfmt::significant(p.num_pruned as f64 / self.num_blocks as f64, 9),
                numfmt::significant(p.accuracy, 9),
                numfmt::significant(ratio, 9),
            )?;
        }
        Ok(())
    }
}

/// Accuracy after deleting every prefix of `plan`, from the empty prefix to
/// the whole plan.
pub fn retention_curve(model: &ToyTransformer, plan: &PrunePlan, eval_data: &SynthDataset) -> Result<RetentionCurve> {
    plan.validate(model.config.num_blocks)?;
    let points = parallel::try_map_indices(plan.order.len() + 1, |len| {
        let deleted: BTreeSet<usize> = plan.prefix(len).iter().copied().collect();
        let pruned = apply_prune(model, &deleted)?;
        Ok::<_, Error>(RetentionPoint {
            num_pruned: len,
            accuracy: evaluate(&pruned, eval_data).accuracy,
        })
    })?;
    Ok(RetentionCurve {
        heuristic: plan.heuristic,
        num_blocks: model.config.num_blocks,
        chance_level: 1.0 / model.config.classes as f64,
        points,
    })
}

/// Retention curves on `runs` random evaluation subsets of `subset_size`
/// samples each, drawn from `seed`.
pub fn repeated_retention(
    model: &ToyTransformer,
    plan: &PrunePlan,
    eval_data: &SynthDataset,
    runs: usize,
    subset_size: usize,
    seed: u64,
) -> Result<Vec<RetentionCurve>> {
    let mut rng = substream(seed, "pruning/repeats");
    let subsets: Vec<SynthDataset> = (0..runs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..eval_data.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(subset_size.min(eval_data.len()));
            SynthDataset {
                split: eval_data.split,
                inputs: eval_data.inputs.select(ndarray::Axis(0), &idx),
                labels: eval_data.batch_labels(&idx),
                offsets: idx.iter().map(|&i| eval_data.offsets[i]).collect(),
            }
        })
        .collect();
    subsets.iter().map(|s| retention_curve(model, plan, s)).collect()
}

/// Two-block split of a similarity matrix: the 1-based `s` in `2..=L-1`
/// that maximises mean within-block minus mean cross-block similarity,
/// with blocks `1..=s` and `s+1..=L`. Ties go to the smallest `s`.
pub fn detect_blocks(s: &SimilarityMatrix) -> Result<usize> {
    detect_blocks_in(s.values.view())
}

pub fn detect_blocks_in(values: ArrayView2<'_, f64>) -> Result<usize> {
    let l = values.nrows();
    if l < 3 {
        return Err(Error::Parameter(format!("block detection needs at least 3 layers, got {l}")));
    }
    let mut best = 2;
    let mut best_score = f64::NEG_INFINITY;
    for split in 2..l {
        let (within, cross) = block_means(values, split);
        let score = within - cross;
        if score > best_score + 1e-12 {
            best = split;
            best_score = score;
        }
    }
    Ok(best)
}
