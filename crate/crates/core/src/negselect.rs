//! Negative-label selection.
//!
//! Each strategy marks, per unlabeled row, a set of classes the row is
//! assumed *not* to belong to. No strategy ever marks every class.

use rand::seq::index::sample;
use rand::Rng;

use crate::diffcore::{argmax, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeLabelMask {
    classes: usize,
    mask: Vec<bool>,
    counts: Vec<usize>,
}

impl NegativeLabelMask {
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if classes < 2 {
            return Err(invalid("negative-label mask needs at least two classes"));
        }
        if rows.iter().any(|r| r.len() != classes) {
            return Err(invalid("ragged negative-label mask"));
        }
        let counts: Vec<usize> = rows.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
        if let Some(row) = counts.iter().position(|&c| c == classes) {
            return Err(Error::AllClassesNegative(row));
        }
        Ok(Self {
            classes,
            mask: rows.concat(),
            counts,
        })
    }

    pub fn empty(rows: usize, classes: usize) -> Self {
        Self {
            classes,
            mask: vec![false; rows * classes],
            counts: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_negative(&self, row: usize, class: usize) -> bool {
        self.mask[row * self.classes + class]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.mask[row * self.classes..(row + 1) * self.classes]
    }

    /// Number of negatives chosen for each row.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// The mask as a `rows × classes` 0/1 matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.rows(), self.classes],
            self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Fraction of chosen negatives that are actually the true class.
    /// `None` when nothing was selected.
    pub fn error_rate(&self, true_labels: &[usize]) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let wrong = true_labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| self.is_negative(r, y))
            .count();
        Some(wrong as f64 / total as f64)
    }
}

/// Marks every class whose probability is below `threshold`. If that would
/// mark the whole row, the most probable class is left out.
pub fn threshold_mask(mu: &Tensor, threshold: f64) -> Result<NegativeLabelMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let k = mu.cols();
    let rows = mu
        .row_iter()
        .map(|row| {
            let mut m: Vec<bool> = row.iter().map(|&p| p < threshold).collect();
            if m.iter().all(|&b| b) {
                m[argmax(row)] = false;
            }
            m
        })
        .collect::<Vec<_>>();
    debug_assert!(rows.iter().all(|r| r.len() == k));
    NegativeLabelMask::from_rows(rows)
}

fn check_count(p: usize, available: usize) -> Result<()> {
    if p == 0 || p > available {
        return Err(invalid(format!(
            "cannot pick {p} negatives from {available} candidate classes"
        )));
    }
    Ok(())
}

fn pick_from(candidates: &[usize], p: usize, classes: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut row = vec![false; classes];
    for i in sample(rng, candidates.len(), p) {
        row[candidates[i]] = true;
    }
    row
}

/// `p` distinct classes per row, uniformly without replacement.
pub fn uniform_mask(
    rows: usize,
    classes: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<NegativeLabelMask> {
    check_count(p, classes.saturating_sub(1))?;
    let all: Vec<usize> = (0..classes).collect();
    NegativeLabelMask::from_rows((0..rows).map(|_| pick_from(&all, p, classes, rng)).collect())
}

/// `p` distinct classes per row drawn uniformly from the wrong classes.
/// Needs the hidden labels, so it is a diagnostic upper bound only.
pub fn oracle_mask(
    true_labels: &[usize],
    classes: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<NegativeLabelMask> {
    check_count(p, classes.saturating_sub(1))?;
    let rows = true_labels
        .iter()
        .map(|&y| {
            if y >= classes {
                return Err(invalid(format!("label {y} out of range")));
            }
            let wrong: Vec<usize> = (0..classes).filter(|&c| c != y).collect();
            Ok(pick_from(&wrong, p, classes, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    NegativeLabelMask::from_rows(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NnVariant {
    /// Drop the class of the single nearest labeled point.
    Exclude1,
    /// Drop the first four distinct classes met walking outward.
    Exclude4,
}

impl NnVariant {
    fn classes_to_exclude(self) -> usize {
        match self {
            NnVariant::Exclude1 => 1,
            NnVariant::Exclude4 => 4,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Labeled indices sorted by distance to `x`; ties keep the lower index.
fn neighbors_by_distance(x: &[f64], labeled_x: &Tensor) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = labeled_x
        .row_iter()
        .enumerate()
        .map(|(i, r)| (sq_dist(x, r), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

fn check_labeled(x_unlabeled: &Tensor, labeled_x: &Tensor, labeled_y: &[usize]) -> Result<()> {
    if labeled_y.is_empty() || labeled_x.rows() != labeled_y.len() {
        return Err(invalid("labeled set must be nonempty and match its labels"));
    }
    if labeled_x.cols() != x_unlabeled.cols() {
        return Err(Error::Shape {
            op: "nearest neighbor",
            lhs: x_unlabeled.shape().to_vec(),
            rhs: labeled_x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Removes the classes of the nearest labeled neighbors from candidacy and
/// samples `p` negatives from what remains.
pub fn nn_exclude_mask(
    x_unlabeled: &Tensor,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    classes: usize,
    p: usize,
    variant: NnVariant,
    rng: &mut impl Rng,
) -> Result<NegativeLabelMask> {
    check_labeled(x_unlabeled, labeled_x, labeled_y)?;
    let want = variant.classes_to_exclude();
    let rows = x_unlabeled
        .row_iter()
        .map(|x| {
            let mut excluded: Vec<usize> = Vec::with_capacity(want);
            for i in neighbors_by_distance(x, labeled_x) {
                let c = labeled_y[i];
                if !excluded.contains(&c) {
                    excluded.push(c);
                    if excluded.len() == want {
                        break;
                    }
                }
            }
            let candidates: Vec<usize> = (0..classes).filter(|c| !excluded.contains(c)).collect();
            if p > candidates.len() || p == 0 {
                return Err(invalid(format!(
                    "cannot pick {p} negatives from {} candidate classes",
                    candidates.len()
                )));
            }
            Ok(pick_from(&candidates, p, classes, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    NegativeLabelMask::from_rows(rows)
}

/// Single negative per row: the class whose closest labeled example is
/// farthest away.
pub fn furthest_class_mask(
    x_unlabeled: &Tensor,
    labeled_x: &Tensor,
    labeled_y: &[usize],
    classes: usize,
) -> Result<NegativeLabelMask> {
    check_labeled(x_unlabeled, labeled_x, labeled_y)?;
    for c in 0..classes {
        if !labeled_y.contains(&c) {
            return Err(invalid(format!("class {c} has no labeled example")));
        }
    }
    let rows = x_unlabeled
        .row_iter()
        .map(|x| {
            let mut nearest = vec![f64::INFINITY; classes];
            for (r, &y) in labeled_x.row_iter().zip(labeled_y) {
                nearest[y] = nearest[y].min(sq_dist(x, r));
            }
            let mut row = vec![false; classes];
            row[argmax(&nearest)] = true;
            row
        })
        .collect();
    NegativeLabelMask::from_rows(rows)
}
