//! Centroid-distance non-maximum suppression backed by a 2-D KD-tree.
//!
//! Detections are visited in descending score order (ties: ascending x, then
//! ascending y, then input order). Each detection that is still alive is kept
//! and suppresses every later detection whose centroid lies strictly closer
//! than the radius.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::adapters::Detection;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceBand {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig<S> {
    pub radius: S,
    /// Scores strictly above this are `High`.
    pub high_above: S,
    /// Scores strictly above this (and not high) are `Medium`; the rest `Low`.
    pub medium_above: S,
}

impl<S: Scalar> Default for NmsConfig<S> {
    fn default() -> Self {
        NmsConfig {
            radius: S::lit(25.0),
            high_above: S::lit(0.7),
            medium_above: S::lit(0.4),
        }
    }
}

impl<S: Scalar> NmsConfig<S> {
    pub fn with_radius(radius: S) -> Self {
        assert!(radius > S::zero(), "NMS radius must be positive");
        NmsConfig {
            radius,
            ..Self::default()
        }
    }

    pub fn band(&self, score: S) -> ConfidenceBand {
        if score > self.high_above {
            ConfidenceBand::High
        } else if score > self.medium_above {
            ConfidenceBand::Medium
        } else {
            ConfidenceBand::Low
        }
    }
}

/// Implicit balanced KD-tree over 2-D points: the median of every index
/// range is the split node and ranges alternate axes by depth.
pub struct KdTree<S> {
    points: Vec<[S; 2]>,
    order: Vec<usize>,
}

impl<S: Scalar> KdTree<S> {
    pub fn build(points: Vec<[S; 2]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::partition(&points, &mut order, 0);
        KdTree { points, order }
    }

    fn partition(points: &[[S; 2]], slice: &mut [usize], depth: usize) {
        if slice.len() <= 1 {
            return;
        }
        let axis = depth % 2;
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap_or(Ordering::Equal)
        });
        let (left, right) = slice.split_at_mut(mid);
        Self::partition(points, left, depth + 1);
        Self::partition(points, &mut right[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Calls `visit` for every point whose squared distance to `center` is
    /// strictly below `radius_sq`.
    pub fn within<F: FnMut(usize)>(&self, center: [S; 2], radius_sq: S, mut visit: F) {
        self.search(&self.order, 0, center, radius_sq, &mut visit);
    }

    fn search<F: FnMut(usize)>(
        &self,
        slice: &[usize],
        depth: usize,
        center: [S; 2],
        radius_sq: S,
        visit: &mut F,
    ) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let idx = slice[mid];
        let p = self.points[idx];
        if dist_sq(p, center) < radius_sq {
            visit(idx);
        }
        let axis = depth % 2;
        let diff = center[axis] - p[axis];
        let (near, far) = if diff < S::zero() {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.search(near, depth + 1, center, radius_sq, visit);
        // Every point on the far side is at least |diff| away along `axis`.
        if diff * diff < radius_sq {
            self.search(far, depth + 1, center, radius_sq, visit);
        }
    }
}

#[inline]
fn dist_sq<S: Scalar>(a: [S; 2], b: [S; 2]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Processing order: score descending, then x ascending, then y ascending.
pub fn suppression_order<S: Scalar>(candidates: &[Detection<S>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&candidates[a], &candidates[b]);
        let (ca, cb) = (da.centroid(), db.centroid());
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(Ordering::Equal)
            .then(ca.0.partial_cmp(&cb.0).unwrap_or(Ordering::Equal))
            .then(ca.1.partial_cmp(&cb.1).unwrap_or(Ordering::Equal))
    });
    order
}

/// Survivors of distance-based suppression, in processing order.
pub fn distance_nms<S: Scalar>(candidates: &[Detection<S>], config: &NmsConfig<S>) -> Vec<Detection<S>> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let order = suppression_order(candidates);
    let mut rank = vec![0usize; candidates.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let tree = KdTree::build(
        candidates
            .iter()
            .map(|d| {
                let c = d.centroid();
                [c.0, c.1]
            })
            .collect(),
    );
    let radius_sq = config.radius * config.radius;
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(candidates[i]);
        let c = candidates[i].centroid();
        tree.within([c.0, c.1], radius_sq, |j| {
            if rank[j] > rank[i] {
                suppressed[j] = true;
            }
        });
    }
    kept
}
