use num_traits::{FromPrimitive, Num};

use std::cmp::Ordering;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("no tiles to pool")]
    Empty,
    #[error("tile {index} has {got} classes, expected {expected}")]
    ClassMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
}

/// Element-wise arithmetic mean of per-tile probability vectors.
///
/// Each class column is summed in ascending value order, so the result does
/// not depend on tile order even in floating point. Works for exact types
/// such as `Ratio<i64>` as well as `f32`/`f64`.
pub fn mean_pool<S, V>(vectors: &[V]) -> Result<Vec<S>, PoolError>
where
    S: Num + Copy + PartialOrd + FromPrimitive,
    V: AsRef<[S]>,
{
    let first = vectors.first().ok_or(PoolError::Empty)?.as_ref();
    let classes = first.len();
    for (index, v) in vectors.iter().enumerate() {
        if v.as_ref().len() != classes {
            return Err(PoolError::ClassMismatch {
                index,
                got: v.as_ref().len(),
                expected: classes,
            });
        }
    }
    let n = S::from_usize(vectors.len()).expect("tile count representable");
    let mut column = Vec::with_capacity(vectors.len());
    Ok((0..classes)
        .map(|c| {
            column.clear();
            column.extend(vectors.iter().map(|v| v.as_ref()[c]));
            column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            column.iter().fold(S::zero(), |acc, &p| acc + p) / n
        })
        .collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: PartialOrd>(values: &[S]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if !(*v > values[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    type Q = Ratio<i64>;

    fn q(n: i64, d: i64) -> Q {
        Q::new(n, d)
    }

    #[test]
    fn symmetric_pair_ties_to_class_zero() {
        let m = mean_pool(&[vec![0.6f64, 0.4], vec![0.4, 0.6]]).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
        assert_eq!(argmax(&m), Some(0));
    }

    #[test]
    fn single_tile_is_identity() {
        let m = mean_pool(&[[0.1f64, 0.9]]).unwrap();
        assert_eq!(m, vec![0.1, 0.9]);
        assert_eq!(argmax(&m), Some(1));
    }

    #[test]
    fn four_tile_hand_example_exact() {
        // column sums [2, 6/5, 4/5, 0]
        let tiles = vec![
            vec![q(1, 2), q(1, 2), q(0, 1), q(0, 1)],
            vec![q(1, 2), q(1, 4), q(1, 4), q(0, 1)],
            vec![q(1, 2), q(1, 4), q(1, 4), q(0, 1)],
            vec![q(1, 2), q(1, 5), q(3, 10), q(0, 1)],
        ];
        // naive loop oracle
        let mut naive = vec![q(0, 1); 4];
        for t in &tiles {
            for c in 0..4 {
                naive[c] += t[c];
            }
        }
        assert_eq!(naive, vec![q(2, 1), q(6, 5), q(4, 5), q(0, 1)]);
        let naive: Vec<Q> = naive.into_iter().map(|s| s / 4).collect();

        let m = mean_pool(&tiles).unwrap();
        assert_eq!(m, naive);
        assert_eq!(m, vec![q(1, 2), q(3, 10), q(1, 5), q(0, 1)]);
        assert_eq!(argmax(&m), Some(0));
    }

    #[test]
    fn errors() {
        assert_eq!(mean_pool::<f64, Vec<f64>>(&[]), Err(PoolError::Empty));
        assert_eq!(
            mean_pool(&[vec![0.5f64, 0.5], vec![1.0]]),
            Err(PoolError::ClassMismatch {
                index: 1,
                got: 1,
                expected: 2
            })
        );
    }

    #[test]
    fn argmax_ties_and_empty() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    proptest! {
        #[test]
        fn permutation_invariant_in_f64(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 1..12),
            seed in any::<u64>(),
        ) {
            let tiles: Vec<Vec<f64>> = raw.into_iter().map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            }).collect();
            let mut shuffled = tiles.clone();
            // deterministic Fisher-Yates
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                shuffled.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let a = mean_pool(&tiles).unwrap();
            let b = mean_pool(&shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
