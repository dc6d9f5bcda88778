use serde::{Deserialize, Serialize};

/// Per-label Dice and their mean over foreground labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    /// Index `l - 1` holds label `l`.
    pub per_label: Vec<f64>,
    pub mean: f64,
}

/// Dice of two label maps over foreground labels `1..=num_labels`.
///
/// A label absent from both maps scores 1, absent from exactly one scores 0.
pub fn dice(prediction: &[u8], target: &[u8], num_labels: usize) -> DiceScore {
    assert_eq!(
        prediction.len(),
        target.len(),
        "dice: label maps differ in size"
    );
    let mut inter = vec![0usize; num_labels + 1];
    let mut p = vec![0usize; num_labels + 1];
    let mut t = vec![0usize; num_labels + 1];
    for (&a, &b) in prediction.iter().zip(target) {
        p[a as usize] += 1;
        t[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    let per_label: Vec<f64> = (1..=num_labels)
        .map(|l| match (p[l], t[l]) {
            (0, 0) => 1.0,
            (a, b) => 2.0 * inter[l] as f64 / (a + b) as f64,
        })
        .collect();
    let mean = per_label.iter().sum::<f64>() / num_labels as f64;
    DiceScore { per_label, mean }
}

/// Median and median absolute deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mad: f64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.median, self.mad)
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn aggregate(values: &[f64]) -> Summary {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    Summary {
        median: med,
        mad: median(&dev),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dice_examples() {
        let a = [0, 1, 1, 0, 2, 2];
        assert_eq!(dice(&a, &a, 2).per_label, vec![1.0, 1.0]);
        let p = [1, 1, 0, 0];
        let t = [0, 0, 1, 1];
        assert_eq!(dice(&p, &t, 1).mean, 0.0);
        // P covers half of T: 2·2 / (2 + 4)
        let t = [1, 1, 1, 1, 0, 0];
        let p = [1, 1, 0, 0, 0, 0];
        assert_eq!(dice(&p, &t, 1).mean, 2.0 / 3.0);
    }

    #[test]
    fn empty_label_conventions() {
        let z = [0u8; 4];
        assert_eq!(dice(&z, &z, 1).mean, 1.0);
        assert_eq!(dice(&[1, 0, 0, 0], &z, 1).mean, 0.0);
        // label 2 absent from both, label 1 perfect
        assert_eq!(dice(&[1, 0], &[1, 0], 2).per_label, vec![1.0, 1.0]);
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[0.8, 0.9, 1.0]);
        assert!((s.median - 0.9).abs() < 1e-15);
        assert!((s.mad - 0.1).abs() < 1e-15);
        assert_eq!(
            aggregate(&[0.42]),
            Summary {
                median: 0.42,
                mad: 0.0
            }
        );
    }

    /// Median by counting how many values lie below each candidate.
    fn median_by_rank(v: &[f64]) -> f64 {
        let n = v.len();
        let kth = |k: usize| {
            *v.iter()
                .find(|&&x| {
                    let below = v.iter().filter(|&&y| y < x).count();
                    let equal = v.iter().filter(|&&y| y == x).count();
                    below <= k && k < below + equal
                })
                .unwrap()
        };
        if n % 2 == 1 {
            kth(n / 2)
        } else {
            (kth(n / 2 - 1) + kth(n / 2)) / 2.0
        }
    }

    #[test]
    fn seven_element_sample_matches_rank_oracle() {
        let v = [0.71, 0.93, 0.12, 0.55, 0.93, 0.08, 0.64];
        let med = median_by_rank(&v);
        let dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
        let s = aggregate(&v);
        assert_eq!(s.median, med);
        assert_eq!(s.mad, median_by_rank(&dev));
        assert_eq!(s.median, 0.64);
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(p in prop::collection::vec(0u8..3, 1..64), seed in any::<u64>()) {
            let t: Vec<u8> = p.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) % 3) as u8).collect();
            let a = dice(&p, &t, 2);
            let b = dice(&t, &p, 2);
            prop_assert_eq!(&a, &b);
            prop_assert!((0.0..=1.0).contains(&a.mean));
            prop_assert_eq!(dice(&p, &p, 2).mean, 1.0);
        }

        #[test]
        fn aggregate_permutation_invariant(mut v in prop::collection::vec(-10.0f64..10.0, 1..12), rot in 0usize..12) {
            let a = aggregate(&v);
            let k = rot % v.len();
            v.rotate_left(k);
            v.reverse();
            prop_assert_eq!(a, aggregate(&v));
        }
    }
}
