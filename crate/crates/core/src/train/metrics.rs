use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; k]; k] }
    }

    pub fn from_pairs(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::validation(format!("class index out of range for {k} classes")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Recall per class; `None` for classes absent from the evaluation set.
    pub fn recall(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let s = self.support(c);
                (s > 0).then(|| self.counts[c][c] as f64 / s as f64)
            })
            .collect()
    }

    /// Weighted accuracy: overall fraction correct.
    pub fn wa(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::validation("empty evaluation set"));
        }
        Ok(self.correct() as f64 / n as f64)
    }

    /// Unweighted accuracy: mean recall over classes present in the set.
    pub fn ua(&self) -> Result<f64> {
        let r: Vec<f64> = self.recall().into_iter().flatten().collect();
        if r.is_empty() {
            return Err(Error::validation("empty evaluation set"));
        }
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub wa: f64,
    pub ua: f64,
    pub recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl FoldMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(FoldMetrics { wa: confusion.wa()?, ua: confusion.ua()?, recall: confusion.recall(), confusion })
    }

    pub fn from_pairs(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        FoldMetrics::from_confusion(ConfusionMatrix::from_pairs(k, truth, predicted)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let m = FoldMetrics::from_pairs(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!((m.wa, m.ua), (1.0, 1.0));
    }

    #[test]
    fn hand_counted_example() {
        let m = FoldMetrics::from_pairs(2, &[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.wa, 0.75);
        assert!((m.ua - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((m.ua - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = FoldMetrics::from_pairs(4, &truth, &[2; 40]).unwrap();
        assert_eq!((m.wa, m.ua), (0.25, 0.25));
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(matches!(FoldMetrics::from_pairs(4, &[], &[]), Err(Error::Validation(_))));
    }

    /// Expands a confusion matrix into label lists and scores them directly.
    fn oracle(counts: &[Vec<u64>]) -> (f64, f64) {
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (t, row) in counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                for _ in 0..c {
                    truth.push(t);
                    pred.push(p);
                }
            }
        }
        let wa = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        let mut recalls = Vec::new();
        for c in 0..counts.len() {
            let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            if !idx.is_empty() {
                recalls.push(idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len() as f64);
            }
        }
        (wa, recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    #[test]
    fn matches_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let k = rng.gen_range(2..6);
            let mut counts: Vec<Vec<u64>> =
                (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..12)).collect()).collect();
            counts[0][0] += 1;
            let cm = ConfusionMatrix { counts: counts.clone() };
            let (wa, ua) = oracle(&counts);
            assert!((cm.wa().unwrap() - wa).abs() < 1e-12);
            assert!((cm.ua().unwrap() - ua).abs() < 1e-12);
            assert_eq!(cm.total(), counts.iter().flatten().sum::<u64>());
        }
    }

    proptest! {
        #[test]
        fn duplicating_a_class_keeps_ua(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            class in 0usize..4,
        ) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let base = FoldMetrics::from_pairs(4, &truth, &pred).unwrap();
            let (mut t2, mut p2) = (truth.clone(), pred.clone());
            for (&t, &p) in truth.iter().zip(&pred).filter(|(t, _)| **t == class) {
                t2.push(t);
                p2.push(p);
            }
            let dup = FoldMetrics::from_pairs(4, &t2, &p2).unwrap();
            prop_assert!((base.ua - dup.ua).abs() < 1e-12);
            if let Some(r) = base.recall[class] {
                prop_assert!((dup.wa - r).abs() <= (base.wa - r).abs() + 1e-12);
            }
            let rows: Vec<u64> = (0..4).map(|c| base.confusion.support(c)).collect();
            for c in 0..4 {
                prop_assert_eq!(rows[c], truth.iter().filter(|&&t| t == c).count() as u64);
            }
            prop_assert_eq!(base.confusion.total(), truth.len() as u64);
            prop_assert!((0.0..=1.0).contains(&base.wa) && (0.0..=1.0).contains(&base.ua));
        }
    }
}
