use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::GraphSet;
use crate::error::{Error, Result};
use crate::init::derived_rng;

/// Train indices hold normal graphs only; test indices carry anomaly flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_flags: Vec<bool>,
    pub normal_class: i64,
    pub seed: u64,
}

impl AnomalySplit {
    pub fn anomaly_count(&self) -> usize {
        self.test_flags.iter().filter(|&&f| f).count()
    }
}

/// Holds out `test_fraction` of the normal class (rounded to the nearest
/// graph) and sends every graph of any other class to the test side.
pub fn make_anomaly_split(set: &GraphSet, normal_class: i64, test_fraction: f64, seed: u64) -> Result<AnomalySplit> {
    if !set.label_vocabulary().contains(&normal_class) {
        return Err(Error::Config(format!(
            "normal class {normal_class} not among labels {:?}",
            set.label_vocabulary()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut normals: Vec<usize> = (0..set.len())
        .filter(|&i| set.graphs()[i].label() == normal_class)
        .collect();
    normals.shuffle(&mut derived_rng(seed, "split"));
    let n_test = (normals.len() as f64 * test_fraction).round() as usize;
    let (held_out, train) = normals.split_at(n_test);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "no normal graphs left for training ({} normals, test fraction {test_fraction})",
            normals.len()
        )));
    }
    let mut train = train.to_vec();
    train.sort_unstable();

    let mut test: Vec<(usize, bool)> = held_out.iter().map(|&i| (i, false)).collect();
    test.extend(
        (0..set.len())
            .filter(|&i| set.graphs()[i].label() != normal_class)
            .map(|i| (i, true)),
    );
    test.sort_unstable();
    Ok(AnomalySplit {
        train,
        test: test.iter().map(|t| t.0).collect(),
        test_flags: test.iter().map(|t| t.1).collect(),
        normal_class,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn labelled(labels: &[i64]) -> GraphSet {
        let graphs = labels
            .iter()
            .map(|&y| Graph::from_edges(1, &[], Tensor::zeros(1, 0), y).unwrap())
            .collect();
        GraphSet::new("s", graphs).unwrap()
    }

    #[test]
    fn ten_graph_example() {
        let set = labelled(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        for seed in 0..5 {
            let s = make_anomaly_split(&set, 1, 0.2, seed).unwrap();
            assert_eq!(s.train.len(), 4);
            assert!(s.train.iter().all(|&i| set.graphs()[i].label() == 1));
            assert_eq!(s.test.len(), 6);
            assert_eq!(s.anomaly_count(), 5);
        }
    }

    #[test]
    fn no_anomalies_is_still_legal() {
        let set = labelled(&[1; 10]);
        let s = make_anomaly_split(&set, 1, 0.3, 2).unwrap();
        assert_eq!(s.anomaly_count(), 0);
        assert_eq!(s.train.len() + s.test.len(), 10);
    }

    #[test]
    fn deterministic_per_seed() {
        let set = labelled(&[1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1]);
        assert_eq!(
            make_anomaly_split(&set, 1, 0.3, 7).unwrap(),
            make_anomaly_split(&set, 1, 0.3, 7).unwrap()
        );
    }

    #[test]
    fn configuration_errors() {
        let set = labelled(&[1, 0]);
        assert!(matches!(make_anomaly_split(&set, 5, 0.2, 0), Err(Error::Config(_))));
        assert!(matches!(make_anomaly_split(&set, 1, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(make_anomaly_split(&set, 1, 1.0, 0), Err(Error::Config(_))));
        // a single normal graph rounded into the test side leaves training empty
        assert!(matches!(make_anomaly_split(&set, 1, 0.6, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn split_partitions_every_graph(
            labels in proptest::collection::vec(0i64..3, 2..40),
            frac in 0.05f64..0.5,
            seed in any::<u64>(),
        ) {
            let set = labelled(&labels);
            let normal = labels[0];
            if let Ok(s) = make_anomaly_split(&set, normal, frac, seed) {
                let mut seen = vec![0u8; labels.len()];
                for &i in s.train.iter().chain(&s.test) {
                    seen[i] += 1;
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
                for (&i, &flag) in s.test.iter().zip(&s.test_flags) {
                    prop_assert_eq!(flag, labels[i] != normal);
                }
                prop_assert!(s.train.iter().all(|&i| labels[i] == normal));
            }
        }
    }
}
