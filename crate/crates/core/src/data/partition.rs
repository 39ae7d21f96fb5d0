use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

use super::DatasetShard;

/// Client shards plus the server's evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    pub shards: Vec<DatasetShard>,
    /// Indices into the partitioned source, one list per client.
    pub assignment: Vec<Vec<usize>>,
    pub holdout: DatasetShard,
}

impl PartitionedDataset {
    fn from_assignment(source: &DatasetShard, assignment: Vec<Vec<usize>>) -> Self {
        Self {
            shards: assignment.iter().map(|idx| source.subset(idx)).collect(),
            assignment,
            holdout: DatasetShard::empty(source.feature_shape().to_vec(), source.class_count()),
        }
    }

    pub fn with_holdout(mut self, holdout: DatasetShard) -> Self {
        self.holdout = holdout;
        self
    }

    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(DatasetShard::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: DatasetShard,
    pub holdout: DatasetShard,
    /// Source index of every training sample.
    pub train_index: Vec<usize>,
}

/// Sets aside a seeded `fraction` of the samples (rounded) for evaluation.
pub fn split_holdout(shard: &DatasetShard, fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("holdout fraction {fraction} not in [0, 1)")));
    }
    let n = shard.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, Stream::Holdout, &[]));
    let cut = (fraction * n as f64).round() as usize;
    let mut hold = idx[..cut].to_vec();
    let mut train = idx[cut..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok(HoldoutSplit {
        train: shard.subset(&train),
        holdout: shard.subset(&hold),
        train_index: train,
    })
}

fn check_clients(shard: &DatasetShard, k: usize) -> Result<()> {
    if k == 0 || k > shard.len() {
        return Err(Error::Invalid(format!(
            "cannot give each of {k} clients a sample from {} samples",
            shard.len()
        )));
    }
    Ok(())
}

/// Seeded shuffle, then contiguous splits whose sizes differ by at most one.
pub fn iid_partition(shard: &DatasetShard, k: usize, seed: u64) -> Result<PartitionedDataset> {
    check_clients(shard, k)?;
    let n = shard.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, Stream::Partition, &[0]));
    let (base, extra) = (n / k, n % k);
    let mut assignment = Vec::with_capacity(k);
    let mut off = 0;
    for c in 0..k {
        let size = base + usize::from(c < extra);
        assignment.push(idx[off..off + size].to_vec());
        off += size;
    }
    Ok(PartitionedDataset::from_assignment(shard, assignment))
}

/// Label-skewed split: for each class a Dirichlet(`alpha`) vector over the
/// clients decides how that class's samples are divided (largest-remainder
/// rounding). Clients left empty take one sample from the largest shard.
pub fn dirichlet_partition(shard: &DatasetShard, k: usize, alpha: f64, seed: u64) -> Result<PartitionedDataset> {
    check_clients(shard, k)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); shard.class_count()];
    for (i, &l) in shard.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut rng = seed::rng(seed, Stream::Partition, &[1, c as u64]);
        members.shuffle(&mut rng);
        let p = sample_dirichlet(alpha, k, &mut rng);
        let counts = largest_remainder(&p, members.len());
        let mut off = 0;
        for (client, &cnt) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&members[off..off + cnt]);
            off += cnt;
        }
    }
    repair_empty(&mut assignment);
    for a in &mut assignment {
        a.sort_unstable();
    }
    Ok(PartitionedDataset::from_assignment(shard, assignment))
}

/// Symmetric Dirichlet draw computed in log space; the `Gamma(a+1) * U^(1/a)`
/// identity keeps tiny `alpha` from underflowing every component to zero.
pub(crate) fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha validated");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

pub(crate) fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|v| v * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn repair_empty(assignment: &mut [Vec<usize>]) {
    loop {
        let Some(empty) = assignment.iter().position(Vec::is_empty) else {
            return;
        };
        let largest = (0..assignment.len())
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("non-empty client list");
        let moved = assignment[largest].pop().expect("largest shard has at least two samples");
        assignment[empty].push(moved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn multiset(p: &PartitionedDataset) -> Vec<usize> {
        let mut all: Vec<usize> = p.assignment.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    #[test]
    fn iid_hundred_into_ten() {
        let s = synth_blobs(100, 2, 2, 0.5, 1).unwrap();
        let p = iid_partition(&s, 10, 3).unwrap();
        assert!(p.shards.iter().all(|sh| sh.len() == 10));
        assert_eq!(multiset(&p), (0..100).collect::<Vec<_>>());
        assert_eq!(p.total_samples(), 100);
    }

    #[test]
    fn iid_uneven_sizes_differ_by_one() {
        let s = synth_blobs(103, 2, 2, 0.5, 1).unwrap();
        let p = iid_partition(&s, 10, 3).unwrap();
        let sizes: Vec<usize> = p.shards.iter().map(|s| s.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let s = synth_blobs(5, 2, 2, 0.5, 1).unwrap();
        assert!(iid_partition(&s, 6, 0).is_err());
        assert!(dirichlet_partition(&s, 6, 0.1, 0).is_err());
    }

    #[test]
    fn dirichlet_is_a_partition_and_fills_every_client() {
        let s = synth_blobs(200, 2, 4, 0.5, 1).unwrap();
        for alpha in [0.01, 0.1, 1.0, 100.0] {
            let p = dirichlet_partition(&s, 20, alpha, 7).unwrap();
            assert_eq!(multiset(&p), (0..200).collect::<Vec<_>>());
            assert!(p.shards.iter().all(|sh| !sh.is_empty()));
        }
    }

    #[test]
    fn tiny_alpha_does_not_produce_nan() {
        let mut rng = seed::rng(0, Stream::Partition, &[]);
        for _ in 0..100 {
            let p = sample_dirichlet(1e-3, 10, &mut rng);
            assert!(p.iter().all(|v| v.is_finite()));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder(&[0.5, 0.3, 0.2], 7), vec![4, 2, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn holdout_is_disjoint_and_seeded() {
        let s = synth_blobs(50, 2, 2, 0.5, 1).unwrap();
        let h = split_holdout(&s, 0.2, 4).unwrap();
        assert_eq!(h.holdout.len(), 10);
        assert_eq!(h.train.len(), 40);
        assert_eq!(h.train_index.len(), 40);
        let h2 = split_holdout(&s, 0.2, 4).unwrap();
        assert_eq!(h.train_index, h2.train_index);
    }
}
