use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// How a dataset is dealt out to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Samples held by each client; its length is the client count.
    pub samples_per_client: Vec<usize>,
    /// Maximum number of distinct labels in one shard.
    pub classes_per_client: usize,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn uniform(clients: usize, samples: usize, classes_per_client: usize, seed: u64) -> Self {
        Self { samples_per_client: vec![samples; clients], classes_per_client, seed }
    }

    pub fn clients(&self) -> usize {
        self.samples_per_client.len()
    }

    fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.samples_per_client.is_empty() {
            return Err(Error::invalid("partition plan needs at least one client"));
        }
        if self.samples_per_client.contains(&0) {
            return Err(Error::invalid("every client needs at least one sample"));
        }
        let total: usize = self.samples_per_client.iter().sum();
        if total > ds.len() {
            return Err(Error::Infeasible(format!("plan needs {total} samples, dataset has {}", ds.len())));
        }
        if self.classes_per_client == 0 || self.classes_per_client > ds.classes() {
            return Err(Error::invalid(format!("classes per client must lie in 1..={}", ds.classes())));
        }
        Ok(())
    }
}

/// Deals class blocks to clients.
///
/// Sample indices are grouped by label and shuffled within each class; the
/// class order is shuffled once. Client `k` takes its `c` classes as a
/// contiguous run of that cyclic class order starting at `k * c`, and pulls
/// an (almost) equal block from each of those class pools.
pub fn partition(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    Ok(partition_indices(ds, plan)?.iter().map(|idx| ds.subset(idx)).collect())
}

/// Dataset indices held by each client, in the order [`partition`] uses.
pub fn partition_indices(ds: &Dataset, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    plan.validate(ds)?;
    let mut rng = rng::stream(plan.seed, &[tag::PLAN]);
    let classes = ds.classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels().iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    // Only classes that actually have samples take part in the rotation.
    let mut order: Vec<usize> = (0..classes).filter(|&c| !pools[c].is_empty()).collect();
    order.shuffle(&mut rng);
    if order.is_empty() {
        return Err(Error::Infeasible("dataset is empty".into()));
    }
    let c = plan.classes_per_client.min(order.len());

    let mut shards = Vec::with_capacity(plan.clients());
    for (k, &n_k) in plan.samples_per_client.iter().enumerate() {
        let picked: Vec<usize> = (0..c).map(|j| order[(k * c + j) % order.len()]).collect();
        let mut indices = Vec::with_capacity(n_k);
        for (j, &class) in picked.iter().enumerate() {
            let block = n_k / c + usize::from(j < n_k % c);
            let pool = &mut pools[class];
            if pool.len() < block {
                return Err(Error::Infeasible(format!(
                    "client {k} needs {block} samples of class {class}, {} left",
                    pool.len()
                )));
            }
            indices.extend(pool.drain(pool.len() - block..));
        }
        indices.sort_unstable();
        shards.push(indices);
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn single_client_full_classes() {
        let ds = synth_blobs(3, &[2], 10, 1.0, 0).unwrap();
        let shards = partition(&ds, &PartitionPlan::uniform(1, 12, 3, 9)).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].len(), 12);
    }

    #[test]
    fn one_class_each() {
        let ds = synth_blobs(5, &[2], 10, 1.0, 0).unwrap();
        let shards = partition(&ds, &PartitionPlan::uniform(5, 8, 1, 3)).unwrap();
        let mut covered: Vec<usize> = shards.iter().flat_map(|s| s.distinct_labels()).collect();
        covered.sort_unstable();
        assert_eq!(covered, vec![0, 1, 2, 3, 4]);
        assert!(shards.iter().all(|s| s.distinct_labels().len() == 1));
    }

    #[test]
    fn infeasible_plan_rejected() {
        let ds = synth_blobs(2, &[2], 10, 1.0, 0).unwrap();
        let plan = PartitionPlan::uniform(2, 12, 1, 0);
        assert!(matches!(partition(&ds, &plan), Err(Error::Infeasible(_))));
        let plan = PartitionPlan::uniform(3, 10, 1, 0);
        assert!(matches!(partition(&ds, &plan), Err(Error::Infeasible(_))));
    }

    #[test]
    fn invalid_class_cap_rejected() {
        let ds = synth_blobs(2, &[2], 10, 1.0, 0).unwrap();
        assert!(partition(&ds, &PartitionPlan::uniform(1, 4, 3, 0)).is_err());
        assert!(partition(&ds, &PartitionPlan::uniform(1, 4, 0, 0)).is_err());
    }
}
