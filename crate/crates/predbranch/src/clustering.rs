//! Agglomerative clustering of class-average probability vectors.
//!
//! Classes whose average predicted distributions look alike end up in the same
//! group. The default is Euclidean distance with average (UPGMA) linkage;
//! both are knobs since nothing downstream depends on the particular choice.
//!
//! Determinism rules:
//! * among equal merge distances, the pair with the lexicographically smallest
//!   cluster ids (each cluster identified by its smallest member) merges first;
//! * group 0 of the output is the group containing the globally most frequent
//!   class, so "the first group" is reproducible run to run;
//! * remaining groups are ordered by their smallest member.

use crate::baseline::ClassStats;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Manhattan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Average,
    Single,
    Complete,
}

impl Metric {
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

/// Disjoint split of the class set with local/global index maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionDoc", into = "PartitionDoc")]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
    local_index: Vec<usize>,
    pub metric: Metric,
    pub linkage: Linkage,
}

impl GroupPartition {
    /// Builds a partition from groups, validating the exact-cover invariant.
    pub fn from_groups(mut groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::invalid("partition groups must be nonempty"));
        }
        for g in &mut groups {
            g.sort_unstable();
        }
        let total: usize = groups.iter().map(|g| g.len()).sum();
        let mut group_of = vec![usize::MAX; total];
        let mut local_index = vec![usize::MAX; total];
        for (gi, g) in groups.iter().enumerate() {
            for (li, &c) in g.iter().enumerate() {
                if c >= total || group_of[c] != usize::MAX {
                    return Err(Error::invalid(format!(
                        "partition groups must exactly cover 0..{total} (problem at class {c})"
                    )));
                }
                group_of[c] = gi;
                local_index[c] = li;
            }
        }
        Ok(GroupPartition {
            groups,
            group_of,
            local_index,
            metric: Metric::Euclidean,
            linkage: Linkage::Average,
        })
    }

    /// The trivial one-group partition over `num_classes` classes.
    pub fn single_group(num_classes: usize) -> Result<Self> {
        GroupPartition::from_groups(vec![(0..num_classes).collect()])
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.group_of.len()
    }

    /// Sorted global class ids of one group.
    pub fn group(&self, idx: usize) -> &[usize] {
        &self.groups[idx]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.group_of[class]
    }

    /// Index of `class` within its own group.
    pub fn local_index(&self, class: usize) -> usize {
        self.local_index[class]
    }

    /// Global class id for `(group, local)`.
    pub fn global_index(&self, group: usize, local: usize) -> usize {
        self.groups[group][local]
    }
}

/// Serialized form: `{"groups":[[…],[…]],"linkage":"average","metric":"euclidean"}`.
#[derive(Debug, Serialize, Deserialize)]
struct PartitionDoc {
    groups: Vec<Vec<usize>>,
    linkage: Linkage,
    metric: Metric,
}

impl From<GroupPartition> for PartitionDoc {
    fn from(p: GroupPartition) -> Self {
        PartitionDoc { groups: p.groups, linkage: p.linkage, metric: p.metric }
    }
}

impl TryFrom<PartitionDoc> for GroupPartition {
    type Error = Error;
    fn try_from(doc: PartitionDoc) -> Result<Self> {
        let mut p = GroupPartition::from_groups(doc.groups)?;
        p.metric = doc.metric;
        p.linkage = doc.linkage;
        Ok(p)
    }
}

pub fn partition_to_json(p: &GroupPartition) -> Result<String> {
    crate::jsonfmt::to_string_17(p)
}

pub fn partition_from_json(text: &str) -> Result<GroupPartition> {
    serde_json::from_str(text).map_err(|e| Error::format(format!("partition: {e}")))
}

/// Clusters `avg_prob` rows into `num_groups` groups with the default
/// Euclidean metric and average linkage.
pub fn cluster_predicates(stats: &ClassStats, num_groups: usize) -> Result<GroupPartition> {
    cluster_predicates_with(stats, num_groups, Metric::Euclidean, Linkage::Average)
}

pub fn cluster_predicates_with(
    stats: &ClassStats,
    num_groups: usize,
    metric: Metric,
    linkage: Linkage,
) -> Result<GroupPartition> {
    let a = stats.num_classes();
    let supported = stats.support.iter().filter(|&&s| s > 0).count();
    if num_groups == 0 {
        return Err(Error::invalid("num_groups must be at least 1"));
    }
    if num_groups > a {
        return Err(Error::invalid(format!(
            "num_groups {num_groups} exceeds number of classes {a}"
        )));
    }
    if supported > 0 && num_groups > supported {
        return Err(Error::invalid(format!(
            "num_groups {num_groups} exceeds number of supported classes {supported}"
        )));
    }

    // Active clusters keyed by smallest member id.
    let mut members: BTreeMap<usize, Vec<usize>> = (0..a).map(|c| (c, vec![c])).collect();
    let mut dist: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..a {
        for j in (i + 1)..a {
            dist.insert((i, j), metric.distance(stats.avg_prob.row(i), stats.avg_prob.row(j)));
        }
    }

    while members.len() > num_groups {
        // BTreeMap iteration is lexicographic, so the first strict minimum is
        // the tie-break winner.
        let (&(i, j), _) = dist
            .iter()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
            .expect("at least one active pair");
        let size_i = members[&i].len() as f64;
        let size_j = members[&j].len() as f64;
        let moved = members.remove(&j).expect("cluster j active");
        members.get_mut(&i).expect("cluster i active").extend(moved);

        let others: Vec<usize> = members.keys().copied().filter(|&k| k != i).collect();
        for k in others {
            let key_ik = (i.min(k), i.max(k));
            let key_jk = (j.min(k), j.max(k));
            let d_ik = dist[&key_ik];
            let d_jk = dist[&key_jk];
            let merged = match linkage {
                Linkage::Average => (size_i * d_ik + size_j * d_jk) / (size_i + size_j),
                Linkage::Single => d_ik.min(d_jk),
                Linkage::Complete => d_ik.max(d_jk),
            };
            dist.insert(key_ik, merged);
        }
        dist.retain(|&(x, y), _| x != j && y != j);
    }

    let mut groups: Vec<Vec<usize>> = members.into_values().collect();
    // Group 0 holds the globally most frequent class.
    let top_class = stats
        .support
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(0);
    groups.sort_by_key(|g| *g.iter().min().unwrap());
    if let Some(pos) = groups.iter().position(|g| g.contains(&top_class)) {
        groups.swap(0, pos);
    }
    let mut partition = GroupPartition::from_groups(groups)?;
    partition.metric = metric;
    partition.linkage = linkage;
    Ok(partition)
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("adjusted_rand_index: length mismatch"));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::invalid("adjusted_rand_index: empty labelings"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut sum_cells = 0.0;
    let mut row_sums = vec![0u64; ka];
    let mut col_sums = vec![0u64; kb];
    for (i, row) in table.iter().enumerate() {
        for (j, &cell) in row.iter().enumerate() {
            sum_cells += choose2(cell);
            row_sums[i] += cell;
            col_sums[j] += cell;
        }
    }
    let sum_rows: f64 = row_sums.iter().map(|&x| choose2(x)).sum();
    let sum_cols: f64 = col_sums.iter().map(|&x| choose2(x)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        // Degenerate case: both labelings are single-cluster.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}
