//! Poisoned-update screening.
//!
//! Updates are compared pairwise, split into two groups with 2-means, and the
//! smaller group is excluded when it sits well outside the bulk of the
//! updates. "Well outside" means the group's centroid is more than `tau`
//! spreads away from the round's reference point, where the spread is the
//! lower median of all update-to-reference distances. The lower median is
//! the typical distance of a majority member, so a poisoned minority cannot
//! inflate it.
//!
//! The reference point is the global model the updates were trained from when
//! the caller supplies it, otherwise the coordinate-wise median of the updates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fl::{ClientUpdate, ParamVector};
use crate::reputation::ReputationEvent;
use crate::rng::{rng_for, SimRng};

/// Symmetric matrix of pairwise L2 distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

fn check_same_dim(updates: &[ParamVector]) -> Result<()> {
    let dim = updates[0].dim();
    match updates.iter().find(|u| u.dim() != dim) {
        Some(u) => Err(Error::DimensionMismatch { expected: dim, found: u.dim() }),
        None => Ok(()),
    }
}

pub fn pairwise_distances(updates: &[ParamVector]) -> Result<DistanceMatrix> {
    if updates.len() < 2 {
        return Err(Error::EmptyInput);
    }
    check_same_dim(updates)?;
    let n = updates.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = updates[i].distance(&updates[j])?;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// Result of 2-means clustering.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: [ParamVector; 2],
    pub outlier_cluster: Option<usize>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == cluster).map(|(i, _)| i)
    }

    pub fn size(&self, cluster: usize) -> usize {
        self.members(cluster).count()
    }

    /// Same partition with the labels 0 and 1 exchanged.
    pub fn swapped(&self) -> ClusterAssignment {
        ClusterAssignment {
            labels: self.labels.iter().map(|l| 1 - l).collect(),
            centroids: [self.centroids[1].clone(), self.centroids[0].clone()],
            outlier_cluster: self.outlier_cluster.map(|c| 1 - c),
            iterations: self.iterations,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(updates: &[ParamVector], members: impl Iterator<Item = usize>) -> Option<ParamVector> {
    let dim = updates[0].dim();
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for i in members {
        for (a, v) in acc.iter_mut().zip(updates[i].as_slice()) {
            *a += v;
        }
        count += 1;
    }
    (count > 0).then(|| acc.into_iter().map(|a| a / count as f64).collect::<Vec<_>>().into())
}

fn seed_centroids(updates: &[ParamVector], rng: &mut SimRng) -> [ParamVector; 2] {
    let first = rng.random_range(0..updates.len());
    let c0 = updates[first].clone();
    let weights: Vec<f64> = updates.iter().map(|u| sq_dist(u.as_slice(), c0.as_slice())).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return [c0.clone(), c0];
    }
    let mut target = rng.random::<f64>() * total;
    let mut second = weights.iter().rposition(|&w| w > 0.0).expect("total > 0");
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 && target < *w {
            second = i;
            break;
        }
        target -= w;
    }
    [c0, updates[second].clone()]
}

/// Lloyd's algorithm with k = 2 and k-means++ seeding.
///
/// An emptied cluster receives the point farthest from its current centroid.
pub fn kmeans2(updates: &[ParamVector], seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    if updates.len() < 2 {
        return Err(Error::EmptyInput);
    }
    check_same_dim(updates)?;
    let mut rng = rng_for(seed, &[0x63]);
    let mut centroids = seed_centroids(updates, &mut rng);
    let mut labels = vec![usize::MAX; updates.len()];
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = updates
            .iter()
            .map(|u| {
                let d0 = sq_dist(u.as_slice(), centroids[0].as_slice());
                let d1 = sq_dist(u.as_slice(), centroids[1].as_slice());
                usize::from(d1 < d0)
            })
            .collect();
        for k in 0..2 {
            if !next.contains(&k) {
                let far = (0..updates.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(updates[a].as_slice(), centroids[next[a]].as_slice());
                        let db = sq_dist(updates[b].as_slice(), centroids[next[b]].as_slice());
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                next[far] = k;
            }
        }
        let stable = next == labels;
        labels = next;
        for (k, c) in centroids.iter_mut().enumerate() {
            *c = centroid(updates, labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i))
                .expect("clusters are non-empty after repair");
        }
        if stable {
            break;
        }
    }
    Ok(ClusterAssignment { labels, centroids, outlier_cluster: None, iterations })
}

/// Parameters of the outlier-cluster rule.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierRule {
    /// Separation threshold in units of the robust spread.
    pub tau: f64,
    /// The model the updates started from, if known.
    pub reference: Option<ParamVector>,
}

impl Default for OutlierRule {
    fn default() -> Self {
        OutlierRule { tau: 2.0, reference: None }
    }
}

fn coordinate_median(updates: &[ParamVector]) -> ParamVector {
    let dim = updates[0].dim();
    (0..dim)
        .map(|j| {
            let mut col: Vec<f64> = updates.iter().map(|u| u.as_slice()[j]).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect::<Vec<_>>()
        .into()
}

fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Diagnostics behind an outlier decision.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierStats {
    pub candidate: Option<usize>,
    pub sizes: [usize; 2],
    pub dispersion: [f64; 2],
    /// Distance of the candidate centroid from the reference point.
    pub separation: f64,
    /// Lower median of the update-to-reference distances.
    pub spread: f64,
}

pub fn outlier_stats(
    assignment: &ClusterAssignment,
    updates: &[ParamVector],
    rule: &OutlierRule,
) -> Result<OutlierStats> {
    if updates.len() != assignment.labels.len() || updates.is_empty() {
        return Err(Error::InvalidArgument("assignment does not match updates".into()));
    }
    check_same_dim(updates)?;
    let center = match &rule.reference {
        Some(r) => {
            updates[0].check_dim(r.dim())?;
            r.clone()
        }
        None => coordinate_median(updates),
    };
    let sizes = [assignment.size(0), assignment.size(1)];
    let mut dispersion = [0.0; 2];
    for (k, disp) in dispersion.iter_mut().enumerate() {
        if sizes[k] > 0 {
            let total: f64 = assignment
                .members(k)
                .map(|i| updates[i].distance(&assignment.centroids[k]))
                .sum::<Result<f64>>()?;
            *disp = total / sizes[k] as f64;
        }
    }
    let centre_dist =
        [assignment.centroids[0].distance(&center)?, assignment.centroids[1].distance(&center)?];

    // smaller, then more dispersed, then farther from the reference
    let candidate = if sizes[0] != sizes[1] {
        Some(if sizes[0] < sizes[1] { 0 } else { 1 })
    } else if dispersion[0] != dispersion[1] {
        Some(if dispersion[0] > dispersion[1] { 0 } else { 1 })
    } else if centre_dist[0] != centre_dist[1] {
        Some(if centre_dist[0] > centre_dist[1] { 0 } else { 1 })
    } else {
        None
    };

    let spread = lower_median(updates.iter().map(|u| u.distance(&center)).collect::<Result<Vec<_>>>()?);
    Ok(OutlierStats {
        candidate,
        sizes,
        dispersion,
        separation: candidate.map_or(0.0, |c| centre_dist[c]),
        spread,
    })
}

/// Returns the cluster to exclude, or `None` when no group stands apart.
pub fn select_outlier_cluster(
    assignment: &ClusterAssignment,
    updates: &[ParamVector],
    rule: &OutlierRule,
) -> Result<Option<usize>> {
    let stats = outlier_stats(assignment, updates, rule)?;
    Ok(stats.candidate.filter(|_| stats.separation > 0.0 && stats.separation > rule.tau * stats.spread))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub rule: OutlierRule,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { rule: OutlierRule::default(), kmeans_iters: 100, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub kept: Vec<ClientUpdate>,
    pub excluded: Vec<String>,
    pub distances: DistanceMatrix,
    pub assignment: ClusterAssignment,
}

impl FilterOutcome {
    /// One `divergent_update` event per excluded device, for the reputation ledger.
    pub fn reputation_events(&self) -> Vec<(String, ReputationEvent)> {
        self.excluded.iter().map(|d| (d.clone(), ReputationEvent::DivergentUpdate)).collect()
    }
}

/// Distances, 2-means and the outlier rule, composed.
pub fn filter_updates(updates: &[ClientUpdate], cfg: &FilterConfig) -> Result<FilterOutcome> {
    let params: Vec<ParamVector> = updates.iter().map(|u| u.params.clone()).collect();
    let distances = pairwise_distances(&params)?;
    let mut assignment = kmeans2(&params, cfg.seed, cfg.kmeans_iters)?;
    assignment.outlier_cluster = select_outlier_cluster(&assignment, &params, &cfg.rule)?;
    let mut kept = Vec::with_capacity(updates.len());
    let mut excluded = Vec::new();
    for (u, &label) in updates.iter().zip(&assignment.labels) {
        if Some(label) == assignment.outlier_cluster {
            excluded.push(u.device_id.clone());
        } else {
            kept.push(u.clone());
        }
    }
    Ok(FilterOutcome { kept, excluded, distances, assignment })
}
