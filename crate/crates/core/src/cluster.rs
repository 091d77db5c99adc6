//! Unsupervised grouping: k-means (k-means++ seeding, Lloyd iterations)
//! produces pseudo-classes that stand in for labels when building the bank.

use std::collections::{BTreeMap, HashSet};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::protocol::Task;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Centroids in f64, `k` rows of the data dimension.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point, in input order.
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, final one last.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn centroid_embeddings(&self) -> Result<Vec<Embedding>> {
        self.centroids
            .iter()
            .map(|c| Embedding::from_f64(c))
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_points(features: &[&Embedding]) -> usize {
    features
        .iter()
        .map(|f| {
            f.values()
                .iter()
                .map(|v| (v + 0.0).to_bits())
                .collect::<Vec<_>>()
        })
        .collect::<HashSet<_>>()
        .len()
}

/// Assigns every point to its nearest centroid (lowest index on ties) and
/// returns the resulting inertia.
fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (x, label) in data.iter().zip(labels.iter_mut()) {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *label = best;
        inertia += best_d;
    }
    inertia
}

/// Recomputes centroids as cluster means. An empty cluster is re-seeded at
/// the point currently farthest from its own centroid, and that point moves
/// to the empty cluster.
fn update(data: &[Vec<f64>], labels: &mut [usize], k: usize) -> Vec<Vec<f64>> {
    let dim = data[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.iter().zip(labels.iter()) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut dist: Vec<f64> = data
            .iter()
            .zip(labels.iter())
            .map(|(x, &l)| sq_dist(x, &sums[l]))
            .collect();
        for c in empty {
            let far = dist
                .iter()
                .enumerate()
                .fold(0, |best, (i, &d)| if d > dist[best] { i } else { best });
            sums[c] = data[far].clone();
            labels[far] = c;
            dist[far] = 0.0;
        }
    }
    sums
}

fn plus_plus_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.gen_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        // total > 0 while fewer than k distinct points are chosen
        let next = data[pick.expect("a point with positive weight")].clone();
        for (w, x) in d2.iter_mut().zip(data) {
            *w = w.min(sq_dist(x, &next));
        }
        centroids.push(next);
    }
    centroids
}

pub fn kmeans(features: &[&Embedding], params: &KMeansParams) -> Result<ClusterAssignment> {
    let KMeansParams {
        k,
        seed,
        max_iters,
        tol,
    } = *params;
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if max_iters == 0 {
        return Err(Error::Validation("max_iters must be at least 1".into()));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Validation(format!("tol must be > 0, got {tol}")));
    }
    let dim = features
        .first()
        .ok_or_else(|| Error::Validation("cannot cluster zero points".into()))?
        .dim();
    for f in features {
        f.check_dim(dim)?;
    }
    let distinct = distinct_points(features);
    if k > distinct {
        return Err(Error::Validation(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }

    let data: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.values().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&data, k, &mut rng);
    let mut labels = vec![0usize; data.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters {
        history.push(assign(&data, &centroids, &mut labels));
        let next = update(&data, &mut labels, k);
        iterations += 1;
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    let inertia = assign(&data, &centroids, &mut labels);
    history.push(inertia);

    Ok(ClusterAssignment {
        k,
        centroids,
        labels,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// A cluster index scoped to the task it was found in, so pseudo-classes
/// of different tasks never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PseudoClassId {
    pub task: usize,
    pub cluster: usize,
}

impl PseudoClassId {
    /// Flat bank key for a run that uses `k` clusters per task.
    pub fn encode(self, k: usize) -> Result<u32> {
        self.task
            .checked_mul(k)
            .and_then(|v| v.checked_add(self.cluster))
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| Error::Validation("pseudo-class id overflows u32".into()))
    }

    pub fn decode(id: u32, k: usize) -> Self {
        PseudoClassId {
            task: id as usize / k,
            cluster: id as usize % k,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PseudoGrouping<'a> {
    pub groups: IndexMap<PseudoClassId, Vec<&'a Embedding>>,
    /// Most frequent true label per pseudo-class (lowest label on ties).
    pub majority_label: BTreeMap<PseudoClassId, u32>,
    /// Fraction of points whose cluster majority label equals their own.
    pub purity: f64,
    pub assignment: ClusterAssignment,
}

/// Replaces batch reordering by label with k-means clusters.
pub fn pseudo_group<'a>(task: &'a Task, k: usize, seed: u64) -> Result<PseudoGrouping<'a>> {
    let features: Vec<&Embedding> = task.examples().iter().map(|x| &x.embedding).collect();
    let assignment = kmeans(&features, &KMeansParams::new(k, seed))?;

    let id = |cluster| PseudoClassId {
        task: task.task_id(),
        cluster,
    };
    let mut groups: IndexMap<PseudoClassId, Vec<&Embedding>> =
        (0..k).map(|c| (id(c), Vec::new())).collect();
    let mut label_counts: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); k];
    for (x, &c) in task.examples().iter().zip(&assignment.labels) {
        groups[&id(c)].push(&x.embedding);
        *label_counts[c].entry(x.label).or_default() += 1;
    }
    let mut majority_label = BTreeMap::new();
    let mut agree = 0usize;
    for (c, counts) in label_counts.iter().enumerate() {
        // BTreeMap order plus strict > keeps the lowest label on ties
        if let Some((&label, &n)) = counts
            .iter()
            .fold(None, |best: Option<(&u32, &usize)>, kv| match best {
                Some(b) if kv.1 <= b.1 => Some(b),
                _ => Some(kv),
            })
        {
            majority_label.insert(id(c), label);
            agree += n;
        }
    }
    let purity = agree as f64 / task.examples().len() as f64;
    Ok(PseudoGrouping {
        groups,
        majority_label,
        purity,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::LabeledEmbedding;
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Embedding::new((0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn k_one_is_the_global_mean() {
        let pts = random_points(200, 3, 1);
        let refs: Vec<&Embedding> = pts.iter().collect();
        let a = kmeans(&refs, &KMeansParams::new(1, 0)).unwrap();
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..3)
            .map(|j| pts.iter().map(|p| f64::from(p.values()[j])).sum::<f64>() / n)
            .collect();
        for (c, m) in a.centroids[0].iter().zip(&mean) {
            assert!((c - m).abs() < 1e-9);
        }
        let ss: f64 = pts
            .iter()
            .flat_map(|p| {
                p.values()
                    .iter()
                    .zip(&mean)
                    .map(|(&v, m)| (f64::from(v) - m).powi(2))
            })
            .sum();
        assert!((a.inertia - ss).abs() < 1e-9 * ss);
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let pts = random_points(300, 4, seed);
            let refs: Vec<&Embedding> = pts.iter().collect();
            let a = kmeans(&refs, &KMeansParams::new(7, seed)).unwrap();
            for w in a.inertia_history.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {} -> {}", w[0], w[1]);
            }
            assert!(a.inertia >= 0.0);
            assert!(a.labels.iter().all(|&l| l < 7));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = random_points(100, 2, 5);
        let refs: Vec<&Embedding> = pts.iter().collect();
        let a = kmeans(&refs, &KMeansParams::new(4, 11)).unwrap();
        let b = kmeans(&refs, &KMeansParams::new(4, 11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_params() {
        let pts = [e(&[0.0]), e(&[0.0]), e(&[1.0])];
        let refs: Vec<&Embedding> = pts.iter().collect();
        assert!(matches!(
            kmeans(&refs, &KMeansParams::new(3, 0)),
            Err(Error::Validation(_))
        ));
        assert!(kmeans(&refs, &KMeansParams::new(2, 0)).is_ok());
        assert!(kmeans(&refs, &KMeansParams::new(0, 0)).is_err());
        assert!(kmeans(&[], &KMeansParams::new(1, 0)).is_err());
        let mut p = KMeansParams::new(1, 0);
        p.max_iters = 0;
        assert!(kmeans(&refs, &p).is_err());
        p = KMeansParams::new(1, 0);
        p.tol = 0.0;
        assert!(kmeans(&refs, &p).is_err());
        let mixed = [e(&[0.0]), e(&[0.0, 1.0])];
        let refs: Vec<&Embedding> = mixed.iter().collect();
        assert!(matches!(
            kmeans(&refs, &KMeansParams::new(1, 0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn negative_zero_is_not_a_distinct_point() {
        let pts = [e(&[0.0]), e(&[-0.0])];
        let refs: Vec<&Embedding> = pts.iter().collect();
        assert!(kmeans(&refs, &KMeansParams::new(2, 0)).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded_at_farthest_point() {
        let data = vec![vec![0.0], vec![1.0], vec![10.0]];
        let mut labels = vec![0, 0, 0];
        let c = update(&data, &mut labels, 2);
        // cluster 0 mean is 11/3; the farthest point (10.0) seeds cluster 1
        assert_eq!(c[1], vec![10.0]);
        assert_eq!(labels, [0, 0, 1]);
    }

    #[test]
    fn exact_k_points_recovered() {
        let pts = [e(&[0.0, 0.0]), e(&[5.0, 5.0]), e(&[-3.0, 2.0])];
        let refs: Vec<&Embedding> = pts.iter().collect();
        let a = kmeans(&refs, &KMeansParams::new(3, 2)).unwrap();
        assert_eq!(a.inertia, 0.0);
        let uniq: HashSet<usize> = a.labels.iter().copied().collect();
        assert_eq!(uniq.len(), 3);
    }

    fn task_from(points: &[(u32, &[f32])]) -> Task {
        let xs: Vec<LabeledEmbedding> = points
            .iter()
            .enumerate()
            .map(|(i, (l, v))| LabeledEmbedding::new(i as u64, *l, e(v)))
            .collect();
        let mut classes: Vec<u32> = xs.iter().map(|x| x.label).collect();
        classes.sort_unstable();
        classes.dedup();
        Task::new(2, classes, xs).unwrap()
    }

    #[test]
    fn pseudo_group_k_one_purity_is_majority_fraction() {
        let task = task_from(&[(0, &[0.0]), (0, &[1.0]), (1, &[2.0]), (0, &[3.0])]);
        let g = pseudo_group(&task, 1, 0).unwrap();
        assert_eq!(g.purity, 0.75);
        assert_eq!(g.groups.len(), 1);
        let id = PseudoClassId {
            task: 2,
            cluster: 0,
        };
        assert_eq!(g.groups[&id].len(), 4);
        assert_eq!(g.majority_label[&id], 0);
    }

    #[test]
    fn pseudo_group_separated_is_pure() {
        let task = task_from(&[
            (4, &[0.0, 0.1]),
            (9, &[50.0, 50.0]),
            (4, &[0.2, 0.0]),
            (9, &[50.1, 49.9]),
            (4, &[-0.1, 0.0]),
        ]);
        let g = pseudo_group(&task, 2, 3).unwrap();
        assert_eq!(g.purity, 1.0);
        let labels: HashSet<u32> = g.majority_label.values().copied().collect();
        assert_eq!(labels, HashSet::from([4, 9]));
        assert_eq!(g.groups.values().map(Vec::len).sum::<usize>(), 5);
    }

    #[test]
    fn pseudo_ids_are_task_scoped() {
        let id = PseudoClassId {
            task: 3,
            cluster: 1,
        };
        assert_eq!(id.encode(4).unwrap(), 13);
        assert_eq!(PseudoClassId::decode(13, 4), id);
        assert!(PseudoClassId {
            task: usize::MAX,
            cluster: 0
        }
        .encode(2)
        .is_err());
    }
}
