use conmae::reid::{self, ClusterDictionary, DistanceMatrix, HardLabel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dictionary(rng: &mut ChaCha8Rng, k: usize, d: usize) -> ClusterDictionary {
    ClusterDictionary {
        centers: (0..k).map(|_| unit(rng, d)).collect(),
        counts: vec![1; k],
        global_ids: (0..k).collect(),
    }
}

/// Textbook soft cross-entropy with no max-shift.
fn naive_loss(f: &[f64], p: &[f64], dict: &ClusterDictionary, tau: f64) -> f64 {
    let e: Vec<f64> = dict
        .centers
        .iter()
        .map(|c| (c.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / tau).exp())
        .collect();
    let z: f64 = e.iter().sum();
    -p.iter().zip(&e).map(|(pi, ei)| pi * (ei / z).ln()).sum::<f64>()
}

fn probability(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

#[test]
fn contrast_loss_matches_textbook_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let k = rng.random_range(2..12);
        let d = rng.random_range(2..24);
        let dict = dictionary(&mut rng, k, d);
        let f = unit(&mut rng, d);
        let p = probability(&mut rng, k);
        let (loss, _) = reid::soft_contrast_loss(&f, &p, &dict, 0.05).unwrap();
        let want = naive_loss(&f, &p, &dict, 0.05);
        assert!((loss - want).abs() < 1e-10 * want.abs().max(1.0), "{loss} vs {want}");
    }
}

#[test]
fn contrast_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..30 {
        let (k, d) = (5, 8);
        let dict = dictionary(&mut rng, k, d);
        // Off the unit sphere on purpose: the gradient is w.r.t. raw f.
        let f: Vec<f64> = unit(&mut rng, d).into_iter().map(|x| x * 0.8).collect();
        let p = probability(&mut rng, k);
        let (_, grad) = reid::soft_contrast_loss(&f, &p, &dict, 0.1).unwrap();
        for i in 0..d {
            let mut up = f.clone();
            let mut dn = f.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (naive_loss(&up, &p, &dict, 0.1) - naive_loss(&dn, &p, &dict, 0.1)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-5, "dim {i}: {} vs {fd}", grad[i]);
        }
    }
}

#[test]
fn contrast_loss_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dict = dictionary(&mut rng, 3, 4);
    let f = unit(&mut rng, 4);
    assert!(reid::soft_contrast_loss(&f, &[0.5, 0.5], &dict, 0.05).is_err());
    assert!(reid::soft_contrast_loss(&f, &[1.0, 0.0, 0.0], &dict, 0.0).is_err());
    let one = dictionary(&mut rng, 1, 4);
    assert!(reid::soft_contrast_loss(&f, &[1.0], &one, 0.05).is_err());
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

/// Checks DBSCAN output against the definition: core points and their
/// eps-connected components, border points attached to some core neighbour,
/// noise elsewhere.
fn check_dbscan(dist: &DistanceMatrix, eps: f64, min: usize, labels: &[HardLabel]) {
    let n = dist.n;
    let near = |i: usize, j: usize| dist.get(i, j) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min).collect();
    let mut uf = UnionFind((0..n).collect());
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                uf.union(i, j);
            }
        }
    }
    let mut roots: Vec<usize> = (0..n).filter(|&i| core[i]).map(|i| uf.find(i)).collect();
    roots.sort_unstable();
    roots.dedup();
    assert_eq!(reid::num_clusters(labels), roots.len());

    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] {
                let same = uf.find(i) == uf.find(j);
                assert_eq!(labels[i] == labels[j], same, "core points {i}, {j}");
            }
        }
        if !core[i] {
            let hosts: Vec<usize> = (0..n).filter(|&j| core[j] && near(i, j)).collect();
            if hosts.is_empty() {
                assert_eq!(labels[i], HardLabel::Outlier, "point {i}");
            } else {
                assert!(hosts.iter().any(|&j| labels[j] == labels[i]), "border point {i}");
            }
        } else {
            assert!(labels[i].cluster().is_some());
        }
    }
}

fn points_matrix(seed: u64, n: usize) -> DistanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<(f64, f64)> = (0..4).map(|_| (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))).collect();
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let c = centres[rng.random_range(0..4)];
            (c.0 + rng.random_range(-1.0..1.0), c.1 + rng.random_range(-1.0..1.0))
        })
        .collect();
    DistanceMatrix::from_fn(n, |i, j| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt())
}

proptest! {
    #[test]
    fn dbscan_matches_definition(seed in any::<u64>(), n in 1usize..40, eps in 0.2f64..2.0, min in 1usize..6) {
        let dist = points_matrix(seed, n);
        let labels = reid::dbscan(&dist, eps, min).unwrap();
        check_dbscan(&dist, eps, min, &labels);
        prop_assert_eq!(reid::dbscan(&dist, eps, min).unwrap(), labels);
    }

    #[test]
    fn dictionary_centres_stay_unit(seed in any::<u64>(), sigma in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dict = dictionary(&mut rng, 3, 6);
        for _ in 0..500 {
            let c = rng.random_range(0..3);
            let f = unit(&mut rng, 6);
            dict.update(c, &f, sigma).unwrap();
        }
        for c in &dict.centers {
            prop_assert!((c.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn jaccard_matrix_for_random_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feats: Vec<Vec<f64>> = (0..10).map(|_| unit(&mut rng, 5)).collect();
    let m = reid::pairwise_distances(&feats).unwrap();
    for i in 0..10 {
        for j in 0..10 {
            let (a, b) = (&feats[i], &feats[j]);
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let aa: f64 = a.iter().map(|x| x * x).sum();
            let bb: f64 = b.iter().map(|x| x * x).sum();
            let want = if i == j { 0.0 } else { 1.0 - ab / (aa + bb - ab) };
            assert!((m.get(i, j) - want).abs() < 1e-12);
        }
    }
}
