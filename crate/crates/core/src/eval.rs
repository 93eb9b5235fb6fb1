//! Retrieval metrics: mAP and CMC over a query/gallery split.

use serde::{Deserialize, Serialize};

use crate::mae::tensor::{dot, l2_norm, normalize};
use crate::{Error, Result};

/// Identity and camera of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    /// Drop gallery entries sharing both identity and camera with the query.
    pub drop_same_camera: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            drop_same_camera: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub identity: usize,
    pub camera: usize,
    pub ap: f64,
    /// Zero-based rank of the first correct match.
    pub first_hit: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Gallery indices by descending cosine similarity; ties go to the lower
/// index.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Relevance flags along `ranking` after removing junk entries.
pub fn relevance(ranking: &[usize], query: ImageMeta, gallery: &[ImageMeta], protocol: Protocol) -> Vec<bool> {
    ranking
        .iter()
        .map(|&g| gallery[g])
        .filter(|m| !(protocol.drop_same_camera && m.identity == query.identity && m.camera == query.camera))
        .map(|m| m.identity == query.identity)
        .collect()
}

/// Mean of precision@k over the ranks of relevant items. `None` when
/// nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn first_hit(relevant: &[bool]) -> Option<usize> {
    relevant.iter().position(|&r| r)
}

/// Fraction of queries whose first hit lies within the top `k`.
pub fn cmc_at(first_hits: &[usize], k: usize) -> f64 {
    if first_hits.is_empty() {
        return 0.0;
    }
    first_hits.iter().filter(|&&h| h < k).count() as f64 / first_hits.len() as f64
}

/// Scores every query against the gallery. Queries without any valid
/// match are skipped with a warning.
pub fn evaluate(
    query_features: &[Vec<f64>],
    query_meta: &[ImageMeta],
    gallery_features: &[Vec<f64>],
    gallery_meta: &[ImageMeta],
    protocol: Protocol,
) -> Result<(Metrics, Vec<QueryResult>)> {
    if query_features.len() != query_meta.len() || gallery_features.len() != gallery_meta.len() {
        return Err(Error::Shape("feature and metadata counts differ".into()));
    }
    if gallery_features.is_empty() {
        return Err(Error::InvalidArgument("gallery is empty".into()));
    }
    if query_features.is_empty() {
        return Err(Error::InvalidArgument("query set is empty".into()));
    }
    let per_query: Vec<Option<QueryResult>> = crate::par::map_indexed(query_features.len(), |q| {
        let ranking = rank_gallery(&query_features[q], gallery_features);
        let rel = relevance(&ranking, query_meta[q], gallery_meta, protocol);
        Some(QueryResult {
            query: q,
            identity: query_meta[q].identity,
            camera: query_meta[q].camera,
            ap: average_precision(&rel)?,
            first_hit: first_hit(&rel)?,
        })
    });
    let skipped = per_query.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} queries have no valid gallery match and are ignored");
    }
    let results: Vec<QueryResult> = per_query.into_iter().flatten().collect();
    if results.is_empty() {
        return Err(Error::InvalidArgument("no query has a valid gallery match".into()));
    }
    Ok((summarize(&results), results))
}

pub fn summarize(results: &[QueryResult]) -> Metrics {
    let hits: Vec<usize> = results.iter().map(|r| r.first_hit).collect();
    Metrics {
        map: results.iter().map(|r| r.ap).sum::<f64>() / results.len().max(1) as f64,
        rank1: cmc_at(&hits, 1),
        rank5: cmc_at(&hits, 5),
        rank10: cmc_at(&hits, 10),
        num_queries: results.len(),
    }
}

pub fn per_query_csv(results: &[QueryResult]) -> String {
    let mut out = String::from("query,identity,camera,ap,first_hit\n");
    for r in results {
        out.push_str(&format!("{},{},{},{:.6},{}\n", r.query, r.identity, r.camera, r.ap, r.first_hit));
    }
    out
}

/// Expected AP of a uniformly random ranking of `n` items with `r`
/// relevant ones.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 <= r <= n");
    if n == 1 {
        return 1.0;
    }
    let (nf, rf) = (n as f64, r as f64);
    (1..=n)
        .map(|k| (1.0 + (rf - 1.0) * (k as f64 - 1.0) / (nf - 1.0)) / k as f64)
        .sum::<f64>()
        / nf
}

/// mAP of random unit features on the given split, as `(mean, std)` over
/// `trials` draws.
pub fn chance_map(
    query_meta: &[ImageMeta],
    gallery_meta: &[ImageMeta],
    dim: usize,
    trials: usize,
    seed: u64,
    protocol: Protocol,
) -> Result<(f64, f64)> {
    use rand_distr::{Distribution, StandardNormal};
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let maps: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rng = crate::seed::rng(seed, "chance-baseline", &[t as u64]);
            let mut draw = |n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                        normalize(&mut v);
                        v
                    })
                    .collect()
            };
            let q = draw(query_meta.len());
            let g = draw(gallery_meta.len());
            evaluate(&q, query_meta, &g, gallery_meta, protocol).map(|(m, _)| m.map)
        })
        .collect::<Result<_>>()?;
    let mean = maps.iter().sum::<f64>() / trials as f64;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / trials as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_partial_rankings() {
        assert_eq!(average_precision(&[true, false, false]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert_eq!(average_precision(&[false, false]), None);
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cmc_counts_first_hits() {
        let hits = [0, 0, 3, 7];
        assert_eq!(cmc_at(&hits, 1), 0.5);
        assert_eq!(cmc_at(&hits, 5), 0.75);
        assert_eq!(cmc_at(&hits, 10), 1.0);
    }

    #[test]
    fn ties_break_by_index() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(rank_gallery(&[1.0, 0.0], &g), vec![0, 2, 1]);
    }

    #[test]
    fn same_camera_matches_are_junk() {
        let q = vec![vec![1.0, 0.0]];
        let qm = [ImageMeta { identity: 1, camera: 0 }];
        let g = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let gm = [
            ImageMeta { identity: 1, camera: 0 },
            ImageMeta { identity: 2, camera: 1 },
            ImageMeta { identity: 1, camera: 2 },
        ];
        let (m, r) = evaluate(&q, &qm, &g, &gm, Protocol::default()).unwrap();
        assert_eq!(r[0].first_hit, 1);
        assert_eq!(m.map, 0.5);
        let (m, _) = evaluate(&q, &qm, &g, &gm, Protocol { drop_same_camera: false }).unwrap();
        assert_eq!(m.rank1, 1.0);
    }

    #[test]
    fn empty_inputs_error() {
        let qm = [ImageMeta { identity: 1, camera: 0 }];
        assert!(evaluate(&[vec![1.0]], &qm, &[], &[], Protocol::default()).is_err());
        assert!(evaluate(&[], &[], &[vec![1.0]], &qm, Protocol::default()).is_err());
    }

    #[test]
    fn expected_ap_small_cases() {
        assert_eq!(expected_random_ap(1, 1), 1.0);
        assert!((expected_random_ap(2, 1) - 0.75).abs() < 1e-12);
        assert!((expected_random_ap(5, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_query() {
        let r = vec![QueryResult {
            query: 0,
            identity: 3,
            camera: 1,
            ap: 0.5,
            first_hit: 1,
        }];
        assert_eq!(per_query_csv(&r), "query,identity,camera,ap,first_hit\n0,3,1,0.500000,1\n");
    }
}
