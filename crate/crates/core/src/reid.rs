//! Unsupervised re-identification with softened pseudo-labels.
//!
//! Every epoch the current encoder embeds the training set, DBSCAN over the
//! pairwise Jaccard distances yields hard labels, and the labels are mixed
//! with the previous epoch's soft labels. A cluster dictionary seeded with
//! cluster means is momentum-updated while the encoder minimizes a
//! temperature-scaled soft cross-entropy against the dictionary.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::eval::Metrics;
use crate::imagecore::{Image, PatchGrid};
use crate::mae::params::{AdamW, Grads};
use crate::mae::tensor::{dot, normalize};
use crate::mae::MaeModel;
use crate::{Error, Result};

/// `1 − a·b / (|a|² + |b|² − a·b)`.
pub fn jaccard_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "feature lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ab = dot(a, b);
    let denom = dot(a, a) + dot(b, b) - ab;
    if denom == 0.0 {
        return Err(Error::InvalidArgument(
            "Jaccard distance is undefined for two zero vectors".into(),
        ));
    }
    Ok(1.0 - ab / denom)
}

/// Symmetric N×N distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = f(i, j);
            }
        }
        DistanceMatrix { n, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Jaccard distances between all feature pairs. Rows are computed in
/// parallel; the upper triangle is mirrored so the result is exactly
/// symmetric with a zero diagonal.
pub fn pairwise_distances(features: &[Vec<f64>]) -> Result<DistanceMatrix> {
    let n = features.len();
    let rows: Vec<Result<Vec<f64>>> = crate::par::map_indexed(n, |i| {
        (i + 1..n)
            .map(|j| jaccard_distance(&features[i], &features[j]))
            .collect()
    });
    let mut data = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (off, d) in row?.into_iter().enumerate() {
            let j = i + 1 + off;
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardLabel {
    Cluster(usize),
    Outlier,
}

impl HardLabel {
    pub fn cluster(self) -> Option<usize> {
        match self {
            HardLabel::Cluster(c) => Some(c),
            HardLabel::Outlier => None,
        }
    }
}

pub fn num_clusters(labels: &[HardLabel]) -> usize {
    labels
        .iter()
        .filter_map(|l| l.cluster())
        .max()
        .map_or(0, |m| m + 1)
}

/// DBSCAN over a precomputed distance matrix, scanning rows in order.
///
/// A point is core when at least `min_samples` points (itself included)
/// lie within `eps`. Clusters are numbered in discovery order; a border
/// point joins the first cluster that reaches it.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_samples: usize) -> Result<Vec<HardLabel>> {
    if !(eps > 0.0) {
        return Err(Error::config("reid.eps", format!("must be positive, got {eps}")));
    }
    if min_samples == 0 {
        return Err(Error::config("reid.min_samples", "must be at least 1"));
    }
    let n = dist.n;
    let neighbours: Vec<Vec<usize>> = crate::par::map_indexed(n, |i| {
        dist.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &d)| d <= eps)
            .map(|(j, _)| j)
            .collect()
    });
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unseen,
        Noise,
        In(usize),
    }
    let mut state = vec![State::Unseen; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if state[i] != State::Unseen {
            continue;
        }
        if neighbours[i].len() < min_samples {
            state[i] = State::Noise;
            continue;
        }
        let c = next;
        next += 1;
        state[i] = State::In(c);
        queue.extend(neighbours[i].iter().copied());
        while let Some(j) = queue.pop_front() {
            match state[j] {
                State::Noise => state[j] = State::In(c),
                State::Unseen => {
                    state[j] = State::In(c);
                    if neighbours[j].len() >= min_samples {
                        queue.extend(neighbours[j].iter().copied());
                    }
                }
                State::In(_) => {}
            }
        }
    }
    Ok(state
        .into_iter()
        .map(|s| match s {
            State::In(c) => HardLabel::Cluster(c),
            _ => HardLabel::Outlier,
        })
        .collect())
}

/// Stable global label indices across epochs.
///
/// DBSCAN numbers clusters arbitrarily each epoch. Each new cluster is
/// matched to the previous epoch's global label it shares the most samples
/// with (greedy on the contingency table, largest count first, ties by
/// lower ids); unmatched clusters get fresh indices. Indices are never
/// reused.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterRegistry {
    next_global: usize,
    assignment: Vec<Option<usize>>,
    /// Epoch cluster id → global index for the latest epoch.
    pub mapping: Vec<usize>,
    /// `(epoch cluster, previous global, shared samples)` for the latest epoch.
    pub contingency: Vec<(usize, usize, usize)>,
}

impl ClusterRegistry {
    /// Number of global labels ever issued.
    pub fn len(&self) -> usize {
        self.next_global
    }

    pub fn is_empty(&self) -> bool {
        self.next_global == 0
    }

    /// Global label per sample from the latest [`align`](Self::align).
    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    /// Aligns this epoch's clusters to global indices. Returns the previous
    /// per-sample assignment.
    pub fn align(&mut self, hard: &[HardLabel]) -> Vec<Option<usize>> {
        let alpha = num_clusters(hard);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, label) in hard.iter().enumerate() {
            if let (Some(c), Some(Some(g))) = (label.cluster(), self.assignment.get(i)) {
                *counts.entry((c, *g)).or_default() += 1;
            }
        }
        let mut table: Vec<(usize, usize, usize)> = counts.into_iter().map(|((c, g), n)| (c, g, n)).collect();
        table.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut mapping = vec![usize::MAX; alpha];
        let mut used = HashSet::new();
        for &(c, g, _) in &table {
            if mapping[c] == usize::MAX && !used.contains(&g) {
                mapping[c] = g;
                used.insert(g);
            }
        }
        for m in mapping.iter_mut().filter(|m| **m == usize::MAX) {
            *m = self.next_global;
            self.next_global += 1;
        }
        table.sort();
        self.contingency = table;
        let assignment = hard.iter().map(|l| l.cluster().map(|c| mapping[c])).collect();
        self.mapping = mapping;
        std::mem::replace(&mut self.assignment, assignment)
    }
}

/// Probability vector over the global label registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub weights: Vec<f64>,
}

impl SoftLabel {
    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut weights = vec![0.0; len];
        weights[index] = 1.0;
        SoftLabel { weights }
    }

    /// Restricts the label to the clusters in `dict` (ordered by epoch
    /// cluster id) and renormalizes. Falls back to a one-hot on `own` when
    /// no mass lands on a live cluster.
    pub fn project(&self, dict: &ClusterDictionary, own: usize) -> Vec<f64> {
        let mut p: Vec<f64> = dict
            .global_ids
            .iter()
            .map(|&g| self.weights.get(g).copied().unwrap_or(0.0))
            .collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.iter_mut().for_each(|v| *v /= total);
        } else {
            p.iter_mut().for_each(|v| *v = 0.0);
            p[own] = 1.0;
        }
        p
    }
}

/// What the current one-hot label is mixed with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftenMode {
    /// The previous epoch's soft label, so history decays geometrically.
    #[default]
    Recursive,
    /// The previous epoch's hard label only.
    PreviousHard,
}

/// `λ·onehot(current) + (1−λ)·previous`, after aligning the epoch's
/// clusters in `registry`. Outliers get `None`; a sample without history
/// gets its one-hot label.
pub fn soften_labels(
    hard: &[HardLabel],
    previous: &[Option<SoftLabel>],
    lambda: f64,
    registry: &mut ClusterRegistry,
    mode: SoftenMode,
) -> Result<Vec<Option<SoftLabel>>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("reid.lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    let prev_hard = registry.align(hard);
    let len = registry.len();
    let labels = hard
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let c = label.cluster()?;
            let g = registry.mapping[c];
            let history: Option<SoftLabel> = match mode {
                SoftenMode::Recursive => previous.get(i).cloned().flatten(),
                SoftenMode::PreviousHard => prev_hard
                    .get(i)
                    .copied()
                    .flatten()
                    .map(|pg| SoftLabel::one_hot(len, pg)),
            };
            let mut y = SoftLabel::one_hot(len, g);
            if let Some(h) = history {
                for (j, w) in y.weights.iter_mut().enumerate() {
                    let old = h.weights.get(j).copied().unwrap_or(0.0);
                    *w = lambda * *w + (1.0 - lambda) * old;
                }
            }
            Some(y)
        })
        .collect();
    Ok(labels)
}

/// Unit-norm cluster centres indexed by epoch cluster id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDictionary {
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Global registry index of each entry.
    pub global_ids: Vec<usize>,
}

impl ClusterDictionary {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `F_c ← normalize(σ·F_c + (1−σ)·f)`.
    pub fn update(&mut self, cluster: usize, feature: &[f64], sigma: f64) -> Result<()> {
        let center = self
            .centers
            .get_mut(cluster)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cluster id {cluster}")))?;
        if center.len() != feature.len() {
            return Err(Error::Shape(format!(
                "feature length {} vs centre length {}",
                feature.len(),
                center.len()
            )));
        }
        for (c, f) in center.iter_mut().zip(feature) {
            *c = sigma * *c + (1.0 - sigma) * f;
        }
        normalize(center);
        Ok(())
    }
}

/// Mean feature per cluster, L2-normalized. Outliers are ignored.
/// `global_ids` maps epoch cluster ids to registry indices; pass `None` to
/// use the identity.
pub fn init_dictionary(
    features: &[Vec<f64>],
    hard: &[HardLabel],
    global_ids: Option<&[usize]>,
) -> Result<ClusterDictionary> {
    if features.len() != hard.len() {
        return Err(Error::Shape(format!(
            "{} features for {} labels",
            features.len(),
            hard.len()
        )));
    }
    let alpha = num_clusters(hard);
    if alpha == 0 {
        return Err(Error::InvalidArgument("no non-outlier cluster".into()));
    }
    let dim = features[0].len();
    let mut centers = vec![vec![0.0; dim]; alpha];
    let mut counts = vec![0usize; alpha];
    for (f, label) in features.iter().zip(hard) {
        if let Some(c) = label.cluster() {
            for (a, b) in centers[c].iter_mut().zip(f) {
                *a += b;
            }
            counts[c] += 1;
        }
    }
    for (center, &n) in centers.iter_mut().zip(&counts) {
        center.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        normalize(center);
    }
    let global_ids = match global_ids {
        Some(ids) if ids.len() == alpha => ids.to_vec(),
        Some(ids) => {
            return Err(Error::Shape(format!(
                "{} global ids for {alpha} clusters",
                ids.len()
            )))
        }
        None => (0..alpha).collect(),
    };
    Ok(ClusterDictionary {
        centers,
        counts,
        global_ids,
    })
}

/// Soft cross-entropy between `target` and the softmax over
/// `f·F_c / τ`. Returns the loss and its gradient with respect to `f`.
pub fn soft_contrast_loss(
    feature: &[f64],
    target: &[f64],
    dict: &ClusterDictionary,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if dict.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 clusters, got {}",
            dict.len()
        )));
    }
    if target.len() != dict.len() {
        return Err(Error::Shape(format!(
            "soft label has {} entries for {} clusters",
            target.len(),
            dict.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config("reid.tau", format!("must be positive, got {tau}")));
    }
    let logits: Vec<f64> = dict.centers.iter().map(|c| dot(feature, c) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let mass: f64 = target.iter().sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0; feature.len()];
    for ((z, p), center) in logits.iter().zip(target).zip(&dict.centers) {
        loss -= p * (z - lse);
        let dz = (z - lse).exp() * mass - p;
        if dz != 0.0 {
            crate::mae::tensor::axpy(dz / tau, center, &mut grad);
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub tau: f64,
    pub eps: f64,
    pub min_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub soften_mode: SoftenMode,
    /// Evaluate every this many epochs (0 disables).
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            lambda: 0.5,
            sigma: 0.5,
            tau: 0.05,
            eps: 0.6,
            min_samples: 4,
            lr: 1.5e-5,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 50,
            soften_mode: SoftenMode::Recursive,
            eval_interval: 1,
            seed: 0,
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("reid.lambda", self.lambda), ("reid.sigma", self.sigma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("reid.tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("reid.eps", format!("must be positive, got {}", self.eps)));
        }
        if self.min_samples == 0 {
            return Err(Error::config("reid.min_samples", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("reid.lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("reid.weight_decay", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("reid.batch_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReidEpochMetrics {
    pub epoch: usize,
    pub num_clusters: usize,
    pub num_outliers: usize,
    pub loss: Option<f64>,
    pub skipped: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Metrics>,
}

/// Labels, registry and dictionary at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReidState {
    pub epoch: usize,
    pub hard: Vec<HardLabel>,
    pub soft: Vec<Option<SoftLabel>>,
    pub registry: ClusterRegistry,
    pub dictionary: Option<ClusterDictionary>,
}

/// Fine-tunes `model` on unlabeled `images` and reports per-epoch metrics
/// and state. `evaluate` is called every `eval_interval` epochs.
pub fn train_reid(
    model: &mut MaeModel,
    images: &[Image],
    config: &ReidConfig,
    mut evaluate: impl FnMut(&MaeModel) -> Result<Metrics>,
    mut on_epoch: impl FnMut(&ReidEpochMetrics, &ReidState),
) -> Result<(Vec<ReidEpochMetrics>, ReidState)> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("re-ID training needs at least one image".into()));
    }
    let grids: Vec<PatchGrid> = images.iter().map(|img| model.patchify(img)).collect::<Result<_>>()?;
    let mut optimizer = AdamW::new(&model.store, config.lr, config.weight_decay);
    let mut registry = ClusterRegistry::default();
    let mut soft: Vec<Option<SoftLabel>> = vec![None; images.len()];
    let mut history = Vec::new();
    let mut state = None;
    for epoch in 0..config.epochs {
        let features: Vec<Vec<f64>> = crate::par::map_slice(&grids, |g| {
            model.feature_forward_grid(g).map(|t| t.feature().to_vec())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let dist = pairwise_distances(&features)?;
        let hard = dbscan(&dist, config.eps, config.min_samples)?;
        soft = soften_labels(&hard, &soft, config.lambda, &mut registry, config.soften_mode)?;
        let alpha = num_clusters(&hard);
        let outliers = hard.iter().filter(|l| **l == HardLabel::Outlier).count();
        let mut metrics = ReidEpochMetrics {
            epoch,
            num_clusters: alpha,
            num_outliers: outliers,
            loss: None,
            skipped: None,
            eval: None,
        };
        let mut dictionary = None;
        if alpha < 2 {
            let reason = format!("{alpha} cluster(s) with {outliers} outliers");
            log::warn!("re-ID epoch {epoch} skipped: {reason}");
            metrics.skipped = Some(reason);
        } else {
            let mut dict = init_dictionary(&features, &hard, Some(&registry.mapping))?;
            let loss = train_epoch(model, &mut optimizer, &grids, &hard, &soft, &mut dict, config, epoch)?;
            metrics.loss = Some(loss);
            dictionary = Some(dict);
        }
        if config.eval_interval > 0 && (epoch + 1) % config.eval_interval == 0 {
            metrics.eval = Some(evaluate(model)?);
        }
        let snapshot = ReidState {
            epoch,
            hard,
            soft: soft.clone(),
            registry: registry.clone(),
            dictionary,
        };
        on_epoch(&metrics, &snapshot);
        history.push(metrics);
        state = Some(snapshot);
    }
    let state = state.unwrap_or(ReidState {
        epoch: 0,
        hard: Vec::new(),
        soft,
        registry,
        dictionary: None,
    });
    Ok((history, state))
}

#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &mut MaeModel,
    optimizer: &mut AdamW,
    grids: &[PatchGrid],
    hard: &[HardLabel],
    soft: &[Option<SoftLabel>],
    dict: &mut ClusterDictionary,
    config: &ReidConfig,
    epoch: usize,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..grids.len()).filter(|&i| hard[i] != HardLabel::Outlier).collect();
    let mut rng = crate::seed::rng(config.seed, "shuffle-reid", &[epoch as u64]);
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for batch in order.chunks(config.batch_size) {
        let (m, d) = (&*model, &*dict);
        type Part = (Grads, f64, Vec<Vec<f64>>);
        let parts = crate::par::map_chunks(batch.len(), crate::mae::train::GRAD_CHUNK, |range| -> Result<Part> {
            let mut g = Grads::zeros_like(&m.store);
            let mut loss = 0.0;
            let mut feats = Vec::with_capacity(range.len());
            for &i in &batch[range] {
                let cluster = hard[i].cluster().expect("outliers are filtered");
                let target = soft[i]
                    .as_ref()
                    .expect("clustered samples carry a soft label")
                    .project(d, cluster);
                let tape = m.feature_forward_grid(&grids[i])?;
                let (l, df) = soft_contrast_loss(tape.feature(), &target, d, config.tau)?;
                m.feature_backward(&tape, &df, &mut g);
                loss += l;
                feats.push(tape.feature().to_vec());
            }
            Ok((g, loss, feats))
        });
        let mut grad_parts = Vec::with_capacity(parts.len());
        let mut feats = Vec::with_capacity(batch.len());
        let mut batch_loss = 0.0;
        for part in parts {
            let (g, l, f) = part?;
            grad_parts.push(g);
            batch_loss += l;
            feats.extend(f);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                loss: batch_loss,
            });
        }
        let mut grads = Grads::sum_ordered(&model.store, grad_parts);
        grads.scale(1.0 / batch.len() as f64);
        optimizer.update(&mut model.store, &grads);
        for (&i, f) in batch.iter().zip(&feats) {
            dict.update(hard[i].cluster().unwrap(), f, config.sigma)?;
        }
        total += batch_loss;
    }
    Ok(total / order.len().max(1) as f64)
}
