//! Localization and retrieval metrics.
//!
//! Retrieval is exact brute force over squared embedding distance with
//! ties broken by lowest image id. A query is localized at `N` when any of
//! its top-`N` database items lies within the distance threshold (25 m by
//! default).

use std::collections::{BTreeMap, HashSet};

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Descriptor, PlaceDataset, Split, UNKNOWN_PLACE};
use crate::embedder::EmbedderModel;
use crate::embedding::{dist_sq, l2_normalize, Embedding};
use crate::error::{check_dim, Error, Result};

pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
pub const DEFAULT_N_VALUES: [usize; 6] = [1, 2, 5, 10, 20, 25];

/// Embedded database: ids, geo-positions and embeddings, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDb {
    pub ids: Vec<u64>,
    pub positions: Vec<[f64; 2]>,
    pub embeddings: Vec<Vec<f64>>,
}

impl RetrievalDb {
    pub fn new(ids: Vec<u64>, positions: Vec<[f64; 2]>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(ids.len(), positions.len())?;
        check_dim(ids.len(), embeddings.len())?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty database".into()));
        }
        let dim = embeddings[0].len();
        for e in &embeddings {
            check_dim(dim, e.len())?;
        }
        Ok(Self {
            ids,
            positions,
            embeddings,
        })
    }

    /// Embeds every descriptor with `model` (in parallel; order preserved).
    pub fn embed(model: &EmbedderModel, descriptors: &[Descriptor]) -> Result<Self> {
        let embeddings = embed_all(model, descriptors)?;
        Self::new(
            descriptors.iter().map(|d| d.image_id).collect(),
            descriptors.iter().map(Descriptor::position).collect(),
            embeddings,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    /// Database indices sorted by ascending distance to `query`, ties by id.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>> {
        check_dim(self.dim(), query.len())?;
        let mut scored: Vec<(f64, u64, usize)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (dist_sq(query, e), self.ids[i], i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().map(|(_, _, i)| i).collect())
    }
}

/// Embeds descriptors in parallel, preserving order.
pub fn embed_all(model: &EmbedderModel, descriptors: &[Descriptor]) -> Result<Vec<Vec<f64>>> {
    descriptors
        .par_iter()
        .map(|d| model.embed(&d.features).map(Embedding::into_values))
        .collect()
}

/// Fraction of queries localized within the threshold at each `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub n_values: Vec<usize>,
    pub recalls: Vec<f64>,
    pub distance_threshold_m: f64,
}

impl RecallCurve {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.n_values
            .iter()
            .position(|&v| v == n)
            .map(|i| self.recalls[i])
    }
}

pub fn recall_at_n(
    db: &RetrievalDb,
    query_embeddings: &[Vec<f64>],
    query_positions: &[[f64; 2]],
    n_values: &[usize],
    threshold_m: f64,
) -> Result<RecallCurve> {
    if query_embeddings.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    check_dim(query_embeddings.len(), query_positions.len())?;
    if n_values.contains(&0) {
        return Err(Error::InvalidArgument("N values must be at least 1".into()));
    }
    let thr_sq = threshold_m * threshold_m;
    // First rank at which each query hits a database item within threshold.
    let first_hits: Vec<Option<usize>> = query_embeddings
        .par_iter()
        .zip(query_positions.par_iter())
        .map(|(q, pos)| -> Result<Option<usize>> {
            let ranking = db.rank(q)?;
            Ok(ranking.iter().position(|&i| {
                let [x, y] = db.positions[i];
                let (dx, dy) = (x - pos[0], y - pos[1]);
                dx * dx + dy * dy <= thr_sq
            }))
        })
        .collect::<Result<_>>()?;
    let total = first_hits.len() as f64;
    let recalls = n_values
        .iter()
        .map(|&n| {
            first_hits
                .iter()
                .filter(|h| matches!(h, Some(r) if *r < n))
                .count() as f64
                / total
        })
        .collect();
    Ok(RecallCurve {
        n_values: n_values.to_vec(),
        recalls,
        distance_threshold_m: threshold_m,
    })
}

/// Uninterpolated average precision: mean over relevant items of the
/// precision at their rank. Relevant items missing from the ranking add 0.
pub fn average_precision(ranking: &[u64], relevant: &HashSet<u64>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// Mean of per-query average precision. Queries with an empty relevant set
/// are skipped with a warning.
pub fn mean_average_precision(rankings: &[Vec<u64>], relevance: &[HashSet<u64>]) -> Result<f64> {
    check_dim(rankings.len(), relevance.len())?;
    let mut aps = Vec::with_capacity(rankings.len());
    for (i, (r, rel)) in rankings.iter().zip(relevance).enumerate() {
        match average_precision(r, rel) {
            Some(ap) => aps.push(ap),
            None => warn!("query {i} has no relevant items; excluded from mAP"),
        }
    }
    if aps.is_empty() {
        return Err(Error::InvalidArgument(
            "no query has a relevant item; mAP undefined".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Linear projection onto the leading principal components of a database.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `target_dim` rows of length `D`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues matching `components`, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// Centered coordinates in the component basis (not normalized).
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Maps component coordinates back to the input space.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), y.len())?;
        let mut out = self.mean.clone();
        for (c, w) in self.components.iter().zip(y) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Projects then L2-normalizes.
    pub fn transform(&self, x: &[f64]) -> Result<Embedding> {
        l2_normalize(&self.project(x)?)
    }
}

/// Fits PCA on `db` and returns the projection with the re-normalized
/// reduced database.
pub fn pca_reduce(db: &[Vec<f64>], target_dim: usize) -> Result<(PcaProjection, Vec<Embedding>)> {
    let proj = pca_fit(db, target_dim)?;
    let reduced = db
        .iter()
        .map(|x| proj.transform(x))
        .collect::<Result<_>>()?;
    Ok((proj, reduced))
}

pub fn pca_fit(db: &[Vec<f64>], target_dim: usize) -> Result<PcaProjection> {
    let n = db.len();
    let dim = db.first().map_or(0, Vec::len);
    if target_dim == 0 || target_dim > dim {
        return Err(Error::InvalidArgument(format!(
            "target_dim must be in 1..={dim}, got {target_dim}"
        )));
    }
    if n <= target_dim {
        return Err(Error::InvalidArgument(format!(
            "need more than {target_dim} samples, got {n}"
        )));
    }
    for x in db {
        check_dim(dim, x.len())?;
    }
    let mut mean = vec![0.0; dim];
    for x in db {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |r, c| db[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * dim as f64;
    let rank = order
        .iter()
        .filter(|&&i| top > 0.0 && eig.eigenvalues[i] > tol)
        .count();
    if rank < target_dim {
        return Err(Error::RankDeficient {
            requested: target_dim,
            rank,
        });
    }

    let components = order[..target_dim]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: largest-magnitude coordinate is positive.
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(PcaProjection {
        mean,
        components,
        eigenvalues: order[..target_dim]
            .iter()
            .map(|&i| eig.eigenvalues[i])
            .collect(),
    })
}

/// Recall curves after reducing database and queries to each dimension.
pub fn dimension_sweep(
    db: &RetrievalDb,
    query_embeddings: &[Vec<f64>],
    query_positions: &[[f64; 2]],
    dims: &[usize],
    n_values: &[usize],
    threshold_m: f64,
) -> Result<Vec<(usize, RecallCurve)>> {
    dims.iter()
        .map(|&dim| {
            let (proj, reduced) = pca_reduce(&db.embeddings, dim)?;
            let reduced_db = RetrievalDb::new(
                db.ids.clone(),
                db.positions.clone(),
                reduced.into_iter().map(Embedding::into_values).collect(),
            )?;
            let queries = query_embeddings
                .iter()
                .map(|q| proj.transform(q).map(Embedding::into_values))
                .collect::<Result<Vec<_>>>()?;
            let curve = recall_at_n(
                &reduced_db,
                &queries,
                query_positions,
                n_values,
                threshold_m,
            )?;
            Ok((dim, curve))
        })
        .collect()
}

/// Serialized metrics: `{recall: {N: value}, map: value, dim: D}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: BTreeMap<String, f64>,
    pub map: f64,
    pub dim: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        // Keys sort as numbers, not strings.
        let mut recall = serde_json::Map::new();
        let mut keys: Vec<(usize, &String)> = self
            .recall
            .keys()
            .map(|k| (k.parse().unwrap_or(usize::MAX), k))
            .collect();
        keys.sort();
        for (_, k) in keys {
            recall.insert(k.clone(), serde_json::json!(self.recall[k]));
        }
        let v = serde_json::json!({ "recall": recall, "map": self.map, "dim": self.dim });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

/// Settings for [`evaluate_split`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub n_values: Vec<usize>,
    pub threshold_m: f64,
    /// Reduce to this many principal components before ranking.
    pub pca_dim: Option<usize>,
    /// Number of ranked ids kept per query in [`EvalOutcome::top_k`].
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            n_values: DEFAULT_N_VALUES.to_vec(),
            threshold_m: DEFAULT_THRESHOLD_M,
            pca_dim: None,
            top_k: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub curve: RecallCurve,
    pub report: MetricsReport,
    /// `(query id, top-K database ids)` in query order.
    pub top_k: Vec<(u64, Vec<u64>)>,
}

impl EvalOutcome {
    pub fn top_k_csv(&self) -> String {
        let k = self.top_k.first().map_or(0, |(_, ids)| ids.len());
        let mut out = String::from("query_id");
        for i in 1..=k {
            out.push_str(&format!(",rank_{i}"));
        }
        out.push('\n');
        for (q, ids) in &self.top_k {
            out.push_str(&q.to_string());
            for id in ids {
                out.push_str(&format!(",{id}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Embeds a split with `model` and computes recall@N, place-level mAP and
/// the top-K retrievals.
///
/// A database item is relevant to a query when they share a known place
/// id; for queries with an unknown place it is relevant when it lies within
/// the distance threshold.
pub fn evaluate_split(
    model: &EmbedderModel,
    dataset: &PlaceDataset,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let queries = dataset.queries(cfg.split);
    let mut db = RetrievalDb::embed(model, &dataset.database)?;
    let mut q_emb = embed_all(model, queries)?;
    if let Some(dim) = cfg.pca_dim {
        let (proj, reduced) = pca_reduce(&db.embeddings, dim)?;
        db.embeddings = reduced.into_iter().map(Embedding::into_values).collect();
        q_emb = q_emb
            .iter()
            .map(|q| proj.transform(q).map(Embedding::into_values))
            .collect::<Result<_>>()?;
    }
    let q_pos: Vec<[f64; 2]> = queries.iter().map(Descriptor::position).collect();
    let curve = recall_at_n(&db, &q_emb, &q_pos, &cfg.n_values, cfg.threshold_m)?;

    let rankings: Vec<Vec<u64>> = q_emb
        .par_iter()
        .map(|q| Ok(db.rank(q)?.into_iter().map(|i| db.ids[i]).collect()))
        .collect::<Result<_>>()?;
    let thr_sq = cfg.threshold_m * cfg.threshold_m;
    let relevance: Vec<HashSet<u64>> = queries
        .iter()
        .map(|q| {
            dataset
                .database
                .iter()
                .filter(|d| {
                    if q.place_id == UNKNOWN_PLACE {
                        let (dx, dy) = (d.x - q.x, d.y - q.y);
                        dx * dx + dy * dy <= thr_sq
                    } else {
                        d.place_id == q.place_id
                    }
                })
                .map(|d| d.image_id)
                .collect()
        })
        .collect();
    let map = mean_average_precision(&rankings, &relevance)?;

    let report = MetricsReport {
        recall: curve
            .n_values
            .iter()
            .zip(&curve.recalls)
            .map(|(n, r)| (n.to_string(), *r))
            .collect(),
        map,
        dim: db.dim(),
    };
    let top_k = queries
        .iter()
        .zip(rankings)
        .map(|(q, r)| (q.image_id, r.into_iter().take(cfg.top_k).collect()))
        .collect();
    Ok(EvalOutcome {
        curve,
        report,
        top_k,
    })
}
