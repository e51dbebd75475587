//! Training-tuple mining.
//!
//! For each training query the positive is the geographically nearby
//! database image (within `r_pos`) that is closest in the current
//! embedding; the negatives are the `n_neg` geographically far images
//! (beyond `r_neg`) that are closest in the current embedding, i.e. hard
//! negatives. Ties go to the lowest image id.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Descriptor, PlaceDataset};
use crate::embedder::EmbedderModel;
use crate::embedding::{dist_sq, TrainingTuple};
use crate::error::{check_dim, Error, Result};
use crate::eval::embed_all;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Potential-positive radius in meters.
    pub r_pos: f64,
    /// Minimum geo-distance of a negative in meters.
    pub r_neg: f64,
    pub n_neg: usize,
    /// Re-mine every this many epochs.
    pub remine_every: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            r_pos: 10.0,
            r_neg: 25.0,
            n_neg: 10,
            remine_every: 1,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_pos > 0.0 && self.r_pos < self.r_neg && self.r_neg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < r_pos < r_neg, got r_pos={} r_neg={}",
                self.r_pos, self.r_neg
            )));
        }
        if self.n_neg == 0 || self.remine_every == 0 {
            return Err(Error::InvalidArgument(
                "n_neg and remine_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mines one tuple per training query, embedding the whole database with
/// the current model first.
pub fn mine_tuples(
    dataset: &PlaceDataset,
    model: &EmbedderModel,
    cfg: &MiningConfig,
) -> Result<Vec<TrainingTuple>> {
    let db_emb = embed_all(model, &dataset.database)?;
    let q_emb = embed_all(model, &dataset.queries_train)?;
    mine_with_embeddings(
        &dataset.queries_train,
        &q_emb,
        &dataset.database,
        &db_emb,
        cfg,
    )
}

/// Mining over precomputed embeddings. Output is sorted by query id.
///
/// Queries without a candidate positive, or with fewer than `n_neg` far
/// images, are skipped with a warning; if every query is skipped the call
/// fails.
pub fn mine_with_embeddings(
    queries: &[Descriptor],
    query_embeddings: &[Vec<f64>],
    database: &[Descriptor],
    db_embeddings: &[Vec<f64>],
    cfg: &MiningConfig,
) -> Result<Vec<TrainingTuple>> {
    cfg.validate()?;
    check_dim(queries.len(), query_embeddings.len())?;
    check_dim(database.len(), db_embeddings.len())?;
    if let (Some(q), Some(d)) = (query_embeddings.first(), db_embeddings.first()) {
        check_dim(d.len(), q.len())?;
    }

    let mined: Vec<Option<TrainingTuple>> = queries
        .par_iter()
        .zip(query_embeddings.par_iter())
        .map(|(q, qe)| mine_one(q, qe, database, db_embeddings, cfg))
        .collect();

    let mut tuples: Vec<TrainingTuple> = mined.into_iter().flatten().collect();
    if tuples.is_empty() {
        return Err(Error::Mining(format!(
            "none of {} training queries has a positive within {} m and {} negatives beyond {} m",
            queries.len(),
            cfg.r_pos,
            cfg.n_neg,
            cfg.r_neg
        )));
    }
    tuples.sort_by_key(|t| t.query.image_id);
    Ok(tuples)
}

fn mine_one(
    q: &Descriptor,
    qe: &[f64],
    database: &[Descriptor],
    db_emb: &[Vec<f64>],
    cfg: &MiningConfig,
) -> Option<TrainingTuple> {
    // (embedding distance², image id, index)
    let mut positives: Vec<(f64, u64, usize)> = Vec::new();
    let mut far: Vec<(f64, u64, usize)> = Vec::new();
    for (i, (d, e)) in database.iter().zip(db_emb).enumerate() {
        if d.image_id == q.image_id {
            continue;
        }
        let geo = q.geo_distance(d);
        if geo <= cfg.r_pos {
            positives.push((dist_sq(qe, e), d.image_id, i));
        } else if geo > cfg.r_neg {
            far.push((dist_sq(qe, e), d.image_id, i));
        }
    }
    let by_dist_then_id =
        |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));

    let Some(&(_, _, pos)) = positives.iter().min_by(|a, b| by_dist_then_id(a, b)) else {
        warn!(
            "query {} has no database image within {} m; skipped",
            q.image_id, cfg.r_pos
        );
        return None;
    };
    if far.len() < cfg.n_neg {
        warn!(
            "query {} has only {} images beyond {} m (need {}); skipped",
            q.image_id,
            far.len(),
            cfg.r_neg,
            cfg.n_neg
        );
        return None;
    }
    if far.len() > cfg.n_neg {
        far.select_nth_unstable_by(cfg.n_neg - 1, by_dist_then_id);
        far.truncate(cfg.n_neg);
    }
    far.sort_by(by_dist_then_id);

    Some(TrainingTuple {
        query: q.clone(),
        positive: database[pos].clone(),
        negatives: far.iter().map(|&(_, _, i)| database[i].clone()).collect(),
    })
}

/// CSV dump: `query_id,positive_id,neg_id_1..neg_id_N`.
pub fn tuples_to_csv(tuples: &[TrainingTuple]) -> String {
    let n = tuples.first().map_or(0, |t| t.negatives.len());
    let mut out = String::from("query_id,positive_id");
    for i in 1..=n {
        out.push_str(&format!(",neg_id_{i}"));
    }
    out.push('\n');
    for t in tuples {
        out.push_str(&format!("{},{}", t.query.image_id, t.positive.image_id));
        for neg in &t.negatives {
            out.push_str(&format!(",{}", neg.image_id));
        }
        out.push('\n');
    }
    out
}
