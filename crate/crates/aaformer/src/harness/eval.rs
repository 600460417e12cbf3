//! Retrieval evaluation: CMC rank-k accuracy and mean average precision over
//! Euclidean descriptor distances.

use crate::model::{extract_descriptor, forward_one, ModelConfig, ModelParams};
use crate::sinkhorn::AssignmentMode;

use super::data::{Split, SyntheticDataset};
use super::HarnessError;

/// Ranks reported by [`EvalReport`].
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// CMC accuracy at each rank in [`CMC_RANKS`].
    pub cmc: Vec<(usize, f64)>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    /// Queries actually scored.
    pub num_queries: usize,
    /// Queries dropped because the gallery holds no positive for them.
    pub excluded_queries: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0].1
    }

    /// `metric,value` CSV rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.cmc {
            out.push_str(&format!("rank{k},{v}\n"));
        }
        out.push_str(&format!("map,{}\n", self.map));
        out.push_str(&format!("queries,{}\n", self.num_queries));
        out.push_str(&format!("excluded_queries,{}\n", self.excluded_queries));
        out
    }
}

/// Score precomputed query→gallery distances. Per query the gallery is
/// ranked by ascending distance with ties broken by gallery index; rank-k
/// counts queries whose top k contain a matching identity, and AP averages
/// precision at each positive's rank. Queries without any gallery positive
/// are excluded and counted. `exclude_same_index` drops gallery entry j for
/// query j (for self-matching splits).
pub fn evaluate_rankings(
    dist: &[Vec<f64>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    exclude_same_index: bool,
) -> Result<EvalReport, HarnessError> {
    if dist.len() != query_ids.len() {
        return Err(HarnessError::Eval(format!(
            "{} distance rows for {} queries",
            dist.len(),
            query_ids.len()
        )));
    }
    let mut per_query_ap = Vec::new();
    let mut hits_at = vec![0usize; CMC_RANKS.len()];
    let mut excluded = 0usize;
    for (qi, row) in dist.iter().enumerate() {
        if row.len() != gallery_ids.len() {
            return Err(HarnessError::Eval(format!(
                "query {qi} has {} distances for {} gallery entries",
                row.len(),
                gallery_ids.len()
            )));
        }
        let mut order: Vec<usize> = (0..gallery_ids.len())
            .filter(|&j| !(exclude_same_index && j == qi))
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));

        let positives = order
            .iter()
            .filter(|&&j| gallery_ids[j] == query_ids[qi])
            .count();
        if positives == 0 {
            excluded += 1;
            continue;
        }
        let mut first_hit = None;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, &j) in order.iter().enumerate() {
            if gallery_ids[j] == query_ids[qi] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0 + 1);
                }
            }
        }
        ap /= positives as f64;
        per_query_ap.push(ap);
        let first_hit = first_hit.expect("positives > 0");
        for (slot, &k) in hits_at.iter_mut().zip(CMC_RANKS.iter()) {
            if first_hit <= k {
                *slot += 1;
            }
        }
    }
    let evaluated = per_query_ap.len();
    if evaluated == 0 {
        return Err(HarnessError::Eval(
            "no query has a gallery positive; nothing to evaluate".into(),
        ));
    }
    let map = per_query_ap.iter().sum::<f64>() / evaluated as f64;
    Ok(EvalReport {
        cmc: CMC_RANKS
            .iter()
            .zip(&hits_at)
            .map(|(&k, &h)| (k, h as f64 / evaluated as f64))
            .collect(),
        map,
        per_query_ap,
        num_queries: evaluated,
        excluded_queries: excluded,
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn distance_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|g| euclidean(q, g)).collect())
        .collect()
}

/// Run the model over a dataset split and collect (descriptor, identity)
/// pairs in enumeration order.
pub fn split_descriptors(
    dataset: &SyntheticDataset,
    split: Split,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AssignmentMode,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), HarnessError> {
    let mut descriptors = Vec::new();
    let mut ids = Vec::new();
    for (id, idx) in dataset.split_items(split) {
        let out = forward_one(&dataset.image(id, split, idx), params, cfg, mode)?;
        descriptors.push(extract_descriptor(&out)?.to_vec());
        ids.push(id);
    }
    Ok((descriptors, ids))
}

/// Query-vs-gallery evaluation of a trained model on the held-out splits.
pub fn evaluate_model(
    dataset: &SyntheticDataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AssignmentMode,
) -> Result<EvalReport, HarnessError> {
    let (q, qid) = split_descriptors(dataset, Split::Query, params, cfg, mode)?;
    let (g, gid) = split_descriptors(dataset, Split::Gallery, params, cfg, mode)?;
    evaluate_rankings(&distance_matrix(&q, &g), &qid, &gid, false)
}

/// Rank the training split against itself (self-matches excluded); the
/// overfit check asks for rank-1 = 1.0 here.
pub fn evaluate_train_split(
    dataset: &SyntheticDataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AssignmentMode,
) -> Result<EvalReport, HarnessError> {
    let (d, ids) = split_descriptors(dataset, Split::Train, params, cfg, mode)?;
    evaluate_rankings(&distance_matrix(&d, &d), &ids, &ids, true)
}
