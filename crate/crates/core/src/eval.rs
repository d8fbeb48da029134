//! Retrieval metrics: CMC top-k and mean average precision.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::network::EmbeddingNetwork;
use crate::sim::{build_eval_split, EvalSplit, IdentityWorld, Proposal};

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

pub const EVAL_HEADER: [&str; 6] = ["gallery_size", "num_queries", "top1", "top5", "top10", "map"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub gallery_size: usize,
    pub num_queries: usize,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    #[serde(rename = "map")]
    pub mean_ap: f64,
    /// Average precision of each query, in query order.
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
}

impl EvalReport {
    pub fn cmc(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.top1),
            5 => Some(self.top5),
            10 => Some(self.top10),
            _ => None,
        }
    }

    /// CSV fields in [`EVAL_HEADER`] order.
    pub fn record(&self) -> Vec<String> {
        vec![
            self.gallery_size.to_string(),
            self.num_queries.to_string(),
            format!("{:?}", self.top1),
            format!("{:?}", self.top5),
            format!("{:?}", self.top10),
            format!("{:?}", self.mean_ap),
        ]
    }
}

/// Unit embeddings for a list of proposals (inference, no cache).
pub fn extract_embeddings(net: &EmbeddingNetwork, proposals: &[Proposal]) -> Result<DenseMatrix> {
    let dim = net.config().input_dim;
    let inputs: Vec<&[f64]> = proposals.iter().map(|p| p.input.as_slice()).collect();
    let x = DenseMatrix::from_rows(&inputs, dim)?;
    net.embed(&x)
}

/// Gallery indices sorted by descending similarity; ties keep index order.
pub fn rank_gallery(query: &[f64], gallery: &DenseMatrix) -> Vec<usize> {
    let scores: Vec<f64> = gallery.row_iter().map(|g| dot(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Mean of the precision at each relevant position of a ranking.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn evaluate(
    query_features: &DenseMatrix,
    query_ids: &[u32],
    gallery_features: &DenseMatrix,
    gallery_ids: &[u32],
) -> Result<EvalReport> {
    if query_ids.is_empty() || query_features.rows() != query_ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} query rows (at least one)", query_ids.len()),
            got: format!("{}", query_features.rows()),
        });
    }
    if gallery_features.rows() != gallery_ids.len() || gallery_features.cols() != query_features.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} gallery", gallery_ids.len(), query_features.cols()),
            got: format!("{}x{}", gallery_features.rows(), gallery_features.cols()),
        });
    }
    let mut hits = [0usize; CMC_RANKS.len()];
    let mut per_query_ap = Vec::with_capacity(query_ids.len());
    for (qi, &qid) in query_ids.iter().enumerate() {
        let order = rank_gallery(query_features.row(qi), gallery_features);
        let relevant: Vec<bool> = order.iter().map(|&g| gallery_ids[g] == qid).collect();
        let ap = average_precision(&relevant).ok_or(Error::NoRelevantItem { query: qi })?;
        let first = relevant.iter().position(|&r| r).expect("has a relevant item");
        for (h, &k) in hits.iter_mut().zip(&CMC_RANKS) {
            if first < k {
                *h += 1;
            }
        }
        per_query_ap.push(ap);
    }
    let nq = query_ids.len() as f64;
    Ok(EvalReport {
        gallery_size: gallery_ids.len(),
        num_queries: query_ids.len(),
        top1: hits[0] as f64 / nq,
        top5: hits[1] as f64 / nq,
        top10: hits[2] as f64 / nq,
        mean_ap: per_query_ap.iter().sum::<f64>() / nq,
        per_query_ap,
    })
}

/// Embeds a split and evaluates it at one gallery size.
pub fn evaluate_split(net: &EmbeddingNetwork, split: &EvalSplit, gallery_size: usize) -> Result<EvalReport> {
    let (gallery, gallery_ids) = split.gallery(gallery_size)?;
    let q = net.embed(&split.queries)?;
    let g = net.embed(&gallery)?;
    evaluate(&q, &split.query_ids, &g, &gallery_ids)
}

/// Evaluates on nested galleries: one split is drawn at the largest size and
/// every smaller gallery uses a prefix of its distractors.
pub fn gallery_sweep<R: Rng + ?Sized>(
    net: &EmbeddingNetwork,
    world: &IdentityWorld,
    sizes: &[usize],
    num_probes: usize,
    rng: &mut R,
) -> Result<Vec<EvalReport>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("gallery sizes must be strictly ascending".into()));
    }
    let Some(&largest) = sizes.last() else { return Ok(Vec::new()) };
    let split = build_eval_split(world, largest, num_probes, rng)?;
    sizes.iter().map(|&s| evaluate_split(net, &split, s)).collect()
}

/// CSV with columns `gallery_size,num_queries,top1,top5,top10,map`.
pub fn write_eval_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVAL_HEADER)?;
    for r in reports {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}
