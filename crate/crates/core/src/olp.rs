//! On-line pairing (OLP) loss.
//!
//! Every same-identity proposal pair across the two scene images yields two
//! symmetric subgroups, one with each proposal as anchor. A subgroup's
//! negatives are all dictionary entries not labeled with the anchor's
//! identity. The subgroup loss is a softmax cross-entropy over inner
//! products that puts the positive pair against every negative pair:
//!
//! ```text
//! L = -(1/m) sum_i log( e^{d(a,p)} / (e^{d(a,p)} + sum_j e^{d(a,n_j)}) )
//! ```
//!
//! Only the anchor receives gradient:
//! `dL/da = (1/m) [ (q - 1) p + sum_l qhat_l n_l ]`, with `q` and `qhat_l`
//! the softmax weights of the positive and of each negative.

use std::sync::Arc;

use crate::dictionary::{FeatureDictionary, IdentityLabel, NegativeSet};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, DenseMatrix};

/// Inputs must be unit vectors to within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub const DEFAULT_MAX_PAIRS_PER_IDENTITY: usize = 2;

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    for v in [a, b] {
        let n = norm(v);
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::UnnormalizedInput { norm: n });
        }
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Where a subgroup member came from: scene image (0 or 1) and row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProposalRef {
    pub image: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subgroup {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    /// Shared between the subgroups of one anchor identity.
    pub negatives: Arc<NegativeSet>,
    pub anchor_identity: u32,
    pub anchor_source: Option<ProposalRef>,
}

impl Subgroup {
    pub fn k(&self) -> usize {
        self.negatives.len()
    }

    /// Similarities `[d(a,p), d(a,n_1), ..., d(a,n_k)]`.
    fn scores(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.k() + 1);
        s.push(dot(&self.anchor, &self.positive));
        s.extend(self.negatives.features.row_iter().map(|n| dot(&self.anchor, n)));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OlpBatch {
    pub subgroups: Vec<Subgroup>,
}

impl OlpBatch {
    pub fn m(&self) -> usize {
        self.subgroups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subgroups.is_empty()
    }
}

/// Labeled embeddings of one scene image.
#[derive(Debug, Clone, Copy)]
pub struct LabeledFeatures<'a> {
    pub features: &'a DenseMatrix,
    pub labels: &'a [IdentityLabel],
}

/// Builds symmetric subgroups for every identity labeled in both images.
///
/// For each shared identity (in order of first appearance in image 1), the
/// first `max_pairs_per_identity` cross pairs `(i, j)` in row order each
/// emit `(anchor = i, positive = j)` followed by `(anchor = j, positive = i)`.
pub fn form_subgroups(
    img1: LabeledFeatures<'_>,
    img2: LabeledFeatures<'_>,
    dict: &FeatureDictionary,
    max_pairs_per_identity: usize,
) -> OlpBatch {
    let dim = img1.features.cols();
    let mut seen = Vec::new();
    let mut subgroups = Vec::new();
    for label in img1.labels {
        let IdentityLabel::Id(c) = *label else { continue };
        if seen.contains(&c) {
            continue;
        }
        seen.push(c);
        let rows1: Vec<usize> = rows_with(img1.labels, c);
        let rows2: Vec<usize> = rows_with(img2.labels, c);
        if rows2.is_empty() {
            continue;
        }
        let negatives = dict.negative_set(c, dim);
        let pairs = rows1.iter().flat_map(|&i| rows2.iter().map(move |&j| (i, j)));
        for (i, j) in pairs.take(max_pairs_per_identity) {
            let (f1, f2) = (img1.features.row(i), img2.features.row(j));
            subgroups.push(Subgroup {
                anchor: f1.to_vec(),
                positive: f2.to_vec(),
                negatives: Arc::clone(&negatives),
                anchor_identity: c,
                anchor_source: Some(ProposalRef { image: 0, row: i }),
            });
            subgroups.push(Subgroup {
                anchor: f2.to_vec(),
                positive: f1.to_vec(),
                negatives: Arc::clone(&negatives),
                anchor_identity: c,
                anchor_source: Some(ProposalRef { image: 1, row: j }),
            });
        }
    }
    OlpBatch { subgroups }
}

fn rows_with(labels: &[IdentityLabel], class: u32) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, l)| l.is_identity(class)).map(|(i, _)| i).collect()
}

/// Softmax of the scores with the max subtracted; returns `(probs, log-sum-exp)`.
fn softmax(scores: &[f64]) -> (Vec<f64>, f64) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / sum).collect(), max + sum.ln())
}

/// `-log q` for a single subgroup given explicit vectors, with the
/// bilinear inner product as `d`.
pub fn subgroup_loss(anchor: &[f64], positive: &[f64], negatives: &DenseMatrix) -> f64 {
    let mut s = vec![dot(anchor, positive)];
    s.extend(negatives.row_iter().map(|n| dot(anchor, n)));
    let (_, lse) = softmax(&s);
    lse - s[0]
}

pub fn olp_loss(batch: &OlpBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = batch.m() as f64;
    Ok(batch
        .subgroups
        .iter()
        .map(|sg| {
            let s = sg.scores();
            softmax(&s).1 - s[0]
        })
        .sum::<f64>()
        / m)
}

/// Per-subgroup results of [`olp_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct OlpGradient {
    pub loss: f64,
    /// `dL/d anchor` per subgroup, including the `1/m` factor.
    pub anchor_grads: Vec<Vec<f64>>,
    /// Softmax weight of the positive pair per subgroup.
    pub q: Vec<f64>,
    /// Softmax weight of each negative pair per subgroup.
    pub q_hat: Vec<Vec<f64>>,
    /// `(d(anchor, n_l), label_l)` per subgroup in negative order, for hard mining.
    pub pair_stats: Vec<Vec<(f64, IdentityLabel)>>,
}

pub fn olp_gradient(batch: &OlpBatch) -> Result<OlpGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = batch.m() as f64;
    let mut out = OlpGradient {
        loss: 0.0,
        anchor_grads: Vec::with_capacity(batch.m()),
        q: Vec::with_capacity(batch.m()),
        q_hat: Vec::with_capacity(batch.m()),
        pair_stats: Vec::with_capacity(batch.m()),
    };
    for sg in &batch.subgroups {
        let s = sg.scores();
        let (p, lse) = softmax(&s);
        out.loss += (lse - s[0]) / m;

        let q = p[0];
        let mut g: Vec<f64> = sg.positive.iter().map(|x| (q - 1.0) * x / m).collect();
        for (l, n) in sg.negatives.features.row_iter().enumerate() {
            axpy(p[l + 1] / m, n, &mut g);
        }
        out.anchor_grads.push(g);
        out.q.push(q);
        out.pair_stats.push(s[1..].iter().copied().zip(sg.negatives.labels.iter().copied()).collect());
        out.q_hat.push(p[1..].to_vec());
    }
    Ok(out)
}
