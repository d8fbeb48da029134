//! Hard-example-priority (HEP) softmax.
//!
//! A cross-entropy over `C + 1` classes (background is class 0) evaluated
//! only on a pool of selected classes. The pool is built in three steps:
//!
//! 1. the true classes of all participating proposals;
//! 2. for every OLP subgroup, the classes of its hardest negatives (largest
//!    similarity to the anchor, up to `hard_per_subgroup` of them);
//! 3. uniformly drawn unused classes until the pool holds `num_selected`.
//!
//! Steps 1 and 2 are never truncated, so the pool can exceed `num_selected`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dictionary::IdentityLabel;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, DenseMatrix};
use crate::sgd::{update_slice, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HepConfig {
    /// Target pool size `M`.
    pub num_selected: usize,
    /// Hard negatives recorded per subgroup.
    pub hard_per_subgroup: usize,
    /// `C + 1`, background included.
    pub num_classes_total: usize,
}

impl Default for HepConfig {
    fn default() -> Self {
        Self { num_selected: 100, hard_per_subgroup: 20, num_classes_total: 201 }
    }
}

impl HepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes_total < 2 {
            return Err(Error::InvalidConfig("need at least one identity class".into()));
        }
        if self.num_selected < 1 || self.num_selected > self.num_classes_total {
            return Err(Error::InvalidConfig(format!(
                "num_selected must be in [1, {}]",
                self.num_classes_total
            )));
        }
        Ok(())
    }
}

/// Linear classifier over unit features; row `c` scores class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(num_classes_total: usize, dim: usize) -> Self {
        Self { weights: DenseMatrix::zeros(num_classes_total, dim), bias: vec![0.0; num_classes_total] }
    }

    /// Gaussian weights with standard deviation `init_std`, zero bias.
    pub fn new<R: Rng + ?Sized>(num_classes_total: usize, dim: usize, init_std: f64, rng: &mut R) -> Self {
        let mut head = Self::zeros(num_classes_total, dim);
        if init_std > 0.0 {
            let normal = Normal::new(0.0, init_std).expect("positive std");
            for w in head.weights.as_mut_slice() {
                *w = normal.sample(rng);
            }
        }
        head
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logit(&self, class: usize, feature: &[f64]) -> f64 {
        dot(self.weights.row(class), feature) + self.bias[class]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// Weights row-major, then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.weights.as_slice().to_vec();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let nw = self.weights.as_slice().len();
        if params.len() != nw + self.bias.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", nw + self.bias.len()),
                got: format!("{}", params.len()),
            });
        }
        self.weights.as_mut_slice().copy_from_slice(&params[..nw]);
        self.bias.copy_from_slice(&params[nw..]);
        Ok(())
    }
}

/// Ordered, duplicate-free list of selected class indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SelectionPool {
    classes: Vec<usize>,
}

impl SelectionPool {
    /// Pool from an explicit class list; duplicates are dropped.
    pub fn from_classes(classes: impl IntoIterator<Item = usize>) -> Self {
        let mut pool = Self::default();
        for c in classes {
            pool.push(c);
        }
        pool
    }

    /// Every class `0..num_classes_total`, i.e. a plain softmax.
    pub fn full(num_classes_total: usize) -> Self {
        Self { classes: (0..num_classes_total).collect() }
    }

    fn push(&mut self, class: usize) -> bool {
        if self.classes.contains(&class) {
            false
        } else {
            self.classes.push(class);
            true
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Unit features and their true classes (unlabeled proposals excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct HepBatch {
    pub features: DenseMatrix,
    pub true_classes: Vec<usize>,
}

impl HepBatch {
    pub fn len(&self) -> usize {
        self.true_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_classes.is_empty()
    }
}

/// Class indices of the hardest labeled negatives of one subgroup:
/// unlabeled negatives are skipped, the rest sorted by similarity
/// (descending, ties in stored order) and the first `limit` kept.
pub fn hard_negative_classes(stats: &[(f64, IdentityLabel)], limit: usize) -> Vec<usize> {
    let mut labeled: Vec<(f64, usize)> =
        stats.iter().filter_map(|&(d, l)| l.class_index().map(|c| (d, c))).collect();
    labeled.sort_by(|a, b| b.0.total_cmp(&a.0));
    labeled.into_iter().take(limit).map(|(_, c)| c).collect()
}

/// Builds the selection pool (steps 1-3 above).
pub fn select_classes<R: Rng + ?Sized>(
    batch_true_classes: &[usize],
    negative_stats: &[Vec<(f64, IdentityLabel)>],
    cfg: &HepConfig,
    rng: &mut R,
) -> SelectionPool {
    let mut pool = SelectionPool::default();
    for &c in batch_true_classes {
        pool.push(c);
    }
    for stats in negative_stats {
        for c in hard_negative_classes(stats, cfg.hard_per_subgroup) {
            pool.push(c);
        }
    }
    if pool.len() < cfg.num_selected {
        let mut remainder: Vec<usize> = (0..cfg.num_classes_total).filter(|c| !pool.contains(*c)).collect();
        let need = (cfg.num_selected - pool.len()).min(remainder.len());
        let (drawn, _) = remainder.partial_shuffle(rng, need);
        for &c in drawn.iter() {
            pool.push(c);
        }
    }
    pool
}

fn check_batch(head: &ClassifierHead, batch: &HepBatch, pool: &SelectionPool) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.features.cols() != head.dim() || batch.features.rows() != batch.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", batch.len(), head.dim()),
            got: format!("{}x{}", batch.features.rows(), batch.features.cols()),
        });
    }
    if let Some(&c) = pool.classes().iter().find(|&&c| c >= head.num_classes()) {
        return Err(Error::ShapeMismatch {
            expected: format!("class < {}", head.num_classes()),
            got: format!("{c}"),
        });
    }
    batch
        .true_classes
        .iter()
        .map(|&c| pool.position(c).ok_or(Error::TrueClassNotSelected { class: c }))
        .collect()
}

/// Stable softmax over the pooled logits of one feature.
fn pooled_softmax(head: &ClassifierHead, pool: &SelectionPool, feature: &[f64]) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = pool.classes().iter().map(|&c| head.logit(c, feature)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    let log_probs = logits.iter().map(|z| z - lse).collect();
    (log_probs, lse)
}

/// Mean cross-entropy over the batch, with the softmax restricted to the pool.
pub fn hep_loss(head: &ClassifierHead, batch: &HepBatch, pool: &SelectionPool) -> Result<f64> {
    let targets = check_batch(head, batch, pool)?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let (log_probs, _) = pooled_softmax(head, pool, batch.features.row(i));
        total -= log_probs[t];
    }
    Ok(total / n)
}

/// Gradients of the classifier head; unselected rows stay exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl HeadGradients {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        Self { weights: DenseMatrix::zeros(head.num_classes(), head.dim()), bias: vec![0.0; head.num_classes()] }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut p = self.weights.as_slice().to_vec();
        p.extend_from_slice(&self.bias);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HepGradient {
    pub loss: f64,
    pub head: HeadGradients,
    /// `dL/d feature`, one row per batch proposal.
    pub features: DenseMatrix,
}

pub fn hep_gradient(head: &ClassifierHead, batch: &HepBatch, pool: &SelectionPool) -> Result<HepGradient> {
    let targets = check_batch(head, batch, pool)?;
    let n = batch.len() as f64;
    let mut out = HepGradient {
        loss: 0.0,
        head: HeadGradients::zeros_like(head),
        features: DenseMatrix::zeros(batch.len(), head.dim()),
    };
    for (i, &t) in targets.iter().enumerate() {
        let f = batch.features.row(i);
        let (log_probs, _) = pooled_softmax(head, pool, f);
        out.loss -= log_probs[t] / n;
        for (j, (&class, lp)) in pool.classes().iter().zip(&log_probs).enumerate() {
            let mut g = lp.exp();
            if j == t {
                g -= 1.0;
            }
            g /= n;
            axpy(g, f, out.head.weights.row_mut(class));
            out.head.bias[class] += g;
            axpy(g, head.weights.row(class), out.features.row_mut(i));
        }
    }
    Ok(out)
}

/// SGD step on the head with the shared schedule.
pub fn head_sgd_step(
    head: &mut ClassifierHead,
    grads: &HeadGradients,
    cfg: &SgdConfig,
    iteration: u64,
    velocity: Option<&mut HeadGradients>,
) -> f64 {
    let lr = cfg.learning_rate(iteration);
    let (vw, vb) = match velocity {
        Some(v) => (Some(v.weights.as_mut_slice()), Some(v.bias.as_mut_slice())),
        None => (None, None),
    };
    update_slice(head.weights.as_mut_slice(), grads.weights.as_slice(), vw, lr, cfg.momentum);
    update_slice(&mut head.bias, &grads.bias, vb, lr, cfg.momentum);
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, DEFAULT_EPS};
    use crate::linalg::l2_normalize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn fill_exhausts_class_set() {
        let cfg = HepConfig { num_selected: 5, hard_per_subgroup: 20, num_classes_total: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = select_classes(&[3, 7 % 5, 0], &[], &cfg, &mut rng);
        let mut classes = pool.classes().to_vec();
        assert_eq!(&classes[..3], &[3, 2, 0]);
        classes.sort();
        assert_eq!(classes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn top_twenty_of_twenty_five() {
        let cfg = HepConfig { num_selected: 30, hard_per_subgroup: 20, num_classes_total: 101 };
        let stats: Vec<(f64, IdentityLabel)> =
            (0..25).map(|i| (((i * 7) % 25) as f64 / 25.0, IdentityLabel::Id(i as u32 + 50))).collect();
        // sort oracle: the 20 largest distances
        let mut sorted = stats.clone();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let expected: Vec<usize> = sorted[..20].iter().map(|s| s.1.class_index().unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = select_classes(&[1], &[stats], &cfg, &mut rng);
        assert_eq!(&pool.classes()[1..21], expected.as_slice());
        assert_eq!(pool.len(), 30);
    }

    #[test]
    fn mandatory_set_is_never_truncated() {
        let cfg = HepConfig { num_selected: 10, hard_per_subgroup: 20, num_classes_total: 50 };
        let truth: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = select_classes(&truth, &[], &cfg, &mut rng);
        assert_eq!(pool.classes(), truth.as_slice());
    }

    #[test]
    fn unlabeled_negatives_are_skipped() {
        let stats = vec![
            (0.9, IdentityLabel::Unlabeled),
            (0.8, IdentityLabel::Background),
            (0.7, IdentityLabel::Id(4)),
            (0.7, IdentityLabel::Id(6)),
        ];
        assert_eq!(hard_negative_classes(&stats, 2), vec![0, 4]);
        assert_eq!(hard_negative_classes(&stats, 10), vec![0, 4, 6]);
    }

    #[test]
    fn uniform_logits_give_log_pool_size() {
        let head = ClassifierHead::zeros(150, 8);
        let pool = SelectionPool::from_classes(0..100);
        let batch = HepBatch { features: DenseMatrix::from_rows(&[vec![1.0; 8]], 8).unwrap(), true_classes: vec![42] };
        let loss = hep_loss(&head, &batch, &pool).unwrap();
        assert!((loss - 100f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_prediction() {
        let mut head = ClassifierHead::zeros(3, 2);
        head.bias[2] = 50.0;
        let pool = SelectionPool::full(3);
        let batch = HepBatch { features: DenseMatrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap(), true_classes: vec![2] };
        assert!(hep_loss(&head, &batch, &pool).unwrap() < 1e-20);
        let g = hep_gradient(&head, &batch, &pool).unwrap();
        assert!(g.head.flatten().iter().all(|x| x.abs() < 1e-20));
    }

    #[test]
    fn three_class_direct_evaluation() {
        // logits (1,2,3) via bias, true = third: log(1 + e^-1 + e^-2)
        let mut head = ClassifierHead::zeros(5, 2);
        head.bias[1] = 1.0;
        head.bias[3] = 2.0;
        head.bias[4] = 3.0;
        let pool = SelectionPool::from_classes([1, 3, 4]);
        let batch = HepBatch { features: DenseMatrix::from_rows(&[vec![0.0, 1.0]], 2).unwrap(), true_classes: vec![4] };
        let loss = hep_loss(&head, &batch, &pool).unwrap();
        assert!((loss - 0.407_605_964_444_380_4).abs() < 1e-15, "{loss}");
    }

    #[test]
    fn two_class_uniform_gradient_pattern() {
        let head = ClassifierHead::zeros(4, 2);
        let pool = SelectionPool::from_classes([1, 3]);
        let f = vec![0.6, 0.8];
        let batch = HepBatch { features: DenseMatrix::from_rows(std::slice::from_ref(&f), 2).unwrap(), true_classes: vec![3] };
        let g = hep_gradient(&head, &batch, &pool).unwrap();
        assert_eq!(g.head.bias, vec![0.0, 0.5, 0.0, -0.5]);
        assert_eq!(g.head.weights.row(1), &[0.3, 0.4]);
        assert_eq!(g.head.weights.row(3), &[-0.3, -0.4]);
        assert_eq!(g.head.weights.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn missing_true_class_is_a_protocol_violation() {
        let head = ClassifierHead::zeros(4, 2);
        let pool = SelectionPool::from_classes([1, 2]);
        let batch = HepBatch { features: DenseMatrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap(), true_classes: vec![3] };
        assert!(matches!(hep_loss(&head, &batch, &pool), Err(Error::TrueClassNotSelected { class: 3 })));
        assert!(matches!(hep_gradient(&head, &batch, &pool), Err(Error::TrueClassNotSelected { class: 3 })));
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (ClassifierHead, HepBatch, SelectionPool) {
        let classes = rng.random_range(3..12);
        let dim = 5;
        let head = ClassifierHead::new(classes, dim, 0.7, rng);
        let pool_size = rng.random_range(2..=classes);
        let mut all: Vec<usize> = (0..classes).collect();
        all.shuffle(rng);
        let pool = SelectionPool::from_classes(all[..pool_size].iter().copied());
        let n = rng.random_range(1..5);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, dim)).collect();
        let truth = (0..n).map(|_| pool.classes()[rng.random_range(0..pool_size)]).collect();
        (head, HepBatch { features: DenseMatrix::from_rows(&feats, dim).unwrap(), true_classes: truth }, pool)
    }

    #[test]
    fn matches_naive_softmax_over_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (head, batch, pool) = random_instance(&mut rng);
            let mut naive = 0.0;
            for i in 0..batch.len() {
                let f = batch.features.row(i);
                let denom: f64 = pool.classes().iter().map(|&c| head.logit(c, f).exp()).sum();
                naive -= (head.logit(batch.true_classes[i], f).exp() / denom).ln();
            }
            naive /= batch.len() as f64;
            assert!((hep_loss(&head, &batch, &pool).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_and_are_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let (head, batch, pool) = random_instance(&mut rng);
            let g = hep_gradient(&head, &batch, &pool).unwrap();
            let f_head = |p: &[f64]| {
                let mut h = head.clone();
                h.set_parameters(p).unwrap();
                hep_loss(&h, &batch, &pool).unwrap()
            };
            let r = gradient_check(f_head, &g.head.flatten(), &head.parameters(), DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error < 1e-6, "{r:?}");
            let f_feat = |x: &[f64]| {
                let mut b = batch.clone();
                b.features.as_mut_slice().copy_from_slice(x);
                hep_loss(&head, &b, &pool).unwrap()
            };
            let r = gradient_check(f_feat, g.features.as_slice(), batch.features.as_slice(), DEFAULT_EPS).unwrap();
            assert!(r.max_rel_error < 1e-6, "{r:?}");
            for c in 0..head.num_classes() {
                if !pool.contains(c) {
                    assert!(g.head.weights.row(c).iter().all(|&x| x == 0.0));
                    assert_eq!(g.head.bias[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn selection_is_deterministic_under_seed() {
        let cfg = HepConfig::default();
        let stats = vec![vec![(0.5, IdentityLabel::Id(7)), (0.9, IdentityLabel::Background)]];
        let a = select_classes(&[1, 2], &stats, &cfg, &mut ChaCha8Rng::seed_from_u64(77));
        let b = select_classes(&[1, 2], &stats, &cfg, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
    }

    fn arb_label(total: usize) -> impl Strategy<Value = IdentityLabel> {
        (0..total as u32 + 1).prop_map(|c| match c {
            0 => IdentityLabel::Background,
            1 => IdentityLabel::Unlabeled,
            c => IdentityLabel::Id(c - 1),
        })
    }

    fn arb_selection() -> impl Strategy<Value = (HepConfig, Vec<usize>, Vec<Vec<(f64, IdentityLabel)>>)> {
        (2usize..120).prop_flat_map(|total| {
            (
                1..=total,
                0usize..25,
                proptest::collection::vec(0..total, 1..10),
                proptest::collection::vec(proptest::collection::vec((-1.0f64..1.0, arb_label(total)), 0..40), 0..4),
            )
                .prop_map(move |(m, hard, truth, stats)| {
                    (HepConfig { num_selected: m, hard_per_subgroup: hard, num_classes_total: total }, truth, stats)
                })
        })
    }

    proptest! {
        #[test]
        fn pool_is_complete_distinct_and_sized((cfg, truth, stats) in arb_selection(), seed in any::<u64>()) {
            let pool = select_classes(&truth, &stats, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut mandatory: Vec<usize> = truth.clone();
            for s in &stats {
                mandatory.extend(hard_negative_classes(s, cfg.hard_per_subgroup));
            }
            mandatory.sort_unstable();
            mandatory.dedup();
            prop_assert!(mandatory.iter().all(|&c| pool.contains(c)));
            let mut sorted = pool.classes().to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), pool.len());
            prop_assert_eq!(pool.len(), mandatory.len().max(cfg.num_selected));
            prop_assert_eq!(&pool, &select_classes(&truth, &stats, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)));
        }

        #[test]
        fn loss_is_non_negative_and_gradient_sparse(seed in any::<u64>()) {
            let (head, batch, pool) = random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
            let g = hep_gradient(&head, &batch, &pool).unwrap();
            prop_assert!(g.loss >= 0.0);
            prop_assert!((g.loss - hep_loss(&head, &batch, &pool).unwrap()).abs() < 1e-12);
            for c in (0..head.num_classes()).filter(|&c| !pool.contains(c)) {
                prop_assert!(g.head.weights.row(c).iter().all(|&x| x == 0.0));
                prop_assert_eq!(g.head.bias[c], 0.0);
            }
        }
    }
}
