//! Synthetic stand-in for a pedestrian detector.
//!
//! Each identity has a latent prototype. A person proposal is
//!
//! ```text
//! x = A p_c + B z + sigma * e,    z ~ N(0, I), e ~ N(0, I)
//! ```
//!
//! where `A` is a fixed observation map, `B z` is a per-observation nuisance
//! (pose, lighting, crop) living in a fixed low-dimensional subspace, and
//! `sigma` is isotropic observation noise. Background proposals are drawn
//! around a fixed background center. Labels are emitted directly: there is
//! no box geometry, so no IOU-based assignment.
//!
//! Identities `1..=num_train_identities` are training classes; the test
//! identities follow and never appear in training scenes.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dictionary::IdentityLabel;
use crate::error::{Error, Result};
use crate::linalg::{axpy, norm, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_train_identities: usize,
    pub num_test_identities: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub observation_noise_sigma: f64,
    /// Inclusive range of proposals emitted per present person.
    pub proposals_per_identity_range: (usize, usize),
    pub backgrounds_generated_per_image: usize,
    pub backgrounds_stored_per_image: usize,
    pub unlabeled_identities_per_image: usize,
    pub identities_per_image: usize,
    pub prototype_scale: f64,
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub background_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_train_identities: 200,
            num_test_identities: 100,
            latent_dim: 16,
            input_dim: 64,
            observation_noise_sigma: 0.15,
            proposals_per_identity_range: (1, 2),
            backgrounds_generated_per_image: 32,
            backgrounds_stored_per_image: 5,
            unlabeled_identities_per_image: 1,
            identities_per_image: 4,
            prototype_scale: 1.0,
            nuisance_dim: 8,
            nuisance_scale: 1.0,
            background_scale: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_train_identities == 0 || self.num_test_identities == 0 {
            return bad("identity counts must be >= 1");
        }
        if !(self.observation_noise_sigma > 0.0) {
            return bad("observation_noise_sigma must be > 0");
        }
        if self.backgrounds_stored_per_image > self.backgrounds_generated_per_image {
            return bad("backgrounds_stored_per_image exceeds backgrounds_generated_per_image");
        }
        let (lo, hi) = self.proposals_per_identity_range;
        if lo == 0 || lo > hi {
            return bad("proposals_per_identity_range must satisfy 1 <= min <= max");
        }
        if self.identities_per_image == 0 {
            return bad("identities_per_image must be >= 1");
        }
        if self.num_train_identities < 2 * self.identities_per_image + self.unlabeled_identities_per_image {
            return bad("num_train_identities too small for identities_per_image");
        }
        if self.latent_dim == 0 || self.input_dim == 0 {
            return bad("latent_dim and input_dim must be >= 1");
        }
        if !(self.prototype_scale > 0.0) || self.nuisance_scale < 0.0 || !(self.background_scale > 0.0) {
            return bad("scales must be positive");
        }
        Ok(())
    }

    /// Proposals one image can emit at most; the dictionary's batch unit.
    pub fn nominal_proposals_per_image(&self) -> usize {
        let (_, hi) = self.proposals_per_identity_range;
        (self.identities_per_image + self.unlabeled_identities_per_image) * hi + self.backgrounds_generated_per_image
    }

    pub fn num_classes_total(&self) -> usize {
        self.num_train_identities + 1
    }
}

#[derive(Debug, Clone)]
pub struct IdentityWorld {
    config: WorldConfig,
    /// Row `c - 1` is the prototype of identity `c`.
    prototypes: DenseMatrix,
    /// `input_dim x latent_dim`.
    observation_map: DenseMatrix,
    /// `input_dim x nuisance_dim`, empty when `nuisance_dim == 0`.
    nuisance_map: Option<DenseMatrix>,
    background_center: Vec<f64>,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols, scale)).expect("sized")
}

/// `map * v` for a column-space map stored row-major.
fn apply_map(map: &DenseMatrix, v: &[f64]) -> Vec<f64> {
    map.row_iter().map(|r| crate::linalg::dot(r, v)).collect()
}

pub fn build_world(cfg: &WorldConfig) -> Result<IdentityWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_train_identities + cfg.num_test_identities;
    let observation_map =
        gaussian_matrix(&mut rng, cfg.input_dim, cfg.latent_dim, 1.0 / (cfg.latent_dim as f64).sqrt());
    let nuisance_map = (cfg.nuisance_dim > 0).then(|| {
        gaussian_matrix(&mut rng, cfg.input_dim, cfg.nuisance_dim, cfg.nuisance_scale / (cfg.nuisance_dim as f64).sqrt())
    });
    let background_center = gaussian_vec(&mut rng, cfg.input_dim, cfg.background_scale);

    // Redraw any prototype whose observation mean falls within 2 sigma of the
    // background center, or that duplicates an earlier prototype.
    let guard = 2.0 * cfg.observation_noise_sigma;
    let mut prototypes = DenseMatrix::zeros(0, cfg.latent_dim);
    while prototypes.rows() < n {
        let p = gaussian_vec(&mut rng, cfg.latent_dim, cfg.prototype_scale);
        let mut mean = apply_map(&observation_map, &p);
        axpy(-1.0, &background_center, &mut mean);
        let duplicate = prototypes.row_iter().any(|q| q == p.as_slice());
        if norm(&mean) > guard && !duplicate {
            prototypes.push_row(&p);
        }
    }
    Ok(IdentityWorld { config: cfg.clone(), prototypes, observation_map, nuisance_map, background_center })
}

impl IdentityWorld {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn train_ids(&self) -> std::ops::RangeInclusive<u32> {
        1..=self.config.num_train_identities as u32
    }

    pub fn test_ids(&self) -> std::ops::RangeInclusive<u32> {
        let start = self.config.num_train_identities as u32 + 1;
        start..=(self.config.num_train_identities + self.config.num_test_identities) as u32
    }

    pub fn prototype(&self, identity: u32) -> &[f64] {
        self.prototypes.row(identity as usize - 1)
    }

    pub fn background_center(&self) -> &[f64] {
        &self.background_center
    }

    /// Noise-free observation mean of an identity.
    pub fn observation_mean(&self, identity: u32) -> Vec<f64> {
        apply_map(&self.observation_map, self.prototype(identity))
    }

    /// One noisy observation of `identity`.
    pub fn observe<R: Rng + ?Sized>(&self, identity: u32, rng: &mut R) -> Vec<f64> {
        let mut x = self.observation_mean(identity);
        if let Some(map) = &self.nuisance_map {
            let z = gaussian_vec(rng, self.config.nuisance_dim, 1.0);
            axpy(1.0, &apply_map(map, &z), &mut x);
        }
        let noise = gaussian_vec(rng, self.config.input_dim, self.config.observation_noise_sigma);
        axpy(1.0, &noise, &mut x);
        x
    }

    pub fn background<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x = gaussian_vec(rng, self.config.input_dim, self.config.background_scale);
        axpy(1.0, &self.background_center, &mut x);
        x
    }

    fn draw_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.config.proposals_per_identity_range;
        rng.random_range(lo..=hi)
    }

    fn image<R: Rng + ?Sized>(&self, identities: &[u32], rng: &mut R) -> Vec<Proposal> {
        let cfg = &self.config;
        let mut props = Vec::new();
        for &c in identities {
            for _ in 0..self.draw_count(rng) {
                props.push(Proposal { input: self.observe(c, rng), label: IdentityLabel::Id(c), store: true });
            }
        }
        let absent: Vec<u32> = self.train_ids().filter(|c| !identities.contains(c)).collect();
        for i in index::sample(rng, absent.len(), cfg.unlabeled_identities_per_image).into_vec() {
            for _ in 0..self.draw_count(rng) {
                props.push(Proposal { input: self.observe(absent[i], rng), label: IdentityLabel::Unlabeled, store: true });
            }
        }
        let stored = index::sample(rng, cfg.backgrounds_generated_per_image, cfg.backgrounds_stored_per_image).into_vec();
        for b in 0..cfg.backgrounds_generated_per_image {
            props.push(Proposal { input: self.background(rng), label: IdentityLabel::Background, store: stored.contains(&b) });
        }
        props
    }
}

/// One simulated detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub input: Vec<f64>,
    pub label: IdentityLabel,
    /// Whether the proposal goes into the feature dictionary. Always true
    /// for persons; true for a fixed number of backgrounds per image.
    pub store: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub proposals_img1: Vec<Proposal>,
    pub proposals_img2: Vec<Proposal>,
    pub shared_identities: Vec<u32>,
}

/// Two images of training identities with at least one identity in common.
///
/// Image 1 holds `identities_per_image` identities; between one and half of
/// them also appear in image 2, which is topped up with identities absent
/// from image 1.
pub fn sample_scene_pair<R: Rng + ?Sized>(world: &IdentityWorld, rng: &mut R) -> ScenePair {
    let cfg = &world.config;
    let k = cfg.identities_per_image;
    let train = cfg.num_train_identities;
    let ids1: Vec<u32> = index::sample(rng, train, k).into_iter().map(|i| i as u32 + 1).collect();
    let n_shared = rng.random_range(1..=(k / 2).max(1));
    let mut ids2: Vec<u32> = ids1[..n_shared].to_vec();
    let others: Vec<u32> = world.train_ids().filter(|c| !ids1.contains(c)).collect();
    for i in index::sample(rng, others.len(), k - n_shared) {
        ids2.push(others[i]);
    }
    let proposals_img1 = world.image(&ids1, rng);
    let proposals_img2 = world.image(&ids2, rng);
    ScenePair { proposals_img1, proposals_img2, shared_identities: ids1[..n_shared].to_vec() }
}

/// Probe observations and a shared gallery of test identities.
///
/// The gallery lists its distractors first (observations of non-probe test
/// identities) and then exactly one fresh observation per probe identity.
/// Ties in ranking therefore never favor the true match.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub queries: DenseMatrix,
    pub query_ids: Vec<u32>,
    pub distractors: DenseMatrix,
    pub distractor_ids: Vec<u32>,
    pub matches: DenseMatrix,
}

impl EvalSplit {
    pub fn max_gallery_size(&self) -> usize {
        self.distractors.rows() + self.matches.rows()
    }

    /// Gallery of `size` items: the first `size - probes` distractors, then
    /// the probe matches. Smaller galleries are subsets of larger ones.
    pub fn gallery(&self, size: usize) -> Result<(DenseMatrix, Vec<u32>)> {
        let probes = self.query_ids.len();
        if size < probes.max(1) || size > self.max_gallery_size() {
            return Err(Error::GallerySizeTooSmall { gallery_size: size, probes });
        }
        let nd = size - probes;
        let mut g = DenseMatrix::zeros(0, self.queries.cols());
        let mut ids = Vec::with_capacity(size);
        for i in 0..nd {
            g.push_row(self.distractors.row(i));
            ids.push(self.distractor_ids[i]);
        }
        for (i, &q) in self.query_ids.iter().enumerate() {
            g.push_row(self.matches.row(i));
            ids.push(q);
        }
        Ok((g, ids))
    }
}

/// Samples `num_probes` test identities and enough distractors for a
/// gallery of `gallery_size`.
pub fn build_eval_split<R: Rng + ?Sized>(
    world: &IdentityWorld,
    gallery_size: usize,
    num_probes: usize,
    rng: &mut R,
) -> Result<EvalSplit> {
    if gallery_size < 1 || gallery_size < num_probes {
        return Err(Error::GallerySizeTooSmall { gallery_size, probes: num_probes });
    }
    let mut test: Vec<u32> = world.test_ids().collect();
    if num_probes == 0 || num_probes > test.len() {
        return Err(Error::InvalidConfig(format!("num_probes must be in [1, {}]", test.len())));
    }
    test.shuffle(rng);
    let (probes, rest) = test.split_at(num_probes);
    let n_distractors = gallery_size - num_probes;
    if n_distractors > 0 && rest.is_empty() {
        return Err(Error::InvalidConfig("no non-probe test identities left for distractors".into()));
    }
    let dim = world.config.input_dim;
    let mut queries = DenseMatrix::zeros(0, dim);
    let mut matches = DenseMatrix::zeros(0, dim);
    for &c in probes {
        queries.push_row(&world.observe(c, rng));
        matches.push_row(&world.observe(c, rng));
    }
    let mut distractors = DenseMatrix::zeros(0, dim);
    let mut distractor_ids = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let c = rest[rng.random_range(0..rest.len())];
        distractors.push_row(&world.observe(c, rng));
        distractor_ids.push(c);
    }
    Ok(EvalSplit { queries, query_ids: probes.to_vec(), distractors, distractor_ids, matches })
}
