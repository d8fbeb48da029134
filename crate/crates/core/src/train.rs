//! Run configuration and the Siamese training loop.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{FeatureDictionary, IdentityLabel};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, EvalReport};
use crate::hep::{head_sgd_step, hep_gradient, select_classes, ClassifierHead, HeadGradients, HepBatch, HepConfig, SelectionPool};
use crate::linalg::{axpy, DenseMatrix};
use crate::network::{Activation, EmbeddingConfig, EmbeddingNetwork, ParameterGradients};
use crate::olp::{form_subgroups, olp_gradient, LabeledFeatures, DEFAULT_MAX_PAIRS_PER_IDENTITY};
use crate::sgd::{sgd_step, SgdConfig};
use crate::sim::{build_eval_split, build_world, sample_scene_pair, EvalSplit, IdentityWorld, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    OlpOnly,
    OlpSoftmax,
    OlpHep,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::OlpOnly, LossMode::OlpSoftmax, LossMode::OlpHep];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::OlpOnly => "olp_only",
            LossMode::OlpSoftmax => "olp_softmax",
            LossMode::OlpHep => "olp_hep",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flat run configuration; every field has a default and unknown keys are
/// rejected. `seed` has no default and must come from the file or the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // world
    pub num_train_identities: usize,
    pub num_test_identities: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub observation_noise_sigma: f64,
    pub proposals_per_identity_range: (usize, usize),
    pub backgrounds_generated_per_image: usize,
    pub backgrounds_stored_per_image: usize,
    pub unlabeled_identities_per_image: usize,
    pub identities_per_image: usize,
    pub prototype_scale: f64,
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub background_scale: f64,
    // network
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub init_gain: f64,
    // optimizer
    pub base_lr: f64,
    pub drop_lr: f64,
    pub drop_fraction: f64,
    pub momentum: f64,
    pub total_iterations: u64,
    // losses
    pub loss_mode: LossMode,
    pub num_selected: usize,
    pub hard_per_subgroup: usize,
    pub head_init_std: f64,
    pub dictionary_capacity_multiplier: usize,
    pub max_pairs_per_identity: usize,
    // evaluation
    pub eval_every: u64,
    pub eval_probes: usize,
    pub gallery_size: usize,
    pub gallery_sizes: Vec<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let e = EmbeddingConfig::default();
        let s = SgdConfig::default();
        let h = HepConfig::default();
        Self {
            num_train_identities: w.num_train_identities,
            num_test_identities: w.num_test_identities,
            latent_dim: w.latent_dim,
            input_dim: w.input_dim,
            observation_noise_sigma: w.observation_noise_sigma,
            proposals_per_identity_range: w.proposals_per_identity_range,
            backgrounds_generated_per_image: w.backgrounds_generated_per_image,
            backgrounds_stored_per_image: w.backgrounds_stored_per_image,
            unlabeled_identities_per_image: w.unlabeled_identities_per_image,
            identities_per_image: w.identities_per_image,
            prototype_scale: w.prototype_scale,
            nuisance_dim: w.nuisance_dim,
            nuisance_scale: w.nuisance_scale,
            background_scale: w.background_scale,
            hidden_dims: e.hidden_dims,
            embed_dim: e.embed_dim,
            init_gain: e.init_gain,
            base_lr: s.base_lr,
            drop_lr: s.drop_lr,
            drop_fraction: s.drop_fraction,
            momentum: s.momentum,
            total_iterations: s.total_iterations,
            loss_mode: LossMode::OlpHep,
            num_selected: h.num_selected,
            hard_per_subgroup: h.hard_per_subgroup,
            head_init_std: DEFAULT_HEAD_INIT_STD,
            dictionary_capacity_multiplier: 40,
            max_pairs_per_identity: DEFAULT_MAX_PAIRS_PER_IDENTITY,
            eval_every: 0,
            eval_probes: 50,
            gallery_size: 100,
            gallery_sizes: vec![50, 100, 200, 400, 800],
            seed: None,
            output_dir: None,
        }
    }
}

pub const DEFAULT_HEAD_INIT_STD: f64 = 0.01;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            num_train_identities: self.num_train_identities,
            num_test_identities: self.num_test_identities,
            latent_dim: self.latent_dim,
            input_dim: self.input_dim,
            observation_noise_sigma: self.observation_noise_sigma,
            proposals_per_identity_range: self.proposals_per_identity_range,
            backgrounds_generated_per_image: self.backgrounds_generated_per_image,
            backgrounds_stored_per_image: self.backgrounds_stored_per_image,
            unlabeled_identities_per_image: self.unlabeled_identities_per_image,
            identities_per_image: self.identities_per_image,
            prototype_scale: self.prototype_scale,
            nuisance_dim: self.nuisance_dim,
            nuisance_scale: self.nuisance_scale,
            background_scale: self.background_scale,
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            activation: Activation::Relu,
            init_gain: self.init_gain,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            drop_lr: self.drop_lr,
            drop_fraction: self.drop_fraction,
            momentum: self.momentum,
            total_iterations: self.total_iterations,
        }
    }

    pub fn hep_config(&self) -> HepConfig {
        HepConfig {
            num_selected: self.num_selected,
            hard_per_subgroup: self.hard_per_subgroup,
            num_classes_total: self.num_train_identities + 1,
        }
    }

    pub fn dictionary_capacity(&self) -> usize {
        self.dictionary_capacity_multiplier * self.world_config().nominal_proposals_per_image()
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::InvalidConfig("seed: required".into()))
    }

    /// Checks every field and reports all failures, each prefixed by its
    /// field path.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                let msg = match e {
                    Error::InvalidConfig(m) => m,
                    other => other.to_string(),
                };
                problems.push(format!("{field}: {msg}"));
            }
        };
        check("world", self.world_config().validate());
        check("network", self.embedding_config().validate());
        check("optimizer", self.sgd_config().validate());
        check("hep", self.hep_config().validate());
        let mut require = |ok: bool, field: &str, msg: &str| {
            if !ok {
                problems.push(format!("{field}: {msg}"));
            }
        };
        require(self.seed.is_some(), "seed", "required");
        require(self.dictionary_capacity_multiplier >= 1, "dictionary_capacity_multiplier", "must be >= 1");
        require(self.max_pairs_per_identity >= 1, "max_pairs_per_identity", "must be >= 1");
        require(self.head_init_std >= 0.0 && self.head_init_std.is_finite(), "head_init_std", "must be finite and >= 0");
        require(
            self.eval_probes >= 1 && self.eval_probes <= self.num_test_identities,
            "eval_probes",
            "must be in [1, num_test_identities]",
        );
        require(self.gallery_size >= self.eval_probes.max(1), "gallery_size", "must be >= eval_probes");
        require(
            self.gallery_sizes.windows(2).all(|w| w[0] < w[1]),
            "gallery_sizes",
            "must be strictly ascending",
        );
        require(
            self.gallery_sizes.first().is_none_or(|&s| s >= self.eval_probes),
            "gallery_sizes",
            "smallest size must be >= eval_probes",
        );
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Independent random streams derived from the run seed, so that changing
/// how one stage consumes randomness leaves the others untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Scenes = 2,
    Selection = 3,
    Eval = 4,
    Sweep = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub lr: f64,
    pub olp_loss: f64,
    pub hep_loss: f64,
    pub total_loss: f64,
    pub dict_size: usize,
    pub pool_size: usize,
    pub subgroup_count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub world: IdentityWorld,
    pub net: EmbeddingNetwork,
    pub head: ClassifierHead,
    pub dictionary: FeatureDictionary,
    /// Iteration the next call to [`train_iteration`] will run.
    pub iteration: u64,
    pub eval_split: EvalSplit,
    sgd: SgdConfig,
    hep: HepConfig,
    net_velocity: Option<ParameterGradients>,
    head_velocity: Option<HeadGradients>,
    scene_rng: ChaCha8Rng,
    selection_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed()?;
        let world = build_world(&config.world_config())?;
        let mut init_rng = stream_rng(seed, Stream::Init);
        let net = EmbeddingNetwork::new(config.embedding_config(), &mut init_rng)?;
        let hep = config.hep_config();
        let head = ClassifierHead::new(hep.num_classes_total, config.embed_dim, config.head_init_std, &mut init_rng);
        Self::from_parts(config, world, net, head, 0)
    }

    /// State around existing parameters, starting at `iteration`. The
    /// dictionary starts empty and the scene stream is re-derived from the
    /// start iteration.
    pub fn from_parts(
        config: RunConfig,
        world: IdentityWorld,
        net: EmbeddingNetwork,
        head: ClassifierHead,
        iteration: u64,
    ) -> Result<Self> {
        config.validate()?;
        let seed = config.seed()?;
        let sgd = config.sgd_config();
        let hep = config.hep_config();
        let dictionary = FeatureDictionary::new(config.dictionary_capacity())?;
        let eval_split =
            build_eval_split(&world, config.gallery_size, config.eval_probes, &mut stream_rng(seed, Stream::Eval))?;
        let mut scene_rng = stream_rng(seed, Stream::Scenes);
        let mut selection_rng = stream_rng(seed, Stream::Selection);
        if iteration > 0 {
            scene_rng = stream_rng(seed ^ iteration.rotate_left(32), Stream::Scenes);
            selection_rng = stream_rng(seed ^ iteration.rotate_left(32), Stream::Selection);
        }
        let momentum = sgd.momentum != 0.0;
        Ok(Self {
            net_velocity: momentum.then(|| ParameterGradients::zeros_like(&net)),
            head_velocity: momentum.then(|| HeadGradients::zeros_like(&head)),
            config,
            world,
            net,
            head,
            dictionary,
            iteration,
            eval_split,
            sgd,
            hep,
            scene_rng,
            selection_rng,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.sgd.total_iterations
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_split(&self.net, &self.eval_split, self.config.gallery_size)
    }
}

fn check_finite(value: f64, iteration: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { iteration, what: format!("{what} = {value}") })
    }
}

/// One Siamese step on a fresh scene pair: shared forward, OLP against the
/// current dictionary, HEP over the labeled proposals, joint backward, SGD,
/// then dictionary insertion.
pub fn train_iteration(state: &mut TrainState) -> Result<MetricsRow> {
    let it = state.iteration;
    let mode = state.config.loss_mode;
    let pair = sample_scene_pair(&state.world, &mut state.scene_rng);
    let proposals: Vec<_> = pair.proposals_img1.iter().chain(&pair.proposals_img2).collect();
    let n1 = pair.proposals_img1.len();
    let rows: Vec<&[f64]> = proposals.iter().map(|p| p.input.as_slice()).collect();
    let inputs = DenseMatrix::from_rows(&rows, state.config.input_dim)?;
    let labels: Vec<IdentityLabel> = proposals.iter().map(|p| p.label).collect();

    // both images go through the one network in a single pass
    let (_, features) = state.net.forward(&inputs).map_err(|e| match e {
        Error::ZeroVector { norm } => Error::NonFinite { iteration: it, what: format!("embedding norm = {norm}") },
        other => other,
    })?;
    let f1 = features.select_rows(&(0..n1).collect::<Vec<_>>());
    let f2 = features.select_rows(&(n1..proposals.len()).collect::<Vec<_>>());
    let batch = form_subgroups(
        LabeledFeatures { features: &f1, labels: &labels[..n1] },
        LabeledFeatures { features: &f2, labels: &labels[n1..] },
        &state.dictionary,
        state.config.max_pairs_per_identity,
    );

    let mut grad = DenseMatrix::zeros(features.rows(), features.cols());
    let mut olp_loss = 0.0;
    let mut pair_stats = Vec::new();
    if !batch.is_empty() {
        let g = olp_gradient(&batch)?;
        check_finite(g.loss, it, "olp_loss")?;
        for (sg, ag) in batch.subgroups.iter().zip(&g.anchor_grads) {
            let src = sg.anchor_source.expect("subgroups from images carry their source");
            let row = if src.image == 0 { src.row } else { n1 + src.row };
            axpy(1.0, ag, grad.row_mut(row));
        }
        olp_loss = g.loss;
        pair_stats = g.pair_stats;
    }

    let mut hep_loss = 0.0;
    let mut pool_size = 0;
    let mut head_grads = None;
    if mode != LossMode::OlpOnly {
        let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].class_index().is_some()).collect();
        let true_classes: Vec<usize> = labeled.iter().map(|&i| labels[i].class_index().expect("labeled")).collect();
        let pool = match mode {
            LossMode::OlpSoftmax => SelectionPool::full(state.hep.num_classes_total),
            _ => select_classes(&true_classes, &pair_stats, &state.hep, &mut state.selection_rng),
        };
        let hep_batch = HepBatch { features: features.select_rows(&labeled), true_classes };
        let g = hep_gradient(&state.head, &hep_batch, &pool)?;
        check_finite(g.loss, it, "hep_loss")?;
        for (k, &row) in labeled.iter().enumerate() {
            axpy(1.0, g.features.row(k), grad.row_mut(row));
        }
        hep_loss = g.loss;
        pool_size = pool.len();
        head_grads = Some(g.head);
    }

    let net_grads = state.net.backward(&grad)?;
    let lr = sgd_step(&mut state.net, &net_grads, &state.sgd, it, state.net_velocity.as_mut());
    if let Some(hg) = &head_grads {
        head_sgd_step(&mut state.head, hg, &state.sgd, it, state.head_velocity.as_mut());
    }
    if !state.net.is_finite() {
        return Err(Error::NonFinite { iteration: it, what: "network parameters".into() });
    }
    if !state.head.is_finite() {
        return Err(Error::NonFinite { iteration: it, what: "classifier head".into() });
    }

    // features computed before this step's update go into the dictionary
    for (i, p) in proposals.iter().enumerate() {
        if p.store {
            state.dictionary.insert(features.row(i), p.label)?;
        }
    }

    state.iteration += 1;
    Ok(MetricsRow {
        iteration: it,
        lr,
        olp_loss,
        hep_loss,
        total_loss: olp_loss + hep_loss,
        dict_size: state.dictionary.len(),
        pool_size,
        subgroup_count: batch.m(),
    })
}
