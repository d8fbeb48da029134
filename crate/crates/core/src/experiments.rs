//! Command drivers: training runs, evaluation, the three studies and the
//! gradient-check harness. Each writes CSV files into an output directory.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_head, load_network, save_head, save_network};
use crate::dictionary::{IdentityLabel, NegativeSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, gallery_sweep, write_eval_csv, EvalReport, EVAL_HEADER};
use crate::gradcheck::{gradient_check, GradCheckReport, DEFAULT_EPS, KINKED_EPS};
use crate::hep::{hep_gradient, hep_loss, ClassifierHead, HepBatch, SelectionPool};
use crate::linalg::{dot, l2_normalize, l2_normalize_backward, DenseMatrix};
use crate::network::{EmbeddingConfig, EmbeddingNetwork};
use crate::olp::{olp_gradient, subgroup_loss, OlpBatch, Subgroup};
use crate::sim::{build_world, IdentityWorld};
use crate::train::{stream_rng, train_iteration, LossMode, RunConfig, Stream, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HEAD_FILE: &str = "head.bin";
pub const STATE_FILE: &str = "state.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_HISTORY_FILE: &str = "eval_history.csv";

/// Relative-error threshold for the gradient suites.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Dictionary multipliers for the dictionary-size study.
pub const DICT_MULTIPLIERS: [usize; 3] = [20, 40, 80];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResumeState {
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub iterations: u64,
}

fn history_record(iteration: u64, report: &EvalReport) -> Vec<String> {
    let mut rec = vec![iteration.to_string()];
    rec.extend(report.record());
    rec
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Trains from scratch (or resumes from the checkpoint in `out`) and writes
/// metrics, evaluation history, final evaluation and checkpoint files.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_dir(out)?;
    let mut state = if resume {
        let saved: ResumeState = serde_json::from_str(&fs::read_to_string(out.join(STATE_FILE))?)?;
        let world = build_world(&cfg.world_config())?;
        let net = load_network(&out.join(CHECKPOINT_FILE), &cfg.embedding_config())?;
        let head = load_head(&out.join(HEAD_FILE))?;
        TrainState::from_parts(cfg.clone(), world, net, head, saved.iteration)?
    } else {
        TrainState::new(cfg.clone())?
    };

    let open = |name: &str| -> Result<(File, bool)> {
        let path = out.join(name);
        if resume && path.exists() {
            Ok((OpenOptions::new().append(true).open(path)?, false))
        } else {
            Ok((File::create(path)?, true))
        }
    };
    let (metrics_file, metrics_header) = open(METRICS_FILE)?;
    let mut metrics = csv::WriterBuilder::new().has_headers(metrics_header).from_writer(metrics_file);
    let (history_file, history_header) = open(EVAL_HISTORY_FILE)?;
    let mut history = csv::Writer::from_writer(history_file);
    if history_header {
        history.write_record(std::iter::once("iteration").chain(EVAL_HEADER))?;
    }

    let initial_eval = state.evaluate()?;
    history.write_record(history_record(state.iteration, &initial_eval))?;
    let start = state.iteration;
    while !state.is_done() {
        let row = train_iteration(&mut state)?;
        metrics.serialize(&row)?;
        if cfg.eval_every > 0 && state.iteration % cfg.eval_every == 0 && !state.is_done() {
            history.write_record(history_record(state.iteration, &state.evaluate()?))?;
        }
    }
    metrics.flush()?;
    let final_eval = state.evaluate()?;
    history.write_record(history_record(state.iteration, &final_eval))?;
    history.flush()?;

    save_network(&state.net, &out.join(CHECKPOINT_FILE))?;
    save_head(&state.head, &out.join(HEAD_FILE))?;
    fs::write(out.join(STATE_FILE), serde_json::to_string(&ResumeState { iteration: state.iteration })?)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    write_eval_csv(std::slice::from_ref(&final_eval), File::create(out.join(EVAL_FILE))?)?;
    Ok(TrainOutcome { initial_eval, final_eval, iterations: state.iteration - start })
}

fn load_trained(cfg: &RunConfig, checkpoint: &Path) -> Result<(IdentityWorld, EmbeddingNetwork)> {
    let world = build_world(&cfg.world_config())?;
    let net = load_network(checkpoint, &cfg.embedding_config())?;
    Ok((world, net))
}

/// Evaluates a saved network on the run's held-out split.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    prepare_dir(out)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let (world, net) = load_trained(cfg, &path)?;
    let split = crate::sim::build_eval_split(
        &world,
        cfg.gallery_size,
        cfg.eval_probes,
        &mut stream_rng(cfg.seed()?, Stream::Eval),
    )?;
    let report = evaluate_split(&net, &split, cfg.gallery_size)?;
    write_eval_csv(std::slice::from_ref(&report), File::create(out.join(EVAL_FILE))?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub loss_mode: LossMode,
    pub dictionary_capacity_multiplier: usize,
    pub dictionary_capacity: usize,
    pub report: EvalReport,
}

fn write_study(rows: &[StudyRow], path: PathBuf) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["loss_mode", "dictionary_capacity_multiplier", "dictionary_capacity"].into_iter().chain(EVAL_HEADER))?;
    for r in rows {
        let mut rec =
            vec![r.loss_mode.to_string(), r.dictionary_capacity_multiplier.to_string(), r.dictionary_capacity.to_string()];
        rec.extend(r.report.record());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn study_cell(cfg: &RunConfig, out: &Path, mode: LossMode, multiplier: usize) -> Result<StudyRow> {
    let cell = RunConfig { loss_mode: mode, dictionary_capacity_multiplier: multiplier, ..cfg.clone() };
    let dir = out.join(format!("{mode}_x{multiplier}"));
    let outcome = cmd_train(&cell, &dir, false)?;
    Ok(StudyRow {
        loss_mode: mode,
        dictionary_capacity_multiplier: multiplier,
        dictionary_capacity: cell.dictionary_capacity(),
        report: outcome.final_eval,
    })
}

/// Trains every loss mode with the same seed; writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<StudyRow>> {
    cfg.validate()?;
    prepare_dir(out)?;
    let rows = LossMode::ALL
        .iter()
        .map(|&m| study_cell(cfg, out, m, cfg.dictionary_capacity_multiplier))
        .collect::<Result<Vec<_>>>()?;
    write_study(&rows, out.join("ablation.csv"))?;
    Ok(rows)
}

/// Trains `olp_only` and `olp_hep` at each dictionary multiplier; writes
/// `dictsweep.csv`.
pub fn cmd_dictsweep(cfg: &RunConfig, out: &Path, multipliers: &[usize]) -> Result<Vec<StudyRow>> {
    cfg.validate()?;
    prepare_dir(out)?;
    let mut rows = Vec::new();
    for &m in multipliers {
        for mode in [LossMode::OlpOnly, LossMode::OlpHep] {
            rows.push(study_cell(cfg, out, mode, m)?);
        }
    }
    write_study(&rows, out.join("dictsweep.csv"))?;
    Ok(rows)
}

/// Nested-gallery evaluation over `cfg.gallery_sizes`; trains first unless a
/// checkpoint is given. Writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    prepare_dir(out)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out.join("train");
            cmd_train(cfg, &dir, false)?;
            dir.join(CHECKPOINT_FILE)
        }
    };
    let (world, net) = load_trained(cfg, &path)?;
    let mut rng = stream_rng(cfg.seed()?, Stream::Sweep);
    let reports = gallery_sweep(&net, &world, &cfg.gallery_sizes, cfg.eval_probes, &mut rng)?;
    write_eval_csv(&reports, File::create(out.join("sweep.csv"))?)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
    pub passed: bool,
}

impl SuiteResult {
    fn new(suite: &str, r: GradCheckReport) -> Self {
        Self {
            suite: suite.into(),
            max_rel_error: r.max_rel_error,
            worst_coordinate: r.worst_coordinate,
            coordinates: r.coordinates,
            passed: r.passes(GRADCHECK_TOLERANCE),
        }
    }
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// OLP anchor gradients on `count` random subgroups, cycling `k` through
/// `ks`.
pub fn olp_suite<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize, ks: &[usize]) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::default();
    for i in 0..count {
        let k = ks[i % ks.len()];
        let negs: Vec<Vec<f64>> = (0..k).map(|_| random_unit(rng, dim)).collect();
        let labels = (0..k).map(|j| IdentityLabel::Id(j as u32 + 2)).collect();
        let sg = Subgroup {
            anchor: random_unit(rng, dim),
            positive: random_unit(rng, dim),
            negatives: std::sync::Arc::new(NegativeSet { features: DenseMatrix::from_rows(&negs, dim)?, labels }),
            anchor_identity: 1,
            anchor_source: None,
        };
        let g = olp_gradient(&OlpBatch { subgroups: vec![sg.clone()] })?;
        let f = |a: &[f64]| subgroup_loss(a, &sg.positive, &sg.negatives.features);
        total = total.merge(gradient_check(f, &g.anchor_grads[0], &sg.anchor, DEFAULT_EPS)?);
    }
    Ok(total)
}

/// HEP head and feature gradients on random instances with at most
/// `max_classes` classes and pools of at most `max_pool`.
pub fn hep_suite<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    max_classes: usize,
    max_pool: usize,
) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::default();
    let dim = 16;
    for _ in 0..count {
        let classes = rng.random_range(2..=max_classes);
        let head = ClassifierHead::new(classes, dim, 0.5, rng);
        let pool_size = rng.random_range(1..=classes.min(max_pool));
        let mut all: Vec<usize> = (0..classes).collect();
        all.shuffle(rng);
        let pool = SelectionPool::from_classes(all[..pool_size].iter().copied());
        let n = rng.random_range(1..=8);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, dim)).collect();
        let truth = (0..n).map(|_| pool.classes()[rng.random_range(0..pool_size)]).collect();
        let batch = HepBatch { features: DenseMatrix::from_rows(&feats, dim)?, true_classes: truth };
        let g = hep_gradient(&head, &batch, &pool)?;
        let f_head = |p: &[f64]| {
            let mut h = head.clone();
            h.set_parameters(p).expect("sized");
            hep_loss(&h, &batch, &pool).expect("valid")
        };
        total = total.merge(gradient_check(f_head, &g.head.flatten(), &head.parameters(), DEFAULT_EPS)?);
        let f_feat = |x: &[f64]| {
            let mut b = batch.clone();
            b.features.as_mut_slice().copy_from_slice(x);
            hep_loss(&head, &b, &pool).expect("valid")
        };
        total = total.merge(gradient_check(f_feat, g.features.as_slice(), batch.features.as_slice(), DEFAULT_EPS)?);
    }
    Ok(total)
}

/// L2-normalization backward pass against a random linear read-out.
pub fn normalization_suite<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::default();
    for _ in 0..count {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = l2_normalize_backward(&v, &c)?;
        let f = |x: &[f64]| dot(&l2_normalize(x).expect("nonzero"), &c);
        total = total.merge(gradient_check(f, &analytic, &v, DEFAULT_EPS)?);
    }
    Ok(total)
}

/// Full network parameter gradients through the normalization.
pub fn network_suite<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Result<GradCheckReport> {
    let cfg = EmbeddingConfig { input_dim: 6, hidden_dims: vec![8, 5], embed_dim: 4, init_gain: 1.0, ..Default::default() };
    let mut total = GradCheckReport::default();
    for _ in 0..count {
        let mut net = EmbeddingNetwork::new(cfg.clone(), rng)?;
        for layer in net.layers_mut() {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        let rand_matrix = |rng: &mut R, r: usize, c: usize| {
            DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let x = rand_matrix(rng, 4, 6)?;
        let c = rand_matrix(rng, 4, 4)?;
        if net.embed(&x).is_err() {
            continue;
        }
        net.forward(&x)?;
        let analytic = net.backward(&c)?.flatten();
        let probe = net.clone();
        let f = |p: &[f64]| {
            let mut n = probe.clone();
            n.set_parameters(p).expect("sized");
            let e = n.embed(&x).expect("nonzero");
            dot(e.as_slice(), c.as_slice())
        };
        total = total.merge(gradient_check(f, &analytic, &net.parameters(), KINKED_EPS)?);
    }
    Ok(total)
}

/// Runs every gradient suite; writes `gradcheck.csv`.
pub fn cmd_gradcheck(seed: u64, out: &Path) -> Result<Vec<SuiteResult>> {
    prepare_dir(out)?;
    let mut rng: ChaCha8Rng = stream_rng(seed, Stream::Init);
    let results = vec![
        SuiteResult::new("olp", olp_suite(&mut rng, 100, 32, &[1, 4, 16, 64])?),
        SuiteResult::new("hep", hep_suite(&mut rng, 50, 50, 20)?),
        SuiteResult::new("normalization", normalization_suite(&mut rng, 50, 32)?),
        SuiteResult::new("network", network_suite(&mut rng, 10)?),
    ];
    let mut w = csv::Writer::from_path(out.join("gradcheck.csv"))?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(results)
}

/// Exit status for a failed command: 1 for validation problems, 2 for
/// numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. }
        | Error::NonFiniteFunction { .. }
        | Error::ZeroVector { .. }
        | Error::UnnormalizedFeature { .. }
        | Error::UnnormalizedInput { .. } => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> RunConfig {
        RunConfig {
            num_train_identities: 30,
            num_test_identities: 20,
            eval_probes: 10,
            gallery_size: 20,
            gallery_sizes: vec![10, 20, 40],
            total_iterations: 30,
            eval_every: 10,
            num_selected: 15,
            seed: Some(seed),
            ..Default::default()
        }
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_train(&tiny(1), dir.path(), false).unwrap();
        assert_eq!(out.iterations, 30);
        let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,lr,olp_loss,hep_loss,total_loss,dict_size,pool_size,subgroup_count"
        );
        assert_eq!(lines.count(), 30);
        let history = fs::read_to_string(dir.path().join(EVAL_HISTORY_FILE)).unwrap();
        // iterations 0, 10, 20 and the final 30
        assert_eq!(history.lines().count(), 5);
        assert!(history.starts_with("iteration,gallery_size,num_queries,top1,top5,top10,map\n"));
        for f in [CHECKPOINT_FILE, HEAD_FILE, STATE_FILE, EVAL_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn resume_continues_numbering() {
        let dir = tempfile::tempdir().unwrap();
        cmd_train(&RunConfig { total_iterations: 10, ..tiny(2) }, dir.path(), false).unwrap();
        let out = cmd_train(&RunConfig { total_iterations: 25, ..tiny(2) }, dir.path(), true).unwrap();
        assert_eq!(out.iterations, 15);
        let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let iters: Vec<u64> =
            metrics.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(iters, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn eval_reproduces_final_training_eval() {
        let dir = tempfile::tempdir().unwrap();
        let trained = cmd_train(&tiny(3), dir.path(), false).unwrap();
        let again = cmd_eval(&tiny(3), dir.path(), None).unwrap();
        assert_eq!(trained.final_eval, again);
    }

    #[test]
    fn sweep_is_nested_and_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let reports = cmd_sweep(&tiny(4), dir.path(), None).unwrap();
        assert_eq!(reports.iter().map(|r| r.gallery_size).collect::<Vec<_>>(), vec![10, 20, 40]);
        for w in reports.windows(2) {
            for (a, b) in w[0].per_query_ap.iter().zip(&w[1].per_query_ap) {
                assert!(b <= a);
            }
        }
        let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn study_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let rows = cmd_dictsweep(&RunConfig { total_iterations: 5, ..tiny(5) }, dir.path(), &[1, 2]).unwrap();
        assert_eq!(rows.len(), 4);
        let text = fs::read_to_string(dir.path().join("dictsweep.csv")).unwrap();
        assert!(text.starts_with(
            "loss_mode,dictionary_capacity_multiplier,dictionary_capacity,gallery_size,num_queries,top1,top5,top10,map\nolp_only,1,42,"
        ));
    }

    #[test]
    fn gradcheck_suites_pass() {
        let dir = tempfile::tempdir().unwrap();
        let results = cmd_gradcheck(0, dir.path()).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 1);
        assert_eq!(exit_code(&Error::NonFinite { iteration: 3, what: "loss".into() }), 2);
    }
}
