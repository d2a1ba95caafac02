//! Training loop, evaluation and multi-run benchmarking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::io::{self, fmt_real};
use crate::losses::{loss, match_endmembers, LossKind};
use crate::model::{default_hidden, init_model, ModelParams, Mode};
use crate::nfindr::nfindr_restarts;
use crate::numerics::{sample_dirichlet, DirichletSpec, Matrix, Rng};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::sinkhorn::{sinkhorn_divergence_with_grad, DiscreteMeasure, Divergence, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Nfindr,
    Random,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nfindr" => Ok(InitKind::Nfindr),
            "random" => Ok(InitKind::Random),
            other => Err(Error::invalid(format!("unknown init {other:?}, expected nfindr or random"))),
        }
    }
}

/// Hyperparameters of one training run. Serialized as `train.json`; keys
/// missing from a file take their default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub target_alpha: DirichletSpec,
    pub target_samples: usize,
    pub loss: LossKind,
    /// Widths of the two hidden layers; `None` means `(9k, 6k)`.
    pub hidden: Option<[usize; 2]>,
    pub init: InitKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 185,
            lambda_reg: 10.0,
            learning_rate: 1e-2,
            momentum: 0.0,
            epsilon: 1e-2,
            target_alpha: DirichletSpec::symmetric(3, 4.0).expect("positive alpha"),
            target_samples: 200,
            loss: LossKind::Mse,
            hidden: None,
            init: InitKind::Nfindr,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.target_samples < 1 {
            return Err(Error::invalid("epochs, batch_size and target_samples must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(Error::invalid(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(h) = self.hidden {
            if h.contains(&0) {
                return Err(Error::invalid("hidden widths must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.target_alpha.k()
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig::with_epsilon(self.epsilon)
    }

    fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            ..RmsPropConfig::default()
        }
    }
}

/// Settings that shape a run without being hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Divide each pixel by its maximum before training.
    pub normalize_pixels: bool,
    /// Log every batch at debug level, not just every epoch.
    pub log_batches: bool,
    pub nfindr_restarts: usize,
    pub nfindr_max_sweeps: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            normalize_pixels: false,
            log_batches: false,
            nfindr_restarts: 1,
            nfindr_max_sweeps: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means.
    pub recon: f64,
    pub ot: f64,
    pub total: f64,
    pub seconds: f64,
}

/// Worst-case constraint measurements over every training batch and the
/// final abundance pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub max_sum_error: f64,
    pub min_abundance: f64,
    /// Smallest decoder entry seen after any optimizer step.
    pub min_decoder: f64,
    pub fallback_columns: usize,
    pub unconverged_solves: usize,
}

impl ConstraintReport {
    fn new() -> Self {
        ConstraintReport {
            max_sum_error: 0.0,
            min_abundance: f64::INFINITY,
            min_decoder: f64::INFINITY,
            fallback_columns: 0,
            unconverged_solves: 0,
        }
    }

    fn observe_abundances(&mut self, a: &Matrix) {
        for s in a.col_sums() {
            self.max_sum_error = self.max_sum_error.max((s - 1.0).abs());
        }
        self.min_abundance = self.min_abundance.min(a.min());
    }

    fn observe_decoder(&mut self, w_d: &Matrix) {
        self.min_decoder = self.min_decoder.min(w_d.min());
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ModelParams,
    /// Endmember estimate, the decoder weights (`l x k`).
    pub m_hat: Matrix,
    /// Eval-mode abundances of every pixel (`k x n`).
    pub a_hat: Matrix,
    pub log: Vec<EpochLog>,
    pub constraints: ConstraintReport,
    pub seed: u64,
    pub lambda_reg: f64,
}

impl TrainResult {
    /// Mean OT divergence of the last epoch, if the OT term was active.
    pub fn ot_divergence_final(&self) -> Option<f64> {
        self.log.last().filter(|_| self.lambda_reg > 0.0).map(|e| e.ot)
    }
}

/// Divergence between the batch abundances (`k x b`, one point per column)
/// and a target cloud (`k x m'`), with its gradient as a `k x b` matrix.
pub fn ot_regularizer(a: &Matrix, target: &Matrix, cfg: &SinkhornConfig) -> Result<(Divergence, Matrix)> {
    let mu = DiscreteMeasure::uniform(a.transpose())?;
    let nu = DiscreteMeasure::uniform(target.transpose())?;
    let (div, grad) = sinkhorn_divergence_with_grad(&mu, &nu, cfg)?;
    Ok((div, grad.transpose()))
}

fn max_normalize(y: &Matrix) -> Result<Matrix> {
    let mut out = y.clone();
    for j in 0..y.cols() {
        let col = y.col(j);
        let m = col.iter().cloned().fold(0.0, f64::max);
        if m <= 0.0 {
            return Err(Error::invalid(format!("pixel {j} has no positive entry, cannot max-normalize")));
        }
        out.set_col(j, &col.iter().map(|v| v / m).collect::<Vec<_>>());
    }
    Ok(out)
}

/// Decoder initialization: NFINDR vertices, or `k` distinct random pixels.
fn initial_endmembers(y: &Matrix, k: usize, init: InitKind, rng: &mut Rng, opts: &RunOptions) -> Result<Matrix> {
    match init {
        InitKind::Nfindr => Ok(nfindr_restarts(y, k, rng, opts.nfindr_max_sweeps, opts.nfindr_restarts)?.endmembers),
        InitKind::Random => {
            if y.cols() < k {
                return Err(Error::invalid("fewer pixels than endmembers"));
            }
            let mut idx: Vec<usize> = (0..y.cols()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(k);
            Ok(y.select_columns(&idx))
        }
    }
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    train_with(ds, cfg, &RunOptions::default())
}

pub fn train_with(ds: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainResult> {
    cfg.validate()?;
    let k = cfg.k();
    if let Some(mk) = ds.meta.k {
        if mk != k {
            return Err(Error::invalid(format!(
                "target_alpha has {k} entries but the dataset has {mk} endmembers"
            )));
        }
    }
    let n = ds.n();
    if cfg.batch_size > n {
        return Err(Error::invalid(format!("batch_size {} exceeds the {n} pixels", cfg.batch_size)));
    }
    if cfg.batch_size < 2 {
        return Err(Error::invalid("batch_size must be >= 2 for batch normalization"));
    }
    let y = if opts.normalize_pixels { max_normalize(&ds.y)? } else { ds.y.clone() };

    // Independent streams: the OT target draws never perturb the others,
    // so lambda_reg = 0 reproduces the plain autoencoder trajectory.
    let base = Rng::seed_from_u64(cfg.seed);
    let mut weight_rng = base.fork(1);
    let mut init_rng = base.fork(2);
    let mut shuffle_rng = base.fork(3);
    let mut target_rng = base.fork(4);

    let decoder_init = initial_endmembers(&y, k, cfg.init, &mut init_rng, opts)?;
    let hidden = cfg.hidden.unwrap_or_else(|| default_hidden(k));
    let mut params = init_model(y.rows(), k, hidden, &mut weight_rng, &decoder_init)?;
    let mut opt = RmsProp::new(cfg.optimizer(), &mut params)?;
    let sk = cfg.sinkhorn();
    let mut constraints = ConstraintReport::new();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut batches = batch_iter(n, cfg.batch_size, &mut shuffle_rng)?;
        // A lone leftover pixel cannot be batch-normalized on its own.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        let (mut sum_recon, mut sum_ot, mut sum_total) = (0.0, 0.0, 0.0);
        for (bi, idx) in batches.iter().enumerate() {
            let y_b = y.select_columns(idx);
            let (a, cache) = params.encoder_forward(&y_b, Mode::Train)?;
            constraints.observe_abundances(&a);
            constraints.fallback_columns += cache.fallback.iter().filter(|f| **f).count();
            let y_hat = params.decoder_forward(&a)?;
            let rec = loss(cfg.loss, &y_b, &y_hat)?;

            let (ot, grad_ext) = if cfg.lambda_reg > 0.0 {
                let target = sample_dirichlet(&mut target_rng, &cfg.target_alpha, cfg.target_samples)?;
                let (div, g) = ot_regularizer(&a, &target, &sk)?;
                if !div.converged {
                    constraints.unconverged_solves += 1;
                    log::debug!("epoch {epoch} batch {bi}: Sinkhorn hit max_iters, iters {:?}", div.iters);
                }
                (div.value, Some(g.scale(cfg.lambda_reg)))
            } else {
                (0.0, None)
            };
            let total = rec.value + cfg.lambda_reg * ot;
            let abort = || Error::TrainingAborted {
                epoch,
                batch: bi,
                recon: rec.value,
                ot,
                total,
            };
            if !total.is_finite() {
                return Err(abort());
            }
            let grads = params.backward(&cache, &rec.grad, grad_ext.as_ref())?;
            match opt.step(&mut params, &grads) {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    log::error!("{what}");
                    return Err(abort());
                }
                Err(e) => return Err(e),
            }
            params.update_running_stats(&cache);
            constraints.observe_decoder(&params.w_d);
            if opts.log_batches {
                log::debug!("epoch {epoch} batch {bi}: recon {} ot {ot} total {total}", rec.value);
            }
            sum_recon += rec.value;
            sum_ot += ot;
            sum_total += total;
        }
        let nb = batches.len() as f64;
        let entry = EpochLog {
            epoch,
            recon: sum_recon / nb,
            ot: sum_ot / nb,
            total: sum_total / nb,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: recon {:.6e} ot {:.6e} total {:.6e} ({:.2}s)",
            cfg.epochs,
            entry.recon,
            entry.ot,
            entry.total,
            entry.seconds
        );
        log.push(entry);
    }

    let (a_hat, cache) = params.encoder_forward(&y, Mode::Eval)?;
    constraints.observe_abundances(&a_hat);
    constraints.fallback_columns += cache.fallback.iter().filter(|f| **f).count();
    Ok(TrainResult {
        m_hat: params.w_d.clone(),
        params,
        a_hat,
        log,
        constraints,
        seed: cfg.seed,
        lambda_reg: cfg.lambda_reg,
    })
}

/// Contents of `metrics.json`. The endmember block is `null` without
/// ground truth; `ot_divergence_final` is `null` when no OT term was used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_endmember_sad: Option<Vec<f64>>,
    pub mean_sad: Option<f64>,
    pub permutation: Option<Vec<usize>>,
    pub recon_mse: f64,
    pub recon_sad: f64,
    pub ot_divergence_final: Option<f64>,
}

/// Metrics of trained parameters on `ds`, with an eval-mode pass over
/// every pixel.
pub fn evaluate_params(params: &ModelParams, ds: &Dataset, ot_final: Option<f64>, opts: &RunOptions) -> Result<Metrics> {
    let y = if opts.normalize_pixels { max_normalize(&ds.y)? } else { ds.y.clone() };
    let (a, _) = params.encoder_forward(&y, Mode::Eval)?;
    let y_hat = params.decoder_forward(&a)?;
    let recon_mse = loss(LossKind::Mse, &y, &y_hat)?.value;
    let recon_sad = loss(LossKind::Sad, &y, &y_hat)?.value;
    let report = match &ds.m_true {
        Some(m) => Some(match_endmembers(&params.w_d, m)?),
        None => None,
    };
    Ok(Metrics {
        per_endmember_sad: report.as_ref().map(|r| r.per_endmember_sad.clone()),
        mean_sad: report.as_ref().map(|r| r.mean_sad),
        permutation: report.map(|r| r.permutation),
        recon_mse,
        recon_sad,
        ot_divergence_final: ot_final,
    })
}

pub fn evaluate(res: &TrainResult, ds: &Dataset) -> Result<Metrics> {
    evaluate_params(&res.params, ds, res.ot_divergence_final(), &RunOptions::default())
}

/// Endmember columns in ground-truth order with truth names when matched,
/// otherwise in decoder order as `em_0, em_1, ...`.
pub fn named_endmembers(m_hat: &Matrix, metrics: &Metrics, ds: &Dataset) -> (Vec<String>, Matrix) {
    let k = m_hat.cols();
    match &metrics.permutation {
        Some(perm) if ds.meta.endmember_names.len() == k => (ds.meta.endmember_names.clone(), m_hat.select_columns(perm)),
        Some(perm) => ((0..k).map(|t| format!("em_{t}")).collect(), m_hat.select_columns(perm)),
        None => ((0..k).map(|t| format!("em_{t}")).collect(), m_hat.clone()),
    }
}

/// `epoch,recon,ot,total`: the deterministic part of the epoch log.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,recon,ot,total\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, fmt_real(e.recon), fmt_real(e.ot), fmt_real(e.total));
    }
    s
}

/// `epoch,seconds`: wall-clock timing, kept apart from `log.csv`.
pub fn timing_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,seconds\n");
    for e in log {
        let _ = writeln!(s, "{},{}", e.epoch, fmt_real(e.seconds));
    }
    s
}

/// Writes `model/`, `endmembers.csv`, `A_hat.hsib`, `metrics.json`,
/// `log.csv`, `timing.csv` and the resolved `train.json` into `dir`.
pub fn write_run_dir(dir: &Path, res: &TrainResult, metrics: &Metrics, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    res.params.save(&dir.join("model"))?;
    let (names, m) = named_endmembers(&res.m_hat, metrics, ds);
    io::write_named_columns_csv(&dir.join("endmembers.csv"), &names, &m)?;
    io::write_hsib(&dir.join("A_hat.hsib"), &res.a_hat)?;
    io::write_json(&dir.join("metrics.json"), metrics)?;
    io::write_json(&dir.join("train.json"), cfg)?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("log.csv", log_csv(&res.log))?;
    write("timing.csv", timing_csv(&res.log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub per_endmember_sad: Vec<f64>,
    pub mean_sad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub top: usize,
    pub endmember_names: Vec<String>,
    /// Every successful run, ordered by seed.
    pub all: Vec<RunSummary>,
    /// The selected best runs, best first.
    pub best: Vec<RunSummary>,
    pub failed: Vec<FailedRun>,
    pub per_endmember_mean: Vec<f64>,
    /// Sample standard deviation; zero for a single selected run.
    pub per_endmember_std: Vec<f64>,
    /// Mean over endmembers of `per_endmember_mean`.
    pub mean_sad: f64,
}

impl BenchReport {
    /// `endmember,mean,std` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("endmember,mean,std\n");
        for (t, name) in self.endmember_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{name},{},{}",
                fmt_real(self.per_endmember_mean[t]),
                fmt_real(self.per_endmember_std[t])
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "best {} of {} runs ({} failed), SAD in radians\n",
            self.best.len(),
            self.runs,
            self.failed.len()
        );
        for (t, name) in self.endmember_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {name:<24} {:.4} ± {:.4}",
                self.per_endmember_mean[t], self.per_endmember_std[t]
            );
        }
        let _ = writeln!(s, "  {:<24} {:.4}", "mean", self.mean_sad);
        s
    }
}

fn run_summary(ds: &Dataset, cfg: &TrainConfig, opts: &RunOptions, seed: u64) -> std::result::Result<RunSummary, String> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let res = train_with(ds, &cfg, opts).map_err(|e| e.to_string())?;
    let m_true = ds.m_true.as_ref().expect("checked by bench");
    let rep = match_endmembers(&res.m_hat, m_true).map_err(|e| e.to_string())?;
    Ok(RunSummary {
        seed,
        per_endmember_sad: rep.per_endmember_sad,
        mean_sad: rep.mean_sad,
    })
}

/// Trains `runs` models with seeds `cfg.seed + r` and summarizes the `top`
/// lowest mean-SAD runs. `jobs > 1` spreads runs over threads; results do
/// not depend on it.
pub fn bench(ds: &Dataset, cfg: &TrainConfig, runs: usize, top: usize, jobs: usize, opts: &RunOptions) -> Result<BenchReport> {
    if !(runs >= top && top >= 1) {
        return Err(Error::invalid(format!("need runs >= top >= 1, got runs={runs}, top={top}")));
    }
    let m_true = ds
        .m_true
        .as_ref()
        .ok_or_else(|| Error::invalid("bench needs a dataset with ground-truth endmembers"))?;
    cfg.validate()?;
    let seeds: Vec<u64> = (0..runs as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let jobs = jobs.clamp(1, runs);
    let mut outcomes: Vec<(u64, std::result::Result<RunSummary, String>)> = if jobs == 1 {
        seeds.iter().map(|&s| (s, run_summary(ds, cfg, opts, s))).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let mine: Vec<u64> = seeds.iter().skip(j).step_by(jobs).copied().collect();
                    scope.spawn(move || mine.into_iter().map(|s| (s, run_summary(ds, cfg, opts, s))).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("bench worker panicked"))
                .collect()
        })
    };
    outcomes.sort_by_key(|(s, _)| *s);

    let mut all = Vec::new();
    let mut failed = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok(r) => {
                log::info!("run seed {seed}: mean SAD {:.4}", r.mean_sad);
                all.push(r);
            }
            Err(error) => {
                log::warn!("run seed {seed} failed: {error}");
                failed.push(FailedRun { seed, error });
            }
        }
    }
    if all.is_empty() {
        return Err(Error::invalid(format!("all {runs} runs failed")));
    }
    let mut best = all.clone();
    best.sort_by(|a, b| a.mean_sad.total_cmp(&b.mean_sad).then(a.seed.cmp(&b.seed)));
    if best.len() < top {
        log::warn!("only {} successful runs for top {top}", best.len());
    }
    best.truncate(top);

    let k = m_true.cols();
    let cnt = best.len() as f64;
    let per_endmember_mean: Vec<f64> = (0..k)
        .map(|t| best.iter().map(|r| r.per_endmember_sad[t]).sum::<f64>() / cnt)
        .collect();
    let per_endmember_std: Vec<f64> = (0..k)
        .map(|t| {
            if best.len() < 2 {
                return 0.0;
            }
            let ss: f64 = best.iter().map(|r| (r.per_endmember_sad[t] - per_endmember_mean[t]).powi(2)).sum();
            (ss / (cnt - 1.0)).sqrt()
        })
        .collect();
    let mean_sad = per_endmember_mean.iter().sum::<f64>() / k as f64;
    let endmember_names = if ds.meta.endmember_names.len() == k {
        ds.meta.endmember_names.clone()
    } else {
        (0..k).map(|t| format!("em_{t}")).collect()
    };
    Ok(BenchReport {
        runs,
        top,
        endmember_names,
        all,
        best,
        failed,
        per_endmember_mean,
        per_endmember_std,
        mean_sad,
    })
}
