//! Training loop: per-pair objectives over the refinement iterations, batch
//! gradient accumulation, the optimizer step, checkpoints, and the overfit
//! harness.
//!
//! At iteration `i` the network sees the source moved by the accumulated
//! estimate and is supervised with `residual_transform(gt, accumulated)`.
//! Everything random inside a step (batch choice, dropout masks) is drawn
//! from streams keyed by `(seed, step, pair slot)`, and per-pair gradients
//! are summed in slot order, so results do not depend on the thread count.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::geometry::{residual_transform, PointCloud, RigidTransform};
use crate::losses::{
    build_perturbed_clouds, dropout_mask, param_loss_var, pfdl_var, tsl_var, LossConfig, LossTerms,
    SensitivityVars,
};
use crate::metrics::{aggregate, MetricsReport, SampleErrors};
use crate::model::{transform_from_vars, Branch, ModelConfig, RegistrationNet};
use crate::nn::{Adam, BoundParams, ParamSet, PoolMask, Tape, Tensor, Var};
use crate::rng::stream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Worker threads; 0 uses every core. Results are identical for any value.
    pub threads: usize,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            steps: 260_000,
            seed: 0,
            threads: 0,
            checkpoint_every: 10_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be positive"));
        }
        Ok(())
    }
}

/// Relative weights of the three loss terms inside one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub param: f64,
    pub sensitivity: f64,
    pub dropout: f64,
}

impl LossWeights {
    pub fn total(config: &LossConfig) -> Self {
        Self {
            param: 1.0,
            sensitivity: config.beta,
            dropout: config.gamma,
        }
    }

    pub const PARAM: Self = Self {
        param: 1.0,
        sensitivity: 0.0,
        dropout: 0.0,
    };
    pub const SENSITIVITY: Self = Self {
        param: 0.0,
        sensitivity: 1.0,
        dropout: 0.0,
    };
    pub const DROPOUT: Self = Self {
        param: 0.0,
        sensitivity: 0.0,
        dropout: 1.0,
    };
}

/// Everything non-differentiable an iteration depended on. Replaying a trace
/// makes the objective a smooth function of the weights, which is what
/// finite-difference checks need.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace<T> {
    /// Estimate applied to the source before this iteration.
    pub accumulated: RigidTransform<T>,
    pub target: RigidTransform<T>,
    /// Detached prediction used to build the perturbed copies.
    pub perturbation: Option<RigidTransform<T>>,
    /// Pool masks of the source and reference dropout pass.
    pub masks: Option<[PoolMask; 2]>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PairTrace<T> {
    pub iterations: Vec<IterationTrace<T>>,
}

/// Which auxiliary passes run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuxPasses {
    pub sensitivity: bool,
    pub dropout: bool,
}

impl AuxPasses {
    pub fn from_config(model: &ModelConfig, loss: &LossConfig, step: u64) -> Self {
        let due = step.is_multiple_of(loss.aux_every);
        Self {
            sensitivity: due && loss.enable_tsl && model.dual_branch,
            dropout: due && loss.enable_pfdl && loss.dropout_ratio > 0.0,
        }
    }
}

pub struct PairObjective<T> {
    /// Weighted objective, averaged over iterations.
    pub loss: T,
    pub terms: Vec<LossTerms<T>>,
    /// One tensor per parameter, in parameter order; `None` when not requested.
    pub grads: Option<Vec<Tensor<T>>>,
    pub trace: PairTrace<T>,
}

fn cloud_tensor<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<PointCloud<T>> {
    let t = tape.value(v);
    PointCloud::new((0..t.rows()).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect())
}

/// Loss of one pair over all refinement iterations, optionally with
/// gradients. With `replay`, the recorded accumulated transforms, targets,
/// perturbations and masks are reused instead of being recomputed or drawn.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective<T: Scalar, R: Rng + ?Sized>(
    net: &RegistrationNet<T>,
    pair: &RegistrationPair<T>,
    loss: &LossConfig,
    weights: LossWeights,
    aux: AuxPasses,
    replay: Option<&PairTrace<T>>,
    with_grads: bool,
    rng: &mut R,
) -> Result<PairObjective<T>> {
    let cfg = net.config();
    if let Some(r) = replay {
        if r.iterations.len() != cfg.iterations {
            return Err(Error::shape("trace iterations", cfg.iterations, r.iterations.len()));
        }
    }
    let mut tape = Tape::new();
    let bp = net.params().bind(&mut tape);
    let y = tape.constant(Tensor::from_cloud(&pair.reference));
    let x0 = tape.constant(Tensor::from_cloud(&pair.source));
    let delta = T::lit(loss.delta);
    let lambda = T::lit(loss.lambda_t);
    let (wp, ws, wd) = (T::lit(weights.param), T::lit(weights.sensitivity), T::lit(weights.dropout));

    let mut acc = RigidTransform::identity();
    let mut x = x0;
    let mut trace = PairTrace::default();
    let mut terms = Vec::with_capacity(cfg.iterations);
    let mut total: Option<Var> = None;
    for i in 0..cfg.iterations {
        let recorded = replay.map(|r| &r.iterations[i]);
        if cfg.detach_iterations {
            if let Some(rec) = recorded {
                acc = rec.accumulated;
            }
            x = tape.constant(Tensor::from_cloud(&acc.apply(&pair.source)));
        }
        let target = match recorded {
            Some(rec) => rec.target,
            None => residual_transform(&pair.gt, &acc),
        };
        let it = net.iteration_vars(&mut tape, &bp, x, y);
        let pred = transform_from_vars(&tape, it.rotation, it.translation);

        let lp = param_loss_var(&mut tape, it.rotation, it.translation, &target, lambda);
        let mut term = LossTerms {
            param: tape.value(lp).item(),
            ..LossTerms::default()
        };
        let mut iter_loss = tape.scale(lp, wp);

        let perturbation = match recorded {
            Some(rec) => rec.perturbation,
            None => aux.sensitivity.then_some(pred),
        };
        if let Some(p) = perturbation {
            let moved = cloud_tensor(&tape, x)?;
            let (xr, xt) = build_perturbed_clouds(&moved, &p);
            let xr = tape.constant(Tensor::from_cloud(&xr));
            let xt = tape.constant(Tensor::from_cloud(&xt));
            let mut sv = Vec::with_capacity(2);
            for (bi, b) in Branch::BOTH.into_iter().enumerate() {
                let er = net.encode_joint(&mut tape, &bp, b, [xr, y], [None, None]);
                let et = net.encode_joint(&mut tape, &bp, b, [xt, y], [None, None]);
                sv.push(SensitivityVars {
                    anchor: it.encoded[bi][0].global,
                    rotated: er[0].global,
                    translated: et[0].global,
                });
            }
            let ls = tsl_var(&mut tape, sv[0], sv[1], delta, loss.tsl_hinge_at_zero);
            term.sensitivity = tape.value(ls).item();
            let ls = tape.scale(ls, ws);
            iter_loss = tape.add(iter_loss, ls);
        }

        let masks = match recorded {
            Some(rec) => rec.masks.clone(),
            None if aux.dropout => {
                let cols = cfg.block_channels.iter().copied().max().unwrap_or(1);
                let nx = tape.value(x).rows();
                let ny = pair.reference.len();
                Some([
                    dropout_mask(nx, cols, loss.dropout_ratio, loss.dropout_per_element, rng)?,
                    dropout_mask(ny, cols, loss.dropout_ratio, loss.dropout_per_element, rng)?,
                ])
            }
            None => None,
        };
        if let Some(m) = &masks {
            let dr = net.encode_joint(&mut tape, &bp, Branch::Rotation, [x, y], [Some(&m[0]), Some(&m[1])]);
            let dt = net.encode_joint(&mut tape, &bp, Branch::Translation, [x, y], [Some(&m[0]), Some(&m[1])]);
            let lx = pfdl_var(
                &mut tape,
                it.encoded[0][0].global,
                dr[0].global,
                it.encoded[1][0].global,
                dt[0].global,
            );
            let ly = pfdl_var(
                &mut tape,
                it.encoded[0][1].global,
                dr[1].global,
                it.encoded[1][1].global,
                dt[1].global,
            );
            let ld = tape.add(lx, ly);
            term.dropout = tape.value(ld).item();
            let ld = tape.scale(ld, wd);
            iter_loss = tape.add(iter_loss, ld);
        }

        total = Some(match total {
            Some(t) => tape.add(t, iter_loss),
            None => iter_loss,
        });
        terms.push(term);
        trace.iterations.push(IterationTrace {
            accumulated: acc,
            target,
            perturbation,
            masks,
        });

        if !cfg.detach_iterations {
            let moved = tape.quat_rotate(it.rotation, x);
            x = tape.add_row(moved, it.translation);
        }
        acc = pred.compose(&acc);
    }
    let total = total.expect("at least one iteration");
    let total = tape.scale(total, T::one() / T::from_usize_lossy(cfg.iterations));
    let loss_value = tape.value(total).item();
    let grads = with_grads.then(|| collect_grads(&tape, &bp, total, net.params()));
    Ok(PairObjective {
        loss: loss_value,
        terms,
        grads,
        trace,
    })
}

fn collect_grads<T: Scalar>(tape: &Tape<T>, bp: &BoundParams, output: Var, params: &ParamSet<T>) -> Vec<Tensor<T>> {
    let mut g = tape.backward(output);
    bp.vars()
        .iter()
        .zip(params.iter())
        .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols())))
        .collect()
}

/// Unweighted loss terms averaged over pairs and iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub param: f64,
    pub sensitivity: f64,
    pub dropout: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loss={:.9e} l_p={:.9e} l_s={:.9e} l_d={:.9e}",
            self.total, self.param, self.sensitivity, self.dropout
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub wall_seconds: f64,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} {} wall_s={:.3}", self.step, self.losses, self.wall_seconds)
    }
}

/// Digest of everything that must agree for a checkpoint to be resumable.
pub fn config_hash(model: &ModelConfig, loss: &LossConfig, train: &TrainConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a ModelConfig,
        loss: &'a LossConfig,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    }
    let key = Key {
        model,
        loss,
        learning_rate: train.learning_rate,
        batch_size: train.batch_size,
        seed: train.seed,
    };
    let bytes = serde_json::to_vec(&key).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Trainer<T: Scalar> {
    net: RegistrationNet<T>,
    optimizer: Adam<T>,
    loss: LossConfig,
    train: TrainConfig,
    step: u64,
    pool: Option<rayon::ThreadPool>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh weights seeded from `train.seed`.
    pub fn new(model: ModelConfig, loss: LossConfig, train: TrainConfig) -> Result<Self> {
        let net = RegistrationNet::new(model, train.seed)?;
        Self::with_net(net, loss, train)
    }

    pub fn with_net(net: RegistrationNet<T>, loss: LossConfig, train: TrainConfig) -> Result<Self> {
        loss.validate()?;
        train.validate()?;
        let optimizer = Adam::new(net.params(), train.learning_rate);
        let pool = match train.threads {
            0 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::invalid(e.to_string()))?,
            ),
        };
        Ok(Self {
            net,
            optimizer,
            loss,
            train,
            step: 0,
            pool,
            started: Instant::now(),
        })
    }

    pub fn net(&self) -> &RegistrationNet<T> {
        &self.net
    }

    pub fn into_net(self) -> RegistrationNet<T> {
        self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn config_hash(&self) -> String {
        config_hash(self.net.config(), &self.loss, &self.train)
    }

    /// Indices of the pairs used at the next step.
    pub fn batch_indices(&self, available: usize) -> Vec<usize> {
        if available <= self.train.batch_size {
            return (0..available).collect();
        }
        let mut rng = stream(&[self.train.seed, 0xBA7C, self.step]);
        rand::seq::index::sample(&mut rng, available, self.train.batch_size).into_vec()
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[RegistrationPair<T>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let step = self.step;
        let aux = AuxPasses::from_config(self.net.config(), &self.loss, step);
        let weights = LossWeights::total(&self.loss);
        let net = &self.net;
        let loss = &self.loss;
        let seed = self.train.seed;
        let run = || {
            batch
                .par_iter()
                .enumerate()
                .map(|(slot, pair)| {
                    let mut rng = stream(&[seed, 0xD509, step, slot as u64]);
                    pair_objective(net, pair, loss, weights, aux, None, true, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        let results = match &self.pool {
            Some(p) => p.install(run)?,
            None => run()?,
        };

        let n = T::from_usize_lossy(batch.len());
        let mut grads = self.net.params().zeros_like();
        let mut breakdown = LossBreakdown::default();
        let count = (batch.len() * self.net.config().iterations) as f64;
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(r.grads.as_ref().expect("requested")) {
                acc.add_assign(g);
            }
            breakdown.total += r.loss.as_f64() / batch.len() as f64;
            for t in &r.terms {
                breakdown.param += t.param.as_f64() / count;
                breakdown.sensitivity += t.sensitivity.as_f64() / count;
                breakdown.dropout += t.dropout.as_f64() / count;
            }
        }
        let finite = [breakdown.total, breakdown.param, breakdown.sensitivity, breakdown.dropout]
            .iter()
            .all(|v| v.is_finite())
            && grads.iter().all(Tensor::all_finite);
        if !finite {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown.to_string(),
            });
        }
        for g in &mut grads {
            g.scale(T::one() / n);
        }
        self.optimizer.update(self.net.params_mut(), &grads);
        self.step += 1;
        Ok(StepReport {
            step,
            losses: breakdown,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `train.steps` updates have been made, drawing batches from
    /// `pairs`. `on_step` sees every report; it can write checkpoints or logs.
    pub fn run<F>(&mut self, pairs: &[RegistrationPair<T>], mut on_step: F) -> Result<Vec<StepReport>>
    where
        F: FnMut(&Self, &StepReport) -> Result<()>,
    {
        if pairs.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        let mut reports = Vec::new();
        while self.step < self.train.steps {
            let idx = self.batch_indices(pairs.len());
            let batch: Vec<RegistrationPair<T>> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let report = self.train_step(&batch)?;
            if report.step % self.train.log_every == 0 || self.step == self.train.steps {
                info!("{report}");
            }
            on_step(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Writes `<path>` (weights and optimizer state) and `<path>.json`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let (m, v) = self.optimizer.moments();
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.config_hash(),
            step: self.step,
            seed: self.train.seed,
            adam_step: self.optimizer.step,
            scalar: std::any::type_name::<T>().to_string(),
            model: self.net.config().clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let params: Vec<&Tensor<T>> = self.net.params().iter().map(|p| &p.value).collect();
        for group in [params, m.iter().collect(), v.iter().collect()] {
            write_tensors(&mut buf, &group);
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    /// Restores a checkpoint written with the same model, loss and training
    /// settings (the hash must match).
    pub fn resume(path: &Path, model: ModelConfig, loss: LossConfig, train: TrainConfig) -> Result<Self> {
        let ckpt = Checkpoint::<T>::read(path)?;
        let expected = config_hash(&model, &loss, &train);
        if ckpt.meta.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: ckpt.meta.config_hash,
            });
        }
        let net = RegistrationNet::from_params(model, ckpt.params)?;
        let mut t = Self::with_net(net, loss, train)?;
        t.optimizer = Adam::from_parts(t.train.learning_rate, ckpt.meta.adam_step, ckpt.m, ckpt.v);
        t.step = ckpt.meta.step;
        Ok(t)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"P2PRCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub adam_step: u64,
    pub scalar: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_tensors<T: Scalar>(buf: &mut Vec<u8>, tensors: &[&Tensor<T>]) {
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensors<T: Scalar>(r: &mut &[u8]) -> Result<Vec<Tensor<T>>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|l| *l * 8 <= r.len())
            .ok_or_else(|| Error::Checkpoint("truncated tensor".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(T::lit(f64::from_bits(read_u64(r)?)));
        }
        out.push(Tensor::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

/// Contents of a checkpoint on disk.
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<T>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn read(path: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(sidecar_path(path))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: meta.format_version,
            });
        }
        let bytes = fs::read(path)?;
        let mut r: &[u8] = &bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let values = read_tensors::<T>(&mut r)?;
        let m = read_tensors::<T>(&mut r)?;
        let v = read_tensors::<T>(&mut r)?;
        if m.len() != values.len() || v.len() != values.len() || !r.is_empty() {
            return Err(Error::Checkpoint("inconsistent tensor groups".into()));
        }
        let template = RegistrationNet::<T>::new(meta.model.clone(), 0)?;
        let mut params = ParamSet::new();
        for (p, value) in template.params().iter().zip(values) {
            params.push(p.name.clone(), value);
        }
        if params.len() != template.params().len() {
            return Err(Error::Checkpoint("parameter count does not match the model".into()));
        }
        Ok(Self { meta, params, m, v })
    }

    /// The network stored in the checkpoint.
    pub fn into_net(self) -> Result<RegistrationNet<T>> {
        RegistrationNet::from_params(self.meta.model, self.params)
    }
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<RegistrationNet<T>> {
    Checkpoint::read(path)?.into_net()
}

/// Registers every pair and scores the final estimates.
pub fn evaluate<T: Scalar>(net: &RegistrationNet<T>, pairs: &[RegistrationPair<T>]) -> Result<MetricsReport> {
    let samples = pairs
        .par_iter()
        .map(|p| {
            let r = net.register(&p.source, &p.reference)?;
            Ok(SampleErrors::evaluate(&r.final_transform, &p.gt))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&samples)
}

/// Feature distances between the anchor and its perturbed copies, per branch,
/// for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityDistances {
    /// `|F^r(X') - F^r(X'_t)|`
    pub rotation_to_translated: f64,
    /// `|F^r(X') - F^r(X'_r)|`
    pub rotation_to_rotated: f64,
    /// `|F^t(X') - F^t(X'_r)|`
    pub translation_to_rotated: f64,
    /// `|F^t(X') - F^t(X'_t)|`
    pub translation_to_translated: f64,
}

fn l2_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Runs the registration loop and measures, at every iteration, how far each
/// branch's global feature moves under the rotation-only and translation-only
/// copies built from that iteration's estimate.
pub fn sensitivity_distances<T: Scalar>(
    net: &RegistrationNet<T>,
    source: &PointCloud<T>,
    reference: &PointCloud<T>,
) -> Result<Vec<SensitivityDistances>> {
    let result = net.register(source, reference)?;
    let mut acc = RigidTransform::identity();
    let mut out = Vec::new();
    for step in &result.per_iteration {
        let moved = acc.apply(source);
        let (xr, xt) = build_perturbed_clouds(&moved, step);
        let mut d = [[0.0; 2]; 2];
        for (bi, b) in Branch::BOTH.into_iter().enumerate() {
            let (anchor, _) = net.encode_pair(&moved, reference, b);
            let (rot, _) = net.encode_pair(&xr, reference, b);
            let (tr, _) = net.encode_pair(&xt, reference, b);
            d[bi] = [l2_dist(&anchor.global, &tr.global), l2_dist(&anchor.global, &rot.global)];
        }
        out.push(SensitivityDistances {
            rotation_to_translated: d[0][0],
            rotation_to_rotated: d[0][1],
            translation_to_translated: d[1][0],
            translation_to_rotated: d[1][1],
        });
        acc = step.compose(&acc);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitThresholds {
    pub max_error_r_deg: f64,
    pub max_error_t: f64,
}

impl Default for OverfitThresholds {
    fn default() -> Self {
        Self {
            max_error_r_deg: 5.0,
            max_error_t: 0.05,
        }
    }
}

pub struct OverfitOutcome<T: Scalar> {
    pub passed: bool,
    pub report: MetricsReport,
    pub trace: Vec<StepReport>,
    pub trainer: Trainer<T>,
}

/// Trains on a fixed set of pairs and evaluates on the same pairs.
pub fn overfit_harness<T: Scalar>(
    pairs: &[RegistrationPair<T>],
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    thresholds: OverfitThresholds,
) -> Result<OverfitOutcome<T>> {
    let mut trainer = Trainer::new(model, loss, train)?;
    let trace = trainer.run(pairs, |_, _| Ok(()))?;
    let report = evaluate(trainer.net(), pairs)?;
    let passed = report.error_r < thresholds.max_error_r_deg && report.error_t < thresholds.max_error_t;
    Ok(OverfitOutcome {
        passed,
        report,
        trace,
        trainer,
    })
}
