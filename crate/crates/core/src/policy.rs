//! Per-sample timestep selection.
//!
//! A [`TimePolicy`] maps an input to a categorical distribution over the
//! network time indices `0..T`. Its objective is
//! `J = mean_x E_{t~π(·|x)}[R(x, t)] + λ_H · mean_x H(π(·|x))`, where the reward
//! `R(x, t) = -CE(y, g(z_t(x)))` comes from an auxiliary linear decoder `g`
//! reading teacher features at `t`. Gradients returned here are gradients of
//! `J` (ascent directions).

use serde::{Deserialize, Serialize};

use crate::autonet::{
    cross_entropy, mlp_backward, mlp_forward, MlpCache, MlpSpec, Objective, Optimizer, OptimizerConfig, ParamStore,
};
use crate::diffusion::Teacher;
use crate::error::ensure;
use crate::numeric::{log_softmax, Matrix, RngStream};
use crate::{Error, Result};

const POLICY: &str = "policy";
const DECODER: &str = "decoder";

/// Entropy weight used unless configured otherwise.
pub const DEFAULT_LAMBDA_H: f64 = 0.1;

/// Three-hidden-layer perceptron producing logits over `actions` time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePolicy {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl TimePolicy {
    /// The output layer starts at zero, so the initial policy is uniform.
    pub fn new(input_dim: usize, hidden: usize, actions: usize, rng: &mut RngStream) -> Result<Self> {
        ensure!(
            actions >= 2,
            InvalidArgument,
            "policy needs at least 2 actions, got {actions}"
        );
        let spec = MlpSpec::new(input_dim, vec![hidden; 3], actions);
        spec.validate()?;
        let mut params = ParamStore::new();
        spec.init_params(POLICY, rng, &mut params)?;
        params.get_mut(&MlpSpec::weight_name(POLICY, 3))?.fill(0.0);
        Ok(Self { spec, params })
    }

    pub fn actions(&self) -> usize {
        self.spec.output_dim
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(policy_forward(&self.params, &self.spec, x)?.output().clone())
    }

    /// Row-wise action probabilities.
    pub fn probs(&self, x: &Matrix) -> Result<Matrix> {
        Ok(log_probs(&self.logits(x)?).map(f64::exp))
    }
}

fn policy_forward(params: &ParamStore, spec: &MlpSpec, x: &Matrix) -> Result<MlpCache> {
    mlp_forward(params, POLICY, spec, x, None)
}

fn log_probs(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&log_softmax(logits.row(r)));
    }
    out
}

fn params_from_logit_grad(
    params: &ParamStore,
    spec: &MlpSpec,
    cache: &MlpCache,
    d_logits: &Matrix,
) -> Result<ParamStore> {
    let mut grads = params.zeros_like();
    mlp_backward(params, POLICY, spec, cache, Some(d_logits), &[], &mut grads)?;
    Ok(grads)
}

/// Per-row entropy and its gradient with respect to the logits:
/// `dH/dl_j = -p_j (log p_j + H)`.
fn entropy_terms(logp: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, t) = logp.shape();
    let mut h = Vec::with_capacity(n);
    let mut d = Matrix::zeros(n, t);
    for r in 0..n {
        let lp = logp.row(r);
        let hr: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        for (dj, &l) in d.row_mut(r).iter_mut().zip(lp) {
            *dj = -l.exp() * (l + hr);
        }
        h.push(hr);
    }
    (h, d)
}

/// Linear map from teacher features to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxDecoder {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl AuxDecoder {
    pub fn new(feature_dim: usize, classes: usize, rng: &mut RngStream) -> Result<Self> {
        ensure!(classes >= 2, InvalidArgument, "decoder needs at least 2 classes");
        let spec = MlpSpec::new(feature_dim, vec![], classes);
        spec.validate()?;
        let mut params = ParamStore::new();
        spec.init_params(DECODER, rng, &mut params)?;
        Ok(Self { spec, params })
    }

    pub fn classes(&self) -> usize {
        self.spec.output_dim
    }

    pub fn logits(&self, z: &Matrix) -> Result<Matrix> {
        Ok(mlp_forward(&self.params, DECODER, &self.spec, z, None)?
            .output()
            .clone())
    }

    /// Mean cross-entropy on `(z, y)` and its gradient.
    pub fn loss_and_grad(&self, z: &Matrix, y: &[usize]) -> Result<(f64, ParamStore)> {
        let cache = mlp_forward(&self.params, DECODER, &self.spec, z, None)?;
        let ce = cross_entropy(cache.output(), y)?;
        let mut grads = self.params.zeros_like();
        mlp_backward(
            &self.params,
            DECODER,
            &self.spec,
            &cache,
            Some(&ce.d_logits),
            &[],
            &mut grads,
        )?;
        Ok((ce.loss, grads))
    }
}

/// Features a policy can choose between: one representation of `x` per time index.
pub trait FeatureSource {
    fn feature_dim(&self) -> usize;

    /// Number of time indices.
    fn steps(&self) -> usize;

    /// Row `i` holds the features of `x_i` at time index `times[i]`.
    fn features_at(&self, x: &Matrix, times: &[usize]) -> Result<Matrix>;
}

impl FeatureSource for Teacher {
    fn feature_dim(&self) -> usize {
        self.arch.mid_width()
    }

    fn steps(&self) -> usize {
        Teacher::steps(self)
    }

    fn features_at(&self, x: &Matrix, times: &[usize]) -> Result<Matrix> {
        Ok(self.forward(x, times)?.z_mid)
    }
}

/// Exposes the input unchanged at one time index and zeros everywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedTeacher {
    pub dim: usize,
    pub steps: usize,
    pub informative: usize,
}

impl PlantedTeacher {
    pub fn new(dim: usize, steps: usize, informative: usize) -> Result<Self> {
        ensure!(
            informative < steps,
            InvalidArgument,
            "planted index {informative} outside [0, {steps})"
        );
        Ok(Self {
            dim,
            steps,
            informative,
        })
    }
}

impl FeatureSource for PlantedTeacher {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn features_at(&self, x: &Matrix, times: &[usize]) -> Result<Matrix> {
        ensure!(x.cols() == self.dim, Shape, "input width {} != {}", x.cols(), self.dim);
        ensure!(
            times.len() == x.rows(),
            Shape,
            "{} times for {} rows",
            times.len(),
            x.rows()
        );
        let mut z = Matrix::zeros(x.rows(), self.dim);
        for (r, &t) in times.iter().enumerate() {
            ensure!(
                t < self.steps,
                InvalidArgument,
                "time index {t} outside [0, {})",
                self.steps
            );
            if t == self.informative {
                z.row_mut(r).copy_from_slice(x.row(r));
            }
        }
        Ok(z)
    }
}

/// Draws one time index per row from the policy.
pub fn sample_time(policy: &TimePolicy, x: &Matrix, rng: &mut RngStream) -> Result<Vec<usize>> {
    let p = policy.probs(x)?;
    Ok((0..p.rows()).map(|r| rng.categorical(p.row(r))).collect())
}

/// Negative per-sample cross-entropy of the decoder on `(z, y)`.
pub fn reward(decoder: &AuxDecoder, z: &Matrix, y: &[usize]) -> Result<Vec<f64>> {
    let ce = cross_entropy(&decoder.logits(z)?, y)?;
    Ok(ce.per_sample.into_iter().map(|l| -l).collect())
}

/// Mean per-row entropy of the policy, in nats.
pub fn entropy_bonus(policy: &TimePolicy, x: &Matrix) -> Result<f64> {
    ensure!(x.rows() > 0, InvalidArgument, "empty batch");
    let (h, _) = entropy_terms(&log_probs(&policy.logits(x)?));
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

/// Score-function estimate of `∇J` from one sampled `(t, R)` per row:
/// `mean_i R_i ∇log π(t_i|x_i) + λ_H ∇ mean_i H_i`, the entropy part exact.
pub fn reinforce_grad(
    policy: &TimePolicy,
    x: &Matrix,
    times: &[usize],
    rewards: &[f64],
    lambda_h: f64,
) -> Result<ParamStore> {
    let n = x.rows();
    ensure!(n > 0, InvalidArgument, "empty batch");
    ensure!(
        times.len() == n && rewards.len() == n,
        Shape,
        "need one (t, reward) per row"
    );
    ensure!(rewards.iter().all(|r| r.is_finite()), NonFinite, "rewards");
    let cache = policy_forward(&policy.params, &policy.spec, x)?;
    let logp = log_probs(cache.output());
    let (_, mut d) = entropy_terms(&logp);
    let t_count = policy.actions();
    for r in 0..n {
        ensure!(
            times[r] < t_count,
            InvalidArgument,
            "action {} outside [0, {t_count})",
            times[r]
        );
        let lp = logp.row(r);
        for (j, dj) in d.row_mut(r).iter_mut().enumerate() {
            let score = if j == times[r] { 1.0 } else { 0.0 } - lp[j].exp();
            *dj = (rewards[r] * score + lambda_h * *dj) / n as f64;
        }
    }
    params_from_logit_grad(&policy.params, &policy.spec, &cache, &d)
}

/// `J` and its exact gradient given every reward `table[(i, t)]`.
pub fn exact_objective(
    params: &ParamStore,
    spec: &MlpSpec,
    x: &Matrix,
    table: &Matrix,
    lambda_h: f64,
) -> Result<(f64, ParamStore)> {
    let n = x.rows();
    ensure!(n > 0, InvalidArgument, "empty batch");
    ensure!(
        table.shape() == (n, spec.output_dim),
        Shape,
        "reward table is {:?}, expected ({n}, {})",
        table.shape(),
        spec.output_dim
    );
    table.check_finite("reward table")?;
    let cache = policy_forward(params, spec, x)?;
    let logp = log_probs(cache.output());
    let (h, mut d) = entropy_terms(&logp);
    let mut j = 0.0;
    for r in 0..n {
        let lp = logp.row(r);
        let rew = table.row(r);
        let expected: f64 = lp.iter().zip(rew).map(|(l, v)| l.exp() * v).sum();
        j += expected + lambda_h * h[r];
        for (c, dj) in d.row_mut(r).iter_mut().enumerate() {
            *dj = (lp[c].exp() * (rew[c] - expected) + lambda_h * *dj) / n as f64;
        }
    }
    let grads = params_from_logit_grad(params, spec, &cache, &d)?;
    Ok((j / n as f64, grads))
}

/// Exact `∇J` by enumerating all actions.
pub fn exact_grad(policy: &TimePolicy, x: &Matrix, table: &Matrix, lambda_h: f64) -> Result<ParamStore> {
    Ok(exact_objective(&policy.params, &policy.spec, x, table, lambda_h)?.1)
}

/// Reward of every `(row, time index)` pair under a fixed decoder.
pub fn reward_table<S: FeatureSource + ?Sized>(
    source: &S,
    decoder: &AuxDecoder,
    x: &Matrix,
    y: &[usize],
) -> Result<Matrix> {
    let (n, t_count) = (x.rows(), source.steps());
    let mut table = Matrix::zeros(n, t_count);
    for t in 0..t_count {
        let z = source.features_at(x, &vec![t; n])?;
        for (r, v) in reward(decoder, &z, y)?.into_iter().enumerate() {
            table[(r, t)] = v;
        }
    }
    Ok(table)
}

/// `J` as a function of the policy parameters, for gradient checks.
pub struct ExpectedRewardObjective<'a> {
    pub spec: &'a MlpSpec,
    pub x: &'a Matrix,
    pub table: &'a Matrix,
    pub lambda_h: f64,
}

impl Objective for ExpectedRewardObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        exact_objective(params, self.spec, self.x, self.table, self.lambda_h)
    }
}

/// Mean policy entropy as a function of the policy parameters.
pub struct EntropyObjective<'a> {
    pub spec: &'a MlpSpec,
    pub x: &'a Matrix,
}

impl Objective for EntropyObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        Ok(self.loss_and_grad(params)?.0)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        let zero = Matrix::zeros(self.x.rows(), self.spec.output_dim);
        exact_objective(params, self.spec, self.x, &zero, 1.0)
    }
}

/// Settings for joint policy/decoder updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(default = "default_lambda_h")]
    pub lambda_h: f64,
    pub policy_optimizer: OptimizerConfig,
    pub decoder_optimizer: OptimizerConfig,
    /// Momentum of a moving-average reward baseline; off when absent.
    #[serde(default)]
    pub baseline_momentum: Option<f64>,
}

fn default_lambda_h() -> f64 {
    DEFAULT_LAMBDA_H
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lambda_h: DEFAULT_LAMBDA_H,
            policy_optimizer: OptimizerConfig::Adam {
                lr: 1e-2,
                weight_decay: 0.0,
            },
            decoder_optimizer: OptimizerConfig::Adam {
                lr: 1e-2,
                weight_decay: 0.0,
            },
            baseline_momentum: None,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_h >= 0.0 && self.lambda_h.is_finite(),
            Config,
            "lambda_h must be >= 0"
        );
        if let Some(m) = self.baseline_momentum {
            ensure!(
                (0.0..1.0).contains(&m),
                Config,
                "baseline momentum must lie in [0, 1), got {m}"
            );
        }
        Ok(())
    }
}

/// Outcome of one joint step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub times: Vec<usize>,
    /// Rewards under the decoder before its update.
    pub rewards: Vec<f64>,
    /// Mean policy entropy before the policy update.
    pub entropy: f64,
}

impl RewardRecord {
    pub fn mean_time(&self) -> f64 {
        mean(self.times.iter().map(|&t| t as f64))
    }

    /// Population standard deviation of the selected indices.
    pub fn std_time(&self) -> f64 {
        let m = self.mean_time();
        mean(self.times.iter().map(|&t| (t as f64 - m).powi(2))).sqrt()
    }

    pub fn mean_reward(&self) -> f64 {
        mean(self.rewards.iter().copied())
    }

    pub const CSV_HEADER: &'static str = "step,mean_t,std_t,mean_reward,entropy";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{}",
            self.mean_time(),
            self.std_time(),
            self.mean_reward(),
            self.entropy
        )
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}

/// Policy, decoder and their optimizer state.
#[derive(Debug, Clone)]
pub struct TimeSelector {
    pub policy: TimePolicy,
    pub decoder: AuxDecoder,
    policy_opt: Optimizer,
    decoder_opt: Optimizer,
    baseline: Option<f64>,
    cfg: JointConfig,
}

impl TimeSelector {
    pub fn new(policy: TimePolicy, decoder: AuxDecoder, cfg: JointConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            policy_opt: cfg.policy_optimizer.build()?,
            decoder_opt: cfg.decoder_optimizer.build()?,
            policy,
            decoder,
            baseline: None,
            cfg,
        })
    }

    pub fn config(&self) -> &JointConfig {
        &self.cfg
    }

    /// Samples a time per row, scores it with the decoder, takes one decoder
    /// step on the task loss and one policy ascent step on `J`.
    pub fn joint_step<S: FeatureSource + ?Sized>(
        &mut self,
        source: &S,
        x: &Matrix,
        y: &[usize],
        rng: &mut RngStream,
    ) -> Result<RewardRecord> {
        ensure!(
            self.policy.actions() == source.steps(),
            Shape,
            "policy has {} actions, feature source {} steps",
            self.policy.actions(),
            source.steps()
        );
        let times = sample_time(&self.policy, x, rng)?;
        let z = source.features_at(x, &times)?;
        let rewards = reward(&self.decoder, &z, y)?;
        let entropy = entropy_bonus(&self.policy, x)?;

        let (_, d_grads) = self.decoder.loss_and_grad(&z, y)?;
        self.decoder_opt.step(&mut self.decoder.params, &d_grads)?;

        let shifted: Vec<f64> = match (self.cfg.baseline_momentum, self.baseline) {
            (Some(_), Some(b)) => rewards.iter().map(|r| r - b).collect(),
            _ => rewards.clone(),
        };
        let mut g = reinforce_grad(&self.policy, x, &times, &shifted, self.cfg.lambda_h)?;
        g.scale(-1.0);
        self.policy_opt.step(&mut self.policy.params, &g)?;
        if let Some(m) = self.cfg.baseline_momentum {
            let r = mean(rewards.iter().copied());
            self.baseline = Some(self.baseline.map_or(r, |b| m * b + (1.0 - m) * r));
        }
        self.policy.params.check_finite("policy parameters")?;
        self.decoder.params.check_finite("decoder parameters")?;
        Ok(RewardRecord {
            times,
            rewards,
            entropy,
        })
    }
}

/// Mean reward at each time index of a fresh decoder trained only on that
/// index's features for `steps` full-batch Adam steps.
pub fn exhaustive_sweep<S: FeatureSource + ?Sized>(
    source: &S,
    x: &Matrix,
    y: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    let n = x.rows();
    (0..source.steps())
        .map(|t| {
            let z = source.features_at(x, &vec![t; n])?;
            let mut dec = AuxDecoder::new(source.feature_dim(), classes, &mut rng.child(t as u64))?;
            let mut opt = OptimizerConfig::Adam { lr, weight_decay: 0.0 }.build()?;
            for _ in 0..steps {
                let (_, g) = dec.loss_and_grad(&z, y)?;
                opt.step(&mut dec.params, &g)?;
            }
            let r = reward(&dec, &z, y)?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("sweep decoder at time index {t}")));
            }
            Ok(mean(r.into_iter()))
        })
        .collect()
}
