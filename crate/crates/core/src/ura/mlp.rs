//! Fully connected power-control policy trained by stochastic ascent on the
//! expected sum rate over random channels and activation patterns.
//!
//! Input: masked power gains `|h_ij|^2` flattened row-major and z-scored.
//! Hidden layers use ReLU; the output layer is a logistic scaled by `p_max`,
//! so the box constraint holds structurally.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alcor::UsvSample;
use crate::channel::{ChannelMatrix, GainMatrix};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::rng::{domain, substream};
use crate::ura::UraPolicy;
use crate::utility::{masked_rates, rate_gradient_from_gains, PowerVector};

pub const POLICY_FORMAT: &str = "alcor-mlp-policy";
pub const POLICY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.biases[o];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out.push(acc);
        }
    }
}

/// How activation probabilities are drawn during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMode {
    /// Per batch item, kappa is one of `0.2*1`, `0.5*1`, `1` uniformly.
    Diverse,
    /// Every user always on.
    #[default]
    NonDiverse,
}

impl KappaMode {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            KappaMode::Diverse => *[0.2, 0.5, 1.0].choose(rng).expect("nonempty"),
            KappaMode::NonDiverse => 1.0,
        }
    }
}

/// What the checkpoint was trained with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingDescriptor {
    pub mode: Option<KappaMode>,
    pub steps: usize,
    pub batch: usize,
    pub stepsize: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub noise: f64,
    pub final_batch_mean_su: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub n_users: usize,
    pub p_max: f64,
    pub layers: Vec<Dense>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub descriptor: TrainingDescriptor,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    policy: MlpPolicy,
}

struct Cache {
    /// Inputs to each layer (the first entry is the standardized feature).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpPolicy {
    /// Random He-initialized network with the given hidden widths and an
    /// output layer of width `n_users`.
    pub fn new<R: Rng + ?Sized>(
        n_users: usize,
        hidden: &[usize],
        p_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut policy = Self::zeros(n_users, hidden, p_max)?;
        let n_layers = policy.layers.len();
        for (l, layer) in policy.layers.iter_mut().enumerate() {
            let gain = if l + 1 == n_layers { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / layer.inputs as f64).sqrt())
                .map_err(|e| invalid(e.to_string()))?;
            for w in &mut layer.weights {
                *w = normal.sample(rng);
            }
        }
        Ok(policy)
    }

    /// All weights and biases zero; outputs are `p_max / 2`.
    pub fn zeros(n_users: usize, hidden: &[usize], p_max: f64) -> Result<Self> {
        if n_users == 0 {
            return Err(invalid("policy needs at least one user"));
        }
        if hidden.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if !(p_max > 0.0) {
            return Err(invalid("p_max must be positive"));
        }
        let input = n_users * n_users;
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(n_users);
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            n_users,
            p_max,
            layers,
            input_mean: vec![0.0; input],
            input_std: vec![1.0; input],
            descriptor: TrainingDescriptor::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Layer output widths, last one equals `n_users`.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.outputs).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(invalid("parameter vector has the wrong length"));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Fits the input z-score from a calibration set of feature vectors.
    pub fn calibrate(&mut self, features: &[Vec<f64>]) -> Result<()> {
        let d = self.input_dim();
        if features.is_empty() || features.iter().any(|f| f.len() != d) {
            return Err(invalid("calibration needs nonempty features of input dimension"));
        }
        let m = features.len() as f64;
        for k in 0..d {
            let mean = features.iter().map(|f| f[k]).sum::<f64>() / m;
            let var = features.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / m;
            self.input_mean[k] = mean;
            self.input_std[k] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    pub fn features(&self, gains: &GainMatrix) -> Result<Vec<f64>> {
        if gains.n() != self.n_users {
            return Err(invalid(format!(
                "policy built for {} users, channel has {}",
                self.n_users,
                gains.n()
            )));
        }
        Ok(gains.as_slice().to_vec())
    }

    fn forward_cached(&self, features: &[f64]) -> Result<(Vec<f64>, Cache)> {
        if features.len() != self.input_dim() {
            return Err(invalid(format!(
                "input has {} features, first layer expects {}",
                features.len(),
                self.input_dim()
            )));
        }
        let x: Vec<f64> = features
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(f, (m, s))| (f - m) / s)
            .collect();
        let mut inputs = vec![x];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.apply(inputs.last().expect("nonempty"), &mut z);
            if l < last {
                inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let out = pre[last]
            .iter()
            .map(|&z| self.p_max * logistic(z))
            .collect();
        Ok((out, Cache { inputs, pre }))
    }

    /// Powers in `(0, p_max)` for every user, before masking.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Gradient of a scalar objective with respect to all parameters, given
    /// its gradient with respect to the network output.
    fn backward(&self, cache: &Cache, d_out: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta: Vec<f64> = cache.pre[last]
            .iter()
            .zip(d_out)
            .map(|(&z, &g)| {
                let s = logistic(z);
                g * self.p_max * s * (1.0 - s)
            })
            .collect();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let mut g = Vec::with_capacity(layer.n_params());
            for &d in &delta {
                g.extend(input.iter().map(|x| d * x));
            }
            g.extend_from_slice(&delta);
            grads[l] = g;
            if l > 0 {
                let prev_pre = &cache.pre[l - 1];
                let mut next = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (k, w) in row.iter().enumerate() {
                        next[k] += w * d;
                    }
                }
                for (k, v) in next.iter_mut().enumerate() {
                    if prev_pre[k] <= 0.0 {
                        *v = 0.0;
                    }
                }
                delta = next;
            }
        }
        grads.concat()
    }

    /// Sum utility of one (channel, activation) sample under this policy.
    pub fn sample_utility(&self, gains: &GainMatrix, xi: &UsvSample, noise: f64) -> Result<f64> {
        let masked = gains.masked(xi)?;
        let p = self.forward(&self.features(&masked)?)?;
        Ok(masked_rates(&masked, &p, noise, xi)?.iter().sum())
    }

    /// Sum utility and its gradient with respect to the parameters.
    pub fn sample_utility_grad(
        &self,
        gains: &GainMatrix,
        xi: &UsvSample,
        noise: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let masked = gains.masked(xi)?;
        let (out, cache) = self.forward_cached(&self.features(&masked)?)?;
        let p: Vec<f64> = out
            .iter()
            .enumerate()
            .map(|(i, &x)| if xi.is_active(i) { x } else { 0.0 })
            .collect();
        let su: f64 = masked_rates(&masked, &p, noise, xi)?.iter().sum();
        let jac = rate_gradient_from_gains(&masked, &p, noise)?;
        let n = self.n_users;
        let d_out: Vec<f64> = (0..n)
            .map(|j| {
                if !xi.is_active(j) {
                    return 0.0;
                }
                (0..n)
                    .filter(|&i| xi.is_active(i))
                    .map(|i| jac[i * n + j])
                    .sum()
            })
            .collect();
        Ok((su, self.backward(&cache, &d_out)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PolicyFile {
            format: POLICY_FORMAT.to_string(),
            version: POLICY_VERSION,
            policy: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        if file.format != POLICY_FORMAT {
            return Err(invalid(format!("not a policy file: format {:?}", file.format)));
        }
        if file.version != POLICY_VERSION {
            return Err(invalid(format!(
                "unsupported policy version {} (expected {POLICY_VERSION})",
                file.version
            )));
        }
        file.policy.validate()?;
        Ok(file.policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let d = self.n_users * self.n_users;
        if self.layers.is_empty() || self.layers[0].inputs != d {
            return Err(invalid("first layer does not match n_users^2 inputs"));
        }
        if self.layers.last().map(|l| l.outputs) != Some(self.n_users) {
            return Err(invalid("last layer does not match n_users outputs"));
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(invalid("layer widths do not chain"));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(invalid("layer tensor sizes are inconsistent"));
            }
        }
        if self.input_mean.len() != d || self.input_std.len() != d {
            return Err(invalid("normalization statistics have the wrong length"));
        }
        if self.params().iter().any(|x| !x.is_finite()) {
            return Err(invalid("policy parameters must be finite"));
        }
        Ok(())
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl UraPolicy for MlpPolicy {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name(),
            "p_max": self.p_max,
            "widths": self.widths(),
            "training": self.descriptor,
        })
    }

    fn p_max(&self) -> f64 {
        self.p_max
    }

    fn allocate(&self, gains: &GainMatrix, _xi: &UsvSample, _noise: f64) -> Result<Vec<f64>> {
        self.forward(&self.features(gains)?)
    }
}

/// Feed-forward evaluation on a masked channel (before the off-branch).
pub fn mlp_forward(policy: &MlpPolicy, h_masked: &ChannelMatrix) -> Result<PowerVector> {
    let p = policy.forward(&policy.features(&h_masked.power_gains())?)?;
    PowerVector::new(p, policy.p_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub stepsize: f64,
    /// Global gradient norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub mode: KappaMode,
    pub seed: u64,
    pub noise: f64,
    /// Samples used to fit the input z-score before the first step.
    pub calibration_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 64,
            stepsize: 1e-3,
            clip_norm: 10.0,
            mode: KappaMode::NonDiverse,
            seed: 0,
            noise: 10f64.powf(-1.5),
            calibration_samples: 512,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub batch_mean_su: Vec<f64>,
}

fn draw_xi(n: usize, kappa: f64, rng: &mut ChaCha8Rng) -> UsvSample {
    UsvSample::new((0..n).map(|_| rng.random::<f64>() < kappa).collect())
}

/// Stochastic gradient ascent on the batch-mean sum utility.
/// `sampler` draws one channel from the training distribution.
pub fn mlp_train<S>(
    policy: &mut MlpPolicy,
    sampler: S,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainTrace>
where
    S: Fn(&mut ChaCha8Rng) -> Result<GainMatrix> + Sync + Send,
{
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(invalid("training needs batch >= 1 and steps >= 1"));
    }
    if !(cfg.noise > 0.0) || !(cfg.stepsize > 0.0) {
        return Err(invalid("noise and stepsize must be positive"));
    }
    let n = policy.n_users;
    if cfg.calibration_samples > 0 {
        let feats = exec.try_map(cfg.calibration_samples, |j| {
            let mut rng = substream(cfg.seed, &[domain::TRAIN, u64::MAX, j as u64]);
            policy.features(&sampler(&mut rng)?)
        })?;
        policy.calibrate(&feats)?;
    }
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let frozen = &*policy;
        let per_sample = exec.try_map(cfg.batch, |j| {
            let mut rng = substream(cfg.seed, &[domain::TRAIN, step as u64, j as u64]);
            let g = sampler(&mut rng)?;
            let kappa = cfg.mode.draw(&mut rng);
            let xi = draw_xi(n, kappa, &mut rng);
            frozen.sample_utility_grad(&g, &xi, cfg.noise)
        })?;
        let mut grad = vec![0.0; policy.n_params()];
        let mut su = 0.0;
        for (s, g) in &per_sample {
            su += s;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
        let b = cfg.batch as f64;
        su /= b;
        if !su.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: batch-mean sum utility {su}"
            )));
        }
        grad.iter_mut().for_each(|x| *x /= b);
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
        }
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let mut theta = policy.params();
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += cfg.stepsize * scale * g;
        }
        policy.set_params(&theta)?;
        trace.batch_mean_su.push(su);
    }
    policy.descriptor = TrainingDescriptor {
        mode: Some(cfg.mode),
        steps: cfg.steps,
        batch: cfg.batch,
        stepsize: cfg.stepsize,
        clip_norm: cfg.clip_norm,
        seed: cfg.seed,
        noise: cfg.noise,
        final_batch_mean_su: trace.batch_mean_su.last().copied(),
    };
    Ok(trace)
}
