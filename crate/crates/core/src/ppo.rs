//! Clipped PPO with GAE, periodic resampling of training instances and
//! greedy validation that keeps the best parameters.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{validate_schedule, FeatureBundle, SimState};
use crate::error::{Error, Result};
use crate::instance::{generate_instance, FjspInstance, GenSpec, Time};
use crate::policy::{policy_rollout, select_action, DecodeMode, Policy};
use crate::tensor::{Adam, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub envs_per_iter: usize,
    pub resample_every: usize,
    pub validate_every: usize,
    pub val_size: usize,
    pub lr: f64,
    /// Learning rate from iteration `iterations / 2` on.
    pub lr_final: f64,
    pub clip: f64,
    pub epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            envs_per_iter: 20,
            resample_every: 20,
            validate_every: 10,
            val_size: 100,
            lr: 1e-4,
            lr_final: 1e-5,
            clip: 0.2,
            epochs: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gamma: 1.0,
            lambda: 0.98,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.iterations,
            self.envs_per_iter,
            self.resample_every,
            self.validate_every,
            self.val_size,
            self.epochs,
        ];
        let rates = [self.lr, self.lr_final, self.clip, self.max_grad_norm];
        if counts.contains(&0) || rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidSpec(
                "training counts, rates, clip and gradient bound must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidSpec("gamma and lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration >= self.iterations / 2 {
            self.lr_final
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    pub features: FeatureBundle,
    pub action: usize,
    pub log_prob: f64,
    /// Integer reward divided by the instance scale.
    pub reward: f64,
    pub raw_reward: Time,
    pub value: f64,
}

/// One sampled episode; the last step is terminal.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub initial_estimate: Time,
    pub makespan: Time,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_raw_reward(&self) -> Time {
        self.steps.iter().map(|s| s.raw_reward).sum()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Sample one episode per instance with frozen parameters.
pub fn collect_rollouts(
    policy: &Policy,
    envs: &[Arc<FjspInstance>],
    rng: &mut impl Rng,
) -> Result<Vec<Trajectory>> {
    envs.iter()
        .map(|inst| {
            let mut state = SimState::reset(inst.clone());
            let initial_estimate = state.makespan_estimate();
            let mut steps = Vec::with_capacity(inst.total_ops());
            while !state.is_done() {
                let features = state.features();
                let (logp, value) = policy.forward_log(&features)?;
                let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
                let action = select_action(&probs, DecodeMode::Sample, rng);
                let raw = state.step(features.pairs[action])?;
                steps.push(Step {
                    log_prob: logp[action],
                    reward: raw as f64 / state.scale(),
                    raw_reward: raw,
                    value,
                    action,
                    features,
                });
            }
            let sched = state.to_schedule()?;
            let violations = validate_schedule(inst, &sched);
            if !violations.is_empty() {
                return Err(Error::Contract(format!(
                    "rollout produced an infeasible schedule: {violations:?}"
                )));
            }
            Ok(Trajectory {
                steps,
                initial_estimate,
                makespan: sched.makespan,
            })
        })
        .collect()
}

/// Generalized advantage estimates and returns for one terminal episode.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values differ in length");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shift and scale to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// A transition ready for the PPO loss.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: FeatureBundle,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// GAE per trajectory, then batch-wide advantage normalization.
pub fn build_batch(trajs: &[Trajectory], gamma: f64, lambda: f64) -> Vec<Sample> {
    let mut samples = Vec::new();
    let mut advs = Vec::new();
    for t in trajs {
        let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = t.steps.iter().map(|s| s.value).collect();
        let (adv, ret) = compute_gae(&rewards, &values, gamma, lambda);
        for (s, r) in t.steps.iter().zip(ret) {
            samples.push(Sample {
                features: s.features.clone(),
                action: s.action,
                old_log_prob: s.log_prob,
                advantage: 0.0,
                ret: r,
            });
        }
        advs.extend(adv);
    }
    normalize_advantages(&mut advs);
    for (s, a) in samples.iter_mut().zip(advs) {
        s.advantage = a;
    }
    samples
}

/// Batch means for one optimisation epoch, measured before its step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
}

/// `cfg.epochs` full-batch gradient steps on the clipped surrogate.
pub fn ppo_update(
    policy: &mut Policy,
    opt: &mut Adam,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<LossStats>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty PPO batch".into()));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut out = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        policy.params.zero_grad();
        let mut st = LossStats::default();
        for (i, s) in batch.iter().enumerate() {
            let mut g = Graph::new(&policy.params);
            let fv = policy.forward_graph(&mut g, &s.features)?;
            let n = s.features.n_pairs();
            let logp = g.gather_rows(fv.log_probs, &[s.action])?;
            let old = g.input(1, 1, vec![s.old_log_prob])?;
            let diff = g.sub(logp, old)?;
            let ratio = g.exp(diff);
            let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let surr1 = g.scale(ratio, s.advantage);
            let surr2 = g.scale(clipped, s.advantage);
            let surr = g.minimum(surr1, surr2)?;
            let actor = g.scale(surr, -1.0);

            let ret = g.input(1, 1, vec![s.ret])?;
            let err = g.sub(fv.value, ret)?;
            let vloss = g.mul(err, err)?;

            let probs = g.exp(fv.log_probs);
            let plogp = g.mul(probs, fv.log_probs)?;
            let neg_ent = g.sum(plogp);

            let a = g.scale(actor, inv_n);
            let v = g.scale(vloss, cfg.value_coef * inv_n);
            let e = g.scale(neg_ent, cfg.entropy_coef * inv_n);
            let av = g.add(a, v)?;
            let loss = g.add(av, e)?;

            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "PPO loss on sample {i}: ratio {}, value {}, return {}, advantage {}, {n} candidates",
                    g.scalar(ratio),
                    g.scalar(fv.value),
                    s.ret,
                    s.advantage
                )));
            }
            let r = g.scalar(ratio);
            st.actor_loss += g.scalar(actor) * inv_n;
            st.value_loss += g.scalar(vloss) * inv_n;
            st.entropy -= g.scalar(neg_ent) * inv_n;
            st.total_loss += lv;
            if (r - 1.0).abs() > cfg.clip {
                st.clip_fraction += inv_n;
            }
            let grads = g.backward(loss)?;
            drop(g);
            policy.params.accumulate_grads(&grads);
        }
        st.grad_norm = policy.params.clip_grad_norm(cfg.max_grad_norm);
        if !st.grad_norm.is_finite() {
            return Err(Error::NonFinite("PPO gradient norm".into()));
        }
        opt.step(&mut policy.params);
        out.push(st);
    }
    Ok(out)
}

/// Mean greedy makespan over `val`.
pub fn validate(policy: &Policy, val: &[Arc<FjspInstance>]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Contract("empty validation set".into()));
    }
    // greedy decoding never draws from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for inst in val {
        total += policy_rollout(policy, inst.clone(), DecodeMode::Greedy, &mut rng)?.makespan as f64;
    }
    Ok(total / val.len() as f64)
}

/// Validation instances: seeds `base.seed, base.seed + 1, ...`.
pub fn validation_set(base: &GenSpec, size: usize) -> Result<Vec<Arc<FjspInstance>>> {
    (0..size as u64)
        .map(|i| generate_instance(&base.with_seed(base.seed.wrapping_add(i))).map(Arc::new))
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub mean_return: f64,
    pub mean_makespan: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub val_makespan: Option<f64>,
    pub best_val_makespan: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub initial_val_makespan: f64,
    pub best_val_makespan: f64,
    pub records: Vec<LogRecord>,
}

/// Full training loop. The untrained network is validated first and saved
/// as the initial best; later validations overwrite `checkpoint` only on
/// strict improvement. `policy` holds the final (not best) parameters on
/// return.
pub fn train(
    cfg: &TrainConfig,
    policy: &mut Policy,
    train_spec: &GenSpec,
    val_spec: &GenSpec,
    checkpoint: &Path,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    cfg.validate()?;
    train_spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val = validation_set(val_spec, cfg.val_size)?;
    let initial = validate(policy, &val)?;
    let mut best = initial;
    policy.save(checkpoint)?;

    let mut opt = Adam::new(cfg.lr);
    let mut envs: Vec<Arc<FjspInstance>> = Vec::new();
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it % cfg.resample_every == 0 {
            envs = (0..cfg.envs_per_iter)
                .map(|_| generate_instance(&train_spec.with_seed(rng.gen())).map(Arc::new))
                .collect::<Result<_>>()?;
        }
        opt.lr = cfg.lr_at(it);
        let trajs = collect_rollouts(policy, &envs, &mut rng)?;
        let batch = build_batch(&trajs, cfg.gamma, cfg.lambda);
        let stats = ppo_update(policy, &mut opt, &batch, cfg)?;

        let val_makespan = if (it + 1) % cfg.validate_every == 0 {
            let v = validate(policy, &val)?;
            if v < best {
                best = v;
                policy.save(checkpoint)?;
            }
            Some(v)
        } else {
            None
        };
        let k = stats.len() as f64;
        let mean = |f: fn(&LossStats) -> f64| stats.iter().map(f).sum::<f64>() / k;
        let n = trajs.len() as f64;
        let rec = LogRecord {
            iteration: it + 1,
            lr: opt.lr,
            mean_return: trajs.iter().map(Trajectory::total_reward).sum::<f64>() / n,
            mean_makespan: trajs.iter().map(|t| t.makespan as f64).sum::<f64>() / n,
            actor_loss: mean(|s| s.actor_loss),
            value_loss: mean(|s| s.value_loss),
            entropy: mean(|s| s.entropy),
            clip_fraction: mean(|s| s.clip_fraction),
            grad_norm: mean(|s| s.grad_norm),
            val_makespan,
            best_val_makespan: best,
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        records.push(rec);
    }
    Ok(TrainSummary {
        checkpoint: checkpoint.to_path_buf(),
        initial_val_makespan: initial,
        best_val_makespan: best,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::parse_instance;
    use crate::policy::PolicyConfig;

    fn tiny_policy() -> Policy {
        let mut cfg = PolicyConfig::with_dims(8, 2, 4);
        cfg.seed = 11;
        Policy::new(cfg).unwrap()
    }

    #[test]
    fn gae_hand_cases() {
        let (a, r) = compute_gae(&[1.0, 1.0], &[0.5, 0.5], 1.0, 0.9);
        assert!((a[0] - 1.45).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12);
        assert!((r[0] - 1.95).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
        // lambda = 0 gives one-step residuals
        let (a, _) = compute_gae(&[2.0, -1.0, 3.0], &[0.1, 0.4, -0.2], 0.9, 0.0);
        let d = [2.0 + 0.9 * 0.4 - 0.1, -1.0 + 0.9 * -0.2 - 0.4, 3.0 + 0.2];
        for (x, y) in a.iter().zip(d) {
            assert!((x - y).abs() < 1e-12);
        }
        // gamma = lambda = 1 with zero values gives reward-to-go
        let (a, _) = compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], 1.0, 1.0);
        assert_eq!(a, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn normalization_keeps_order() {
        let mut a = vec![3.0, -1.0, 0.5, 10.0];
        normalize_advantages(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert_eq!(
            a.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0,
            3
        );
    }

    #[test]
    fn single_op_rollout_and_validation() {
        let p = tiny_policy();
        let inst = Arc::new(parse_instance("1 1\n1 1 1 5\n").unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = collect_rollouts(&p, std::slice::from_ref(&inst), &mut rng).unwrap();
        assert_eq!(t[0].len(), 1);
        assert_eq!(t[0].total_raw_reward(), 0);
        assert_eq!(t[0].makespan, 5);
        assert_eq!(validate(&p, &[inst]).unwrap(), 5.0);
    }

    #[test]
    fn first_epoch_ratios_are_one() {
        let mut p = tiny_policy();
        let spec = GenSpec::new(3, 2, 4);
        let envs: Vec<_> = (0..2)
            .map(|i| Arc::new(generate_instance(&spec.with_seed(i)).unwrap()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trajs = collect_rollouts(&p, &envs, &mut rng).unwrap();
        let batch = build_batch(&trajs, 1.0, 0.98);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut opt = Adam::new(1e-3);
        let stats = ppo_update(&mut p, &mut opt, &batch, &cfg).unwrap();
        assert_eq!(stats[0].clip_fraction, 0.0);
        // mean normalised advantage is zero, so the first actor loss is too
        assert!(stats[0].actor_loss.abs() < 1e-9);
        assert_eq!(stats.len(), 2);
    }

    #[test]
    fn single_transition_loss_by_hand() {
        let mut p = tiny_policy();
        let inst = Arc::new(parse_instance("2 2\n1 2 1 3 2 4\n1 1 2 2\n").unwrap());
        let f = SimState::reset(inst).features();
        let (probs, value) = p.forward(&f).unwrap();
        let action = 1;
        let adv = 0.7;
        let ret = 2.5;
        // the stored log-prob makes the ratio 1.5, beyond the clip range
        let old = probs[action].ln() - 1.5f64.ln();
        let batch = vec![Sample {
            features: f,
            action,
            old_log_prob: old,
            advantage: adv,
            ret,
        }];
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let stats = ppo_update(&mut p, &mut Adam::new(1e-4), &batch, &cfg).unwrap();
        let entropy: f64 = -probs.iter().map(|q| q * q.ln()).sum::<f64>();
        let expect = -(1.5 * adv).min(1.2 * adv) + 0.5 * (value - ret).powi(2) - 0.01 * entropy;
        assert!((stats[0].total_loss - expect).abs() < 1e-10);
        assert_eq!(stats[0].clip_fraction, 1.0);
        assert!((stats[0].entropy - entropy).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_gives_zero_actor_loss() {
        let mut p = tiny_policy();
        let inst = Arc::new(parse_instance("2 2\n1 2 1 3 2 4\n1 1 2 2\n").unwrap());
        let f = SimState::reset(inst).features();
        let (probs, _) = p.forward(&f).unwrap();
        let batch = vec![Sample {
            features: f,
            action: 0,
            old_log_prob: probs[0].ln(),
            advantage: 0.0,
            ret: 0.0,
        }];
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let s = ppo_update(&mut p, &mut Adam::new(1e-4), &batch, &cfg).unwrap();
        assert_eq!(s[0].actor_loss, 0.0);
    }

    #[test]
    fn smoke_train_on_single_op() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("p.ckpt");
        let mut p = tiny_policy();
        let spec = GenSpec {
            ops_per_job: 1..=1,
            ..GenSpec::new(1, 1, 0)
        };
        let cfg = TrainConfig {
            iterations: 1,
            envs_per_iter: 1,
            val_size: 1,
            validate_every: 1,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let s = train(&cfg, &mut p, &spec, &spec, &ck, &mut log).unwrap();
        assert!(ck.exists());
        assert_eq!(s.records.len(), 1);
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 1);
        assert!(Policy::load(&ck).is_ok());
    }
}
