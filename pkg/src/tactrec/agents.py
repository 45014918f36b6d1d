"""Classifier with a confidence gate, stochastic explorer, and their
interleaved training loop.

The discriminator maps a contact cloud to class probabilities; its top
probability gates episode termination. The explorer is an actor-critic over
the 12 discrete actions, trained with a clipped-surrogate policy objective
on a terminal reward granted when the gate fires. Both own a separate
point-set encoder.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .encoder import EncoderSpec, SaSpec, encode, init_encoder_params
from .env import (
    NoiseParams,
    obs_discriminator,
    obs_explorer,
    reset,
    step,
)
from .errors import ContractViolation, DivergenceError, InvalidArgument
from .objects import PlacementSpec


@dataclass(frozen=True)
class DiscriminatorOutput:
    probs: np.ndarray
    prediction: int
    confidence: float


def _as_output(probs: np.ndarray) -> DiscriminatorOutput:
    pred = int(np.argmax(probs))
    return DiscriminatorOutput(probs, pred, float(probs[pred]))


@dataclass(frozen=True)
class LabeledSample:
    observation: np.ndarray
    label: int


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs shared by discriminator and explorer."""

    sa1_ratio: float = 0.5
    sa1_radius: float = 0.04
    sa2_ratio: float = 0.25
    sa2_radius: float = 0.08
    max_group: int = 32
    sa1_widths: tuple = (32, 32)
    sa2_widths: tuple = (64, 64)
    global_widths: tuple = (128, 128)
    coord_scale: float = 10.0
    head_hidden: int = 64
    n_classes: int = 10
    n_actions: int = 12

    @staticmethod
    def full_scale(**kw) -> "ModelSpec":
        return ModelSpec(sa1_widths=(64, 64, 128), sa2_widths=(128, 128, 256),
                         global_widths=(256, 512, 1024), head_hidden=256, **kw)

    def encoder(self, in_features: int) -> EncoderSpec:
        return EncoderSpec(
            sa1=SaSpec(self.sa1_ratio, self.sa1_radius, self.max_group,
                       tuple(self.sa1_widths)),
            sa2=SaSpec(self.sa2_ratio, self.sa2_radius, self.max_group,
                       tuple(self.sa2_widths)),
            global_widths=tuple(self.global_widths),
            in_features=in_features,
            coord_scale=self.coord_scale,
        )

    def cls_mlp(self) -> nn.MlpSpec:
        return nn.MlpSpec((self.global_widths[-1], self.head_hidden, self.n_classes))

    def actor_mlp(self) -> nn.MlpSpec:
        return nn.MlpSpec((self.global_widths[-1], self.head_hidden, self.n_actions))

    def critic_mlp(self) -> nn.MlpSpec:
        return nn.MlpSpec((self.global_widths[-1], self.head_hidden, 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        d = dict(d)
        for k in ("sa1_widths", "sa2_widths", "global_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return ModelSpec(**d)


def init_discriminator(model: ModelSpec, rng) -> dict:
    params = init_encoder_params(model.encoder(3), rng, "enc.")
    params.update(nn.init_mlp(model.cls_mlp(), rng, "cls."))
    return params


def init_explorer(model: ModelSpec, rng) -> dict:
    params = init_encoder_params(model.encoder(4), rng, "enc.")
    params.update(nn.init_mlp(model.actor_mlp(), rng, "actor."))
    params.update(nn.init_mlp(model.critic_mlp(), rng, "critic."))
    return params


@dataclass(frozen=True)
class TrainConfig:
    confidence_threshold: float = 0.98
    max_steps: int = 2000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    rollout_steps: int = 2048
    ppo_epochs: int = 3
    minibatch: int = 64
    lr_explorer: float = 3e-4
    lr_discriminator: float = 1e-3
    disc_batch_size: int = 64
    disc_batches_per_iter: int = 4
    disc_replay: int = 4096
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    iterations: int = 40
    checkpoint_every: int = 0
    eval_every: int = 5
    eval_episodes: int = 32
    early_stop_success: float | None = None
    reward_requires_correct: bool = False

    def __post_init__(self):
        if not (0.0 < self.confidence_threshold < 1.0) \
                and self.confidence_threshold != 0.0:
            raise InvalidArgument("confidence threshold must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# inference

def discriminate(model: ModelSpec, params: dict, cloud_obs) -> DiscriminatorOutput:
    """Class distribution, top prediction, and gate confidence for a cloud."""
    feat = encode(model.encoder(3), params, cloud_obs, "enc.")
    logits = nn.mlp_forward(model.cls_mlp(), params, feat, "cls.")
    probs = np.exp(nn._d(nn.log_softmax(logits)))
    return _as_output(probs)


def explore(model: ModelSpec, params: dict, explorer_obs):
    """Action distribution and state value for an explorer observation."""
    feat = encode(model.encoder(4), params, explorer_obs, "enc.")
    logits = nn.mlp_forward(model.actor_mlp(), params, feat, "actor.")
    probs = np.exp(nn._d(nn.log_softmax(logits)))
    value = float(nn._d(nn.mlp_forward(model.critic_mlp(), params, feat,
                                       "critic.")).reshape(-1)[0])
    return probs, value


def sample_action(probs: np.ndarray, rng) -> int:
    return int(rng.choice(len(probs), p=probs / probs.sum()))


def greedy_action(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


# ---------------------------------------------------------------------------
# episodes

@dataclass
class EpisodeResult:
    object_id: int
    success: bool
    prediction: int
    confidence: float
    actions: int
    points: int
    terminated_by: str
    reward: float


def run_episode(disc_params: dict, expl_params: dict | None, state, config: TrainConfig,
                rng, model: ModelSpec, action_source=None, discriminator_fn=None,
                collector=None, trace=None) -> EpisodeResult:
    """Drive one fresh episode to termination.

    Each cycle discriminates the current cloud (cached between contacts),
    stops once confidence crosses the threshold, otherwise queries the
    explorer (or ``action_source``) and steps. ``discriminator_fn`` replaces
    the learned classifier when provided (e.g. a registration-based one).
    """
    if state.steps != 0:
        raise ContractViolation("run_episode needs a freshly reset episode")
    if discriminator_fn is None:
        def discriminator_fn(obs):
            return discriminate(model, disc_params, obs)

    max_steps = min(config.max_steps, state.max_steps)
    cloud_version = -1
    out = None
    terminated_by = None
    while True:
        if len(state.cloud) != cloud_version:
            out = discriminator_fn(obs_discriminator(state))
            cloud_version = len(state.cloud)
        if out.confidence > config.confidence_threshold:
            terminated_by = "confidence"
            break
        if state.steps >= max_steps:
            terminated_by = "timeout"
            break
        if action_source is not None:
            action = action_source(state, rng)
            probs = value = logp = None
        else:
            probs, value = explore(model, expl_params, obs_explorer(state))
            action = sample_action(probs, rng)
            logp = math.log(max(probs[action], 1e-300))
        if collector is not None:
            collector.pre_step(state, action, logp, value)
        state, events = step(state, action)
        if action_source is not None and hasattr(action_source, "observe"):
            action_source.observe(state, events)
        if collector is not None:
            collector.post_step(state, events)
        if trace is not None:
            trace.record(state.steps, action, state, events)

    success = out.prediction == state.object.id
    reward = 0.0
    if terminated_by == "confidence":
        reward = 1.0 if (success or not config.reward_requires_correct) else 0.0
    if collector is not None:
        collector.end_episode(reward)
    return EpisodeResult(
        object_id=state.object.id,
        success=success,
        prediction=out.prediction,
        confidence=out.confidence,
        actions=state.steps,
        points=len(state.cloud),
        terminated_by=terminated_by,
        reward=reward,
    )


class RolloutCollector:
    """Accumulates explorer transitions and labeled clouds across episodes."""

    def __init__(self):
        self.obs = []
        self.actions = []
        self.logps = []
        self.values = []
        self.rewards = []
        self.episode_bounds = []
        self.disc_samples = []
        self._episode_start = 0
        self._label = None
        self._pending = 0

    def start_episode(self, state):
        self._label = state.object.id
        self._episode_start = len(self.obs)
        self.disc_samples.append(LabeledSample(obs_discriminator(state), self._label))

    def pre_step(self, state, action, logp, value):
        self.obs.append(obs_explorer(state))
        self.actions.append(action)
        self.logps.append(logp)
        self.values.append(value)
        self.rewards.append(0.0)

    def post_step(self, state, events):
        if events:
            self.disc_samples.append(
                LabeledSample(obs_discriminator(state), self._label))

    def end_episode(self, reward):
        if len(self.obs) > self._episode_start:
            self.rewards[-1] = reward
        self.episode_bounds.append((self._episode_start, len(self.obs)))

    def __len__(self):
        return len(self.obs)


def compute_gae(rewards, values, bounds, gamma: float, lam: float):
    """Per-episode generalized advantage estimates with terminal bootstrap 0."""
    adv = np.zeros(len(rewards))
    for lo, hi in bounds:
        running = 0.0
        next_value = 0.0
        for t in range(hi - 1, lo - 1, -1):
            delta = rewards[t] + gamma * next_value - values[t]
            running = delta + gamma * lam * running
            adv[t] = running
            next_value = values[t]
    return adv


def clipped_surrogate(ratio, advantage, eps: float):
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A); works on Vars or floats."""
    clipped = nn.minimum(nn.maximum(ratio, 1.0 - eps), 1.0 + eps)
    return nn.minimum(nn.mul(ratio, advantage), nn.mul(clipped, advantage))


# ---------------------------------------------------------------------------
# updates

def ppo_update(model: ModelSpec, expl_params: dict, collector: RolloutCollector,
               config: TrainConfig, opt_state: nn.AdamState, rng):
    """Clipped-surrogate policy update with value regression and entropy bonus."""
    n = len(collector)
    if n == 0:
        return expl_params, {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    values = np.asarray(collector.values)
    adv = compute_gae(collector.rewards, values, collector.episode_bounds,
                      config.gamma, config.gae_lambda)
    returns = adv + values
    adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)

    enc_spec = model.encoder(4)
    actor_spec = model.actor_mlp()
    critic_spec = model.critic_mlp()
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "batches": 0}

    for _ in range(config.ppo_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch):
            idx = order[lo:lo + config.minibatch]
            if len(idx) == 0:
                continue
            total = {k: np.zeros_like(v) for k, v in expl_params.items()}
            p_sum = v_sum = e_sum = 0.0
            for i in idx:
                obs = collector.obs[i]
                act = collector.actions[i]
                logp_old = collector.logps[i]
                a_i = adv_n[i]
                ret_i = returns[i]

                pvars = nn.make_vars(expl_params)
                feat = encode(enc_spec, pvars, obs, "enc.")
                logits = nn.mlp_forward(actor_spec, pvars, feat, "actor.")
                ls = nn.log_softmax(logits)
                ratio = nn.exp(nn.sub(nn.pick(ls, act), logp_old))
                policy = nn.neg(clipped_surrogate(ratio, a_i, config.clip_eps))
                entropy = nn.neg(nn.vsum(nn.mul(nn.exp(ls), ls)))
                value = nn.pick(nn.mlp_forward(critic_spec, pvars, feat, "critic."), 0)
                vloss = nn.square(nn.sub(value, ret_i))
                loss = nn.add(
                    nn.add(policy, nn.mul(config.value_coef, vloss)),
                    nn.mul(-config.entropy_coef, entropy),
                )
                nn.backward(loss)
                for k, vv in pvars.items():
                    if vv.grad is not None:
                        total[k] += vv.grad
                p_sum += float(nn._d(policy))
                v_sum += float(nn._d(vloss))
                e_sum += float(nn._d(entropy))
            scale = 1.0 / len(idx)
            grads = {k: g * scale for k, g in total.items()}
            if any(not np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError("non-finite policy gradient")
            expl_params = nn.adam_step(expl_params, grads, opt_state,
                                       config.lr_explorer)
            stats["policy_loss"] += p_sum * scale
            stats["value_loss"] += v_sum * scale
            stats["entropy"] += e_sum * scale
            stats["batches"] += 1
    b = max(stats.pop("batches"), 1)
    return expl_params, {k: v / b for k, v in stats.items()}


def train_discriminator(model: ModelSpec, params: dict, samples, opt_state,
                        lr: float):
    """One optimizer pass of cross-entropy over a batch of labeled clouds."""
    if not samples:
        raise ContractViolation("discriminator batch must be non-empty")
    enc_spec = model.encoder(3)
    cls_spec = model.cls_mlp()
    total = {k: np.zeros_like(v) for k, v in params.items()}
    loss_sum = 0.0
    correct = 0
    for s in samples:
        pvars = nn.make_vars(params)
        feat = encode(enc_spec, pvars, s.observation, "enc.")
        logits = nn.mlp_forward(cls_spec, pvars, feat, "cls.")
        loss = nn.cross_entropy(logits, s.label)
        nn.backward(loss)
        for k, vv in pvars.items():
            if vv.grad is not None:
                total[k] += vv.grad
        loss_sum += float(nn._d(loss))
        correct += int(np.argmax(nn._d(logits)) == s.label)
    scale = 1.0 / len(samples)
    grads = {k: g * scale for k, g in total.items()}
    if not np.isfinite(loss_sum):
        raise DivergenceError("non-finite discriminator loss")
    params = nn.adam_step(params, grads, opt_state, lr)
    return params, loss_sum * scale, correct / len(samples)


# ---------------------------------------------------------------------------
# co-training

LOG_COLUMNS = ("iteration", "episodes", "success_rate", "mean_actions",
               "mean_points", "policy_loss", "value_loss", "disc_loss",
               "disc_accuracy")


def collect_rollout(model, disc_params, expl_params, catalog, object_ids, config,
                    noise, placement, rng, discriminator_fn=None):
    """Whole explorer-driven episodes until the step budget is crossed."""
    collector = RolloutCollector()
    results = []
    while len(collector) < config.rollout_steps:
        oid = int(object_ids[rng.integers(0, len(object_ids))])
        state = reset(catalog, oid, placement, noise, rng, max_steps=config.max_steps)
        collector.start_episode(state)
        res = run_episode(disc_params, expl_params, state, config, rng, model,
                          discriminator_fn=discriminator_fn, collector=collector)
        results.append(res)
    return collector, results


def _episode_stats(results):
    if not results:
        return 0.0, 0.0, 0.0, 0.0
    succ = sum(r.success for r in results) / len(results)
    acts = sum(r.actions for r in results) / len(results)
    pts = sum(r.points for r in results) / len(results)
    fired = sum(r.terminated_by != "timeout" for r in results) / len(results)
    return succ, acts, pts, fired


def _quick_eval(model, disc_params, expl_params, catalog, object_ids, config, rng,
                noise, placement, episodes, action_source_factory=None,
                discriminator_fn=None):
    results = []
    for _ in range(episodes):
        oid = int(object_ids[rng.integers(0, len(object_ids))])
        state = reset(catalog, oid, placement, noise, rng, max_steps=config.max_steps)
        source = action_source_factory(state, rng) if action_source_factory else None
        results.append(run_episode(disc_params, expl_params, state, config, rng,
                                   model, action_source=source,
                                   discriminator_fn=discriminator_fn))
    return _episode_stats(results)


def cotrain(catalog, config: TrainConfig, rng, model: ModelSpec | None = None,
            object_ids=None, noise: NoiseParams | None = None,
            placement: PlacementSpec | None = None, checkpoint_fn=None,
            log_fn=None):
    """Interleaved training: collect episodes, update the explorer with the
    policy-gradient objective, then fit the discriminator on the labeled
    clouds those episodes produced.

    Returns (disc_params, expl_params, log_rows).
    """
    model = model or ModelSpec(n_classes=len(catalog))
    noise = noise or NoiseParams()
    placement = placement or PlacementSpec()
    object_ids = list(object_ids) if object_ids is not None else \
        [o.id for o in catalog]

    disc_params = init_discriminator(model, rng)
    expl_params = init_explorer(model, rng)
    disc_opt = nn.AdamState()
    expl_opt = nn.AdamState()
    log_rows = []
    replay: list[LabeledSample] = []

    for it in range(config.iterations):
        t0 = time.perf_counter()
        collector, results = collect_rollout(
            model, disc_params, expl_params, catalog, object_ids, config,
            noise, placement, rng)
        expl_params, ppo_stats = ppo_update(model, expl_params, collector,
                                            config, expl_opt, rng)
        disc_loss = disc_acc = 0.0
        replay.extend(collector.disc_samples)
        if len(replay) > config.disc_replay:
            replay = replay[-config.disc_replay:]
        if replay:
            n_batches = 0
            for _ in range(config.disc_batches_per_iter):
                pickidx = rng.permutation(len(replay))[:config.disc_batch_size]
                batch = [replay[i] for i in pickidx]
                disc_params, loss, acc = train_discriminator(
                    model, disc_params, batch, disc_opt, config.lr_discriminator)
                disc_loss += loss
                disc_acc += acc
                n_batches += 1
            disc_loss /= n_batches
            disc_acc /= n_batches

        succ, acts, pts, _ = _episode_stats(results)
        row = {
            "iteration": it,
            "episodes": len(results),
            "success_rate": succ,
            "mean_actions": acts,
            "mean_points": pts,
            "policy_loss": ppo_stats["policy_loss"],
            "value_loss": ppo_stats["value_loss"],
            "disc_loss": disc_loss,
            "disc_accuracy": disc_acc,
        }
        log_rows.append(row)
        if log_fn is not None:
            log_fn(row, time.perf_counter() - t0)
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 \
                and checkpoint_fn is not None:
            checkpoint_fn(it, disc_params, expl_params)
        if config.early_stop_success is not None and config.eval_every \
                and (it + 1) % config.eval_every == 0:
            es, ea, _, fired = _quick_eval(model, disc_params, expl_params, catalog,
                                           object_ids, config, rng, noise,
                                           placement, config.eval_episodes)
            if log_fn is not None:
                log_fn({"iteration": it, "eval_success": es, "eval_actions": ea,
                        "eval_gate_rate": fired}, 0.0)
            # the gate must actually fire, not just argmax correctly at timeout
            if es >= config.early_stop_success and fired >= config.early_stop_success:
                break
    return disc_params, expl_params, log_rows


def train_discriminator_with_source(catalog, config: TrainConfig, rng,
                                    action_source_factory, model: ModelSpec | None = None,
                                    object_ids=None, noise: NoiseParams | None = None,
                                    placement: PlacementSpec | None = None,
                                    log_fn=None):
    """Fit only the discriminator, with episodes driven by a fixed heuristic.

    ``action_source_factory(state, rng, disc_params, model)`` builds one
    per-episode action source; heuristics that consult the classifier (the
    entropy-reduction one) read the current parameters through it.
    """
    model = model or ModelSpec(n_classes=len(catalog))
    noise = noise or NoiseParams()
    placement = placement or PlacementSpec()
    object_ids = list(object_ids) if object_ids is not None else \
        [o.id for o in catalog]

    disc_params = init_discriminator(model, rng)
    disc_opt = nn.AdamState()
    log_rows = []
    replay: list[LabeledSample] = []
    for it in range(config.iterations):
        collector = RolloutCollector()
        results = []
        for _ in range(max(4, config.rollout_steps // max(config.max_steps, 64))):
            oid = int(object_ids[rng.integers(0, len(object_ids))])
            state = reset(catalog, oid, placement, noise, rng,
                          max_steps=config.max_steps)
            collector.start_episode(state)
            source = action_source_factory(state, rng, disc_params, model)
            results.append(run_episode(disc_params, None, state, config, rng, model,
                                       action_source=source, collector=collector))
        replay.extend(collector.disc_samples)
        if len(replay) > config.disc_replay:
            replay = replay[-config.disc_replay:]
        disc_loss = disc_acc = 0.0
        n_batches = 0
        for _ in range(config.disc_batches_per_iter):
            pickidx = rng.permutation(len(replay))[:config.disc_batch_size]
            batch = [replay[i] for i in pickidx]
            disc_params, loss, acc = train_discriminator(
                model, disc_params, batch, disc_opt, config.lr_discriminator)
            disc_loss += loss
            disc_acc += acc
            n_batches += 1
        succ, acts, pts, _ = _episode_stats(results)
        row = {
            "iteration": it, "episodes": len(results), "success_rate": succ,
            "mean_actions": acts, "mean_points": pts, "policy_loss": 0.0,
            "value_loss": 0.0, "disc_loss": disc_loss / n_batches,
            "disc_accuracy": disc_acc / n_batches,
        }
        log_rows.append(row)
        if log_fn is not None:
            log_fn(row, 0.0)
    return disc_params, log_rows
