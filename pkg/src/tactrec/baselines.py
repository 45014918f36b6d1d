"""Comparison methods: unexplored-pose random walk, entropy-reduction action
selection, horizontal contour following, rigid-registration recognition, and
the single-policy agent with merged move/predict actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import nn
from .agents import (
    DiscriminatorOutput,
    ModelSpec,
    RolloutCollector,
    TrainConfig,
    _as_output,
    _episode_stats,
    discriminate,
    explore,
    ppo_update,
    sample_action,
)
from .encoder import init_encoder_params
from .env import (
    NoiseParams,
    candidate_actions,
    obs_explorer,
    reset,
    step,
)
from .errors import ContractViolation, InvalidArgument
from .geometry import apply_action, action_displacement, opposite_action
from .objects import PlacementSpec


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats; zero entries contribute nothing."""
    p = np.asarray(probs, dtype=float)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# not-go-back

def not_go_back_action(state, visited, rng) -> int:
    """Uniform choice among in-bounds actions reaching an unvisited lattice
    pose; falls back to uniform over all in-bounds actions."""
    cands = candidate_actions(state, unexplored_only=True)
    if not cands:
        cands = candidate_actions(state, unexplored_only=False)
    if not cands:
        raise ContractViolation("no in-bounds action available")
    return int(cands[rng.integers(0, len(cands))])


class NotGoBack:
    """Per-episode wrapper so the trainer can treat heuristics uniformly."""

    def __call__(self, state, rng):
        return not_go_back_action(state, state.visited_poses, rng)


# ---------------------------------------------------------------------------
# info-gain

def info_gain_action(state, visited, disc_params, model: ModelSpec, rng=None,
                     discriminator_fn=None) -> int:
    """Pick the unexplored in-bounds action whose hypothesized contact most
    reduces the class-distribution entropy.

    The hypothesized contact sits at the fingertip reference point of the
    candidate pose, its normal opposing the finger pointing axis. Since the
    no-contact branch leaves the distribution unchanged, maximizing expected
    entropy drop reduces to minimizing the contact-branch entropy; ties take
    the lowest action code.
    """
    if discriminator_fn is None:
        def discriminator_fn(obs):
            return discriminate(model, disc_params, obs)

    cands = candidate_actions(state, unexplored_only=True)
    if not cands:
        cands = candidate_actions(state, unexplored_only=False)
        if not cands:
            raise ContractViolation("no in-bounds action available")
        if rng is None:
            return int(cands[0])
        return int(cands[rng.integers(0, len(cands))])

    base = np.empty((len(state.cloud), 6))
    for i, ev in enumerate(state.cloud):
        base[i, :3] = ev.position
        base[i, 3:] = ev.normal

    best_a = None
    best_h = math.inf
    for a in cands:
        target = apply_action(state.finger_pose, a)
        hyp_pos = target.position
        hyp_n = -state.finger.pointing_axis_world(target)
        row = np.concatenate([hyp_pos, hyp_n])[None, :]
        out = discriminator_fn(np.vstack([base, row]))
        h = entropy(out.probs)
        if h < best_h:  # strict: ties keep the lowest action code
            best_h = h
            best_a = a
    return int(best_a)


class InfoGain:
    def __init__(self, disc_params_ref, model: ModelSpec):
        self._params = disc_params_ref
        self._model = model

    def __call__(self, state, rng):
        return info_gain_action(state, state.visited_poses, self._params(),
                                self._model, rng)


# ---------------------------------------------------------------------------
# edge-follower

_TRANSLATIONS = tuple(range(6))
_ROTATIONS = tuple(range(6, 12))


@dataclass
class EdgeFollowerMemory:
    contour_z: float | None = None
    seed_z: float | None = None
    last_normal: np.ndarray | None = None
    last_contacted: bool = False
    last_position: np.ndarray | None = None
    last_action: int | None = None
    stuck: bool = False
    escape_lateral: int = 0  # +x
    wedge_count: int = 0
    dir_sign: float = 1.0
    drought: int = 0   # steps since the last contact
    hop: int = 0       # post-wedge steps that ignore the height rule
    recover: int = 0   # remaining center-seeking steps after losing the surface


class EdgeFollower:
    """Deterministic horizontal contour tracer.

    After the top-down seed contact it sidesteps and descends until a side
    contact fixes the contour height, then alternates tangent moves (contact
    held) with approach moves (contact lost), keeping the fingertip at the
    contour height and tilting its base away from the surface when wedged.
    """

    def __init__(self, state):
        self.mem = EdgeFollowerMemory()
        if state.cloud:
            ev = state.cloud[-1]
            self.mem.last_normal = np.asarray(ev.normal, dtype=float)
            self.mem.last_contacted = True
            self.mem.seed_z = float(ev.position[2])
            self._maybe_fix_contour(state, self.mem.last_normal)
        self.mem.last_position = state.finger_pose.position.copy()

    def _maybe_fix_contour(self, state, normal):
        # rim grazes give shallow normals well before a flank is reached
        if self.mem.contour_z is None and math.hypot(normal[0], normal[1]) > 0.35:
            self.mem.contour_z = float(state.finger_pose.position[2])

    @staticmethod
    def _best_translation(state, direction, avoid_normal=None, forbidden=()) -> int:
        """In-bounds translation best aligned with ``direction``; moves that
        press into ``avoid_normal`` are excluded unless nothing else remains."""
        scored = []
        for a in _TRANSLATIONS:
            if a in forbidden:
                continue
            target = apply_action(state.finger_pose, a)
            if not state.workspace.contains(target.position):
                continue
            d = action_displacement(a)
            d = d / np.linalg.norm(d)
            presses = avoid_normal is not None and float(d @ avoid_normal) < -0.1
            scored.append((presses, float(d @ direction), a))
        if not scored:
            return 0
        free = [s for s in scored if not s[0]] or scored
        best = max(free, key=lambda s: (s[1], -s[2]))
        return best[2]

    def _tilt_away(self, state, normal) -> int:
        # rotation moving the mounting base along the contact normal
        base_local = np.array([0.0, 0.0, state.finger.total_length])
        base_now = state.finger_pose.transform_point(base_local)
        best_a, best_score = _ROTATIONS[0], -math.inf
        for a in _ROTATIONS:
            moved = apply_action(state.finger_pose, a).transform_point(base_local)
            score = float((moved - base_now) @ normal)
            if score > best_score:
                best_score = score
                best_a = a
        return best_a

    def _toward_center(self, state):
        direction = -state.finger_pose.position.copy()
        direction[2] = 0.0
        ln = np.linalg.norm(direction)
        if ln < 1e-9:
            return None
        return self._best_translation(state, direction / ln)

    def _choose(self, state) -> int:
        mem = self.mem
        if mem.last_normal is None:
            return 5  # descend until anything is touched
        if mem.wedge_count >= 6:
            # dead end: lift clear and hop sideways before resuming; in
            # contour mode also reverse the walk direction
            if mem.contour_z is not None:
                mem.dir_sign = -mem.dir_sign
            else:
                mem.escape_lateral = (mem.escape_lateral + 1) % 4
            mem.wedge_count = 0
            mem.hop = 2
            return 4
        if mem.contour_z is None:
            # escape the top face: sidestep while touching, descend when free;
            # having fallen past the rim band, steer back over the center
            if mem.last_contacted:
                return (0, 1, 2, 3)[mem.escape_lateral]
            apex_z = float(state.finger_pose.position[2])
            if mem.seed_z is not None and apex_z < mem.seed_z - 0.02:
                back = self._toward_center(state)
                if back is not None:
                    return back
            return 5
        if mem.drought >= 12 and mem.recover == 0:
            # lost the surface entirely (typically at a workspace wall)
            mem.recover = 30
        if mem.recover > 0:
            # steer back over the center until something is touched again
            mem.recover -= 1
            back = self._toward_center(state)
            if back is not None:
                return back
        if mem.hop > 0:
            mem.hop -= 1
            n = mem.last_normal
            t = mem.dir_sign * np.array([-n[1], n[0], 0.0])
            ln = np.linalg.norm(t)
            if ln > 1e-9:
                return self._best_translation(state, t / ln, avoid_normal=n)
        dz = float(state.finger_pose.position[2]) - mem.contour_z
        if dz > 0.005:
            return 5
        if dz < -0.005:
            return 4
        if mem.stuck:
            return self._tilt_away(state, mem.last_normal)
        n = mem.last_normal
        t = mem.dir_sign * np.array([-n[1], n[0], 0.0])  # z x n, oriented
        ln = np.linalg.norm(t)
        if ln < 1e-9:
            return (0, 1, 2, 3)[mem.escape_lateral]
        t = t / ln
        if mem.last_contacted:
            return self._best_translation(state, t, avoid_normal=n)
        # contact lost: press back in along the horizontal surface normal,
        # never undoing the previous move (that pair would orbit in place)
        n_h = np.array([n[0], n[1], 0.0])
        hn = np.linalg.norm(n_h)
        approach = -n_h / hn if hn > 1e-9 else -n
        forbidden = ()
        if mem.last_action is not None and mem.last_action < 6:
            forbidden = (opposite_action(mem.last_action),)
        return self._best_translation(state, approach, forbidden=forbidden)

    def __call__(self, state, rng=None) -> int:
        action = self._choose(state)
        self.mem.last_action = action
        return action

    def observe(self, state, events):
        mem = self.mem
        moved = mem.last_position is None or \
            float(np.linalg.norm(state.finger_pose.position - mem.last_position)) > 1e-9
        if events:
            ev = events[-1]
            mem.last_normal = np.asarray(ev.normal, dtype=float)
            mem.last_contacted = True
            self._maybe_fix_contour(state, mem.last_normal)
        else:
            mem.last_contacted = False
        if mem.contour_z is None and not moved and mem.last_action in (0, 1, 2, 3):
            # the sidestep itself is wedged: rotate the escape direction
            mem.escape_lateral = (mem.escape_lateral + 1) % 4
        mem.stuck = mem.last_contacted and not moved
        mem.wedge_count = 0 if moved else mem.wedge_count + 1
        if events:
            mem.drought = 0
            mem.recover = 0
        else:
            mem.drought += 1
        mem.last_position = state.finger_pose.position.copy()


# ---------------------------------------------------------------------------
# rigid-registration recognition

@dataclass(frozen=True)
class IcpConfig:
    reference_points: int = 1000
    reference_seed: int = 0
    yaw_starts: int = 36
    threshold_start: float = 5e-3
    threshold_step: float = 5e-5
    max_iterations: int = 50
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.yaw_starts < 1:
            raise InvalidArgument("need at least one yaw start")
        if not (self.threshold_start > self.threshold_step > 0):
            raise InvalidArgument("threshold start must exceed the step size")


def _yaw_matrix(yaw_rad: float) -> np.ndarray:
    c, s = math.cos(yaw_rad), math.sin(yaw_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def icp_align(observed: np.ndarray, reference: np.ndarray, initial_yaw_deg: float,
              max_iterations: int = 50, tolerance: float = 1e-9,
              with_history: bool = False):
    """Iterative nearest-neighbor alignment of ``observed`` onto ``reference``.

    The start guess undoes a hypothesized object yaw of ``initial_yaw_deg``
    and matches centroids. Returns (rms error, (R, t)) where the transform
    maps observed points into the reference frame; degenerate inputs (< 3
    points) return an infinite error.
    """
    observed = np.asarray(observed, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if observed.shape[0] < 3:
        out = (math.inf, (np.eye(3), np.zeros(3)))
        return out + ([],) if with_history else out
    tree = cKDTree(reference)
    r_total = _yaw_matrix(-math.radians(initial_yaw_deg))
    t_total = reference.mean(axis=0) - observed.mean(axis=0) @ r_total.T
    x = observed @ r_total.T + t_total

    history = []
    prev = math.inf
    for _ in range(max_iterations):
        dists, idx = tree.query(x)
        rms = float(np.sqrt((dists ** 2).mean()))
        history.append(rms)
        if prev - rms < tolerance:
            break
        prev = rms
        y = reference[idx]
        cx = x.mean(axis=0)
        cy = y.mean(axis=0)
        h = (x - cx).T @ (y - cy)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        t = cy - r @ cx
        x = x @ r.T + t
        r_total = r @ r_total
        t_total = r @ t_total + t

    dists, _ = tree.query(x)
    rms = float(np.sqrt((dists ** 2).mean()))
    out = (rms, (r_total, t_total))
    return out + (history,) if with_history else out


def icp_match_error(observed, reference, config: IcpConfig) -> float:
    """Best alignment error over the configured yaw grid."""
    best = math.inf
    for k in range(config.yaw_starts):
        yaw = 360.0 * k / config.yaw_starts
        err, _ = icp_align(observed, reference, yaw,
                           max_iterations=config.max_iterations,
                           tolerance=config.tolerance)
        best = min(best, err)
        if best <= config.tolerance:
            break
    return best


def threshold_decay_match(errors: np.ndarray, config: IcpConfig) -> np.ndarray:
    """Boolean match mask: the threshold decays stepwise from its start value
    as long as the shrunken match set stays non-empty."""
    errors = np.asarray(errors, dtype=float)
    matched = errors < config.threshold_start
    if not matched.any():
        return matched
    theta = config.threshold_start
    while (errors < theta - config.threshold_step).any():
        theta -= config.threshold_step
    return errors < theta


def icp_discriminate(observed, references, config: IcpConfig) -> DiscriminatorOutput:
    """Match-set classifier: per object, the best yaw-start alignment error;
    the acceptance threshold then decays to the tightest value that keeps the
    match set non-empty. Matched objects share probability equally; an empty
    match set yields the uniform distribution.
    """
    errors = np.array([icp_match_error(observed, ref, config)
                       for ref in references])
    n = len(references)
    matched = threshold_decay_match(errors, config)
    if not matched.any():
        return _as_output(np.full(n, 1.0 / n))
    probs = np.where(matched, 1.0 / matched.sum(), 0.0)
    return _as_output(probs)


def icp_discriminator_fn(catalog, config: IcpConfig):
    """Gate closure over the catalog's reference clouds (positions only)."""
    refs = [o.surface_samples(config.reference_points, config.reference_seed)
            for o in catalog]

    def fn(cloud_obs):
        return icp_discriminate(np.asarray(cloud_obs)[:, :3], refs, config)

    return fn


# ---------------------------------------------------------------------------
# all-in-one policy

N_MOVE_ACTIONS = 12


def init_all_in_one(model: ModelSpec, rng) -> dict:
    if model.n_actions != N_MOVE_ACTIONS + model.n_classes:
        raise InvalidArgument(
            "single-policy head must be n_move + n_classes wide")
    params = init_encoder_params(model.encoder(4), rng, "enc.")
    params.update(nn.init_mlp(model.actor_mlp(), rng, "actor."))
    params.update(nn.init_mlp(model.critic_mlp(), rng, "critic."))
    return params


def all_in_one_policy(model: ModelSpec, params: dict, explorer_obs):
    """Distribution over move codes 0-11 plus predict codes 12.. and value."""
    return explore(model, params, explorer_obs)


def run_all_in_one_episode(model: ModelSpec, params: dict, state,
                           config: TrainConfig, rng, collector=None):
    """Episode for the merged policy: a predict code ends it immediately;
    reward 1 only for a correct prediction."""
    from .agents import EpisodeResult

    if collector is not None:
        collector.start_episode(state)
    max_steps = min(config.max_steps, state.max_steps)
    prediction = -1
    terminated_by = "timeout"
    while state.steps < max_steps:
        obs = obs_explorer(state)
        probs, value = all_in_one_policy(model, params, obs)
        action = sample_action(probs, rng)
        logp = math.log(max(probs[action], 1e-300))
        if collector is not None:
            collector.pre_step(state, action, logp, value)
        if action >= N_MOVE_ACTIONS:
            prediction = action - N_MOVE_ACTIONS
            terminated_by = "prediction"
            break
        state, events = step(state, action)
        if collector is not None:
            collector.post_step(state, events)
    success = prediction == state.object.id
    reward = 1.0 if (terminated_by == "prediction" and success) else 0.0
    if collector is not None:
        collector.end_episode(reward)
    confidence = 1.0 if terminated_by == "prediction" else 0.0
    n_predict_steps = 1 if terminated_by == "prediction" else 0
    return EpisodeResult(
        object_id=state.object.id,
        success=success,
        prediction=prediction,
        confidence=confidence,
        actions=state.steps + n_predict_steps,
        points=len(state.cloud),
        terminated_by=terminated_by,
        reward=reward,
    )


def train_all_in_one(catalog, config: TrainConfig, rng, model: ModelSpec | None = None,
                     object_ids=None, noise: NoiseParams | None = None,
                     placement: PlacementSpec | None = None, log_fn=None):
    """Policy-gradient training of the merged move/predict policy."""
    model = model or ModelSpec(n_classes=len(catalog),
                               n_actions=N_MOVE_ACTIONS + len(catalog))
    noise = noise or NoiseParams()
    placement = placement or PlacementSpec()
    object_ids = list(object_ids) if object_ids is not None else \
        [o.id for o in catalog]
    params = init_all_in_one(model, rng)
    opt = nn.AdamState()
    log_rows = []
    for it in range(config.iterations):
        collector = RolloutCollector()
        results = []
        while len(collector) < config.rollout_steps:
            oid = int(object_ids[rng.integers(0, len(object_ids))])
            state = reset(catalog, oid, placement, noise, rng,
                          max_steps=config.max_steps)
            results.append(run_all_in_one_episode(model, params, state, config,
                                                  rng, collector))
        params, stats = ppo_update(model, params, collector, config, opt, rng)
        succ, acts, pts, _ = _episode_stats(results)
        row = {
            "iteration": it, "episodes": len(results), "success_rate": succ,
            "mean_actions": acts, "mean_points": pts,
            "policy_loss": stats["policy_loss"], "value_loss": stats["value_loss"],
            "disc_loss": 0.0, "disc_accuracy": 0.0,
        }
        log_rows.append(row)
        if log_fn is not None:
            log_fn(row, 0.0)
    return params, log_rows


def train_ppo_icp(catalog, config: TrainConfig, rng, icp_config: IcpConfig,
                  model: ModelSpec | None = None, object_ids=None,
                  noise: NoiseParams | None = None,
                  placement: PlacementSpec | None = None, log_fn=None):
    """Policy-gradient explorer trained against the registration gate."""
    from .agents import collect_rollout, init_explorer

    model = model or ModelSpec(n_classes=len(catalog))
    noise = noise or NoiseParams()
    placement = placement or PlacementSpec()
    object_ids = list(object_ids) if object_ids is not None else \
        [o.id for o in catalog]
    gate = icp_discriminator_fn(catalog, icp_config)
    params = init_explorer(model, rng)
    opt = nn.AdamState()
    log_rows = []
    for it in range(config.iterations):
        collector, results = collect_rollout(
            model, None, params, catalog, object_ids, config, noise, placement,
            rng, discriminator_fn=gate)
        params, stats = ppo_update(model, params, collector, config, opt, rng)
        succ, acts, pts, _ = _episode_stats(results)
        row = {
            "iteration": it, "episodes": len(results), "success_rate": succ,
            "mean_actions": acts, "mean_points": pts,
            "policy_loss": stats["policy_loss"], "value_loss": stats["value_loss"],
            "disc_loss": 0.0, "disc_accuracy": 0.0,
        }
        log_rows.append(row)
        if log_fn is not None:
            log_fn(row, 0.0)
    return params, log_rows


# ---------------------------------------------------------------------------
# method registry

@dataclass(frozen=True)
class MethodInfo:
    name: str
    learning_based: bool
    trains_explorer: bool
    trains_discriminator: bool
    uses_icp: bool
    contact_noise_free_training: bool = False


METHODS = {
    m.name: m for m in (
        MethodInfo("not-go-back", True, False, True, False),
        MethodInfo("info-gain", True, False, True, False),
        MethodInfo("edge-follower", True, False, True, False,
                   contact_noise_free_training=True),
        MethodInfo("edge-icp", False, False, False, True),
        MethodInfo("ppo-icp", True, True, False, True),
        MethodInfo("all-in-one", True, True, False, False),
        MethodInfo("tandem3d", True, True, True, False),
    )
}
