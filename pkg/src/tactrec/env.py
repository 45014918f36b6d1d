"""Episodic tactile exploration environment.

An episode hides one placed object; the finger starts above the workspace
center, descends to a first contact, and is then driven by discrete 6DOF
actions. Real contacts pass through localization noise, and steps without
a reported contact may emit a spurious one at the configured rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EnvironmentFault, TraceFormatError
from .geometry import (
    FingerShape,
    PlacedParts,
    Pose6,
    apply_action,
    quat_rotate,
    sweep_step,
)
from .objects import ObjectModel, PlacementSpec, randomize_pose

MAX_EPISODE_STEPS = 2000
TRACE_VERSION = "trace-v1"

# mean reported-vs-true displacement of an isotropic 3D Gaussian is
# sigma * 2 * sqrt(2/pi); divide the requested mean level by that factor
_GAUSS3_MEAN_FACTOR = 2.0 * math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class NoiseParams:
    """Sensor noise model: spurious-contact rate plus localization error."""

    contact_rate: float = 0.0
    localization_level: float = 0.0      # meters, mean reported-vs-true distance
    normal_angle_deg: float = 0.0        # std of the angular normal perturbation

    def __post_init__(self):
        if not (0.0 <= self.contact_rate <= 1.0):
            raise ContractViolation("contact_rate must be a probability")
        if self.localization_level < 0:
            raise ContractViolation("localization_level must be non-negative")


NOISE_PRESETS = {
    "none": NoiseParams(),
    "sensor-real": NoiseParams(0.001, 0.002, 10.0),
    "sensor-future": NoiseParams(0.00025, 0.0005, 2.5),
}


@dataclass(frozen=True)
class ContactEvent:
    """One sensed contact. The spurious flag is ground truth for analysis only
    and is never part of any observation."""

    position: np.ndarray
    normal: np.ndarray
    spurious: bool = False


@dataclass(frozen=True)
class Workspace:
    half_extent: float = 0.15
    height: float = 0.5
    floor: float = 0.0

    def contains(self, p) -> bool:
        return (abs(p[0]) <= self.half_extent and abs(p[1]) <= self.half_extent
                and self.floor <= p[2] <= self.height)


def discretize_pose(pose: Pose6) -> tuple:
    """Key on the 1 cm / 15 degree action lattice reachable by the action set."""
    q = pose.orientation
    # canonical sign: quaternions q and -q are the same rotation
    for c in q:
        if abs(c) > 1e-8:
            if c < 0:
                q = -q
            break
    return (
        round(pose.position[0] * 100.0),
        round(pose.position[1] * 100.0),
        round(pose.position[2] * 100.0),
        round(q[0] * 1000.0), round(q[1] * 1000.0),
        round(q[2] * 1000.0), round(q[3] * 1000.0),
    )


@dataclass
class EpisodeState:
    """Mutable single-episode state machine."""

    finger_pose: Pose6
    cloud: list[ContactEvent]
    steps: int
    object: ObjectModel
    object_pose: Pose6
    visited_poses: set
    noise: NoiseParams
    rng: np.random.Generator
    finger: FingerShape
    workspace: Workspace
    max_steps: int = MAX_EPISODE_STEPS
    placed: PlacedParts = field(repr=False, default=None)

    @property
    def hidden(self):
        return (self.object.id, self.object_pose)


def inject_localization_noise(contact, noise: NoiseParams, rng) -> ContactEvent:
    """Perturb a real contact: Gaussian position offset calibrated so the mean
    displacement equals the configured level, plus a random-axis rotation of
    the normal by |N(0, angle)| degrees."""
    sigma = noise.localization_level / _GAUSS3_MEAN_FACTOR
    offset = rng.standard_normal(3) * sigma
    position = np.asarray(contact.position) + offset

    normal = np.asarray(contact.normal, dtype=float)
    axis = rng.standard_normal(3)
    ln = np.linalg.norm(axis)
    while ln < 1e-12:
        axis = rng.standard_normal(3)
        ln = np.linalg.norm(axis)
    axis = axis / ln
    angle = abs(rng.normal(0.0, math.radians(noise.normal_angle_deg)))
    if angle > 0.0:
        c, s = math.cos(angle), math.sin(angle)
        normal = (normal * c + np.cross(axis, normal) * s
                  + axis * float(axis @ normal) * (1.0 - c))
        normal = normal / np.linalg.norm(normal)
    return ContactEvent(position, normal, spurious=False)


def _spurious_event(state: EpisodeState) -> ContactEvent:
    point_local, normal_local = state.finger.sample_sensing_surface(state.rng)
    pose = state.finger_pose
    return ContactEvent(
        pose.transform_point(point_local),
        quat_rotate(pose.orientation, normal_local),
        spurious=True,
    )


def reset(catalog, object_id: int, placement: PlacementSpec, noise: NoiseParams,
          rng, finger: FingerShape | None = None,
          workspace: Workspace | None = None,
          max_steps: int = MAX_EPISODE_STEPS) -> EpisodeState:
    """Place the object, descend from above the center to the seed contact.

    The returned state has one contact in its cloud and a step count of zero.
    """
    objects = {o.id: o for o in catalog}
    if object_id not in objects:
        raise ContractViolation(f"object id {object_id} not in catalog")
    obj = objects[object_id]
    finger = finger or FingerShape()
    workspace = workspace or Workspace()
    max_steps = min(int(max_steps), MAX_EPISODE_STEPS)

    object_pose = randomize_pose(obj, placement, rng)
    placed = PlacedParts(obj.parts, object_pose)

    pose = Pose6(np.array([0.0, 0.0, placed.zmax + 0.02]), np.array([1.0, 0, 0, 0]))
    seed_contact = None
    descents = int((pose.position[2] - workspace.floor + 0.06) / 0.01) + 2
    for _ in range(descents):
        pose, contacts = sweep_step(pose, 5, placed, finger=finger)  # -z
        if contacts:
            seed_contact = contacts[0]
            break
        if pose.position[2] < workspace.floor - 0.05:
            break
    if seed_contact is None:
        raise EnvironmentFault(
            f"descent over {obj.name!r} never made contact; placement broken")

    event = inject_localization_noise(seed_contact, noise, rng)
    state = EpisodeState(
        finger_pose=pose,
        cloud=[event],
        steps=0,
        object=obj,
        object_pose=object_pose,
        visited_poses={discretize_pose(pose)},
        noise=noise,
        rng=rng,
        finger=finger,
        workspace=workspace,
        max_steps=max_steps,
        placed=placed,
    )
    return state


def step(state: EpisodeState, action: int):
    """Advance one action. Returns (state, new_contacts).

    Out-of-workspace targets are blocked in place and emit nothing; real
    contacts pass through localization noise; contact-free steps emit a
    spurious event with probability ``contact_rate``.
    """
    if state.steps >= state.max_steps:
        raise ContractViolation("episode already reached its step limit")

    target = apply_action(state.finger_pose, action)
    if not state.workspace.contains(target.position):
        state.steps += 1
        return state, []

    pose, contacts = sweep_step(state.finger_pose, action, state.placed,
                                finger=state.finger)
    state.finger_pose = pose
    new_events: list[ContactEvent] = []
    if contacts:
        contact = contacts[0]
        p_local = pose.inverse_point(contact.position)
        # the flat mounting base blocks motion but does not sense
        if state.finger.is_sensing_point_local(p_local):
            new_events.append(inject_localization_noise(contact, state.noise, state.rng))
    elif state.noise.contact_rate > 0.0:
        if state.rng.uniform() < state.noise.contact_rate:
            new_events.append(_spurious_event(state))

    state.steps += 1
    state.visited_poses.add(discretize_pose(pose))
    state.cloud.extend(new_events)
    return state, new_events


# ---------------------------------------------------------------------------
# observations

def obs_discriminator(state: EpisodeState) -> np.ndarray:
    """Contact set as an (N, 6) array of positions and normals."""
    if not state.cloud:
        raise ContractViolation("observation requires a non-empty contact cloud")
    rows = np.empty((len(state.cloud), 6))
    for i, ev in enumerate(state.cloud):
        rows[i, :3] = ev.position
        rows[i, 3:] = ev.normal
    return rows


def obs_explorer(state: EpisodeState) -> np.ndarray:
    """Contacts flagged 0 plus one finger-pose row flagged 1, (N+1, 7).

    The finger row carries the reference position and the pointing axis in
    the normal slot.
    """
    if not state.cloud:
        raise ContractViolation("observation requires a non-empty contact cloud")
    n = len(state.cloud)
    rows = np.zeros((n + 1, 7))
    for i, ev in enumerate(state.cloud):
        rows[i, :3] = ev.position
        rows[i, 3:6] = ev.normal
    rows[n, :3] = state.finger_pose.position
    rows[n, 3:6] = state.finger.pointing_axis_world(state.finger_pose)
    rows[n, 6] = 1.0
    return rows


def candidate_actions(state: EpisodeState, unexplored_only: bool = True) -> list[int]:
    """In-bounds actions, optionally restricted to unvisited lattice poses."""
    out = []
    for code in range(12):
        target = apply_action(state.finger_pose, code)
        if not state.workspace.contains(target.position):
            continue
        if unexplored_only and discretize_pose(target) in state.visited_poses:
            continue
        out.append(code)
    return out


# ---------------------------------------------------------------------------
# trace serialization

def _pose_json(pose: Pose6):
    return [float(x) for x in pose.position] + [float(x) for x in pose.orientation]


def _events_json(events):
    return [
        {"p": [float(x) for x in ev.position],
         "n": [float(x) for x in ev.normal],
         "spurious": bool(ev.spurious)}
        for ev in events
    ]


class TraceWriter:
    """Line-delimited episode record: one JSON object per step."""

    def __init__(self, path, state: EpisodeState, meta: dict | None = None):
        self._fh = open(path, "w")
        header = {
            "version": TRACE_VERSION,
            "object_id": state.object.id,
            "object_name": state.object.name,
            "object_pose": _pose_json(state.object_pose),
            "reset_pose": _pose_json(state.finger_pose),
            "seed_contacts": _events_json(state.cloud),
        }
        if meta:
            header["meta"] = meta
        self._fh.write(json.dumps(header) + "\n")

    def record(self, step_index: int, action: int, state: EpisodeState, events):
        self._fh.write(json.dumps({
            "step": step_index,
            "action": int(action),
            "pose": _pose_json(state.finger_pose),
            "contacts": _events_json(events),
        }) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path):
    """Parse a trace file into (header, steps). Rejects unknown versions."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise TraceFormatError(f"{path}: empty trace")
    header = json.loads(lines[0])
    if header.get("version") != TRACE_VERSION:
        raise TraceFormatError(
            f"{path}: unsupported trace version {header.get('version')!r}")
    return header, [json.loads(ln) for ln in lines[1:]]
