"""Hierarchical point-set encoder: sample, group, abstract, pool.

Two local abstraction stages followed by a global stage map a variable-size
contact set to a fixed-width feature vector. Points are canonically sorted
before sampling so the encoding is exactly permutation invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractViolation, InvalidArgument


@dataclass(frozen=True)
class SaSpec:
    """One set-abstraction stage: sampling ratio, grouping radius, shared MLP."""

    ratio: float
    radius: float
    max_group: int
    widths: tuple

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise InvalidArgument("sampling ratio must be in (0, 1]")
        if self.radius <= 0:
            raise InvalidArgument("grouping radius must be positive")
        if self.max_group < 1:
            raise InvalidArgument("max group size must be >= 1")
        if not self.widths or any(w < 1 for w in self.widths):
            raise InvalidArgument("pointnet widths must be positive")


@dataclass(frozen=True)
class EncoderSpec:
    """Stage stack plus input feature width (3 per-contact features, or 4
    when the observation carries the finger-pose flag).

    ``coord_scale`` multiplies coordinate channels right before each shared
    MLP. Workspace coordinates are a few centimeters to decimeters; without
    rescaling, the class signal they carry is drowned out by unit-magnitude
    feature channels. Sampling and grouping always work in meters.
    """

    sa1: SaSpec
    sa2: SaSpec
    global_widths: tuple
    in_features: int
    coord_scale: float = 10.0

    @property
    def out_width(self) -> int:
        return self.global_widths[-1]

    @staticmethod
    def desk(in_features: int) -> "EncoderSpec":
        """Small stack for fast CPU training: 128-wide output feature."""
        return EncoderSpec(
            sa1=SaSpec(0.5, 0.04, 32, (32, 32)),
            sa2=SaSpec(0.25, 0.08, 32, (64, 64)),
            global_widths=(128, 128),
            in_features=in_features,
        )

    @staticmethod
    def full(in_features: int) -> "EncoderSpec":
        """Full-width stack with a 1024-dim object representation."""
        return EncoderSpec(
            sa1=SaSpec(0.5, 0.04, 32, (64, 64, 128)),
            sa2=SaSpec(0.25, 0.08, 32, (128, 128, 256)),
            global_widths=(256, 512, 1024),
            in_features=in_features,
        )


def fps(points: np.ndarray, ratio: float) -> np.ndarray:
    """Greedy farthest-point subset: ceil(ratio * N) indices.

    Starts at index 0, then repeatedly adds the point with the largest
    minimum distance to the chosen set; distance ties take the lowest
    index. ratio 1 returns all indices in input order.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if n == 0:
        raise InvalidArgument("farthest-point sampling needs a non-empty set")
    k = math.ceil(ratio * n)
    if k >= n:
        return np.arange(n)
    chosen = np.empty(k, dtype=int)
    chosen[0] = 0
    d2 = ((points - points[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


def ball_group(points: np.ndarray, centroid_idx: np.ndarray, radius: float,
               max_group: int):
    """Group points around each centroid within ``radius``.

    Each group holds its centroid first, then the remaining in-radius points
    nearest-first (ties by index), truncated to ``max_group`` members.
    Returns (member_idx, starts, rel_coords): flattened member indices, the
    row offset of each group, and coordinates relative to the group centroid.
    """
    points = np.asarray(points, dtype=float)
    centroids = points[centroid_idx]
    d2 = ((centroids[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    r2 = radius * radius
    member_idx = []
    starts = []
    offset = 0
    for c, ci in enumerate(centroid_idx):
        inside = np.nonzero(d2[c] <= r2)[0]
        inside = inside[inside != ci]
        order = np.lexsort((inside, d2[c][inside]))
        group = np.concatenate([[ci], inside[order][:max_group - 1]])
        member_idx.append(group)
        starts.append(offset)
        offset += len(group)
    member_idx = np.concatenate(member_idx)
    starts = np.asarray(starts, dtype=int)
    rel = points[member_idx] - np.repeat(centroids, np.diff(np.append(starts, offset)),
                                         axis=0)
    return member_idx, starts, rel


def init_encoder_params(spec: EncoderSpec, rng, prefix: str = "") -> dict:
    params = {}
    in_w = 3 + spec.in_features
    for i, w in enumerate(spec.sa1.widths):
        params.update(_init_layer(rng, f"{prefix}sa1.{i}.", in_w, w))
        in_w = w
    in_w = 3 + spec.sa1.widths[-1]
    for i, w in enumerate(spec.sa2.widths):
        params.update(_init_layer(rng, f"{prefix}sa2.{i}.", in_w, w))
        in_w = w
    in_w = 3 + spec.sa2.widths[-1]
    for i, w in enumerate(spec.global_widths):
        params.update(_init_layer(rng, f"{prefix}glob.{i}.", in_w, w))
        in_w = w
    return params


def _init_layer(rng, prefix, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    return {
        f"{prefix}w": rng.uniform(-bound, bound, size=(n_in, n_out)),
        f"{prefix}b": rng.uniform(-bound, bound, size=n_out),
    }


def _shared_mlp(params, prefix, x, n_layers):
    # rectifier after every layer; features stay non-negative into the pool
    h = x
    for i in range(n_layers):
        h = nn.relu(nn.add(nn.matmul(h, params[f"{prefix}{i}.w"]),
                           params[f"{prefix}{i}.b"]))
    return h


def sa_forward(sa: SaSpec, params: dict, prefix: str, points: np.ndarray, feats,
               coord_scale: float = 1.0):
    """One abstraction stage. ``feats`` may be a Var; points are data.

    Returns (centroid coords, pooled features), one row per centroid.
    """
    cidx = fps(points, sa.ratio)
    member_idx, starts, rel = ball_group(points, cidx, sa.radius, sa.max_group)
    gathered = nn.gather_rows(feats, member_idx)
    x = nn.concat_cols(rel * coord_scale, gathered)
    h = _shared_mlp(params, prefix, x, len(sa.widths))
    pooled = nn.segment_max(h, starts)
    return points[cidx], pooled


def encode(spec: EncoderSpec, params: dict, obs: np.ndarray, prefix: str = ""):
    """Fixed-width feature for a point set with per-point features.

    ``obs`` rows are [x, y, z, features...]; rows are sorted canonically so
    any permutation of the input encodes identically.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ContractViolation("encoder needs at least one input point")
    if obs.shape[1] != 3 + spec.in_features:
        raise InvalidArgument(
            f"expected {3 + spec.in_features} columns, got {obs.shape[1]}")
    obs = obs[np.lexsort(obs.T[::-1])]
    points = obs[:, :3]
    feats = obs[:, 3:]

    p1, f1 = sa_forward(spec.sa1, params, f"{prefix}sa1.", points, feats,
                        spec.coord_scale)
    p2, f2 = sa_forward(spec.sa2, params, f"{prefix}sa2.", p1, f1,
                        spec.coord_scale)
    xg = nn.concat_cols(p2 * spec.coord_scale, f2)
    hg = _shared_mlp(params, f"{prefix}glob.", xg, len(spec.global_widths))
    pooled = nn.segment_max(hg, np.array([0]))
    return nn.pick(pooled, 0)
