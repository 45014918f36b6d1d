"""Experiment orchestration: strict configs, seeded parallel evaluation,
noise sweeps, training dispatch, and trace replay.

Every output file starts with a comment line carrying the config fingerprint
and code version. Per-trial randomness derives from the master seed and the
trial counter alone, so any trial reproduces in isolation and results do not
depend on the worker count.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from .agents import (
    ModelSpec,
    TrainConfig,
    cotrain,
    run_episode,
    train_discriminator_with_source,
)
from .baselines import (
    METHODS,
    EdgeFollower,
    IcpConfig,
    NotGoBack,
    icp_discriminator_fn,
    info_gain_action,
    run_all_in_one_episode,
    train_all_in_one,
    train_ppo_icp,
)
from .env import NOISE_PRESETS, NoiseParams, TraceWriter, read_trace, reset
from .errors import ConfigError
from .nn import load_checkpoint, save_checkpoint
from .objects import PlacementSpec, builtin_catalog, load_catalog_dir

EVAL_MAX_STEPS = 2000

_CONFIG_SCHEMA = {
    "method": str,
    "catalog": (str, dict),
    "objects": list,
    "noise": (str, dict),
    "trials": int,
    "seed": int,
    "workers": int,
    "out_dir": str,
    "checkpoint": str,
    "record_traces": int,
    "confidence_threshold": float,
    "model": dict,
    "train": dict,
    "icp": dict,
    "placement": dict,
}

_NOISE_KEYS = {"contact_rate", "localization_m", "normal_angle_deg"}
_CATALOG_KEYS = {"directory"}
_PLACEMENT_KEYS = {"half_extent", "height_variance"}
_MODEL_KEYS = {
    "sa1_ratio", "sa1_radius", "sa2_ratio", "sa2_radius", "max_group",
    "sa1_widths", "sa2_widths", "global_widths", "coord_scale",
    "head_hidden", "n_classes",
    "n_actions",
}
_TRAIN_KEYS = {
    "confidence_threshold", "max_steps", "gamma", "gae_lambda", "clip_eps",
    "rollout_steps", "ppo_epochs", "minibatch", "lr_explorer",
    "lr_discriminator", "disc_batch_size", "disc_batches_per_iter", "disc_replay",
    "entropy_coef", "value_coef", "iterations", "checkpoint_every",
    "eval_every", "eval_episodes", "early_stop_success",
    "reward_requires_correct",
}
_ICP_KEYS = {
    "reference_points", "reference_seed", "yaw_starts", "threshold_start",
    "threshold_step", "max_iterations", "tolerance",
}


def validate_config(raw: dict) -> dict:
    """Reject unknown keys anywhere in the tree; fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for key in raw:
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    for sub, allowed in (("noise", _NOISE_KEYS), ("catalog", _CATALOG_KEYS),
                         ("model", _MODEL_KEYS), ("train", _TRAIN_KEYS),
                         ("icp", _ICP_KEYS), ("placement", _PLACEMENT_KEYS)):
        val = raw.get(sub)
        if isinstance(val, dict):
            for key in val:
                if key not in allowed:
                    raise ConfigError(f"unknown key {key!r} in {sub!r}")
    cfg = {
        "method": raw.get("method", "tandem3d"),
        "catalog": raw.get("catalog", "builtin"),
        "objects": raw.get("objects"),
        "noise": raw.get("noise", "none"),
        "trials": int(raw.get("trials", 200)),
        "seed": int(raw.get("seed", 0)),
        "workers": int(raw.get("workers", 1)),
        "out_dir": raw.get("out_dir", "runs/out"),
        "checkpoint": raw.get("checkpoint"),
        "record_traces": int(raw.get("record_traces", 0)),
        "confidence_threshold": float(raw.get("confidence_threshold", 0.98)),
        "model": raw.get("model") or {},
        "train": raw.get("train") or {},
        "icp": raw.get("icp") or {},
        "placement": raw.get("placement") or {},
    }
    if cfg["method"] not in METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; "
                          f"known: {sorted(METHODS)}")
    if cfg["trials"] < 1:
        raise ConfigError("trials must be >= 1")
    if isinstance(cfg["noise"], str) and cfg["noise"] not in NOISE_PRESETS:
        raise ConfigError(f"unknown noise preset {cfg['noise']!r}; "
                          f"known: {sorted(NOISE_PRESETS)}")
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return validate_config(raw)


_EXECUTION_ONLY_KEYS = ("out_dir", "workers", "record_traces")


def config_fingerprint(cfg: dict) -> str:
    """Hash of the scientific configuration; where results are written and
    how many workers compute them cannot change what they are."""
    core = {k: v for k, v in cfg.items() if k not in _EXECUTION_ONLY_KEYS}
    blob = json.dumps(core, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def resolve_noise(cfg: dict) -> NoiseParams:
    noise = cfg["noise"]
    if isinstance(noise, str):
        return NOISE_PRESETS[noise]
    return NoiseParams(
        contact_rate=float(noise.get("contact_rate", 0.0)),
        localization_level=float(noise.get("localization_m", 0.0)),
        normal_angle_deg=float(noise.get("normal_angle_deg", 0.0)),
    )


def resolve_catalog(cfg: dict):
    cat = cfg["catalog"]
    if cat == "builtin":
        catalog = builtin_catalog()
    elif isinstance(cat, dict) and "directory" in cat:
        catalog = load_catalog_dir(cat["directory"])
    else:
        raise ConfigError(f"bad catalog selector {cat!r}")
    ids = [o.id for o in catalog]
    if ids != list(range(len(catalog))):
        raise ConfigError("catalog ids must be 0..n-1 for class indexing")
    return catalog


def resolve_placement(cfg: dict) -> PlacementSpec:
    p = cfg["placement"]
    return PlacementSpec(
        half_extent=float(p.get("half_extent", 0.15)),
        height_variance=float(p.get("height_variance", 0.02)),
    )


def resolve_model(cfg: dict, catalog) -> ModelSpec:
    fields = dict(cfg["model"])
    fields.setdefault("n_classes", len(catalog))
    if cfg["method"] == "all-in-one":
        fields.setdefault("n_actions", 12 + fields["n_classes"])
    return ModelSpec.from_dict(fields)


def resolve_train(cfg: dict) -> TrainConfig:
    fields = dict(cfg["train"])
    fields.setdefault("confidence_threshold", cfg["confidence_threshold"])
    return TrainConfig.from_dict(fields)


def resolve_icp(cfg: dict) -> IcpConfig:
    return IcpConfig(**cfg["icp"])


def resolve_training_noise(cfg: dict, method_info) -> NoiseParams:
    """Noise condition baked into training episodes. The contour follower
    trains without spurious contacts regardless of the condition (it
    otherwise orbits fake contacts); localization noise is kept."""
    noise = resolve_noise(cfg)
    if method_info.contact_noise_free_training and noise.contact_rate > 0.0:
        return NoiseParams(0.0, noise.localization_level, noise.normal_angle_deg)
    return noise


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """Counter-based derivation: trial i is reproducible in isolation."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, trial]))


# ---------------------------------------------------------------------------
# trial execution

_WORKER_CACHE: dict = {}


def _load_eval_bundle(cfg: dict):
    """Everything a trial needs, cached per config fingerprint per process."""
    key = config_fingerprint(cfg)
    if key in _WORKER_CACHE:
        return _WORKER_CACHE[key]
    method = METHODS[cfg["method"]]
    catalog = resolve_catalog(cfg)
    object_ids = list(cfg["objects"]) if cfg["objects"] else [o.id for o in catalog]
    noise = resolve_noise(cfg)
    placement = resolve_placement(cfg)
    icp_cfg = resolve_icp(cfg)

    disc_params = expl_params = None
    model = resolve_model(cfg, catalog)
    if method.learning_based:
        if not cfg["checkpoint"]:
            raise ConfigError(
                f"method {method.name!r} is learning-based and needs a checkpoint")
        tensors, meta = load_checkpoint(cfg["checkpoint"])
        if "model" in meta:
            model = ModelSpec.from_dict(meta["model"])
        disc_params = {k[5:]: v for k, v in tensors.items()
                       if k.startswith("disc/")} or None
        expl_params = {k[5:]: v for k, v in tensors.items()
                       if k.startswith("expl/")} or None
    gate = icp_discriminator_fn(catalog, icp_cfg) if method.uses_icp else None
    bundle = {
        "method": method, "catalog": catalog, "object_ids": object_ids,
        "noise": noise, "placement": placement, "model": model,
        "disc_params": disc_params, "expl_params": expl_params, "gate": gate,
        "eval_config": TrainConfig(
            confidence_threshold=cfg["confidence_threshold"],
            max_steps=EVAL_MAX_STEPS),
    }
    _WORKER_CACHE[key] = bundle
    return bundle


def run_trial(cfg: dict, trial: int, trace_path=None) -> dict:
    bundle = _load_eval_bundle(cfg)
    rng = trial_rng(cfg["seed"], trial)
    object_ids = bundle["object_ids"]
    oid = int(object_ids[trial % len(object_ids)])
    t0 = time.perf_counter()
    state = reset(bundle["catalog"], oid, bundle["placement"], bundle["noise"],
                  rng, max_steps=EVAL_MAX_STEPS)
    trace = TraceWriter(trace_path, state, meta={"trial": trial}) \
        if trace_path else None

    method = bundle["method"]
    model = bundle["model"]
    config = bundle["eval_config"]
    if method.name == "all-in-one":
        res = run_all_in_one_episode(model, bundle["expl_params"], state, config, rng)
    else:
        source = None
        if method.name == "not-go-back":
            source = NotGoBack()
        elif method.name == "info-gain":
            disc = bundle["disc_params"]

            def source(s, r, _d=disc, _m=model):
                return info_gain_action(s, s.visited_poses, _d, _m, r)
        elif method.name in ("edge-follower", "edge-icp"):
            source = EdgeFollower(state)
        res = run_episode(bundle["disc_params"], bundle["expl_params"], state,
                          config, rng, model, action_source=source,
                          discriminator_fn=bundle["gate"], trace=trace)
    if trace is not None:
        trace.close()
    wall = time.perf_counter() - t0
    return {
        "trial": trial, "object_id": res.object_id, "success": int(res.success),
        "actions": res.actions, "points": res.points,
        "prediction": res.prediction, "terminated_by": res.terminated_by,
        "wall_time": wall,
    }


def _run_trial_chunk(cfg: dict, trials: list) -> list:
    return [run_trial(cfg, t) for t in trials]


# ---------------------------------------------------------------------------
# evaluation

TRIAL_COLUMNS = ("trial", "object_id", "success", "actions", "points",
                 "prediction", "terminated_by")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, columns, rows, fingerprint):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# tactrec-v1 config_sha256={fingerprint} "
                 f"code_version={__version__}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def summarize(records: list) -> dict:
    actions = np.array([r["actions"] for r in records], dtype=float)
    points = np.array([r["points"] for r in records], dtype=float)
    succ = np.array([r["success"] for r in records], dtype=float)
    # population standard deviation, stated in the column names
    return {
        "trials": len(records),
        "success_rate": float(succ.mean()),
        "mean_actions": float(actions.mean()),
        "std_actions": float(actions.std()),
        "mean_points": float(points.mean()),
        "std_points": float(points.std()),
    }


def evaluate(cfg: dict, out_dir=None):
    """Run all trials; returns (summary, records) and writes the CSV pair."""
    cfg = validate_config(cfg)
    fingerprint = config_fingerprint(cfg)
    _load_eval_bundle(cfg)  # fail fast on catalog/checkpoint problems
    trials = list(range(cfg["trials"]))

    n_traces = min(cfg["record_traces"], cfg["trials"])
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if n_traces:
        (out / "traces").mkdir(exist_ok=True)

    records = []
    if cfg["workers"] <= 1:
        for t in trials:
            trace = (out / "traces" / f"trial_{t}.jsonl") if t < n_traces else None
            records.append(run_trial(cfg, t, trace))
    else:
        chunks = [trials[i::cfg["workers"]] for i in range(cfg["workers"])]
        with concurrent.futures.ProcessPoolExecutor(cfg["workers"]) as pool:
            futs = [pool.submit(_run_trial_chunk, cfg, chunk)
                    for chunk in chunks if chunk]
            for f in futs:
                records.extend(f.result())
        records.sort(key=lambda r: r["trial"])
        for t in range(n_traces):
            run_trial(cfg, t, out / "traces" / f"trial_{t}.jsonl")

    summary = summarize(records)
    summary["method"] = cfg["method"]
    summary["seed"] = cfg["seed"]

    _write_csv(out / "trials.csv", TRIAL_COLUMNS, records, fingerprint)
    _write_csv(out / "summary.csv", tuple(summary), [summary], fingerprint)
    meta = {
        "fingerprint": fingerprint,
        "code_version": __version__,
        "total_wall_time": sum(r["wall_time"] for r in records),
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return summary, records


def noise_sweep(cfg: dict, axis: str, levels, out_dir=None):
    """Evaluate at each noise level (evaluation-only; no retraining).

    ``axis`` is "contact" (spurious rate) or "localization" (meters).
    """
    cfg = validate_config(cfg)
    if axis not in ("contact", "localization"):
        raise ConfigError("sweep axis must be 'contact' or 'localization'")
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    base_noise = resolve_noise(cfg)
    rows = []
    for level in levels:
        level = float(level)
        noise = {
            "contact_rate": level if axis == "contact" else base_noise.contact_rate,
            "localization_m": level if axis == "localization"
            else base_noise.localization_level,
            "normal_angle_deg": base_noise.normal_angle_deg,
        }
        sub = dict(cfg, noise=noise, out_dir=str(out / f"{axis}_{level:g}"))
        summary, _ = evaluate(sub)
        rows.append({
            "level": level, "method": cfg["method"],
            "success_rate": summary["success_rate"],
            "mean_actions": summary["mean_actions"],
        })
    _write_csv(out / "sweep.csv", ("level", "method", "success_rate",
                                   "mean_actions"), rows, config_fingerprint(cfg))
    return rows


# ---------------------------------------------------------------------------
# training

def _save_agent_checkpoint(path, model: ModelSpec, fingerprint: str,
                           disc_params=None, expl_params=None, extra_meta=None):
    tensors = {}
    if disc_params:
        tensors.update({f"disc/{k}": v for k, v in disc_params.items()})
    if expl_params:
        tensors.update({f"expl/{k}": v for k, v in expl_params.items()})
    meta = {"model": model.to_dict(), "fingerprint": fingerprint,
            "code_version": __version__}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, tensors, meta)


def train(cfg: dict, out_dir=None, log_fn=None):
    """Dispatch to the method's trainer; writes checkpoint.bin plus
    training_log.csv and returns (checkpoint_path, log_rows)."""
    cfg = validate_config(cfg)
    method = METHODS[cfg["method"]]
    if not method.learning_based:
        raise ConfigError(f"method {method.name!r} requires no training")
    fingerprint = config_fingerprint(cfg)
    catalog = resolve_catalog(cfg)
    object_ids = list(cfg["objects"]) if cfg["objects"] else [o.id for o in catalog]
    noise = resolve_training_noise(cfg, method)
    placement = resolve_placement(cfg)
    model = resolve_model(cfg, catalog)
    train_cfg = resolve_train(cfg)
    # single-element entropy list: disjoint from every per-trial [seed, i] stream
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"]]))

    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"

    disc_params = expl_params = None
    if method.name == "tandem3d":
        def periodic(it, disc, expl):
            _save_agent_checkpoint(out / f"checkpoint_it{it}.bin", model,
                                   fingerprint, disc, expl)

        disc_params, expl_params, rows = cotrain(
            catalog, train_cfg, rng, model=model, object_ids=object_ids,
            noise=noise, placement=placement, checkpoint_fn=periodic,
            log_fn=log_fn)
    elif method.name == "all-in-one":
        expl_params, rows = train_all_in_one(
            catalog, train_cfg, rng, model=model, object_ids=object_ids,
            noise=noise, placement=placement, log_fn=log_fn)
    elif method.name == "ppo-icp":
        expl_params, rows = train_ppo_icp(
            catalog, train_cfg, rng, resolve_icp(cfg), model=model,
            object_ids=object_ids, noise=noise, placement=placement,
            log_fn=log_fn)
    else:
        factory = _heuristic_factory(method.name)
        disc_params, rows = train_discriminator_with_source(
            catalog, train_cfg, rng, factory, model=model,
            object_ids=object_ids, noise=noise, placement=placement,
            log_fn=log_fn)

    _save_agent_checkpoint(ckpt_path, model, fingerprint,
                           disc_params, expl_params,
                           extra_meta={"method": method.name,
                                       "train": train_cfg.to_dict()})
    from .agents import LOG_COLUMNS
    _write_csv(out / "training_log.csv", LOG_COLUMNS, rows, fingerprint)
    return ckpt_path, rows


def _heuristic_factory(name: str):
    if name == "not-go-back":
        return lambda state, rng, disc, model: NotGoBack()
    if name == "edge-follower":
        return lambda state, rng, disc, model: EdgeFollower(state)
    if name == "info-gain":
        def factory(state, rng, disc, model):
            def source(s, r, _d=disc, _m=model):
                return info_gain_action(s, s.visited_poses, _d, _m, r)
            return source
        return factory
    raise ConfigError(f"no heuristic trainer for {name!r}")


# ---------------------------------------------------------------------------
# replay

def replay(trace_path, out_dir):
    """Flatten a recorded episode into plot-ready pose and contact tables."""
    header, steps = read_trace(trace_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fingerprint = header.get("meta", {}).get("fingerprint", "none")

    pose_rows = [{
        "step": -1, "action": -1,
        **dict(zip(("x", "y", "z", "qw", "qx", "qy", "qz"),
                   header["reset_pose"])),
    }]
    contact_rows = [
        {"step": -1, **dict(zip(("px", "py", "pz"), ev["p"])),
         **dict(zip(("nx", "ny", "nz"), ev["n"])), "spurious": int(ev["spurious"])}
        for ev in header["seed_contacts"]
    ]
    for s in steps:
        pose_rows.append({
            "step": s["step"], "action": s["action"],
            **dict(zip(("x", "y", "z", "qw", "qx", "qy", "qz"), s["pose"])),
        })
        for ev in s["contacts"]:
            contact_rows.append({
                "step": s["step"], **dict(zip(("px", "py", "pz"), ev["p"])),
                **dict(zip(("nx", "ny", "nz"), ev["n"])),
                "spurious": int(ev["spurious"]),
            })
    _write_csv(out / "poses.csv",
               ("step", "action", "x", "y", "z", "qw", "qx", "qy", "qz"),
               pose_rows, fingerprint)
    _write_csv(out / "contacts.csv",
               ("step", "px", "py", "pz", "nx", "ny", "nz", "spurious"),
               contact_rows, fingerprint)
    return header, pose_rows, contact_rows
