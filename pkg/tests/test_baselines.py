import math

import numpy as np
import pytest

from tactrec.agents import ModelSpec, TrainConfig, _as_output
from tactrec.baselines import (
    METHODS,
    EdgeFollower,
    IcpConfig,
    entropy,
    icp_align,
    icp_discriminate,
    info_gain_action,
    init_all_in_one,
    not_go_back_action,
    run_all_in_one_episode,
    threshold_decay_match,
    train_all_in_one,
)
from tactrec.encoder import fps
from tactrec.env import NoiseParams, discretize_pose, reset, step
from tactrec.geometry import apply_action
from tactrec.objects import ObjectModel, PlacementSpec, builtin_catalog, _ngon_prism

CATALOG = builtin_catalog()


def fresh(oid=0, seed=0, noise=None, catalog=None):
    rng = np.random.default_rng(seed)
    return reset(catalog or CATALOG, oid, PlacementSpec(), noise or NoiseParams(),
                 rng), rng


# ---------------------------------------------------------------------------
# not-go-back

def test_not_go_back_uniform_over_fresh_moves():
    state, rng = fresh(oid=1, seed=1)
    # climb clear of the object so every move is in-bounds and unexplored
    for _ in range(3):
        state, _ = step(state, 4)
    counts = np.zeros(12)
    for _ in range(10_000):
        counts[not_go_back_action(state, state.visited_poses, rng)] += 1
    # -z returns toward a visited pose only if it maps onto the visited key;
    # after 3 climbs all 12 neighbors are new except -z
    freqs = counts / counts.sum()
    live = [a for a in range(12) if counts[a] > 0]
    expect = 1.0 / len(live)
    for a in live:
        assert abs(freqs[a] - expect) < 0.02


def test_not_go_back_excludes_reverse_move():
    state, rng = fresh(oid=0, seed=2)
    for _ in range(3):
        state, _ = step(state, 4)
    state, _ = step(state, 0)  # +x
    for _ in range(3000):
        assert not_go_back_action(state, state.visited_poses, rng) != 1  # -x


def test_not_go_back_surrounded_falls_back_uniform():
    state, rng = fresh(oid=0, seed=3)
    for _ in range(3):
        state, _ = step(state, 4)
    for code in range(12):
        state.visited_poses.add(discretize_pose(apply_action(state.finger_pose, code)))
    counts = np.zeros(12)
    for _ in range(6000):
        counts[not_go_back_action(state, state.visited_poses, rng)] += 1
    assert np.all(counts > 0)  # every in-bounds action remains possible


# ---------------------------------------------------------------------------
# info-gain

def stub_discriminator(seed_salt=0):
    """Deterministic pseudo-random distribution keyed on the newest point."""

    def fn(obs):
        key = int(abs(np.asarray(obs)[-1].sum()) * 1e7) % (2 ** 31) + seed_salt
        rng = np.random.default_rng(key)
        p = rng.dirichlet(np.ones(10))
        return _as_output(p)

    return fn


def info_gain_oracle_full_form(state, discriminator_fn):
    """Paper-form objective: H(p) - (0.5 H(p_c) + 0.5 H(p_n)), p_n = p."""
    from tactrec.env import candidate_actions, obs_discriminator

    base_obs = obs_discriminator(state)
    p = discriminator_fn(base_obs).probs
    hp = entropy(p)
    cands = candidate_actions(state, unexplored_only=True)
    best_a, best_val = None, -math.inf
    for a in cands:
        target = apply_action(state.finger_pose, a)
        hyp_n = -state.finger.pointing_axis_world(target)
        row = np.concatenate([target.position, hyp_n])[None, :]
        pc = discriminator_fn(np.vstack([base_obs, row])).probs
        val = hp - (0.5 * entropy(pc) + 0.5 * hp)
        if val > best_val:  # ties keep the lowest action code
            best_val = val
            best_a = a
    return best_a


def test_info_gain_two_forms_select_identical_actions():
    state, rng = fresh(oid=2, seed=4)
    for _ in range(2):
        state, _ = step(state, 4)
    for salt in range(1000):
        fn = stub_discriminator(salt)
        got = info_gain_action(state, state.visited_poses, None, None,
                               discriminator_fn=fn)
        expect = info_gain_oracle_full_form(state, fn)
        assert got == expect, f"salt {salt}"


def test_entropy_uniform_ten():
    assert entropy(np.full(10, 0.1)) == pytest.approx(math.log(10.0), abs=1e-12)
    assert entropy(np.array([1.0, 0.0])) == 0.0


def test_info_gain_identical_pc_lowest_index():
    state, rng = fresh(oid=0, seed=5)
    for _ in range(2):
        state, _ = step(state, 4)

    def flat(obs):
        return _as_output(np.full(10, 0.1))

    from tactrec.env import candidate_actions
    cands = candidate_actions(state, unexplored_only=True)
    got = info_gain_action(state, state.visited_poses, None, None,
                           discriminator_fn=flat)
    assert got == cands[0]


# ---------------------------------------------------------------------------
# edge-follower

def cylinder_catalog(radius=0.05, height=0.16):
    part = _ngon_prism(radius, height, n=32, center=(0, 0, height / 2))
    return [ObjectModel(0, "cyl", [part])]


def test_edge_follower_circles_cylinder():
    cat = cylinder_catalog()
    rng = np.random.default_rng(6)
    spec = PlacementSpec(half_extent=1e-9, height_variance=0.0)  # centered
    state = reset(cat, 0, spec, NoiseParams(), rng)
    follower = EdgeFollower(state)

    center = state.object_pose.position[:2]
    start_xy = None
    prev_angle = None
    winding = 0.0
    closed = False
    for i in range(600):
        action = follower(state)
        state, events = step(state, action)
        follower.observe(state, events)
        if follower.mem.contour_z is None:
            continue
        xy = state.finger_pose.position[:2] - center
        if start_xy is None:
            start_xy = state.finger_pose.position[:2].copy()
            prev_angle = math.atan2(xy[1], xy[0])
            continue
        ang = math.atan2(xy[1], xy[0])
        d = ang - prev_angle
        while d > math.pi:
            d -= 2 * math.pi
        while d < -math.pi:
            d += 2 * math.pi
        winding += d
        prev_angle = ang
        if abs(winding) >= 2 * math.pi:
            dist = np.linalg.norm(state.finger_pose.position[:2] - start_xy)
            assert dist < 0.02, f"loop closes {dist:.3f} m away from its start"
            closed = True
            break
    assert closed, "follower never completed a loop around the cylinder"


def test_edge_follower_deterministic():
    def run():
        cat = cylinder_catalog()
        rng = np.random.default_rng(7)
        state = reset(cat, 0, PlacementSpec(), NoiseParams(), rng)
        follower = EdgeFollower(state)
        actions = []
        for _ in range(120):
            a = follower(state)
            actions.append(a)
            state, events = step(state, a)
            follower.observe(state, events)
        return actions

    assert run() == run()


def test_edge_follower_approaches_after_contact_loss():
    cat = cylinder_catalog()
    rng = np.random.default_rng(8)
    state = reset(cat, 0, PlacementSpec(half_extent=1e-9, height_variance=0.0),
                  NoiseParams(), rng)
    follower = EdgeFollower(state)
    for _ in range(400):
        a = follower(state)
        prev_contacted = follower.mem.last_contacted
        state, events = step(state, a)
        follower.observe(state, events)
        if follower.mem.contour_z is not None and not follower.mem.last_contacted \
                and abs(state.finger_pose.position[2] - follower.mem.contour_z) < 0.005:
            nxt = follower(state)
            disp = np.zeros(3)
            from tactrec.geometry import action_displacement
            disp = action_displacement(nxt)
            if np.linalg.norm(disp) > 0:
                assert float(disp @ (-follower.mem.last_normal)) > 0
                return
    pytest.skip("no contact-loss state reached on this trajectory")


# ---------------------------------------------------------------------------
# rigid registration

def test_icp_selfmatch_subset():
    ref = CATALOG[2].surface_samples(500, seed=0)
    observed = ref[fps(ref, 0.2)]
    err, (r, t) = icp_align(observed, ref, 0.0)
    assert err <= 1e-9
    assert np.allclose(r, np.eye(3), atol=1e-6)


def test_icp_recovers_known_yaw():
    ref = CATALOG[3].surface_samples(400, seed=1)
    yaw = math.radians(40.0)
    c, s = math.cos(yaw), math.sin(yaw)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    observed = ref @ rz.T
    err, _ = icp_align(observed, ref, 40.0)
    assert err <= 1e-6


def test_icp_error_history_non_increasing():
    rng = np.random.default_rng(9)
    ref = CATALOG[1].surface_samples(300, seed=2)
    observed = ref[rng.choice(300, size=60, replace=False)] + \
        rng.normal(scale=0.002, size=(60, 3))
    _, _, history = icp_align(observed, ref, 90.0, with_history=True)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_icp_degenerate_observed_infinite():
    ref = CATALOG[0].surface_samples(100, seed=0)
    err, _ = icp_align(np.zeros((2, 3)), ref, 0.0)
    assert err == math.inf


def test_icp_rigid_invariance():
    rng = np.random.default_rng(10)
    ref = CATALOG[4].surface_samples(300, seed=3)
    observed = ref[rng.choice(300, size=80, replace=False)]
    base, _ = icp_align(observed, ref, 10.0)
    yaw = math.radians(25.0)
    c, s = math.cos(yaw), math.sin(yaw)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    shift = np.array([0.03, -0.02, 0.01])
    moved_obs = observed @ rz.T + shift
    moved_ref = ref @ rz.T + shift
    moved, _ = icp_align(moved_obs, moved_ref, 10.0)
    assert moved == pytest.approx(base, abs=1e-9)


def test_threshold_decay_tightest_nonempty():
    cfg = IcpConfig()
    errors = np.array([4.9e-3, 2.0e-3, 1.0e-4])
    mask = threshold_decay_match(errors, cfg)
    assert list(mask) == [False, False, True]
    errors = np.array([6e-3, 7e-3])
    assert not threshold_decay_match(errors, cfg).any()
    # one matched at the start threshold stays matched
    errors = np.array([4.99e-3, 1.0])
    mask = threshold_decay_match(errors, cfg)
    assert list(mask) == [True, False]


def test_icp_discriminate_selfmatch_single():
    cfg = IcpConfig(reference_points=300, yaw_starts=12)
    refs = [o.surface_samples(cfg.reference_points, cfg.reference_seed)
            for o in CATALOG[:4]]
    out = icp_discriminate(refs[2], refs, cfg)
    assert out.prediction == 2
    assert out.confidence == pytest.approx(1.0)


def test_icp_discriminate_tie_splits_mass():
    cfg = IcpConfig(reference_points=200, yaw_starts=8)
    ref = CATALOG[0].surface_samples(200, seed=0)
    refs = [ref, ref.copy(), CATALOG[1].surface_samples(200, seed=0)]
    out = icp_discriminate(ref, refs, cfg)
    assert out.probs[0] == pytest.approx(0.5)
    assert out.probs[1] == pytest.approx(0.5)
    assert out.probs[2] == 0.0
    assert out.confidence == pytest.approx(0.5)
    assert out.confidence < 0.98


def test_icp_discriminate_none_matched_uniform():
    cfg = IcpConfig(reference_points=100, yaw_starts=4)
    refs = [o.surface_samples(100, 0) for o in CATALOG[:5]]
    far = np.random.default_rng(3).uniform(10.0, 11.0, size=(50, 3))
    out = icp_discriminate(far, refs, cfg)
    assert np.allclose(out.probs, 0.2)


# ---------------------------------------------------------------------------
# all-in-one

def aio_model(n_classes=10):
    return ModelSpec(sa1_widths=(16, 16), sa2_widths=(24, 24), global_widths=(32,),
                     head_hidden=24, n_classes=n_classes,
                     n_actions=12 + n_classes)


def test_all_in_one_zero_head_uniform_22():
    rng = np.random.default_rng(11)
    model = aio_model()
    params = init_all_in_one(model, rng)
    for k in params:
        if k.startswith("actor."):
            params[k] = np.zeros_like(params[k])
    state, _ = fresh(oid=0, seed=12)
    from tactrec.env import obs_explorer
    from tactrec.baselines import all_in_one_policy
    probs, _ = all_in_one_policy(model, params, obs_explorer(state))
    assert probs.shape == (22,)
    assert np.allclose(probs, 1.0 / 22, atol=1e-12)


def test_all_in_one_prediction_terminates():
    rng = np.random.default_rng(13)
    model = aio_model()
    params = init_all_in_one(model, rng)
    # bias the head hard toward predict-code for class 3 (head code 15)
    params["actor.b1"] = np.zeros_like(params["actor.b1"])
    params["actor.b1"][15] = 50.0
    state, erng = fresh(oid=3, seed=14)
    res = run_all_in_one_episode(model, params, state, TrainConfig(), erng)
    assert res.terminated_by == "prediction"
    assert res.prediction == 3
    assert res.success
    assert res.reward == 1.0
    assert res.actions == 1


def test_all_in_one_wrong_prediction_zero_reward():
    rng = np.random.default_rng(15)
    model = aio_model()
    params = init_all_in_one(model, rng)
    params["actor.b1"] = np.zeros_like(params["actor.b1"])
    params["actor.b1"][12] = 50.0  # always predict class 0
    state, erng = fresh(oid=5, seed=16)
    res = run_all_in_one_episode(model, params, state, TrainConfig(), erng)
    assert res.terminated_by == "prediction"
    assert not res.success
    assert res.reward == 0.0


@pytest.mark.slow
def test_all_in_one_single_object_toy_concentrates():
    model = aio_model(n_classes=1)  # 13 actions: 12 moves + 1 predict
    config = TrainConfig(iterations=30, rollout_steps=48, max_steps=6,
                         ppo_epochs=2, minibatch=24, entropy_coef=0.003,
                         lr_explorer=3e-3)
    rng = np.random.default_rng(17)
    params, rows = train_all_in_one([CATALOG[0]], config, rng, model=model,
                                    object_ids=[0])
    state, erng = fresh(oid=0, seed=18)
    from tactrec.env import obs_explorer
    from tactrec.baselines import all_in_one_policy
    probs, _ = all_in_one_policy(model, params, obs_explorer(state))
    assert probs[12] > 0.8


# ---------------------------------------------------------------------------
# registry

def test_registry_names():
    assert set(METHODS) == {"not-go-back", "info-gain", "edge-follower",
                            "edge-icp", "ppo-icp", "all-in-one", "tandem3d"}
    assert METHODS["edge-follower"].contact_noise_free_training
    assert not METHODS["edge-icp"].learning_based
    assert METHODS["tandem3d"].trains_explorer
    assert METHODS["tandem3d"].trains_discriminator
