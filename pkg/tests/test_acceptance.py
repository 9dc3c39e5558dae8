"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The end-to-end and ablation runs train real policies and take a few minutes
each; everything is seeded, so reruns are bit-reproducible.
"""
import json
import math
import time

import numpy as np
import pytest

from oracles import (
    gae_double_loop,
    goal_distance_formula,
    linear_scan_nn_vectorized,
    numeric_param_grads,
    rel_error,
)
from racon import features, geom
from racon.evaluation import emit_report, feature_fid, mmodality
from racon.features import KEY_DIM
from racon.gaits import generate_synthetic_clips
from racon.motion import CharacterState, Goal, transform_frame_planar
from racon.motion_prior import DiscBuffers, discriminator_loss, update_discriminator
from racon.nets import AdamState, backward, forward, mlp_init
from racon.retrieval import RetrievalEnv, build_database, knn_search
from racon.rewards import (
    RewardWeights,
    composite_rewards,
    goal_distance,
    goal_reward,
    prior_reward,
    reference_reward,
)
from racon.service import SteeringSession
from racon.training import TrainConfig, load_checkpoint, save_checkpoint, train

GATE = "ACCEPTANCE"

# Toy-task scale shared by the end-to-end run and the ablations.
E2E_CLIPS_PER_STYLE = 1000          # walk + turn >= 2,000 clips total
E2E_CONFIG = dict(
    env_count=16, horizon=150, iterations=120, hidden=(64, 64), lr=5e-4,
    disc_steps=16, disc_lr=3e-4, minibatch=512, buffer_capacity=20_000,
)
ABLATION_SEEDS = (0, 1, 2, 3, 4)

# Discriminator ablation task: style guidance routed through the adversarial
# prior alone (no hand-crafted reference reward), so the arms differ exactly
# in the mechanism under test: what the discriminator sees in the third slot.
FIG_ABLATION_CONFIG = dict(
    env_count=8, horizon=150, iterations=100, hidden=(64, 64), lr=5e-4,
    disc_steps=16, disc_lr=3e-4, minibatch=512, buffer_capacity=20_000,
    reward=RewardWeights(goal=0.2, reference=0.0, prior_ctrl=0.8),
)

# Retriever ablation task: standard reward mix, where reference quality
# (and therefore query weighting) drives the velocity error of the system.
RETR_ABLATION_CONFIG = dict(
    env_count=8, horizon=150, iterations=60, hidden=(64, 64), lr=5e-4,
    disc_steps=4, minibatch=512, buffer_capacity=20_000,
)


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"[{GATE}] {'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def toy_dbs():
    walk = generate_synthetic_clips("walk", E2E_CLIPS_PER_STYLE, 7)
    turn = generate_synthetic_clips("turn", E2E_CLIPS_PER_STYLE, 8, id_start=2_000_000)
    return {
        "walk": build_database(walk, "walk"),
        "turn": build_database(turn, "turn"),
    }


@pytest.fixture(scope="module")
def zombie_db_big():
    clips = generate_synthetic_clips("zombie", 142, 9, id_start=4_000_000)
    return build_database(clips, "zombie")


def final_goal_return(metrics, frac=0.25):
    tail = metrics[-max(1, int(len(metrics) * frac)):]
    return float(np.mean([m["goal_return"] for m in tail]))


def final_metric(metrics, key, frac=0.25):
    tail = metrics[-max(1, int(len(metrics) * frac)):]
    return float(np.mean([m[key] for m in tail]))


@pytest.fixture(scope="module")
def e2e_result(toy_dbs, tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    cfg = TrainConfig(seed=3, checkpoint_every=120, **E2E_CONFIG)
    started = time.perf_counter()
    result = train(cfg, out_dir=str(out), databases=toy_dbs)
    result.wall_seconds = time.perf_counter() - started
    return result


@pytest.fixture(scope="module")
def disc_ablation_results(toy_dbs):
    """Frozen-retriever runs with and without the retrieved third state."""
    runs = {"ra": [], "nonra": []}
    for seed in ABLATION_SEEDS:
        for name, ra in (("ra", True), ("nonra", False)):
            cfg = TrainConfig(
                seed=seed, learnable_retriever=False, ra_disc=ra, **FIG_ABLATION_CONFIG
            )
            runs[name].append(train(cfg, databases=toy_dbs).metrics)
    return runs


@pytest.fixture(scope="module")
def retr_ablation_results(toy_dbs):
    """Learnable vs frozen (weights-at-1) retriever under the standard rewards."""
    runs = {"learnable": [], "frozen": []}
    for seed in ABLATION_SEEDS:
        for name, learnable in (("learnable", True), ("frozen", False)):
            cfg = TrainConfig(
                seed=seed, learnable_retriever=learnable, ra_disc=True, **RETR_ABLATION_CONFIG
            )
            runs[name].append(train(cfg, databases=toy_dbs).metrics)
    return runs


# --- 1. retrieval exactness -----------------------------------------------------


def test_retrieval_exactness():
    clips = generate_synthetic_clips("walk", 4000, 11) + generate_synthetic_clips(
        "run", 3000, 12, id_start=1_000_000
    ) + generate_synthetic_clips("turn", 3000, 13, id_start=2_000_000)
    db = build_database(clips, "mixed10k")
    assert len(db) == 10_000
    rng = np.random.default_rng(99)
    queries = rng.normal(size=(1000, KEY_DIM)) * 1.5
    weights = rng.uniform(0, 2, size=(1000, KEY_DIM))
    started = time.perf_counter()
    hits = 0
    for q, w in zip(queries, weights):
        got = knn_search(db, w * q, 1, weights=w)[0]
        idx, dist = linear_scan_nn_vectorized(db.keys, w * q, w)
        hits += got[0] == db.clips[idx].clip_id and abs(got[1] - dist) < 1e-12
    elapsed = time.perf_counter() - started
    report(
        "retrieval exactness",
        hits == 1000 and elapsed < 10.0,
        f"({hits}/1000 oracle matches in {elapsed:.2f}s)",
    )


# --- 2. stitch continuity -------------------------------------------------------


def test_stitch_continuity(toy_dbs):
    rng = np.random.default_rng(5)
    env = RetrievalEnv(toy_dbs, period=15)
    goal = Goal(desired_velocity=(1.0, 0.0))
    base = toy_dbs["walk"].clips[0].frames[0]
    worst_pos, worst_yaw = 0.0, 0.0
    boundaries = 0
    state = env.initial_state("walk")
    character = CharacterState(frame=base)
    while boundaries < 1000:
        if state.retr_flag:
            db_select = ("walk", "turn")[int(rng.integers(2))]
            state, ref = env.step(
                state, rng.uniform(0, 2, KEY_DIM), character, goal, db_select=db_select
            )
            anchor = state.anchor
            worst_pos = max(
                worst_pos,
                float(np.max(np.abs(anchor.frame.root_pos[:2] - character.frame.root_pos[:2]))),
            )
            worst_yaw = max(
                worst_yaw, abs(geom.wrap_pi(anchor.frame.yaw - character.frame.yaw))
            )
            boundaries += 1
        else:
            state, ref = env.step(state, None, character, goal)
        character = ref
        if rng.uniform() < 0.1:  # jitter the character away from the reference
            character = CharacterState(
                frame=transform_frame_planar(
                    character.frame, rng.normal(0, 0.4), rng.normal(0, 0.5, 2)
                ),
                time_index=character.time_index,
            )
    report(
        "stitch continuity",
        worst_pos < 1e-9 and worst_yaw < 1e-9,
        f"(1000 boundaries, worst pos {worst_pos:.2e} m, worst yaw {worst_yaw:.2e} rad)",
    )


# --- 3. reward closed forms -----------------------------------------------------


def test_reward_closed_forms(toy_dbs):
    w = RewardWeights()
    base = toy_dbs["walk"].clips[0].frames[0]
    state = CharacterState(
        frame=transform_frame_planar(base, -base.yaw, -geom.rotate_xy(base.root_pos[:2], -base.yaw))
    )
    ok = True

    # d = 0 -> r^g = 1, on an exactly-representable velocity match
    clean = CharacterState(
        frame=type(base)(
            root_pos=(0.0, 0.0, 1.0),
            root_rot=geom.quat_from_yaw(0.0),
            root_linvel=(1.0, 0.0, 0.0),
            root_angvel=(0.0, 0.0, 0.0),
            endpoints=base.endpoints,
            endpoint_vels=base.endpoint_vels,
        )
    )
    goal = Goal(desired_velocity=(1.0, 0.0))
    ok &= goal_reward(goal, clean, w) == 1.0

    # prior reward closed forms
    ok &= prior_reward(0.0, 1.0, 1e-4) == 0.0
    ok &= abs(prior_reward(0.5, 1.0, 1e-4) - math.log(2.0)) < 1e-12

    # reference reward at sim == ref equals the weight sum
    ok &= abs(reference_reward(state, state, w) - (w.height + w.root_rot + w.root_angvel + w.endpoints)) < 1e-12

    # 1e4 random inputs vs independent oracles
    rng = np.random.default_rng(17)
    states = [CharacterState(frame=f) for c in toy_dbs["walk"].clips[:40] for f in c.frames]
    states += [CharacterState(frame=f) for c in toy_dbs["turn"].clips[:40] for f in c.frames]
    worst = 0.0
    for _ in range(10_000):
        gv = rng.normal(size=2) * 2
        facing = rng.uniform(-math.pi, math.pi) if rng.uniform() < 0.5 else None
        goal = Goal(desired_velocity=gv, desired_facing=facing)
        s = states[rng.integers(len(states))]
        d_got = goal_distance(goal, s.frame.root_linvel[:2], s.frame.yaw, w)
        d_expect = goal_distance_formula(
            gv, facing, s.frame.root_linvel[:2], s.frame.yaw, w.c_dir, w.c_speed, w.c_face
        )
        worst = max(worst, abs(d_got - d_expect))
        worst = max(worst, abs(goal_reward(goal, s, w) - math.exp(-d_expect)))
        d_out = float(rng.uniform(1e-6, 1 - 1e-6))
        worst = max(
            worst,
            abs(prior_reward(d_out, w.alpha, w.eps) - (-w.alpha * math.log(max(1 - d_out, w.eps)))),
        )
        ref = states[rng.integers(len(states))]
        r_ref = reference_reward(s, ref, w)
        r_h = math.exp(-w.k_height * (s.frame.height - ref.frame.height) ** 2)
        qa = geom.remove_yaw(s.frame.root_rot)
        qb = geom.remove_yaw(ref.frame.root_rot)
        ang = 2.0 * math.acos(min(1.0, abs(float(np.dot(qa, qb)))))
        r_rot = math.exp(-w.k_root_rot * ang * ang)
        dw = s.frame.root_angvel - ref.frame.root_angvel
        r_av = math.exp(-w.k_root_angvel * float(dw @ dw))
        dee = s.frame.endpoints - ref.frame.endpoints
        r_ee = math.exp(-w.k_endpoints * float(np.mean(np.sum(dee * dee, axis=1))))
        expect_ref = w.height * r_h + w.root_rot * r_rot + w.root_angvel * r_av + w.endpoints * r_ee
        worst = max(worst, abs(r_ref - expect_ref))
        pair = composite_rewards(0.5, 1.0, 0.25, r_ref, d_out, w)
        worst = max(worst, abs(pair[0] - (w.goal_tilde * 0.5 + w.prior_retr * 1.0)))
        worst = max(worst, abs(pair[1] - (w.goal * 0.25 + w.reference * r_ref + w.prior_ctrl * d_out)))
    ok &= worst < 1e-12
    report("reward closed forms", bool(ok), f"(worst oracle deviation {worst:.2e})")


# --- 4. gradient correctness ----------------------------------------------------


def test_gradient_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(23)
    worst_plain, worst_gp = 0.0, 0.0
    for trial in range(20):
        sizes = [(5, 8, 1), (6, 10, 4), (4, 12, 6, 2)][trial % 3]
        mlp = mlp_init(sizes[0], sizes[-1], rng, hidden=sizes[1:-1])
        for b in mlp.biases:
            b += rng.normal(0, 0.3, b.shape)
        x = rng.normal(size=(3, sizes[0]))
        seed_grad = rng.normal(size=(3, sizes[-1]))

        def scalar():
            y, _ = forward(mlp, x)
            return float(np.sum(y * seed_grad))

        _, cache = forward(mlp, x)
        grads, _ = backward(cache, seed_grad)
        for got, expect in zip(grads.params(), numeric_param_grads(scalar, mlp.params())):
            worst_plain = max(worst_plain, rel_error(got, expect, floor=1e-6))

    for trial in range(20):
        mlp = mlp_init(5, 1, rng, hidden=(8,) if trial % 2 else (6, 6))
        for b in mlp.biases:
            b += rng.normal(0, 0.3, b.shape)
        demo = rng.normal(size=(4, 5))
        fake = rng.normal(size=(4, 5)) + 0.3

        def disc_loss():
            return discriminator_loss(mlp, demo, fake, gp_weight=10.0)[0]

        _, grads, _, _, _ = discriminator_loss(mlp, demo, fake, gp_weight=10.0)
        for got, expect in zip(grads.params(), numeric_param_grads(disc_loss, mlp.params())):
            worst_gp = max(worst_gp, rel_error(got, expect, floor=1e-7))

    elapsed = time.perf_counter() - started
    ok = worst_plain <= 1e-4 and worst_gp <= 1e-3 and elapsed < 120.0
    report(
        "gradient correctness",
        ok,
        f"(plain rel {worst_plain:.2e}, with-GP rel {worst_gp:.2e}, {elapsed:.1f}s)",
    )


# --- 5. GAE oracle ----------------------------------------------------------------


def test_gae_oracle():
    rng = np.random.default_rng(31)
    worst = 0.0
    from racon.training import compute_gae

    for _ in range(50):
        rewards = rng.normal(size=100)
        values = rng.normal(size=101)
        dones = rng.uniform(size=100) < 0.08
        adv, ret = compute_gae(rewards, values, dones, 0.97, 0.95)
        oadv, oret = gae_double_loop(rewards, values, dones, 0.97, 0.95)
        worst = max(worst, float(np.max(np.abs(adv - oadv))), float(np.max(np.abs(ret - oret))))
    report("GAE oracle", worst < 1e-10, f"(worst deviation {worst:.2e})")


# --- 6. discriminator sanity -------------------------------------------------------


def test_discriminator_sanity(toy_dbs):
    rng = np.random.default_rng(41)
    dim = features.DISC_DIM
    demo_rows = []
    for clip in toy_dbs["walk"].clips[:200]:
        for t in range(0, len(clip.frames) - 2, 3):
            from racon.motion_prior import assemble_demo_triplet

            demo_rows.append(assemble_demo_triplet(clip, t).obs)
    demo_rows = np.stack(demo_rows)

    # separation: walk demos vs white noise
    mlp = mlp_init(dim, 1, rng, hidden=(64, 64))
    buffers = DiscBuffers.create(dim, 20_000)
    buffers.demo.push(demo_rows)
    buffers.fake.push(rng.normal(size=(4000, dim)))
    adam = AdamState.for_params(mlp.params())
    stats = update_discriminator(
        buffers, mlp, adam, steps=500, rng=rng, lr=1e-3, gp_weight=10.0
    )
    d_demo, d_fake = stats.demo_mean, stats.fake_mean
    sep_ok = d_demo > 0.9 and d_fake < 0.1

    # no separation on identical distributions
    mlp2 = mlp_init(dim, 1, rng, hidden=(64, 64))
    buffers2 = DiscBuffers.create(dim, 20_000)
    half = demo_rows.shape[0] // 2
    buffers2.demo.push(demo_rows[:half])
    buffers2.fake.push(demo_rows[half:])
    adam2 = AdamState.for_params(mlp2.params())
    stats2 = update_discriminator(
        buffers2, mlp2, adam2, steps=500, rng=rng, lr=3e-4, gp_weight=10.0
    )
    d_demo2, d_fake2 = stats2.demo_mean, stats2.fake_mean
    same_ok = abs(d_demo2 - d_fake2) < 0.2
    report(
        "discriminator sanity",
        sep_ok and same_ok,
        f"(separated {d_demo:.3f}/{d_fake:.3f}; same-dist gap {abs(d_demo2 - d_fake2):.3f})",
    )


# --- 7. end-to-end toy training ------------------------------------------------------


def test_e2e_toy_training(e2e_result, toy_dbs, tmp_path):
    goal_return = final_goal_return(e2e_result.metrics)
    trate = final_metric(e2e_result.metrics, "trate")
    mve_retr = final_metric(e2e_result.metrics, "mve_retr")
    # report mirrors the headline table structure: full system plus the
    # retrieved-stream row (velocity error only)
    report_payload = {
        "system": {
            "mve": final_metric(e2e_result.metrics, "mve_sim"),
            "trate": trate,
            "goal_return": goal_return,
        },
        "retrieved_stream": {"mve": mve_retr},
        "wall_seconds": e2e_result.wall_seconds,
    }
    emit_report(report_payload, tmp_path / "e2e_report.json")
    ok = (
        goal_return > 0.6
        and trate < 20.0
        and math.isfinite(mve_retr)
        and (tmp_path / "e2e_report.json").exists()
        and e2e_result.wall_seconds < 7200.0
    )
    report(
        "end-to-end toy training",
        ok,
        f"(goal return {goal_return:.3f}, TRate {trate:.1f}%, retrieved-stream MVE "
        f"{mve_retr:.3f} m/s, {e2e_result.wall_seconds:.0f}s)",
    )


# --- 8. directional ablation: RA discriminator --------------------------------------


def test_fig6_directional_ablation(disc_ablation_results):
    ra = [final_goal_return(m) for m in disc_ablation_results["ra"]]
    nonra = [final_goal_return(m) for m in disc_ablation_results["nonra"]]
    med_ra, med_nonra = float(np.median(ra)), float(np.median(nonra))
    var_ra, var_nonra = float(np.var(ra)), float(np.var(nonra))
    ok = med_ra >= med_nonra and var_ra <= var_nonra
    report(
        "RA-discriminator directional ablation",
        ok,
        f"(median goal return {med_ra:.3f} vs {med_nonra:.3f}; "
        f"variance {var_ra:.6f} vs {var_nonra:.6f}; seeds {list(ABLATION_SEEDS)})",
    )


# --- 9. directional ablation: learnable retriever -----------------------------------


def test_table2_directional_ablation(retr_ablation_results):
    learnable = [final_metric(m, "mve_sim") for m in retr_ablation_results["learnable"]]
    frozen = [final_metric(m, "mve_sim") for m in retr_ablation_results["frozen"]]
    med_l, med_f = float(np.median(learnable)), float(np.median(frozen))
    # retrieved-stream comparison is reported without a required direction
    retr_l = float(np.median([final_metric(m, "mve_retr") for m in retr_ablation_results["learnable"]]))
    retr_f = float(np.median([final_metric(m, "mve_retr") for m in retr_ablation_results["frozen"]]))
    ok = med_l <= med_f
    report(
        "learnable-retriever directional ablation",
        ok,
        f"(system MVE {med_l:.3f} vs frozen {med_f:.3f} m/s; "
        f"retrieved-stream MVE {retr_l:.3f} vs {retr_f:.3f}, no direction required)",
    )


# --- 10. run-time database switching --------------------------------------------------


def test_runtime_switching(e2e_result, toy_dbs, zombie_db_big, tmp_path):
    ckpt = tmp_path / "switch_ckpt.npz"
    save_checkpoint(
        ckpt, e2e_result.nets, e2e_result.adams, e2e_result.config, 1, e2e_result.buffers
    )
    bundle = load_checkpoint(str(ckpt))
    databases = dict(toy_dbs)
    databases["zombie"] = zombie_db_big
    session = SteeringSession("accept", bundle, databases, initial_db="walk", seed=0)
    session.submit({"type": "set_goal", "vx": 1.0, "vy": 0.0})
    walk_ids = toy_dbs["walk"].clip_ids() | toy_dbs["turn"].clip_ids()
    zombie_ids = zombie_db_big.clip_ids()
    for _ in range(300):
        session.tick()
    assert session.retr_state.current_clip in walk_ids
    session.submit({"type": "switch_db", "name": "zombie"})
    session.submit({"type": "set_goal", "vx": 0.0, "vy": 0.0})
    switched_at = None
    ok_ids = True
    terms_before = session.terminations
    for tick in range(300, 300 + 150 + 15):
        session.tick()
        current = session.retr_state.current_clip
        if switched_at is None:
            if current in zombie_ids:
                switched_at = tick
            else:
                assert current in walk_ids  # the old clip finishes first
        else:
            ok_ids &= current in zombie_ids
    ok = (
        switched_at is not None
        and switched_at <= 300 + 15
        and ok_ids
        and session.terminations == terms_before
    )
    report(
        "run-time database switching",
        ok,
        f"(boundary at tick {switched_at}, all ids zombie afterwards, "
        f"terminations {session.terminations - terms_before} in 5s)",
    )


# --- 11. FID and multimodality properties ---------------------------------------------


def test_fid_properties():
    rng = np.random.default_rng(53)
    feats = rng.normal(size=(2000, 16))
    self_fid = feature_fid(feats, feats)
    dim = 8
    offset = rng.normal(size=dim)
    a = rng.normal(size=(10_000, dim))
    b = rng.normal(size=(10_000, dim)) + offset
    fid = feature_fid(a, b)
    expect = float(offset @ offset)
    mm = mmodality(lambda goal, rep: np.arange(5.0), [Goal(desired_velocity=(1, 0))], m=3)
    ok = self_fid < 1e-6 and abs(fid - expect) / expect < 0.05 and mm == 0.0
    report(
        "FID properties",
        ok,
        f"(self-FID {self_fid:.2e}; offset case {fid:.3f} vs ||m||^2 {expect:.3f}; "
        f"deterministic multimodality {mm})",
    )


# --- 12. service timing ----------------------------------------------------------------


def test_service_timing(e2e_result, toy_dbs, tmp_path):
    from starlette.testclient import TestClient

    from racon.retrieval import save_database
    from racon.service import create_app

    ckpt = tmp_path / "svc_ckpt.npz"
    save_checkpoint(
        ckpt, e2e_result.nets, e2e_result.adams, e2e_result.config, 1, e2e_result.buffers
    )
    paths = []
    for name, db in toy_dbs.items():
        p = tmp_path / f"{name}.radb"
        save_database(db, p)
        paths.append(str(p))
    app = create_app(str(ckpt), paths, seed=0)
    with TestClient(app) as client:
        sid = client.post("/v1/sessions", json={"db": "walk"}).json()["session_id"]
        with client.websocket_connect(f"/v1/sessions/{sid}/channel") as ws:
            first = json.loads(ws.receive_text())
            while first["type"] != "frame":
                first = json.loads(ws.receive_text())
            t0 = time.perf_counter()
            first_tick = first["tick"]
            last_tick = first_tick
            ticks_seen = [first_tick]
            gaps = 0
            while time.perf_counter() - t0 < 10.0:
                msg = json.loads(ws.receive_text())
                if msg["type"] == "frame":
                    ticks_seen.append(msg["tick"])
                    last_tick = msg["tick"]
                elif msg["type"] == "gap":
                    gaps += 1
            frames = last_tick - first_tick + 1
            monotone = all(b > a for a, b in zip(ticks_seen, ticks_seen[1:]))

            # goal latency: the offline contract is deterministic (see unit
            # tests); over the live channel the echo must appear promptly
            ws.send_text(json.dumps({"type": "set_goal", "vx": 0.9, "vy": 0.0}))
            echo_after = None
            sent_tick = last_tick
            deadline = time.perf_counter() + 2.0
            while time.perf_counter() < deadline:
                msg = json.loads(ws.receive_text())
                if msg["type"] == "frame" and abs(msg["goal"]["vx"] - 0.9) < 1e-12:
                    echo_after = msg["tick"] - sent_tick
                    break
        client.delete(f"/v1/sessions/{sid}")
    session = app.state.sessions.get(sid)
    ok = 298 <= frames <= 302 and monotone and gaps == 0 and echo_after is not None and echo_after <= 4
    report(
        "service timing",
        ok,
        f"({frames} frames in 10.0s, ticks strictly increasing={monotone}, "
        f"goal echoed {echo_after} ticks after send)",
    )
