import numpy as np
import pytest

from mili.config import ExpertConfig, WorldConfig
from mili.expert import ExpertFailure, collect_demos, expert_action, make_expert_policy
from mili.seeding import rng_for, seed_seq
from mili.world import FAMILIES, World


@pytest.fixture(scope="module")
def world():
    return World(WorldConfig(), seed=0)


@pytest.fixture(scope="module")
def train_tasks(world):
    return world.generate_task_sets()[0]


@pytest.mark.parametrize("family", FAMILIES)
def test_expert_closed_loop_success_rate(world, train_tasks, family):
    tasks = [t for t in train_tasks if t.family == family]
    ok = 0
    n = 50
    for ep in range(n):
        task = tasks[ep % len(tasks)]
        scene = world.sample_scene(task, seed_seq(201, "sc", family, ep))
        rng = rng_for(201, "no", family, ep)
        ro = world.rollout(scene, make_expert_policy(world, scene, task, rng))
        ok += int(world.check_success(ro.states, scene, task))
    assert ok / n >= 0.95


def test_near_zero_action_at_final_waypoint(world, train_tasks):
    task = next(t for t in train_tasks if t.family == "press")
    scene = world.sample_scene(task, seed_seq(202, "fin"))
    rng = rng_for(202, "fin")
    ro = world.rollout(scene, make_expert_policy(world, scene, task, rng))
    last = expert_action(world, ro.states[-1], scene, task, rng_for(0, "quiet"), noise_std=0.0)
    assert np.abs(last).max() <= 0.02


def test_pick_place_holds_then_releases_near_target(world, train_tasks):
    task = next(t for t in train_tasks if t.family == "pick-place")
    scene = world.sample_scene(task, seed_seq(203, "pp"))
    rng = rng_for(203, "pp")
    ro = world.rollout(scene, make_expert_policy(world, scene, task, rng))
    held_seq = [s.held for s in ro.states]
    assert any(h is not None for h in held_seq)
    assert held_seq[-1] is None
    assert world.check_success(ro.states, scene, task)


def test_collect_demos_all_successful_and_deterministic(world, train_tasks):
    tasks = train_tasks[:6]
    cfg = ExpertConfig(demos_per_task=4)
    data = collect_demos(world, tasks, seed=7, cfg=cfg)
    assert len(data) == 6
    for ds in data:
        assert len(ds.demos) == 4
        assert ds.provenance == "human-proxy"
        scenes = {tuple((o.type.type_id, o.x, o.y) for o in d.scene.objects) for d in ds.demos}
        assert len(scenes) == 4  # pairwise distinct arrangements
        for demo in ds.demos:
            assert 0 < len(demo) <= world.cfg.horizon
            assert np.isfinite(demo.actions).all()
    again = collect_demos(world, tasks, seed=7, cfg=cfg)
    for a, b in zip(data, again):
        for d1, d2 in zip(a.demos, b.demos):
            assert np.array_equal(d1.observations, d2.observations)
            assert np.array_equal(d1.actions, d2.actions)


def test_collect_demos_errors_when_task_impossible():
    # with a 3-step horizon no expert can finish anything
    world = World(WorldConfig(horizon=3), seed=0)
    task = world.generate_task_sets()[0][0]
    with pytest.raises(ExpertFailure, match="task"):
        collect_demos(world, [task], seed=0, cfg=ExpertConfig(max_attempts=3))
