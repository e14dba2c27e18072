"""Closed-loop scripted experts per task family, and initial demo collection.

Each expert is a pure function of the current state: the phase is re-derived
from the state every step, so no controller memory is needed and recovery from
noise comes for free. Demo collection re-draws failed rollouts on fresh scenes
so every stored demonstration satisfies its task's success predicate.

Physics notes that shape the scripts: an open hand below the interaction
height pushes objects away, so pressing descends with a *closed* hand, and
grasping closes the aperture during the final descent step so the grasp
trigger fires at the object center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ExpertConfig, WorldConfig
from .seeding import rng_for, seed_seq
from .world import Scene, Task, Trajectory, World, WorldState

TRAVEL_Z = 0.6
CARRY_Z = 0.7
PRESS_DEPTH = 0.03
ALIGN_TOL = 0.03  # loose enough that injected demo noise cannot stall a phase gate


class ExpertFailure(RuntimeError):
    """An expert could not produce a successful demo within the retry budget."""


@dataclass
class TaskDataset:
    """A task identity with trajectories treated as interchangeable demonstrations."""

    task: Task | None  # None for autonomously paired datasets (task unknown)
    demos: list[Trajectory]
    provenance: str  # "human-proxy" | "paired-trial"


def _goto(state: WorldState, tx, ty, tz, tg, gain, speed, noise_std=0.0, rng=None):
    ex, ey, ez, eg = state.eff
    a = gain * np.array([tx - ex, ty - ey, tz - ez, tg - eg])
    if noise_std > 0.0 and rng is not None:
        a[0] += rng.normal(0.0, noise_std)
        a[1] += rng.normal(0.0, noise_std)
    return np.clip(a, -speed, speed)


def _nearest_instance(scene: Scene, type_id: int, ref_xy) -> int:
    best, best_d = None, None
    for i, obj in enumerate(scene.objects):
        if obj.type.type_id != type_id:
            continue
        d = math.hypot(obj.x - ref_xy[0], obj.y - ref_xy[1])
        if best is None or d < best_d:
            best, best_d = i, d
    if best is None:
        raise ExpertFailure(f"type {type_id} absent from scene")
    return best


def _closest_pair(scene: Scene, subject: int, target: int) -> tuple[int, int]:
    best, best_d = None, None
    for i, a in enumerate(scene.objects):
        if a.type.type_id != subject:
            continue
        for j, b in enumerate(scene.objects):
            if j == i or b.type.type_id != target:
                continue
            d = math.hypot(a.x - b.x, a.y - b.y)
            if best is None or d < best_d:
                best, best_d = (i, j), d
    if best is None:
        raise ExpertFailure(f"no ({subject}, {target}) instance pair in scene")
    return best


def _carry_point(scene: Scene, idx: int) -> tuple[float, float]:
    # displace at least 0.16 from the start position, headed toward the center
    x0, y0 = scene.objects[idx].x, scene.objects[idx].y
    dx, dy = 0.5 - x0, 0.5 - y0
    norm = math.hypot(dx, dy)
    if norm < 1e-9:
        dx, dy, norm = 1.0, 0.0, 1.0
    return (x0 + 0.16 * dx / norm, y0 + 0.16 * dy / norm)


def expert_action(
    world: World, state: WorldState, scene: Scene, task: Task, rng, noise_std=0.015, max_speed=0.07, gain=0.6
) -> np.ndarray:
    """One proportional-control action toward the task's current waypoint.

    Transit runs a gain-limited proportional controller, so approaches slow
    down smoothly and demonstrations cover a graded tube around the nominal
    path; the one decisive grasp step uses the full action limit instead.
    """
    cfg = world.cfg
    lim = cfg.action_limit
    ex, ey, ez, eg = state.eff

    def goto(tx, ty, tz, tg, quiet=False, full_speed=False):
        if full_speed:
            return _goto(state, tx, ty, tz, tg, 1.0, lim, 0.0, rng)
        return _goto(state, tx, ty, tz, tg, gain, min(max_speed, lim), 0.0 if quiet else noise_std, rng)

    if task.family == "press":
        # travel with the hand closing from the start: a closed hand cannot
        # shove the button, so the descent may begin early and keep servoing
        i = _nearest_instance(scene, task.subject, scene.effector_start)
        sx, sy = state.obj_xy[i]
        far = math.hypot(ex - sx, ey - sy) > 0.1
        if far or eg > 0.45:
            return goto(sx, sy, TRAVEL_Z, 0.3)
        return goto(sx, sy, PRESS_DEPTH, 0.3)

    if task.family == "grasp":
        i = _nearest_instance(scene, task.subject, scene.effector_start)
        if state.held == i:
            if ez < 0.55:
                return goto(ex, ey, CARRY_Z, 0.3)
            cx, cy = _carry_point(scene, i)
            return goto(cx, cy, CARRY_Z, 0.3)
        return _approach_and_grab(state, state.obj_xy[i], goto)

    if task.family == "push":
        i, j = _closest_pair(scene, task.subject, task.target)
        return _push_toward(world, state, scene, i, j, goto)

    # pick-place
    i, j = _closest_pair(scene, task.subject, task.target)
    ri, rj = scene.objects[i].type.radius, scene.objects[j].type.radius
    tx, ty = state.obj_xy[j]
    if state.held == i:
        if ez < 0.55:
            return goto(ex, ey, CARRY_Z, 0.3)
        if math.hypot(ex - tx, ey - ty) > ALIGN_TOL:
            return goto(tx, ty, CARRY_Z, 0.3)
        return goto(tx, ty, CARRY_Z, 1.0)  # open above the target: crossing drops it there
    if state.held is not None:  # wrong object: release it from altitude
        if ez < 0.55:
            return goto(ex, ey, CARRY_Z, 0.3)
        return goto(ex, ey, CARRY_Z, 1.0)
    sx, sy = state.obj_xy[i]
    placed = math.hypot(sx - tx, sy - ty) <= ri + rj + world.cfg.place_tol - 0.01
    if placed:
        return goto(ex, ey, CARRY_Z, 1.0)
    return _approach_and_grab(state, (sx, sy), goto)


def _approach_and_grab(state: WorldState, subject_xy, goto):
    """Hover just above the object nearly closed, then descend-and-close in one step."""
    ex, ey, ez, eg = state.eff
    sx, sy = subject_xy
    if eg <= 0.5 and state.held is None:  # failed close: reopen from above
        return goto(ex, ey, 0.5, 1.0)
    aligned = math.hypot(ex - sx, ey - sy) <= ALIGN_TOL
    if aligned and ez <= 0.37 and eg <= 0.6:
        # the one decisive step: drop below the interaction height with the
        # aperture crossing closed, exactly over the object
        return goto(sx, sy, 0.25, 0.45, quiet=True, full_speed=True)
    return goto(sx, sy, 0.35, 0.55)


def _push_toward(world: World, state: WorldState, scene: Scene, i: int, j: int, goto):
    cfg = world.cfg
    ex, ey, ez, eg = state.eff
    sx, sy = state.obj_xy[i]
    tx, ty = state.obj_xy[j]
    rs = scene.objects[i].type.radius
    rt = scene.objects[j].type.radius
    gap = math.hypot(sx - tx, sy - ty) - (rs + rt)
    if state.held is not None:  # pushing must not carry anything
        if ez < 0.55:
            return goto(ex, ey, CARRY_Z, 0.3)
        return goto(ex, ey, CARRY_Z, 1.0)
    if gap <= cfg.push_tol - 0.02:
        return goto(ex, ey, CARRY_Z, 1.0)  # done: retreat upward, aperture open
    ux, uy = _unit(sx - tx, sy - ty)
    back = rs + cfg.contact_radius + 0.015
    # clamp into the workspace: near a wall the ideal behind-point may not exist
    behind = (min(max(sx + ux * back, 0.01), 0.99), min(max(sy + uy * back, 0.01), 0.99))
    # drive only while roughly behind the subject; a flank contact would shove
    # it off the push line
    es_x, es_y = _unit(sx - ex, sy - ey)
    pushing_toward_target = es_x * (-ux) + es_y * (-uy) > 0.6
    near = math.hypot(ex - sx, ey - sy) <= rs + 0.12
    if ez <= cfg.low_z + 0.02 and near and pushing_toward_target:
        aim = (sx + ux * max(rs - 0.01, 0.0), sy + uy * max(rs - 0.01, 0.0))
        return goto(aim[0], aim[1], 0.1, 1.0)
    if math.hypot(ex - behind[0], ey - behind[1]) > ALIGN_TOL:
        return goto(behind[0], behind[1], TRAVEL_Z, 1.0)
    return goto(behind[0], behind[1], 0.1, 1.0)


def _unit(dx: float, dy: float) -> tuple[float, float]:
    n = math.hypot(dx, dy)
    if n < 1e-9:
        return 1.0, 0.0
    return dx / n, dy / n


def make_expert_policy(world: World, scene: Scene, task: Task, rng, noise_std=0.015, max_speed=0.07):
    def act(state: WorldState, obs: np.ndarray) -> np.ndarray:
        return expert_action(world, state, scene, task, rng, noise_std, max_speed)

    return act


def roll_demo(world: World, task: Task, scene: Scene, rng, cfg: ExpertConfig) -> Trajectory | None:
    """One expert rollout, truncated shortly after first success; None on failure.

    Truncation keeps demonstrations dominated by purposeful motion instead of
    post-success hovering; the cut prefix still satisfies the task predicate.
    """
    ro = world.rollout(scene, make_expert_policy(world, scene, task, rng, cfg.noise_std, cfg.max_speed))
    t_star = world.first_success_time(ro.states, scene, task)
    if t_star is None:
        return None
    cut = min(t_star + cfg.success_tail, len(ro.trajectory))
    traj = ro.trajectory
    return Trajectory(traj.observations[:cut], traj.actions[:cut], scene)


def collect_demos(world: World, tasks: list[Task], seed: int, cfg: ExpertConfig) -> list[TaskDataset]:
    """Expert rollouts on fresh scenes; failures are re-drawn so all demos succeed."""
    datasets = []
    for ti, task in enumerate(tasks):
        demos: list[Trajectory] = []
        for di in range(cfg.demos_per_task):
            for attempt in range(cfg.max_attempts):
                scene = world.sample_scene(task, seed_seq(seed, "demo-scene", ti, di, attempt))
                rng = rng_for(seed, "demo-noise", ti, di, attempt)
                demo = roll_demo(world, task, scene, rng, cfg)
                if demo is not None:
                    demos.append(demo)
                    break
            else:
                raise ExpertFailure(f"expert failed {cfg.max_attempts} times on task {task.key}")
        datasets.append(TaskDataset(task, demos, "human-proxy"))
    return datasets
