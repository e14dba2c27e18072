"""2D kinematic multi-task manipulation world.

Scenes hold 2-4 typed disc objects in the unit square; the effector is a point
with height z (1 = raised) and aperture g (1 = open). Four task families --
press, grasp, push, pick-place -- each have an exact success predicate, and the
task-agnostic filter marks a trajectory useful when it satisfies *any* task
instantiable from the scene's objects.

States are immutable values; `step` returns a new state, so rollouts can share
a world freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import WorldConfig
from .seeding import rng_for

FAMILIES = ("press", "grasp", "push", "pick-place")


class WorldError(ValueError):
    """Invalid task/scene combination or impossible generation request."""


@dataclass(frozen=True, eq=False)
class ObjectType:
    type_id: int
    feature: np.ndarray  # fixed descriptor, identical wherever the type appears
    pressable: bool
    graspable: bool
    radius: float


@dataclass(frozen=True)
class SceneObject:
    type: ObjectType
    x: float
    y: float


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    effector_start: tuple[float, float]


@dataclass(frozen=True)
class WorldState:
    eff: tuple[float, float, float, float]  # x, y, z (1 = up), aperture (1 = open)
    obj_xy: tuple[tuple[float, float], ...]
    held: int | None
    t: int


@dataclass(frozen=True)
class Task:
    family: str
    subject: int  # type-id
    target: int | None = None
    split: str = field(default="train", compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise WorldError(f"unknown task family: {self.family}")

    @property
    def key(self) -> tuple:
        return (self.family, self.subject, self.target)


@dataclass(frozen=True)
class FilterResult:
    useful: bool
    achieved: tuple[Task, ...]  # ground truth; oracle-only, never read by pairing


@dataclass
class Trajectory:
    """Time-indexed (observation, action) pairs plus the scene they came from."""

    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, act_dim)
    scene: Scene

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass
class Rollout:
    trajectory: Trajectory
    states: list[WorldState]  # length T + 1, includes the initial state


def _flag_cycle(type_id: int) -> tuple[bool, bool]:
    # fixed affordance pattern so every contiguous type block has pressable,
    # graspable and dual-affordance members
    r = type_id % 5
    pressable = r in (0, 3)
    graspable = r != 3
    return pressable, graspable


class World:
    """Immutable world: a seeded object vocabulary plus the config tolerances."""

    def __init__(self, config: WorldConfig, seed: int):
        self.cfg = config
        self.seed = seed
        rng = rng_for(seed, "vocab")
        vocab = []
        for tid in range(config.vocab_size):
            feature = rng.uniform(-1.0, 1.0, size=config.feature_dim)
            radius = float(rng.uniform(config.radius_min, config.radius_max))
            pressable, graspable = _flag_cycle(tid)
            vocab.append(ObjectType(tid, feature, pressable, graspable, radius))
        self.vocab: tuple[ObjectType, ...] = tuple(vocab)
        self.train_type_ids = tuple(range(config.train_types))
        self.heldout_type_ids = tuple(range(config.train_types, config.vocab_size))

    # -- tasks -----------------------------------------------------------------

    def type(self, type_id: int) -> ObjectType:
        return self.vocab[type_id]

    def _candidate_tasks(self, pool: Sequence[int], split: str) -> dict[str, list[Task]]:
        pool = sorted(pool)
        by_family: dict[str, list[Task]] = {f: [] for f in FAMILIES}
        for a in pool:
            if self.type(a).pressable:
                by_family["press"].append(Task("press", a, split=split))
            if self.type(a).graspable:
                by_family["grasp"].append(Task("grasp", a, split=split))
        for a in pool:
            for b in pool:
                if a == b:
                    continue
                by_family["push"].append(Task("push", a, b, split=split))
                if self.type(a).graspable:
                    by_family["pick-place"].append(Task("pick-place", a, b, split=split))
        return by_family

    @staticmethod
    def _family_take(n: int, capacity: dict[str, int], label: str) -> dict[str, int]:
        if sum(capacity.values()) < n:
            raise WorldError(f"{label}: requested {n} tasks but only {sum(capacity.values())} are constructible")
        base = {f: n // 4 for f in FAMILIES}
        for i in range(n % 4):
            base[FAMILIES[i]] += 1
        take = {f: min(base[f], capacity[f]) for f in FAMILIES}
        short = n - sum(take.values())
        while short > 0:
            progressed = False
            for f in FAMILIES:
                if short > 0 and take[f] < capacity[f]:
                    take[f] += 1
                    short -= 1
                    progressed = True
            if not progressed:  # unreachable given the capacity check
                raise WorldError(f"{label}: cannot allocate {n} tasks across families")
        for f in FAMILIES:
            if take[f] == 0:
                raise WorldError(f"{label}: family {f} has no constructible task in this pool")
        return take

    def generate_task_sets(self) -> tuple[list[Task], list[Task], list[Task]]:
        """Deterministic train/val/test task lists; val and test use only held-out types."""
        cfg = self.cfg
        rng = rng_for(self.seed, "tasks")
        train_cand = self._candidate_tasks(self.train_type_ids, "train")
        train_take = self._family_take(cfg.n_train_tasks, {f: len(train_cand[f]) for f in FAMILIES}, "train tasks")
        train: list[Task] = []
        for f in FAMILIES:
            idx = rng.choice(len(train_cand[f]), size=train_take[f], replace=False)
            train.extend(train_cand[f][i] for i in sorted(idx))

        # val and test draw disjoint tasks from the held-out pool
        val_cand = self._candidate_tasks(self.heldout_type_ids, "val")
        val_take = self._family_take(cfg.n_val_tasks, {f: len(val_cand[f]) for f in FAMILIES}, "val tasks")
        remaining = {f: len(val_cand[f]) - val_take[f] for f in FAMILIES}
        test_take = self._family_take(cfg.n_test_tasks, remaining, "test tasks")
        val: list[Task] = []
        test: list[Task] = []
        for f in FAMILIES:
            count = val_take[f] + test_take[f]
            idx = sorted(rng.choice(len(val_cand[f]), size=count, replace=False))
            val.extend(val_cand[f][i] for i in idx[: val_take[f]])
            test.extend(
                Task(val_cand[f][i].family, val_cand[f][i].subject, val_cand[f][i].target, split="test")
                for i in idx[val_take[f] :]
            )
        return train, val, test

    # -- scenes ------------------------------------------------------------------

    def _split_pool(self, task: Task) -> Sequence[int]:
        return self.train_type_ids if task.split == "train" else self.heldout_type_ids

    def sample_scene(self, task: Task, seed) -> Scene:
        """Fresh arrangement containing the task's objects plus 0-2 distractors."""
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        mandatory = [task.subject] + ([task.target] if task.target is not None else [])
        low = max(0, 2 - len(mandatory))
        n_distract = int(rng.integers(low, cfg.max_distractors + 1))
        pool = self._split_pool(task)
        type_ids = mandatory + [int(pool[i]) for i in rng.integers(0, len(pool), size=n_distract)]
        order = rng.permutation(len(type_ids))  # subject slot must not be predictable
        placed: list[SceneObject] = []
        for idx in order:
            obj_type = self.type(type_ids[idx])
            r = obj_type.radius
            for attempt in range(200):
                x = float(rng.uniform(r, 1.0 - r))
                y = float(rng.uniform(r, 1.0 - r))
                gap_ok = all(
                    math.hypot(x - p.x, y - p.y) >= r + p.type.radius + cfg.scene_margin for p in placed
                )
                if gap_ok:
                    placed.append(SceneObject(obj_type, x, y))
                    break
            else:
                raise WorldError(f"scene placement failed for task {task.key}")
        start = (float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)))
        return Scene(tuple(placed), start)

    def validate_scene(self, scene: Scene) -> None:
        if not 2 <= len(scene.objects) <= self.cfg.object_slots:
            raise WorldError(f"scene must hold 2..{self.cfg.object_slots} objects, got {len(scene.objects)}")
        for i, a in enumerate(scene.objects):
            r = a.type.radius
            if not (r <= a.x <= 1 - r and r <= a.y <= 1 - r):
                raise WorldError(f"object {i} not fully inside the unit square")
            for b in scene.objects[i + 1 :]:
                if math.hypot(a.x - b.x, a.y - b.y) < a.type.radius + b.type.radius + 0.02:
                    raise WorldError("objects closer than the minimum separation")

    # -- dynamics ------------------------------------------------------------------

    def reset(self, scene: Scene) -> WorldState:
        return WorldState(
            eff=(scene.effector_start[0], scene.effector_start[1], 1.0, 1.0),
            obj_xy=tuple((o.x, o.y) for o in scene.objects),
            held=None,
            t=0,
        )

    def step(self, state: WorldState, scene: Scene, action) -> WorldState:
        cfg = self.cfg
        a = np.asarray(action, dtype=np.float64)
        a = np.clip(np.nan_to_num(a, nan=0.0, posinf=0.0, neginf=0.0), -cfg.action_limit, cfg.action_limit)
        ox, oy, oz, og = state.eff
        ex = min(max(ox + float(a[0]), 0.0), 1.0)
        ey = min(max(oy + float(a[1]), 0.0), 1.0)
        ez = min(max(oz + float(a[2]), 0.0), 1.0)
        eg = min(max(og + float(a[3]), 0.0), 1.0)

        held = state.held
        pos = [list(p) for p in state.obj_xy]
        if held is not None:
            pos[held][0], pos[held][1] = ex, ey

        if og <= 0.5 < eg:  # opening: drop in place
            held = None
        elif og > 0.5 >= eg and held is None and ez < cfg.low_z:  # closing: try to grasp
            best, best_d = None, None
            for i, obj in enumerate(scene.objects):
                if not obj.type.graspable:
                    continue
                d = math.hypot(ex - pos[i][0], ey - pos[i][1])
                if d <= obj.type.radius + cfg.grasp_reach and (best is None or d < best_d):
                    best, best_d = i, d
            if best is not None:
                held = best
                pos[held][0], pos[held][1] = ex, ey

        if ez < cfg.low_z and eg > 0.5:  # open hand at table level pushes
            for i, obj in enumerate(scene.objects):
                if i == held:
                    continue
                dx, dy = pos[i][0] - ex, pos[i][1] - ey
                d = math.hypot(dx, dy)
                rmin = obj.type.radius + cfg.contact_radius
                if d < rmin:
                    ux, uy = (dx / d, dy / d) if d > 1e-12 else (1.0, 0.0)
                    pos[i][0] = min(max(ex + ux * rmin, 0.0), 1.0)
                    pos[i][1] = min(max(ey + uy * rmin, 0.0), 1.0)

        return WorldState(
            eff=(ex, ey, ez, eg),
            obj_xy=tuple((p[0], p[1]) for p in pos),
            held=held,
            t=state.t + 1,
        )

    # -- observations ----------------------------------------------------------------

    def observe(self, state: WorldState, scene: Scene) -> np.ndarray:
        cfg = self.cfg
        obs = np.zeros(cfg.obs_dim)
        obs[0:4] = state.eff
        width = 4 + cfg.feature_dim
        for i, obj in enumerate(scene.objects):
            base = 4 + i * width
            obs[base] = 1.0
            obs[base + 1 : base + 1 + cfg.feature_dim] = obj.type.feature
            obs[base + 1 + cfg.feature_dim] = state.obj_xy[i][0]
            obs[base + 2 + cfg.feature_dim] = state.obj_xy[i][1]
            obs[base + 3 + cfg.feature_dim] = 1.0 if state.held == i else 0.0
        return obs

    def rollout(self, scene: Scene, action_fn: Callable[[WorldState, np.ndarray], np.ndarray], horizon=None) -> Rollout:
        horizon = self.cfg.horizon if horizon is None else horizon
        state = self.reset(scene)
        states = [state]
        obs_list, act_list = [], []
        for _ in range(horizon):
            obs = self.observe(state, scene)
            act = np.asarray(action_fn(state, obs), dtype=np.float64)
            obs_list.append(obs)
            act_list.append(act)
            state = self.step(state, scene, act)
            states.append(state)
        traj = Trajectory(np.array(obs_list), np.array(act_list), scene)
        return Rollout(traj, states)

    # -- predicates --------------------------------------------------------------------

    def enumerate_scene_tasks(self, scene: Scene) -> list[Task]:
        """Every task instantiable from the scene's object types; no 'do nothing' entry."""
        present = sorted({o.type.type_id for o in scene.objects})
        tasks: list[Task] = []
        for a in present:
            if self.type(a).pressable:
                tasks.append(Task("press", a, split="scene"))
            if self.type(a).graspable:
                tasks.append(Task("grasp", a, split="scene"))
        for a in present:
            for b in present:
                if a == b:
                    continue
                tasks.append(Task("push", a, b, split="scene"))
                if self.type(a).graspable:
                    tasks.append(Task("pick-place", a, b, split="scene"))
        return tasks

    def check_success(self, states: Sequence[WorldState], scene: Scene, task: Task) -> bool:
        arrays = _state_arrays(states)
        return self._check(arrays, scene, task)

    def _check(self, arrays: "_StateArrays", scene: Scene, task: Task) -> bool:
        cfg = self.cfg
        subjects = [i for i, o in enumerate(scene.objects) if o.type.type_id == task.subject]
        if not subjects:
            raise WorldError(f"task {task.key} references type {task.subject} absent from scene")
        if task.family in ("push", "pick-place"):
            targets = [i for i, o in enumerate(scene.objects) if o.type.type_id == task.target]
            if not targets:
                raise WorldError(f"task {task.key} references type {task.target} absent from scene")
        pos, held, eff = arrays.pos, arrays.held, arrays.eff
        radius = [o.type.radius for o in scene.objects]

        if task.family == "press":
            low = eff[:, 2] < cfg.press_z
            for i in subjects:
                d = np.hypot(eff[:, 0] - pos[:, i, 0], eff[:, 1] - pos[:, i, 1])
                if bool(np.any(low & (d <= radius[i] + cfg.press_tol))):
                    return True
            return False

        if task.family == "grasp":
            for i in subjects:
                if held[-1] == i:
                    moved = math.hypot(pos[-1, i, 0] - pos[0, i, 0], pos[-1, i, 1] - pos[0, i, 1])
                    if moved >= cfg.grasp_min_displacement:
                        return True
            return False

        if task.family == "push":
            for i in subjects:
                if np.any(held == i):
                    continue
                for j in targets:
                    if i == j:
                        continue
                    gap = math.hypot(pos[-1, i, 0] - pos[-1, j, 0], pos[-1, i, 1] - pos[-1, j, 1])
                    if gap <= radius[i] + radius[j] + cfg.push_tol:
                        return True
            return False

        # pick-place
        for i in subjects:
            if not np.any(held == i) or held[-1] == i:
                continue
            for j in targets:
                if i == j:
                    continue
                gap = math.hypot(pos[-1, i, 0] - pos[-1, j, 0], pos[-1, i, 1] - pos[-1, j, 1])
                if gap <= radius[i] + radius[j] + cfg.place_tol:
                    return True
        return False

    def filter_fn(self, states: Sequence[WorldState], scene: Scene) -> FilterResult:
        """TRUE iff the trajectory completed any task instantiable in this scene."""
        arrays = _state_arrays(states)
        achieved = tuple(t for t in self.enumerate_scene_tasks(scene) if self._check(arrays, scene, t))
        return FilterResult(useful=bool(achieved), achieved=achieved)

    def first_success_time(self, states: Sequence[WorldState], scene: Scene, task: Task) -> int | None:
        """Earliest state index whose prefix satisfies the task, or None."""
        arrays = _state_arrays(states)
        for t in range(1, arrays.eff.shape[0]):
            prefix = _StateArrays(arrays.eff[: t + 1], arrays.pos[: t + 1], arrays.held[: t + 1])
            if self._check(prefix, scene, task):
                return t
        return None


@dataclass
class _StateArrays:
    eff: np.ndarray  # (L, 4)
    pos: np.ndarray  # (L, n, 2)
    held: np.ndarray  # (L,) int, -1 when empty


def _state_arrays(states: Sequence[WorldState]) -> _StateArrays:
    if len(states) == 0:
        raise WorldError("empty trajectory")
    eff = np.array([s.eff for s in states])
    pos = np.array([s.obj_xy for s in states])
    held = np.array([-1 if s.held is None else s.held for s in states])
    return _StateArrays(eff, pos, held)
