"""One-shot evaluation protocol, baselines, oracle pairing, and the trial sweep.

Protocol per episode: sample a demo scene, roll out the scripted expert there,
embed that demonstration, then evaluate the greedy policy on a *different*
arrangement of the same task. Episode RNG streams are method-independent, so
method comparisons are paired across seeds and episodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, ExpertConfig, NetConfig
from .expert import ExpertFailure, TaskDataset, make_expert_policy, roll_demo
from .loop import (
    MiliRun,
    TrialStore,
    _collect_cached,
    filter_and_store,
    pairing_precision,
    prepare_stage,
    random_pairing_precision,
    retrain,
    run_mili,
    train,
)
from .policy import embed, greedy_action, init_params, policy_forward
from .seeding import rng_for, seed_seq
from .world import FAMILIES, Task, World


@dataclass
class EvalResult:
    method: str
    seed: int
    successes: int
    episodes: int
    per_family: dict[str, float]
    episodes_per_task: int

    @property
    def overall(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "overall": self.overall,
            "successes": self.successes,
            "episodes": self.episodes,
            "per_family": dict(sorted(self.per_family.items())),
            "episodes_per_task": self.episodes_per_task,
        }


def _scene_signature(scene):
    return tuple((o.type.type_id, o.x, o.y) for o in scene.objects)


def evaluate_one_shot(
    world: World,
    params,
    tasks: list[Task],
    episodes_per_task: int,
    seed: int,
    net_cfg: NetConfig,
    expert_cfg: ExpertConfig,
    method: str = "",
    use_embedding: bool = True,
    policy_provider=None,
) -> EvalResult:
    """Greedy one-shot evaluation; never evaluates on the demo's arrangement."""
    fam_hits = {f: 0 for f in FAMILIES}
    fam_total = {f: 0 for f in FAMILIES}
    successes = 0
    for ti, task in enumerate(tasks):
        for ep in range(episodes_per_task):
            demo = None
            for attempt in range(expert_cfg.max_attempts):
                demo_scene = world.sample_scene(task, seed_seq(seed, "eval-demo-scene", ti, ep, attempt))
                rng_d = rng_for(seed, "eval-demo-noise", ti, ep, attempt)
                demo = roll_demo(world, task, demo_scene, rng_d, expert_cfg)
                if demo is not None:
                    break
            if demo is None:
                raise ExpertFailure(f"could not produce an eval demo for task {task.key}")
            eval_scene = world.sample_scene(task, seed_seq(seed, "eval-scene", ti, ep))
            assert _scene_signature(eval_scene) != _scene_signature(demo.scene), "demo arrangement leaked into eval"
            if policy_provider is not None:
                act = policy_provider(task, eval_scene, rng_for(seed, "eval-policy", ti, ep))
            else:
                emb = embed(params, demo, net_cfg).vec if use_embedding else None

                def act(state, obs, _emb=emb):
                    return greedy_action(policy_forward(params, obs, _emb, net_cfg))

            ro = world.rollout(eval_scene, act)
            ok = world.check_success(ro.states, eval_scene, task)
            successes += int(ok)
            fam_hits[task.family] += int(ok)
            fam_total[task.family] += 1
    per_family = {f: (fam_hits[f] / fam_total[f]) for f in FAMILIES if fam_total[f]}
    return EvalResult(
        method=method,
        seed=seed,
        successes=successes,
        episodes=sum(fam_total.values()),
        per_family=per_family,
        episodes_per_task=episodes_per_task,
    )


def expert_policy_provider(world: World, noise_std: float = 0.005):
    """Scripted expert standing in for the policy: the evaluation ceiling."""

    def provider(task, scene, rng):
        return make_expert_policy(world, scene, task, rng, noise_std)

    return provider


def random_policy_provider(limit: float = 0.1):
    """Uniform random actions: the evaluation floor."""

    def provider(task, scene, rng):
        def act(state, obs):
            return rng.uniform(-limit, limit, 4)

        return act

    return provider


# -- baselines -----------------------------------------------------------------------


def run_baseline_bc(config: ExperimentConfig, seed: int, cache=None):
    """Behavior cloning on all demos pooled, no task conditioning."""
    _, _, demos, _ = prepare_stage(config, seed, cache) if cache else _stage_no_pretrain(config, seed)
    pool = [d for ds in demos for d in ds.demos]
    params = init_params(config.net, config.world.obs_dim, config.world.act_dim, rng_for(seed, "bc-init"))
    result = train(
        params, demos, config.net, config.train, rng_for(seed, "bc"), loss="bc",
        steps=config.train.bc_steps, pooled_trajectories=pool,
    )
    return result.params


def _stage_no_pretrain(config, seed):
    # BC without a cache should not pay for pretraining it does not use
    from .expert import collect_demos

    world = World(config.world, seed)
    tasks = world.generate_task_sets()
    demos = collect_demos(world, tasks[0], seed, config.expert)
    return world, tasks, demos, None


def run_baseline_meta(config: ExperimentConfig, seed: int, cache=None):
    """Meta-imitation only: MILI with zero autonomous data."""
    _, _, _, pre = prepare_stage(config, seed, cache)
    return pre.params


# -- oracle pairing ------------------------------------------------------------------------


def oracle_pairing(store: TrialStore, pairs_only: bool = False) -> list[TaskDataset]:
    """Group trials by hidden achieved-task identity (upper reference for pairing)."""
    groups: dict[tuple, list[int]] = {}
    for idx, rec in enumerate(store.records):
        for task in rec.filter.achieved:
            groups.setdefault(task.key, []).append(idx)
    datasets: list[TaskDataset] = []
    for key in sorted(groups):
        idxs = groups[key]
        if len(idxs) < 2:
            continue
        family, subject, target = key
        task = Task(family, subject, target, split="oracle")
        if pairs_only:
            for a in range(len(idxs)):
                for b in range(a + 1, len(idxs)):
                    demos = [store.records[idxs[a]].trajectory, store.records[idxs[b]].trajectory]
                    datasets.append(TaskDataset(task, demos, "paired-trial"))
        else:
            demos = [store.records[i].trajectory for i in idxs]
            datasets.append(TaskDataset(task, demos, "paired-trial"))
    return datasets


def run_mili_oracle(config: ExperimentConfig, seed: int, cache=None, pairs_only: bool = False) -> MiliRun:
    """The improvement loop with pairing replaced by ground-truth grouping."""
    world, (train_tasks, val_tasks, test_tasks), demos, pre = prepare_stage(config, seed, cache)
    params = pre.params
    datasets = list(demos)
    store = TrialStore()
    report = {"seed": seed, "iterations": []}
    for it in range(config.mili.iterations):
        trials = _collect_cached(world, params, demos if it == 0 else datasets, config.mili.batch_size, seed, config, cache, it)
        passed = filter_and_store(world, trials, store)
        grouped = oracle_pairing(store, pairs_only=pairs_only)
        datasets = datasets + grouped
        stage = {
            "iteration": it,
            "trials": len(trials),
            "filter_passed": passed,
            "pass_rate": passed / len(trials) if trials else 0.0,
            "pairs": len(grouped),
        }
        if grouped:
            result = retrain(
                params, datasets, config.net, config.train, config.mili, seed, it,
                config.world.obs_dim, config.world.act_dim,
            )
            params = result.params
            stage["retrain_final_loss"] = result.curve[-1][1]
        report["iterations"].append(stage)
    eval_result = evaluate_one_shot(
        world, params, test_tasks, config.eval.episodes_per_task, seed, config.net, config.expert,
        method="mili-oracle-pairing",
    )
    report["eval"] = eval_result.as_dict()
    return MiliRun(
        world=world, train_tasks=train_tasks, val_tasks=val_tasks, test_tasks=test_tasks,
        demo_datasets=demos, datasets=datasets, params=params, pretrain_params=pre.params,
        store=store, report=report,
    )


# -- figure-analog drivers -----------------------------------------------------------------------


@dataclass
class ComparisonResult:
    results: list[EvalResult]  # one per (method, seed)
    reports: dict  # per-seed MILI stage reports

    def mean(self, method: str) -> float:
        vals = [r.overall for r in self.results if r.method == method]
        return float(np.mean(vals)) if vals else 0.0

    def values(self, method: str) -> list[float]:
        return [r.overall for r in sorted(self.results, key=lambda r: r.seed) if r.method == method]


def run_method_comparison(config: ExperimentConfig, seeds, cache=None) -> ComparisonResult:
    """BC vs meta-imitation vs MILI vs oracle-paired MILI on the test tasks."""
    cache = {} if cache is None else cache
    results: list[EvalResult] = []
    reports: dict = {}
    for seed in seeds:
        world, (_, _, test_tasks), demos, pre = prepare_stage(config, seed, cache)
        ev_kwargs = dict(
            tasks=test_tasks,
            episodes_per_task=config.eval.episodes_per_task,
            seed=seed,
            net_cfg=config.net,
            expert_cfg=config.expert,
        )
        bc_params = run_baseline_bc(config, seed, cache)
        results.append(evaluate_one_shot(world, bc_params, method="bc", use_embedding=False, **ev_kwargs))
        results.append(evaluate_one_shot(world, pre.params, method="meta-imitation", **ev_kwargs))
        mili_run = run_mili(config, seed, cache, evaluate=True)
        results.append(
            EvalResult(
                method="mili",
                seed=seed,
                successes=mili_run.report["eval"]["successes"],
                episodes=mili_run.report["eval"]["episodes"],
                per_family=mili_run.report["eval"]["per_family"],
                episodes_per_task=config.eval.episodes_per_task,
            )
        )
        oracle_run = run_mili_oracle(config, seed, cache)
        results.append(
            EvalResult(
                method="mili-oracle-pairing",
                seed=seed,
                successes=oracle_run.report["eval"]["successes"],
                episodes=oracle_run.report["eval"]["episodes"],
                per_family=oracle_run.report["eval"]["per_family"],
                episodes_per_task=config.eval.episodes_per_task,
            )
        )
        reports[seed] = {"mili": mili_run.report, "oracle": oracle_run.report}
    return ComparisonResult(results=results, reports=reports)


def std_err(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(v.std(ddof=1) / math.sqrt(v.size))


def trial_sweep(config: ExperimentConfig, budgets, seeds, cache=None) -> list[dict]:
    """Mean one-shot success as the collection budget grows (the trial-count curve)."""
    cache = {} if cache is None else cache
    rows = []
    for budget in budgets:
        cfg_b = replace(config, mili=replace(config.mili, batch_size=int(budget)))
        vals = []
        for seed in seeds:
            if budget == 0:
                world, (_, _, test_tasks), _, pre = prepare_stage(config, seed, cache)
                result = evaluate_one_shot(
                    world, pre.params, test_tasks, config.eval.episodes_per_task, seed, config.net,
                    config.expert, method="meta-imitation",
                )
                vals.append(result.overall)
            else:
                run = run_mili(cfg_b, seed, cache, evaluate=True)
                vals.append(run.report["eval"]["overall"])
        rows.append(
            {
                "budget": int(budget),
                "mean_success": float(np.mean(vals)),
                "std_err": std_err(vals),
                "per_seed": vals,
            }
        )
    return rows
