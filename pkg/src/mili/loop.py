"""The MILI improvement loop: pretrain, collect, filter, pair, retrain.

Stages are pure functions of (inputs, seed); per-trial RNG streams are derived
from the trial index, so a collection budget of B is a strict prefix of any
larger budget under the same seed. The trial store keeps the filter's hidden
achieved-task labels for oracle/metric use only -- pairing never reads them,
which an audit test enforces by stripping labels and re-pairing.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, adam_step
from .config import ExperimentConfig, MiliConfig, NetConfig, TrainConfig
from .expert import TaskDataset, collect_demos
from .policy import (
    embed,
    grad_bc,
    grad_oil,
    grad_total,
    init_params,
    policy_forward,
    sample_action,
    sample_batch,
    sample_oil_draws,
)
from .seeding import rng_for
from .world import FilterResult, Scene, Trajectory, World, WorldState


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    curve: list[tuple[int, float]]
    provenance_draws: Counter


@dataclass
class TrialCandidate:
    trajectory: Trajectory
    states: list[WorldState]
    scene: Scene
    conditioning: tuple[int, int]  # (dataset index, demo index)


@dataclass
class TrialRecord:
    uid: int
    trajectory: Trajectory
    scene: Scene
    conditioning: tuple[int, int]
    filter: FilterResult  # achieved-task labels inside are oracle-only


class TrialStore:
    """Append-only store of filter-passing trials."""

    def __init__(self):
        self.records: list[TrialRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def add(self, candidate: TrialCandidate, verdict: FilterResult) -> TrialRecord:
        rec = TrialRecord(
            uid=len(self.records),
            trajectory=candidate.trajectory,
            scene=candidate.scene,
            conditioning=candidate.conditioning,
            filter=verdict,
        )
        self.records.append(rec)
        return rec

    def embeddings(self, params, net_cfg: NetConfig) -> np.ndarray:
        """Embeddings under the current parameters (recomputed per call)."""
        return np.array([embed(params, r.trajectory, net_cfg).vec for r in self.records])


# -- training ----------------------------------------------------------------------


def train(
    params: dict[str, np.ndarray],
    datasets: list[TaskDataset],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    rng,
    loss: str = "total",
    steps: int | None = None,
    negative_pool: list[int] | None = None,
    pooled_trajectories: list[Trajectory] | None = None,
) -> TrainResult:
    """Adam minimization of the chosen loss; records the step-wise loss curve."""
    if steps is None:
        steps = train_cfg.pretrain_steps
    adam = AdamState.init(
        params, lr=train_cfg.lr, beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2, eps=train_cfg.adam_eps
    )
    curve: list[tuple[int, float]] = []
    prov = Counter()
    if loss == "bc":
        pool = pooled_trajectories if pooled_trajectories is not None else [d for ds in datasets for d in ds.demos]
    for step in range(steps):
        try:
            if loss == "total":
                batch = sample_batch(datasets, train_cfg, rng, negative_pool)
                for d in batch.oil:
                    prov[datasets[d.ds].provenance] += 1
                value, grads = grad_total(params, datasets, net_cfg, train_cfg.margin, batch)
            elif loss == "oil":
                draws = sample_oil_draws(datasets, train_cfg.oil_batch, rng)
                for d in draws:
                    prov[datasets[d.ds].provenance] += 1
                value, grads = grad_oil(params, datasets, net_cfg, draws)
            elif loss == "bc":
                idx = rng.integers(len(pool), size=train_cfg.oil_batch)
                value, grads = grad_bc(params, [pool[i] for i in idx], net_cfg)
            else:
                raise ValueError(f"unknown loss kind: {loss}")
        except FloatingPointError as exc:
            raise TrainingDiverged(f"training diverged at step {step}: {exc}") from exc
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        params, adam = adam_step(params, grads, adam)
        curve.append((step, value))
    return TrainResult(params=params, curve=curve, provenance_draws=prov)


def pretrain(
    datasets: list[TaskDataset],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    obs_dim: int,
    act_dim: int,
    seed: int,
) -> TrainResult:
    """Joint embedding + policy training on the initial demo datasets."""
    params = init_params(net_cfg, obs_dim, act_dim, rng_for(seed, "init"))
    return train(params, datasets, net_cfg, train_cfg, rng_for(seed, "pretrain"), loss="total")


def retrain(
    params: dict[str, np.ndarray],
    datasets: list[TaskDataset],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    mili_cfg: MiliConfig,
    seed: int,
    iteration: int,
    obs_dim: int,
    act_dim: int,
) -> TrainResult:
    """Meta-imitation on the augmented dataset; warm start by default."""
    if mili_cfg.retrain_from_scratch:
        params = init_params(net_cfg, obs_dim, act_dim, rng_for(seed, "retrain-init", iteration))
    rng = rng_for(seed, "retrain", iteration)
    if mili_cfg.retrain_with_contrastive:
        # paired-trial datasets carry pseudo-labels: keep them out of the negative set
        pool = [i for i, ds in enumerate(datasets) if ds.provenance == "human-proxy"]
        return train(params, datasets, net_cfg, train_cfg, rng, loss="total", steps=train_cfg.retrain_steps, negative_pool=pool)
    return train(params, datasets, net_cfg, train_cfg, rng, loss="oil", steps=train_cfg.retrain_steps)


# -- autonomous collection ------------------------------------------------------------


def collect_trials(
    world: World,
    params,
    datasets: list[TaskDataset],
    batch_size: int,
    seed: int,
    net_cfg: NetConfig,
    extra_noise: float = 0.0,
    action_provider=None,
    start: int = 0,
) -> list[TrialCandidate]:
    """Roll out the meta-policy on fresh scenes, conditioned on random demos.

    Each trial owns the RNG stream (seed, trial index), so budgets nest:
    trials [0, B) are a prefix of [0, B') for B' > B.
    """
    trials = []
    for b in range(start, batch_size):
        rng = rng_for(seed, "trial", b)
        ds_idx = int(rng.integers(len(datasets)))
        demo_idx = int(rng.integers(len(datasets[ds_idx].demos)))
        task = datasets[ds_idx].task
        scene = world.sample_scene(task, rng)
        if action_provider is not None:
            act = action_provider(task, scene, rng)
        else:
            emb = embed(params, datasets[ds_idx].demos[demo_idx], net_cfg).vec

            def act(state, obs, _emb=emb, _rng=rng):
                dist = policy_forward(params, obs, _emb, net_cfg)
                a = sample_action(dist, _rng)
                if extra_noise > 0.0:
                    a = a + _rng.normal(0.0, extra_noise, size=a.shape)
                return a

        ro = world.rollout(scene, act)
        trials.append(TrialCandidate(ro.trajectory, ro.states, scene, (ds_idx, demo_idx)))
    return trials


def filter_and_store(world: World, trials: list[TrialCandidate], store: TrialStore) -> int:
    """Apply the task-agnostic filter; keep only useful trials. Returns pass count."""
    passed = 0
    for cand in trials:
        verdict = world.filter_fn(cand.states, cand.scene)
        if verdict.useful:
            store.add(cand, verdict)
            passed += 1
    return passed


# -- latent-space pairing ----------------------------------------------------------------


def pairs_from_embeddings(embeddings: np.ndarray, alpha: float, cap: int | None = None) -> list[tuple[int, int]]:
    """All unordered index pairs with cosine similarity above alpha.

    With a cap, pairs are ranked by similarity and kept greedily while both
    endpoints stay under the cap (deterministic: ties resolved by index).
    """
    n = embeddings.shape[0]
    if n < 2:
        return []
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms < 1e-8):
        raise ValueError("pairing: zero-norm embedding")
    unit = embeddings / norms[:, None]
    sim = unit @ unit.T
    cand = [(i, j) for i in range(n) for j in range(i + 1, n) if sim[i, j] > alpha]
    if cap is None:
        return cand
    ranked = sorted(cand, key=lambda p: (-sim[p[0], p[1]], p[0], p[1]))
    counts = Counter()
    kept = []
    for i, j in ranked:
        if counts[i] < cap and counts[j] < cap:
            kept.append((i, j))
            counts[i] += 1
            counts[j] += 1
    return sorted(kept)


def pair_trials(params, store: TrialStore, alpha: float, net_cfg: NetConfig, cap: int | None = None) -> list[TaskDataset]:
    """Promote similar trial pairs to new two-demo task datasets.

    Similarity is the cosine (normalized dot product) of trial embeddings under
    the current parameters. Only trajectories are read -- never the filter's
    hidden achieved-task labels.
    """
    if len(store) < 2:
        return []
    embeddings = store.embeddings(params, net_cfg)
    pairs = pairs_from_embeddings(embeddings, alpha, cap)
    return [
        TaskDataset(None, [store.records[i].trajectory, store.records[j].trajectory], "paired-trial")
        for i, j in pairs
    ]


def pairing_index_pairs(params, store: TrialStore, alpha: float, net_cfg: NetConfig, cap=None) -> list[tuple[int, int]]:
    if len(store) < 2:
        return []
    return pairs_from_embeddings(store.embeddings(params, net_cfg), alpha, cap)


# -- oracle-side metrics (never used to form pairs) ------------------------------------------


def pairing_precision(store: TrialStore, pairs: list[tuple[int, int]]) -> float:
    """Fraction of formed pairs whose hidden achieved-task sets intersect."""
    if not pairs:
        return 0.0
    hits = 0
    for i, j in pairs:
        a = {t.key for t in store.records[i].filter.achieved}
        b = {t.key for t in store.records[j].filter.achieved}
        hits += bool(a & b)
    return hits / len(pairs)


def random_pairing_precision(store: TrialStore) -> float:
    """Expected precision of uniform random pairing: intersecting fraction of all pairs."""
    n = len(store)
    if n < 2:
        return 0.0
    keys = [{t.key for t in r.filter.achieved} for r in store.records]
    hits = total = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1
            hits += bool(keys[i] & keys[j])
    return hits / total


# -- the full loop ------------------------------------------------------------------------------


@dataclass
class MiliRun:
    world: World
    train_tasks: list
    val_tasks: list
    test_tasks: list
    demo_datasets: list[TaskDataset]
    datasets: list[TaskDataset]  # demos plus paired-trial datasets
    params: dict[str, np.ndarray]
    pretrain_params: dict[str, np.ndarray]
    store: TrialStore
    report: dict = field(default_factory=dict)


def _cached(cache, key, fn):
    if cache is None:
        return fn()
    if key not in cache:
        cache[key] = fn()
    return cache[key]


def prepare_stage(config: ExperimentConfig, seed: int, cache=None):
    """World, task splits, demos, and pretraining (shared by every method)."""
    world = _cached(cache, ("world", seed), lambda: World(config.world, seed))
    tasks = _cached(cache, ("tasks", seed), world.generate_task_sets)
    train_tasks, val_tasks, test_tasks = tasks
    demos = _cached(cache, ("demos", seed), lambda: collect_demos(world, train_tasks, seed, config.expert))
    pre = _cached(
        cache,
        ("pretrain", seed),
        lambda: pretrain(demos, config.net, config.train, config.world.obs_dim, config.world.act_dim, seed),
    )
    return world, (train_tasks, val_tasks, test_tasks), demos, pre


def _collect_cached(world, params, demos, budget, seed, config, cache, iteration):
    """Collection cache grows monotonically; smaller budgets are prefixes."""
    if cache is None:
        return collect_trials(world, params, demos, budget, seed, config.net, config.mili.collect_noise)
    key = ("trials", seed, iteration)
    trials = cache.get(key, [])
    if len(trials) < budget:
        trials = trials + collect_trials(
            world, params, demos, budget, seed, config.net, config.mili.collect_noise, start=len(trials)
        )
        cache[key] = trials
    return trials[:budget]


def run_mili(config: ExperimentConfig, seed: int, cache=None, evaluate: bool = True) -> MiliRun:
    """Pretrain, then iterate collect -> filter -> pair -> retrain; report stage metrics."""
    world, (train_tasks, val_tasks, test_tasks), demos, pre = prepare_stage(config, seed, cache)
    params = pre.params
    datasets: list[TaskDataset] = list(demos)
    store = TrialStore()
    report: dict = {
        "seed": seed,
        "pretrain_final_loss": pre.curve[-1][1] if pre.curve else None,
        "iterations": [],
    }
    for it in range(config.mili.iterations):
        batch = config.mili.batch_size
        conditioning = datasets if it > 0 else demos
        trials = _collect_cached(world, params, conditioning, batch, seed, config, cache, it)
        passed = filter_and_store(world, trials, store)
        pairs = pairing_index_pairs(params, store, config.mili.alpha, config.net, config.mili.pair_cap)
        paired = [
            TaskDataset(None, [store.records[i].trajectory, store.records[j].trajectory], "paired-trial")
            for i, j in pairs
        ]
        datasets = datasets + paired
        stage = {
            "iteration": it,
            "trials": len(trials),
            "filter_passed": passed,
            "pass_rate": passed / len(trials) if trials else 0.0,
            "pairs": len(paired),
            "pairing_precision": pairing_precision(store, pairs),
            "random_pairing_precision": random_pairing_precision(store),
        }
        if paired:
            result = retrain(
                params, datasets, config.net, config.train, config.mili, seed, it,
                config.world.obs_dim, config.world.act_dim,
            )
            params = result.params
            stage["retrain_final_loss"] = result.curve[-1][1]
            stage["retrain_paired_draws"] = result.provenance_draws.get("paired-trial", 0)
        else:
            stage["retrain_final_loss"] = None  # nothing new to learn from; retrain skipped
        report["iterations"].append(stage)
    if evaluate:
        from .evalbench import evaluate_one_shot  # local import; evalbench builds on this module

        result = evaluate_one_shot(
            world, params, test_tasks, config.eval.episodes_per_task, seed, config.net, config.expert, method="mili"
        )
        report["eval"] = result.as_dict()
    run = MiliRun(
        world=world,
        train_tasks=train_tasks,
        val_tasks=val_tasks,
        test_tasks=test_tasks,
        demo_datasets=demos,
        datasets=datasets,
        params=params,
        pretrain_params=pre.params,
        store=store,
        report=report,
    )
    return run
