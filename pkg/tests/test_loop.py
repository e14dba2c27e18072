import copy

import numpy as np
import pytest

from mili.config import EvalConfig, ExperimentConfig, MiliConfig, NetConfig, TrainConfig, WorldConfig
from mili.expert import TaskDataset, collect_demos, make_expert_policy
from mili.loop import (
    TrainingDiverged,
    TrialStore,
    collect_trials,
    filter_and_store,
    pair_trials,
    pairing_index_pairs,
    pairing_precision,
    pairs_from_embeddings,
    prepare_stage,
    pretrain,
    random_pairing_precision,
    retrain,
    run_mili,
    train,
)
from mili.policy import embed, init_params
from mili.seeding import rng_for
from mili.world import World


def tiny_config(**overrides):
    base = dict(
        world=WorldConfig(n_train_tasks=8, n_val_tasks=4, n_test_tasks=4),
        net=NetConfig(enc_hidden=12, enc_feat=12, conv_channels=8, embed_dim=6, policy_hidden=16),
        train=TrainConfig(pretrain_steps=60, retrain_steps=40, bc_steps=40, oil_batch=4, contrastive_pos=4, contrastive_neg=4),
        mili=MiliConfig(batch_size=20),
        eval=EvalConfig(episodes_per_task=2, seeds=(0,)),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def stage():
    cfg = tiny_config()
    cache = {}
    world, tasks, demos, pre = prepare_stage(cfg, seed=0, cache=cache)
    return cfg, cache, world, tasks, demos, pre


# -- training ---------------------------------------------------------------------


def test_pretrain_loss_decreases_and_is_deterministic(stage):
    cfg, _, _, _, demos, pre = stage
    losses = [v for _, v in pre.curve]
    assert losses[-1] < losses[0]
    again = pretrain(demos, cfg.net, cfg.train, cfg.world.obs_dim, cfg.world.act_dim, seed=0)
    for k in pre.params:
        assert np.array_equal(pre.params[k], again.params[k])


def test_training_smoke_loss_decreases_over_200_steps(stage):
    cfg, _, _, _, demos, _ = stage
    params = init_params(cfg.net, cfg.world.obs_dim, cfg.world.act_dim, rng_for(1, "init"))
    result = train(params, demos[:4], cfg.net, cfg.train, rng_for(1, "t"), loss="total", steps=200)
    first = np.mean([v for _, v in result.curve[:10]])
    last = np.mean([v for _, v in result.curve[-10:]])
    assert last < first


def test_train_diverges_loudly(stage):
    cfg, _, _, _, demos, _ = stage
    params = init_params(cfg.net, cfg.world.obs_dim, cfg.world.act_dim, rng_for(2, "init"))
    params["enc.w1"] = params["enc.w1"] * 1e200  # forward overflow on the first step
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(params, demos[:4], cfg.net, cfg.train, rng_for(2, "t"), loss="total", steps=5)


# -- collection --------------------------------------------------------------------


def test_collect_trials_counts_and_referential_integrity(stage):
    cfg, _, world, _, demos, pre = stage
    trials = collect_trials(world, pre.params, demos, 12, seed=3, net_cfg=cfg.net)
    assert len(trials) == 12
    for tr in trials:
        ds_idx, demo_idx = tr.conditioning
        assert 0 <= ds_idx < len(demos)
        assert 0 <= demo_idx < len(demos[ds_idx].demos)
        assert len(tr.trajectory) == cfg.world.horizon
        assert len(tr.states) == cfg.world.horizon + 1


def test_collect_trials_deterministic_and_prefix_nested(stage):
    cfg, _, world, _, demos, pre = stage
    a = collect_trials(world, pre.params, demos, 8, seed=4, net_cfg=cfg.net)
    b = collect_trials(world, pre.params, demos, 8, seed=4, net_cfg=cfg.net)
    for x, y in zip(a, b):
        assert np.array_equal(x.trajectory.observations, y.trajectory.observations)
        assert np.array_equal(x.trajectory.actions, y.trajectory.actions)
    bigger = collect_trials(world, pre.params, demos, 12, seed=4, net_cfg=cfg.net)
    for x, y in zip(a, bigger[:8]):
        assert np.array_equal(x.trajectory.actions, y.trajectory.actions)


def test_collect_with_expert_oracle_passes_filter(stage):
    cfg, _, world, _, demos, pre = stage

    def provider(task, scene, rng):
        return make_expert_policy(world, scene, task, rng)

    trials = collect_trials(world, pre.params, demos, 10, seed=5, net_cfg=cfg.net, action_provider=provider)
    store = TrialStore()
    passed = filter_and_store(world, trials, store)
    assert passed / len(trials) >= 0.5
    assert len(store) == passed


def test_filter_and_store_rejects_motionless(stage):
    cfg, _, world, _, demos, pre = stage

    def provider(task, scene, rng):
        return lambda state, obs: np.zeros(4)

    trials = collect_trials(world, pre.params, demos, 5, seed=6, net_cfg=cfg.net, action_provider=provider)
    store = TrialStore()
    assert filter_and_store(world, trials, store) == 0
    assert len(store) == 0


def test_store_is_append_only(stage):
    cfg, _, world, _, demos, pre = stage

    def provider(task, scene, rng):
        return make_expert_policy(world, scene, task, rng)

    store = TrialStore()
    sizes = []
    for seed in (7, 8):
        trials = collect_trials(world, pre.params, demos, 5, seed=seed, net_cfg=cfg.net, action_provider=provider)
        filter_and_store(world, trials, store)
        sizes.append(len(store))
    assert sizes[0] <= sizes[1]
    assert [r.uid for r in store.records] == list(range(len(store)))


# -- pairing -----------------------------------------------------------------------------


def test_pairs_from_embeddings_identical_and_orthogonal():
    e = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    pairs = pairs_from_embeddings(e, alpha=0.9)
    assert pairs == [(0, 1)]  # identical direction pairs; orthogonal stays out


def test_pairs_match_brute_force_enumeration():
    rng = np.random.default_rng(9)
    embs = rng.normal(size=(20, 6))
    pairs = set(pairs_from_embeddings(embs, alpha=0.8))
    unit = embs / np.linalg.norm(embs, axis=1, keepdims=True)
    brute = {
        (i, j)
        for i in range(20)
        for j in range(i + 1, 20)
        if float(unit[i] @ unit[j]) > 0.8
    }
    assert pairs == brute


def test_pairing_invariant_to_positive_rescaling():
    rng = np.random.default_rng(10)
    embs = rng.normal(size=(15, 5))
    base = pairs_from_embeddings(embs, alpha=0.7)
    scaled = embs.copy()
    scaled[3] *= 17.0
    scaled[8] *= 0.002
    assert pairs_from_embeddings(scaled, alpha=0.7) == base


def test_pairing_invariant_to_store_order():
    rng = np.random.default_rng(11)
    embs = rng.normal(size=(12, 4))
    names = [tuple(e) for e in embs]
    base = {frozenset((names[i], names[j])) for i, j in pairs_from_embeddings(embs, alpha=0.6)}
    perm = rng.permutation(12)
    shuffled = embs[perm]
    names_s = [tuple(e) for e in shuffled]
    permuted = {frozenset((names_s[i], names_s[j])) for i, j in pairs_from_embeddings(shuffled, alpha=0.6)}
    assert base == permuted


def test_pair_cap_keeps_highest_similarity():
    e = np.array([[1.0, 0.0], [1.0, 0.001], [1.0, 0.01], [1.0, 0.02]])
    all_pairs = pairs_from_embeddings(e, alpha=0.99)
    assert len(all_pairs) == 6
    capped = pairs_from_embeddings(e, alpha=0.99, cap=1)
    assert len(capped) == 2
    assert (0, 1) in capped  # the closest pair survives


def test_pair_trials_produces_two_demo_datasets(stage):
    cfg, _, world, _, demos, pre = stage

    def provider(task, scene, rng):
        return make_expert_policy(world, scene, task, rng)

    trials = collect_trials(world, pre.params, demos, 20, seed=12, net_cfg=cfg.net, action_provider=provider)
    store = TrialStore()
    filter_and_store(world, trials, store)
    datasets = pair_trials(pre.params, store, alpha=0.5, net_cfg=cfg.net)
    for ds in datasets:
        assert ds.provenance == "paired-trial"
        assert len(ds.demos) == 2
        assert ds.task is None


def test_pairing_never_reads_hidden_labels(stage):
    cfg, _, world, _, demos, pre = stage

    def provider(task, scene, rng):
        return make_expert_policy(world, scene, task, rng)

    trials = collect_trials(world, pre.params, demos, 15, seed=13, net_cfg=cfg.net, action_provider=provider)
    store = TrialStore()
    filter_and_store(world, trials, store)
    pairs = pairing_index_pairs(pre.params, store, 0.5, cfg.net)
    stripped = copy.deepcopy(store)
    for rec in stripped.records:
        object.__setattr__(rec.filter, "achieved", ())
    assert pairing_index_pairs(pre.params, stripped, 0.5, cfg.net) == pairs


def test_precision_metrics_bounds(stage):
    cfg, _, world, _, demos, pre = stage

    def provider(task, scene, rng):
        return make_expert_policy(world, scene, task, rng)

    trials = collect_trials(world, pre.params, demos, 15, seed=14, net_cfg=cfg.net, action_provider=provider)
    store = TrialStore()
    filter_and_store(world, trials, store)
    pairs = pairing_index_pairs(pre.params, store, 0.0, cfg.net)
    assert 0.0 <= pairing_precision(store, pairs) <= 1.0
    assert 0.0 <= random_pairing_precision(store) <= 1.0


# -- retrain and the full loop --------------------------------------------------------------------


def test_retrain_without_pairs_continues_training(stage):
    cfg, _, _, _, demos, pre = stage
    result = retrain(pre.params, demos, cfg.net, cfg.train, cfg.mili, seed=0, iteration=0,
                     obs_dim=cfg.world.obs_dim, act_dim=cfg.world.act_dim)
    assert len(result.curve) == cfg.train.retrain_steps
    changed = any(not np.array_equal(result.params[k], pre.params[k]) for k in pre.params)
    assert changed


def test_retrain_samples_paired_datasets(stage):
    cfg, _, world, _, demos, pre = stage
    paired = [TaskDataset(None, [demos[0].demos[0], demos[0].demos[1]], "paired-trial") for _ in range(6)]
    result = retrain(pre.params, demos + paired, cfg.net, cfg.train, cfg.mili, seed=1, iteration=0,
                     obs_dim=cfg.world.obs_dim, act_dim=cfg.world.act_dim)
    assert result.provenance_draws["paired-trial"] > 0


def test_retrain_deterministic(stage):
    cfg, _, _, _, demos, pre = stage
    a = retrain(pre.params, demos, cfg.net, cfg.train, cfg.mili, seed=2, iteration=0,
                obs_dim=cfg.world.obs_dim, act_dim=cfg.world.act_dim)
    b = retrain(pre.params, demos, cfg.net, cfg.train, cfg.mili, seed=2, iteration=0,
                obs_dim=cfg.world.obs_dim, act_dim=cfg.world.act_dim)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_run_mili_zero_budget_returns_pretrained_params():
    cfg = tiny_config(mili=MiliConfig(batch_size=0))
    cache = {}
    run = run_mili(cfg, seed=0, cache=cache, evaluate=False)
    for k in run.params:
        assert np.array_equal(run.params[k], run.pretrain_params[k])
    stage = run.report["iterations"][0]
    assert stage["trials"] == 0 and stage["pairs"] == 0
    assert stage["retrain_final_loss"] is None


def test_run_mili_report_schema():
    cfg = tiny_config()
    run = run_mili(cfg, seed=0, cache={}, evaluate=True)
    stage = run.report["iterations"][0]
    assert 0.0 <= stage["pass_rate"] <= 1.0
    assert stage["pairs"] >= 0
    assert "eval" in run.report
    assert 0.0 <= run.report["eval"]["overall"] <= 1.0
    assert len(run.datasets) == len(run.demo_datasets) + stage["pairs"]
