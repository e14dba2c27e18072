"""Demo-conditioned meta-policy: embedding network, policy network, and losses.

One per-step encoder is shared by both heads. The embedding head zeroes the
four effector channels of each observation before encoding -- embeddings carry
what happened to the objects, never where the hand was -- then applies two
strided temporal convolutions, mean-pools over time, and projects to a fixed
embedding. The policy head consumes the encoded current observation plus a
task embedding and outputs a diagonal Gaussian over action deltas.

Losses:
  behavior cloning   sum of Gaussian NLL over demonstrated (o, a) pairs
  one-shot imitation condition on one demo of a task, clone another demo
  contrastive        squared distance for same-task pairs, hinge(margin) apart
  total              one-shot imitation + contrastive on the same draws

Every loss has a sampled minibatch estimator and a full-sum mode that
enumerates the literal double sums for small instances (used as test oracles).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, conv1d_forward, value_and_grad
from .config import NetConfig, TrainConfig
from .world import Trajectory

LOG_2PI = math.log(2.0 * math.pi)
EFFECTOR_CHANNELS = 4  # leading obs channels: x, y, z, aperture


def _slot_width(cfg: NetConfig) -> int:
    return 4 + cfg.slot_feature_dim  # present, feature, x, y, held


def _n_slots(obs_dim: int, cfg: NetConfig) -> int:
    return (obs_dim - EFFECTOR_CHANNELS) // _slot_width(cfg)


def policy_extras(obs2d: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """Egocentric side channel for the policy head: effector state plus per-slot
    (present, dx, dy, held), positions taken relative to the effector.

    The pixel-based analog of this policy gets translation structure for free
    from its convolutions; an MLP over absolute coordinates does not, so the
    policy head sees these relative features directly. The embedding head
    never does.
    """
    t = obs2d.shape[0]
    width = _slot_width(cfg)
    n_slots = _n_slots(obs2d.shape[1], cfg)
    out = np.zeros((t, EFFECTOR_CHANNELS + 4 * n_slots))
    out[:, :EFFECTOR_CHANNELS] = obs2d[:, :EFFECTOR_CHANNELS]
    ex, ey = obs2d[:, 0], obs2d[:, 1]
    fd = cfg.slot_feature_dim
    for k in range(n_slots):
        base = EFFECTOR_CHANNELS + k * width
        col = EFFECTOR_CHANNELS + 4 * k
        present = obs2d[:, base]
        out[:, col] = present
        out[:, col + 1] = (obs2d[:, base + 1 + fd] - ex) * present
        out[:, col + 2] = (obs2d[:, base + 2 + fd] - ey) * present
        out[:, col + 3] = obs2d[:, base + 3 + fd]
    return out


def _extras_dim(obs_dim: int, cfg: NetConfig) -> int:
    return EFFECTOR_CHANNELS + 4 * _n_slots(obs_dim, cfg)


class DegenerateEmbeddingError(RuntimeError):
    """The embedding network collapsed to (numerically) zero output."""


class EmptyBatchError(ValueError):
    """A loss was asked to average over nothing."""


@dataclass(frozen=True)
class Embedding:
    vec: np.ndarray
    norm: float


@dataclass(frozen=True)
class ActionDistribution:
    mean: np.ndarray
    log_std: np.ndarray  # clamped at construction


# -- parameters -----------------------------------------------------------------


def _glorot(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: NetConfig, obs_dim: int, act_dim: int, rng) -> dict[str, np.ndarray]:
    k, ch = cfg.conv_width, cfg.conv_channels
    p = {
        "enc.w1": _glorot(rng, obs_dim, cfg.enc_hidden, (obs_dim, cfg.enc_hidden)),
        "enc.b1": np.zeros(cfg.enc_hidden),
        "enc.w2": _glorot(rng, cfg.enc_hidden, cfg.enc_feat, (cfg.enc_hidden, cfg.enc_feat)),
        "enc.b2": np.zeros(cfg.enc_feat),
        "emb.conv1.w": _glorot(rng, k * cfg.enc_feat, k * ch, (k, cfg.enc_feat, ch)),
        "emb.conv1.b": np.zeros(ch),
        "emb.conv2.w": _glorot(rng, k * ch, k * ch, (k, ch, ch)),
        "emb.conv2.b": np.zeros(ch),
        "emb.out.w": _glorot(rng, ch, cfg.embed_dim, (ch, cfg.embed_dim)),
        "emb.out.b": np.zeros(cfg.embed_dim),
        "pol.w1": _glorot(
            rng,
            cfg.enc_feat + cfg.embed_dim + _extras_dim(obs_dim, cfg),
            cfg.policy_hidden,
            (cfg.enc_feat + cfg.embed_dim + _extras_dim(obs_dim, cfg), cfg.policy_hidden),
        ),
        "pol.b1": np.zeros(cfg.policy_hidden),
        "pol.w2": _glorot(rng, cfg.policy_hidden, cfg.policy_hidden, (cfg.policy_hidden, cfg.policy_hidden)),
        "pol.b2": np.zeros(cfg.policy_hidden),
        "pol.w3": _glorot(rng, cfg.policy_hidden, act_dim, (cfg.policy_hidden, act_dim)),
        "pol.b3": np.zeros(act_dim),
        "pol.log_std": np.full((1, act_dim), cfg.log_std_init),
    }
    return p


EMBED_HEAD = ("emb.conv1.w", "emb.conv1.b", "emb.conv2.w", "emb.conv2.b", "emb.out.w", "emb.out.b")


def _min_embed_len(cfg: NetConfig) -> int:
    # two stacked convs: the second needs conv_width rows after the first stride
    return (cfg.conv_width - 1) * cfg.conv_stride + cfg.conv_width


def _embed_input(obs: np.ndarray, cfg: NetConfig) -> np.ndarray:
    """Zero the effector channels and edge-pad short sequences."""
    x = obs.copy()
    x[:, :EFFECTOR_CHANNELS] = 0.0
    need = _min_embed_len(cfg)
    if x.shape[0] < need:
        pad = np.repeat(x[-1:], need - x.shape[0], axis=0)
        x = np.concatenate([x, pad], axis=0)
    return x


# -- numpy fast paths (no tape; used for rollouts and pairing) ---------------------


def _encode_np(params, obs2d: np.ndarray) -> np.ndarray:
    h = np.maximum(obs2d @ params["enc.w1"] + params["enc.b1"], 0.0)
    return np.maximum(h @ params["enc.w2"] + params["enc.b2"], 0.0)


def embed(params: dict[str, np.ndarray], trajectory, cfg: NetConfig) -> Embedding:
    """Fixed-length task embedding of a trajectory; ignores effector channels."""
    obs = trajectory.observations if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ValueError("embed: need a nonempty (T, obs_dim) trajectory")
    x = _embed_input(obs, cfg)
    feats = _encode_np(params, x)
    h = conv1d_forward(feats, params["emb.conv1.w"], stride=cfg.conv_stride)
    h = np.maximum(h + params["emb.conv1.b"], 0.0)
    h = conv1d_forward(h, params["emb.conv2.w"], stride=cfg.conv_stride)
    h = np.maximum(h + params["emb.conv2.b"], 0.0)
    pooled = h.mean(axis=0, keepdims=True)
    vec = (pooled @ params["emb.out.w"] + params["emb.out.b"])[0]
    norm = float(np.linalg.norm(vec))
    if norm < 1e-8:
        raise DegenerateEmbeddingError(f"embedding norm {norm:.3e} below 1e-8")
    return Embedding(vec=vec, norm=norm)


def policy_forward(params, obs: np.ndarray, embedding: np.ndarray | None, cfg: NetConfig) -> ActionDistribution:
    """Action distribution for one observation; a zero embedding is legal (BC mode)."""
    obs = np.asarray(obs, dtype=np.float64)
    emb = np.zeros(cfg.embed_dim) if embedding is None else np.asarray(embedding, dtype=np.float64)
    feats = _encode_np(params, obs[None, :])
    h = np.concatenate([feats, emb[None, :], policy_extras(obs[None, :], cfg)], axis=1)
    h = np.maximum(h @ params["pol.w1"] + params["pol.b1"], 0.0)
    h = np.maximum(h @ params["pol.w2"] + params["pol.b2"], 0.0)
    mean = (h @ params["pol.w3"] + params["pol.b3"])[0]
    if not np.isfinite(mean).all():
        raise FloatingPointError("policy_forward: non-finite action mean")
    log_std = np.clip(params["pol.log_std"][0], cfg.log_std_min, cfg.log_std_max)
    return ActionDistribution(mean=mean, log_std=log_std)


def nll(dist: ActionDistribution, action: np.ndarray) -> float:
    """Gaussian negative log-likelihood of one action."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != dist.mean.shape:
        raise ValueError(f"nll: action shape {a.shape} != mean shape {dist.mean.shape}")
    k = a.shape[0]
    quad = 0.5 * np.sum((a - dist.mean) ** 2 * np.exp(-2.0 * dist.log_std))
    return float(quad + np.sum(dist.log_std) + 0.5 * k * LOG_2PI)


def sample_action(dist: ActionDistribution, rng) -> np.ndarray:
    return dist.mean + np.exp(dist.log_std) * rng.standard_normal(dist.mean.shape)


def greedy_action(dist: ActionDistribution) -> np.ndarray:
    return dist.mean.copy()


# -- graph builders ------------------------------------------------------------------


def _build_encode(g: Graph, pids, obs_node: int) -> int:
    h = g.relu(g.bias_add(g.matmul(obs_node, pids["enc.w1"]), pids["enc.b1"]))
    return g.relu(g.bias_add(g.matmul(h, pids["enc.w2"]), pids["enc.b2"]))


def build_embed(g: Graph, pids, obs: np.ndarray, cfg: NetConfig) -> int:
    """Embedding node (1, E) for a trajectory's observation matrix."""
    feats = _build_encode(g, pids, g.constant(_embed_input(obs, cfg)))
    h = g.conv1d(feats, pids["emb.conv1.w"], stride=cfg.conv_stride)
    h = g.relu(g.bias_add(h, pids["emb.conv1.b"]))
    h = g.conv1d(h, pids["emb.conv2.w"], stride=cfg.conv_stride)
    h = g.relu(g.bias_add(h, pids["emb.conv2.b"]))
    pooled = g.mean(h, axis=0)
    return g.bias_add(g.matmul(pooled, pids["emb.out.w"]), pids["emb.out.b"])


def _build_clamped_log_std(g: Graph, pids, cfg: NetConfig) -> int:
    ls = pids["pol.log_std"]
    shape = g.value(ls).shape
    lo = g.constant(np.full(shape, cfg.log_std_min))
    hi = g.constant(np.full(shape, cfg.log_std_max))
    # clip(x) = lo + relu(x - lo) - relu(x - hi): identity inside, flat outside
    return g.add(lo, g.sub(g.relu(g.sub(ls, lo)), g.relu(g.sub(ls, hi))))


def build_policy_means(g: Graph, pids, obs: np.ndarray, emb_node: int | None, cfg: NetConfig) -> int:
    obs_node = g.constant(obs)
    feats = _build_encode(g, pids, obs_node)
    t = obs.shape[0]
    if emb_node is None:
        tiled = g.constant(np.zeros((t, cfg.embed_dim)))
    else:
        tiled = g.matmul(g.constant(np.ones((t, 1))), emb_node)
    h = g.concat([feats, tiled, g.constant(policy_extras(obs, cfg))], axis=1)
    h = g.relu(g.bias_add(g.matmul(h, pids["pol.w1"]), pids["pol.b1"]))
    h = g.relu(g.bias_add(g.matmul(h, pids["pol.w2"]), pids["pol.b2"]))
    return g.bias_add(g.matmul(h, pids["pol.w3"]), pids["pol.b3"])


def build_bc_term(g: Graph, pids, obs: np.ndarray, actions: np.ndarray, emb_node: int | None, cfg: NetConfig) -> int:
    """Summed Gaussian NLL of a trajectory's actions under the conditioned policy."""
    t, k = actions.shape
    means = build_policy_means(g, pids, obs, emb_node, cfg)
    log_std = _build_clamped_log_std(g, pids, cfg)
    inv_var2 = g.exp(g.smul(log_std, -2.0))  # (1, k)
    diff = g.sub(g.constant(actions), means)
    sq_colsum = g.sum(g.mul(diff, diff), axis=0)  # (1, k)
    quad = g.smul(g.sum(g.mul(sq_colsum, inv_var2)), 0.5)
    log_det = g.smul(g.sum(log_std), float(t))
    const = g.constant(np.array(0.5 * t * k * LOG_2PI))
    return g.add(g.add(quad, log_det), const)


def _sum_terms(g: Graph, terms: list[int]) -> int:
    acc = terms[0]
    for t in terms[1:]:
        acc = g.add(acc, t)
    return acc


# -- batch draws -----------------------------------------------------------------------


@dataclass(frozen=True)
class OilDraw:
    ds: int
    demo_m: int  # scored demo
    demo_n: int  # conditioning demo


@dataclass(frozen=True)
class PosDraw:
    ds: int
    demo_a: int
    demo_b: int


@dataclass(frozen=True)
class NegDraw:
    ds_a: int
    demo_a: int
    ds_b: int
    demo_b: int


@dataclass
class Batch:
    oil: list[OilDraw]
    pos: list[PosDraw]
    neg: list[NegDraw]


def _require_pairable(ds, idx: int):
    if len(ds.demos) < 2:
        raise EmptyBatchError(f"dataset {idx} has {len(ds.demos)} demo(s); need >= 2 for pairing")


def sample_oil_draws(datasets, n: int, rng) -> list[OilDraw]:
    draws = []
    for _ in range(n):
        ds = int(rng.integers(len(datasets)))
        _require_pairable(datasets[ds], ds)
        m, nn = (int(i) for i in rng.choice(len(datasets[ds].demos), size=2, replace=False))
        draws.append(OilDraw(ds, m, nn))
    return draws


def sample_contrastive_draws(datasets, n_pos: int, n_neg: int, rng, negative_pool=None):
    pos, neg = [], []
    pool = list(range(len(datasets))) if negative_pool is None else list(negative_pool)
    for _ in range(n_pos):
        ds = int(rng.integers(len(datasets)))
        _require_pairable(datasets[ds], ds)
        a, b = (int(i) for i in rng.choice(len(datasets[ds].demos), size=2, replace=False))
        pos.append(PosDraw(ds, a, b))
    if len(pool) >= 2:
        for _ in range(n_neg):
            ja, jb = (int(i) for i in rng.choice(len(pool), size=2, replace=False))
            da, db = pool[ja], pool[jb]
            neg.append(
                NegDraw(
                    da,
                    int(rng.integers(len(datasets[da].demos))),
                    db,
                    int(rng.integers(len(datasets[db].demos))),
                )
            )
    return pos, neg


def sample_batch(datasets, cfg: TrainConfig, rng, negative_pool=None) -> Batch:
    oil = sample_oil_draws(datasets, cfg.oil_batch, rng)
    pos, neg = sample_contrastive_draws(datasets, cfg.contrastive_pos, cfg.contrastive_neg, rng, negative_pool)
    return Batch(oil=oil, pos=pos, neg=neg)


def full_oil_draws(datasets) -> list[OilDraw]:
    """Every (task, ordered demo pair) term of the one-shot imitation loss."""
    draws = []
    for i, ds in enumerate(datasets):
        _require_pairable(ds, i)
        for m in range(len(ds.demos)):
            for n in range(len(ds.demos)):
                if m != n:
                    draws.append(OilDraw(i, m, n))
    return draws


def full_contrastive_draws(datasets) -> tuple[list[PosDraw], list[NegDraw]]:
    """Literal ordered double sum over dataset pairs and their demo pairs."""
    pos, neg = [], []
    for j, dj in enumerate(datasets):
        for k, dk in enumerate(datasets):
            for m in range(len(dj.demos)):
                for n in range(len(dk.demos)):
                    if j == k:
                        if m != n:  # the m == n term is identically zero
                            pos.append(PosDraw(j, m, n))
                    else:
                        neg.append(NegDraw(j, m, k, n))
    return pos, neg


# -- loss graphs and public loss values ---------------------------------------------------


class _EmbedCache:
    def __init__(self, g: Graph, pids, datasets, cfg: NetConfig):
        self.g, self.pids, self.datasets, self.cfg = g, pids, datasets, cfg
        self._nodes: dict[tuple[int, int], int] = {}

    def node(self, ds: int, idx: int) -> int:
        key = (ds, idx)
        if key not in self._nodes:
            obs = self.datasets[ds].demos[idx].observations
            self._nodes[key] = build_embed(self.g, self.pids, obs, self.cfg)
        return self._nodes[key]


def build_oil_loss(g: Graph, pids, datasets, draws: list[OilDraw], cfg: NetConfig, cache=None) -> int:
    if not draws:
        raise EmptyBatchError("one-shot imitation loss over zero pair draws")
    cache = cache or _EmbedCache(g, pids, datasets, cfg)
    terms = []
    for d in draws:
        emb = cache.node(d.ds, d.demo_n)
        demo = datasets[d.ds].demos[d.demo_m]
        terms.append(build_bc_term(g, pids, demo.observations, demo.actions, emb, cfg))
    return _sum_terms(g, terms)


def build_contrastive_loss(g, pids, datasets, pos, neg, margin: float, cfg: NetConfig, cache=None) -> int:
    cache = cache or _EmbedCache(g, pids, datasets, cfg)
    terms = []
    for p in pos:
        h = g.sqnorm(g.sub(cache.node(p.ds, p.demo_a), cache.node(p.ds, p.demo_b)))
        terms.append(h)
    for q in neg:
        h = g.sqnorm(g.sub(cache.node(q.ds_a, q.demo_a), cache.node(q.ds_b, q.demo_b)))
        terms.append(g.relu(g.sub(g.constant(np.array(margin)), h)))
    if not terms:
        return g.constant(np.array(0.0))
    return _sum_terms(g, terms)


def build_bc_loss(g: Graph, pids, trajectories, cfg: NetConfig) -> int:
    if not trajectories:
        raise EmptyBatchError("behavior cloning loss over zero trajectories")
    terms = [build_bc_term(g, pids, tr.observations, tr.actions, None, cfg) for tr in trajectories]
    return _sum_terms(g, terms)


def loss_bc(params, trajectories, cfg: NetConfig) -> float:
    """Unconditioned behavior cloning loss (zero task embedding)."""
    g = Graph()
    pids = {k: g.parameter(v) for k, v in params.items()}
    return float(g.value(build_bc_loss(g, pids, trajectories, cfg)))


def loss_oil(params, datasets, cfg: NetConfig, draws=None, rng=None, n_draws: int = 8) -> float:
    """One-shot imitation loss; full sum when no draws/rng are given."""
    if draws is None:
        draws = sample_oil_draws(datasets, n_draws, rng) if rng is not None else full_oil_draws(datasets)
    g = Graph()
    pids = {k: g.parameter(v) for k, v in params.items()}
    return float(g.value(build_oil_loss(g, pids, datasets, draws, cfg)))


def loss_contrastive(params, datasets, cfg: NetConfig, margin: float = 1.0, draws=None, rng=None, n_pos=8, n_neg=8) -> float:
    if draws is None:
        if rng is not None:
            draws = sample_contrastive_draws(datasets, n_pos, n_neg, rng)
        else:
            draws = full_contrastive_draws(datasets)
    pos, neg = draws
    g = Graph()
    pids = {k: g.parameter(v) for k, v in params.items()}
    return float(g.value(build_contrastive_loss(g, pids, datasets, pos, neg, margin, cfg)))


def loss_total(params, datasets, cfg: NetConfig, margin: float = 1.0, batch: Batch | None = None, rng=None) -> float:
    """Joint loss: one-shot imitation plus contrastive, on the same draw."""
    if batch is None:
        if rng is not None:
            batch = sample_batch(datasets, TrainConfig(), rng)
        else:
            oil = full_oil_draws(datasets)
            pos, neg = full_contrastive_draws(datasets)
            batch = Batch(oil=oil, pos=pos, neg=neg)
    g = Graph()
    pids = {k: g.parameter(v) for k, v in params.items()}
    cache = _EmbedCache(g, pids, datasets, cfg)
    total = g.add(
        build_oil_loss(g, pids, datasets, batch.oil, cfg, cache),
        build_contrastive_loss(g, pids, datasets, batch.pos, batch.neg, margin, cfg, cache),
    )
    return float(g.value(total))


def grad_total(params, datasets, cfg: NetConfig, margin: float, batch: Batch):
    def build(g, pids):
        cache = _EmbedCache(g, pids, datasets, cfg)
        return g.add(
            build_oil_loss(g, pids, datasets, batch.oil, cfg, cache),
            build_contrastive_loss(g, pids, datasets, batch.pos, batch.neg, margin, cfg, cache),
        )

    return value_and_grad(params, build)


def grad_oil(params, datasets, cfg: NetConfig, draws):
    def build(g, pids):
        return build_oil_loss(g, pids, datasets, draws, cfg)

    return value_and_grad(params, build)


def grad_bc(params, trajectories, cfg: NetConfig):
    def build(g, pids):
        return build_bc_loss(g, pids, trajectories, cfg)

    return value_and_grad(params, build)
