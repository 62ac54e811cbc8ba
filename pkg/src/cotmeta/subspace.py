"""Subspace MAML over per-step adaptor parameters.

Every parameter slot ``j`` of CoT step ``k`` is ``w = S c`` with a basis
``S [d x D]`` and coefficients ``c [D x p]``. The inner loop adapts only the
coefficients on an episode's support set; the outer loop evaluates the query loss
at the adapted coefficients and updates coefficients and bases with AdamW (or
plain SGD).

The engine is model-agnostic: it talks to an *objective* exposing
``episode_losses(params, batches) -> list[Tensor]``, where ``params[e]`` maps
``kind -> slot -> Tensor`` for episode ``e``. Computing all episodes in one call
lets the caption objective share a single batched LM pass per CoT step.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .adaptor import AdaptorConfig, AdaptorStep, cot_generate_batch, cot_item_losses, make_targets, slot_shapes
from .errors import ConfigError, ContractError, DataError, DimensionError
from .frozen import TinyLM, Tokenizer
from .numerics import AdamWState, Tensor, adamw_step, enable_grad, grad, matmul, no_grad, sgd_step
from .numerics.optim import xavier_bound
from .rng import Rng
from .world import CaptionedSample

Slots = dict[str, dict[str, np.ndarray]]  # kind -> slot -> array
TensorSlots = dict[str, dict[str, Tensor]]


@dataclass
class MetaConfig:
    subspace: bool = True
    subspace_dim: int | None = None
    n_way: int = 2
    k_shot: int = 1
    query: int | None = None
    alpha: float = 0.01
    beta: float = 0.001
    batch: int = 32
    inner_steps: int = 1
    iterations: int = 200
    second_order: bool = False
    outer_optimizer: str = "adamw"
    reduce: str = "mean"
    train_bases: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    init: str = "xavier_uniform"
    checkpoint_every: int = 0

    @property
    def query_size(self) -> int:
        return self.k_shot if self.query is None else self.query

    def validate(self) -> None:
        if not self.alpha >= 0:
            raise ConfigError("meta.alpha must be non-negative")
        if not self.beta > 0:
            raise ConfigError("meta.beta must be positive")
        for name in ("n_way", "k_shot", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"meta.{name} must be >= 1")
        if self.query_size < 1 or self.inner_steps < 0 or self.iterations < 0:
            raise ConfigError("meta.query >= 1, inner_steps >= 0, iterations >= 0 required")
        if self.outer_optimizer not in ("adamw", "sgd"):
            raise ConfigError("meta.outer_optimizer must be 'adamw' or 'sgd'")
        if self.reduce not in ("mean", "sum"):
            raise ConfigError("meta.reduce must be 'mean' or 'sum'")
        if self.init != "xavier_uniform":
            raise ConfigError("meta.init must be 'xavier_uniform'")


def subspace_dim(rows: int, requested: int | None) -> int:
    d = requested if requested is not None else max(4, rows // 4)
    return max(1, min(d, rows))


# state -----------------------------------------------------------------------------

@dataclass
class MetaState:
    bases: Slots
    coefs: Slots
    opt: dict[str, AdamWState]
    iteration: int
    config: dict[str, Any]
    train_bases: bool = True
    train_categories: tuple[int, ...] = ()

    def keys(self) -> list[tuple[str, str]]:
        return [(k, s) for k in self.coefs for s in self.coefs[k]]

    def materialize(self) -> Slots:
        return {k: {s: self.bases[k][s] @ self.coefs[k][s] for s in slots} for k, slots in self.coefs.items()}

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "iteration": self.iteration,
            "train_bases": self.train_bases,
            "train_categories": list(self.train_categories),
            "steps": {
                k: {s: {"S": self.bases[k][s].tolist(), "c": self.coefs[k][s].tolist()} for s in slots}
                for k, slots in self.coefs.items()
            },
            "optimizer": {key: st.to_json() for key, st in sorted(self.opt.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetaState":
        bases: Slots = {}
        coefs: Slots = {}
        for k, slots in d["steps"].items():
            bases[k] = {s: np.array(v["S"], dtype=np.float64) for s, v in slots.items()}
            coefs[k] = {s: np.array(v["c"], dtype=np.float64) for s, v in slots.items()}
        opt = {key: AdamWState.from_json(v) for key, v in d["optimizer"].items()}
        return cls(bases, coefs, opt, int(d["iteration"]), d["config"], bool(d["train_bases"]),
                   tuple(d.get("train_categories", ())))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _opt_key(kind: str, slot: str, part: str) -> str:
    return f"{kind}/{slot}/{part}"


def _orthonormal(rows: int, cols: int, rng: Rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((rows, cols)))
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs


def init_meta_state(
    shapes: Mapping[str, Mapping[str, tuple[int, int]]],
    cfg: MetaConfig,
    rng: Rng,
    config_snapshot: dict | None = None,
) -> MetaState:
    """Xavier-statistics initialisation of every (kind, slot) pair.

    With ``cfg.subspace`` the basis has orthonormal columns (QR of a Gaussian draw)
    and the coefficients are Xavier-uniform, rescaled so ``S c`` has the Xavier
    variance of a ``rows x cols`` matrix. Without it the basis is a frozen identity
    and the coefficients are the weights themselves.
    """
    cfg.validate()
    bases: Slots = {}
    coefs: Slots = {}
    for kind, slots in shapes.items():
        bases[kind], coefs[kind] = {}, {}
        for slot, (rows, cols) in slots.items():
            if cfg.subspace:
                dim = subspace_dim(rows, cfg.subspace_dim)
                basis = _orthonormal(rows, dim, rng)
                scale = np.sqrt(rows * (dim + cols) / (dim * (rows + cols)))
                bound = xavier_bound(dim, cols) * scale
                coef = rng.uniform(-bound, bound, (dim, cols))
            else:
                basis = np.eye(rows)
                bound = xavier_bound(rows, cols)
                coef = rng.uniform(-bound, bound, (rows, cols))
            bases[kind][slot] = basis
            coefs[kind][slot] = coef
    train_bases = cfg.subspace and cfg.train_bases
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon, weight_decay=cfg.weight_decay)
    opt = {}
    for kind, slots in coefs.items():
        for slot, c in slots.items():
            opt[_opt_key(kind, slot, "c")] = AdamWState.zeros_like(c, **hyper)
            if train_bases:
                opt[_opt_key(kind, slot, "S")] = AdamWState.zeros_like(bases[kind][slot], **hyper)
    snapshot = config_snapshot if config_snapshot is not None else {"meta": asdict(cfg)}
    return MetaState(bases, coefs, opt, 0, snapshot, train_bases)


def state_meta_config(state: MetaState) -> MetaConfig:
    return MetaConfig(**state.config["meta"])


def reconstruct(bases: Mapping[str, Mapping[str, Tensor]], coefs: Mapping[str, Mapping[str, Tensor]]) -> TensorSlots:
    out: TensorSlots = {}
    for kind, slots in coefs.items():
        out[kind] = {}
        for slot, c in slots.items():
            s = bases[kind][slot]
            if s.shape[1] != c.shape[0]:
                raise DimensionError(f"basis {s.shape} and coefficients {c.shape} of {kind}/{slot} do not chain")
            out[kind][slot] = matmul(s, c)
    return out


def reconstruct_params(state: MetaState) -> dict[str, AdaptorStep]:
    """Materialised adaptor steps ``w = S c`` (as constant tensors)."""
    slots = reconstruct(_const(state.bases), _const(state.coefs))
    return {k: AdaptorStep.from_slots(v) for k, v in slots.items()}


def _const(slots: Slots) -> TensorSlots:
    return {k: {s: Tensor(v) for s, v in d.items()} for k, d in slots.items()}


def _leaves(slots: Slots, requires_grad: bool = True) -> TensorSlots:
    return {k: {s: Tensor(v, requires_grad=requires_grad) for s, v in d.items()} for k, d in slots.items()}


def _flat(slots: TensorSlots) -> list[Tensor]:
    return [slots[k][s] for k in slots for s in slots[k]]


def _unflat(template: Mapping[str, Mapping[str, Any]], values: Sequence) -> dict:
    it = iter(values)
    return {k: {s: next(it) for s in d} for k, d in template.items()}


# episodes --------------------------------------------------------------------------

@dataclass
class Episode:
    support: list[CaptionedSample]
    query: list[CaptionedSample]
    categories: list[int]
    support_refs: list[int] = field(default_factory=list)
    query_refs: list[int] = field(default_factory=list)

    def support_batch(self) -> list[tuple[CaptionedSample, int]]:
        return list(zip(self.support, self.support_refs or [0] * len(self.support)))

    def query_batch(self) -> list[tuple[CaptionedSample, int]]:
        return list(zip(self.query, self.query_refs or [0] * len(self.query)))


def by_category(dataset: Iterable[CaptionedSample]) -> dict[int, list[CaptionedSample]]:
    out: dict[int, list[CaptionedSample]] = {}
    for s in dataset:
        out.setdefault(s.category_id, []).append(s)
    return dict(sorted(out.items()))


def sample_episode(dataset, n_way: int, k_shot: int, query: int, rng: Rng) -> Episode:
    """Draw an N-way episode: ``k_shot`` support and ``query`` query samples per category.

    ``dataset`` is a list of samples or a precomputed :func:`by_category` index.
    """
    index = dataset if isinstance(dataset, dict) else by_category(dataset)
    if len(index) < n_way:
        raise DataError(f"{len(index)} categories available, {n_way}-way episode requested")
    cats = rng.sample(list(index), n_way)
    support, query_set, s_refs, q_refs = [], [], [], []
    for cat in cats:
        pool = index[cat]
        if len(pool) < k_shot + query:
            raise DataError(f"category {cat} has {len(pool)} samples, needs {k_shot + query}")
        drawn = rng.sample(pool, k_shot + query)
        for i, s in enumerate(drawn):
            ref = rng.integers(len(s.references))
            if i < k_shot:
                support.append(s)
                s_refs.append(ref)
            else:
                query_set.append(s)
                q_refs.append(ref)
    return Episode(support, query_set, cats, s_refs, q_refs)


# objectives ------------------------------------------------------------------------

class Objective(Protocol):
    def episode_losses(self, params: Sequence[TensorSlots], batches: Sequence[Sequence]) -> list[Tensor]: ...


class CaptionObjective:
    """Summed chain loss of each episode's batch under that episode's adaptor weights."""

    def __init__(self, lm: TinyLM, tokenizer: Tokenizer, cfg: AdaptorConfig):
        if not lm.frozen:
            raise ContractError("the language model must be frozen")
        self.lm = lm
        self.tokenizer = tokenizer
        self.cfg = cfg

    def episode_losses(self, params: Sequence[TensorSlots], batches: Sequence[Sequence[tuple[CaptionedSample, int]]]) -> list[Tensor]:
        steps = [{k: AdaptorStep.from_slots(v) for k, v in p.items()} for p in params]
        feats = [np.stack([s.image_feature for s, _ in b]) if b else np.zeros((0, 0)) for b in batches]
        targets = [[make_targets(s, self.tokenizer, r) for s, r in b] for b in batches]
        items = cot_item_losses(steps, feats, targets, self.lm, self.cfg)
        out, start = [], 0
        for b in batches:
            out.append(items[start : start + len(b)].sum())
            start += len(b)
        return out


# inner loop ------------------------------------------------------------------------

def _adapt(
    bases: Sequence[TensorSlots],
    coefs: Sequence[TensorSlots],
    batches: Sequence[Sequence],
    alpha: float,
    steps: int,
    objective: Objective,
    create_graph: bool,
) -> tuple[list[TensorSlots], list[float]]:
    """Adapt each episode's coefficients with ``steps`` plain gradient steps.

    Returns the adapted coefficients and each episode's support loss before the
    first step. Without ``create_graph`` every result is a detached leaf.
    """
    cur = list(coefs)
    first_losses: list[float] = []
    for step in range(steps):
        params = [reconstruct(b, c) for b, c in zip(bases, cur)]
        losses = objective.episode_losses(params, batches)
        if step == 0:
            first_losses = [l.item() for l in losses]
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        flat = [x for c in cur for x in _flat(c)]
        grads = grad(total, flat, create_graph=create_graph)
        nxt = []
        per = len(flat) // len(cur)
        for e, c in enumerate(cur):
            g = _unflat(c, grads[e * per : (e + 1) * per])
            if create_graph:
                nxt.append({k: {s: sgd_step(c[k][s], g[k][s], alpha) for s in c[k]} for k in c})
            else:
                nxt.append({k: {s: Tensor(sgd_step(c[k][s].data, g[k][s].data, alpha), requires_grad=True)
                                for s in c[k]} for k in c})
        cur = nxt
    return cur, first_losses


def inner_adapt(state: MetaState, support: Sequence, alpha: float, objective: Objective, steps: int = 1) -> Slots:
    """Coefficients after ``steps`` gradient steps on ``support``; ``state`` is untouched."""
    if not alpha > 0:
        raise ConfigError(f"inner learning rate must be positive, got {alpha}")
    if steps == 0:
        return {k: {s: v.copy() for s, v in d.items()} for k, d in state.coefs.items()}
    adapted, _ = _adapt([_const(state.bases)], [_leaves(state.coefs)], [support], alpha, steps, objective, False)
    return {k: {s: t.data.copy() for s, t in d.items()} for k, d in adapted[0].items()}


# outer loop ------------------------------------------------------------------------

@dataclass
class MetaGradients:
    grads: dict[str, np.ndarray]  # _opt_key -> gradient
    support_loss: float
    query_loss: float


def _first_order_chunk(state: MetaState, episodes: Sequence[Episode], cfg: MetaConfig, objective: Objective):
    n = len(episodes)
    supports = [e.support_batch() for e in episodes]
    queries = [e.query_batch() for e in episodes]
    base_const = _const(state.bases)
    if cfg.inner_steps > 0 and cfg.alpha > 0:
        adapted, s_losses = _adapt([base_const] * n, [_leaves(state.coefs) for _ in range(n)], supports,
                                   cfg.alpha, cfg.inner_steps, objective, False)
    else:
        adapted = [_leaves(state.coefs) for _ in range(n)]
        with no_grad():
            s_losses = [l.item() for l in objective.episode_losses([reconstruct(base_const, a) for a in adapted], supports)]
    q_bases = [_leaves(state.bases, state.train_bases) for _ in range(n)]
    params = [reconstruct(b, c) for b, c in zip(q_bases, adapted)]
    losses = objective.episode_losses(params, queries)
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    wrt = []
    for b, c in zip(q_bases, adapted):
        wrt += _flat(c)
        if state.train_bases:
            wrt += _flat(b)
    grads = grad(total, wrt)
    per_episode = []
    per = len(wrt) // n
    for e in range(n):
        chunk = grads[e * per : (e + 1) * per]
        keys = [_opt_key(k, s, "c") for k, s in state.keys()]
        if state.train_bases:
            keys += [_opt_key(k, s, "S") for k, s in state.keys()]
        per_episode.append({key: g.data for key, g in zip(keys, chunk)})
    return per_episode, s_losses, [l.item() for l in losses]


def meta_gradients(state: MetaState, episodes: Sequence[Episode], objective: Objective,
                   cfg: MetaConfig | None = None, workers: int = 1) -> MetaGradients:
    """Meta-gradient of the (mean or summed) query loss after inner adaptation.

    First-order mode treats the adapted coefficients as constants. Second-order
    mode differentiates through the inner update exactly. Per-episode gradients are
    reduced in episode-index order.
    """
    cfg = cfg or state_meta_config(state)
    if not episodes:
        raise ContractError("outer step needs at least one episode")
    n = len(episodes)
    scale = 1.0 / n if cfg.reduce == "mean" else 1.0
    if cfg.second_order:
        return _second_order(state, episodes, objective, cfg, scale)
    if workers > 1 and n > 1:
        bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
        chunks = [episodes[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1)]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(lambda ch: _first_order_chunk(state, ch, cfg, objective), chunks))
    else:
        results = [_first_order_chunk(state, episodes, cfg, objective)]
    per_episode = [g for r in results for g in r[0]]
    s_losses = [x for r in results for x in r[1]]
    q_losses = [x for r in results for x in r[2]]
    acc: dict[str, np.ndarray] = {}
    for g in per_episode:
        for key, val in g.items():
            acc[key] = val.copy() if key not in acc else acc[key] + val
    grads = {key: val * scale for key, val in acc.items()}
    return MetaGradients(grads, float(np.mean(s_losses)), float(np.mean(q_losses)))


def _second_order(state: MetaState, episodes: Sequence[Episode], objective: Objective, cfg: MetaConfig,
                  scale: float) -> MetaGradients:
    n = len(episodes)
    with enable_grad():
        base_leaf = _leaves(state.bases, state.train_bases)
        coef_leaf = _leaves(state.coefs)
        # distinct interior nodes per episode so each inner gradient is episode-local
        coef_views = [{k: {s: t * 1.0 for s, t in d.items()} for k, d in coef_leaf.items()} for _ in range(n)]
        if cfg.inner_steps > 0 and cfg.alpha > 0:
            adapted, s_losses = _adapt([base_leaf] * n, coef_views, [e.support_batch() for e in episodes],
                                       cfg.alpha, cfg.inner_steps, objective, True)
        else:
            adapted, s_losses = coef_views, [float("nan")] * n
        params = [reconstruct(base_leaf, c) for c in adapted]
        losses = objective.episode_losses(params, [e.query_batch() for e in episodes])
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        total = total * scale
        wrt = _flat(coef_leaf) + (_flat(base_leaf) if state.train_bases else [])
        grads = grad(total, wrt)
    keys = [_opt_key(k, s, "c") for k, s in state.keys()]
    if state.train_bases:
        keys += [_opt_key(k, s, "S") for k, s in state.keys()]
    return MetaGradients({k: g.data for k, g in zip(keys, grads)}, float(np.mean(s_losses)),
                         float(np.mean([l.item() for l in losses])))


def apply_meta_update(state: MetaState, mg: MetaGradients, cfg: MetaConfig | None = None) -> MetaState:
    """One optimizer step on every coefficient (and basis, when trainable); functional."""
    cfg = cfg or state_meta_config(state)
    bases = {k: dict(d) for k, d in state.bases.items()}
    coefs = {k: dict(d) for k, d in state.coefs.items()}
    opt = dict(state.opt)
    for kind, slot in state.keys():
        targets = [("c", coefs)] + ([("S", bases)] if state.train_bases else [])
        for part, store in targets:
            key = _opt_key(kind, slot, part)
            g = mg.grads[key]
            if cfg.outer_optimizer == "adamw":
                store[kind][slot], opt[key] = adamw_step(store[kind][slot], g, opt[key], cfg.beta)
            else:
                store[kind][slot] = sgd_step(store[kind][slot], g, cfg.beta)
                opt[key] = replace(opt[key], step_count=opt[key].step_count + 1)
    return replace(state, bases=bases, coefs=coefs, opt=opt, iteration=state.iteration + 1)


def outer_step(state: MetaState, episodes: Sequence[Episode], objective: Objective,
               beta: float | None = None, second_order: bool | None = None, workers: int = 1) -> MetaState:
    cfg = state_meta_config(state)
    if beta is not None:
        if not beta > 0:
            raise ConfigError("outer learning rate must be positive")
        cfg = replace(cfg, beta=beta)
    if second_order is not None:
        cfg = replace(cfg, second_order=second_order)
    return apply_meta_update(state, meta_gradients(state, episodes, objective, cfg, workers), cfg)


# training loops --------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    mean_support_loss: float
    mean_query_loss: float
    wallclock_ms: float


def meta_train(
    state: MetaState,
    dataset: Sequence[CaptionedSample],
    iterations: int,
    objective: Objective,
    rng: Rng,
    workers: int = 1,
    on_checkpoint: Callable[[MetaState], None] | None = None,
) -> tuple[MetaState, list[LogRow]]:
    """Run ``iterations`` outer steps on fresh episode batches from ``dataset``."""
    cfg = state_meta_config(state)
    index = by_category(dataset)
    state = replace(state, train_categories=tuple(sorted(set(state.train_categories) | set(index))))
    log: list[LogRow] = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        episodes = [sample_episode(index, cfg.n_way, cfg.k_shot, cfg.query_size, rng) for _ in range(cfg.batch)]
        mg = meta_gradients(state, episodes, objective, cfg, workers)
        state = apply_meta_update(state, mg, cfg)
        log.append(LogRow(state.iteration, mg.support_loss, mg.query_loss, (time.perf_counter() - t0) * 1e3))
        if on_checkpoint and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state, log


def baseline_train(
    dataset: Sequence[CaptionedSample],
    iterations: int,
    objective: CaptionObjective,
    shapes: Mapping[str, Mapping[str, tuple[int, int]]],
    cfg: MetaConfig,
    rng: Rng,
    batch_size: int | None = None,
    config_snapshot: dict | None = None,
) -> tuple[MetaState, list[LogRow]]:
    """Non-episodic training of direct adaptor weights on uniform mini-batches.

    The result is a :class:`MetaState` with frozen identity bases so the same
    evaluation path applies (with ``alpha=0`` for no adaptation).
    """
    plain = replace(cfg, subspace=False)
    state = init_meta_state(shapes, plain, rng.stream("init"), config_snapshot)
    draw = rng.stream("batches")
    size = batch_size or cfg.batch * cfg.n_way * (cfg.k_shot + cfg.query_size)
    size = min(size, len(dataset))
    state = replace(state, train_categories=tuple(sorted({s.category_id for s in dataset})))
    log: list[LogRow] = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        idx = draw.sample(range(len(dataset)), size)
        batch = [(dataset[i], draw.integers(len(dataset[i].references))) for i in idx]
        leaves = _leaves(state.coefs)
        (loss,) = objective.episode_losses([reconstruct(_const(state.bases), leaves)], [batch])
        loss = loss * (1.0 / size)
        grads = grad(loss, _flat(leaves))
        mg = MetaGradients({_opt_key(k, s, "c"): g.data for (k, s), g in zip(state.keys(), grads)},
                           float("nan"), loss.item())
        state = apply_meta_update(state, mg, replace(plain, outer_optimizer="adamw"))
        log.append(LogRow(state.iteration, float("nan"), loss.item(), (time.perf_counter() - t0) * 1e3))
    return state, log


# meta-test -------------------------------------------------------------------------

@dataclass
class GeneratedCaption:
    episode: int
    sample: CaptionedSample
    subject: list[str]
    object: list[str]
    caption: list[str]


def meta_test(
    state: MetaState,
    test_set: Sequence[CaptionedSample],
    episodes: int,
    alpha: float,
    inner_steps: int,
    objective: CaptionObjective,
    rng: Rng,
    n_way: int | None = None,
    k_shot: int | None = None,
    query: int | None = None,
) -> list[GeneratedCaption]:
    """Adapt on each test episode's support set, then caption every query image.

    ``alpha == 0`` (or ``inner_steps == 0``) evaluates the meta-initialisation
    directly. ``state`` is never modified.
    """
    cfg = state_meta_config(state)
    n_way = n_way or cfg.n_way
    k_shot = k_shot or cfg.k_shot
    query = query or cfg.query_size
    index = by_category(test_set)
    overlap = set(index) & set(state.train_categories)
    if overlap:
        raise DataError(f"meta-test categories {sorted(overlap)} were seen during training")
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    eps = [sample_episode(index, n_way, k_shot, query, rng) for _ in range(episodes)]
    base_const = _const(state.bases)
    if alpha > 0 and inner_steps > 0:
        adapted, _ = _adapt([base_const] * len(eps), [_leaves(state.coefs) for _ in eps],
                            [e.support_batch() for e in eps], alpha, inner_steps, objective, False)
    else:
        adapted = [_const(state.coefs) for _ in eps]
    with no_grad():
        step_sets = []
        for a in adapted:
            slots = reconstruct(base_const, {k: {s: Tensor(t.data) for s, t in d.items()} for k, d in a.items()})
            step_sets.append({k: AdaptorStep.from_slots(v) for k, v in slots.items()})
        feats = [np.stack([s.image_feature for s in e.query]) for e in eps]
        decoded = cot_generate_batch(step_sets, feats, objective.lm, objective.cfg)
    out = []
    i = 0
    tok = objective.tokenizer
    for e_idx, e in enumerate(eps):
        for s in e.query:
            d = decoded[i]
            i += 1
            out.append(GeneratedCaption(e_idx, s, tok.decode(d.get("sub", [])), tok.decode(d.get("obj", [])),
                                        tok.decode(d["cap"])))
    return out


# persistence -----------------------------------------------------------------------

def save_state(state: MetaState, path: str | Path) -> None:
    Path(path).write_text(state.dumps() + "\n")


def load_state(path: str | Path) -> MetaState:
    return MetaState.from_json(json.loads(Path(path).read_text()))


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,mean_support_loss,mean_query_loss,wallclock_ms\n")
        for r in rows:
            fh.write(f"{r.iteration},{r.mean_support_loss!r},{r.mean_query_loss!r},{r.wallclock_ms:.3f}\n")


def caption_shapes(cfg: AdaptorConfig, d_v: int, d_m: int) -> dict[str, dict[str, tuple[int, int]]]:
    return {kind: slot_shapes(kind, cfg, d_v, d_m) for kind in cfg.plan()}
