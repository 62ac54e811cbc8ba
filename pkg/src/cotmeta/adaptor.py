"""Per-step meta-adaptors and the three-step subject -> object -> caption chain.

Each CoT step owns an :class:`AdaptorStep`: learnable prompt rows are prepended to
the projected image feature and mixed by a single attention block
``softmax(Q K^T) V`` (no projections or scaling by default), and the first ``c``
output rows become that step's soft prompts. Step ``k`` of the chain feeds the LM
the prompts of steps ``1..k`` plus a text prefix carrying earlier steps' words.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .frozen import BOS_ID, EOS_ID, PAD_ID, SEP_ID, TinyLM, Tokenizer, greedy_decode_batch, pad_sequences, lm_forward_batch
from .numerics import Tensor, broadcast_to, concat, matmul, no_grad, reshape, softmax, token_nll, transpose
from .world import CaptionedSample

KINDS = ("sub", "obj", "cap")


@dataclass
class AdaptorConfig:
    prompt_lengths: tuple[int, int, int] = (1, 1, 4)
    projections: bool = False
    scaled: bool = False
    heads: int = 1
    condition_on_text: bool = True
    sub_prompt: bool = True
    obj_prompt: bool = True
    max_sub_len: int = 1
    max_obj_len: int = 1
    max_caption_len: int = 16

    def plan(self) -> tuple[str, ...]:
        """Active CoT steps in chain order; the caption step is always present."""
        kinds = []
        if self.sub_prompt:
            kinds.append("sub")
        if self.obj_prompt:
            kinds.append("obj")
        return tuple(kinds) + ("cap",)

    def prompt_length(self, kind: str) -> int:
        return self.prompt_lengths[KINDS.index(kind)]


def slot_shapes(kind: str, cfg: AdaptorConfig, d_v: int, d_m: int) -> dict[str, tuple[int, int]]:
    """Parameter slots of one step as ``(rows, cols)`` matrices.

    Prompt rows are stored transposed (``d_m x c``) so every column is one prompt
    vector; that is the layout the subspace bases act on.
    """
    shapes = {"prompt": (d_m, cfg.prompt_length(kind)), "in_proj": (d_v, d_m), "out_proj": (d_m, d_m)}
    if cfg.projections:
        shapes.update({"q": (d_m, d_m), "k": (d_m, d_m), "v": (d_m, d_m)})
    return shapes


@dataclass
class AdaptorStep:
    prompt_tokens: Tensor  # [c, d_m]
    in_proj: Tensor  # [d_v, d_m]
    out_proj: Tensor  # [d_m, d_m]
    q: Tensor | None = None
    k: Tensor | None = None
    v: Tensor | None = None

    @classmethod
    def from_slots(cls, slots: Mapping[str, Tensor]) -> "AdaptorStep":
        return cls(slots["prompt"].T, slots["in_proj"], slots["out_proj"],
                   slots.get("q"), slots.get("k"), slots.get("v"))

    @property
    def length(self) -> int:
        return self.prompt_tokens.shape[0]


@dataclass
class CoTTargets:
    sub_tokens: list[int]
    obj_tokens: list[int]
    caption_tokens: list[int]

    def __post_init__(self):
        if not (self.sub_tokens and self.obj_tokens and self.caption_tokens):
            raise ContractError("CoT targets must be non-empty")
        if self.caption_tokens[-1] != EOS_ID:
            raise ContractError("caption target must end with EOS")

    def for_kind(self, kind: str) -> list[int]:
        return {"sub": self.sub_tokens, "obj": self.obj_tokens, "cap": self.caption_tokens}[kind]


def make_targets(sample: CaptionedSample, tokenizer: Tokenizer, reference: int = 0) -> CoTTargets:
    return CoTTargets(
        tokenizer.encode([sample.scene.subject]),
        tokenizer.encode([sample.scene.object]),
        tokenizer.encode(sample.references[reference]) + [EOS_ID],
    )


@dataclass
class PromptChain:
    prompts: list[Tensor] = field(default_factory=list)  # each [c_k, d_m] (or [B, c_k, d_m])


# attention block -------------------------------------------------------------------

def adaptor_forward_batch(step: AdaptorStep, features: Tensor, cfg: AdaptorConfig) -> Tensor:
    """Prompts ``[B, c, d_m]`` for image features ``[B, d_v]``."""
    if features.ndim != 2 or features.shape[1] != step.in_proj.shape[0]:
        raise DimensionError(f"features {features.shape} do not match in_proj {step.in_proj.shape}")
    b = features.shape[0]
    c, d = step.prompt_tokens.shape
    if step.out_proj.shape != (d, d):
        raise DimensionError("out_proj must be d_m x d_m")
    img = reshape(matmul(features, step.in_proj), (b, 1, d))
    prompts = broadcast_to(reshape(step.prompt_tokens, (1, c, d)), (b, c, d))
    z = concat([prompts, img], axis=1)  # [B, c+1, d]
    if cfg.projections:
        q, k, v = matmul(z, step.q), matmul(z, step.k), matmul(z, step.v)
    else:
        q = k = v = z
    q = q[:, :c, :]  # only the prompt rows are kept as outputs
    h = cfg.heads
    if d % h:
        raise DimensionError("d_m must be divisible by the adaptor head count")
    dh = d // h
    if h > 1:
        def split(t: Tensor) -> Tensor:
            return transpose(reshape(t, (b, t.shape[1], h, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
    scores = matmul(q, k.T)
    if cfg.scaled:
        scores = scores * (1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), v)
    if h > 1:
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, c, d))
    return matmul(out, step.out_proj)


def adaptor_forward(step: AdaptorStep, image_feature, cfg: AdaptorConfig | None = None) -> Tensor:
    """Prompts ``[c, d_m]`` for a single image feature ``[d_v]``."""
    cfg = cfg or AdaptorConfig()
    feat = image_feature if isinstance(image_feature, Tensor) else Tensor(image_feature)
    if feat.ndim != 1:
        raise DimensionError("image feature must be a vector")
    return adaptor_forward_batch(step, reshape(feat, (1, feat.shape[0])), cfg)[0]


# contexts --------------------------------------------------------------------------

def step_prefix(plan: Sequence[str], index: int, words: Mapping[str, Sequence[int]], condition_on_text: bool) -> list[int]:
    prefix = [BOS_ID]
    if condition_on_text:
        for kind in plan[:index]:
            prefix += list(words[kind]) + [SEP_ID]
    return prefix


def build_step_context(
    chain: PromptChain,
    step_index: int,
    targets: CoTTargets | None,
    mode: str = "train",
    decoded: Mapping[str, Sequence[int]] | None = None,
    cfg: AdaptorConfig | None = None,
) -> tuple[list[Tensor], list[int]]:
    """(prompt vectors, token prefix) for 1-based ``step_index`` of the chain.

    Train mode teacher-forces earlier steps' words from ``targets``; infer mode
    takes them from ``decoded``.
    """
    cfg = cfg or AdaptorConfig()
    plan = cfg.plan()
    if not 1 <= step_index <= len(plan):
        raise ContractError(f"step index {step_index} outside 1..{len(plan)}")
    if len(chain.prompts) < step_index:
        raise ContractError(f"chain has {len(chain.prompts)} entries, step {step_index} needs more")
    earlier = plan[: step_index - 1]
    if mode == "train":
        if targets is None:
            raise ContractError("train mode needs targets")
        words = {k: targets.for_kind(k) for k in earlier}
    elif mode == "infer":
        decoded = decoded or {}
        missing = [k for k in earlier if k not in decoded]
        if cfg.condition_on_text and missing:
            raise ContractError(f"infer mode is missing decoded output for {missing}")
        words = {k: decoded.get(k, []) for k in earlier}
    else:
        raise ContractError(f"unknown mode {mode!r}")
    prompts: list[Tensor] = []
    for p in chain.prompts[:step_index]:
        prompts.extend(p[i] for i in range(p.shape[0]))
    return prompts, step_prefix(plan, step_index - 1, words, cfg.condition_on_text)


# loss ------------------------------------------------------------------------------

def _group_prompts(step_sets: Sequence[Mapping[str, AdaptorStep]], feature_groups: Sequence[np.ndarray],
                   cfg: AdaptorConfig) -> dict[str, Tensor]:
    out = {}
    for kind in cfg.plan():
        parts = [adaptor_forward_batch(steps[kind], Tensor(np.asarray(feats)), cfg)
                 for steps, feats in zip(step_sets, feature_groups) if len(feats)]
        out[kind] = concat(parts, axis=0)
    return out


def cot_item_losses(
    step_sets: Sequence[Mapping[str, AdaptorStep]],
    feature_groups: Sequence[np.ndarray],
    target_groups: Sequence[Sequence[CoTTargets]],
    lm: TinyLM,
    cfg: AdaptorConfig,
) -> Tensor:
    """Per-sample chain losses ``[B]`` for several parameter groups in one LM pass per step.

    Group ``g`` uses adaptor steps ``step_sets[g]`` on ``feature_groups[g]``; items
    come out concatenated in group order.
    """
    plan = cfg.plan()
    targets = [t for group in target_groups for t in group]
    if not targets:
        raise ContractError("no samples to score")
    prompts = _group_prompts(step_sets, feature_groups, cfg)
    total: Tensor | None = None
    for j, kind in enumerate(plan):
        chain = concat([prompts[k] for k in plan[: j + 1]], axis=1)
        inputs, tgt, weights = [], [], []
        for t in targets:
            prefix = step_prefix(plan, j, {k: t.for_kind(k) for k in plan[:j]}, cfg.condition_on_text)
            target = t.for_kind(kind)
            inputs.append(prefix + target[:-1])
            start = len(prefix) - 1
            tgt.append([PAD_ID] * start + target)
            weights.append([0.0] * start + [1.0 / len(target)] * len(target))
        tok = pad_sequences(inputs)
        tgt_arr = pad_sequences(tgt)
        w = np.zeros(tgt_arr.shape)
        for i, row in enumerate(weights):
            w[i, : len(row)] = row
        nll = token_nll(lm_forward_batch(lm, chain, tok), tgt_arr)
        term = (nll * Tensor(w)).sum(axis=1)
        total = term if total is None else total + term
    return total


def cot_loss(steps: Mapping[str, AdaptorStep], lm: TinyLM, sample: CaptionedSample, targets: CoTTargets,
             cfg: AdaptorConfig | None = None) -> Tensor:
    """Sum of the per-step mean cross-entropies for one sample (equal weights)."""
    cfg = cfg or AdaptorConfig()
    if not lm.frozen:
        raise ContractError("cot_loss expects a frozen language model")
    losses = cot_item_losses([steps], [sample.image_feature[None, :]], [[targets]], lm, cfg)
    return losses.sum()


# generation ------------------------------------------------------------------------

def cot_generate_batch(
    step_sets: Sequence[Mapping[str, AdaptorStep]],
    feature_groups: Sequence[np.ndarray],
    lm: TinyLM,
    cfg: AdaptorConfig,
) -> list[dict[str, list[int]]]:
    """Greedy chain decoding; each output maps step kind -> decoded token ids."""
    plan = cfg.plan()
    max_lens = {"sub": cfg.max_sub_len, "obj": cfg.max_obj_len, "cap": cfg.max_caption_len}
    with no_grad():
        prompts = _group_prompts(step_sets, feature_groups, cfg)
        n = prompts[plan[0]].shape[0]
        decoded: list[dict[str, list[int]]] = [{} for _ in range(n)]
        for j, kind in enumerate(plan):
            chain = concat([prompts[k] for k in plan[: j + 1]], axis=1)
            prefixes = [step_prefix(plan, j, d, cfg.condition_on_text) for d in decoded]
            stops = (EOS_ID,) if kind == "cap" else (EOS_ID, SEP_ID)
            outs = greedy_decode_batch(lm, chain, prefixes, max_lens[kind], stops)
            for d, o in zip(decoded, outs):
                d[kind] = o
    return decoded


def cot_generate(steps: Mapping[str, AdaptorStep], lm: TinyLM, image_feature: np.ndarray,
                 cfg: AdaptorConfig | None = None) -> tuple[list[int], list[int], list[int]]:
    """(subject, object, caption) token ids for one image; the caption is the system output."""
    cfg = cfg or AdaptorConfig()
    out = cot_generate_batch([steps], [np.asarray(image_feature)[None, :]], lm, cfg)[0]
    return out.get("sub", []), out.get("obj", []), out["cap"]
