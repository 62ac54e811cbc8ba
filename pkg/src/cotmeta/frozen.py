"""Frozen backbones: a seeded vision encoder and a tiny causal language model.

Both are fixed once built (the LM after pretraining on the synthetic corpus). Soft
prompts enter the LM as leading input vectors; gradients flow into them even though
every LM parameter is a constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, UnknownWordError
from .numerics import (
    AdamWState,
    Tensor,
    adamw_step,
    backward,
    concat,
    index_select,
    matmul,
    no_grad,
    reshape,
    softmax,
    token_nll,
    transpose,
)
from .numerics.optim import xavier_uniform
from .rng import Rng
from .world import Grammar, Scene, realize_captions, sample_scene

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)
PAD_ID, BOS_ID, EOS_ID, SEP_ID = range(4)

_MASK_VALUE = -1e30


class Tokenizer:
    """Word-level closed-vocabulary tokenizer; specials occupy ids 0-3."""

    def __init__(self, words: Sequence[str]):
        vocab = list(SPECIALS) + [w for w in sorted(set(words)) if w not in SPECIALS]
        self.vocabulary = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def from_grammar(cls, grammar: Grammar) -> "Tokenizer":
        return cls(grammar.vocabulary())

    def __len__(self) -> int:
        return len(self.vocabulary)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise UnknownWordError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.vocabulary[i] for i in ids]


# vision encoder --------------------------------------------------------------------

@dataclass
class VisionEncoder:
    subject_table: dict[str, np.ndarray]
    object_table: dict[str, np.ndarray]
    verb_table: dict[str, np.ndarray]
    projection: np.ndarray  # [3*d_e, d_v]
    noise_scale: float

    @property
    def d_v(self) -> int:
        return self.projection.shape[1]

    def encode(self, scene: Scene) -> np.ndarray:
        return encode_image(self, scene)

    def to_json(self) -> dict:
        return {
            "subject_table": {w: v.tolist() for w, v in sorted(self.subject_table.items())},
            "object_table": {w: v.tolist() for w, v in sorted(self.object_table.items())},
            "verb_table": {w: v.tolist() for w, v in sorted(self.verb_table.items())},
            "projection": self.projection.tolist(),
            "noise_scale": self.noise_scale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VisionEncoder":
        def table(t):
            return {w: _frozen_array(v) for w, v in t.items()}

        return cls(table(d["subject_table"]), table(d["object_table"]), table(d["verb_table"]),
                   _frozen_array(d["projection"]), float(d["noise_scale"]))

    def fingerprint(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _frozen_array(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def build_vision_encoder(grammar: Grammar, rng: Rng, d_e: int = 32, d_v: int = 64, noise_scale: float = 0.1) -> VisionEncoder:
    def table(words):
        return {w: _frozen_array(rng.normal(d_e)) for w in words}

    subjects = table([w for w, _ in grammar.subjects])
    objects = table(grammar.objects)
    verbs = table(grammar.verbs)
    projection = _frozen_array(xavier_uniform((3 * d_e, d_v), rng).data)
    return VisionEncoder(subjects, objects, verbs, projection, float(noise_scale))


def encode_image(enc: VisionEncoder, scene: Scene) -> np.ndarray:
    """Project the concatenated (subject, object, verb) embeddings and add seeded noise."""
    try:
        parts = [enc.subject_table[scene.subject], enc.object_table[scene.object], enc.verb_table[scene.verb]]
    except KeyError as exc:
        raise UnknownWordError(f"scene word {exc.args[0]!r} has no visual embedding") from None
    feature = np.concatenate(parts) @ enc.projection
    if enc.noise_scale:
        feature = feature + enc.noise_scale * Rng(scene.noise_seed).normal(enc.d_v)
    return feature


# language model --------------------------------------------------------------------

@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    t_max: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


@dataclass
class TinyLM:
    config: LMConfig
    params: dict[str, np.ndarray]
    frozen: bool = False
    stats: dict[str, float] = field(default_factory=dict)
    _const: dict[str, Tensor] | None = field(default=None, init=False, repr=False, compare=False)

    def tensors(self) -> dict[str, Tensor]:
        """Parameters as constant tensors (no gradient ever reaches them)."""
        if self._const is None:
            self._const = {k: Tensor(v) for k, v in self.params.items()}
        return self._const

    def freeze(self) -> "TinyLM":
        for v in self.params.values():
            v.setflags(write=False)
        self.frozen = True
        self._const = None
        return self

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "frozen": self.frozen,
            "stats": dict(self.stats),
            "params": {k: v.tolist() for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "TinyLM":
        lm = cls(LMConfig(**d["config"]), {k: np.array(v, dtype=np.float64) for k, v in d["params"].items()},
                 False, dict(d.get("stats", {})))
        return lm.freeze() if d["frozen"] else lm


def init_lm(config: LMConfig, rng: Rng, embed_scale: float = 0.1) -> TinyLM:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    p: dict[str, np.ndarray] = {
        "tok_emb": embed_scale * rng.normal((v, d)),
        "pos_emb": embed_scale * rng.normal((config.t_max, d)),
    }
    for layer in range(config.n_layers):
        pre = f"blocks.{layer}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = xavier_uniform((d, d), rng).data.copy()
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ff.w1"] = xavier_uniform((d, f), rng).data.copy()
        p[pre + "ff.b1"] = np.zeros(f)
        p[pre + "ff.w2"] = xavier_uniform((f, d), rng).data.copy()
        p[pre + "ff.b2"] = np.zeros(d)
    p["ln_f.g"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["head.w"] = xavier_uniform((d, v), rng).data.copy()
    p["head.b"] = np.zeros(v)
    return TinyLM(config, p)


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * g + b


def _causal_mask(n: int) -> Tensor:
    m = np.triu(np.full((n, n), _MASK_VALUE), k=1)
    return Tensor(m)


def _attention(x: Tensor, p: dict[str, Tensor], pre: str, n_heads: int, mask: Tensor) -> Tensor:
    b, s, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, s, n_heads, dh)), (0, 2, 1, 3))

    q = heads(matmul(x, p[pre + "attn.wq"]))
    k = heads(matmul(x, p[pre + "attn.wk"]))
    v = heads(matmul(x, p[pre + "attn.wv"]))
    scores = matmul(q, k.T) * (1.0 / math.sqrt(dh)) + mask
    out = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(out, (0, 2, 1, 3)), (b, s, d))
    return matmul(merged, p[pre + "attn.wo"])


def lm_forward_batch(lm: TinyLM, prompts: Tensor | None, tokens, params: dict[str, Tensor] | None = None,
                     position_offset: int = 0) -> Tensor:
    """Logits ``[B, T, V]`` for token positions of right-padded ``tokens [B, T]``.

    ``prompts`` is ``[B, P, d_model]`` (or None) and occupies the leading positions.
    Right padding is harmless: causal attention keeps real positions blind to it.
    ``position_offset`` shifts every position index (pretraining augmentation).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be a [batch, length] array")
    cfg = lm.config
    p = params if params is not None else lm.tensors()
    b, t = tokens.shape
    n_prompt = 0 if prompts is None else prompts.shape[1]
    total = n_prompt + t
    if position_offset < 0 or position_offset + total > cfg.t_max:
        raise CapacityError(f"sequence of {total} positions at offset {position_offset} exceeds t_max={cfg.t_max}")
    emb = index_select(p["tok_emb"], tokens)
    x = emb if prompts is None or n_prompt == 0 else concat([prompts, emb], axis=1)
    x = x + p["pos_emb"][position_offset : position_offset + total]
    mask = _causal_mask(total)
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        x = x + _attention(_layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, cfg.n_heads, mask)
        h = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = (matmul(h, p[pre + "ff.w1"]) + p[pre + "ff.b1"]).relu()
        x = x + matmul(h, p[pre + "ff.w2"]) + p[pre + "ff.b2"]
    x = _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    if n_prompt:
        x = x[:, n_prompt:, :]
    return matmul(x, p["head.w"]) + p["head.b"]


def lm_forward(lm: TinyLM, prompts: Sequence[Tensor] | Tensor | None, tokens: Sequence[int]) -> Tensor:
    """Single-sequence forward: logits ``[T, V]`` for ``tokens`` after ``prompts``."""
    pt = _stack_prompts(prompts, lm.config.d_model)
    logits = lm_forward_batch(lm, None if pt is None else reshape(pt, (1,) + pt.shape), [list(tokens)])
    return logits[0]


def _stack_prompts(prompts, d_model: int) -> Tensor | None:
    if prompts is None:
        return None
    if isinstance(prompts, Tensor):
        return prompts if prompts.ndim == 2 else reshape(prompts, (1, d_model))
    rows = [p if p.ndim == 2 else reshape(p, (1, d_model)) for p in prompts]
    if not rows:
        return None
    return concat(rows, axis=0)


# pretraining -----------------------------------------------------------------------

def build_corpus(
    grammar: Grammar,
    n_scenes: int,
    rng: Rng,
    format_weights: Sequence[float] = (0.55, 0.15, 0.15, 0.15),
) -> list[list[str]]:
    """Token sequences realised from scenes over every category of ``grammar``.

    Formats (chosen per scene by ``format_weights``): ``full`` = subject, SEP, object,
    SEP, caption; ``sub`` and ``obj`` keep one of the two leading segments; ``plain``
    is the caption alone. All start with BOS and end with EOS.
    """
    cats = grammar.categories
    cum = np.cumsum(format_weights) / float(np.sum(format_weights))
    corpus = []
    for _ in range(n_scenes):
        scene = sample_scene(grammar, rng.choice(cats), rng)
        (caption,) = realize_captions(grammar, scene, rng, 1)
        fmt = int(np.searchsorted(cum, rng.random(), side="right"))
        lead: list[str] = []
        if fmt in (0, 1):
            lead += [scene.subject, SEP]
        if fmt in (0, 2):
            lead += [scene.object, SEP]
        corpus.append([BOS] + lead + list(caption) + [EOS])
    return corpus


def pad_sequences(seqs: Sequence[Sequence[int]], value: int = PAD_ID) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def sequence_loss(lm: TinyLM, seqs: Sequence[Sequence[int]], params: dict[str, Tensor] | None = None,
                  position_offset: int = 0) -> Tensor:
    """Mean next-token cross-entropy over all non-pad target positions."""
    inputs = pad_sequences([s[:-1] for s in seqs])
    targets = pad_sequences([s[1:] for s in seqs])
    weights = np.zeros(targets.shape)
    for i, s in enumerate(seqs):
        weights[i, : len(s) - 1] = 1.0
    nll = token_nll(lm_forward_batch(lm, None, inputs, params, position_offset), targets)
    return (nll * Tensor(weights)).sum() * (1.0 / weights.sum())


def unigram_cross_entropy(train: Sequence[Sequence[int]], heldout: Sequence[Sequence[int]], vocab_size: int) -> float:
    """Held-out cross-entropy of an add-one unigram model fitted on ``train`` targets."""
    counts = np.ones(vocab_size)
    for s in train:
        np.add.at(counts, np.asarray(s[1:]), 1.0)
    logp = np.log(counts / counts.sum())
    total = sum(len(s) - 1 for s in heldout)
    return float(-sum(logp[np.asarray(s[1:])].sum() for s in heldout) / total)


def lm_pretrain(
    lm: TinyLM,
    corpus: Sequence[Sequence[int]],
    epochs: int,
    lr: float,
    rng: Rng,
    batch_size: int = 32,
    heldout_fraction: float = 0.1,
    weight_decay: float = 0.01,
    max_position_offset: int = 8,
) -> TinyLM:
    """Train on the first 90% of ``corpus`` with AdamW and return a frozen copy.

    Each batch starts at a random position offset in ``[0, max_position_offset]`` so
    the model reads text the same way wherever it sits, as it must once soft prompts
    take the leading positions.

    ``stats`` of the result records the held-out LM cross-entropy and the unigram
    baseline on the same slice.
    """
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    if lm.frozen:
        raise ConfigError("cannot pretrain a frozen model")
    n_hold = max(1, int(round(heldout_fraction * len(corpus)))) if len(corpus) > 1 else 0
    train = list(corpus[: len(corpus) - n_hold])
    heldout = list(corpus[len(corpus) - n_hold:])
    params = {k: v.copy() for k, v in lm.params.items()}
    states = {k: AdamWState.zeros_like(v, weight_decay=weight_decay) for k, v in params.items()}
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start : start + batch_size]]
            width = max(len(s) for s in batch) - 1
            offset = rng.integers(max(0, min(max_position_offset, lm.config.t_max - width)) + 1)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = sequence_loss(lm, batch, leaves, offset)
            grads = backward(loss)
            for k, leaf in leaves.items():
                g = grads[leaf].data if leaf in grads else np.zeros_like(params[k])
                params[k], states[k] = adamw_step(params[k], g, states[k], lr)
    out = TinyLM(lm.config, params).freeze()
    if heldout:
        with no_grad():
            out.stats["heldout_ce"] = sequence_loss(out, heldout).item()
        out.stats["unigram_ce"] = unigram_cross_entropy(train, heldout, lm.config.vocab_size)
    return out


# decoding --------------------------------------------------------------------------

def greedy_decode_batch(
    lm: TinyLM,
    prompts: Tensor | None,
    prefixes: Sequence[Sequence[int]],
    max_len: int,
    stop_tokens: Sequence[int] = (EOS_ID,),
) -> list[list[int]]:
    """Greedy argmax continuation of each prefix; ties go to the lowest token id.

    The stop token is not included in the output.
    """
    n = len(prefixes)
    outputs: list[list[int]] = [[] for _ in range(n)]
    if max_len <= 0 or n == 0:
        return outputs
    n_prompt = 0 if prompts is None else prompts.shape[1]
    longest = max(len(p) for p in prefixes)
    if n_prompt + longest + max_len - 1 > lm.config.t_max:
        raise CapacityError("decoding would exceed the model's context window")
    stops = set(stop_tokens)
    seqs = [list(p) for p in prefixes]
    active = list(range(n))
    with no_grad():
        for _ in range(max_len):
            if not active:
                break
            sub_prompts = None if prompts is None else prompts[np.asarray(active)]
            logits = lm_forward_batch(lm, sub_prompts, pad_sequences([seqs[i] for i in active])).data
            still = []
            for row, i in enumerate(active):
                nxt = int(np.argmax(logits[row, len(seqs[i]) - 1]))
                if nxt in stops:
                    continue
                outputs[i].append(nxt)
                seqs[i].append(nxt)
                still.append(i)
            active = still
    return outputs


def greedy_decode(lm: TinyLM, prompts, prefix: Sequence[int], max_len: int,
                  stop_tokens: Sequence[int] = (EOS_ID,)) -> list[int]:
    pt = _stack_prompts(prompts, lm.config.d_model)
    batch = None if pt is None else reshape(pt, (1,) + pt.shape)
    return greedy_decode_batch(lm, batch, [list(prefix)], max_len, stop_tokens)[0]


# persistence -----------------------------------------------------------------------

def save_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def save_lm(lm: TinyLM, path: str | Path) -> None:
    save_json(lm.to_json(), path)


def load_lm(path: str | Path) -> TinyLM:
    return TinyLM.from_json(json.loads(Path(path).read_text()))


def save_encoder(enc: VisionEncoder, path: str | Path) -> None:
    save_json(enc.to_json(), path)


def load_encoder(path: str | Path) -> VisionEncoder:
    return VisionEncoder.from_json(json.loads(Path(path).read_text()))
