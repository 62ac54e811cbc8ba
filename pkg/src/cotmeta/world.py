"""Synthetic subject-verb-object captioning world.

A :class:`Grammar` fixes a closed vocabulary of pseudo-words: subjects grouped into
categories (the class label that defines few-shot tasks), objects, verbs, caption
templates and synonym sets. Scenes are sampled from it, rendered into image
features by a frozen encoder, and described by several reference captions.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DataError, UnknownWordError
from .rng import Rng

SUB, VERB, OBJ = "<SUB>", "<VERB>", "<OBJ>"
SLOTS = (SUB, VERB, OBJ)

FUNCTION_WORDS = ("a", "the", "one", "this", "is", "here", "there", "today", "now", "again", "quietly", "slowly")
_DETS = ("a", "the", "one", "this")
_ADVERBS = (None, "quietly", "slowly")
_TAILS = (None, "here", "there", "today", "now", "again")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

MIN_COUNTS = {"n_categories": 10, "subjects_per_category": 2, "n_objects": 10, "n_verbs": 8, "n_templates": 3}


@dataclass
class WorldConfig:
    n_categories: int = 20
    subjects_per_category: int = 2
    n_objects: int = 20
    n_verbs: int = 12
    n_templates: int = 6
    synonym_fraction: float = 0.5
    synonym_rate: float = 0.3
    max_verbs_per_pair: int = 3
    n_test_categories: int = 5
    per_category: int = 30
    refs_per_sample: int = 5
    corpus_scenes: int = 2000


@dataclass
class Grammar:
    subjects: list[tuple[str, int]]
    objects: list[str]
    verbs: list[str]
    compatibility: dict[tuple[int, str], list[str]]
    templates: list[list[str]]
    synonyms: dict[str, list[str]]
    pos: dict[str, str]
    synonym_rate: float = 0.3
    _by_category: dict[int, list[str]] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        cats: dict[int, list[str]] = {}
        for word, cat in self.subjects:
            cats.setdefault(cat, []).append(word)
        self._by_category = cats

    @property
    def categories(self) -> list[int]:
        return sorted(self._by_category)

    def subjects_in(self, category_id: int) -> list[str]:
        try:
            return self._by_category[category_id]
        except KeyError:
            raise UnknownWordError(f"unknown category {category_id}") from None

    def category_of(self, subject: str) -> int:
        for word, cat in self.subjects:
            if word == subject:
                return cat
        raise UnknownWordError(f"unknown subject {subject!r}")

    def allowed_verbs(self, category_id: int, obj: str) -> list[str]:
        try:
            return self.compatibility[(category_id, obj)]
        except KeyError:
            raise UnknownWordError(f"no compatibility entry for ({category_id}, {obj!r})") from None

    def synonym_set(self, word: str) -> list[str]:
        return self.synonyms.get(word, [word])

    def vocabulary(self) -> list[str]:
        words = set(self.pos)
        for tpl in self.templates:
            words.update(t for t in tpl if t not in SLOTS)
        return sorted(words)

    def check(self) -> None:
        """Raise ``DataError`` if a structural invariant is broken."""
        seen = {}
        for word, cat in self.subjects:
            if word in seen and seen[word] != cat:
                raise DataError(f"subject {word!r} has two categories")
            seen[word] = cat
        for cat in self.categories:
            for obj in self.objects:
                if not self.compatibility.get((cat, obj)):
                    raise DataError(f"no verb for category {cat} and object {obj!r}")
        for word, group in self.synonyms.items():
            if word not in group:
                raise DataError(f"synonym set of {word!r} is not reflexive")
            for other in group:
                if word not in self.synonyms.get(other, [other]):
                    raise DataError(f"synonym relation {word!r}~{other!r} is not symmetric")

    # serialization -----------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "subjects": [[w, c] for w, c in self.subjects],
            "objects": list(self.objects),
            "verbs": list(self.verbs),
            "compatibility": [[c, o, list(v)] for (c, o), v in sorted(self.compatibility.items())],
            "templates": [list(t) for t in self.templates],
            "synonyms": {w: list(s) for w, s in sorted(self.synonyms.items())},
            "pos": dict(sorted(self.pos.items())),
            "synonym_rate": self.synonym_rate,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Grammar":
        return cls(
            subjects=[(w, int(c)) for w, c in d["subjects"]],
            objects=list(d["objects"]),
            verbs=list(d["verbs"]),
            compatibility={(int(c), o): list(v) for c, o, v in d["compatibility"]},
            templates=[list(t) for t in d["templates"]],
            synonyms={w: list(s) for w, s in d["synonyms"].items()},
            pos=dict(d["pos"]),
            synonym_rate=float(d["synonym_rate"]),
        )


@dataclass(frozen=True)
class Scene:
    subject: str
    object: str
    verb: str
    noise_seed: int

    def to_json(self) -> dict:
        return {"subject": self.subject, "object": self.object, "verb": self.verb, "noise_seed": self.noise_seed}

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(d["subject"], d["object"], d["verb"], int(d["noise_seed"]))


@dataclass(frozen=True)
class CaptionedSample:
    scene: Scene
    image_feature: np.ndarray
    references: tuple[tuple[str, ...], ...]
    category_id: int

    def to_json(self) -> dict:
        return {
            "scene": self.scene.to_json(),
            "category_id": self.category_id,
            "feature": self.image_feature.tolist(),
            "references": [list(r) for r in self.references],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CaptionedSample":
        feat = np.array(d["feature"], dtype=np.float64)
        feat.setflags(write=False)
        return cls(
            Scene.from_json(d["scene"]),
            feat,
            tuple(tuple(r) for r in d["references"]),
            int(d["category_id"]),
        )


@dataclass(frozen=True)
class CategorySplit:
    meta_train_categories: frozenset[int]
    meta_test_categories: frozenset[int]

    def __post_init__(self):
        overlap = self.meta_train_categories & self.meta_test_categories
        if overlap:
            raise DataError(f"meta-train and meta-test categories overlap: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {"meta_train": sorted(self.meta_train_categories), "meta_test": sorted(self.meta_test_categories)}

    @classmethod
    def from_json(cls, d: dict) -> "CategorySplit":
        return cls(frozenset(d["meta_train"]), frozenset(d["meta_test"]))


class ImageEncoder(Protocol):
    def encode(self, scene: Scene) -> np.ndarray: ...


# generation ------------------------------------------------------------------------

def _pseudo_words(rng: Rng, n: int, taken: set[str], syllables: int, suffix: str = "") -> list[str]:
    words: list[str] = []
    while len(words) < n:
        w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syllables)) + suffix
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _template_space() -> list[list[str]]:
    space = []
    for d1, adv, d2, tail in itertools.product(_DETS, _ADVERBS, _DETS, _TAILS):
        tpl = [d1, SUB] + ([adv] if adv else []) + [VERB, d2, OBJ] + ([tail] if tail else [])
        space.append(tpl)
    return space


def _check_counts(cfg: WorldConfig) -> None:
    for name, lo in MIN_COUNTS.items():
        if getattr(cfg, name) < lo:
            raise ConfigError(f"world.{name} must be >= {lo}, got {getattr(cfg, name)}")
    if not 0.0 <= cfg.synonym_rate <= 1.0:
        raise ConfigError("world.synonym_rate must lie in [0, 1]")
    if not 0.0 <= cfg.synonym_fraction <= 1.0:
        raise ConfigError("world.synonym_fraction must lie in [0, 1]")
    if not 1 <= cfg.max_verbs_per_pair <= cfg.n_verbs:
        raise ConfigError("world.max_verbs_per_pair must lie in [1, n_verbs]")


def _draw_compatibility(categories: Iterable[int], objects: Sequence[str], verbs: Sequence[str],
                        max_verbs: int, rng: Rng) -> dict[tuple[int, str], list[str]]:
    compat = {}
    for cat in categories:
        for obj in objects:
            k = 1 + rng.integers(max_verbs)
            compat[(cat, obj)] = sorted(rng.sample(list(verbs), k))
    return compat


def build_grammar(cfg: WorldConfig, rng: Rng) -> Grammar:
    """Deterministic grammar for ``cfg`` drawn from ``rng``."""
    _check_counts(cfg)
    taken = set(FUNCTION_WORDS)
    n_sub = cfg.n_categories * cfg.subjects_per_category
    subject_words = _pseudo_words(rng, n_sub, taken, 2)
    subjects = [(w, i // cfg.subjects_per_category) for i, w in enumerate(subject_words)]
    objects = _pseudo_words(rng, cfg.n_objects, taken, 2, "n")
    verbs = _pseudo_words(rng, cfg.n_verbs, taken, 2, "s")

    pos = {w: "noun" for w in subject_words + objects}
    pos.update({w: "verb" for w in verbs})
    synonyms: dict[str, list[str]] = {}
    for word in subject_words + objects + verbs:
        if rng.random() < cfg.synonym_fraction:
            suffix = "s" if pos[word] == "verb" else ("n" if word in objects else "")
            (alt,) = _pseudo_words(rng, 1, taken, 2, suffix)
            pos[alt] = pos[word]
            synonyms[word] = sorted([word, alt])
            synonyms[alt] = sorted([word, alt])
    for w in FUNCTION_WORDS:
        pos[w] = "function"

    compat = _draw_compatibility(range(cfg.n_categories), objects, verbs, cfg.max_verbs_per_pair, rng)
    templates = rng.sample(_template_space(), cfg.n_templates)
    grammar = Grammar(subjects, objects, verbs, compat, templates, synonyms, pos, cfg.synonym_rate)
    grammar.check()
    return grammar


def shift_domain(grammar: Grammar, rng: Rng, n_templates: int | None = None, max_verbs_per_pair: int = 3) -> Grammar:
    """Same vocabulary, reshuffled compatibility map and fresh templates.

    Used to emulate a cross-domain test world: the token inventory is unchanged but
    which verbs co-occur with which subjects and objects, and how captions are
    phrased, both move.
    """
    n_templates = n_templates or len(grammar.templates)
    cats = grammar.categories
    compat = _draw_compatibility(cats, grammar.objects, grammar.verbs, min(max_verbs_per_pair, len(grammar.verbs)), rng)
    fresh = [t for t in _template_space() if t not in grammar.templates]
    templates = rng.sample(fresh, min(n_templates, len(fresh)))
    shifted = Grammar(list(grammar.subjects), list(grammar.objects), list(grammar.verbs), compat, templates,
                      {w: list(s) for w, s in grammar.synonyms.items()}, dict(grammar.pos), grammar.synonym_rate)
    shifted.check()
    return shifted


def make_split(grammar: Grammar, n_test: int, rng: Rng) -> CategorySplit:
    cats = grammar.categories
    if not 0 < n_test < len(cats):
        raise ConfigError(f"n_test_categories must lie in (0, {len(cats)}), got {n_test}")
    order = rng.permutation(len(cats))
    test = frozenset(cats[i] for i in order[:n_test])
    return CategorySplit(frozenset(cats) - test, test)


def sample_scene(grammar: Grammar, category_id: int, rng: Rng) -> Scene:
    subjects = grammar.subjects_in(category_id)
    subject = rng.choice(subjects)
    obj = rng.choice(grammar.objects)
    verb = rng.choice(grammar.allowed_verbs(category_id, obj))
    return Scene(subject, obj, verb, rng.next_u64())


def _fill(template: Sequence[str], words: dict[str, str]) -> tuple[str, ...]:
    return tuple(words.get(t, t) for t in template)


def caption_space(grammar: Grammar, scene: Scene) -> list[tuple[str, ...]]:
    """Every distinct caption of ``scene`` the grammar can produce, in canonical order."""
    subs = grammar.synonym_set(scene.subject)
    verbs = grammar.synonym_set(scene.verb)
    objs = grammar.synonym_set(scene.object)
    out = []
    for tpl in grammar.templates:
        for s, v, o in itertools.product(subs, verbs, objs):
            cap = _fill(tpl, {SUB: s, VERB: v, OBJ: o})
            if cap not in out:
                out.append(cap)
    return out


def realize_captions(grammar: Grammar, scene: Scene, rng: Rng, count: int) -> list[tuple[str, ...]]:
    """``count`` distinct captions of ``scene``.

    Each caption picks a template uniformly (with replacement) and swaps each content
    word for a synonym with probability ``grammar.synonym_rate``. Duplicates are
    redrawn; if the random search stalls, the remaining captions are taken from the
    enumerated caption space in canonical order.
    """
    if not 1 <= count <= 5:
        raise ConfigError(f"caption count must lie in [1, 5], got {count}")
    space = caption_space(grammar, scene)
    if len(space) < count:
        raise ConfigError(f"only {len(space)} distinct captions exist, {count} requested")
    out: list[tuple[str, ...]] = []
    attempts = 0
    while len(out) < count and attempts < 50 * count:
        attempts += 1
        tpl = rng.choice(grammar.templates)
        words = {}
        for slot, word in ((SUB, scene.subject), (VERB, scene.verb), (OBJ, scene.object)):
            alts = [w for w in grammar.synonym_set(word) if w != word]
            if alts and rng.random() < grammar.synonym_rate:
                word = rng.choice(alts)
            words[slot] = word
        cap = _fill(tpl, words)
        if cap not in out:
            out.append(cap)
    for cap in space:
        if len(out) >= count:
            break
        if cap not in out:
            out.append(cap)
    return out


def make_dataset(
    grammar: Grammar,
    split: CategorySplit,
    per_category: int,
    rng: Rng,
    encoder: ImageEncoder,
    refs_per_sample: int = 5,
    min_per_category: int = 2,
) -> tuple[list[CaptionedSample], list[CaptionedSample]]:
    """Sample ``per_category`` captioned scenes per category and route them by split."""
    if per_category < min_per_category:
        raise ConfigError(f"per_category={per_category} is below the episode minimum {min_per_category}")
    if set(split.meta_train_categories | split.meta_test_categories) != set(grammar.categories):
        raise DataError("category split does not cover the grammar's categories")
    train, test = [], []
    for cat in grammar.categories:
        for _ in range(per_category):
            scene = sample_scene(grammar, cat, rng)
            n_refs = min(refs_per_sample, len(caption_space(grammar, scene)))
            refs = realize_captions(grammar, scene, rng, n_refs)
            feature = np.array(encoder.encode(scene), dtype=np.float64)
            feature.setflags(write=False)
            sample = CaptionedSample(scene, feature, tuple(refs), cat)
            (test if cat in split.meta_test_categories else train).append(sample)
    return train, test


def filter_categories(samples: Iterable[CaptionedSample], categories: Iterable[int]) -> list[CaptionedSample]:
    keep = set(categories)
    return [s for s in samples if s.category_id in keep]


# persistence -----------------------------------------------------------------------

def save_grammar(grammar: Grammar, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grammar.to_json(), sort_keys=True, indent=1) + "\n")


def load_grammar(path: str | Path) -> Grammar:
    return Grammar.from_json(json.loads(Path(path).read_text()))


def save_dataset(samples: Sequence[CaptionedSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[CaptionedSample]:
    with open(path) as fh:
        return [CaptionedSample.from_json(json.loads(line)) for line in fh if line.strip()]
