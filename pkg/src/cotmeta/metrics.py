"""Caption evaluation: BLEU, ROUGE-L, CIDEr, retrieval recall and content coverage."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError, UnknownWordError
from .frozen import SPECIALS, VisionEncoder
from .world import Grammar, Scene

Tokens = Sequence[str]


@dataclass(frozen=True)
class ScoredPair:
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]
    image_feature: np.ndarray | None = None
    scene: Scene | None = None
    image_id: str | int | None = None

    def __post_init__(self):
        if not self.references:
            raise ContractError("a scored pair needs at least one reference")
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# BLEU ------------------------------------------------------------------------------

def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def _clipped(cand: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    counts = ngrams(cand, n)
    max_ref: Counter = Counter()
    for r in refs:
        for g, c in ngrams(r, n).items():
            max_ref[g] = max(max_ref[g], c)
    return sum(min(c, max_ref[g]) for g, c in counts.items()), max(len(cand) - n + 1, 0)


def _bleu_from(stats: Sequence[tuple[int, int]], cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for match, total in stats:
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total)
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p / len(stats))


def bleu(pairs: Sequence[ScoredPair], n: int = 4, sentence_level: bool = False) -> float:
    """Corpus BLEU@n with uniform weights, closest-reference brevity penalty and no smoothing.

    ``sentence_level`` averages per-pair BLEU instead of pooling counts.
    """
    if not 1 <= n <= 4:
        raise ContractError(f"BLEU order must be in 1..4, got {n}")
    if not pairs:
        raise ContractError("BLEU of an empty corpus")
    if sentence_level:
        return float(np.mean([bleu([p], n) for p in pairs]))
    match = [0] * n
    total = [0] * n
    c = r = 0
    for p in pairs:
        c += len(p.candidate)
        r += _closest_ref_len(len(p.candidate), p.references)
        for k in range(n):
            m, t = _clipped(p.candidate, p.references, k + 1)
            match[k] += m
            total[k] += t
    return _bleu_from(list(zip(match, total)), c, r)


# ROUGE-L ---------------------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_pair(cand: Tokens, ref: Tokens) -> float:
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(pairs: Sequence[ScoredPair]) -> float:
    """Mean over pairs of the best LCS F1 against any reference."""
    if not pairs:
        raise ContractError("ROUGE-L of an empty corpus")
    return float(np.mean([max(_rouge_pair(p.candidate, r) for r in p.references) for p in pairs]))


# CIDEr -----------------------------------------------------------------------------

def _tfidf(counts: Counter, df: Mapping[tuple, int], n_images: int) -> dict[tuple, float]:
    return {g: c * math.log(n_images / max(df.get(g, 0), 1)) for g, c in counts.items()}


def _cosine(a: Mapping[tuple, float], b: Mapping[tuple, float]) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(pairs: Sequence[ScoredPair], max_n: int = 4) -> float:
    """Plain CIDEr (x10) with document frequencies from the reference corpus.

    Each pair is one image. N-grams absent from every reference get a document
    frequency of 1 for the logarithm.
    """
    if len(pairs) < 2:
        raise ContractError("CIDEr needs a corpus of at least two images")
    n_images = len(pairs)
    scores = np.zeros(len(pairs))
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for p in pairs:
            df.update(set(g for r in p.references for g in ngrams(r, n)))
        for i, p in enumerate(pairs):
            cv = _tfidf(ngrams(p.candidate, n), df, n_images)
            sims = [_cosine(cv, _tfidf(ngrams(r, n), df, n_images)) for r in p.references]
            scores[i] += np.mean(sims) / max_n
    return float(10.0 * scores.mean())


# retrieval -------------------------------------------------------------------------

@dataclass
class CaptionEncoder:
    """Bag-of-words caption embedding in image-feature space.

    Word vectors are the vision encoder's seeded subject/object/verb tables placed in
    their slot of the concatenated feature; synonyms share their head word's vector,
    function words and special tokens map to zero. The averaged vector goes through
    the vision projection, so a correct caption points the same way as the noise-free
    image.
    """

    table: dict[str, np.ndarray]
    projection: np.ndarray

    def encode(self, tokens: Tokens) -> np.ndarray:
        if not tokens:
            return np.zeros(self.projection.shape[1])
        try:
            vecs = [self.table[w] for w in tokens]
        except KeyError as exc:
            raise UnknownWordError(f"caption word {exc.args[0]!r} is unknown to the caption encoder") from None
        return np.mean(vecs, axis=0) @ self.projection


def build_caption_encoder(grammar: Grammar, enc: VisionEncoder) -> CaptionEncoder:
    d_e = enc.projection.shape[0] // 3
    table = {w: np.zeros(3 * d_e) for w in list(SPECIALS) + grammar.vocabulary()}
    for offset, words in enumerate((enc.subject_table, enc.object_table, enc.verb_table)):
        for w, v in words.items():
            vec = np.zeros(3 * d_e)
            vec[offset * d_e : (offset + 1) * d_e] = v
            for alias in grammar.synonym_set(w):
                table[alias] = vec
    return CaptionEncoder(table, np.array(enc.projection))


@dataclass
class RetrievalResult:
    mrr: float
    recall_at: dict[int, float]
    ranks: list[int]
    warning: bool


def retrieval_ranks(scores: np.ndarray) -> list[int]:
    """Rank of caption ``i`` for image ``i`` in row ``i`` of ``scores`` (ties by caption index)."""
    ranks = []
    for i, row in enumerate(scores):
        own = row[i]
        better = int(np.sum(row > own)) + int(np.sum(row[:i] == own))
        ranks.append(better + 1)
    return ranks


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def retrieval_recall(pairs: Sequence[ScoredPair], encoder: CaptionEncoder, ks: Sequence[int] = (1, 5, 10)) -> RetrievalResult:
    """MRR and recall@k of each image's own generated caption among all generated captions."""
    if len(pairs) < 2:
        raise ContractError("retrieval needs at least two pairs")
    if any(p.image_feature is None for p in pairs):
        raise ContractError("retrieval needs an image feature for every pair")
    caps = [encoder.encode(p.candidate) for p in pairs]
    scores = np.array([[_cos(p.image_feature, c) for c in caps] for p in pairs])
    ranks = retrieval_ranks(scores)
    recall = {k: float(np.mean([r <= k for r in ranks])) for k in ks}
    return RetrievalResult(float(np.mean([1.0 / r for r in ranks])), recall, ranks, len(pairs) < max(ks))


# coverage --------------------------------------------------------------------------

def content_coverage(pairs: Sequence[ScoredPair], grammar: Grammar) -> dict[str, float]:
    """Percent of reference nouns and verbs recovered by each candidate, exact and up to synonyms.

    Pairs whose references carry no word of a part of speech are skipped for it; a
    part of speech with no scored pair reports ``nan``.
    """
    out = {}
    for tag, pos in (("noun", "noun"), ("verb", "verb")):
        exact, fuzzy = [], []
        for p in pairs:
            ref = {w for r in p.references for w in r if grammar.pos.get(w) == pos}
            if not ref:
                continue
            gen = {w for w in p.candidate if grammar.pos.get(w) == pos}
            exact.append(len(ref & gen) / len(ref))
            fuzzy.append(sum(1 for w in ref if gen & set(grammar.synonym_set(w))) / len(ref))
        out[f"exact_{tag}"] = 100.0 * float(np.mean(exact)) if exact else float("nan")
        out[f"fuzzy_{tag}"] = 100.0 * float(np.mean(fuzzy)) if fuzzy else float("nan")
    return out


# report ----------------------------------------------------------------------------

CSV_FIELDS = ("label", "config_hash", "n_pairs", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "mrr",
              "r1", "r5", "r10", "exact_noun", "exact_verb", "fuzzy_noun", "fuzzy_verb", "retrieval_warning")


@dataclass
class MetricReport:
    bleu: list[float]
    rouge_l: float
    cider: float
    mrr: float | None
    recall_at: dict[int, float] | None
    exact_noun: float
    exact_verb: float
    fuzzy_noun: float
    fuzzy_verb: float
    n_pairs: int
    retrieval_warning: bool = False
    label: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        if self.recall_at is not None:
            d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        d = dict(d)
        if d.get("recall_at") is not None:
            d["recall_at"] = {int(k): v for k, v in d["recall_at"].items()}
        return cls(**d)

    def csv_row(self) -> list:
        r = self.recall_at or {}
        return [self.label, self.config_hash, self.n_pairs, *self.bleu, self.rouge_l, self.cider, self.mrr,
                r.get(1), r.get(5), r.get(10), self.exact_noun, self.exact_verb, self.fuzzy_noun, self.fuzzy_verb,
                int(self.retrieval_warning)]


def evaluate(pairs: Sequence[ScoredPair], grammar: Grammar | None = None, encoder: CaptionEncoder | None = None,
             label: str = "", config_hash: str = "") -> MetricReport:
    """Full battery; retrieval needs ``encoder`` and features, coverage needs ``grammar``."""
    if not pairs:
        raise ContractError("nothing to score")
    b = [bleu(pairs, n) for n in range(1, 5)]
    c = cider(pairs) if len(pairs) >= 2 else float("nan")
    mrr = recall = None
    warn = False
    if encoder is not None and len(pairs) >= 2 and all(p.image_feature is not None for p in pairs):
        rr = retrieval_recall(pairs, encoder)
        mrr, recall, warn = rr.mrr, rr.recall_at, rr.warning
    cov = content_coverage(pairs, grammar) if grammar is not None else dict.fromkeys(
        ("exact_noun", "exact_verb", "fuzzy_noun", "fuzzy_verb"), float("nan"))
    return MetricReport(b, rouge_l(pairs), c, mrr, recall, cov["exact_noun"], cov["exact_verb"], cov["fuzzy_noun"],
                        cov["fuzzy_verb"], len(pairs), warn, label, config_hash)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports_csv(reports: Iterable[MetricReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CSV_FIELDS) + "\n")
        for rep in reports:
            fh.write(",".join(_fmt(v) for v in rep.csv_row()) + "\n")


# scoring input ---------------------------------------------------------------------

def read_pairs_jsonl(path: str | Path) -> list[ScoredPair]:
    """Pairs from ``{image_id, candidate, references[, feature]}`` lines."""
    pairs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            feat = np.array(d["feature"], dtype=np.float64) if d.get("feature") is not None else None
            pairs.append(ScoredPair(tuple(d["candidate"]), tuple(tuple(r) for r in d["references"]), feat,
                                    None, d.get("image_id", n - 1)))
        except (KeyError, TypeError, json.JSONDecodeError, ContractError) as exc:
            raise DataError(f"{path}:{n}: malformed scoring record ({exc})") from None
    return pairs


def write_pairs_jsonl(pairs: Sequence[ScoredPair], path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(pairs):
            rec = {"image_id": p.image_id if p.image_id is not None else i, "candidate": list(p.candidate),
                   "references": [list(r) for r in p.references]}
            if p.image_feature is not None:
                rec["feature"] = [float(x) for x in p.image_feature]
            fh.write(json.dumps(rec) + "\n")
