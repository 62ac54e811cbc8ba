import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotmeta.errors import ContractError, DataError
from cotmeta.metrics import (
    CSV_FIELDS,
    _clipped,
    CaptionEncoder,
    MetricReport,
    ScoredPair,
    bleu,
    build_caption_encoder,
    cider,
    content_coverage,
    evaluate,
    lcs_length,
    read_pairs_jsonl,
    retrieval_ranks,
    retrieval_recall,
    rouge_l,
    write_pairs_jsonl,
    write_reports_csv,
)
from cotmeta.world import OBJ, SUB, VERB, Grammar

from test_world import tiny_grammar


def P(cand, *refs, feature=None):
    return ScoredPair(tuple(cand.split()), tuple(tuple(r.split()) for r in refs), feature)


# brute-force oracles ---------------------------------------------------------------

def grams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def oracle_bleu(pairs, n):
    matches, totals = [0] * n, [0] * n
    c = r = 0
    for p in pairs:
        c += len(p.candidate)
        lens = sorted(len(x) for x in p.references)
        r += min(lens, key=lambda L: (abs(L - len(p.candidate)), L))
        for k in range(1, n + 1):
            cand = grams(p.candidate, k)
            totals[k - 1] += len(cand)
            for g in set(cand):
                ref_max = max(grams(ref, k).count(g) for ref in p.references)
                matches[k - 1] += min(cand.count(g), ref_max)
    if c == 0 or any(m == 0 for m in matches):
        return 0.0
    precision = math.exp(sum(math.log(m / t) for m, t in zip(matches, totals)) / n)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * precision


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def oracle_lcs(a, b):
    for size in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if is_subsequence([a[i] for i in idx], b):
                return size
    return 0


def oracle_rouge(pairs):
    scores = []
    for p in pairs:
        best = 0.0
        for ref in p.references:
            lcs = oracle_lcs(p.candidate, ref)
            if lcs:
                prec, rec = lcs / len(p.candidate), lcs / len(ref)
                best = max(best, 2 * prec * rec / (prec + rec))
        scores.append(best)
    return sum(scores) / len(scores)


def oracle_cider(pairs, max_n=4):
    n_img = len(pairs)
    total = np.zeros(n_img)
    for n in range(1, max_n + 1):
        vocab = sorted({g for p in pairs for seq in (p.candidate, *p.references) for g in grams(seq, n)})
        index = {g: i for i, g in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for p in pairs:
            present = {g for ref in p.references for g in grams(ref, n)}
            for g in present:
                df[index[g]] += 1
        idf = np.log(n_img / np.maximum(df, 1))

        def vec(seq):
            v = np.zeros(len(vocab))
            for g in grams(seq, n):
                v[index[g]] += 1
            return v * idf

        for i, p in enumerate(pairs):
            cv = vec(p.candidate)
            sims = []
            for ref in p.references:
                rv = vec(ref)
                denom = np.linalg.norm(cv) * np.linalg.norm(rv)
                sims.append(float(cv @ rv / denom) if denom else 0.0)
            total[i] += np.mean(sims) / max_n
    return float(10 * total.mean())


def random_corpus(seed):
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(int(rng.integers(3, 31)))]
    pairs = []
    for _ in range(int(rng.integers(2, 21))):
        def sent(lo=1):
            return tuple(vocab[int(i)] for i in rng.integers(0, min(len(vocab), 6), int(rng.integers(lo, 9))))
        refs = tuple(sent() for _ in range(int(rng.integers(1, 6))))
        pairs.append(ScoredPair(sent(0), refs))
    return pairs


@pytest.mark.parametrize("seed", range(100))
def test_scores_match_brute_force(seed):
    pairs = random_corpus(seed)
    for n in range(1, 5):
        assert bleu(pairs, n) == pytest.approx(oracle_bleu(pairs, n), abs=1e-10)
    assert rouge_l(pairs) == pytest.approx(oracle_rouge(pairs), abs=1e-10)
    assert cider(pairs) == pytest.approx(oracle_cider(pairs), abs=1e-10)


def test_random_corpora_exercise_nonzero_scores():
    vals = [bleu(random_corpus(s), 2) for s in range(100)]
    assert sum(v > 0 for v in vals) > 20


# hand examples ---------------------------------------------------------------------

def test_bleu_clipped_case():
    assert bleu([P("the the the the", "the cat")], 1) == 0.25


def test_bleu_identity_and_disjoint():
    p = [P("a b c d e", "a b c d e")]
    assert all(bleu(p, n) == 1.0 for n in range(1, 5))
    assert bleu([P("x y z", "a b c")], 1) == 0.0


def test_bleu_contracts():
    with pytest.raises(ContractError):
        bleu([], 1)
    for n in (0, 5):
        with pytest.raises(ContractError):
            bleu([P("a", "a")], n)


def test_sentence_level_flag():
    pairs = [P("a b", "a b"), P("a c", "a b")]
    assert bleu(pairs, 1, sentence_level=True) == pytest.approx(0.75)
    assert bleu(pairs, 1) == pytest.approx(0.75)
    assert bleu(pairs, 2, sentence_level=True) == pytest.approx(0.5)


def test_rouge_examples():
    assert rouge_l([P("a b c d", "a c d")]) == 6 / 7
    assert rouge_l([P("a b", "a b")]) == 1.0
    assert rouge_l([P("a b", "c d")]) == 0.0
    assert rouge_l([P("", "c d")]) == 0.0
    assert lcs_length("abcbdab", "bdcaba") == 4


def test_cider_identity_case():
    pairs = [P("a b c d", "a b c d"), P("e f g h", "e f g h")]
    assert cider(pairs) == 10.0


def test_cider_examples():
    assert cider([P("x y z", "a b c"), P("q", "d e f")]) == 0.0
    with pytest.raises(ContractError):
        cider([P("a", "a")])
    shared = [P("a b c", "a b c", "a d"), P("a d e", "a e"), P("b", "b c e")]
    assert cider(shared) == pytest.approx(oracle_cider(shared), abs=1e-10)


def test_scores_permutation_invariant():
    pairs = random_corpus(7)
    perm = pairs[::-1]
    for f in (lambda p: bleu(p, 4), rouge_l, cider):
        assert f(pairs) == pytest.approx(f(perm), abs=1e-12)


words = st.sampled_from(["a", "b", "c", "d"])


@settings(max_examples=200, deadline=None)
@given(cand=st.lists(words, max_size=8), ref=st.lists(words, min_size=1, max_size=8), n=st.integers(1, 3),
       pick=st.integers(0, 10))
def test_appending_reference_ngram_never_lowers_clipped_counts(cand, ref, n, pick):
    ref_grams = grams(ref, n)
    if not ref_grams:
        return
    g = ref_grams[pick % len(ref_grams)]

    assert _clipped(cand + list(g), [ref], n)[0] >= _clipped(cand, [ref], n)[0]


# retrieval -------------------------------------------------------------------------

def two_d_encoder():
    return CaptionEncoder({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}, np.eye(2))


def test_retrieval_matched():
    enc = two_d_encoder()
    pairs = [P("a", "a", feature=np.array([1.0, 0.1])), P("b", "b", feature=np.array([0.1, 1.0]))]
    res = retrieval_recall(pairs, enc)
    assert res.mrr == 1.0 and res.recall_at[1] == 1.0
    assert res.warning  # fewer pairs than 10


def test_retrieval_swapped():
    enc = two_d_encoder()
    pairs = [P("b", "a", feature=np.array([1.0, 0.1])), P("a", "b", feature=np.array([0.1, 1.0]))]
    res = retrieval_recall(pairs, enc)
    assert res.mrr == 0.5 and res.recall_at[1] == 0.0 and res.recall_at[5] == 1.0


def test_retrieval_ties_follow_caption_index():
    assert retrieval_ranks(np.ones((3, 3))) == [1, 2, 3]
    enc = two_d_encoder()
    pairs = [P("a", "a", feature=np.array([1.0, 0.0])), P("a", "b", feature=np.array([0.0, 1.0]))]
    res = retrieval_recall(pairs, enc)
    assert res.ranks == [1, 2] and res.mrr == 0.75


def test_retrieval_contracts():
    with pytest.raises(ContractError):
        retrieval_recall([P("a", "a", feature=np.ones(2))], two_d_encoder())
    with pytest.raises(ContractError):
        retrieval_recall([P("a", "a"), P("b", "b")], two_d_encoder())


def test_caption_encoder_aligned_with_images():
    from cotmeta.frozen import build_vision_encoder
    from cotmeta.rng import Rng
    from cotmeta.world import Scene, WorldConfig, build_grammar

    g = build_grammar(WorldConfig(), Rng(0).stream("world"))
    venc = build_vision_encoder(g, Rng(0).stream("vision"), noise_scale=0.0)
    enc = build_caption_encoder(g, venc)
    subject, cat = g.subjects[0]
    obj = next(o for o in g.objects if g.allowed_verbs(cat, o))
    verb = g.allowed_verbs(cat, obj)[0]
    image = venc.encode(Scene(subject, obj, verb, 0))
    caption = enc.encode(["the", subject, verb, "<sep>", obj])
    cos = image @ caption / (np.linalg.norm(image) * np.linalg.norm(caption))
    assert cos == pytest.approx(1.0, abs=1e-12)


# coverage --------------------------------------------------------------------------

def coverage_grammar() -> Grammar:
    return tiny_grammar([["the", SUB, VERB, "the", OBJ]], {"cat": ["cat", "kit"], "kit": ["cat", "kit"]},
                     objects=("mat", "dog"), verbs=("sits", "runs"))


def test_coverage_half():
    cov = content_coverage([P("the cat sits on the mat", "the cat sits by the dog")], coverage_grammar())
    assert cov["exact_noun"] == 50.0
    assert cov["exact_verb"] == 100.0


def test_coverage_identity_and_fuzzy():
    g = coverage_grammar()
    cov = content_coverage([P("the cat runs the mat", "the cat runs the mat")], g)
    assert all(v == 100.0 for v in cov.values())
    cov = content_coverage([P("the kit runs the mat", "the cat runs the mat")], g)
    assert cov["exact_noun"] == 50.0 and cov["fuzzy_noun"] == 100.0


def test_fuzzy_never_below_exact():
    g = coverage_grammar()
    rng = np.random.default_rng(0)
    vocab = ["the", "cat", "kit", "mat", "dog", "sits", "runs"]
    for _ in range(200):
        pairs = [ScoredPair(tuple(rng.choice(vocab, 4)), (tuple(rng.choice(vocab, 5)),)) for _ in range(3)]
        cov = content_coverage(pairs, g)
        for tag in ("noun", "verb"):
            if not math.isnan(cov[f"exact_{tag}"]):
                assert cov[f"fuzzy_{tag}"] >= cov[f"exact_{tag}"]


def test_coverage_skips_pairs_without_content():
    cov = content_coverage([P("the", "the the")], coverage_grammar())
    assert math.isnan(cov["exact_noun"]) and math.isnan(cov["fuzzy_verb"])


# reports and I/O -------------------------------------------------------------------

def test_scored_pair_needs_reference():
    with pytest.raises(ContractError):
        ScoredPair(("a",), ())


def test_report_round_trip_and_csv(tmp_path):
    pairs = [P("a b", "a b", feature=np.array([1.0, 0.0])), P("b", "b a", feature=np.array([0.0, 1.0]))]
    rep = evaluate(pairs, coverage_grammar(), two_d_encoder(), label="x", config_hash="h")
    assert len(rep.bleu) == 4 and 0 <= rep.rouge_l <= 1 and 0 <= rep.cider <= 10
    assert MetricReport.from_json(rep.to_json()) == rep
    write_reports_csv([rep], tmp_path / "r.csv")
    header, row = (tmp_path / "r.csv").read_text().splitlines()
    assert header.split(",") == list(CSV_FIELDS)
    assert row.startswith("x,h,2,")


def test_pairs_jsonl_round_trip(tmp_path):
    pairs = [P("a b", "a b", "a", feature=np.array([0.5, 1.5])), P("c", "d")]
    write_pairs_jsonl(pairs, tmp_path / "p.jsonl")
    back = read_pairs_jsonl(tmp_path / "p.jsonl")
    assert [(b.candidate, b.references) for b in back] == [(p.candidate, p.references) for p in pairs]
    assert np.array_equal(back[0].image_feature, pairs[0].image_feature) and back[1].image_feature is None


@pytest.mark.parametrize("line", ['{"candidate": ["a"]}', "not json", '{"candidate": ["a"], "references": []}'])
def test_malformed_scoring_record(tmp_path, line):
    (tmp_path / "bad.jsonl").write_text(line + "\n")
    with pytest.raises(DataError):
        read_pairs_jsonl(tmp_path / "bad.jsonl")
