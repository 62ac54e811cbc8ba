import math

import numpy as np
import pytest

from cotmeta.adaptor import (
    AdaptorConfig,
    AdaptorStep,
    CoTTargets,
    PromptChain,
    adaptor_forward,
    build_step_context,
    cot_generate,
    cot_loss,
    slot_shapes,
)
from cotmeta.errors import ContractError, DimensionError
from cotmeta.frozen import BOS_ID, EOS_ID, SEP_ID, LMConfig, init_lm, lm_forward
from cotmeta.numerics import Tensor, backward, grad, token_nll
from cotmeta.rng import Rng
from cotmeta.world import CaptionedSample, Scene

from gradcheck import RTOL, directional_fd, rel_err

D_V, D_M, V = 6, 8, 10


def random_step(rng, c, cfg=AdaptorConfig(), d_v=D_V, d_m=D_M, scale=0.5):
    shapes = slot_shapes("cap", AdaptorConfig(prompt_lengths=(1, 1, c), projections=cfg.projections), d_v, d_m)
    slots = {k: Tensor(scale * rng.normal(s)) for k, s in shapes.items()}
    return AdaptorStep.from_slots(slots)


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_forward(step, feature, cfg):
    """Plain numpy attention block: prompts + projected image row, first c rows kept."""
    P = step.prompt_tokens.data
    c, d = P.shape
    z = np.vstack([P, feature @ step.in_proj.data])
    if cfg.projections:
        q, k, v = z @ step.q.data, z @ step.k.data, z @ step.v.data
    else:
        q = k = v = z
    h = cfg.heads
    dh = d // h
    outs = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:c, sl] @ k[:, sl].T
        if cfg.scaled:
            s = s / math.sqrt(dh)
        outs.append(np_softmax(s) @ v[:, sl])
    return np.hstack(outs) @ step.out_proj.data


@pytest.mark.parametrize("c", [1, 4])
def test_output_shape(c):
    step = random_step(Rng(c), c)
    assert adaptor_forward(step, Rng(9).normal(D_V)).shape == (c, D_M)


def test_identical_rows_give_out_proj_of_that_row():
    rng = Rng(1)
    row = rng.normal(D_M)
    feature = np.zeros(D_V)
    feature[0] = 1.0
    in_proj = np.zeros((D_V, D_M))
    in_proj[0] = row
    out_proj = rng.normal((D_M, D_M))
    step = AdaptorStep(Tensor(np.tile(row, (3, 1))), Tensor(in_proj), Tensor(out_proj))
    out = adaptor_forward(step, feature).data
    assert np.allclose(out, np.tile(row @ out_proj, (3, 1)), atol=1e-12)


def test_two_row_hand_case():
    # Z = [[1, 0], [0, 1]]: prompt row [1, 0], image row [0, 1]
    step = AdaptorStep(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), Tensor(np.eye(2)))
    out = adaptor_forward(step, np.array([1.0])).data
    e = math.e
    assert np.allclose(out, [[e / (e + 1), 1 / (e + 1)]], atol=1e-15)


@pytest.mark.parametrize("projections,scaled,heads", [(False, False, 1), (True, False, 1), (True, True, 2),
                                                      (False, True, 4)])
def test_forward_matches_numpy_oracle(projections, scaled, heads):
    cfg = AdaptorConfig(projections=projections, scaled=scaled, heads=heads)
    rng = Rng(11)
    step = random_step(rng, 4, cfg)
    f = rng.normal(D_V)
    assert np.allclose(adaptor_forward(step, f, cfg).data, oracle_forward(step, f, cfg), atol=1e-12)


def test_attention_weights_are_a_distribution():
    # with out_proj = I and V = Z, every output row is a convex combination of Z's rows;
    # summing against a constant column recovers the softmax row sums
    rng = Rng(2)
    P = rng.normal((4, D_M))
    P[:, 0] = 1.0
    in_proj = rng.normal((D_V, D_M))
    f = rng.normal(D_V)
    in_proj[:, 0] = f / (f @ f)  # projected image row also has first coordinate 1
    step = AdaptorStep(Tensor(P), Tensor(in_proj), Tensor(np.eye(D_M)))
    out = adaptor_forward(step, f).data
    assert np.allclose(out[:, 0], 1.0, atol=1e-12)


def test_dimension_mismatch():
    step = random_step(Rng(0), 1)
    with pytest.raises(DimensionError):
        adaptor_forward(step, np.ones(D_V + 1))


@pytest.mark.parametrize("seed", range(20))
def test_attention_block_gradients_match_fd(seed):
    cfg = AdaptorConfig(projections=seed % 2 == 1)
    rng = Rng(200 + seed)
    shapes = slot_shapes("cap", AdaptorConfig(projections=cfg.projections), D_V, D_M)
    x0 = {k: 0.5 * rng.normal(s) for k, s in shapes.items()}
    f = rng.normal(D_V)
    w = rng.normal((4, D_M))
    names = list(x0)

    def value(xs):
        step = AdaptorStep.from_slots({n: Tensor(x) for n, x in zip(names, xs)})
        return float(np.sum(adaptor_forward(step, f, cfg).data * w))

    leaves = {n: Tensor(x0[n], requires_grad=True) for n in names}
    out = (adaptor_forward(AdaptorStep.from_slots(leaves), f, cfg) * Tensor(w)).sum()
    grads = grad(out, [leaves[n] for n in names])
    dirs = [rng.normal(x0[n].shape) for n in names]
    analytic = sum(float(np.sum(g.data * d)) for g, d in zip(grads, dirs))
    assert rel_err(analytic, directional_fd(value, [x0[n] for n in names], dirs)) < RTOL


# contexts -----------------------------------------------------------------------

def chain_of(lengths=(1, 1, 4)):
    return PromptChain([Tensor(np.full((c, D_M), float(i))) for i, c in enumerate(lengths)])


TARGETS = CoTTargets([5], [6], [7, 8, EOS_ID])


def test_step_one_context():
    prompts, prefix = build_step_context(chain_of(), 1, TARGETS)
    assert len(prompts) == 1
    assert prefix == [BOS_ID]


def test_step_two_and_three_contexts():
    prompts, prefix = build_step_context(chain_of(), 2, TARGETS)
    assert len(prompts) == 2 and prefix == [BOS_ID, 5, SEP_ID]
    prompts, prefix = build_step_context(chain_of(), 3, TARGETS)
    assert len(prompts) == 1 + 1 + 4
    assert prefix == [BOS_ID, 5, SEP_ID, 6, SEP_ID]


def test_train_and_infer_contexts_agree_on_ground_truth():
    chain = chain_of()
    for k in (1, 2, 3):
        tp, tpre = build_step_context(chain, k, TARGETS, "train")
        ip, ipre = build_step_context(chain, k, None, "infer", {"sub": [5], "obj": [6]})
        assert tpre == ipre
        assert all(np.array_equal(a.data, b.data) for a, b in zip(tp, ip))


def test_infer_without_decoded_output_is_contract_error():
    with pytest.raises(ContractError):
        build_step_context(chain_of(), 3, None, "infer", {"sub": [5]})


def test_chain_too_short():
    with pytest.raises(ContractError):
        build_step_context(chain_of((1,)), 2, TARGETS)


def test_ablated_plan_skips_segments():
    cfg = AdaptorConfig(sub_prompt=False)
    chain = chain_of((1, 4))
    prompts, prefix = build_step_context(chain, 2, TARGETS, cfg=cfg)
    assert len(prompts) == 5 and prefix == [BOS_ID, 6, SEP_ID]


def test_targets_validation():
    with pytest.raises(ContractError):
        CoTTargets([], [6], [EOS_ID])
    with pytest.raises(ContractError):
        CoTTargets([5], [6], [7])


# loss ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_lm():
    return init_lm(LMConfig(V, D_M, 1, 2, 16, 24), Rng(5)).freeze()


def sample(feature):
    return CaptionedSample(Scene("s", "o", "v", 0), feature, (("a",),), 0)


def random_steps(rng, cfg=AdaptorConfig(), scale=0.5):
    out = {}
    for kind in cfg.plan():
        shapes = slot_shapes(kind, cfg, D_V, D_M)
        out[kind] = {k: scale * rng.normal(s) for k, s in shapes.items()}
    return out


def as_steps(arrays, requires_grad=False):
    leaves = {k: {s: Tensor(v, requires_grad=requires_grad) for s, v in d.items()} for k, d in arrays.items()}
    return leaves, {k: AdaptorStep.from_slots(d) for k, d in leaves.items()}


def manual_chain_loss(steps, lm, feature, targets, cfg=AdaptorConfig()):
    """Per-step context assembly and cross-entropy, one sequence at a time."""
    chain = PromptChain([adaptor_forward(steps[k], feature, cfg) for k in cfg.plan()])
    total = 0.0
    for j, kind in enumerate(cfg.plan()):
        prompts, prefix = build_step_context(chain, j + 1, targets, "train", cfg=cfg)
        target = targets.for_kind(kind)
        logits = lm_forward(lm, prompts, prefix + target[:-1]).data
        rows = logits[len(prefix) - 1:]
        lse = np.log(np.exp(rows - rows.max(1, keepdims=True)).sum(1)) + rows.max(1)
        total += float(np.mean(lse - rows[np.arange(len(target)), target]))
    return total


def test_cot_loss_matches_per_step_assembly(tiny_lm):
    rng = Rng(8)
    _, steps = as_steps(random_steps(rng))
    f = rng.normal(D_V)
    loss = cot_loss(steps, tiny_lm, sample(f), TARGETS).item()
    assert loss >= 0
    assert loss == pytest.approx(manual_chain_loss(steps, tiny_lm, f, TARGETS), rel=1e-12)


def test_untrained_loss_near_uniform_prediction():
    # default architecture, random-init LM and Xavier-init adaptors
    from cotmeta import experiments as ex
    from cotmeta.config import ExperimentConfig
    from cotmeta.subspace import CaptionObjective, init_meta_state

    cfg = ExperimentConfig()
    world = ex.build_world(cfg)
    lm = init_lm(ex.lm_config(cfg, len(world.tokenizer)), Rng(0)).freeze()
    state = init_meta_state(ex.shapes(cfg), cfg.meta, Rng(1))
    params = [{k: {n: Tensor(v) for n, v in d.items()} for k, d in state.materialize().items()}]
    batch = [(s, 0) for s in world.train[:50]]
    mean = CaptionObjective(lm, world.tokenizer, cfg.adaptor).episode_losses(params, [batch])[0].item() / 50
    uniform = 3 * math.log(len(world.tokenizer))
    assert abs(mean - uniform) / uniform < 0.2


def test_cot_loss_requires_frozen_lm():
    lm = init_lm(LMConfig(V, D_M, 1, 2, 16, 24), Rng(5))
    _, steps = as_steps(random_steps(Rng(0)))
    with pytest.raises(ContractError):
        cot_loss(steps, lm, sample(np.ones(D_V)), TARGETS)


@pytest.mark.parametrize("seed", range(20))
def test_cot_loss_gradients_match_fd(tiny_lm, seed):
    cfg = AdaptorConfig(projections=seed % 4 == 3, condition_on_text=seed % 5 != 4)
    rng = Rng(300 + seed)
    x0 = random_steps(rng, cfg)
    f = rng.normal(D_V)
    s = sample(f)
    keys = [(k, n) for k in x0 for n in x0[k]]

    def value(xs):
        arr = {k: {} for k in x0}
        for (k, n), x in zip(keys, xs):
            arr[k][n] = x
        return cot_loss(as_steps(arr)[1], tiny_lm, s, TARGETS, cfg).item()

    leaves, steps = as_steps(x0, requires_grad=True)
    loss = cot_loss(steps, tiny_lm, s, TARGETS, cfg)
    grads = backward(loss)
    flat = [leaves[k][n] for k, n in keys]
    assert set(grads) == set(flat)  # nothing reaches the language model
    dirs = [rng.normal(x0[k][n].shape) for k, n in keys]
    analytic = sum(float(np.sum(grads[l].data * d)) for l, d in zip(flat, dirs))
    assert rel_err(analytic, directional_fd(value, [x0[k][n] for k, n in keys], dirs)) < RTOL


def test_prompt_locality():
    rng = Rng(4)
    arrays = random_steps(rng)
    f = rng.normal(D_V)
    _, steps = as_steps(arrays)
    before = adaptor_forward(steps["obj"], f).data.tobytes()
    perturbed = {k: dict(v) for k, v in arrays.items()}
    for kind in ("sub", "cap"):
        perturbed[kind] = {n: np.asarray(rng.permutation(x.size), dtype=float).reshape(x.shape) for n, x in arrays[kind].items()}
    _, steps2 = as_steps(perturbed)
    assert adaptor_forward(steps2["obj"], f).data.tobytes() == before


def test_teacher_forcing_consistency(tiny_lm):
    rng = Rng(6)
    _, steps = as_steps(random_steps(rng))
    f = rng.normal(D_V)
    chain = PromptChain([adaptor_forward(steps[k], f) for k in ("sub", "obj", "cap")])
    target = TARGETS.caption_tokens
    losses = []
    for mode, decoded in (("train", None), ("infer", {"sub": [5], "obj": [6]})):
        prompts, prefix = build_step_context(chain, 3, TARGETS if mode == "train" else None, mode, decoded)
        logits = lm_forward(tiny_lm, prompts, prefix + target[:-1])
        losses.append(token_nll(logits[len(prefix) - 1:], np.array(target)).data.tobytes())
    assert losses[0] == losses[1]


def test_generation_deterministic(tiny_lm):
    rng = Rng(7)
    _, steps = as_steps(random_steps(rng))
    f = rng.normal(D_V)
    cfg = AdaptorConfig(max_caption_len=6)
    assert cot_generate(steps, tiny_lm, f, cfg) == cot_generate(steps, tiny_lm, f, cfg)
