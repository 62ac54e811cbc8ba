"""End-to-end pipeline pieces shared by the CLI, the ablation harness and the tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from typing import Sequence

from .adaptor import AdaptorConfig
from .config import ExperimentConfig
from .frozen import LMConfig, TinyLM, Tokenizer, VisionEncoder, build_corpus, build_vision_encoder, init_lm, lm_pretrain
from .metrics import MetricReport, ScoredPair, build_caption_encoder, evaluate
from .rng import Rng
from .subspace import (CaptionObjective, GeneratedCaption, LogRow, MetaState, baseline_train, caption_shapes,
                       init_meta_state, meta_test, meta_train)
from .world import CaptionedSample, CategorySplit, Grammar, build_grammar, make_dataset, make_split, shift_domain

# (subspace, sub_prompt, obj_prompt) rows of the component ablation, all-off first
ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


@dataclass
class World:
    grammar: Grammar
    split: CategorySplit
    encoder: VisionEncoder
    tokenizer: Tokenizer
    train: list[CaptionedSample]
    test: list[CaptionedSample]


def build_world(cfg: ExperimentConfig) -> World:
    root = Rng(cfg.seed)
    grammar = build_grammar(cfg.world, root.stream("world"))
    split = make_split(grammar, cfg.world.n_test_categories, root.stream("split"))
    v = cfg.vision
    enc = build_vision_encoder(grammar, root.stream("vision"), v.d_e, v.d_v, v.noise_scale)
    train, test = make_dataset(grammar, split, cfg.world.per_category, root.stream("data"), enc,
                               refs_per_sample=cfg.world.refs_per_sample,
                               min_per_category=cfg.meta.k_shot + cfg.meta.query_size)
    return World(grammar, split, enc, Tokenizer.from_grammar(grammar), train, test)


def cross_domain_world(cfg: ExperimentConfig, world: World) -> World:
    """Test world over the same vocabulary and categories with a reshuffled grammar."""
    root = Rng(cfg.seed).stream(f"cross_domain/{cfg.test.cross_domain_seed}")
    shifted = shift_domain(world.grammar, root.stream("grammar"), max_verbs_per_pair=cfg.world.max_verbs_per_pair)
    _, test = make_dataset(shifted, world.split, cfg.world.per_category, root.stream("data"), world.encoder,
                           refs_per_sample=cfg.world.refs_per_sample)
    return World(shifted, world.split, world.encoder, world.tokenizer, [], test)


def lm_config(cfg: ExperimentConfig, vocab_size: int) -> LMConfig:
    s = cfg.lm
    return LMConfig(vocab_size, s.d_model, s.n_layers, s.n_heads, s.d_ff, s.t_max)


def pretrain(cfg: ExperimentConfig, world: World) -> TinyLM:
    root = Rng(cfg.seed)
    corpus = build_corpus(world.grammar, cfg.world.corpus_scenes, root.stream("corpus"))
    ids = [world.tokenizer.encode(s) for s in corpus]
    lm = init_lm(lm_config(cfg, len(world.tokenizer)), root.stream("lm_init"))
    return lm_pretrain(lm, ids, cfg.lm.epochs, cfg.lm.lr, root.stream("pretrain"), batch_size=cfg.lm.batch_size,
                       weight_decay=cfg.lm.weight_decay, max_position_offset=cfg.lm.max_position_offset)


def objective(cfg: ExperimentConfig, world: World, lm: TinyLM) -> CaptionObjective:
    return CaptionObjective(lm, world.tokenizer, cfg.adaptor)


def shapes(cfg: ExperimentConfig):
    return caption_shapes(cfg.adaptor, cfg.vision.d_v, cfg.lm.d_model)


def run_meta(cfg: ExperimentConfig, world: World, lm: TinyLM, workers: int = 1,
             on_checkpoint=None) -> tuple[MetaState, list[LogRow]]:
    root = Rng(cfg.seed)
    state = init_meta_state(shapes(cfg), cfg.meta, root.stream("meta_init"), cfg.to_json())
    return meta_train(state, world.train, cfg.meta.iterations, objective(cfg, world, lm), root.stream("episodes"),
                      workers, on_checkpoint)


def run_baseline(cfg: ExperimentConfig, world: World, lm: TinyLM) -> tuple[MetaState, list[LogRow]]:
    root = Rng(cfg.seed)
    iters = cfg.baseline.iterations if cfg.baseline.iterations is not None else cfg.meta.iterations
    return baseline_train(world.train, iters, objective(cfg, world, lm), shapes(cfg), cfg.meta,
                          root.stream("baseline"), cfg.baseline.batch_size, cfg.to_json())


def scored_pairs(captions: Sequence[GeneratedCaption]) -> list[ScoredPair]:
    return [ScoredPair(tuple(c.caption), c.sample.references, c.sample.image_feature, c.sample.scene, i)
            for i, c in enumerate(captions)]


def run_test(cfg: ExperimentConfig, state: MetaState, world: World, lm: TinyLM, label: str = "",
             adapt: bool = True) -> tuple[MetricReport, list[GeneratedCaption]]:
    """Few-shot evaluation on ``world.test``; ``adapt=False`` skips support adaptation."""
    t = cfg.test
    alpha = (t.alpha if t.alpha is not None else cfg.meta.alpha) if adapt else 0.0
    steps = t.inner_steps if t.inner_steps is not None else cfg.meta.inner_steps
    caps = meta_test(state, world.test, t.episodes, alpha, steps, objective(cfg, world, lm),
                     Rng(cfg.seed).stream("test"), t.n_way, t.k_shot, t.query)
    report = evaluate(scored_pairs(caps), world.grammar, build_caption_encoder(world.grammar, world.encoder),
                      label, cfg.hash())
    return report, caps


def ablation_config(cfg: ExperimentConfig, subspace: bool, sub: bool, obj: bool) -> ExperimentConfig:
    return dataclasses.replace(cfg, adaptor=replace(cfg.adaptor, sub_prompt=sub, obj_prompt=obj),
                               meta=replace(cfg.meta, subspace=subspace))


def ablation_label(subspace: bool, sub: bool, obj: bool) -> str:
    mark = {True: "+", False: "-"}
    return f"subspace{mark[subspace]} sub{mark[sub]} obj{mark[obj]}"


def ablate(cfg: ExperimentConfig, world: World, lm: TinyLM, test_world: World | None = None,
           rows: Sequence[tuple[bool, bool, bool]] = ABLATION_ROWS, workers: int = 1) -> list[MetricReport]:
    """One meta-train plus meta-test per toggle row."""
    reports = []
    for row in rows:
        c = ablation_config(cfg, *row)
        state, _ = run_meta(c, world, lm, workers)
        rep, _ = run_test(c, state, test_world or world, lm, ablation_label(*row))
        reports.append(rep)
    return reports
