"""Command-line interface: ``cotmeta <command> --config cfg.json [--seed n] [--workers n] [--out dir]``.

Every command reads upstream artifacts from ``--out`` (checked against the
manifest), writes its own artifacts there and records them in ``manifest.json``.

Exit codes: 0 success, 2 configuration or data error, 3 missing or stale
upstream artifact, 4 numeric failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig, load_config
from .errors import ConfigError, CotMetaError, DataError, DependencyError, NumericError, StaleArtifactError
from .frozen import load_encoder, load_lm, save_encoder, save_json, save_lm
from .metrics import build_caption_encoder, evaluate, read_pairs_jsonl, write_pairs_jsonl, write_reports_csv
from .subspace import load_state, save_state, write_log
from .world import CategorySplit, load_dataset, load_grammar, save_dataset, save_grammar

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4

# config sections each stage depends on; a stage is stale when its upstream's sections changed
STAGE_SECTIONS = {
    "world": ("seed", "world", "vision"),
    "lm": ("seed", "world", "vision", "lm"),
    "meta": ("seed", "world", "vision", "lm", "adaptor", "meta"),
    "baseline": ("seed", "world", "vision", "lm", "adaptor", "meta", "baseline"),
}


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    d = cfg.to_json()
    blob = json.dumps({k: d[k] for k in STAGE_SECTIONS[stage]}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    """``manifest.json``: artifact name -> {path, sha256, stage, stage_hash, written_at}."""

    def __init__(self, out: Path):
        self.out = out
        self.path = out / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"artifacts": {}}

    def record(self, name: str, rel: str, stage: str, cfg: ExperimentConfig) -> None:
        p = self.out / rel
        self.data["artifacts"][name] = {"path": rel, "sha256": sha256_file(p), "stage": stage,
                                        "stage_hash": stage_hash(cfg, stage), "written_at": time.time()}
        self.data["config_hash"] = cfg.hash()
        self.path.write_text(json.dumps(self.data, sort_keys=True, indent=1) + "\n")

    def require(self, name: str, cfg: ExperimentConfig) -> Path:
        entry = self.data["artifacts"].get(name)
        if entry is None:
            raise DependencyError(f"artifact {name!r} is missing from {self.path}; run the upstream command first")
        p = self.out / entry["path"]
        if not p.exists():
            raise DependencyError(f"artifact {name!r} ({p}) does not exist")
        if sha256_file(p) != entry["sha256"]:
            raise StaleArtifactError(f"artifact {name!r} ({p}) changed since it was recorded")
        if entry["stage_hash"] != stage_hash(cfg, entry["stage"]):
            raise StaleArtifactError(f"artifact {name!r} was produced under a different {entry['stage']} configuration")
        return p


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_world(m: Manifest, cfg: ExperimentConfig) -> ex.World:
    from .frozen import Tokenizer

    grammar = load_grammar(m.require("grammar", cfg))
    split = CategorySplit.from_json(json.loads(m.require("split", cfg).read_text()))
    enc = load_encoder(m.require("vision_encoder", cfg))
    train = load_dataset(m.require("train", cfg))
    test = load_dataset(m.require("test", cfg))
    return ex.World(grammar, split, enc, Tokenizer.from_grammar(grammar), train, test)


def _write_report(m: Manifest, cfg: ExperimentConfig, reports, stem: str, stage: str) -> None:
    save_json({"reports": [r.to_json() for r in reports]}, m.out / f"{stem}.json")
    write_reports_csv(reports, m.out / f"{stem}.csv")
    m.record(f"{stem}_json", f"{stem}.json", stage, cfg)
    m.record(f"{stem}_csv", f"{stem}.csv", stage, cfg)


def _test_world(args, cfg: ExperimentConfig, world: ex.World, m: Manifest) -> ex.World:
    if not getattr(args, "cross_domain", False):
        return world
    cross = ex.cross_domain_world(cfg, world)
    save_grammar(cross.grammar, m.out / "cross_grammar.json")
    save_dataset(cross.test, m.out / "cross_test.jsonl")
    m.record("cross_grammar", "cross_grammar.json", "world", cfg)
    m.record("cross_test", "cross_test.jsonl", "world", cfg)
    return cross


# commands --------------------------------------------------------------------------

def cmd_gen_world(args, cfg: ExperimentConfig, m: Manifest) -> None:
    world = ex.build_world(cfg)
    save_grammar(world.grammar, m.out / "grammar.json")
    save_json(world.split.to_json(), m.out / "split.json")
    save_encoder(world.encoder, m.out / "vision_encoder.json")
    save_dataset(world.train, m.out / "train.jsonl")
    save_dataset(world.test, m.out / "test.jsonl")
    (m.out / "config.json").write_text(cfg.dumps() + "\n")
    for name, rel in (("grammar", "grammar.json"), ("split", "split.json"), ("vision_encoder", "vision_encoder.json"),
                      ("train", "train.jsonl"), ("test", "test.jsonl"), ("config", "config.json")):
        m.record(name, rel, "world", cfg)
    print(f"world: {len(world.train)} train / {len(world.test)} test samples, "
          f"{len(world.tokenizer)} tokens -> {m.out}")


def cmd_pretrain_lm(args, cfg: ExperimentConfig, m: Manifest) -> None:
    world = _load_world(m, cfg)
    lm = ex.pretrain(cfg, world)
    save_lm(lm, m.out / "lm.json")
    m.record("lm", "lm.json", "lm", cfg)
    print(f"lm: held-out CE {lm.stats.get('heldout_ce', float('nan')):.4f} "
          f"(unigram {lm.stats.get('unigram_ce', float('nan')):.4f})")


def cmd_meta_train(args, cfg: ExperimentConfig, m: Manifest) -> None:
    world = _load_world(m, cfg)
    lm = load_lm(m.require("lm", cfg))
    ckpt_dir = m.out / "checkpoints"

    def on_checkpoint(state):
        ckpt_dir.mkdir(exist_ok=True)
        rel = f"checkpoints/meta_state_{state.iteration:06d}.json"
        save_state(state, m.out / rel)
        m.record(f"meta_state_{state.iteration:06d}", rel, "meta", cfg)

    state, log = ex.run_meta(cfg, world, lm, args.workers, on_checkpoint)
    save_state(state, m.out / "meta_state.json")
    write_log(log, m.out / "meta_log.csv")
    m.record("meta_state", "meta_state.json", "meta", cfg)
    m.record("meta_log", "meta_log.csv", "meta", cfg)
    if log:
        print(f"meta-train: {len(log)} iterations, query loss {log[0].mean_query_loss:.4f} -> "
              f"{log[-1].mean_query_loss:.4f}")


def _report_line(rep) -> str:
    return (f"{rep.label or 'report'}: BLEU@1-4 " + " ".join(f"{b:.4f}" for b in rep.bleu)
            + f"  ROUGE-L {rep.rouge_l:.4f}  CIDEr {rep.cider:.4f}")


def cmd_meta_test(args, cfg: ExperimentConfig, m: Manifest) -> None:
    world = _load_world(m, cfg)
    lm = load_lm(m.require("lm", cfg))
    state = load_state(m.require("meta_state", cfg))
    if args.split == "train":
        world = replace(world, test=world.train)
    test_world = _test_world(args, cfg, world, m)
    stem = "meta_test_cross" if args.cross_domain else "meta_test"
    rep, caps = ex.run_test(cfg, state, test_world, lm, "cross-domain" if args.cross_domain else "in-domain")
    write_pairs_jsonl(ex.scored_pairs(caps), m.out / f"{stem}_captions.jsonl")
    m.record(f"{stem}_captions", f"{stem}_captions.jsonl", "meta", cfg)
    _write_report(m, cfg, [rep], stem, "meta")
    print(_report_line(rep))


def cmd_baseline(args, cfg: ExperimentConfig, m: Manifest) -> None:
    world = _load_world(m, cfg)
    lm = load_lm(m.require("lm", cfg))
    state, log = ex.run_baseline(cfg, world, lm)
    save_state(state, m.out / "baseline_state.json")
    write_log(log, m.out / "baseline_log.csv")
    m.record("baseline_state", "baseline_state.json", "baseline", cfg)
    m.record("baseline_log", "baseline_log.csv", "baseline", cfg)
    test_world = _test_world(args, cfg, world, m)
    reports = [ex.run_test(cfg, state, test_world, lm, "non-episodic", adapt=False)[0]]
    if cfg.baseline.finetune:
        reports.append(ex.run_test(cfg, state, test_world, lm, "non-episodic+finetune", adapt=True)[0])
    _write_report(m, cfg, reports, "baseline_report", "baseline")
    for rep in reports:
        print(_report_line(rep))


def cmd_ablate(args, cfg: ExperimentConfig, m: Manifest) -> None:
    world = _load_world(m, cfg)
    lm = load_lm(m.require("lm", cfg))
    test_world = _test_world(args, cfg, world, m)
    reports = ex.ablate(cfg, world, lm, test_world, workers=args.workers)
    _write_report(m, cfg, reports, "ablation", "meta")
    for rep in reports:
        print(_report_line(rep))


def cmd_score(args, cfg: ExperimentConfig, m: Manifest) -> None:
    if not args.input:
        raise ConfigError("score: --input pairs.jsonl is required")
    pairs = read_pairs_jsonl(args.input)
    grammar = encoder = None
    entries = m.data["artifacts"]
    if "grammar" in entries:
        grammar = load_grammar(m.require("grammar", cfg))
        if "vision_encoder" in entries:
            encoder = build_caption_encoder(grammar, load_encoder(m.require("vision_encoder", cfg)))
    rep = evaluate(pairs, grammar, encoder, Path(args.input).stem, cfg.hash())
    _write_report(m, cfg, [rep], "score", "world")
    print(_report_line(rep))


COMMANDS = {
    "gen-world": cmd_gen_world,
    "pretrain-lm": cmd_pretrain_lm,
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "score": cmd_score,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotmeta", description="Chain-of-thought subspace meta-learning for few-shot captioning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--workers", type=int, default=1, help="episode-parallel threads inside meta-train")
        p.add_argument("--out", type=Path, default=Path("run"), help="artifact directory")
        if name in ("meta-test", "baseline", "ablate"):
            p.add_argument("--cross-domain", action="store_true", help="evaluate on a reshuffled second world")
        if name == "meta-test":
            p.add_argument("--split", choices=("test", "train"), default="test",
                           help="category split to evaluate on (train is refused by the split guard)")
        if name == "score":
            p.add_argument("--input", type=Path, help="JSONL of {image_id, candidate, references[, feature]}")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = _effective_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, Manifest(args.out))
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CotMetaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
