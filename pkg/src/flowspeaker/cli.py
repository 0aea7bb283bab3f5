"""Command-line pipeline: gen-corpus -> train -> generate -> evaluate.

One JSON config file carries per-command sections (corpus, train, generate,
evaluate). Unknown keys are rejected anywhere, and the corpus and train
sections must spell out their seeds, so a config plus a command line fully
determines every output byte.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 prompt
(out-of-vocabulary) error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import corpus as C
from . import evaluation as E
from . import prompt_prior as pp
from . import training as T
from .numerics import RngStream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_PROMPT = 4

_RUN_SECTIONS = ("corpus", "train", "generate", "evaluate")
_GENERATE_KEYS = {"n", "temperature", "seed"}
_EVALUATE_KEYS = {"n_per_prompt", "temperature", "seed"}


class ConfigError(Exception):
    """Bad run config: unknown key, missing field, or invalid value."""


def _build_section(section: dict, cls, name: str, required: tuple[str, ...] = ("seed",)):
    """Instantiate a config dataclass, rejecting unknown keys and requiring
    the listed fields to be spelled out."""
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    for req in required:
        if req not in section:
            raise ConfigError(f"config section {name!r}: missing required field {req!r}")
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"config section {name!r}: {e}") from e


def load_run_config(path: str) -> dict:
    """Parse and validate the run config; returns raw sections by name."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(_RUN_SECTIONS)
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")
    for name, keys in (("generate", _GENERATE_KEYS), ("evaluate", _EVALUATE_KEYS)):
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"config section {name!r} must be an object")
            bad = set(raw[name]) - keys
            if bad:
                raise ConfigError(f"config section {name!r}: unknown keys {sorted(bad)}")
    return raw


def corpus_config_from(raw: dict) -> C.CorpusConfig:
    if "corpus" not in raw:
        raise ConfigError("config: missing required section 'corpus'")
    cfg = _build_section(raw["corpus"], C.CorpusConfig, "corpus")
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def train_config_from(raw: dict) -> T.TrainConfig:
    if "train" not in raw:
        raise ConfigError("config: missing required section 'train'")
    section = dict(raw["train"])
    if "encoder" in section:
        section["encoder"] = _build_section(section["encoder"], pp.PromptEncoderConfig,
                                            "train.encoder", required=())
    cfg = _build_section(section, T.TrainConfig, "train")
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = corpus_config_from(load_run_config(args.config))
    bundle = C.generate_corpus_bundle(cfg)
    C.save_corpus(bundle, args.out_dir)
    test_prompts = C.generate_test_prompts(cfg)
    C.save_test_prompts(test_prompts, os.path.join(args.out_dir, C.TEST_PROMPTS_FILE))
    print(f"wrote {len(bundle.speakers)} speakers, {len(bundle.prompts)} prompts, "
          f"{len(test_prompts)} test prompts to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config_from(load_run_config(args.config))
    speakers, prompts = C.load_corpus(args.corpus_dir)
    def progress(step, loss):
        print(f"step {step} loss {loss:.6f}")
    try:
        ckpt = T.train((speakers, prompts), cfg, progress=progress)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    T.save_checkpoint(ckpt, args.out)
    print(f"trained {ckpt.step} steps ({cfg.mode}); final loss "
          f"{ckpt.loss_trace[-1]:.6f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = T.load_checkpoint(args.checkpoint)
    temperature = ckpt.config.temperature if args.temperature is None else args.temperature
    if ckpt.mode == "baseline" and (args.n != 1 or temperature != 0.0):
        print("warning: baseline checkpoint has no sampling; returning its "
              "single deterministic embedding", file=sys.stderr)
    rng = RngStream(args.seed).spawn("generate")
    emb = T.generate_embeddings(ckpt, args.prompt, args.n, temperature, rng)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i, row in enumerate(emb):
            out.write(json.dumps({"prompt": args.prompt, "index": i,
                                  "temperature": temperature, "seed": args.seed,
                                  "embedding": [float(x) for x in row]},
                                 ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = T.load_checkpoint(args.checkpoint)
    bundle = C.load_corpus_bundle(args.corpus_dir)
    test_prompts = C.load_test_prompts(args.prompts)
    temperature = ckpt.config.temperature if args.temperature is None else args.temperature
    root = RngStream(args.seed).spawn("evaluate")
    gen: list[tuple[str, np.ndarray]] = []
    gen_attrs: list[tuple[dict, np.ndarray]] = []
    for tp in test_prompts:
        emb = T.generate_embeddings(ckpt, tp.text, args.n_per_prompt, temperature,
                                    root.spawn(tp.prompt_id))
        for row in emb:
            gen.append((tp.prompt_id, row))
            gen_attrs.append((tp.attributes, row))
    sets = E.build_speaker_sets(bundle.speakers, gen, centers=bundle.centers,
                                seed=args.seed)
    report = E.compute_metrics(sets)
    if bundle.centroids:
        report.attribute_accuracy = E.attribute_accuracy(gen_attrs, bundle.centroids)
    else:
        print("note: corpus has no centroid metadata; skipping attribute accuracy",
              file=sys.stderr)
    E.save_report(report, args.out)
    diversity = "n/a"
    if report.gen2gen_near is not None:
        diversity = "diverse" if E.diversity_check(report) else "collapsed"
    print(f"verdict: {report.verdict} ({diversity}); report {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowspeaker",
                                description="prompt-conditioned speaker generation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(fn=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus-dir", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    ge = sub.add_parser("generate", help="generate speaker embeddings for a prompt")
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--prompt", required=True)
    ge.add_argument("--n", type=int, default=1)
    ge.add_argument("--temperature", type=float, default=None)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--out", default=None)
    ge.set_defaults(fn=cmd_generate)

    ev = sub.add_parser("evaluate", help="run the metric suite")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus-dir", required=True)
    ev.add_argument("--prompts", required=True)
    ev.add_argument("--n-per-prompt", type=int, default=8)
    ev.add_argument("--temperature", type=float, default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", required=True)
    ev.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except T.TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except pp.UnknownTokenError as e:
        print(f"prompt error: {e}", file=sys.stderr)
        return EXIT_PROMPT
    except (C.CorpusFormatError, pp.ExternalEmbeddingError, T.CorruptCheckpointError,
            T.UnsupportedVersionError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
