"""Shared fixtures: one desk-scale corpus + training run per session.

Training at the shipped desk configuration takes minutes, so every test that
needs a converged model shares this single run (and the matching baseline run)
instead of training its own.
"""

import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import pytest

import flowspeaker.corpus as C
import flowspeaker.evaluation as E
import flowspeaker.prompt_prior as pp
import flowspeaker.training as T
from flowspeaker.numerics import RngStream

DESK_CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


def desk_configs():
    """The shipped desk configuration, parsed into the library dataclasses."""
    cfgd = json.loads(DESK_CONFIG_PATH.read_text(encoding="utf-8"))
    corpus_cfg = C.CorpusConfig(**cfgd["corpus"])
    encoder = pp.PromptEncoderConfig(**cfgd["train"]["encoder"])
    train_kw = {k: v for k, v in cfgd["train"].items() if k != "encoder"}
    train_cfg = T.TrainConfig(encoder=encoder, **train_kw)
    return corpus_cfg, train_cfg, cfgd["evaluate"]


@dataclass
class DeskRun:
    corpus_cfg: C.CorpusConfig
    train_cfg: T.TrainConfig
    eval_cfg: dict
    bundle: C.CorpusBundle
    test_prompts: list
    ckpt: T.Checkpoint
    baseline: T.Checkpoint
    train_seconds: float
    # evaluation artifacts at the shipped evaluate defaults
    gen: list = field(default_factory=list)          # (prompt_id, embedding)
    gen_attrs: list = field(default_factory=list)    # (attributes, embedding)
    report: E.MetricsReport | None = None
    accuracy: dict | None = None


def _progress(tag):
    def cb(step, loss):
        print(f"[desk {tag}] step {step} loss {loss:.4f}", file=sys.__stdout__,
              flush=True)
    return cb


@pytest.fixture(scope="session")
def desk_run():
    corpus_cfg, train_cfg, eval_cfg = desk_configs()
    bundle = C.generate_corpus_bundle(corpus_cfg)
    test_prompts = C.generate_test_prompts(corpus_cfg)

    t0 = time.monotonic()
    ckpt = T.train((bundle.speakers, bundle.prompts), train_cfg,
                   progress=_progress("proposed"))
    train_seconds = time.monotonic() - t0

    baseline = T.train((bundle.speakers, bundle.prompts),
                       replace(train_cfg, mode="baseline"),
                       progress=_progress("baseline"))

    root = RngStream(eval_cfg["seed"]).spawn("evaluate")
    gen, gen_attrs = [], []
    for tp in test_prompts:
        emb = T.generate_embeddings(ckpt, tp.text, eval_cfg["n_per_prompt"],
                                    eval_cfg["temperature"],
                                    root.spawn(tp.prompt_id))
        for row in emb:
            gen.append((tp.prompt_id, row))
            gen_attrs.append((tp.attributes, row))
    sets = E.build_speaker_sets(bundle.speakers, gen, centers=bundle.centers,
                                seed=eval_cfg["seed"])
    report = E.compute_metrics(sets)
    accuracy = E.attribute_accuracy(gen_attrs, bundle.centroids)

    return DeskRun(corpus_cfg=corpus_cfg, train_cfg=train_cfg, eval_cfg=eval_cfg,
                   bundle=bundle, test_prompts=test_prompts, ckpt=ckpt,
                   baseline=baseline, train_seconds=train_seconds, gen=gen,
                   gen_attrs=gen_attrs, report=report, accuracy=accuracy)
