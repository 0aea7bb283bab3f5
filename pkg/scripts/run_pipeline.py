"""End-to-end desk run: corpus, proposed + baseline training, evaluation.

Writes all artifacts under --workdir and prints the distance table and the
per-attribute accuracy comparison between the flow model and the regression
baseline.  Uses the shipped desk configuration unless --config overrides it.

    python3 scripts/run_pipeline.py --workdir runs/desk
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import flowspeaker.corpus as C
import flowspeaker.evaluation as E
import flowspeaker.prompt_prior as pp
import flowspeaker.training as T
from flowspeaker.numerics import RngStream

REPO = Path(__file__).resolve().parent.parent


def parse_configs(path: Path):
    cfgd = json.loads(path.read_text(encoding="utf-8"))
    corpus_cfg = C.CorpusConfig(**cfgd["corpus"])
    encoder = pp.PromptEncoderConfig(**cfgd["train"]["encoder"])
    tk = {k: v for k, v in cfgd["train"].items() if k != "encoder"}
    return corpus_cfg, T.TrainConfig(encoder=encoder, **tk), cfgd["evaluate"]


def evaluate(ckpt, bundle, test_prompts, eval_cfg):
    root = RngStream(eval_cfg["seed"]).spawn("evaluate")
    gen, gen_attrs = [], []
    n = eval_cfg["n_per_prompt"] if ckpt.mode == "proposed" else 1
    for tp in test_prompts:
        emb = T.generate_embeddings(ckpt, tp.text, n, eval_cfg["temperature"],
                                    root.spawn(tp.prompt_id))
        for row in emb:
            gen.append((tp.prompt_id, row))
            gen_attrs.append((tp.attributes, row))
    sets = E.build_speaker_sets(bundle.speakers, gen, centers=bundle.centers,
                                seed=eval_cfg["seed"])
    report = E.compute_metrics(sets)
    report.attribute_accuracy = E.attribute_accuracy(gen_attrs, bundle.centroids)
    return report, report.attribute_accuracy


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--config", default=str(REPO / "configs" / "desk.json"))
    args = ap.parse_args()
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    corpus_cfg, train_cfg, eval_cfg = parse_configs(Path(args.config))
    bundle = C.generate_corpus_bundle(corpus_cfg)
    test_prompts = C.generate_test_prompts(corpus_cfg)
    C.save_corpus(bundle, str(workdir / "corpus"))
    C.save_test_prompts(test_prompts, str(workdir / "corpus" / C.TEST_PROMPTS_FILE))
    print(f"corpus: {len(bundle.speakers)} speakers, {len(bundle.prompts)} prompts")

    runs = {}
    for mode in ("proposed", "baseline"):
        cfg = replace(train_cfg, mode=mode)
        t0 = time.monotonic()
        ckpt = T.train((bundle.speakers, bundle.prompts), cfg,
                       progress=lambda s, l, m=mode: print(f"[{m}] step {s} loss {l:.4f}",
                                                           flush=True))
        secs = time.monotonic() - t0
        T.save_checkpoint(ckpt, str(workdir / f"ckpt_{mode}.json"))
        report, accuracy = evaluate(ckpt, bundle, test_prompts, eval_cfg)
        runs[mode] = (report, accuracy, secs)
        print(f"[{mode}] trained {cfg.steps} steps in {secs:.1f}s")

    report, accuracy, _ = runs["proposed"]
    E.save_report(report, str(workdir / "report_proposed.json"))
    print("\ndistance table (proposed)")
    for key, value in E.report_to_json(report).items():
        if isinstance(value, float):
            print(f"  {key:13s} {value:.6f}")
    print(f"  verdict       {E.novelty_verdict(report)}")
    print(f"  diverse       {E.diversity_check(report)}")

    print("\nattribute accuracy   proposed   baseline")
    base_acc = runs["baseline"][1]
    for attr in sorted(accuracy):
        print(f"  {attr:18s} {accuracy[attr]:8.3f} {base_acc.get(attr, float('nan')):10.3f}")


if __name__ == "__main__":
    main()
