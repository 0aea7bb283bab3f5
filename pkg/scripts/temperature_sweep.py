"""Sweep sampling temperature on a trained checkpoint and print, per T, the
within-prompt spread and the distance metrics against the corpus.

Useful for picking the evaluation temperature: spread grows with T, while
gen2syn-near should sit between the same-speaker floor and the
nearest-neighbour distance for the generated speakers to read as novel.

    python3 scripts/temperature_sweep.py --checkpoint runs/desk/ckpt_proposed.json \
        --corpus-dir runs/desk/corpus
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import flowspeaker.corpus as C
import flowspeaker.evaluation as E
import flowspeaker.training as T
from flowspeaker.numerics import RngStream, cosine_distance


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--corpus-dir", required=True)
    ap.add_argument("--temperatures", default="0.0,0.1,0.2,0.3,0.5,0.7,1.0")
    ap.add_argument("--n-per-prompt", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ckpt = T.load_checkpoint(args.checkpoint)
    bundle = C.load_corpus_bundle(args.corpus_dir)
    test_prompts = C.load_test_prompts(
        str(Path(args.corpus_dir) / C.TEST_PROMPTS_FILE))
    temps = [float(t) for t in args.temperatures.split(",")]

    print("T      spread   syn2syn-same  gen2syn-near  syn2syn-near  verdict")
    for temp in temps:
        root = RngStream(args.seed).spawn("evaluate")
        gen = []
        for tp in test_prompts:
            emb = T.generate_embeddings(ckpt, tp.text, args.n_per_prompt, temp,
                                        root.spawn(tp.prompt_id))
            gen.extend((tp.prompt_id, row) for row in emb)
        vectors = [v for _, v in gen]
        spread = float(np.mean([cosine_distance(vectors[i], vectors[j])
                                for i in range(len(vectors))
                                for j in range(i + 1, len(vectors))]))
        sets = E.build_speaker_sets(bundle.speakers, gen, centers=bundle.centers,
                                    seed=args.seed)
        rep = E.compute_metrics(sets)
        print(f"{temp:4.2f}  {spread:8.4f}  {rep.syn2syn_same:12.6f}  "
              f"{rep.gen2syn_near:12.6f}  {rep.syn2syn_near:12.6f}  {rep.verdict}")


if __name__ == "__main__":
    main()
