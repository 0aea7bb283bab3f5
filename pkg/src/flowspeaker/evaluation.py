"""Speaker fidelity and generation metrics over embedding sets.

All six metrics are means of cosine distances, so every value lies in
[0, 2]. Reduction order is canonical: speaker-keyed terms run over sorted
speaker ids, generated items in list order, prompt groups in sorted
prompt-id order, and every mean is sum(values) / len(values). This fixes the
floating-point result exactly, which lets tests compare against an
independent full-pairwise-matrix implementation with zero tolerance.

The novelty verdict compares where generated speakers fall between the
same-speaker distance floor and the nearest-different-speaker distance; the
diversity flag asks whether same-prompt samples spread more than repeated
measurements of one speaker do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import combo_key, parse_combo_key, speaker_dvector, split_same_speaker
from .numerics import RngStream, cosine_distance

VERDICT_TIE_TOL = 1e-9


@dataclass
class SpeakerSets:
    """Embedding sets the metric suite consumes.

    gt: ground-truth speaker vectors; syn: synthesized/estimated vectors for
    the same speakers; gen: (prompt_id, vector) pairs for generated speakers;
    syn_same_pairs: per speaker, d-vectors of two disjoint utterance halves.
    """
    gt: dict[str, np.ndarray]
    syn: dict[str, np.ndarray]
    gen: list[tuple[str, np.ndarray]]
    syn_same_pairs: dict[str, tuple[np.ndarray, np.ndarray]]


@dataclass
class MetricsReport:
    syn2gt_same: float
    syn2gt_near: float
    syn2syn_same: float
    syn2syn_near: float
    gen2syn_near: float
    gen2gen_near: float | None
    verdict: str = "inconclusive"
    attribute_accuracy: dict = field(default_factory=dict)


def nearest_distance(v: np.ndarray, others) -> float:
    """Smallest cosine distance from v to any vector in others."""
    others = list(others)
    if not others:
        raise ValueError("nearest_distance: empty candidate set")
    return min(cosine_distance(v, o) for o in others)


def _mean(values: list[float], metric: str) -> float:
    if not values:
        raise ValueError(f"{metric}: no terms to average")
    return sum(values) / len(values)


def compute_metrics(sets: SpeakerSets) -> MetricsReport:
    """All six metrics plus the novelty verdict."""
    ids = sorted(sets.syn)
    if set(sets.gt) != set(ids):
        raise ValueError("syn2gt-same: syn and gt must cover the same speaker ids")
    if len(ids) < 2:
        raise ValueError("syn2syn-near: need at least 2 synthesized speakers")
    if set(sets.syn_same_pairs) != set(ids):
        raise ValueError("syn2syn-same: need a disjoint-half pair per speaker")
    if not sets.gen:
        raise ValueError("gen2syn-near: no generated speakers")

    syn2gt_same = _mean([cosine_distance(sets.syn[i], sets.gt[i]) for i in ids],
                        "syn2gt-same")
    syn2gt_near = _mean(
        [min(cosine_distance(sets.syn[i], sets.gt[j]) for j in ids if j != i)
         for i in ids], "syn2gt-near")
    syn2syn_same = _mean(
        [cosine_distance(sets.syn_same_pairs[i][0], sets.syn_same_pairs[i][1])
         for i in ids], "syn2syn-same")
    syn2syn_near = _mean(
        [min(cosine_distance(sets.syn[i], sets.syn[j]) for j in ids if j != i)
         for i in ids], "syn2syn-near")
    syn_list = [sets.syn[i] for i in ids]
    gen2syn_near = _mean([nearest_distance(v, syn_list) for _, v in sets.gen],
                         "gen2syn-near")

    groups: dict[str, list[np.ndarray]] = {}
    for pid, v in sets.gen:
        groups.setdefault(pid, []).append(v)
    per_prompt = []
    for pid in sorted(groups):
        vs = groups[pid]
        if len(vs) < 2:
            continue
        per_prompt.append(_mean(
            [min(cosine_distance(vs[i], vs[j]) for j in range(len(vs)) if j != i)
             for i in range(len(vs))], "gen2gen-near"))
    gen2gen_near = _mean(per_prompt, "gen2gen-near") if per_prompt else None

    report = MetricsReport(syn2gt_same=syn2gt_same, syn2gt_near=syn2gt_near,
                           syn2syn_same=syn2syn_same, syn2syn_near=syn2syn_near,
                           gen2syn_near=gen2syn_near, gen2gen_near=gen2gen_near)
    report.verdict = novelty_verdict(report)
    return report


def novelty_verdict(report: MetricsReport) -> str:
    """novel / memorized / inconclusive from where gen2syn-near falls."""
    for name in ("gen2syn_near", "syn2syn_near", "syn2syn_same"):
        if getattr(report, name) is None:
            raise ValueError(f"novelty_verdict: {name} missing")
    to_near = abs(report.gen2syn_near - report.syn2syn_near)
    to_same = abs(report.gen2syn_near - report.syn2syn_same)
    if abs(to_near - to_same) <= VERDICT_TIE_TOL:
        return "inconclusive"
    return "novel" if to_near < to_same else "memorized"


def diversity_check(report: MetricsReport) -> bool:
    """True iff same-prompt generation spread strictly exceeds the
    same-speaker measurement floor."""
    if report.gen2gen_near is None or report.syn2syn_same is None:
        raise ValueError("diversity_check: gen2gen-near and syn2syn-same required")
    return report.gen2gen_near > report.syn2syn_same


def attribute_accuracy(gen: list[tuple[dict, np.ndarray]],
                       centroids: dict[str, np.ndarray]) -> dict[str, float]:
    """Nearest-centroid attribute classification of generated embeddings.

    Each generated vector is assigned the attribute combination of its
    nearest centroid; for every attribute the prompt pinned down, the
    assignment either matches or not. Returns per-attribute match fractions
    over the prompts that specify that attribute.
    """
    if not centroids:
        raise ValueError("attribute_accuracy: no centroids")
    keys = sorted(centroids)
    parsed = {k: parse_combo_key(k) for k in keys}
    known: dict[str, set] = {}
    for attrs in parsed.values():
        for name, value in attrs.items():
            known.setdefault(name, set()).add(
                tuple(sorted(value)) if isinstance(value, list) else value)
    counts: dict[str, int] = {}
    hits: dict[str, int] = {}
    for attrs, vec in gen:
        for name, value in attrs.items():
            want = tuple(sorted(value)) if isinstance(value, list) else value
            if name not in known or want not in known[name]:
                raise ValueError(f"attribute_accuracy: unknown {name} value {value!r}")
        best = min(keys, key=lambda k: cosine_distance(vec, centroids[k]))
        got = parsed[best]
        for name, value in attrs.items():
            want = tuple(sorted(value)) if isinstance(value, list) else value
            have = got.get(name)
            have = tuple(sorted(have)) if isinstance(have, list) else have
            counts[name] = counts.get(name, 0) + 1
            hits[name] = hits.get(name, 0) + (1 if want == have else 0)
    return {name: hits[name] / counts[name] for name in sorted(counts)}


# ---------------------------------------------------------------------------
# Set construction and serialization
# ---------------------------------------------------------------------------

def build_speaker_sets(speakers, gen: list[tuple[str, np.ndarray]],
                       centers: dict[str, np.ndarray] | None = None,
                       seed: int = 0) -> SpeakerSets:
    """SpeakerSets from corpus records plus generated (prompt_id, vector)s.

    syn vectors are utterance-mean d-vectors; gt vectors are the noiseless
    speaker centers when available, else the d-vectors themselves;
    same-speaker pairs come from disjoint utterance halves, deterministic
    in the seed.
    """
    syn = {s.speaker_id: speaker_dvector(s.utterances) for s in speakers}
    if centers is not None:
        missing = set(syn) - set(centers)
        if missing:
            raise ValueError(f"build_speaker_sets: centers missing speakers "
                             f"{sorted(missing)[:5]}")
        gt = {sid: np.asarray(centers[sid], dtype=np.float64) for sid in syn}
    else:
        gt = dict(syn)
    root = RngStream(seed).spawn("same-split")
    pairs = {}
    for s in speakers:
        half_a, half_b = split_same_speaker(s.utterances, root.spawn(s.speaker_id))
        pairs[s.speaker_id] = (speaker_dvector(half_a), speaker_dvector(half_b))
    return SpeakerSets(gt=gt, syn=syn, gen=gen, syn_same_pairs=pairs)


METRIC_KEYS = ("syn2gt-same", "syn2gt-near", "syn2syn-same", "syn2syn-near",
               "gen2syn-near", "gen2gen-near")


def report_to_json(report: MetricsReport) -> dict:
    return {
        "syn2gt-same": report.syn2gt_same,
        "syn2gt-near": report.syn2gt_near,
        "syn2syn-same": report.syn2syn_same,
        "syn2syn-near": report.syn2syn_near,
        "gen2syn-near": report.gen2syn_near,
        "gen2gen-near": report.gen2gen_near,
        "verdict": report.verdict,
        "attribute-accuracy": dict(report.attribute_accuracy),
    }


def report_from_json(d: dict) -> MetricsReport:
    missing = [k for k in METRIC_KEYS if k not in d]
    if missing:
        raise ValueError(f"metrics report missing keys {missing}")
    return MetricsReport(
        syn2gt_same=d["syn2gt-same"], syn2gt_near=d["syn2gt-near"],
        syn2syn_same=d["syn2syn-same"], syn2syn_near=d["syn2syn-near"],
        gen2syn_near=d["gen2syn-near"], gen2gen_near=d["gen2gen-near"],
        verdict=d.get("verdict", "inconclusive"),
        attribute_accuracy=dict(d.get("attribute-accuracy", {})))


def save_report(report: MetricsReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_json(report), fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_report(path: str) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_json(json.load(fh))
