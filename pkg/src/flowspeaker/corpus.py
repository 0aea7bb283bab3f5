"""Synthetic speaker-embedding corpus with text-prompt annotations.

Speakers live in attribute clusters: every (gender, age, style) combination
owns a random centroid on a sphere of radius ``separation``; a speaker's
center is its combination centroid plus cluster noise, and each utterance
embedding is the center plus utterance noise. Noise scales are expected
vector norms, so per-dimension noise std is scale/sqrt(dim).

Centroids are drawn as independent random directions on purpose: real
d-vector spaces carry no semantic arrangement, so a prompt that pins down
only some attributes maps to several far-apart clusters rather than one
interpolated region. That one-to-many geometry is what separates a
distribution model from a direct regressor.

Prompt texts are templated from the attributes with annotator-dependent
phrasing, so one speaker carries several distinct descriptions and one
description can fit several speakers. Speakers are split into granularity
groups: "full" prompts mention gender, age, and style; "medium" prompts
gender and age; "coarse" prompts gender only.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .numerics import RngStream, check_finite

GENDERS = ("female", "male")
AGES = ("child", "young", "middle-aged", "old")
STYLES = ("calm", "lively", "gentle", "serious")
GRANULARITIES = ("full", "medium", "coarse")

MAX_ANNOTATORS = {"full": 13, "medium": 13, "coarse": 9}

SPEAKERS_FILE = "speakers.jsonl"
PROMPTS_FILE = "prompts.jsonl"
META_FILE = "meta.json"
TEST_PROMPTS_FILE = "test_prompts.jsonl"


class CorpusFormatError(Exception):
    """A corpus file violates the record schema."""


class EmptyCorpusError(CorpusFormatError):
    """A corpus file contains no records."""


# ---------------------------------------------------------------------------
# Records and configuration
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SpeakerRecord:
    speaker_id: str
    attributes: dict            # {"gender": str, "age": str, "style": [str, ...]}
    utterances: np.ndarray      # (n_utterances, dim)

    def __eq__(self, other) -> bool:
        return (isinstance(other, SpeakerRecord)
                and self.speaker_id == other.speaker_id
                and self.attributes == other.attributes
                and np.array_equal(self.utterances, other.utterances))


@dataclass
class PromptRecord:
    speaker_id: str
    annotator_id: int           # 1..13
    text: str
    token_ids: list[int] | None = None   # filled against a vocabulary, not serialized


@dataclass
class TestPrompt:
    prompt_id: str
    text: str
    attributes: dict            # only the attributes the text pins down


@dataclass
class CorpusConfig:
    n_full: int = 16            # speakers described by gender + age + style
    n_medium: int = 24          # gender + age
    n_coarse: int = 24          # gender only
    utterances_per_speaker: int = 16
    dim: int = 32
    separation: float = 4.0     # centroid radius
    cluster_noise: float = 0.5  # expected |speaker center - centroid|
    utterance_noise: float = 0.2
    annotators_full: int = 13
    annotators_medium: int = 3
    annotators_coarse: int = 3
    seed: int = 0

    @property
    def n_speakers(self) -> int:
        return self.n_full + self.n_medium + self.n_coarse

    def validate(self) -> None:
        for name in ("n_full", "n_medium", "n_coarse"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"corpus config: {name} must be a non-negative integer")
        if self.n_speakers < 1:
            raise ValueError("corpus config: at least one speaker required")
        if not isinstance(self.utterances_per_speaker, int) or self.utterances_per_speaker < 2:
            raise ValueError("corpus config: utterances_per_speaker must be an integer >= 2")
        if not isinstance(self.dim, int) or self.dim < 2:
            raise ValueError("corpus config: dim must be an integer >= 2")
        if not self.separation > 0:
            raise ValueError("corpus config: separation must be positive")
        for name in ("cluster_noise", "utterance_noise"):
            v = getattr(self, name)
            if v < 0 or v >= self.separation:
                raise ValueError(f"corpus config: {name} must be in [0, separation)")
        for name, gran in (("annotators_full", "full"), ("annotators_medium", "medium"),
                           ("annotators_coarse", "coarse")):
            v = getattr(self, name)
            if not isinstance(v, int) or not 1 <= v <= MAX_ANNOTATORS[gran]:
                raise ValueError(
                    f"corpus config: {name} must be in 1..{MAX_ANNOTATORS[gran]}")
        if not isinstance(self.seed, int):
            raise ValueError("corpus config: seed must be an integer")


@dataclass
class CorpusBundle:
    speakers: list[SpeakerRecord]
    prompts: list[PromptRecord]
    centers: dict[str, np.ndarray] | None = None      # speaker_id -> noiseless center
    centroids: dict[str, np.ndarray] | None = None    # combo key -> centroid
    config: CorpusConfig | None = None


# ---------------------------------------------------------------------------
# Attribute combinations
# ---------------------------------------------------------------------------

def all_combinations() -> list[tuple[str, str, str]]:
    """(gender, age, style) triples ordered so gender alternates fastest."""
    return [(g, a, s) for a in AGES for s in STYLES for g in GENDERS]


def combo_key(attributes: dict) -> str:
    """Canonical string key for an attribute combination."""
    style = "+".join(sorted(attributes.get("style", [])))
    return f"{attributes['gender']}|{attributes['age']}|{style}"


def parse_combo_key(key: str) -> dict:
    gender, age, style = key.split("|")
    attrs = {"gender": gender, "age": age}
    if style:
        attrs["style"] = style.split("+")
    return attrs


def _speaker_plan(cfg: CorpusConfig) -> list[tuple[str, tuple[str, str, str], str]]:
    """Deterministic (speaker_id, combination, granularity) assignment."""
    combos = all_combinations()
    plan = []
    for i in range(cfg.n_speakers):
        if i < cfg.n_full:
            gran = "full"
        elif i < cfg.n_full + cfg.n_medium:
            gran = "medium"
        else:
            gran = "coarse"
        plan.append((f"spk-{i:04d}", combos[i % len(combos)], gran))
    return plan


# ---------------------------------------------------------------------------
# Prompt templating
# ---------------------------------------------------------------------------

_GENDER_WORDS = {
    "female": ("woman", "female", "lady"),
    "male": ("man", "male", "gentleman"),
}
_AGE_WORDS = {
    "child": ("child", "kid"),
    "young": ("young", "youthful"),
    "middle-aged": ("middle aged", "mature"),
    "old": ("old", "elderly"),
}
_STYLE_WORDS = {
    "calm": ("calm", "relaxed"),
    "lively": ("lively", "energetic"),
    "gentle": ("gentle", "soft"),
    "serious": ("serious", "stern"),
}
_FULL_TEMPLATES = (
    "a {style} {age} {gender} voice",
    "the voice of a {age} {gender} with a {style} tone",
    "please generate a {style} voice of a {age} {gender}",
    "{age} {gender} speaker sounding {style}",
)
_MEDIUM_TEMPLATES = (
    "a {age} {gender} voice",
    "the voice of a {age} {gender}",
    "please generate the voice of a {age} {gender}",
)
_COARSE_TEMPLATES = (
    "a {gender} voice",
    "the voice of a {gender}",
    "please generate a {gender} voice",
)


def prompt_text(attributes: dict, granularity: str, annotator_id: int) -> str:
    """Deterministic phrasing for one annotator; distinct annotators of the
    same speaker always produce distinct texts (within the annotator caps)."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    k = annotator_id - 1
    if not 0 <= k < MAX_ANNOTATORS[granularity]:
        raise ValueError(f"annotator_id {annotator_id} out of range for {granularity}")
    gender = _GENDER_WORDS[attributes["gender"]]
    if granularity == "full":
        return _FULL_TEMPLATES[k % 4].format(
            gender=gender[(k // 4) % len(gender)],
            age=_AGE_WORDS[attributes["age"]][(k // 12) % 2],
            style=_STYLE_WORDS[attributes["style"][0]][(k // 24) % 2],
        )
    if granularity == "medium":
        return _MEDIUM_TEMPLATES[k % 3].format(
            gender=gender[(k // 3) % len(gender)],
            age=_AGE_WORDS[attributes["age"]][(k // 9) % 2],
        )
    return _COARSE_TEMPLATES[k % 3].format(gender=gender[(k // 3) % len(gender)])


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _random_direction(rng: RngStream, dim: int) -> np.ndarray:
    v = rng.normal(dim)
    norm = float(np.linalg.norm(v))
    while norm < 1e-8:          # astronomically unlikely; keep determinism anyway
        v = rng.normal(dim)
        norm = float(np.linalg.norm(v))
    return v / norm


def generate_corpus_bundle(cfg: CorpusConfig) -> CorpusBundle:
    """Full corpus: speakers, prompts, noiseless centers, combo centroids."""
    cfg.validate()
    root = RngStream(cfg.seed)
    combos = all_combinations()
    cen_rng = root.spawn("centroids")
    all_centroids = {combo_key({"gender": g, "age": a, "style": [s]}):
                     cfg.separation * _random_direction(cen_rng, cfg.dim)
                     for (g, a, s) in combos}

    plan = _speaker_plan(cfg)
    speakers: list[SpeakerRecord] = []
    prompts: list[PromptRecord] = []
    centers: dict[str, np.ndarray] = {}
    used_keys: set[str] = set()
    gran_annotators = {"full": cfg.annotators_full, "medium": cfg.annotators_medium,
                       "coarse": cfg.annotators_coarse}
    for speaker_id, (g, a, s), gran in plan:
        attrs = {"gender": g, "age": a, "style": [s]}
        key = combo_key(attrs)
        used_keys.add(key)
        srng = root.spawn(speaker_id)
        center = all_centroids[key] + srng.spawn("center").normal(cfg.dim) * (
            cfg.cluster_noise / math.sqrt(cfg.dim))
        n_utt = cfg.utterances_per_speaker
        utts = center[None, :] + srng.spawn("utterances").normal(n_utt * cfg.dim).reshape(
            n_utt, cfg.dim) * (cfg.utterance_noise / math.sqrt(cfg.dim))
        speakers.append(SpeakerRecord(speaker_id, attrs, utts))
        centers[speaker_id] = center
        for k in range(gran_annotators[gran]):
            prompts.append(PromptRecord(speaker_id, k + 1, prompt_text(attrs, gran, k + 1)))
    centroids = {k: v for k, v in all_centroids.items() if k in used_keys}
    return CorpusBundle(speakers, prompts, centers, centroids, cfg)


def generate_synthetic_corpus(cfg: CorpusConfig) -> tuple[list[SpeakerRecord], list[PromptRecord]]:
    bundle = generate_corpus_bundle(cfg)
    return bundle.speakers, bundle.prompts


def _annotated_texts(cfg: CorpusConfig) -> set[str]:
    """Every prompt text the corpus's annotator enumeration produces."""
    counts = {"full": cfg.annotators_full, "medium": cfg.annotators_medium,
              "coarse": cfg.annotators_coarse}
    texts: set[str] = set()
    for _, (g, a, s), gran in _speaker_plan(cfg):
        attrs = {"gender": g, "age": a, "style": [s]}
        for k in range(counts[gran]):
            texts.add(prompt_text(attrs, gran, k + 1))
    return texts


def _phrasing_pool(attrs: dict, granularity: str, train_texts: set[str],
                   vocab_words: set[str]) -> list[str]:
    """Template/word-variant texts the annotator enumeration never emits,
    restricted to words it does emit; empty when the enumeration already
    exhausts the grid of in-vocabulary phrasings."""
    gender = _GENDER_WORDS[attrs["gender"]]
    cands: list[str] = []
    if granularity == "full":
        age, style = _AGE_WORDS[attrs["age"]], _STYLE_WORDS[attrs["style"][0]]
        cands = [tpl.format(gender=gw, age=aw, style=sw)
                 for tpl in _FULL_TEMPLATES for gw in gender
                 for aw in age for sw in style]
    elif granularity == "medium":
        age = _AGE_WORDS[attrs["age"]]
        cands = [tpl.format(gender=gw, age=aw)
                 for tpl in _MEDIUM_TEMPLATES for gw in gender for aw in age]
    else:
        cands = [tpl.format(gender=gw)
                 for tpl in _COARSE_TEMPLATES for gw in gender]
    return [c for c in cands
            if c not in train_texts and set(c.split()) <= vocab_words]


def generate_test_prompts(cfg: CorpusConfig, n_full: int = 20, n_medium: int = 0,
                          n_coarse: int = 0) -> list[TestPrompt]:
    """Evaluation prompt set of descriptions unseen in training, spanning the
    attribute combinations each granularity group actually contains.

    Test texts reuse the training templates and word variants but pick
    combinations the annotator enumeration never emits, so evaluation scores
    generalization to new descriptions rather than recall of memorized
    training strings; every word still occurs in some training text, keeping
    the prompts inside the trained vocabulary.  Combinations whose annotator
    enumeration exhausts the in-vocabulary grid fall back to annotator
    phrasings.

    The default is 20 fully specified descriptions (gender + age + style),
    cycling the combinations the richly annotated speakers cover.  Full
    descriptions pin a single cluster, which is what the distance metrics
    need: a prompt that names only a gender matches a dozen scattered
    clusters, so its prior mean sits between them and every sample lands far
    from any real speaker, drowning gen2syn-near regardless of model quality.
    Callers can still request mixed-granularity sets."""
    cfg.validate()
    plan = _speaker_plan(cfg)
    by_gran: dict[str, list[tuple[str, str, str]]] = {g: [] for g in GRANULARITIES}
    for _, combo, gran in plan:
        if combo not in by_gran[gran]:
            by_gran[gran].append(combo)
    train_texts = _annotated_texts(cfg)
    vocab_words: set[str] = set()
    for t in train_texts:
        vocab_words.update(t.split())
    out: list[TestPrompt] = []

    def add(attrs: dict, granularity: str, i: int, fallback_annotators: int) -> None:
        pool = _phrasing_pool(attrs, granularity, train_texts, vocab_words)
        if pool:
            text = pool[i % len(pool)]
        else:
            text = prompt_text(attrs, granularity, (i % fallback_annotators) + 1)
        out.append(TestPrompt(f"tp-{len(out):02d}", text, attrs))

    fulls = by_gran["full"] or by_gran["medium"] or by_gran["coarse"]
    for i in range(n_full):
        g, a, s = fulls[i % len(fulls)]
        add({"gender": g, "age": a, "style": [s]}, "full", i, cfg.annotators_full)
    mediums = by_gran["medium"] or fulls
    step = max(1, len(mediums) // max(1, n_medium))
    for i in range(n_medium):
        g, a, _ = mediums[(i * step) % len(mediums)]
        add({"gender": g, "age": a}, "medium", i, cfg.annotators_medium)
    for i in range(n_coarse):
        add({"gender": GENDERS[i % 2]}, "coarse", i // 2, cfg.annotators_coarse)
    return out


# ---------------------------------------------------------------------------
# d-vectors and splits
# ---------------------------------------------------------------------------

def speaker_dvector(utterances) -> np.ndarray:
    """Arithmetic mean of the per-utterance embeddings."""
    utts = np.asarray(utterances, dtype=np.float64)
    if utts.ndim != 2 or utts.shape[0] == 0:
        raise ValueError("speaker_dvector needs a nonempty list of vectors")
    return utts.mean(axis=0)


def split_same_speaker(utterances, rng: RngStream) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Disjoint, exhaustive shuffle split; first half gets the extra item."""
    utts = np.asarray(utterances, dtype=np.float64)
    n = utts.shape[0]
    if n < 2:
        raise ValueError("split_same_speaker needs at least 2 utterances")
    order = rng.shuffled_indices(n)
    cut = (n + 1) // 2
    return ([utts[i] for i in order[:cut]], [utts[i] for i in order[cut:]])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False) + "\n"


def save_corpus(bundle: CorpusBundle, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, SPEAKERS_FILE), "w", encoding="utf-8") as fh:
        for sp in bundle.speakers:
            fh.write(_dump_line({
                "speaker_id": sp.speaker_id,
                "attributes": {"gender": sp.attributes["gender"],
                               "age": sp.attributes["age"],
                               "style": sorted(sp.attributes.get("style", []))},
                "utterances": [[float(x) for x in u] for u in sp.utterances],
            }))
    with open(os.path.join(out_dir, PROMPTS_FILE), "w", encoding="utf-8") as fh:
        for pr in bundle.prompts:
            fh.write(_dump_line({"speaker_id": pr.speaker_id,
                                 "annotator_id": pr.annotator_id,
                                 "text": pr.text}))
    meta: dict = {}
    if bundle.config is not None:
        meta["config"] = asdict(bundle.config)
    if bundle.centers is not None:
        meta["centers"] = {k: [float(x) for x in v] for k, v in bundle.centers.items()}
    if bundle.centroids is not None:
        meta["centroids"] = {k: [float(x) for x in v] for k, v in bundle.centroids.items()}
    if meta:
        with open(os.path.join(out_dir, META_FILE), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, ensure_ascii=False, indent=1)
            fh.write("\n")


def save_test_prompts(prompts: list[TestPrompt], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tp in prompts:
            fh.write(_dump_line({"prompt_id": tp.prompt_id, "text": tp.text,
                                 "attributes": tp.attributes}))


def load_test_prompts(path: str) -> list[TestPrompt]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path} line {lineno}: not valid JSON") from e
            for key in ("prompt_id", "text", "attributes"):
                if key not in rec:
                    raise CorpusFormatError(f"{path} line {lineno}: missing field {key!r}")
            out.append(TestPrompt(rec["prompt_id"], rec["text"], rec["attributes"]))
    if not out:
        raise EmptyCorpusError(f"{path}: no test prompts")
    return out


def _validate_attributes(attrs, where: str) -> dict:
    if not isinstance(attrs, dict):
        raise CorpusFormatError(f"{where}: attributes must be an object")
    for key in ("gender", "age"):
        if key not in attrs:
            raise CorpusFormatError(f"{where}: attributes missing {key!r}")
    if attrs["gender"] not in GENDERS:
        raise CorpusFormatError(f"{where}: unknown gender {attrs['gender']!r}")
    if attrs["age"] not in AGES:
        raise CorpusFormatError(f"{where}: unknown age {attrs['age']!r}")
    style = attrs.get("style", [])
    if not isinstance(style, list) or not all(isinstance(s, str) for s in style):
        raise CorpusFormatError(f"{where}: style must be a list of strings")
    extra = set(attrs) - {"gender", "age", "style"}
    if extra:
        raise CorpusFormatError(f"{where}: unknown attribute keys {sorted(extra)}")
    return {"gender": attrs["gender"], "age": attrs["age"], "style": sorted(style)}


def load_corpus(corpus_dir: str) -> tuple[list[SpeakerRecord], list[PromptRecord]]:
    """Read and validate speakers.jsonl and prompts.jsonl from a directory."""
    sp_path = os.path.join(corpus_dir, SPEAKERS_FILE)
    pr_path = os.path.join(corpus_dir, PROMPTS_FILE)
    speakers: list[SpeakerRecord] = []
    seen_ids: set[str] = set()
    dim: int | None = None
    with open(sp_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{sp_path} line {lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{where}: not valid JSON") from e
            if set(rec) != {"speaker_id", "attributes", "utterances"}:
                raise CorpusFormatError(f"{where}: speaker record must have exactly "
                                        "speaker_id, attributes, utterances")
            sid = rec["speaker_id"]
            if not isinstance(sid, str) or not sid:
                raise CorpusFormatError(f"{where}: speaker_id must be a nonempty string")
            if sid in seen_ids:
                raise CorpusFormatError(f"{where}: duplicate speaker_id {sid!r}")
            seen_ids.add(sid)
            attrs = _validate_attributes(rec["attributes"], where)
            utts = rec["utterances"]
            if not isinstance(utts, list) or len(utts) < 2:
                raise CorpusFormatError(f"{where}: speaker {sid!r} needs >= 2 utterances")
            lengths = {len(u) if isinstance(u, list) else -1 for u in utts}
            if len(lengths) != 1 or -1 in lengths:
                raise CorpusFormatError(f"{where}: speaker {sid!r} has ragged utterances")
            this_dim = lengths.pop()
            if dim is None:
                dim = this_dim
            elif this_dim != dim:
                raise CorpusFormatError(
                    f"{where}: speaker {sid!r} has {this_dim}-dim utterances in a {dim}-dim corpus")
            try:
                arr = np.asarray(utts, dtype=np.float64)
            except (TypeError, ValueError) as e:
                raise CorpusFormatError(f"{where}: non-numeric utterance values") from e
            if not np.all(np.isfinite(arr)):
                raise CorpusFormatError(f"{where}: non-finite utterance values")
            speakers.append(SpeakerRecord(sid, attrs, arr))
    if not speakers:
        raise EmptyCorpusError(f"{sp_path}: no speakers")

    prompts: list[PromptRecord] = []
    prompted: set[str] = set()
    with open(pr_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{pr_path} line {lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{where}: not valid JSON") from e
            if set(rec) != {"speaker_id", "annotator_id", "text"}:
                raise CorpusFormatError(f"{where}: prompt record must have exactly "
                                        "speaker_id, annotator_id, text")
            sid = rec["speaker_id"]
            if sid not in seen_ids:
                raise CorpusFormatError(f"{where}: prompt references unknown speaker {sid!r}")
            aid = rec["annotator_id"]
            if not isinstance(aid, int) or not 1 <= aid <= 13:
                raise CorpusFormatError(f"{where}: annotator_id must be in 1..13")
            if not isinstance(rec["text"], str) or not rec["text"].strip():
                raise CorpusFormatError(f"{where}: text must be a nonempty string")
            prompted.add(sid)
            prompts.append(PromptRecord(sid, aid, rec["text"]))
    if not prompts:
        raise EmptyCorpusError(f"{pr_path}: no prompts")
    unprompted = seen_ids - prompted
    if unprompted:
        raise CorpusFormatError(f"{pr_path}: speakers without prompts: "
                                f"{sorted(unprompted)[:5]}")
    return speakers, prompts


def load_corpus_bundle(corpus_dir: str) -> CorpusBundle:
    """Corpus plus optional metadata (noiseless centers, combo centroids)."""
    speakers, prompts = load_corpus(corpus_dir)
    centers = centroids = cfg = None
    meta_path = os.path.join(corpus_dir, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if "centers" in meta:
            centers = {k: np.asarray(v, dtype=np.float64) for k, v in meta["centers"].items()}
        if "centroids" in meta:
            centroids = {k: np.asarray(v, dtype=np.float64) for k, v in meta["centroids"].items()}
        if "config" in meta:
            cfg = CorpusConfig(**meta["config"])
    return CorpusBundle(speakers, prompts, centers, centroids, cfg)
