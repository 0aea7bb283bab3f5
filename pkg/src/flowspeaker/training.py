"""Joint maximum-likelihood training of prompt encoder and flow.

Proposed mode: each utterance embedding x is pushed through the flow to
z = f(x) and scored under the prompt's Gaussian prior; the loss is the exact
change-of-variables negative log-likelihood -(logpdf(z; prior) + logdet f).
Encoder and flow train together with one Adam optimizer.

Baseline mode: the same encoder architecture regresses the prompt directly
onto the speaker-averaged d-vector with a mean-squared-error loss. No flow,
no sampling; one prompt maps to one point.

Checkpoints are versioned JSON holding every parameter as a decimal double,
so save -> load round trips are exact.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import prompt_prior as pp
from .corpus import PromptRecord, SpeakerRecord, speaker_dvector
from .numerics import LOG_2PI, RngStream

CHECKPOINT_MAGIC = "flowspeaker-ckpt"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(Exception):
    """Loss went NaN/inf; carries the failing step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class CorruptCheckpointError(Exception):
    """Checkpoint file unreadable or failing the magic/schema check."""


class UnsupportedVersionError(Exception):
    """Checkpoint version newer than this code understands."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 12
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 0.7        # default sampling temperature, echoed to users
    seed: int = 0
    mode: str = "proposed"          # or "baseline"
    flow_blocks: int = 12
    coupling_hidden: int | None = None
    log_every: int = 100
    encoder: pp.PromptEncoderConfig = field(default_factory=pp.PromptEncoderConfig)

    def validate(self) -> None:
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ValueError("train config: steps must be an integer >= 1")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ValueError("train config: batch_size must be an integer >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("train config: learning_rate must be >= 0")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"train config: {name} must be in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("train config: adam_eps must be positive")
        if self.temperature < 0:
            raise ValueError("train config: temperature must be >= 0")
        if self.mode not in ("proposed", "baseline"):
            raise ValueError(f"train config: unknown mode {self.mode!r}")
        if not isinstance(self.flow_blocks, int) or self.flow_blocks < 1:
            raise ValueError("train config: flow_blocks must be an integer >= 1")
        if self.coupling_hidden is not None and (
                not isinstance(self.coupling_hidden, int) or self.coupling_hidden < 1):
            raise ValueError("train config: coupling_hidden must be an integer >= 1")
        if not isinstance(self.log_every, int) or self.log_every < 1:
            raise ValueError("train config: log_every must be an integer >= 1")
        if not isinstance(self.seed, int):
            raise ValueError("train config: seed must be an integer")
        self.encoder.validate()


@dataclass
class ModelParams:
    """Everything the loss touches; flow is None in baseline mode."""
    encoder: pp.PromptEncoderParams
    flow: fl.FlowParameters | None = None


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)   # leaf path -> first moment
    v: dict = field(default_factory=dict)   # leaf path -> second moment


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    vocab: list[str]
    dim: int
    params: ModelParams
    opt: AdamState
    step: int
    loss_trace: list[float]

    @property
    def mode(self) -> str:
        return self.config.mode


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def gaussian_logpdf_ad(x, mean, logvar):
    """Diagonal-Gaussian log-density, differentiable through all three args."""
    diff = ad.add(x, ad.mul(mean, -1.0))
    quad = ad.mul(ad.mul(diff, diff), ad.exp(ad.mul(logvar, -1.0)))
    return ad.mul(ad.sum_(ad.add(ad.add(quad, logvar), LOG_2PI), axis=-1), -0.5)


def nll_loss(z, prior: pp.GaussianPrior, logdet):
    """Change-of-variables negative log-likelihood -(logpdf(z) + logdet)."""
    zd = ad.value_of(z).shape[-1]
    md = ad.value_of(prior.mean).shape[-1]
    if zd != md:
        raise ValueError(f"nll_loss: z dim {zd} != prior dim {md}")
    return ad.mul(ad.add(gaussian_logpdf_ad(z, prior.mean, prior.logvar), logdet), -1.0)


def _batch_loss(batch: list[tuple[np.ndarray, pp.PromptTokens]], params: ModelParams,
                mode: str):
    """Mean loss over one batch; batch items are (target vector, tokens).

    In proposed mode the target is an utterance embedding; in baseline mode
    it is the speaker d-vector the regressor should hit. Priors for repeated
    token sequences inside the batch are computed once.
    """
    cache: dict[tuple[int, ...], pp.GaussianPrior] = {}
    priors = []
    for _, tokens in batch:
        key = tuple(tokens.token_ids)
        if key not in cache:
            cache[key] = pp.encode_prompt(tokens, params.encoder)
        priors.append(cache[key])
    targets = np.stack([t for t, _ in batch])
    means = ad.stack_rows([p.mean for p in priors])
    if mode == "baseline":
        diff = ad.add(targets, ad.mul(means, -1.0))
        return ad.mean_(ad.mul(diff, diff))
    logvars = ad.stack_rows([p.logvar for p in priors])
    z, logdet = fl.flow_forward(targets, params.flow)
    per_sample = nll_loss(z, pp.GaussianPrior(means, logvars), logdet)
    return ad.mean_(per_sample)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_update(params, grads: dict[str, np.ndarray], state: AdamState,
                cfg: TrainConfig):
    """One Adam step; returns (new params tree, new state), inputs untouched."""
    new_params = copy.deepcopy(params)
    leaves = dict(ad.tree_leaves(new_params))
    t = state.step + 1
    new_m, new_v = {}, {}
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for path, leaf in leaves.items():
        g = grads[path]
        m = cfg.beta1 * state.m.get(path, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(path, 0.0) + (1.0 - cfg.beta2) * g * g
        new_m[path] = m
        new_v[path] = v
        leaf -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def train_step(batch: list[tuple[np.ndarray, pp.PromptTokens]], params: ModelParams,
               opt_state: AdamState, cfg: TrainConfig):
    """One optimization step over a batch; returns (params', state', loss)."""
    lifted = ad.lift(params)
    loss = _batch_loss(batch, lifted, cfg.mode)
    loss_val = float(ad.value_of(loss))
    if not math.isfinite(loss_val):
        raise TrainingDivergedError(opt_state.step, f"non-finite loss {loss_val}")
    loss.backward()
    grads = ad.grads_of(lifted)
    new_params, new_state = adam_update(params, grads, opt_state, cfg)
    return new_params, new_state, loss_val


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _draw_batch(prompts: list[PromptRecord], by_speaker: dict[str, SpeakerRecord],
                targets: dict[str, np.ndarray], params: ModelParams,
                rng: RngStream, cfg: TrainConfig):
    batch = []
    for _ in range(cfg.batch_size):
        pr = prompts[int(rng.integers(1, len(prompts))[0])]
        tokens = pp.PromptTokens(
            token_ids=pr.token_ids,
            embeddings=ad.take(params.encoder.token_table,
                               (np.asarray(pr.token_ids, dtype=np.int64),)),
            source="internal-table")
        if cfg.mode == "baseline":
            target = targets[pr.speaker_id]
        else:
            sp = by_speaker[pr.speaker_id]
            u = int(rng.integers(1, sp.utterances.shape[0])[0])
            target = sp.utterances[u]
        batch.append((target, tokens))
    return batch


def train(corpus: tuple[list[SpeakerRecord], list[PromptRecord]], cfg: TrainConfig,
          progress=None) -> Checkpoint:
    """Train from scratch on (speakers, prompts); deterministic in cfg.seed."""
    cfg.validate()
    speakers, prompts = corpus
    if not speakers or not prompts:
        raise ValueError("train: corpus must contain speakers and prompts")
    dim = speakers[0].utterances.shape[1]
    if cfg.encoder.semantic_dim != dim:
        raise ValueError(f"train config: encoder semantic_dim {cfg.encoder.semantic_dim} "
                         f"!= corpus dim {dim}")
    if cfg.mode == "proposed" and dim % 2 != 0:
        raise ValueError("train: flow needs an even corpus dim")

    vocab = pp.build_vocab([p.text for p in prompts])
    prompts = [PromptRecord(p.speaker_id, p.annotator_id, p.text,
                            pp.encode_token_ids(p.text, vocab))
               for p in prompts]
    by_speaker = {s.speaker_id: s for s in speakers}
    targets = {s.speaker_id: speaker_dvector(s.utterances) for s in speakers}

    root = RngStream(cfg.seed)
    enc = pp.init_encoder_params(cfg.encoder, vocab.size, root.spawn("encoder"))
    flow_params = None
    if cfg.mode == "proposed":
        flow_params = fl.init_flow_params(dim, cfg.flow_blocks, root.spawn("flow"),
                                          cfg.coupling_hidden)
    params = ModelParams(encoder=enc, flow=flow_params)
    opt = AdamState()
    batch_rng = root.spawn("batches")
    trace: list[float] = []
    for step in range(cfg.steps):
        batch = _draw_batch(prompts, by_speaker, targets, params, batch_rng, cfg)
        if step == 0 and cfg.mode == "proposed":
            fl.initialize_actnorms(params.flow, np.stack([t for t, _ in batch]))
        params, opt, loss = train_step(batch, params, opt, cfg)
        trace.append(loss)
        if progress is not None and (step + 1) % cfg.log_every == 0:
            progress(step + 1, loss)
    return Checkpoint(version=CHECKPOINT_VERSION, config=cfg, vocab=vocab.tokens,
                      dim=dim, params=params, opt=opt, step=cfg.steps, loss_trace=trace)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def prior_for_text(ckpt: Checkpoint, text: str) -> pp.GaussianPrior:
    vocab = pp.Vocabulary(ckpt.vocab, {t: i for i, t in enumerate(ckpt.vocab)})
    tokens = pp.internal_tokens(text, vocab, ckpt.params.encoder.token_table)
    return pp.encode_prompt(tokens, ckpt.params.encoder)


def generate_embeddings(ckpt: Checkpoint, text: str, n: int, temperature: float,
                        rng: RngStream) -> np.ndarray:
    """Prompt -> (n, dim) speaker embeddings.

    Proposed mode samples the prior n times and inverts the flow; baseline
    mode has no sampling and returns its single regression point as (1, dim).
    """
    if n < 1:
        raise ValueError("generate_embeddings: n must be >= 1")
    prior = prior_for_text(ckpt, text)
    if ckpt.mode == "baseline":
        return ad.value_of(prior.mean)[None, :].copy()
    # invert one sample at a time: identical draws (temperature 0) must map to
    # bit-identical embeddings, which batched BLAS kernels do not guarantee
    return np.stack([fl.flow_inverse(pp.sample_prior(prior, temperature, rng),
                                     ckpt.params.flow) for _ in range(n)])


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def _f64_out(a: np.ndarray):
    return np.asarray(a, dtype=np.float64).tolist()


def _f64_in(v, shape=None) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if shape is not None:
        a = a.reshape(shape)
    return a


def _encoder_to_json(p: pp.PromptEncoderParams) -> dict:
    return {
        "token_table": _f64_out(p.token_table),
        "input_w": _f64_out(p.input_w),
        "input_b": _f64_out(p.input_b),
        "fft_blocks": [{
            "wq": _f64_out(b.attn.wq), "wk": _f64_out(b.attn.wk),
            "wv": _f64_out(b.attn.wv), "wo": _f64_out(b.attn.wo),
            "n_heads": b.attn.n_heads,
            "w1": _f64_out(b.w1), "b1": _f64_out(b.b1),
            "w2": _f64_out(b.w2), "b2": _f64_out(b.b2),
        } for b in p.fft_blocks],
        "gru": {k: _f64_out(getattr(p.gru, k))
                for k in ("wr", "wz", "wn", "ur", "uz", "un",
                          "bwr", "bwz", "bwn", "bur", "buz", "bun")},
        "style_tokens": _f64_out(p.token_attn.style_tokens),
        "attn_wq": _f64_out(p.token_attn.wq),
        "attn_wk": _f64_out(p.token_attn.wk),
        "head_w": _f64_out(p.head_w),
        "head_b": _f64_out(p.head_b),
        "semantic_dim": p.semantic_dim,
    }


def _encoder_from_json(d: dict) -> pp.PromptEncoderParams:
    blocks = [pp.FFTBlockParams(
        attn=pp.AttentionParams(wq=_f64_in(b["wq"]), wk=_f64_in(b["wk"]),
                                wv=_f64_in(b["wv"]), wo=_f64_in(b["wo"]),
                                n_heads=int(b["n_heads"])),
        w1=_f64_in(b["w1"]), b1=_f64_in(b["b1"]),
        w2=_f64_in(b["w2"]), b2=_f64_in(b["b2"]),
    ) for b in d["fft_blocks"]]
    return pp.PromptEncoderParams(
        token_table=_f64_in(d["token_table"]),
        input_w=_f64_in(d["input_w"]),
        input_b=_f64_in(d["input_b"]),
        fft_blocks=blocks,
        gru=pp.GruParams(**{k: _f64_in(v) for k, v in d["gru"].items()}),
        token_attn=pp.TokenAttentionParams(
            style_tokens=_f64_in(d["style_tokens"]),
            wq=_f64_in(d["attn_wq"]), wk=_f64_in(d["attn_wk"])),
        head_w=_f64_in(d["head_w"]),
        head_b=_f64_in(d["head_b"]),
        semantic_dim=int(d["semantic_dim"]),
    )


def _flow_to_json(p: fl.FlowParameters) -> dict:
    return {"dim": p.dim, "blocks": [{
        "actnorm": {"log_scale": _f64_out(b.actnorm.log_scale),
                    "bias": _f64_out(b.actnorm.bias),
                    "initialized": bool(b.actnorm.initialized)},
        "invlinear": {"perm": np.asarray(b.invlinear.perm).tolist(),
                      "lower": _f64_out(b.invlinear.lower),
                      "upper_strict": _f64_out(b.invlinear.upper_strict),
                      "log_s": _f64_out(b.invlinear.log_s),
                      "sign_s": np.asarray(b.invlinear.sign_s).tolist()},
        "coupling": {k: _f64_out(getattr(b.coupling, k))
                     for k in ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")}
                    | {"swap": bool(b.coupling.swap)},
    } for b in p.blocks]}


def _flow_from_json(d: dict) -> fl.FlowParameters:
    blocks = []
    for b in d["blocks"]:
        coupling_fields = {k: _f64_in(b["coupling"][k])
                           for k in ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")}
        blocks.append(fl.FlowBlockParams(
            actnorm=fl.ActNormParams(log_scale=_f64_in(b["actnorm"]["log_scale"]),
                                     bias=_f64_in(b["actnorm"]["bias"]),
                                     initialized=bool(b["actnorm"]["initialized"])),
            invlinear=fl.InvLinearParams(
                perm=np.asarray(b["invlinear"]["perm"], dtype=np.int64),
                lower=_f64_in(b["invlinear"]["lower"]),
                upper_strict=_f64_in(b["invlinear"]["upper_strict"]),
                log_s=_f64_in(b["invlinear"]["log_s"]),
                sign_s=np.asarray(b["invlinear"]["sign_s"], dtype=np.int8)),
            coupling=fl.CouplingParams(**coupling_fields, swap=bool(b["coupling"]["swap"])),
        ))
    return fl.FlowParameters(blocks=blocks, dim=int(d["dim"]))


def _opt_to_json(s: AdamState) -> dict:
    return {"step": s.step,
            "m": {k: _f64_out(v) for k, v in s.m.items()},
            "v": {k: _f64_out(v) for k, v in s.v.items()}}


def _opt_from_json(d: dict, params: ModelParams) -> AdamState:
    shapes = {path: ad.value_of(leaf).shape for path, leaf in ad.tree_leaves(params)}
    return AdamState(step=int(d["step"]),
                     m={k: _f64_in(v, shapes.get(k)) for k, v in d["m"].items()},
                     v={k: _f64_in(v, shapes.get(k)) for k, v in d["v"].items()})


def checkpoint_to_json(ckpt: Checkpoint) -> dict:
    return {
        "magic": CHECKPOINT_MAGIC,
        "version": ckpt.version,
        "config": asdict(ckpt.config),
        "vocab": list(ckpt.vocab),
        "dim": ckpt.dim,
        "encoder": _encoder_to_json(ckpt.params.encoder),
        "flow": None if ckpt.params.flow is None else _flow_to_json(ckpt.params.flow),
        "opt": _opt_to_json(ckpt.opt),
        "step": ckpt.step,
        "loss_trace": [float(x) for x in ckpt.loss_trace],
    }


def checkpoint_from_json(d: dict) -> Checkpoint:
    if not isinstance(d, dict) or d.get("magic") != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("missing or wrong checkpoint magic")
    if d.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {d.get('version')!r} "
                                      f"(supported: {CHECKPOINT_VERSION})")
    required = {"config", "vocab", "dim", "encoder", "flow", "opt", "step", "loss_trace"}
    missing = required - set(d)
    if missing:
        raise CorruptCheckpointError(f"checkpoint missing fields {sorted(missing)}")
    try:
        cfg_d = dict(d["config"])
        enc_cfg = pp.PromptEncoderConfig(**cfg_d.pop("encoder"))
        cfg = TrainConfig(encoder=enc_cfg, **cfg_d)
        params = ModelParams(
            encoder=_encoder_from_json(d["encoder"]),
            flow=None if d["flow"] is None else _flow_from_json(d["flow"]))
        return Checkpoint(version=int(d["version"]), config=cfg,
                          vocab=list(d["vocab"]), dim=int(d["dim"]), params=params,
                          opt=_opt_from_json(d["opt"], params), step=int(d["step"]),
                          loss_trace=[float(x) for x in d["loss_trace"]])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptCheckpointError(f"malformed checkpoint: {e}") from e


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_json(ckpt), fh, ensure_ascii=False)
        fh.write("\n")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"{path}: not valid JSON ({e})") from e
    return checkpoint_from_json(d)


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    return checkpoint_to_json(a) == checkpoint_to_json(b)
