"""Shared fixtures: a tiny frozen BERT checkpoint and real prompt texts."""

import os

import pytest

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")

# natural voice descriptions; every word is in the tiny model's vocabulary
REAL_PROMPTS = [
    "a calm young woman voice",
    "a lively old man voice",
    "the gentle voice of a child",
    "a serious middle aged male speaker",
    "an energetic young girl talking quickly",
    "a deep slow male voice with a warm tone",
    "a soft spoken elderly woman",
    "the bright clear voice of a young boy",
    "a stern adult female announcer",
    "a relaxed low male narrator",
    "a cheerful high pitched child speaker",
    "an old man speaking in a rough quiet voice",
]

_WORDS = sorted({w for p in REAL_PROMPTS for w in p.split()})
_VOCAB = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + _WORDS + [
    "##s", "##ly", "##ing", "##ed"]


@pytest.fixture(scope="session")
def real_prompts():
    return list(REAL_PROMPTS)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A small BERT checkpoint with fixed random weights, saved to disk.

    The exporter only needs a loadable frozen encoder; seeded random weights
    stand in for a downloaded pretrained model, which the test environment
    cannot fetch.
    """
    import torch
    from transformers import BertConfig, BertModel, BertTokenizer

    try:
        from transformers.utils import logging as hf_logging
        hf_logging.set_verbosity_error()
        hf_logging.disable_progress_bar()
    except (ImportError, AttributeError):
        pass

    root = tmp_path_factory.mktemp("tinybert")
    vocab_path = root / "vocab.txt"
    vocab_path.write_text("\n".join(_VOCAB) + "\n", encoding="utf-8")
    tokenizer = BertTokenizer(str(vocab_path), do_lower_case=True)
    tokenizer.save_pretrained(str(root))

    torch.manual_seed(20260815)
    cfg = BertConfig(vocab_size=len(_VOCAB), hidden_size=32,
                     num_hidden_layers=2, num_attention_heads=2,
                     intermediate_size=64, max_position_embeddings=32)
    BertModel(cfg).save_pretrained(str(root))
    return str(root)


@pytest.fixture(scope="session")
def exported_file(tiny_model_dir, real_prompts, tmp_path_factory):
    """REAL_PROMPTS run through the exporter once, shared across tests."""
    from embed_export.export import export_token_embeddings

    root = tmp_path_factory.mktemp("export")
    prompts_path = root / "prompts.txt"
    prompts_path.write_text("\n".join(real_prompts) + "\n", encoding="utf-8")
    out_path = root / "embeddings.jsonl"
    n = export_token_embeddings(tiny_model_dir, str(prompts_path), str(out_path))
    assert n == len(real_prompts)
    return str(out_path)
