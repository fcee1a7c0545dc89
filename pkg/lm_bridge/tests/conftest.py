import json
import string

import numpy as np
import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizerFast

VOCAB = (
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    + list(string.ascii_lowercase)
    + [f"##{c}" for c in string.ascii_lowercase]
    + list(string.digits)
    + [f"##{d}" for d in string.digits]
)


@pytest.fixture(scope="session")
def tiny_base_model(tmp_path_factory):
    """A small randomly initialized masked-LM checkpoint saved locally, so
    tests never touch a model hub."""
    path = tmp_path_factory.mktemp("tiny_bert")
    vocab_file = path / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n")
    tokenizer = BertTokenizerFast(vocab_file=str(vocab_file), do_lower_case=True)
    torch.manual_seed(7)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    model = BertModel(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


def write_corpus(path, n_utts, seed, n_tokens=12, min_len=4, max_len=8):
    """A small corpus file in the interchange format: y = effect(token) + noise,
    written into the pitch/energy/prominence columns."""
    rng = np.random.default_rng(seed)
    tokens = [f"tok{chr(ord('a') + i)}" for i in range(n_tokens)]
    effects = rng.standard_normal(n_tokens)
    with open(path, "w", encoding="utf-8") as fh:
        for ui in range(n_utts):
            length = int(rng.integers(min_len, max_len + 1))
            onset = 0.0
            for pos in range(length):
                t = int(rng.integers(0, n_tokens))
                y = float(effects[t] + 0.3 * rng.standard_normal())
                offset = onset + 0.3
                row = {
                    "utterance_id": f"u{ui:04d}",
                    "speaker_id": "spk",
                    "position": pos,
                    "token": tokens[t],
                    "onset_s": onset,
                    "offset_s": offset,
                    "syllables": 1,
                    "pitch": y,
                    "energy": y,
                    "prominence": y,
                }
                fh.write(json.dumps(row) + "\n")
                onset = offset + 0.05
    return path
