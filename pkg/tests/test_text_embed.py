import struct

import pytest
import torch

from modules.errors import ConfigError, SchemaError
from modules.text_embed import (EMBEDDING_MAGIC, PseudoToken, Vocabulary, assemble_prompt, edit_embedding,
                                init_pseudo_token, load_embedding, pooled, save_embedding, text_delta)


@pytest.fixture
def vocab():
    return Vocabulary.build(dim=8, seed=0)


def test_vocabulary_is_seeded_and_serializable(vocab):
    assert vocab.state_hash() == Vocabulary.build(dim=8, seed=0).state_hash()
    assert vocab.state_hash() != Vocabulary.build(dim=8, seed=1).state_hash()
    assert Vocabulary.from_dict(vocab.to_dict()).state_hash() == vocab.state_hash()
    with pytest.raises(ConfigError):
        vocab.index("zebra")


def test_init_copies_the_init_word(vocab):
    token = init_pseudo_token("object", 5, vocab)
    assert token.vectors.shape == (5, 8)
    assert all(torch.equal(row, vocab["object"]) for row in token.vectors)
    with pytest.raises(ConfigError):
        init_pseudo_token("object", 0, vocab)


def test_prompt_expands_the_pseudo_slot(vocab):
    token = init_pseudo_token("object", 3, vocab, name="S*")
    prompt = assemble_prompt(["a", "photo", "of", "S*", "in", "van", "gogh", "style"], token, vocab)
    assert len(prompt) == 10
    assert prompt.token_labels[3:6] == ("S*", "S*", "S*")
    assert prompt.positions("van") == [7]
    assert torch.equal(prompt.vectors[0], vocab["a"])


def test_prompt_gradient_reaches_only_the_token(vocab):
    token = init_pseudo_token("object", 2, vocab)
    token.vectors.requires_grad_(True)
    assemble_prompt(["a", "S*"], token, vocab).vectors.sum().backward()
    assert torch.equal(token.vectors.grad, torch.ones(2, 8))
    assert vocab.table.grad is None


def test_prompt_errors(vocab):
    token = init_pseudo_token("object", 2, vocab)
    with pytest.raises(ConfigError):
        assemble_prompt(["S*", "and", "S*"], token, vocab)
    with pytest.raises(ConfigError):
        assemble_prompt(["a", "zebra"], token, vocab)
    with pytest.raises(ConfigError):
        assemble_prompt([], token, vocab)


def test_text_delta_of_equal_words_is_zero(vocab):
    assert torch.equal(text_delta(["red"], ["red"], vocab), torch.zeros(8))
    expected = pooled(["van", "gogh"], vocab) - vocab["object"]
    assert torch.equal(text_delta(["van", "gogh"], ["object"], vocab), expected)


def _dyadic_token():
    # multiples of 1/16 keep every sum below exactly representable
    vectors = torch.arange(24, dtype=torch.float32).reshape(3, 8) / 16
    return PseudoToken("S*", vectors, True, "object")


def test_edit_identities():
    z = _dyadic_token()
    delta = torch.full((8,), 0.125)
    before = z.vectors.clone()
    assert torch.equal(edit_embedding(z, delta, 0.0).vectors, z.vectors)
    assert torch.equal(edit_embedding(z, torch.zeros(8), 3.0).vectors, z.vectors)
    twice = edit_embedding(edit_embedding(z, delta, 0.5), delta, 0.25)
    assert torch.equal(twice.vectors, edit_embedding(z, delta, 0.75).vectors)
    assert twice.metadata["edit_lambda"] == 0.75
    assert torch.equal(z.vectors, before)
    with pytest.raises(ConfigError):
        edit_embedding(z, torch.zeros(5), 1.0)


def test_chained_edits_sum_their_lambdas_exactly():
    gen = torch.Generator().manual_seed(5)
    z = PseudoToken("S*", torch.randn(4, 8, generator=gen), True, "object")
    delta = torch.randn(8, generator=gen)
    for a, b in [(0.3, 0.7), (0.1, 0.2), (-1.3, 0.45), (2.0 / 3.0, 1e-3)]:
        chained = edit_embedding(edit_embedding(z, delta, a), delta, b)
        assert torch.equal(chained.vectors, edit_embedding(z, delta, a + b).vectors)
    three = edit_embedding(edit_embedding(edit_embedding(z, delta, 0.1), delta, 0.2), delta, 0.3)
    assert torch.equal(three.vectors, edit_embedding(z, delta, 0.1 + 0.2 + 0.3).vectors)
    other = torch.randn(8, generator=gen)
    mixed = edit_embedding(edit_embedding(z, delta, 0.5), other, 0.5)
    assert torch.allclose(mixed.vectors, z.vectors + 0.5 * delta + 0.5 * other, atol=1e-6)
    assert torch.equal(edit_embedding(z, delta, 0.7).clone().edit_origin[0], z.vectors)


def test_embedding_file_round_trip(tmp_path, vocab):
    token = init_pseudo_token("object", 4, vocab, name="<obj>")
    token.vectors += torch.linspace(-1, 1, 32).reshape(4, 8)
    path = save_embedding(token, tmp_path / "z.iv3d", {"mode": "3d"})
    raw = path.read_bytes()
    assert raw[:4] == EMBEDDING_MAGIC
    assert struct.unpack_from("<HII", raw, 4) == (1, 4, 8)
    loaded = load_embedding(path)
    assert torch.equal(loaded.vectors, token.vectors)
    assert loaded.name == "<obj>" and loaded.init_word == "object"
    assert loaded.metadata == {"mode": "3d"}


def test_embedding_file_rejects_garbage(tmp_path, vocab):
    path = save_embedding(init_pseudo_token("object", 2, vocab), tmp_path / "z.iv3d")
    truncated = tmp_path / "short.iv3d"
    truncated.write_bytes(path.read_bytes()[:20])
    with pytest.raises(SchemaError):
        load_embedding(truncated)
    wrong = tmp_path / "wrong.iv3d"
    wrong.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(SchemaError):
        load_embedding(wrong)


def test_embedding_file_with_damaged_metadata(tmp_path, vocab):
    raw = save_embedding(init_pseudo_token("object", 2, vocab), tmp_path / "z.iv3d").read_bytes()
    blob_start = 4 + struct.calcsize("<HII") + 4 * 2 * 8 + 4
    for name, payload in [("header.iv3d", raw[:9]), ("cut.iv3d", raw[:blob_start + 5]),
                          ("garbled.iv3d", raw[:blob_start] + b"\xff" * (len(raw) - blob_start)),
                          ("list.iv3d", raw[:blob_start - 4] + struct.pack("<I", 2) + b"[]")]:
        damaged = tmp_path / name
        damaged.write_bytes(payload)
        with pytest.raises(SchemaError):
            load_embedding(damaged)


def test_pseudo_token_rejects_bad_arrays():
    with pytest.raises(ConfigError):
        PseudoToken("S*", torch.zeros(0, 8))
    with pytest.raises(ConfigError):
        PseudoToken("S*", torch.full((2, 8), float("inf")))
