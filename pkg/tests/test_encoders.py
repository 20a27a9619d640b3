from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dstrack import autodiff as ad
from dstrack import encoders as enc
from dstrack import schema as sch
from dstrack import text as tx
from dstrack.optim import Adam

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def schemas():
    return sch.load_schemas(FIXTURES / "sgd_schema_sample.json")


@pytest.fixture(scope="module")
def table(schemas):
    return sch.enumerate_elements(schemas)


def build_vocab(schemas):
    texts = ["i want to rent a place in campbell", "two bedrooms would be fine"]
    for s in schemas:
        texts.append(s.description)
        texts.extend(i.description for i in s.intents)
        for sl in s.slots:
            texts.append(sl.description)
            texts.extend(sl.possible_values)
    return tx.Vocabulary.build(texts)


@pytest.fixture(scope="module")
def vocab(schemas):
    return build_vocab(schemas)


def make_utt_encoder(vocab, kind=enc.SELF_ATTENTION, seed=0, hidden=16):
    ps = ad.ParamSet(seed=seed)
    cfg = enc.EncoderConfig(vocab_size=len(vocab), hidden=hidden, layers=2, heads=4, max_len=64, kind=kind)
    return ps, enc.UtteranceEncoder(ps, "utt", cfg, vocab)


def make_schema_encoder(vocab, seed=0, hidden=16):
    ps = ad.ParamSet(seed=seed)
    cfg = enc.EncoderConfig(vocab_size=len(vocab), hidden=hidden, layers=1, heads=2, max_len=64)
    return ps, enc.SchemaEncoder(ps, "sch", cfg, vocab)


def test_output_shape_is_hidden_by_n(vocab):
    _, encoder = make_utt_encoder(vocab)
    tokens = [tx.CLS, "rent", "in", "campbell", tx.SEP]
    out = encoder(tokens)
    assert out.data.shape == (16, 5)


def test_token_permutation_changes_representation(vocab):
    _, encoder = make_utt_encoder(vocab)
    a = encoder([tx.CLS, "rent", "in", "campbell", tx.SEP]).data
    b = encoder([tx.CLS, "campbell", "in", "rent", tx.SEP]).data
    assert not np.allclose(a, b)  # position encoding is active


def test_eval_mode_deterministic(vocab):
    _, encoder = make_utt_encoder(vocab)
    tokens = [tx.CLS, "two", "bedrooms", tx.SEP]
    a = encoder(tokens).data
    b = encoder(tokens).data
    np.testing.assert_array_equal(a, b)


def test_overlong_input_rejected(vocab):
    _, encoder = make_utt_encoder(vocab)
    with pytest.raises(ValueError, match="max_len"):
        encoder([tx.CLS] + ["rent"] * 80 + [tx.SEP])


def test_bilstm_drop_in_shape_compatible(vocab):
    _, encoder = make_utt_encoder(vocab, kind=enc.BILSTM)
    out = encoder([tx.CLS, "rent", "in", "campbell", tx.SEP])
    assert out.data.shape == (16, 5)


def test_schema_embeddings_shape(vocab, table):
    _, encoder = make_schema_encoder(vocab)
    emb, toks = encoder(table)
    assert emb.data.shape == (16, len(table))
    assert toks is None
    emb2, toks2 = encoder(table, keep_tokens=True)
    assert len(toks2) == len(table)
    np.testing.assert_array_equal(emb.data, emb2.data)


def test_identical_description_pairs_identical_columns(vocab):
    raw = """[
      {"service_name": "A", "description": "same words here",
       "intents": [{"name": "x", "description": "do the thing"},
                    {"name": "y", "description": "do the thing"}],
       "slots": []}
    ]"""
    schemas = sch.parse_schemas(raw)
    table = sch.enumerate_elements(schemas)
    _, encoder = make_schema_encoder(vocab)
    emb, _ = encoder(table)
    np.testing.assert_array_equal(emb.data[:, 0], emb.data[:, 1])


def test_unseen_service_encodes_deterministically(vocab, schemas):
    # new service, frozen parameters: structural zero-shot requirement
    _, encoder = make_schema_encoder(vocab)
    unseen = sch.parse_schemas(
        """[{"service_name": "Flights_9", "description": "book plane tickets",
             "intents": [{"name": "Search", "description": "find a flight"}],
             "slots": [{"name": "origin", "description": "city of departure",
                         "is_categorical": false, "possible_values": []}]}]"""
    )
    t = sch.enumerate_elements(unseen)
    a, _ = encoder(t)
    b, _ = encoder(t)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.data.shape == (16, 2)


def test_cache_bitwise_equal_and_counts(vocab, table):
    ps, encoder = make_schema_encoder(vocab)
    cache = enc.SchemaCache(encoder, ps)
    with ad.no_grad():
        direct, _ = encoder(table)
    for _ in range(10):  # ten turns, one encoding
        emb, _ = cache.get(table)
        np.testing.assert_array_equal(emb, direct.data)
    assert cache.encode_calls == 1


def test_cache_invalidated_on_parameter_update(vocab, table):
    ps, encoder = make_schema_encoder(vocab)
    cache = enc.SchemaCache(encoder, ps)
    before, _ = cache.get(table)
    opt = Adam(ps, lr=0.5)
    ps.zero_grad()
    for t in ps.tensors():
        t.grad += 1.0
    opt.step()
    after, _ = cache.get(table)
    assert cache.encode_calls == 2
    assert not np.array_equal(before, after)


def test_pinned_schema_stale_after_update(vocab, table):
    ps, encoder = make_schema_encoder(vocab)
    cache = enc.SchemaCache(encoder, ps)
    pin = cache.pin(table)
    _ = pin.embeddings
    ps.version += 1
    with pytest.raises(enc.StaleCacheError):
        _ = pin.embeddings


def test_segments_split_at_first_sep():
    tokens = [tx.CLS, "a", tx.SEP, "b", "c", tx.SEP]
    np.testing.assert_array_equal(enc.utterance_segments(tokens), [0, 0, 0, 1, 1, 1])


def test_element_input_layout():
    tokens, segs = enc.element_input(("find homes", "the area"), max_len=32)
    assert tokens == [tx.CLS, "find", "homes", tx.SEP, "the", "area", tx.SEP]
    np.testing.assert_array_equal(segs, [0, 0, 0, 0, 1, 1, 1])


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        enc.EncoderConfig(vocab_size=10, hidden=10, heads=4).validate()
    with pytest.raises(ValueError):
        enc.EncoderConfig(vocab_size=10, layers=0).validate()
    with pytest.raises(ValueError):
        enc.EncoderConfig(vocab_size=10, kind="gru").validate()
