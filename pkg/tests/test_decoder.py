from __future__ import annotations

import json

import numpy as np
import pytest

from dstrack import autodiff as ad
from dstrack import decoder as dec
from dstrack import dialogue as dlg
from dstrack import schema as sch
from dstrack.autodiff import ParamSet, Tensor


def make_decoder(hidden=6, attn=6, seed=0, dtype=np.float64):
    ps = ParamSet(seed=seed, dtype=dtype)
    return ps, dec.StateDecoder(ps, "dec", hidden, attn)


def rand_reprs(hidden, n, m, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(hidden, n))), Tensor(rng.normal(size=(hidden, m)))


# ---------------------------------------------------------------------------
# additive attention


def test_attend_singleton_returns_the_value():
    ps, d = make_decoder()
    utt, _ = rand_reprs(6, 1, 1, 3)
    q = Tensor(np.random.default_rng(1).normal(size=(6, 1)))
    ctx = d.utt_attn(q, utt, utt)
    np.testing.assert_allclose(ctx.data, utt.data, atol=1e-12)


def test_attend_equal_keys_gives_mean_of_values():
    ps, d = make_decoder()
    rng = np.random.default_rng(2)
    key = rng.normal(size=(6, 1))
    keys = Tensor(np.repeat(key, 4, axis=1))
    values = Tensor(rng.normal(size=(6, 4)))
    q = Tensor(rng.normal(size=(6, 1)))
    ctx = d.utt_attn(q, keys, values)
    np.testing.assert_allclose(ctx.data[:, 0], values.data.mean(axis=1), atol=1e-12)


def test_attend_matches_scripted_oracle():
    ps, d = make_decoder(hidden=3, attn=3, seed=5)
    rng = np.random.default_rng(7)
    q = rng.normal(size=(3, 1))
    keys = rng.normal(size=(3, 3))
    values = rng.normal(size=(3, 3))
    got = d.utt_attn(Tensor(q), Tensor(keys), Tensor(values)).data

    v = d.utt_attn.v.data.reshape(-1)
    wq, wk = d.utt_attn.wq.data, d.utt_attn.wk.data
    scores = np.array([v @ np.tanh(wq @ q[:, 0] + wk @ keys[:, k]) for k in range(3)])
    w = np.exp(scores - scores.max())
    w /= w.sum()
    want = values @ w
    np.testing.assert_allclose(got[:, 0], want, atol=1e-10)


def test_attend_zero_keys_rejected():
    ps, d = make_decoder()
    q = Tensor(np.zeros((6, 1)))
    with pytest.raises(ad.ShapeError):
        d.utt_attn(q, Tensor(np.zeros((6, 0))), Tensor(np.zeros((6, 0))))


# ---------------------------------------------------------------------------
# decode step


def test_step_distribution_sums_to_one():
    ps, d = make_decoder(seed=3)
    utt, schm = rand_reprs(6, 5, 4, seed=9)
    cand = d.candidates(schm, utt)
    h, c = d.initial_state(utt)
    prev = ad.narrow(cand, 1, dlg.BOS, 1)
    _, _, dist = d.step_distribution(prev, h, c, utt, schm, cand)
    assert dist.data.shape == (1, dlg.N_MARKERS + 4 + 5)
    assert abs(dist.data.sum() - 1.0) < 1e-9
    assert np.all(dist.data >= 0)


def test_step_zero_scorer_gives_uniform():
    ps, d = make_decoder(seed=4)
    d.q.data[:] = 0.0
    utt, schm = rand_reprs(6, 3, 2, seed=1)
    cand = d.candidates(schm, utt)
    h, c = d.initial_state(utt)
    prev = ad.narrow(cand, 1, 0, 1)
    _, _, dist = d.step_distribution(prev, h, c, utt, schm, cand)
    w = dlg.N_MARKERS + 2 + 3
    np.testing.assert_allclose(dist.data, np.full((1, w), 1.0 / w), atol=1e-12)


def test_scorer_dominant_candidate_matches_scripted_softmax():
    # q^T tanh(U1 h + U2 k_w) with one k_w scaled so its score saturates
    rng = np.random.default_rng(0)
    hidden = 4
    q = np.full((hidden, 1), 5.0)
    u1 = np.zeros((hidden, hidden))
    u2 = np.eye(hidden)
    h = rng.normal(size=(hidden, 1))
    cand = rng.normal(size=(hidden, 5)) * 0.1
    cand[:, 2] = 1e3  # dominant candidate saturates tanh at +1
    scores = ad.additive_scores(Tensor(q), Tensor(u1 @ h), Tensor(u2 @ cand))
    want = np.array([[float(q.reshape(-1) @ np.tanh(u1 @ h[:, 0] + u2 @ cand[:, k])) for k in range(5)]])
    np.testing.assert_allclose(scores.data, want, atol=1e-10)
    probs = ad.softmax(scores, axis=1).data
    assert probs[0, 2] >= 0.99


def test_step_candidate_width_mismatch_rejected():
    ps, d = make_decoder()
    utt, schm = rand_reprs(6, 3, 2, seed=1)
    bad = Tensor(np.zeros((5, 9)))
    h, c = d.initial_state(utt)
    with pytest.raises(ad.ShapeError):
        d.step(ad.narrow(bad, 1, 0, 1), h, c, utt, schm, bad)


def test_step_grad_check_through_both_attention_paths():
    ps, d = make_decoder(hidden=5, attn=5, seed=8)
    rng = np.random.default_rng(11)
    utt = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    schm = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def loss_fn():
        cand = d.candidates(schm, utt)
        h, c = d.initial_state(utt)
        prev = ad.narrow(cand, 1, dlg.BOS, 1)
        total = []
        for target in (dlg.N_MARKERS + 1, dlg.N_MARKERS + 3 + 2, dlg.EOS):
            h, c, scores = d.step(prev, h, c, utt, schm, cand)
            logp = ad.pick(ad.log_softmax(scores, axis=1), (0, target))
            total.append(logp)
            prev = ad.narrow(cand, 1, target, 1)
        return ad.scale(ad.add_n(total), -1.0 / 3)

    tensors = [utt, schm] + ps.tensors()
    err = ad.grad_check(loss_fn, tensors, eps=1e-5, max_coords=180)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# beam search


def greedy_chain(d, utt, schm, max_len):
    with ad.no_grad():
        cand = d.candidates(schm, utt)
        h, c = d.initial_state(utt)
        ids = []
        prev = dlg.BOS
        for _ in range(max_len):
            h, c, scores = d.step(ad.narrow(cand, 1, prev, 1), h, c, utt, schm, cand)
            nxt = int(np.argmax(scores.data.reshape(-1)))
            ids.append(nxt)
            if nxt == dlg.EOS:
                break
            prev = nxt
    return ids


def test_beam_one_equals_greedy():
    for seed in range(5):
        ps, d = make_decoder(seed=seed)
        utt, schm = rand_reprs(6, 4, 3, seed=seed + 100)
        opts = dec.DecoderOptions(beam_size=1, max_len=6)
        assert dec.beam_search(d, utt, schm, opts) == greedy_chain(d, utt, schm, 6)


def test_beam_exhaustive_width_equals_enumeration_oracle():
    # pointer vocabulary of 6 (4 markers + M=1 + N=1), max_len 3
    for seed in range(50):
        ps, d = make_decoder(hidden=4, attn=4, seed=seed)
        utt, schm = rand_reprs(4, 1, 1, seed=seed + 500)
        opts = dec.DecoderOptions(beam_size=6**3, max_len=3)
        got = dec.beam_search(d, utt, schm, opts)
        want, _ = dec.enumerate_best_sequence(d, utt, schm, max_len=3)
        assert got == want, f"seed {seed}: beam {got} != enumeration {want}"


def test_beam_five_logp_at_least_beam_one():
    ps, d = make_decoder(seed=21)
    utt, schm = rand_reprs(6, 5, 4, seed=77)
    lp1 = dec.sequence_log_prob(d, utt, schm, dec.beam_search(d, utt, schm, dec.DecoderOptions(1, 8)))
    lp5 = dec.sequence_log_prob(d, utt, schm, dec.beam_search(d, utt, schm, dec.DecoderOptions(5, 8)))
    assert lp5 >= lp1 - 1e-12


def test_beam_rejects_degenerate_options():
    ps, d = make_decoder()
    utt, schm = rand_reprs(6, 2, 2)
    with pytest.raises(ValueError):
        dec.beam_search(d, utt, schm, dec.DecoderOptions(beam_size=0, max_len=4))
    with pytest.raises(ValueError):
        dec.beam_search(d, utt, schm, dec.DecoderOptions(beam_size=2, max_len=1))


def test_emitted_pointers_always_in_range():
    for seed in range(10):
        ps, d = make_decoder(seed=seed)
        n, m = 5, 3
        utt, schm = rand_reprs(6, n, m, seed=seed)
        ids = dec.beam_search(d, utt, schm, dec.DecoderOptions(beam_size=3, max_len=10))
        assert all(0 <= i < dlg.N_MARKERS + m + n for i in ids)


# ---------------------------------------------------------------------------
# grammar-constrained decoding


@pytest.fixture(scope="module")
def tiny_table():
    raw = [
        {
            "service_name": "S",
            "description": "svc",
            "intents": [{"name": "go", "description": "go"}],
            "slots": [
                {"name": "mode", "description": "mode", "is_categorical": True, "possible_values": ["a", "b"]},
                {"name": "place", "description": "place", "is_categorical": False, "possible_values": []},
            ],
        }
    ]
    return sch.enumerate_elements(sch.parse_schemas(json.dumps(raw)), include_dontcare=False)


def test_grammar_mask_start_state(tiny_table):
    mask = dec.grammar_mask([], tiny_table, n_tokens=4)
    m = len(tiny_table)
    assert mask[dlg.EOS]
    assert not mask[dlg.BOS] and not mask[dlg.PAIR_SEP] and not mask[dlg.VALUE_END]
    for el in tiny_table:
        expected = el.kind in (sch.INTENT, sch.SLOT)
        assert mask[dlg.N_MARKERS + el.index] == expected
    assert not mask[dlg.N_MARKERS + m :].any()


def test_grammar_mask_value_state(tiny_table):
    slot_idx = tiny_table.index_of(sch.SLOT, "S", "mode")
    mask = dec.grammar_mask([dlg.schema_ref(slot_idx).flat(len(tiny_table))], tiny_table, n_tokens=4)
    for el in tiny_table:
        expected = el.kind == sch.VALUE and el.owning_slot == "mode"
        assert mask[dlg.N_MARKERS + el.index] == expected
    assert mask[dlg.N_MARKERS + len(tiny_table) :].all()  # span start allowed anywhere


def test_grammar_mask_span_requires_contiguity(tiny_table):
    m = len(tiny_table)
    slot_idx = tiny_table.index_of(sch.SLOT, "S", "place")
    prefix = [dlg.schema_ref(slot_idx).flat(m), dlg.token_ref(1).flat(m)]
    mask = dec.grammar_mask(prefix, tiny_table, n_tokens=4)
    assert mask[dlg.VALUE_END]
    token_region = mask[dlg.N_MARKERS + m :]
    assert token_region[2] and token_region.sum() == 1  # only position 2 continues the span


def test_constrained_beam_takes_only_valid_transitions(tiny_table):
    for seed in range(8):
        ps, d = make_decoder(hidden=6, attn=6, seed=seed)
        n = 4
        utt, schm = rand_reprs(6, n, len(tiny_table), seed=seed + 9)
        ids = dec.beam_search(
            d, utt, schm, dec.DecoderOptions(beam_size=4, max_len=16, constrained=True),
            table=tiny_table, n_tokens=n,
        )
        prefix: list[int] = []
        for fid in ids:
            assert dec.grammar_mask(prefix, tiny_table, n)[fid]
            prefix.append(fid)
        if ids[-1] == dlg.EOS:
            seq = [dlg.marker(dlg.BOS)] + [dlg.Pointer.from_flat(i, len(tiny_table)) for i in ids]
            assert dlg.sequence_is_well_formed(seq, tiny_table, n)


# ---------------------------------------------------------------------------
# sequence labeling head


def test_seqlabel_shapes():
    ps = ParamSet(seed=0)
    head = dec.SeqLabelHead(ps, "head", hidden=8, n_labels=7, n_intents=3)
    utt = Tensor(np.random.default_rng(0).normal(size=(8, 11)))
    labels, intent = head(utt)
    assert labels.data.shape == (7, 11)
    assert intent.data.shape == (3, 1)
