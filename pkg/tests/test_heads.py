import datetime as dt

import numpy as np
import pytest

from evamp import ndcore as nd
from evamp.errors import ConfigError, DataError
from evamp.evalkit import price_metrics
from evamp.forecasters import Forecaster, ForecasterConfig, TrainConfig, train_forecaster
from evamp.heads import (
    HeadConfig, HeadTrainConfig, SentiEventHead, TimelHead, TimesHead,
    amplification, baseline_bundles, create_head, direction_probs, head_to_bytes, infer_head,
    labels_to_amplification, load_head, prepare_events, save_head, token_buckets, train_head, update_prices,
)
from evamp.heads.common import StockTable, UpdateParams, fallback_bucket
from evamp.indicators import FileProvider, NoisyOracleProvider, NoisySettings, OracleProvider
from evamp.labels import QuantConfig, parse_tokens, render_tokens
from evamp.market import EventRecord, Scenario, make_windows, split_by_ticker, synth_market
from evamp.ndcore import Tape, Tensor, mse

from gradcheck import model_grad_error
from oracles import reference_attention

SMALL = HeadConfig(n=9, magnitude_cap=20, hidden=6, label_dim=4, text_dim=8, text_heads=2, text_buckets=64)


def _market(seed, tickers=10, events=40, epochs=3, length=260):
    sc = Scenario(tickers=tickers, events=events, length=length, min_gap=30)
    m = synth_market(sc, seed)
    fc = {}
    for t, s in m.series.items():
        f = Forecaster.init(ForecasterConfig(), seed)
        train_forecaster(f, make_windows(s), TrainConfig(epochs=epochs, seed=seed))
        fc[t] = f
    return m, fc


@pytest.fixture(scope="module")
def small():
    m, fc = _market(0, tickers=6, events=18, epochs=2)
    batch = prepare_events(m.events, fc, m.series, 9)
    return m, fc, batch


def _rand_tickers(head, rng):
    head.params.stock.emb.table.data = rng.normal(size=head.params.stock.emb.table.shape)


# ---- state roll -----------------------------------------------------------------

def _zero_gru(head):
    for name, p in head.parameters().items():
        if name.startswith("gru."):
            p.data = np.zeros_like(p.data)


def test_roll_states_zero_gru_halves_each_step():
    h = TimesHead(SMALL, ["A", "B"], 0)
    _rand_tickers(h, np.random.default_rng(0))
    _zero_gru(h)
    idx = np.zeros((2, 9), dtype=np.int64)
    S = h.roll_states(["A", "B"], idx).data
    emb = h.params.stock.lookup(["A", "B"]).data
    np.testing.assert_allclose(S[:, 0], 0.5 * emb, atol=1e-15)
    for t in range(9):
        np.testing.assert_allclose(S[:, t], 0.5 ** (t + 1) * emb, atol=1e-15)


def test_roll_states_distinct_tickers():
    h = TimesHead(SMALL, ["A", "B"], 0)
    _rand_tickers(h, np.random.default_rng(1))
    S = h.roll_states(["A", "B"], np.full((2, 9), 3)).data
    assert not np.allclose(S[0], S[1])


def test_stock_table_fallback():
    tab = StockTable.init(["B", "A"], 4)
    assert tab.tickers == ("A", "B")
    assert tab.row("A") == 0 and tab.row("B") == 1
    assert tab.row("ZZZ") == 2 + fallback_bucket("ZZZ")
    assert np.all(tab.emb.table.data == 0)


# ---- direction probabilities and amplification ------------------------------------

def test_direction_probs_uniform_at_zero():
    p = direction_probs(Tensor(np.zeros((3, 6))), Tensor(np.random.default_rng(0).normal(size=(2, 9, 6))))
    np.testing.assert_allclose(p.data, 1 / 3)
    np.testing.assert_allclose(amplification(p).data, 0.0)


def test_direction_probs_brute_force():
    rng = np.random.default_rng(2)
    w, s = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    p = direction_probs(Tensor(w), Tensor(s)).data
    for i in range(4):
        z = w @ s[i]
        e = np.exp(z - z.max())
        np.testing.assert_allclose(p[i], e / e.sum(), atol=1e-14)


def test_amplification_examples():
    probs = np.array([[1.0, 0, 0], [0, 0, 1.0], [0.2, 0.5, 0.3], [0, 1.0, 0]])
    np.testing.assert_allclose(amplification(probs).data, [1.0, -1.0, -0.1, 0.0], atol=1e-15)


# ---- the shared update ---------------------------------------------------------------

def test_identity_update_returns_baseline_exactly():
    P = np.random.default_rng(3).normal(size=(5, 9))
    A = np.random.default_rng(4).uniform(-1, 1, size=(5, 9))
    out = update_prices(UpdateParams.identity(9), A, P, 1.0).data
    assert np.array_equal(out, P)
    assert mse(out, P * 0 + 1).item() == mse(P, P * 0 + 1).item()


def test_update_brute_force_and_zero_amplification():
    rng = np.random.default_rng(5)
    u = UpdateParams(Tensor(rng.normal(size=(9, 18))), Tensor(rng.normal(size=9)))
    A, P = rng.uniform(-1, 1, size=(1, 9)), rng.normal(size=(1, 9))
    ref = u.w.data @ np.r_[2.5 * A[0], P[0]] + u.b.data
    np.testing.assert_allclose(update_prices(u, A, P, 2.5).data[0], ref, atol=1e-12)
    np.testing.assert_allclose(update_prices(u, np.zeros((1, 9)), P, 2.5).data[0],
                               u.w.data[:, 9:] @ P[0] + u.b.data, atol=1e-12)


def test_alpha_zero_gives_zero_gradient_on_w_a():
    cfg = HeadConfig(**{**SMALL.__dict__, "alpha": 0.0})
    h = TimesHead(cfg, ["A"], 0)
    rng = np.random.default_rng(6)
    h.params.update.w.data = rng.normal(size=(9, 18))
    with Tape():
        out, _ = h.forward(["A", "A"], rng.integers(0, 41, size=(2, 9)), rng.normal(size=(2, 9)))
        nd.backward(mse(out, rng.normal(size=(2, 9))))
    assert np.all(h.params.w_a.grad == 0)


def test_timel_and_times_share_the_update():
    rng = np.random.default_rng(7)
    tl, ts = TimelHead(SMALL), TimesHead(SMALL, ["A"], 1)
    w, b = rng.normal(size=(9, 18)), rng.normal(size=9)
    for h in (tl, ts):
        h.params.update.w.data, h.params.update.b.data = w.copy(), b.copy()
    A, P = rng.uniform(-1, 1, size=(3, 9)), rng.normal(size=(3, 9))
    out_l, _ = tl.forward(["A"] * 3, A, P)
    out_s = update_prices(ts.params.update, A, P, ts.cfg.alpha)
    assert np.array_equal(out_l.data, out_s.data)


def test_sentievent_and_times_share_the_readout():
    rng = np.random.default_rng(8)
    ts, se = TimesHead(SMALL, ["A"], 1), SentiEventHead(SMALL, ["A"], 2)
    se.params.w_a.data = ts.params.w_a.data.copy()
    S = rng.normal(size=(2, 9, SMALL.hidden))
    a = amplification(direction_probs(ts.params.w_a, S)).data
    b = amplification(direction_probs(se.params.w_a, S)).data
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1)


# ---- TimeL decode ------------------------------------------------------------------

def test_timel_decode_examples():
    q = QuantConfig()
    a = labels_to_amplification(parse_tokens("INC_6 INC_15 INC_10", q), q)
    np.testing.assert_allclose(a, [0.0195] * 3 + [0.0465] * 3 + [0.0315] * 3, atol=1e-15)
    assert np.all(labels_to_amplification(parse_tokens("INC_0 INC_0 INC_0", q), q) == 0)
    np.testing.assert_allclose(labels_to_amplification(parse_tokens("DEC_4 DEC_4 DEC_4", q), q), -0.0105,
                               atol=1e-15)


# ---- SentiEvent pieces -------------------------------------------------------------

def _se(seed=0, tickers=("A", "B")):
    h = SentiEventHead(SMALL, list(tickers), seed)
    _rand_tickers(h, np.random.default_rng(seed + 100))
    return h


def test_single_token_collapses_to_value_projection():
    h = _se()
    p = h.params.attn
    tok = token_buckets("merger", SMALL.text_buckets)
    out = h.stock_event_repr(["A"], [tok]).data[0]
    v = h.params.tokens.table.data[tok[0]]
    np.testing.assert_allclose(out, p.o.w.data @ (p.v.w.data @ v + p.v.b.data) + p.o.b.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_stock_event_repr_matches_reference_attention(seed):
    h = _se(seed)
    p = h.params.attn
    toks = token_buckets("alpha beta gamma UP_LARGE delta", SMALL.text_buckets)
    out = h.stock_event_repr(["B"], [toks]).data[0]
    q_in = h.params.stock.lookup(["B"]).data[0]
    kv = h.params.tokens.table.data[toks]
    ref = reference_attention(q_in, kv, p.q.w.data, p.q.b.data, p.k.w.data, p.k.b.data, p.v.w.data, p.v.b.data,
                              p.o.w.data, p.o.b.data, p.heads)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_padding_does_not_change_repr():
    h = _se()
    short = token_buckets("one two", SMALL.text_buckets)
    long = token_buckets("one two three four five six", SMALL.text_buckets)
    alone = h.stock_event_repr(["A"], [short]).data
    batched = h.stock_event_repr(["A", "A"], [short, long]).data
    np.testing.assert_allclose(batched[0], alone[0], atol=1e-12)


def test_same_text_two_tickers_distinct():
    h = _se()
    toks = token_buckets("guidance raised UP_MEDIUM", SMALL.text_buckets)
    e = h.stock_event_repr(["A", "B"], [toks, toks]).data
    assert not np.allclose(e[0], e[1])


def test_temporal_reprs():
    h = _se()
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 8)), rng.normal(size=8)
    pos = h.params.pos.data.copy()
    np.testing.assert_allclose(h.temporal_reprs(np.zeros((2, 8))).data, np.broadcast_to(pos, (2, 9, 8)))
    np.testing.assert_allclose(h.temporal_reprs(a + b).data, h.temporal_reprs(a).data + b, atol=1e-14)
    h.params.pos.data = np.zeros_like(pos)
    np.testing.assert_array_equal(h.temporal_reprs(a).data, np.repeat(a[:, None], 9, axis=1))


def test_empty_text_rejected():
    with pytest.raises(DataError):
        token_buckets("  ... ", 64)


def test_sentievent_never_asks_the_provider(small):
    m, fc, batch = small

    class Refuses(OracleProvider):
        def provide(self, event):
            raise AssertionError("label provider used")

    h = create_head(HeadConfig(**{**SMALL.__dict__, "kind": "sentievent"}), [e.ticker for e in batch.events], 0)
    train_head(h, batch, Refuses(), HeadTrainConfig(epochs=1, lr=1e-3))
    assert len(infer_head(h, batch, None)) == len(batch)


# ---- gradients ---------------------------------------------------------------------

def _tiny(kind):
    return HeadConfig(kind=kind, n=3, magnitude_cap=4, hidden=3, label_dim=2, text_dim=4, text_heads=2,
                      text_buckets=16)


def test_times_head_gradcheck():
    cfg = _tiny("times")
    h = TimesHead(cfg, ["A", "B"], 3)
    rng = np.random.default_rng(3)
    _rand_tickers(h, rng)
    h.params.update.w.data = rng.normal(size=(3, 6))
    idx, P, y = rng.integers(0, 9, size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    err = model_grad_error(h.parameters(), lambda: mse(h.forward(["A", "B"], idx, P)[0], y))
    assert err < 1e-4


def test_sentievent_head_gradcheck():
    cfg = _tiny("sentievent")
    h = SentiEventHead(cfg, ["A", "B"], 4)
    rng = np.random.default_rng(4)
    _rand_tickers(h, rng)
    h.params.update.w.data = rng.normal(size=(3, 6))
    items = [[1, 5, 7], [2]]
    P, y = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    err = model_grad_error(h.parameters(), lambda: mse(h.forward(["A", "B"], items, P)[0], y))
    assert err < 1e-4


def test_stock_embedding_gradient_nonzero():
    h = TimesHead(SMALL, ["A", "B"], 0)
    rng = np.random.default_rng(9)
    h.params.update.w.data = rng.normal(size=(9, 18))
    with Tape():
        out, _ = h.forward(["A", "B"], rng.integers(0, 41, size=(2, 9)), rng.normal(size=(2, 9)))
        nd.backward(mse(out, rng.normal(size=(2, 9))))
    g = h.params.stock.emb.table.grad
    assert np.abs(g[:2]).sum() > 0
    assert np.all(g[2:] == 0)


# ---- training contracts --------------------------------------------------------------

def test_zero_epochs_leave_head_unchanged(small):
    _, _, batch = small
    h = create_head(SMALL, [e.ticker for e in batch.events], 0)
    before = head_to_bytes(h)
    assert list(train_head(h, batch, OracleProvider(), HeadTrainConfig(epochs=0))) == []
    assert head_to_bytes(h) == before


def test_identity_head_reproduces_baseline(small):
    _, _, batch = small
    for kind in ("times", "timel", "sentievent"):
        cfg = HeadConfig(**{**SMALL.__dict__, "kind": kind})
        bundles = infer_head(create_head(cfg, ["T000"], 0), batch, OracleProvider())
        for b in bundles:
            assert np.array_equal(b.updated, b.baseline)
            assert np.all(np.abs(b.amplification) <= 1)


def test_forecaster_bytes_untouched_by_head_training(small):
    m, fc, _ = small
    before = {t: f.to_bytes() for t, f in fc.items()}
    batch = prepare_events(m.events, fc, m.series, 9)
    h = create_head(SMALL, list(fc), 0)
    train_head(h, batch, OracleProvider(), HeadTrainConfig(epochs=3, lr=1e-2))
    assert {t: f.to_bytes() for t, f in fc.items()} == before


def test_training_is_deterministic(small):
    _, _, batch = small
    blobs = []
    for _ in range(2):
        h = create_head(SMALL, [e.ticker for e in batch.events], 5)
        curve = train_head(h, batch, OracleProvider(), HeadTrainConfig(epochs=4, lr=1e-2, seed=2))
        blobs.append((head_to_bytes(h), list(curve)))
    assert blobs[0] == blobs[1]


def test_oracle_and_file_provider_give_identical_bundles(small):
    _, _, batch = small
    h = create_head(SMALL, [e.ticker for e in batch.events], 0)
    train_head(h, batch, OracleProvider(), HeadTrainConfig(epochs=2, lr=1e-2))
    store = {(e.ticker, e.date): render_tokens(OracleProvider()(e)) for e in batch.events}
    a = infer_head(h, batch, OracleProvider())
    b = infer_head(h, batch, FileProvider(store))
    again = infer_head(h, batch, OracleProvider())
    for x, y, z in zip(a, b, again):
        assert np.array_equal(x.updated, y.updated) and np.array_equal(x.updated, z.updated)


def test_missing_file_labels_skip_or_raise(small):
    _, _, batch = small
    h = create_head(SMALL, [e.ticker for e in batch.events], 0)
    first = batch.events[0]
    store = {(first.ticker, first.date): render_tokens(OracleProvider()(first))}
    with pytest.raises(DataError):
        infer_head(h, batch, FileProvider(store))
    assert len(infer_head(h, batch, FileProvider(store), skip_missing=True)) == 1


def test_val_selection_keeps_best_epoch(small):
    _, _, batch = small
    half = len(batch) // 2
    tr, va = batch.subset(range(half)), batch.subset(range(half, len(batch)))
    h = create_head(SMALL, [e.ticker for e in tr.events], 0)
    res = train_head(h, tr, OracleProvider(), HeadTrainConfig(epochs=8, lr=1e-2), val=va)
    assert len(res.val_loss) == 8
    best = min([None] + res.val_loss, key=lambda v: np.inf if v is None else v)
    kept = price_metrics(infer_head(h, va, OracleProvider())).rmse ** 2
    if res.best_epoch:
        assert kept == pytest.approx(best, rel=1e-12)


def test_prepare_events_skips_and_errors(small):
    m, fc, _ = small
    e = m.events[0]
    early = EventRecord(e.ticker, m.series[e.ticker].dates[3], "x", None, e.realized)
    none = EventRecord(e.ticker, e.date, "x", None, None)
    ghost = EventRecord("GHOST", e.date, "x", None, e.realized)
    b = prepare_events([e, early, none, ghost], fc, m.series, 9)
    assert len(b) == 1 and len(b.skipped) == 3
    with pytest.raises(ConfigError):
        prepare_events([e], fc, m.series, 21)


def test_save_and_load_heads(tmp_path, small):
    _, _, batch = small
    for kind in ("times", "timel", "sentievent"):
        cfg = HeadConfig(**{**SMALL.__dict__, "kind": kind})
        h = create_head(cfg, [e.ticker for e in batch.events], 0)
        train_head(h, batch, OracleProvider(), HeadTrainConfig(epochs=1, lr=1e-2))
        save_head(h, tmp_path / f"{kind}.bin")
        back = load_head(tmp_path / f"{kind}.bin")
        assert head_to_bytes(back) == head_to_bytes(h)
        x = infer_head(h, batch, OracleProvider())[0].updated
        assert np.array_equal(infer_head(back, batch, OracleProvider())[0].updated, x)


# ---- learning ------------------------------------------------------------------------

def _learn(seed, kind, provider_train, provider_test, texts=None, epochs=60, size="small"):
    m, fc = _market(seed) if size == "small" else _market(seed, tickers=20, events=100, length=400)
    tr, va, te = split_by_ticker(m.events, seed=seed)
    if texts == "shuffle":
        perm = np.random.default_rng(seed).permutation(len(tr))
        tr = [EventRecord(e.ticker, e.date, tr[i].text, e.labels, e.realized) for e, i in zip(tr, perm)]
    btr, bva, bte = (prepare_events(x, fc, m.series, 9) for x in (tr, va, te))
    cfg = HeadConfig(kind=kind)
    h = create_head(cfg, [e.ticker for e in btr.events], seed)
    train_head(h, btr, provider_train, HeadTrainConfig(lr=1e-2, epochs=epochs, seed=seed), val=bva)
    base = price_metrics(baseline_bundles(bte))
    return base, [price_metrics(infer_head(h, bte, p)) for p in provider_test]


def test_oracle_labels_beat_fully_flipped_labels():
    oracle, flipped = [], []
    for seed in range(5):
        _, (o, f) = _learn(seed, "times", OracleProvider(),
                           [OracleProvider(), NoisyOracleProvider(NoisySettings(1.0, 0.0, seed))], epochs=40)
        oracle.append(o.rmse ** 2)
        flipped.append(f.rmse ** 2)
    assert np.mean(oracle) <= np.mean(flipped)


def test_sentievent_text_beats_baseline_and_shuffled_text_does_not():
    gains, nulls = [], []
    for seed in range(4):
        base, (real,) = _learn(seed, "sentievent", None, [None], size="standard")
        _, (shuf,) = _learn(seed, "sentievent", None, [None], texts="shuffle", size="standard")
        gains.append(1 - real.mae / base.mae)
        nulls.append(1 - shuf.mae / base.mae)
    assert np.mean(gains) > 0.15
    assert np.mean(nulls) < 0.05
