"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The end-to-end criteria drive the command line the way a user would. The
standard-scenario runs for the oracle and flip-rate criteria share one output
directory per seed.
"""
import csv
import datetime as dt
import shutil
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import acceptance_log
from evamp import ndcore as nd
from evamp.cli import main
from evamp.evalkit import micro_f1, value_match_f1
from evamp.forecasters import Forecaster, ForecasterConfig, TrainConfig, train_forecaster
from evamp.heads import (
    HeadConfig, HeadTrainConfig, TimesHead, amplification, create_head, direction_probs, infer_head,
    prepare_events, train_head,
)
from evamp.indicators import NoisyOracleProvider, NoisySettings, OracleProvider, make_provider
from evamp.labels import ChangeLabel, Direction, QuantConfig, encode_labels, label_of, quantize_change, render_tokens
from evamp.market import AlignedSeries, Scenario, make_windows, synth_market
from evamp.ndcore import Tensor, mse, parameter
from evamp.pipeline import load_data, load_experiment

from gradcheck import model_grad_error
from oracles import exact_bucket, spearman
from test_labels import FNB_PATH, random_triples

SEEDS = (1, 2, 3)
FLIP_RATES = (0.0, 0.25, 0.5, 1.0)


def verdict(number: int, title: str, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    """Print and record one line, then fail the test if the criterion or its time budget missed."""
    passed = bool(ok) and elapsed <= limit
    line = f"{'PASS' if passed else 'FAIL'}  [{number}] {title}: {detail}; {elapsed:.1f}s (limit {limit:.0f}s)"
    print(line)
    acceptance_log.LINES.append(line)
    assert ok, line
    assert elapsed <= limit, line


def _read_comparison(out):
    with open(out / "comparison.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != ".lock"}


# ---- 1. gradients ----------------------------------------------------------------------

def _grad_cases(rng):
    """(layer, params, loss) for one random instance of each layer family."""
    cases = []
    x = parameter(rng.normal(size=(3, 4)))
    lin = nd.LinearParams.init(rng, 4, 5)
    lin.b.data = rng.normal(size=5)
    y = rng.normal(size=(3, 5))
    cases.append(("linear", {"w": lin.w, "b": lin.b, "x": x}, lambda: mse(nd.linear(lin, x), y)))

    emb = nd.EmbeddingParams.init(rng, 7, 3)
    idx, ye = rng.integers(0, 7, size=(4, 2)), rng.normal(size=(4, 2, 3))
    cases.append(("embedding", nd.named_parameters(emb), lambda: mse(nd.embed(emb, idx), ye)))

    gru = nd.GruCellParams.init(rng, 3, 4)
    for p in nd.named_parameters(gru).values():
        p.data = rng.normal(size=p.shape) * 0.7
    h0, xs, yg = parameter(rng.uniform(0, 1, size=(2, 4))), parameter(rng.normal(size=(2, 3))), rng.normal(size=(2, 4))
    gp = {**nd.named_parameters(gru), "h0": h0, "x": xs}
    cases.append(("gru", gp, lambda: mse(nd.gru_step(gru, nd.gru_step(gru, h0, xs), xs), yg)))

    att = nd.AttentionParams.init(rng, 4, 2, query_dim=3)
    q, kv, ya = parameter(rng.normal(size=(2, 1, 3))), parameter(rng.normal(size=(2, 5, 4))), rng.normal(size=(2, 1, 4))
    ap = {**nd.named_parameters(att), "q": q, "kv": kv}
    cases.append(("attention", ap, lambda: mse(nd.multi_head_attention(att, q, kv), ya)))

    z, ys = parameter(rng.normal(size=(3, 4)) * 2), rng.dirichlet(np.ones(4), size=3)
    cases.append(("softmax", {"z": z}, lambda: mse(nd.softmax(z, axis=-1), ys)))

    cfg = HeadConfig(kind="times", n=3, magnitude_cap=4, hidden=3, label_dim=2)
    head = TimesHead(cfg, ["A", "B"], int(rng.integers(1 << 30)))
    head.params.stock.emb.table.data = rng.normal(size=head.params.stock.emb.table.shape)
    head.params.update.w.data = rng.normal(size=(3, 6))
    lab, P, yt = rng.integers(0, 9, size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    cases.append(("TimeS head", head.parameters(), lambda: mse(head.forward(["A", "B"], lab, P)[0], yt)))
    return cases


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(2024)
    for _ in range(20):
        for name, params, loss in _grad_cases(rng):
            worst[name] = max(worst.get(name, 0.0), model_grad_error(params, loss))
    detail = "20 instances each, worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, "tape gradients match central differences", max(worst.values()) < 1e-4, detail,
            time.perf_counter() - start, 30)


# ---- 2. quantization ---------------------------------------------------------------------

def test_criterion_2_codec_matches_exact_floor():
    start = time.perf_counter()
    triples = random_triples(10_000, seed=2)
    mismatches = sum(quantize_change(pt, p1, iv) != exact_bucket(pt, p1, iv) for pt, p1, iv in triples)
    dec4 = label_of(quantize_change(99.05, 100.0, 0.3)).token
    verdict(2, "quantizer equals exact floor oracle", mismatches == 0 and dec4 == "DEC_4",
            f"{len(triples)} triples, {mismatches} mismatches, -0.95% at 0.3 gives {dec4}",
            time.perf_counter() - start, 5)


# ---- 3. worked label example ------------------------------------------------------------------

def test_criterion_3_worked_example():
    start = time.perf_counter()
    seq = encode_labels(FNB_PATH, QuantConfig(interval=0.3, n=9))
    short, full = render_tokens(seq), render_tokens(seq, expanded=True)
    want = " ".join(["INC_6"] * 3 + ["INC_15"] * 3 + ["INC_10"] * 3)
    verdict(3, "FNB-style path encodes to INC_6 INC_15 INC_10", short == "INC_6 INC_15 INC_10" and full == want,
            f"{short!r}, expanded {full!r}", time.perf_counter() - start, 1)


# ---- 4. forecaster convergence -------------------------------------------------------------------

def test_criterion_4_forecaster_convergence():
    start = time.perf_counter()
    t = np.arange(200, dtype=np.float64)
    dates = [dt.date(2020, 1, 1) + dt.timedelta(days=int(i)) for i in t]
    trend = AlignedSeries("LIN", dates, np.column_stack([100 + 0.5 * t, 1e4 + 3 * t, 95 - 0.01 * t]))
    dl = Forecaster.init(ForecasterConfig(kind="dlinear"), 0)
    dl_curve = train_forecaster(dl, make_windows(trend), TrainConfig(lr=1e-4, epochs=200, batch=32))

    rng = np.random.default_rng(0)
    pt_cfg = ForecasterConfig(kind="patchtst")
    x = rng.standard_normal((256, 30, 3))
    y = Forecaster.init(pt_cfg, 1).forward(x).data
    pt_curve = train_forecaster(Forecaster.init(pt_cfg, 2), [], TrainConfig(lr=1e-4, epochs=60, batch=8),
                                arrays=(x, y))
    ok = dl_curve[-1] < 1e-3 and pt_curve[-1] < 1e-2
    verdict(4, "forecasters converge", ok,
            f"DLinear+W linear trend MSE {dl_curve[-1]:.2e} after 200 epochs (< 1e-3), "
            f"PatchTST+W teacher-student MSE {pt_curve[-1]:.2e} (< 1e-2)", time.perf_counter() - start, 180)


# ---- 5 and 6. oracle amplification and flip-rate degradation ----------------------------------------

@pytest.fixture(scope="module")
def standard_runs(tmp_path_factory):
    """Per seed: the output dir, comparison rows by head, and the run's wall time."""
    runs = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"standard{seed}")
        start = time.perf_counter()
        code = main(["run", "--config", "standard", "--seed", str(seed), "--out", str(out),
                     "--head", "times timel", "--provider", "oracle"])
        assert code == 0
        runs[seed] = (out, {r["head"]: r for r in _read_comparison(out)}, time.perf_counter() - start)
    return runs


def test_criterion_5_oracle_amplification(standard_runs):
    times = [float(standard_runs[s][1]["times"]["mae_reduction"]) for s in SEEDS]
    timel = [float(standard_runs[s][1]["timel"]["mae_reduction"]) for s in SEEDS]
    ordered = sum(a > b > 0 for a, b in zip(times, timel))
    ok = np.mean(times) >= 0.25 and np.mean(timel) >= 0.15 and ordered >= 2
    detail = (f"held-out MAE reduction TimeS mean {np.mean(times):.3f} {np.round(times, 3).tolist()}, "
              f"TimeL mean {np.mean(timel):.3f} {np.round(timel, 3).tolist()}, "
              f"TimeS > TimeL > baseline on {ordered}/3 seeds")
    verdict(5, "oracle labels amplify the forecast", ok, detail, sum(r[2] for r in standard_runs.values()), 600)


def test_criterion_6_flip_rate_degradation(standard_runs):
    start = time.perf_counter()
    rmse = np.zeros((len(SEEDS), len(FLIP_RATES)))
    for i, seed in enumerate(SEEDS):
        out = standard_runs[seed][0]
        providers = " ".join(f"noisy:{p},0,{seed}" for p in FLIP_RATES)
        for cmd in ("train-head", "eval"):
            assert main([cmd, "--config", "standard", "--seed", str(seed), "--out", str(out),
                         "--head", "times", "--provider", providers]) == 0
        by = {r["provider"]: float(r["rmse"]) for r in _read_comparison(out)}
        rmse[i] = [by[f"noisy:{p},0,{seed}"] for p in FLIP_RATES]
    rhos = [spearman(FLIP_RATES, row) for row in rmse]
    mean = rmse.mean(axis=0)
    ok = mean[0] < mean[-1] and np.mean(rhos) >= 0.8
    detail = (f"mean held-out RMSE at p=0/0.25/0.5/1: {np.round(mean, 3).tolist()}, "
              f"Spearman per seed {np.round(rhos, 3).tolist()} (mean {np.mean(rhos):.3f})")
    verdict(6, "TimeS degrades with provider flip rate", ok, detail, time.perf_counter() - start, 900)


# ---- 7. provider calibration ----------------------------------------------------------------------

def test_criterion_7_provider_calibration():
    start = time.perf_counter()
    provider = make_provider("noisy:t5-base-like")
    pred, gold = [], []
    for seed in range(2000, 2020):  # disjoint from the seeds used to fit the preset
        for e in synth_market(Scenario(), seed).events:
            pred.extend(provider(e).window_labels)
            gold.extend(e.labels.window_labels)
    d, v = micro_f1(pred, gold).value, value_match_f1(pred, gold, 5).value
    ok = abs(d - 0.65) <= 0.05 and abs(v - 0.56) <= 0.05
    verdict(7, "t5-base-like provider is calibrated", ok,
            f"{len(gold) // 3} held-out events, direction F1 {d:.4f} (0.65 +/- 0.05), "
            f"value F1 w=5 {v:.4f} (0.56 +/- 0.05)", time.perf_counter() - start, 120)


# ---- 8. label metrics --------------------------------------------------------------------------------

def _brute_f1(pred, gold, hit):
    """Pooled F1 from TP/FP/FN counted class by class."""
    tp = fp = fn = 0
    for c in sorted(set(pred) | set(gold)):
        for p, g in zip(pred, gold):
            ok = hit(p, g)
            tp += ok and g == c
            fp += (not ok) and p == c
            fn += (not ok) and g == c
    return 2 * tp / (2 * tp + fp + fn) if tp + fn else None


def _draw_label(rng):
    if rng.random() < 0.5:
        return ChangeLabel(Direction.INC, int(rng.integers(0, 60)))
    return ChangeLabel(Direction.DEC, int(rng.integers(1, 60)))


def test_criterion_8_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    mismatches = breaks = 0
    for _ in range(1000):
        size = int(rng.integers(1, 40))
        pred = [_draw_label(rng) for _ in range(size)]
        gold = [_draw_label(rng) for _ in range(size)]
        mismatches += micro_f1(pred, gold, "label").value != _brute_f1(pred, gold, lambda p, g: p == g)
        mismatches += micro_f1(pred, gold).value != _brute_f1(
            [p.direction for p in pred], [g.direction for g in gold], lambda p, g: p == g)
        prev = -1.0
        for w in (5, 10, 15):
            v = value_match_f1(pred, gold, w).value
            mismatches += v != _brute_f1(
                pred, gold, lambda p, g, w=w: p.direction is g.direction and abs(p.magnitude - g.magnitude) <= w)
            breaks += v < prev
            prev = v
    verdict(8, "label metrics equal brute-force counts", mismatches == 0 and breaks == 0,
            f"1000 fixtures, {mismatches} mismatches, {breaks} breaks of monotonicity in w",
            time.perf_counter() - start, 10)


# ---- 9. invariants ----------------------------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1e3))
def _check_amplification_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    w, s = Tensor(rng.normal(size=(3, 5)) * scale), Tensor(rng.normal(size=(4, 9, 5)))
    assert np.all(np.abs(amplification(direction_probs(w, s)).data) <= 1.0)


def test_criterion_9_invariants(tmp_path):
    start = time.perf_counter()
    checks = {}
    out = tmp_path / "inv"
    assert main(["gen", "--config", "standard", "--seed", "5", "--out", str(out)]) == 0
    data = load_data(load_experiment("standard", {"out": out, "seed": 5}))
    fc = {}
    for t, s in data.series.items():
        fc[t] = Forecaster.init(ForecasterConfig(), 0)
        train_forecaster(fc[t], make_windows(s), TrainConfig(epochs=2))
    train = prepare_events(data.train, fc, data.series, 9)
    test = prepare_events(data.test, fc, data.series, 9)
    tickers = sorted({e.ticker for e in train.events})

    before = {t: f.to_bytes() for t, f in fc.items()}
    identity, amps = True, []
    for kind in ("times", "timel", "sentievent"):
        for b in infer_head(create_head(HeadConfig(kind=kind), tickers, 0), test, OracleProvider()):
            identity &= bool(np.array_equal(b.updated, b.baseline))
        head = create_head(HeadConfig(kind=kind), tickers, 0)
        train_head(head, train, OracleProvider(), HeadTrainConfig(lr=1e-2, epochs=20))
        for provider in (OracleProvider(), NoisyOracleProvider(NoisySettings(1.0, 5.0, 1))):
            amps.extend(float(np.abs(b.amplification).max()) for b in infer_head(head, test, provider))
    checks["frozen forecasters"] = {t: f.to_bytes() for t, f in fc.items()} == before
    checks["identity update"] = identity
    _check_amplification_bounded()
    checks["|A| <= 1"] = max(amps) <= 1.0

    parts = (data.train, data.val, data.test)
    names = [{e.ticker for e in part} for part in parts]
    keys = [e.key for part in parts for e in part]
    checks["no split leakage"] = (not names[0] & names[1] and not names[0] & names[2] and not names[1] & names[2]
                                  and len(keys) == len(set(keys)) == 100)

    fast = tmp_path / "fast.cfg"
    fast.write_text("ts_epochs = 5\nhead_epochs = 20\n")
    run = tmp_path / "det"
    args = ["run", "--config", str(fast), "--seed", "4", "--out", str(run),
            "--head", "times timel sentievent", "--provider", "oracle noisy:t5-base-like"]
    assert main(args) == 0
    first = _tree(run)
    shutil.rmtree(run)
    assert main(args) == 0
    checks["byte-identical rerun"] = _tree(run) == first and len(first) > 20
    verdict(9, "pipeline invariants hold", all(checks.values()),
            ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()), time.perf_counter() - start, 300)


# ---- 10. full grid ------------------------------------------------------------------------------------

def test_criterion_10_paper_grid(tmp_path):
    start = time.perf_counter()
    out = tmp_path / "grid"
    code = main(["run", "--config", "paper-grid", "--out", str(out)])
    rows = _read_comparison(out) if code == 0 else []
    cells = {(r["model"], r["head"], r["provider"]) for r in rows}
    want = {(m, h, p) for m in ("dlinear", "patchtst") for h in ("times", "timel", "sentievent")
            for p in ("oracle", "noisy:t5-base-like")}
    gains = ", ".join(f"{r['model']}/{r['head']}/{r['provider']} {float(r['mae_reduction']):.3f}" for r in rows)
    verdict(10, "paper-grid preset covers every cell", code == 0 and cells == want and len(rows) == 12,
            f"exit {code}, {len(cells)} of 12 cells; MAE reduction {gains}", time.perf_counter() - start, 1800)
