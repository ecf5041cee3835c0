"""Command line front end.

    evamp gen         write a synthetic market (prices, events, caps)
    evamp train-ts    train one forecaster per ticker
    evamp train-head  train update heads against a label provider
    evamp eval        score heads and emit reports plus comparison.csv
    evamp run         all of the above in one go
    evamp labels      encode realized prices to label tokens, or decode tokens

Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from evamp import pipeline
from evamp.errors import ConfigError, ContractError, DataError, LabelParseError, NumericalError
from evamp.indicators import OracleProvider
from evamp.labels import QuantConfig, decode_label, parse_tokens, render_tokens
from evamp.market import ingest_events, ingest_prices

log = logging.getLogger("evamp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ConfigError):
    pass


def _experiment_flags(p: argparse.ArgumentParser, grid: bool = True) -> None:
    p.add_argument("--config", help="experiment config file or bundled preset name (e.g. paper-grid)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    if grid:
        p.add_argument("--model", help="dlinear and/or patchtst (space separated)")
        p.add_argument("--head", help="times, timel and/or sentievent")
        p.add_argument("--provider", help="oracle | file:PATH | noisy:P,SIGMA[,SEED] | noisy:PRESET")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evamp", description="Event-amplified time series forecasting.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic market into OUT/data")
    _experiment_flags(g, grid=False)
    g.add_argument("--scenario", help="bundled scenario name or scenario file")

    for name, text in (("train-ts", "train per-ticker forecasters"), ("train-head", "train update heads"),
                       ("eval", "evaluate heads and write reports"), ("run", "gen (if synthetic), train, eval")):
        _experiment_flags(sub.add_parser(name, help=text))

    lab = sub.add_parser("labels", help="batch access to the label codec")
    lab.add_argument("action", choices=("encode", "decode"))
    lab.add_argument("--prices", type=Path, help="prices CSV (encode)")
    lab.add_argument("--events", type=Path, help="events JSONL (encode)")
    lab.add_argument("--in", dest="inp", type=Path, help="label-store JSONL (decode)")
    lab.add_argument("--out", type=Path, required=True)
    lab.add_argument("--n", type=int, default=9)
    lab.add_argument("--interval", type=float, default=0.3)
    return ap


def _config(args) -> pipeline.ExperimentConfig:
    overrides = {k: getattr(args, k, None) for k in ("seed", "out", "model", "head", "provider", "scenario")}
    return pipeline.load_experiment(args.config, overrides)


@contextlib.contextmanager
def _owned(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UsageError(f"{out} is in use by another evamp process") from None
    try:
        yield
    finally:
        lock.release()


# ---- commands --------------------------------------------------------------------

def cmd_gen(cfg):
    d = pipeline.generate(cfg)
    print(f"wrote synthetic market to {d}")


def cmd_train_ts(cfg, data=None):
    data = data or pipeline.load_data(cfg)
    out = {}
    for model in cfg.models:
        out[model] = pipeline.train_forecasters(cfg, data, model)
        print(f"trained {len(out[model])} {model} forecasters into {pipeline.forecaster_dir(cfg, model)}")
    return out


def cmd_train_head(cfg, data=None, forecasters=None):
    data = data or pipeline.load_data(cfg)
    trained = {}
    for model in cfg.models:
        fc = (forecasters or {}).get(model) or pipeline.load_forecasters(cfg, data, model)
        for head in cfg.heads:
            for provider in cfg.providers:
                trained[model, head, provider], result = pipeline.train_one_head(cfg, data, fc, model, head,
                                                                                 provider)
                print(f"trained {model}/{head}/{provider} (kept epoch {result.best_epoch})")
    return trained


def cmd_eval(cfg, data=None, forecasters=None, trained=None):
    data = data or pipeline.load_data(cfg)
    entries = []
    for model in cfg.models:
        fc = (forecasters or {}).get(model) or pipeline.load_forecasters(cfg, data, model)
        for head in cfg.heads:
            for provider in cfg.providers:
                h = (trained or {}).get((model, head, provider))
                rows, entry = pipeline.evaluate_cell(cfg, data, fc, model, head, provider, h)
                pipeline.write_cell_report(cfg, model, head, provider, rows)
                entries.append(entry)
                print(f"{model}/{head}/{provider}: test MAE {entry['mae']:.4f} "
                      f"(baseline {entry['baseline_mae']:.4f})")
    path = pipeline.write_comparison(cfg, entries)
    print(f"wrote {path}")
    return path


def cmd_run(cfg):
    if cfg.prices is None:
        pipeline.generate(cfg)
    pipeline.save_resolved_config(cfg)
    data = pipeline.load_data(cfg)
    fc = cmd_train_ts(cfg, data)
    trained = cmd_train_head(cfg, data, fc)
    return cmd_eval(cfg, data, fc, trained)


def cmd_labels(args):
    cfg = QuantConfig(interval=args.interval, n=args.n)
    if args.action == "encode":
        if args.prices is None or args.events is None:
            raise UsageError("labels encode needs --prices and --events")
        for p in (args.prices, args.events):
            if not p.is_file():
                raise UsageError(f"{p} does not exist")
        series = ingest_prices(args.prices)
        events, rejected = ingest_events(args.events, series, cfg)
        oracle = OracleProvider(cfg)
        written = 0
        with open(args.out, "w", encoding="utf-8") as fh:
            for e in events:
                if e.realized is None:
                    log.warning("%s: fewer than %d trading days after the event, skipped", e.key, cfg.n)
                    continue
                obj = {"ticker": e.ticker, "date": e.date.isoformat(), "labels": render_tokens(oracle(e))}
                fh.write(json.dumps(obj, sort_keys=True) + "\n")
                written += 1
        print(f"encoded {written} events ({len(rejected)} rejected) into {args.out}")
        return
    if args.inp is None or not args.inp.is_file():
        raise UsageError("labels decode needs an existing --in label store")
    with open(args.inp, encoding="utf-8") as src, open(args.out, "w", newline="", encoding="utf-8") as dst:
        w = csv.writer(dst, lineterminator="\n")
        w.writerow(("ticker", "date", "step", "label", "fraction"))
        for lineno, line in enumerate(src, start=1):
            if not line.strip():
                continue
            where = f"{args.inp}:{lineno}"
            try:
                obj = json.loads(line)
                ticker, date, text = obj["ticker"], obj["date"], obj["labels"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{where}: bad label-store record ({exc})") from exc
            try:
                seq = parse_tokens(text, cfg)
            except LabelParseError as exc:
                raise LabelParseError(f"{where}: {exc}", exc.position) from exc
            for step, lab in enumerate(seq.expanded, start=1):
                w.writerow((ticker, date, step, lab.token, repr(decode_label(lab, cfg))))
    print(f"decoded {args.inp} into {args.out}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "labels":
            cmd_labels(args)
            return EXIT_OK
        cfg = _config(args)
        with _owned(Path(cfg.out)):
            {"gen": cmd_gen, "train-ts": cmd_train_ts, "train-head": cmd_train_head, "eval": cmd_eval,
             "run": cmd_run}[args.command](cfg)
    except NumericalError as exc:
        print(f"evamp: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError) as exc:
        print(f"evamp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"evamp: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
