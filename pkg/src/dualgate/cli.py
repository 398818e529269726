"""``dualgate`` command line.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, data, textenc, train
from .config import ConfigError, load_run_config
from .model import ABLATIONS, model_forward

log = logging.getLogger("dualgate")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualgate", description="Text- and series-gated MoE forecaster")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp, data_dir=True, out=True):
        sp.add_argument("--config", metavar="PATH", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if data_dir:
            sp.add_argument("--data", metavar="DIR", default=".", help="dataset directory")
        if out:
            sp.add_argument("--out", metavar="DIR", default="runs", help="output directory")
        sp.add_argument("--backend", choices=("stub", "file", "http"), help="text encoder backend")
        sp.add_argument("--ablation", choices=ABLATIONS, help="model variant")

    sp = sub.add_parser("make-synthetic", help="generate the synthetic text/series benchmark")
    common(sp, data_dir=False)
    sp = sub.add_parser("embed-text", help="encode text.jsonl into an embedding file")
    common(sp)
    sp = sub.add_parser("train", help="train a model and write a run directory")
    common(sp)
    for name, helptext in (("eval", "evaluate a trained checkpoint"),
                           ("forecast", "forecast past the end of the series"),
                           ("routing-report", "expert/trend cross-tabulation on the test split")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", metavar="PATH", help="checkpoint file (default: the run directory's)")
        if name == "routing-report":
            sp.add_argument("--k-override", type=int, metavar="N", help="evaluate with top-N routing")
    sp = sub.add_parser("mk-test", help="Mann-Kendall trend test on one CSV column")
    sp.add_argument("--input", required=True, metavar="PATH")
    sp.add_argument("--column", required=True)
    sp.add_argument("--out", metavar="DIR", help="also write mk_test.json here")
    return p


# ---------------------------------------------------------------- helpers

def _resolve(args):
    return load_run_config(args.config, seed=args.seed, ablation=args.ablation,
                           backend=getattr(args, "backend", None))


def _load_dataset(rc, data_dir: Path):
    series = data.load_series_csv(data_dir / rc.data["series"])
    rc.set_channels(series.n_channels)
    windows = data.stack_windows(data.make_windows(series, rc.model.lookback, rc.model.horizon,
                                                   int(rc.data["stride"])))
    return series, data.chrono_split(windows, rc.data["split"])


def _text_source(rc, data_dir: Path):
    if rc.model.ablation == "no_tmoe":
        return textenc.TextSource.zeros(rc.model.text_dim)
    t = rc.text
    if t["backend"] == "file":
        path = Path(t["path"]) if t["path"] else data_dir / rc.data["embeddings"]
        store = textenc.read_embeddings(path)
        if store.dim != rc.model.text_dim:
            raise ConfigError(f"{path} holds dim {store.dim} embeddings, model expects {rc.model.text_dim}")
        return textenc.TextSource.from_store(store)
    backend = textenc.make_backend(t["backend"], seed=int(t["seed"]), dim=rc.model.text_dim, url=t["url"],
                                   domain=rc.data["domain"], horizon=rc.model.horizon)
    docs = textenc.read_text_jsonl(data_dir / rc.data["text"])
    return textenc.TextSource.from_docs(docs, backend)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "horizon", "n_windows", "mse", "mae"])
    for r in rows:
        w.writerow([r["split"], r["horizon"], r["n_windows"], repr(r["mse"]), repr(r["mae"])])
    return buf.getvalue()


def _checkpoint(args, rc, run: Path) -> train.Checkpoint:
    path = Path(args.checkpoint) if args.checkpoint else run / "checkpoint.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run `train` with the same config first")
    params, cfg = train.load_checkpoint(path)
    return train.Checkpoint(cfg, params)


# ---------------------------------------------------------------- commands

def cmd_make_synthetic(args) -> int:
    rc = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    syn = data.make_synthetic(rc.synthetic)
    data.save_series_csv(out / rc.data["series"], syn.series)
    textenc.write_text_jsonl(out / rc.data["text"], syn.docs)
    textenc.write_embeddings(out / rc.data["embeddings"], zip(syn.series.timestamps, syn.embeddings))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "segment", "regime", "next_regime"])
    for row in zip(syn.series.timestamps, syn.segment_id, syn.regime, syn.next_regime):
        w.writerow([int(v) for v in row])
    _write(out / "regimes.csv", buf.getvalue())
    _write(out / "synthetic.json", _json(rc.to_dict()["synthetic"]))
    print(f"wrote {len(syn.series)} steps x {syn.series.n_channels} channels, "
          f"{len(syn.segment_bounds)} segments to {out}")
    return 0


def cmd_embed_text(args) -> int:
    rc = _resolve(args)
    data_dir = Path(args.data)
    kind = rc.text["backend"]
    if kind == "file":
        raise UsageError("embed-text needs an encoding backend: --backend stub or --backend http")
    backend = textenc.make_backend(kind, seed=int(rc.text["seed"]), dim=rc.model.text_dim,
                                   url=rc.text["url"], domain=rc.data["domain"], horizon=rc.model.horizon)
    docs = textenc.read_text_jsonl(data_dir / rc.data["text"])
    records = [(d.ts_end, textenc.encode_text(d, backend).vector) for d in docs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    textenc.write_embeddings(out / rc.data["embeddings"], records, dim=rc.model.text_dim)
    _write(out / "embed_text.json", _json({"backend": kind, "dim": rc.model.text_dim, "count": len(records),
                                           "file": rc.data["embeddings"]}))
    print(f"encoded {len(records)} documents with the {kind} backend into {out / rc.data['embeddings']}")
    return 0


def cmd_train(args) -> int:
    rc = _resolve(args)
    data_dir = Path(args.data)
    _, (tr, va, te) = _load_dataset(rc, data_dir)
    src = _text_source(rc, data_dir)
    run = rc.run_dir(args.out)
    run.mkdir(parents=True, exist_ok=True)
    _write(run / "resolved_config.json", rc.to_json())
    ckpt, hist = train.train_loop(rc.model, rc.train, tr, va, src)
    train.save_checkpoint(run / "checkpoint.ckpt", ckpt.params, ckpt.config)
    _write(run / "history.csv", hist.to_csv())
    stored = ckpt.rounded()
    rows = [{"split": name, **train.evaluate(stored, split, src)} for name, split in (("val", va), ("test", te))]
    _write(run / "metrics.json", _json({"best_epoch": hist.best_epoch, "epochs_run": len(hist.train_loss),
                                        "metrics": rows}))
    _write(run / "metrics.csv", _metrics_csv(rows))
    print(f"run directory: {run}")
    print(f"epochs run {len(hist.train_loss)}, best epoch {None if hist.best_epoch is None else hist.best_epoch + 1}")
    for r in rows:
        print(f"{r['split']:>5}  mse {r['mse']:.6f}  mae {r['mae']:.6f}")
    return 0


def cmd_eval(args) -> int:
    rc = _resolve(args)
    data_dir = Path(args.data)
    _, (tr, va, te) = _load_dataset(rc, data_dir)
    run = rc.run_dir(args.out)
    ckpt = _checkpoint(args, rc, run)
    src = _text_source(rc, data_dir)
    rows = [{"split": name, **train.evaluate(ckpt, split, src)} for name, split in (("val", va), ("test", te))]
    agg = train.aggregate_horizons([r for r in rows if r["split"] == "test"])
    run.mkdir(parents=True, exist_ok=True)
    _write(run / "eval_metrics.json", _json({"metrics": rows, "aggregate_test": agg}))
    _write(run / "eval_metrics.csv", _metrics_csv(rows))
    for r in rows:
        print(f"{r['split']:>5}  horizon {r['horizon']}  mse {r['mse']:.6f}  mae {r['mae']:.6f}")
    return 0


def cmd_forecast(args) -> int:
    rc = _resolve(args)
    data_dir = Path(args.data)
    series = data.load_series_csv(data_dir / rc.data["series"])
    rc.set_channels(series.n_channels)
    run = rc.run_dir(args.out)
    ckpt = _checkpoint(args, rc, run)
    cfg = ckpt.config
    if len(series) < cfg.lookback:
        raise data.DataError(f"series has {len(series)} rows, the model needs {cfg.lookback}")
    end_ts = int(series.timestamps[-1])
    hbar = _text_source(rc, data_dir).for_windows([end_ts])[0]
    pred = model_forward(series.values[-cfg.lookback:], hbar, ckpt.params, cfg)
    step = int(series.timestamps[-1] - series.timestamps[-2]) if len(series) > 1 else 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", *series.channel_names])
    for i, row in enumerate(pred, start=1):
        w.writerow([end_ts + i * step, *(repr(float(v)) for v in row)])
    run.mkdir(parents=True, exist_ok=True)
    _write(run / "forecast.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_mk_test(args) -> int:
    series = data.load_series_csv(args.input)
    if args.column not in series.channel_names:
        raise UsageError(f"column {args.column!r} not in {series.channel_names}")
    x = series.values[:, series.channel_names.index(args.column)]
    r = analysis.mk_test(x)
    result = {"column": args.column, "n": int(x.size), "S": r.s_stat, "var_S": r.var_s, "Z": r.z,
              "regime": r.regime.label}
    print(f"n       {x.size}")
    print(f"S       {r.s_stat}")
    print(f"Var(S)  {r.var_s:.6f}")
    print(f"Z       {r.z:.6f}")
    print(f"regime  {r.regime.label}")
    if args.out:
        _write(Path(args.out) / "mk_test.json", _json(result))
    else:
        print(json.dumps(result, sort_keys=True))
    return 0


def cmd_routing_report(args) -> int:
    rc = _resolve(args)
    data_dir = Path(args.data)
    _, (tr, va, te) = _load_dataset(rc, data_dir)
    run = rc.run_dir(args.out)
    ckpt = _checkpoint(args, rc, run)
    cfg = ckpt.config
    if args.k_override is not None:
        k = args.k_override
        try:
            cfg = type(cfg)(**{**cfg.to_dict(), "k_text": min(k, cfg.n_text_experts), "k_series": k})
        except ValueError as e:
            raise ConfigError(f"--k-override {k}: {e}") from e
        ckpt = train.Checkpoint(cfg, ckpt.params)
    if cfg.ablation == "vanilla_moe":
        raise UsageError("routing-report needs a text- or series-gated model, not vanilla_moe")
    routing = analysis.RoutingLog()
    metrics = train.evaluate(ckpt, te, _text_source(rc, data_dir), log=routing)
    regimes = np.array([[int(analysis.mk_test(w[:, c]).regime) for c in range(cfg.channels)] for w in te.x_in])
    report = {"metrics": metrics, "tables": []}
    _write(run / "routing.csv", routing.to_csv())
    text_out = []
    branches = [b for b in ("series", "text") if not (b == "series" and cfg.ablation == "no_smoe")
                and not (b == "text" and cfg.ablation == "no_tmoe")]
    for layer in range(cfg.n_layers):
        for branch in branches:
            k = cfg.k_series if branch == "series" else cfg.k_text
            if k != 1:
                if branch == "series":
                    raise UsageError(f"series gate uses k={k}; rerun with --k-override 1 for top-1 routing")
                continue
            table = analysis.routing_crosstab(routing, regimes, branch, layer)
            stat, dof = analysis.chi_square_independence(table)
            name = f"crosstab_{branch}_layer{layer}"
            _write(run / f"{name}.csv", analysis.crosstab_csv(table))
            txt = (f"{branch} gate, layer {layer}: chi-square {stat:.3f} on {dof} dof\n"
                   + analysis.format_crosstab(table))
            _write(run / f"{name}.txt", txt)
            text_out.append(txt)
            report["tables"].append({"branch": branch, "layer": layer, "table": table.tolist(),
                                     "chi_square": stat, "dof": dof, "non_uniform": bool(stat > dof)})
    _write(run / "routing_report.json", _json(report))
    print("\n".join(text_out), end="")
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "embed-text": cmd_embed_text,
    "train": cmd_train,
    "eval": cmd_eval,
    "forecast": cmd_forecast,
    "mk-test": cmd_mk_test,
    "routing-report": cmd_routing_report,
}


def main(argv=None) -> int:
    parser = _parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"dualgate {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"dualgate {args.command}: error: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
