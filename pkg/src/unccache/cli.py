"""Command-line entry point: ``unccache <command> ...``.

Exit codes: 0 success, 2 usage or bad input file, 3 calibration failure,
4 runtime failure. Human-readable tables go to stdout; machine artifacts are
only written to ``--out`` paths, via a temporary file and rename.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import entropy as E
from . import metrics as M
from . import planner as PL
from . import policies as P
from .errors import EmptyCalibration, FingerprintMismatch, SchemaError, UncCacheError
from .model import ModelConfig, encode, init_weights, load_bundle, prefill, save_bundle
from .wired import wired_copy_model

EXIT_USAGE = 2
EXIT_CALIBRATION = 3
EXIT_RUNTIME = 4

PRESETS = {"toy": {}, "tiny": {"n_layers": 4, "n_heads": 4, "d_head": 8, "d_ff": 64, "max_context": 128}}
SOURCE_FLAGS = {"q": "query", "k": "key", "v": "value", "h": "hidden_state"}


class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _atomic_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _top_k(value: str):
    if value in ("elbow", "all"):
        return value
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("top-k must be 'elbow', 'all' or an integer") from None
    if k < 1:
        raise argparse.ArgumentTypeError("top-k must be >= 1")
    return k


def _load_model(path):
    if not Path(path).exists():
        raise UsageError(f"model file {path} does not exist")
    try:
        return load_bundle(path)
    except (SchemaError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from exc


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_model(args) -> int:
    if args.config in PRESETS or args.config == "wired-copy":
        fields = dict(PRESETS.get(args.config, {}))
    else:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"unknown preset or missing config file: {args.config}")
        try:
            fields = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad config JSON: {exc}") from exc
    if args.config == "wired-copy":
        model = wired_copy_model()
    else:
        if args.seed is not None:
            fields["seed"] = args.seed
        try:
            cfg = ModelConfig.from_dict(fields)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad model config: {exc}") from exc
        model = init_weights(cfg)
    save_bundle(model, args.out)
    print(_table(["field", "value"], list(vars(model.config).items()) + [("fingerprint", model.fingerprint()[:16])]))
    return 0


def _plan_config(args) -> PL.PlanConfig:
    try:
        return PL.PlanConfig(
            epsilon=args.epsilon,
            l=args.l,
            s_min=args.smin,
            s_max=args.smax,
            m=args.m,
            s_i1=args.si1,
            delta_s_h=args.dsh,
            top_k=args.top_k,
            groups=args.groups,
            source=SOURCE_FLAGS.get(args.source, args.source),
            samples=args.samples,
        )
    except (ValueError, UncCacheError) as exc:
        raise UsageError(str(exc)) from exc


def _corpus(args, model):
    if not Path(args.corpus).exists():
        raise UsageError(f"corpus {args.corpus} does not exist")
    return PL.load_corpus(args.corpus, model.config.max_context)


def cmd_calibrate(args) -> int:
    model = _load_model(args.model)
    config = _plan_config(args)
    try:
        calib = PL.calibrate(model, _corpus(args, model), config)
    except EmptyCalibration as exc:
        return _fail(EXIT_CALIBRATION, f"calibration failed: {exc}")
    _atomic_text(args.out, json.dumps(calib.to_json(), sort_keys=True, indent=2) + "\n")
    rows = [(i, v, calib.votes[i]) for i, v in enumerate(calib.profile.per_layer)]
    print(_table(["layer", "erank_k", "votes"], rows))
    return 0


def cmd_plan(args) -> int:
    model = _load_model(args.model)
    config = _plan_config(args)
    try:
        if args.calibration:
            obj = json.loads(Path(args.calibration).read_text(encoding="utf-8"))
            calib = PL.Calibration.from_json(obj)
            if calib.model_fingerprint != model.fingerprint():
                raise UsageError("calibration was measured on different weights")
        elif args.corpus:
            calib = PL.calibrate(model, _corpus(args, model), config)
        else:
            raise UsageError("plan needs --corpus or --calibration")
        plan = PL.assemble_plan(calib, config)
    except EmptyCalibration as exc:
        return _fail(EXIT_CALIBRATION, f"calibration failed: {exc}")
    except (SchemaError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    except UncCacheError as exc:
        return _fail(EXIT_CALIBRATION, str(exc))
    PL.save_plan(plan, args.out)
    lp = plan.layer_plan
    rows = []
    for g, size in enumerate(lp.group_sizes):
        layers = [i for i in range(lp.n_layers) if lp.group_of_layer(i) == g]
        rows.append((g, f"{layers[0]}-{layers[-1]}" if layers else "-", size))
    print(_table(["group", "layers", "context"], rows))
    print()
    hp = plan.head_plan
    print(_table(["layer", "head groups", "windows"], [
        (i, hp.group_of_head[i], hp.group_windows[i]) for i in range(lp.n_layers)
    ]))
    print(f"\nmean window {plan.mean_window():.2f}")
    return 0


RUN_FIELDS = {
    "model", "plan", "policy", "seed", "probes", "corpus", "out", "extreme_k", "ratios",
    "window", "steps", "timing", "needle", "top_k",
}


def _load_run_config(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"run config {path} does not exist")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"bad run config JSON: {exc}") from exc
    unknown = set(cfg) - RUN_FIELDS
    if unknown:
        raise UsageError(f"unknown run config fields: {sorted(unknown)}")
    for key in ("model", "policy", "out", "probes"):
        if key not in cfg:
            raise UsageError(f"run config needs {key!r}")
    if cfg["policy"] not in P.POLICY_NAMES:
        raise UsageError(f"unknown policy {cfg['policy']!r}")
    base = path.parent
    for key in ("model", "plan", "probes", "corpus", "out"):
        if cfg.get(key):
            cfg[key] = str((base / cfg[key]).resolve()) if not Path(cfg[key]).is_absolute() else cfg[key]
    for key in ("model", "plan", "probes", "corpus"):
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise UsageError(f"{key} file {cfg[key]} does not exist")
    return cfg


def cmd_run(args) -> int:
    cfg = _load_run_config(args.config)
    model = _load_model(cfg["model"])
    plan = None
    if cfg.get("plan"):
        try:
            plan = PL.load_plan(cfg["plan"], model)
        except (SchemaError, FingerprintMismatch) as exc:
            raise UsageError(str(exc)) from exc
    try:
        policy = P.make_policy(cfg["policy"], plan, cfg.get("window"), cfg.get("extreme_k", 0))
    except (ValueError, UncCacheError) as exc:
        raise UsageError(str(exc)) from exc
    probes = PL.load_corpus(cfg["probes"], model.config.max_context - cfg.get("steps", 16))
    hr_tokens = None
    ratios = [tuple(r) for r in cfg.get("ratios", [])]
    if ratios:
        source = cfg.get("corpus") or cfg["probes"]
        hr_tokens = PL.load_corpus(source, model.config.max_context)[0]
    needle = None
    if cfg.get("needle"):
        needle = {"seed": cfg.get("seed", 0), **cfg["needle"]}
    try:
        report = M.run_report(
            model, policy, probes,
            steps=cfg.get("steps", 16),
            hr_tokens=hr_tokens,
            ratios=ratios,
            needle=needle,
            timing=bool(cfg.get("timing", False)),
            threads=args.threads,
            k_mode=cfg.get("top_k", "elbow"),
        )
    except (UncCacheError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, f"run failed: {exc}")
    M.save_report(report, cfg["out"])
    rows = [(k, v) for k, v in M.compare_reports({"run": report})]
    print(_table(["metric", cfg["policy"]], [(k, v[0]) for k, v in rows]))
    return 0


def cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        try:
            reports[path] = M.load_report(path)
        except (SchemaError, FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"cannot load report {path}: {exc}") from exc
    names = [Path(p).stem for p in args.reports]
    rows = []
    for key, values in M.compare_reports(reports):
        base = values[0]
        deltas = [
            (v - base) if isinstance(v, (int, float)) and isinstance(base, (int, float)) else None
            for v in values[1:]
        ]
        rows.append([key, *values, *deltas])
    headers = ["metric", *names, *[f"d({n})" for n in names[1:]]]
    print(_table(headers, rows))
    return 0


def cmd_entropy(args) -> int:
    model = _load_model(args.model)
    if args.text_file:
        text = Path(args.text_file).read_text(encoding="utf-8")
    elif args.text is not None:
        text = args.text
    else:
        raise UsageError("entropy needs --text or --text-file")
    tokens = encode(text)[: model.config.max_context]
    source = SOURCE_FLAGS[args.source]
    try:
        caps = prefill(model, tokens, capture=True).captures
        trend, eig_rows = [], []
        for layer, cap in enumerate(caps):
            mats = PL._matrices(cap, source)
            vals = []
            for head, x in enumerate(mats):
                s = E.token_spectrum(x)
                vals.append(E.truncated_erank(s, E.resolve_k(s, args.top_k)))
                eig_rows += [(layer, head, i, repr(float(v))) for i, v in enumerate(s.eigenvalues)]
            trend.append(float(np.mean(vals)))
    except UncCacheError as exc:
        return _fail(EXIT_RUNTIME, f"entropy failed: {exc}")
    M.write_trend_csv(args.out, trend)
    eig_out = Path(args.eig_out) if args.eig_out else Path(args.out).with_suffix(".eigs.csv")
    tmp = eig_out.with_name(eig_out.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "index", "eigenvalue"])
        w.writerows(eig_rows)
    tmp.replace(eig_out)
    print(_table(["layer", "erank_k"], list(enumerate(trend))))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unccache", description="Entropy-guided KV cache compression on a toy transformer.")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for probe runs")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a deterministic UNCT weight bundle")
    g.add_argument("--config", default="toy", help="preset (toy, tiny, wired-copy) or JSON file of ModelConfig fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_model)

    for name, func in (("calibrate", cmd_calibrate), ("plan", cmd_plan)):
        p = sub.add_parser(name, help=f"{name} from a calibration corpus")
        p.add_argument("--model", required=True)
        p.add_argument("--corpus", required=name == "calibrate")
        if name == "plan":
            p.add_argument("--calibration", help="output of the calibrate command")
        p.add_argument("--epsilon", type=float, default=1.0)
        p.add_argument("--l", type=int, default=8)
        p.add_argument("--smin", type=int, default=1536)
        p.add_argument("--smax", type=int, default=4096)
        p.add_argument("--m", type=int, default=2)
        p.add_argument("--si1", type=int, default=512)
        p.add_argument("--dsh", type=int, default=256)
        p.add_argument("--groups", type=int, help="force the layer group count")
        p.add_argument("--top-k", type=_top_k, default="elbow")
        p.add_argument("--source", choices=[*SOURCE_FLAGS, *SOURCE_FLAGS.values()], default="q")
        p.add_argument("--samples", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    r = sub.add_parser("run", help="run a policy and write a report")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="side-by-side table of reports")
    c.add_argument("--reports", nargs="+", required=True)
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("entropy", help="per-layer erank trend and per-head eigenvalues as CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--text")
    e.add_argument("--text-file")
    e.add_argument("--source", choices=list(SOURCE_FLAGS), default="q")
    e.add_argument("--top-k", type=_top_k, default="elbow")
    e.add_argument("--out", required=True)
    e.add_argument("--eig-out")
    e.set_defaults(func=cmd_entropy)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
