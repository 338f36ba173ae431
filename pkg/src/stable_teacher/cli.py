"""Command-line entry point: ``stable-teacher {gen-data,train,evaluate,report}``.

Config files are flat ``key=value`` text with dotted namespaces::

    # lines starting with '#' are comments
    train.mode=full
    train.epochs=15
    train.detector_channels=16,32,64
    synth.train_per_class=60
    split.percent=10
    split.seed=0
    eval.iou_mode=box

Namespaces: ``train.*`` (training fields), ``synth.*`` (synthetic benchmark),
``split.percent|seed|path``, ``data.dir`` and ``eval.iou_mode|binarize_thresh|model``.
``--set key=value`` flags override file keys. Exit codes: 0 success,
1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import EvalReport, extract_tube, write_detections
from .synthdata import SynthConfig, generate_dataset, split_labeled_unlabeled
from .trainer import (MODES, CheckpointError, TrainConfig, TrainingAborted, _eval_sample,
                      evaluate_model, load_checkpoint, load_data, predict,
                      read_checkpoint_manifest, train)

log = logging.getLogger("stable_teacher")

CACHE_ENV = "STABLE_TEACHER_CACHE"
MODE_ORDER = ["supervised", "mean-teacher", "+eor", "+dop", "full"]

# namespaced aliases for TrainConfig fields that are not under train.*
ALIASES = {
    "split.percent": "percent_labeled",
    "split.seed": "split_seed",
    "split.path": "split_path",
    "data.dir": "dataset_dir",
    "eval.iou_mode": "iou_mode",
    "eval.binarize_thresh": "binarize_thresh",
    "eval.model": "eval_model",
}


class ConfigError(ValueError):
    """Bad configuration; maps to exit code 2."""


# config parsing ------------------------------------------------------------

def parse_kv_lines(lines: Sequence[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def read_config_file(path: Optional[str]) -> dict[str, str]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv_lines(p.read_text().splitlines(), str(p))


def _coerce(key: str, text: str, default):
    """Parse ``text`` into the type of ``default``."""
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (list, tuple)):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                items = [int(s) for s in items]
            return type(default)(items)
        if default is None:
            return None if text.lower() in ("", "none", "null") else text
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def build_config(values: dict[str, str]) -> TrainConfig:
    """Merge flat namespaced keys into a validated TrainConfig."""
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    synth_defaults = SynthConfig()
    train_kw, synth_kw = {}, {}
    for key, text in values.items():
        if key in ALIASES:
            name = ALIASES[key]
            train_kw[name] = _coerce(key, text, getattr(TrainConfig(), name))
        elif key.startswith("train."):
            name = key[len("train."):]
            if name not in train_fields or name == "synth":
                raise ConfigError(f"unknown key {key!r}")
            train_kw[name] = _coerce(key, text, getattr(TrainConfig(), name))
        elif key.startswith("synth."):
            name = key[len("synth."):]
            if not hasattr(synth_defaults, name):
                raise ConfigError(f"unknown key {key!r}")
            synth_kw[name] = _coerce(key, text, getattr(synth_defaults, name))
        else:
            raise ConfigError(f"unknown key {key!r}")
    synth = SynthConfig(**synth_kw)
    cfg = TrainConfig(**train_kw, synth=synth)
    check_config(cfg)
    return cfg


def check_config(cfg: TrainConfig) -> None:
    try:
        cfg.validate()
        cfg.synth.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if not 0 < cfg.percent_labeled <= 100:
        raise ConfigError(f"split.percent must be in (0, 100], got {cfg.percent_labeled}")
    if cfg.iou_mode not in ("box", "mask"):
        raise ConfigError(f"eval.iou_mode must be 'box' or 'mask', got {cfg.iou_mode!r}")


def dump_config(cfg: TrainConfig) -> str:
    """Serialize every setting as namespaced key=value lines (readable by build_config)."""
    inverse = {v: k for k, v in ALIASES.items()}
    lines = []

    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return "none" if v is None else str(v)

    for f in dataclasses.fields(TrainConfig):
        if f.name == "synth":
            continue
        key = inverse.get(f.name, f"train.{f.name}")
        lines.append(f"{key}={fmt(getattr(cfg, f.name))}")
    for f in dataclasses.fields(SynthConfig):
        lines.append(f"synth.{f.name}={fmt(getattr(cfg.synth, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def load_cli_config(path: Optional[str], overrides: Sequence[str]) -> TrainConfig:
    values = read_config_file(path)
    values.update(parse_kv_lines(overrides, "--set"))
    return build_config(values)


# commands -------------------------------------------------------------------

def _synth_cache_dir(synth: SynthConfig) -> Optional[Path]:
    root = os.environ.get(CACHE_ENV)
    if not root:
        return None
    digest = hashlib.sha256(json.dumps(synth.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    return Path(root) / f"synth-{digest}"


def _ensure_dataset(cfg: TrainConfig) -> TrainConfig:
    """Point ``dataset_dir`` at the cached copy of the synthetic benchmark, generating it once."""
    if cfg.dataset_dir:
        return cfg
    cache = _synth_cache_dir(cfg.synth)
    if cache is None:
        return cfg
    if not (cache / "dataset.json").exists():
        log.info("generating dataset cache at %s", cache)
        generate_dataset(cfg.synth, cache)
    return dataclasses.replace(cfg, dataset_dir=str(cache))


def cmd_gen_data(args) -> int:
    cfg = load_cli_config(args.config, args.set)
    out = Path(args.out)
    manifest = generate_dataset(cfg.synth, out)
    try:
        split = split_labeled_unlabeled(manifest, cfg.percent_labeled, cfg.split_seed)
    except ValueError as err:
        raise ConfigError(f"split.percent: {err}") from err
    split.save(out / "split.json")
    (out / "run_config.txt").write_text(dump_config(cfg))
    print(f"wrote {len(manifest['clips'])} clips and split ({len(split.labeled)} labeled, "
          f"{len(split.unlabeled)} unlabeled) to {out}")
    return 0


def _write_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    path.with_suffix(".csv").write_text(report.to_csv())


def cmd_train(args) -> int:
    cfg = load_cli_config(args.config, args.set)
    if args.mode:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("train needs --out (or train.out_dir)")
    cfg = dataclasses.replace(cfg, out_dir=str(out))
    check_config(cfg)
    cfg = _ensure_dataset(cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(dump_config(cfg))
    result = train(cfg, resume=args.resume, final_eval_split="test")
    _write_report(result.final_report, out / "report.json")
    summary = result.final_report.summary()
    print(f"{cfg.mode}: f-mAP@0.5={summary['f-mAP@0.5']:.4f} v-mAP@0.5={summary['v-mAP@0.5']:.4f} "
          f"coherence={summary['coherence']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = read_checkpoint_manifest(args.checkpoint)
    cfg = TrainConfig.from_dict(manifest["config"])
    if args.set:
        values = parse_kv_lines(args.set, "--set")
        for key in values:
            if not key.startswith("eval.") and key != "data.dir":
                raise ConfigError(f"evaluate only accepts eval.* and data.dir overrides, got {key!r}")
        for key, text in values.items():
            name = ALIASES[key] if key in ALIASES else None
            if name is None:
                raise ConfigError(f"unknown key {key!r}")
            cfg = dataclasses.replace(cfg, **{name: _coerce(key, text, getattr(TrainConfig(), name))})
        check_config(cfg)
    cfg = _ensure_dataset(cfg)
    state = load_checkpoint(args.checkpoint)
    data = load_data(cfg)
    ids = {"val": data.split.validation, "test": data.split.test}[args.split]
    model = state.teacher if cfg.eval_model == "teacher" else state.student
    report = evaluate_model(model, data, ids, cfg.iou_mode, cfg.binarize_thresh)
    _write_report(report, Path(args.out))
    if args.detections:
        samples = [_eval_sample(data.samples[i], model.config.clip_len) for i in ids]
        tubes = [extract_tube(o, cfg.binarize_thresh, sid) for sid, o in predict(model, samples)]
        write_detections(tubes, args.detections, with_masks=True)
    s = report.summary()
    print(" ".join(f"{k}={s[k]:.4f}" for k in ("f-mAP@0.5", "v-mAP@0.2", "v-mAP@0.5", "coherence")))
    return 0


# report ---------------------------------------------------------------------

def _read_run(run: Path) -> dict:
    cfg = json.loads((run / "config.json").read_text())
    info = {"name": run.name, "path": run, "config": cfg, "history": [], "losses": [], "report": None}
    if (run / "metrics.json").exists():
        info["history"] = json.loads((run / "metrics.json").read_text())
    if (run / "losses.csv").exists():
        with open(run / "losses.csv") as fh:
            info["losses"] = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    if (run / "report.json").exists():
        info["report"] = json.loads((run / "report.json").read_text())
    return info


def _metric(report: Optional[dict], kind: str, key: str, field: str = "mean", sub: Optional[str] = None):
    if report is None:
        return None
    entry = report[kind][key]
    return entry[field][sub] if sub else entry[field]


REPORT_COLUMNS = [("f-mAP@0.5", "f-mAP", "0.5"), ("f-mAP@0.5:0.95", "f-mAP", "0.5:0.95"),
                  ("v-mAP@0.2", "v-mAP", "0.2"), ("v-mAP@0.5", "v-mAP", "0.5")]


def _fmt(values: list) -> str:
    vals = [v for v in values if v is not None]
    if not vals:
        return "-"
    if len(vals) == 1:
        return f"{100 * vals[0]:.1f}"
    return f"{100 * np.mean(vals):.1f} ± {100 * np.std(vals):.1f}"


def ablation_table(runs: list[dict]) -> str:
    """Markdown table with one row per mode (mean ± std over seeds, in points)."""
    header = ["mode", "runs"] + [c[0] for c in REPORT_COLUMNS] + ["dynamic f-mAP@0.5", "coherence"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    modes = [m for m in MODE_ORDER if any(r["config"]["mode"] == m for r in runs)]
    for mode in modes:
        group = [r for r in runs if r["config"]["mode"] == mode]
        row = [mode, str(len(group))]
        for _, kind, key in REPORT_COLUMNS:
            row.append(_fmt([_metric(r["report"], kind, key) for r in group]))
        row.append(_fmt([_metric(r["report"], "f-mAP", "0.5", "by_background", "dynamic") for r in group]))
        coh = [r["report"]["coherence"] for r in group if r["report"] and r["report"]["coherence"] is not None]
        row.append(f"{np.mean(coh):.4f}" if coh else "-")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def combined_csv(runs: list[dict]) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [c[0] for c in REPORT_COLUMNS]
    w.writerow(["run", "mode", "seed", "percent_labeled", "epochs"] + cols
               + ["static f-mAP@0.5", "dynamic f-mAP@0.5", "coherence"])
    for r in runs:
        c, rep = r["config"], r["report"]
        vals = [_metric(rep, kind, key) for _, kind, key in REPORT_COLUMNS]
        vals += [_metric(rep, "f-mAP", "0.5", "by_background", b) for b in ("static", "dynamic")]
        vals.append(rep["coherence"] if rep else None)
        w.writerow([r["name"], c["mode"], c["seed"], c["percent_labeled"], c["epochs"]]
                   + ["" if v is None else v for v in vals])
    return buf.getvalue()


def emit_plots(runs: list[dict], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    written = []
    for r in runs:
        if not r["losses"]:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        steps = [row["step"] for row in r["losses"]]
        for col in ("total", "sup_cls", "sup_loc"):
            ax.plot(steps, [row[col] for row in r["losses"]], label=col, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.set_title(f"{r['name']} ({r['config']['mode']})")
        ax.legend()
        fig.tight_layout()
        path = out / f"loss_{r['name']}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    scored = [r for r in runs if r["report"]]
    if not scored:
        return written
    # mAP against labeled percentage, one line per mode
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in MODE_ORDER:
        group = [r for r in scored if r["config"]["mode"] == mode]
        if not group:
            continue
        pcts = sorted({r["config"]["percent_labeled"] for r in group})
        means = [np.mean([_metric(r["report"], "f-mAP", "0.5") for r in group
                          if r["config"]["percent_labeled"] == p]) for p in pcts]
        ax.plot(pcts, [100 * m for m in means], marker="o", label=mode)
    ax.set_xlabel("labeled data (%)")
    ax.set_ylabel("f-mAP@0.5")
    ax.legend()
    fig.tight_layout()
    path = out / "map_vs_percent.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)

    # per-class bars, one group per class
    names = list(scored[0]["report"]["f-mAP"]["0.5"]["per_class"])
    modes = [m for m in MODE_ORDER if any(r["config"]["mode"] == m for r in scored)]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(names)), 3.5))
    width = 0.8 / max(1, len(modes))
    for i, mode in enumerate(modes):
        group = [r for r in scored if r["config"]["mode"] == mode]
        vals = [np.mean([_metric(r["report"], "f-mAP", "0.5", "per_class", n) or 0.0 for r in group])
                for n in names]
        ax.bar(np.arange(len(names)) + i * width, [100 * v for v in vals], width, label=mode)
    ax.set_xticks(np.arange(len(names)) + 0.4 - width / 2)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("f-mAP@0.5")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = out / "per_class.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)
    return written


def cmd_report(args) -> int:
    missing = [r for r in args.runs if not (Path(r) / "config.json").is_file()]
    if missing:
        raise ConfigError("run directories not found or incomplete: " + ", ".join(missing))
    runs = [_read_run(Path(r)) for r in args.runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").write_text(combined_csv(runs))
    (out / "ablation.md").write_text(ablation_table(runs))
    plots = emit_plots(runs, out)
    print(f"wrote runs.csv, ablation.md and {len(plots)} plots to {out}")
    return 0


# entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stable-teacher",
                                description="Data generation, training, evaluation and reports.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark and a split")
    with_config(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one ablation mode")
    with_config(t)
    t.add_argument("--mode", choices=sorted(MODES))
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["val", "test"], default="test")
    e.add_argument("--out", required=True, help="report JSON path (CSV written alongside)")
    e.add_argument("--detections", help="also write per-video detections as JSON lines")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tables and plots over run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (TrainingAborted, CheckpointError, OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
