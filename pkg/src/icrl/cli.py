"""``icrl`` command line: datagen, train, eval, experiment run, report.

Settings resolve in this order, later winning: built-in defaults, the
``--profile`` preset, a flat ``key = value`` file given with ``--config``,
then flags on the command line. The resolved settings are written as
``config.txt`` next to each command's outputs and can be fed back with
``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("icrl")


class UsageError(Exception):
    """Bad flags or settings; exit code 1."""


PROFILE_DEFAULTS = {
    "paper": {
        "datagen": {"n_maps": 250, "size_min": 3, "size_max": 5, "hole_prob": 0.2, "slice_len": 4096},
        "train": {"max_context": 4096, "base_lr": 1e-2, "total_batches": 20_000},
    },
    "desk": {
        "datagen": {"n_maps": 1000, "size_min": 3, "size_max": 4, "hole_prob": 0.4, "slice_len": 1024},
        "train": {"max_context": 1024, "base_lr": 1e-2, "total_batches": 2000},
    },
}

DEFAULTS = {
    "datagen": {"tier": "mid", "seed": 0, "episodes_per_map": 600, "n_sets": 0, "workers": 1,
                "n_maps": 250, "size_min": 3, "size_max": 5, "hole_prob": 0.2, "slice_len": 4096},
    "train": {"alpha": 0.1, "gamma": 0.9, "reward_scale": 30.0, "base_lr": 1e-2, "warmup_batches": 10,
              "batch_slices": 10, "total_batches": 20_000, "seed": 0, "ckpt_every": 0, "grad_clip": 0.0,
              "n_layers": 4, "n_heads": 4, "d_model": 128, "d_ff": 512, "max_context": 1024, "dropout": 0.0,
              "log_every": 50},
    "eval": {"episodes": 30, "trials": 1, "n_maps": 50, "size_min": 3, "size_max": 5, "hole_prob": 0.2,
             "seed": 0, "warmup_episodes": 20, "workers": 1},
    "experiment": {"seed": 0, "workers": 1},
    "report": {},
}


def _add_common(p: argparse.ArgumentParser, with_profile: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="flat key = value settings file")
    if with_profile:
        p.add_argument("--profile", choices=sorted(PROFILE_DEFAULTS), default=S, help="preset sizes (default paper)")
    p.add_argument("--workers", type=int, default=S, help="worker processes (fallback: ICRL_WORKERS)")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="icrl", description="In-context RL on Frozen Lake with a DQN-trained transformer.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a training dataset of token slices")
    _add_common(p)
    p.add_argument("--out", required=True)
    for name, typ in [("n-maps", int), ("size-min", int), ("size-max", int), ("hole-prob", float),
                      ("episodes-per-map", int), ("n-sets", int), ("slice-len", int), ("seed", int)]:
        p.add_argument(f"--{name}", type=typ, default=S)
    p.add_argument("--tier", choices=["high", "mid", "low"], default=S)

    p = sub.add_parser("train", help="fit the Q-transformer on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for name, typ in [("alpha", float), ("gamma", float), ("reward-scale", float), ("base-lr", float),
                      ("warmup-batches", int), ("batch-slices", int), ("total-batches", int), ("seed", int),
                      ("ckpt-every", int), ("grad-clip", float), ("n-layers", int), ("n-heads", int),
                      ("d-model", int), ("d-ff", int), ("max-context", int), ("dropout", float),
                      ("log-every", int)]:
        p.add_argument(f"--{name}", type=typ, default=S)

    p = sub.add_parser("eval", help="evaluate a checkpoint on generated maps")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-data", default=S, help="dataset directory whose maps must be excluded")
    for name, typ in [("episodes", int), ("trials", int), ("n-maps", int), ("size-min", int), ("size-max", int),
                      ("hole-prob", float), ("seed", int), ("warmup-episodes", int)]:
        p.add_argument(f"--{name}", type=typ, default=S)

    p = sub.add_parser("experiment", help="run one of the evaluation experiments")
    esub = p.add_subparsers(dest="action", parser_class=_Parser)
    r = esub.add_parser("run")
    _add_common(r)
    r.add_argument("--kind", required=True, choices=["unseen", "ood", "stitch", "quality", "nonstat"])
    r.add_argument("--ckpt", default=S, help="checkpoint path; comma-separate several for an alpha sweep")
    r.add_argument("--out", required=True)
    r.add_argument("--train-data", default=S)
    for name, typ in [("seed", int), ("n-maps", int), ("trials", int), ("episodes", int),
                      ("total-batches", int), ("base-lr", float)]:
        r.add_argument(f"--{name}", type=typ, default=S)

    p = sub.add_parser("report", help="redraw curve plots from stored CSVs")
    p.add_argument("--dir", required=True)
    return parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def write_config(path, settings: dict) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(settings.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _coerce(parser: argparse.ArgumentParser, key: str, raw: str, known: dict):
    for act in parser._actions:
        if act.dest == key and act.type is not None:
            try:
                return act.type(raw)
            except ValueError as e:
                raise UsageError(f"config value for {key}: {e}") from None
    ref = known.get(key)
    try:
        if isinstance(ref, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
    except ValueError as e:
        raise UsageError(f"config value for {key}: {e}") from None
    return raw


def resolve(command: str, ns: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "action")}
    profile = explicit.get("profile")
    cfg_path = explicit.pop("config", None)
    file_vals = read_config(cfg_path) if cfg_path else {}
    if profile is None:
        profile = file_vals.get("profile", "paper")
    if profile not in PROFILE_DEFAULTS:
        raise UsageError(f"unknown profile {profile!r}")
    merged = dict(DEFAULTS.get(command, {}))
    merged.update(PROFILE_DEFAULTS[profile].get(command, {}))
    allowed = set(merged) | {a.dest for a in parser._actions} | {"profile"}
    for k, raw in file_vals.items():
        if k not in allowed:
            raise UsageError(f"unknown setting {k!r} in {cfg_path}")
        merged[k] = _coerce(parser, k, raw, merged)
    merged.update(explicit)
    merged["profile"] = profile
    if "workers" in merged and "workers" not in explicit and "workers" not in file_vals:
        env_w = os.environ.get("ICRL_WORKERS")
        if env_w:
            try:
                merged["workers"] = int(env_w)
            except ValueError:
                raise UsageError(f"ICRL_WORKERS must be an integer, got {env_w!r}") from None
    return merged


# --- commands ---

def cmd_datagen(s: dict) -> None:
    from . import datagen

    out = Path(s["out"])
    t = time.time()
    ds = datagen.generate_dataset(n_maps=s["n_maps"], tier=s["tier"], seed=s["seed"],
                                  size_range=(s["size_min"], s["size_max"]), hole_prob=s["hole_prob"],
                                  episodes_per_map=s["episodes_per_map"], n_sets=s["n_sets"] or None,
                                  slice_len=s["slice_len"], workers=s["workers"])
    ds.save(out)
    write_config(out / "config.txt", s)
    log.info("wrote %d slices over %d maps to %s in %.1fs", len(ds), len(ds.maps), out, time.time() - t)


def cmd_train(s: dict) -> None:
    from . import datagen
    from .model import ModelConfig
    from .trainer import TrainConfig, save_checkpoint, train, write_metrics

    ds = datagen.Dataset.load(s["data"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig(n_layers=s["n_layers"], n_heads=s["n_heads"], d_model=s["d_model"], d_ff=s["d_ff"],
                      max_context=s["max_context"], dropout=s["dropout"])
    tcfg = TrainConfig(gamma=s["gamma"], reward_scale=s["reward_scale"], alpha=s["alpha"], base_lr=s["base_lr"],
                       warmup_batches=s["warmup_batches"], batch_slices=s["batch_slices"],
                       slice_len=ds.tokens.shape[1], total_batches=s["total_batches"], seed=s["seed"],
                       grad_clip=s["grad_clip"], ckpt_every=s["ckpt_every"])
    write_config(out / "config.txt", s)
    header = {"alpha": tcfg.alpha, "dataset": ds.manifest, "train": vars(tcfg)}
    t0 = time.time()

    def on_batch(state, row):
        if s["log_every"] and row["batch"] % s["log_every"] == 0:
            log.info("batch %d loss %.4f |y| %.3f lr %.2e (%.0fs)", row["batch"], row["loss"],
                     row["mean_abs_target"], row["lr"], time.time() - t0)
        if tcfg.ckpt_every and row["batch"] % tcfg.ckpt_every == 0:
            save_checkpoint(out / f"ckpt_{row['batch']:06d}.ckpt", state.params, cfg, {**header, "batch": row["batch"]})
            write_metrics(out / "metrics.csv", state.log)

    state = train(ds.tokens, cfg, tcfg, on_batch=on_batch)
    save_checkpoint(out / "model.ckpt", state.params, cfg, {**header, "batch": state.batch})
    write_metrics(out / "metrics.csv", state.log)
    (out / "maps.jsonl").write_text((Path(s["data"]) / "maps.jsonl").read_text())
    log.info("trained %d batches in %.0fs; checkpoint %s", state.batch, time.time() - t0, out / "model.ckpt")


def _train_maps(s: dict) -> list:
    from .datagen import read_maps

    src = s.get("train_data")
    return read_maps(Path(src) / "maps.jsonl") if src else []


def _load_models(spec: str) -> dict:
    from .model import QModel
    from .numerics import checkpoint

    models = {}
    for path in spec.split(","):
        _, header = checkpoint.load(path)
        label = f"alpha={header['alpha']}" if "alpha" in header else Path(path).stem
        if label in models:
            label = f"{label}:{Path(path).stem}"
        models[label] = QModel.load(path)
    return models


def cmd_eval(s: dict) -> None:
    from .experiments import ExperimentSpec, run_unseen

    spec = ExperimentSpec("unseen", n_maps=s["n_maps"], trials=s["trials"], episodes=s["episodes"],
                          size_range=(s["size_min"], s["size_max"]), hole_prob=s["hole_prob"], seed=s["seed"],
                          warmup_episodes=s["warmup_episodes"], workers=s["workers"])
    res = run_unseen(_load_models(s["ckpt"]), spec, _train_maps(s))
    out = res.write(s["out"])
    write_config(out / "config.txt", s)
    print(json.dumps({k: v for k, v in res.report.items() if k != "spec"}, indent=2, sort_keys=True))


def cmd_experiment(s: dict) -> None:
    from . import experiments as ex

    kind = s["kind"]
    overrides = {k: s.get(k) for k in ("n_maps", "trials", "episodes")}
    spec = ex.ExperimentSpec.from_profile(kind, s["profile"], seed=s["seed"], workers=s["workers"], **overrides)
    train_maps = _train_maps(s)
    if kind == "quality":
        from .model import ModelConfig
        from .trainer import TrainConfig

        prof = PROFILE_DEFAULTS[s["profile"]]
        tr = {**DEFAULTS["train"], **prof["train"]}
        dg = {**DEFAULTS["datagen"], **prof["datagen"]}
        cfg = ModelConfig(max_context=tr["max_context"])
        tcfg = TrainConfig(slice_len=dg["slice_len"], base_lr=s.get("base_lr", tr["base_lr"]),
                           total_batches=s.get("total_batches", tr["total_batches"]), seed=s["seed"])
        res = ex.run_quality(spec, cfg, tcfg, n_train_maps=dg["n_maps"], data_seed=s["seed"], workers=s["workers"])
    else:
        if "ckpt" not in s:
            raise UsageError(f"experiment {kind} needs --ckpt")
        models = _load_models(s["ckpt"])
        if kind == "unseen":
            res = ex.run_unseen(models, spec, train_maps)
        elif kind == "ood":
            res = ex.run_ood(models, spec, train_maps)
        elif kind == "nonstat":
            res = ex.run_nonstationary(next(iter(models.values())), spec, train_maps)
        else:
            res = ex.run_stitching(next(iter(models.values())), spec, train_maps=train_maps)
    out = res.write(s["out"])
    write_config(out / "config.txt", s)
    print(json.dumps({k: v for k, v in res.report.items() if k not in ("spec", "scenarios")} or res.report,
                     indent=2, sort_keys=True, default=str))


def cmd_report(s: dict) -> None:
    from .evaluation import read_curve_csv
    from .render import render_curves

    d = Path(s["dir"])
    files = sorted(d.glob("curve_*.csv"))
    if not files:
        raise UsageError(f"no curve_*.csv files in {d}")
    curves, errs = {}, {}
    for f in files:
        c = read_curve_csv(f)
        label = f.stem[len("curve_"):]
        curves[label], errs[label] = c["mean_reward"], c["stderr"]
    marker = None
    rep = d / "report.json"
    if rep.exists():
        meta = json.loads(rep.read_text())
        if "switch_at" in meta:
            marker = meta["switch_at"] + 1
    (d / "curves.svg").write_text(render_curves(curves, errs, title=d.name, marker=marker))
    print(d / "curves.svg")


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "experiment": cmd_experiment,
            "report": cmd_report}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help()
            return 1
        if ns.command == "experiment" and getattr(ns, "action", None) is None:
            raise UsageError("icrl experiment: missing action (run)")
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        if ns.command == "experiment":
            sub = sub._subparsers._group_actions[0].choices["run"]
        settings = resolve(ns.command, ns, sub)
        COMMANDS[ns.command](settings)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("run failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
