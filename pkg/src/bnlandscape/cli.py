"""Command-line experiment runner.

Usage::

    python -m bnlandscape {train,ics,probe,verify,compare} [--config PATH]
        [--set SECTION.KEY=VALUE ...] [--seed N] [--out DIR]

The config is one JSON document with flat sections (see ``DEFAULTS``).  A
``manifest.json`` written by an earlier run is accepted as ``--config`` and
reproduces that run.  Exit codes: 0 success, 1 config error, 2 unexpected
divergence, 3 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .instrumentation import IcsHook, MomentHook, ProbeHook, dln_multipliers, mlp_multipliers
from .networks import build_dln, build_mlp, NORM_KINDS
from .norm_layers import BatchNormParams, NoiseConfig
from .tensor_core import Rng
from .training import MODES, TrainConfig, train
from . import theory

SCHEMA = 1

# ``None`` means "family default", filled in by ``resolve``.
DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "model": {
        "family": "dln",       # dln | mlp
        "depth": 25,           # dln
        "dim": 10,             # dln
        "dims": [16, 32, 32, 10, 3],  # mlp: input, hidden..., classes
        "n": None,             # dln 1000, mlp 1024
        "norm": "none",        # none | bn | noisy_bn | noise | lp1 | lp2 | lpinf
        "norm_last": False,    # dln: also normalize after the last Dense
        "bundle_norm": True,   # gamma/beta share a layer with the preceding Dense
        "eps": 1e-5,
        "noise_n_mu": 0.5,
        "noise_n_sigma": 1.25,
        "noise_r_mu": 0.1,
        "noise_r_sigma": 0.1,
        "separation": 1.0,     # mlp data: std of the class means
        "spread": 1.0,         # mlp data: within-class std
    },
    "train": {
        "lr": None,            # dln 1e-6 on the per-sample mean loss, mlp 0.1
        "steps": None,         # dln 10000, mlp 400
        "batch_size": None,    # dln full batch (0), mlp 128
        "mode": "simultaneous",
        "compress": True,
    },
    "instrument": {
        "ics_every": 50,
        "probe_every": 50,
        "multipliers": None,   # dln 20 log-spaced in [0.01, 30], mlp 8 in [0.5, 4]
        "moment_every": 50,
        "moment_layer": 1,
        "moment_units": [0, 1, 2],
    },
    "compare": {
        "variants": ["vanilla", "bn", "noisy_bn", "lp1", "lp2", "lpinf", "adjusted", "reduced_lr"],
        "seeds": [0, 1, 2, 3, 4],
    },
    "verify": {
        "seeds": 100,
        "m_min": 3,
        "m_max": 16,
        "d_min": 1,
        "d_max": 8,
        "downstream": "quadratic",
        "lambda": 2.5,
    },
}

FAMILY_DEFAULTS = {
    "dln": {"n": 1000, "lr": 1e-6, "steps": 10000, "batch_size": 0},
    "mlp": {"n": 1024, "lr": 0.1, "steps": 400, "batch_size": 128},
}

# compare variant -> (norm, training mode)
VARIANTS = {
    "vanilla": ("none", "simultaneous"),
    "bn": ("bn", "simultaneous"),
    "noisy_bn": ("noisy_bn", "simultaneous"),
    "noise": ("noise", "simultaneous"),
    "lp1": ("lp1", "simultaneous"),
    "lp2": ("lp2", "simultaneous"),
    "lpinf": ("lpinf", "simultaneous"),
    "adjusted": ("none", "adjusted"),
    "reduced_lr": ("none", "reduced_lr"),
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, sets=(), seed=None, out=None) -> dict:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if isinstance(raw, dict) and "schema" in raw and "config" in raw:
            raw = raw["config"]
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    for item in sets:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        parts = key.split(".")
        cfg = _merge(cfg, _nest(parts, _parse_value(text)))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return resolve(cfg)


def _nest(parts, value):
    return {parts[0]: value} if len(parts) == 1 else {parts[0]: _nest(parts[1:], value)}


def resolve(cfg: dict) -> dict:
    """Fill family defaults and validate; the result has no ``None`` placeholders."""
    cfg = copy.deepcopy(cfg)
    model, tr, ins = cfg["model"], cfg["train"], cfg["instrument"]
    fam = model["family"]
    if fam not in FAMILY_DEFAULTS:
        raise ConfigError(f"model.family must be dln or mlp, got {fam!r}")
    fd = FAMILY_DEFAULTS[fam]
    if model["n"] is None:
        model["n"] = fd["n"]
    for key in ("lr", "steps", "batch_size"):
        if tr[key] is None:
            tr[key] = fd[key]
    if ins["multipliers"] is None:
        ins["multipliers"] = dln_multipliers() if fam == "dln" else mlp_multipliers()
    ins["multipliers"] = [float(a) for a in ins["multipliers"]]
    if model["norm"] not in NORM_KINDS:
        raise ConfigError(f"model.norm must be one of {sorted(NORM_KINDS)}")
    if tr["mode"] not in MODES:
        raise ConfigError(f"train.mode must be one of {MODES}")
    for v in cfg["compare"]["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown compare variant {v!r}; choose from {sorted(VARIANTS)}")
    try:
        for key in ("ics_every", "probe_every", "moment_every"):
            _train_config(cfg, hook_every=ins[key])
        _noise(cfg)
        if not isinstance(cfg["seed"], int):
            raise ValueError("seed must be an integer")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _noise(cfg) -> NoiseConfig:
    m = cfg["model"]
    return NoiseConfig(m["noise_n_mu"], m["noise_n_sigma"], m["noise_r_mu"], m["noise_r_sigma"])


def _train_config(cfg, mode=None, seed=None, hook_every=1) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(lr=float(tr["lr"]), steps=int(tr["steps"]),
                       batch_size=int(tr["batch_size"]) or None, mode=mode or tr["mode"],
                       seed=cfg["seed"] if seed is None else seed, hook_every=int(hook_every),
                       compress=bool(tr["compress"]))


def build_model(cfg, norm=None, seed=None):
    m = cfg["model"]
    norm = norm or m["norm"]
    seed = cfg["seed"] if seed is None else seed
    if m["family"] == "dln":
        return build_dln(m["depth"], m["dim"], seed, norm, n=m["n"], norm_last=m["norm_last"],
                         eps=m["eps"], noise=_noise(cfg), bundle_norm=m["bundle_norm"])
    return build_mlp(m["dims"], norm, seed, n=m["n"], eps=m["eps"], noise=_noise(cfg),
                     separation=m["separation"], spread=m["spread"], bundle_norm=m["bundle_norm"])


# -- output -------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    _atomic_write(path, buf.getvalue())


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out: Path, command: str, cfg: dict, artifacts, started: float,
                   divergence=None) -> Path:
    manifest = {
        "schema": SCHEMA,
        "command": command,
        "config": cfg,
        "artifacts": sorted(artifacts),
        "wall_clock_seconds": time.time() - started,
        "divergence": divergence or {},
        "version": __version__,
    }
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _divergence_info(trace) -> dict:
    return {"diverged": trace.diverged, "step": trace.diverge_step, "reason": trace.diverge_reason}


def _unexpected(trace, mode) -> bool:
    return trace.diverged and mode != "adjusted"


# -- subcommands ----------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    started = time.time()
    out = Path(cfg["out"])
    net, data = build_model(cfg)
    ins = cfg["instrument"]
    hook = MomentHook(ins["moment_layer"], ins["moment_units"], ins["moment_every"])
    tcfg = _train_config(cfg, hook_every=ins["moment_every"])
    trace = train(net, data, tcfg, [hook])
    write_csv(out / "loss.csv", ["step", "loss"], enumerate(trace.losses))
    write_csv(out / "moments.csv", ["step", "layer", "unit", "mean", "variance"],
              [(r.step, r.layer, r.unit, r.mean, r.variance) for r in hook.records])
    write_manifest(out, "train", cfg, ["loss.csv", "moments.csv"], started, _divergence_info(trace))
    return 2 if _unexpected(trace, tcfg.mode) else 0


def cmd_ics(cfg: dict) -> int:
    started = time.time()
    out = Path(cfg["out"])
    net, data = build_model(cfg)
    hook = IcsHook(cfg["instrument"]["ics_every"])
    tcfg = _train_config(cfg, hook_every=cfg["instrument"]["ics_every"])
    trace = train(net, data, tcfg, [hook])
    write_csv(out / "ics.csv", ["step", "layer", "l2_diff", "cos_angle"],
              [(r.step, r.layer, r.l2_diff, r.cos_angle) for r in hook.records])
    write_manifest(out, "ics", cfg, ["ics.csv"], started, _divergence_info(trace))
    return 2 if _unexpected(trace, tcfg.mode) else 0


def cmd_probe(cfg: dict) -> int:
    started = time.time()
    out = Path(cfg["out"])
    net, data = build_model(cfg)
    ins = cfg["instrument"]
    hook = ProbeHook(ins["probe_every"], ins["multipliers"])
    tcfg = _train_config(cfg, hook_every=ins["probe_every"])
    trace = train(net, data, tcfg, [hook])
    rows = []
    for rep in hook.reports:
        for a, loss, diff in zip(rep.multipliers, rep.losses, rep.grad_l2_diffs):
            rows.append((rep.step, a, loss, diff, None, None, None, None))
        rows.append((rep.step, None, rep.base_loss, None, rep.effective_beta,
                     rep.loss_min, rep.loss_max, rep.loss_median))
    write_csv(out / "landscape.csv", ["step", "multiplier", "loss", "grad_l2_diff", "effective_beta",
                                      "loss_min", "loss_max", "loss_median"], rows)
    write_manifest(out, "probe", cfg, ["landscape.csv"], started, _divergence_info(trace))
    return 2 if _unexpected(trace, tcfg.mode) else 0


def verify_instance(seed: int, vcfg: dict) -> list[dict]:
    """All theorem checks on one randomized instance; a failed precondition gives a skip entry."""
    rng = Rng(seed).split("verify")
    m = int(rng.integers(vcfg["m_min"], vcfg["m_max"] + 1))
    d = int(rng.integers(vcfg["d_min"], vcfg["d_max"] + 1))
    lam = float(vcfg["lambda"])
    out = []

    def run(name, fn):
        try:
            rep = fn()
        except ValueError as exc:
            out.append({"name": name, "seed": seed, "skipped": True, "reason": str(exc),
                        "m": m, "d": d})
            return
        d_ = rep.to_dict()
        d_.update({"skipped": False, "m": m, "d": d})
        out.append(d_)

    try:
        pair = theory.build_coupled_pair(m, d, vcfg["downstream"], seed)
    except ValueError as exc:
        return [{"name": "build_coupled_pair", "seed": seed, "skipped": True, "reason": str(exc),
                 "m": m, "d": d}]
    run("lipschitz", lambda: theory.check_lipschitz(pair))
    run("smoothness", lambda: theory.check_smoothness(pair))
    run("minimax_lipschitz", lambda: theory.check_minimax_lipschitz(pair, lam))
    run("minimax_smoothness", lambda: theory.check_minimax_smoothness(pair, lam))
    run("minimax_smoothness_homogeneity", lambda: theory.check_minimax_smoothness_homogeneity(pair))
    run("rescaling_observation", lambda: theory.check_rescaling_observation(
        pair.W, pair.X, pair.downstream, seed))
    w0 = rng.split("w0").normal(size=pair.W.shape)
    ws = rng.split("wstar").normal(size=pair.W.shape)
    if np.sum(w0 * ws) <= 0:
        ws = -ws
    run("init_lemma", lambda: theory.check_init_lemma(w0, ws, seed=seed))
    r = rng.split("bn")
    params = BatchNormParams(r.normal(size=d), r.normal(size=d), eps=0.0)
    run("bn_gradient_facts", lambda: theory.check_bn_gradient_facts(pair.y, params, seed=seed))
    return out


def cmd_verify(cfg: dict) -> int:
    started = time.time()
    out = Path(cfg["out"])
    vcfg = cfg["verify"]
    reports = []
    for seed in range(cfg["seed"], cfg["seed"] + int(vcfg["seeds"])):
        reports.extend(verify_instance(seed, vcfg))
    text = json.dumps(reports, indent=1, default=_json_default, allow_nan=True) + "\n"
    _atomic_write(out / "verify.json", text)
    failed = [r for r in reports if not r.get("skipped") and not r["passed"]]
    write_manifest(out, "verify", cfg, ["verify.json"], started,
                   {"failed_checks": len(failed)})
    return 3 if failed else 0


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def run_variant(cfg: dict, variant: str, seed: int) -> dict:
    norm, mode = VARIANTS[variant]
    net, data = build_model(cfg, norm=norm, seed=seed)
    trace = train(net, data, _train_config(cfg, mode=mode, seed=seed))
    losses = trace.losses
    if trace.diverged or not losses:
        final = losses[-1] if losses else math.nan
    else:
        final, _ = trace.net.evaluate(data.full_batch(), step=trace.steps, grads=False)
    return {
        "variant": variant, "seed": seed,
        "initial_loss": losses[0] if losses else math.nan,
        "final_loss": final,
        "tail_loss": float(np.mean(losses[-max(1, len(losses) // 10):])) if losses else math.nan,
        "auc_loss": float(np.mean(losses)) if losses else math.nan,
        "grad_evals": trace.grad_evals, "steps": trace.steps,
        "diverged": trace.diverged, "diverge_step": trace.diverge_step,
    }


SUMMARY_COLUMNS = ["variant", "seed", "initial_loss", "final_loss", "tail_loss", "auc_loss",
                   "grad_evals", "steps", "diverged", "diverge_step"]


def cmd_compare(cfg: dict) -> int:
    started = time.time()
    out = Path(cfg["out"])
    rows = [run_variant(cfg, v, s) for s in cfg["compare"]["seeds"] for v in cfg["compare"]["variants"]]
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in rows])
    unexpected = [r for r in rows if r["diverged"] and VARIANTS[r["variant"]][1] != "adjusted"]
    write_manifest(out, "compare", cfg, ["summary.csv"], started,
                   {"diverged": [f"{r['variant']}:{r['seed']}" for r in rows if r["diverged"]]})
    return 2 if unexpected else 0


COMMANDS = {"train": cmd_train, "ics": cmd_ics, "probe": cmd_probe, "verify": cmd_verify,
            "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnlandscape", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config or a manifest.json from an earlier run")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. train.lr=0.01 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.sets, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
