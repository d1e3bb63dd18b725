"""Command-line entry point: gen / train / eval / ablate / gradcheck.

Options resolve as defaults < config file < explicit flags; every run prints
its fully-resolved configuration, and every CSV ends with a comment line
carrying the hash of that configuration. Exit codes: 0 success, 1 runtime
failure, 2 usage or config error. ``CAFE_SEED`` supplies the seed when
neither flag nor config file does.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import os
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import numerics as nm
from . import predictor as pred
from .montage import as_fraction, make_layout, select_ld_layout
from .predictor import PredictorHyper, load_model, save_model
from .synthdata import GEN_KINDS, MONTAGE_KINDS, GenConfig, gen_montage, load_dataset, make_dataset
from .training import SCHEMES, TrainConfig, log_to_csv_lines

SCHEME_ALIASES = {"tf": "tf", "ss": "ss", "rollout": "rollout"}
ORDER_CHOICES = ("proximal", "distal", "random")


class ConfigError(ValueError):
    """Bad or unknown configuration keys/values; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config resolution

GEN_DEFAULTS = {
    "kind": "grid",
    "gen": "correlated",
    "ch": "32",
    "factor": "4",
    "anchors": "",
    "t": "128",
    "rate": "128.0",
    "sources": "8",
    "sigma_frac": "0.3",
    "sigma": "",
    "band": "2:30",
    "noise_std": "0.02",
    "n_train": "200",
    "n_val": "20",
    "n_test": "40",
    "seed": "",
    "layout_seed": "0",
}

TRAIN_DEFAULTS = {
    "backbone": "conv",
    "scheme": "ss",
    "pi": "0.95",
    "groups": "3",
    "fractions": "1/6,1/2",
    "sizes": "",
    "order": "proximal",
    "epochs": "30",
    "batch": "16",
    "lr": "0.001",
    "optimizer": "adam",
    "seed": "",
    "input_mode": "mask_appended",
    "hidden": "64",
    "feat": "32",
    "conv_width": "32",
    "kernel": "5",
    "ff": "64",
    "pi_decay": "0.0",
}

EVAL_DEFAULTS = {
    "split": "test",
    "noise_snr": "",
    "noise_seed": "0",
}

ABLATE_DEFAULTS = dict(
    TRAIN_DEFAULTS,
    **{
        "seeds": "5",
        "schedules": "",
        "epochs": "20",
    },
)


def _load_config_section(path: str | None, section: str, defaults: dict) -> dict:
    resolved = dict(defaults)
    if not path:
        return resolved
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found")
    if parser.has_section(section):
        for key, val in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}] of {path}")
            resolved[key] = val
    return resolved


def _apply_flags(resolved: dict, args: argparse.Namespace, keys) -> dict:
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = str(val)
    return resolved


def _resolve_seed(resolved: dict) -> int:
    if resolved.get("seed", ""):
        return int(resolved["seed"])
    env = os.environ.get("CAFE_SEED", "")
    return int(env) if env else 0


def _echo_config(name: str, resolved: dict) -> str:
    lines = [f"[{name}]"]
    for key in sorted(resolved):
        lines.append(f"{key} = {resolved[key]}")
    text = "\n".join(lines)
    print(text)
    return text


def _config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_csv(path, header, rows, config_hash: str) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row[col]) for col in header))
    lines.append(f"# config_hash={config_hash}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_config_from(resolved: dict) -> TrainConfig:
    try:
        scheme = SCHEME_ALIASES[resolved["scheme"]]
    except KeyError:
        raise ConfigError(f"unknown scheme {resolved['scheme']!r} (use {'/'.join(SCHEMES)})")
    if resolved["order"] not in ORDER_CHOICES:
        raise ConfigError(f"unknown order {resolved['order']!r}")
    hyper = PredictorHyper(
        hidden=int(resolved["hidden"]),
        feat=int(resolved["feat"]),
        conv_width=int(resolved["conv_width"]),
        kernel=int(resolved["kernel"]),
        ff=int(resolved["ff"]),
    )
    fractions = tuple(
        as_fraction(s) for s in resolved["fractions"].split(",") if s.strip()
    )
    try:
        return TrainConfig(
            backbone=resolved["backbone"],
            n_groups=int(resolved["groups"]),
            split_fractions=fractions,
            order_kind=resolved["order"],
            pi=float(resolved["pi"]),
            epochs=int(resolved["epochs"]),
            batch_size=int(resolved["batch"]),
            learning_rate=float(resolved["lr"]),
            optimizer_kind=resolved["optimizer"],
            seed=_resolve_seed(resolved),
            scheme=scheme,
            input_mode=resolved["input_mode"],
            hyper=hyper,
            pi_decay=float(resolved["pi_decay"]),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    resolved = _load_config_section(args.config, "gen", GEN_DEFAULTS)
    _apply_flags(resolved, args, GEN_DEFAULTS.keys())
    text = _echo_config("gen", resolved)
    if resolved["kind"] not in MONTAGE_KINDS:
        raise ConfigError(f"unknown montage kind {resolved['kind']!r}")
    if resolved["gen"] not in GEN_KINDS:
        raise ConfigError(f"unknown generator {resolved['gen']!r}")
    seed = _resolve_seed(resolved)
    c_h = int(resolved["ch"])
    montage = gen_montage(resolved["kind"], c_h, seed=int(resolved["layout_seed"]))
    if resolved["anchors"]:
        c_l = int(resolved["anchors"])
    else:
        factor = int(resolved["factor"])
        if factor < 2 or c_h % factor:
            raise ConfigError(f"factor {factor} must divide ch {c_h}")
        c_l = c_h // factor
    layout = select_ld_layout(montage, c_l, seed=int(resolved["layout_seed"]))
    if resolved["sigma"]:
        sigma = float(resolved["sigma"])
    else:
        sigma = float(resolved["sigma_frac"]) * montage.diameter()
    lo, _, hi = resolved["band"].partition(":")
    cfg = GenConfig(
        c_h=c_h,
        t=int(resolved["t"]),
        sample_rate_hz=float(resolved["rate"]),
        n_sources=int(resolved["sources"]),
        spatial_sigma=sigma,
        source_band=(float(lo), float(hi)),
        noise_std=float(resolved["noise_std"]),
        seed=seed,
    )
    out = make_dataset(
        montage,
        layout,
        resolved["gen"],
        int(resolved["n_train"]),
        int(resolved["n_val"]),
        int(resolved["n_test"]),
        cfg,
        args.out,
        force=args.force,
    )
    print(f"dataset written to {out} (config hash {_config_hash(text)})")
    return 0


def cmd_train(args) -> int:
    resolved = _load_config_section(args.config, "train", TRAIN_DEFAULTS)
    _apply_flags(resolved, args, TRAIN_DEFAULTS.keys())
    text = _echo_config("train", resolved)
    dataset = load_dataset(args.data)
    cfg = _train_config_from(resolved)
    if resolved["sizes"]:
        from .montage import missing_channels

        n_missing = len(missing_channels(dataset.montage, dataset.layout))
        sizes = ex.parse_schedule_sizes(resolved["sizes"], n_missing)
        cfg = ex.sizes_to_config(cfg, sizes)
    artifact, log_rows = ex.train_on_dataset(dataset, cfg)
    save_model(artifact, args.out)
    log_path = args.log or (str(args.out) + ".log.csv")
    lines = log_to_csv_lines(log_rows)
    lines.append(f"# config_hash={_config_hash(text)}")
    Path(log_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    final = log_rows[-1]
    print(f"model saved to {args.out}; final loss_total={final['loss_total']!r}")
    return 0


def cmd_eval(args) -> int:
    resolved = _load_config_section(args.config, "eval", EVAL_DEFAULTS)
    _apply_flags(resolved, args, EVAL_DEFAULTS.keys())
    text = _echo_config("eval", resolved)
    dataset = load_dataset(args.data)
    artifact = load_model(args.model, expect_montage=dataset.montage)
    blocks = dataset.split(resolved["split"])
    if not blocks:
        raise ConfigError(f"split {resolved['split']!r} is empty in {args.data}")
    noise_snr = float(resolved["noise_snr"]) if resolved["noise_snr"] else math.inf
    noise_seed = int(resolved["noise_seed"])
    rep_ar = ex.evaluate_artifact(
        artifact, blocks, mode="rollout", noise_snr_db=noise_snr, noise_seed=noise_seed
    )
    rows = []
    if args.oneshot_baseline:
        rep_orig = ex.evaluate_artifact(
            artifact, blocks, mode="oneshot", noise_snr_db=noise_snr, noise_seed=noise_seed
        )
        from .metrics import gain

        lower = {"nmse": True, "pcc": False, "snr_db": False, "spec_mae": True}
        header = ["metric", "orig", "ar", "gain_pct"]
        for m in ("nmse", "pcc", "snr_db", "spec_mae"):
            o, a = getattr(rep_orig, m), getattr(rep_ar, m)
            rows.append({"metric": m, "orig": o, "ar": a, "gain_pct": gain(o, a, lower[m])})
        for g, v in enumerate(rep_ar.per_group_nmse, start=1):
            rows.append({"metric": f"nmse_step{g}", "orig": "", "ar": v, "gain_pct": ""})
        for g, v in enumerate(rep_ar.cumulative_nmse, start=1):
            rows.append({"metric": f"cum_nmse_step{g}", "orig": "", "ar": v, "gain_pct": ""})
    else:
        header = ["metric", "value"]
        for m in ("nmse", "pcc", "snr_db", "spec_mae"):
            rows.append({"metric": m, "value": getattr(rep_ar, m)})
        for g, v in enumerate(rep_ar.per_group_nmse, start=1):
            rows.append({"metric": f"nmse_step{g}", "value": v})
        for g, v in enumerate(rep_ar.cumulative_nmse, start=1):
            rows.append({"metric": f"cum_nmse_step{g}", "value": v})
    out = args.out or "eval.csv"
    write_csv(out, header, rows, _config_hash(text))
    print(f"eval written to {out}; rollout nmse={rep_ar.nmse!r}")
    return 0


def cmd_ablate(args) -> int:
    resolved = _load_config_section(args.config, "ablate", ABLATE_DEFAULTS)
    _apply_flags(resolved, args, ABLATE_DEFAULTS.keys())
    text = _echo_config("ablate", resolved)
    dataset = load_dataset(args.data)
    base_cfg = _train_config_from(resolved)
    n_seeds = int(resolved["seeds"])
    seeds = [base_cfg.seed + i for i in range(n_seeds)]
    axis = args.axis
    if axis == "order":
        rows = ex.run_order_ablation(dataset, base_cfg, seeds)
        header = ["order", "seed", "nmse", "pcc", "snr_db", "spec_mae"]
    elif axis == "granularity":
        if not resolved["schedules"]:
            raise ConfigError("granularity ablation needs --schedules")
        schedules = [s for s in resolved["schedules"].split(",") if s.strip()]
        rows = ex.run_granularity_ablation(dataset, base_cfg, schedules, seeds)
        header = ["schedule", "seed", "n_groups", "nmse", "pcc", "snr_db", "spec_mae"]
    elif axis == "scheme":
        rows = ex.run_scheme_ablation(dataset, base_cfg, seeds)
        header = ["scheme", "seed", "step", "step_nmse", "cumulative_nmse"]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    out = args.out or f"ablate_{axis}.csv"
    write_csv(out, header, rows, _config_hash(text))
    print(f"ablation written to {out} ({len(rows)} rows)")
    return 0


def cmd_gradcheck(args) -> int:
    n_seeds = args.seeds
    failures = 0
    for name, fn, tol in _gradcheck_battery():
        worst = max(fn(seed) for seed in range(n_seeds))
        ok = worst < tol
        failures += 0 if ok else 1
        print(f"{name}: max_rel_err={worst:.3e} tol={tol:.0e} {'PASS' if ok else 'FAIL'}")
    return 0 if failures == 0 else 1


def _gradcheck_battery():
    from .gradchecks import (
        check_attention,
        check_backbone_end_to_end,
        check_channel_bias,
        check_depthwise,
        check_layernorm,
        check_linear,
        check_mse_masked,
        check_pointwise,
        check_relu,
    )

    battery = [
        ("linear", check_linear, 1e-5),
        ("conv1d_depthwise", check_depthwise, 1e-5),
        ("conv1d_pointwise", check_pointwise, 1e-5),
        ("channel_bias", check_channel_bias, 1e-5),
        ("attention_channels", check_attention, 1e-5),
        ("relu", check_relu, 1e-5),
        ("layernorm", check_layernorm, 1e-5),
        ("mse_masked", check_mse_masked, 1e-5),
    ]
    for kind in pred.BACKBONE_KINDS:
        battery.append(
            (f"backbone_{kind}", lambda s, k=kind: check_backbone_end_to_end(k, s), 1e-4)
        )
    return battery


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--config")
    p_gen.add_argument("--kind", choices=MONTAGE_KINDS)
    p_gen.add_argument("--gen", choices=GEN_KINDS)
    p_gen.add_argument("--ch", type=int)
    p_gen.add_argument("--factor", type=int, help="upsampling factor; anchors = ch/factor")
    p_gen.add_argument("--anchors", type=int, help="explicit anchor count (overrides factor)")
    p_gen.add_argument("--t", type=int)
    p_gen.add_argument("--rate", type=float)
    p_gen.add_argument("--sources", type=int)
    p_gen.add_argument("--sigma-frac", dest="sigma_frac", type=float)
    p_gen.add_argument("--sigma", type=float)
    p_gen.add_argument("--band", help="source band as LO:HI in Hz")
    p_gen.add_argument("--noise-std", dest="noise_std", type=float)
    p_gen.add_argument("--n-train", dest="n_train", type=int)
    p_gen.add_argument("--n-val", dest="n_val", type=int)
    p_gen.add_argument("--n-test", dest="n_test", type=int)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--layout-seed", dest="layout_seed", type=int)
    p_gen.add_argument("--force", action="store_true")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a predictor on a dataset")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--log")
    p_train.add_argument("--config")
    p_train.add_argument("--backbone", choices=pred.BACKBONE_KINDS)
    p_train.add_argument("--scheme", choices=sorted(SCHEME_ALIASES))
    p_train.add_argument("--pi", type=float)
    p_train.add_argument("-G", "--groups", dest="groups", type=int)
    p_train.add_argument("--fractions", help="comma-separated split fractions, e.g. 1/6,1/2")
    p_train.add_argument("--sizes", help="explicit group sizes, e.g. 5-10-15 or 5x6")
    p_train.add_argument("--order", choices=ORDER_CHOICES)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--optimizer", choices=("adam", "sgd"))
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--input-mode", dest="input_mode", choices=pred.INPUT_MODES)
    p_train.add_argument("--hidden", type=int)
    p_train.add_argument("--feat", type=int)
    p_train.add_argument("--conv-width", dest="conv_width", type=int)
    p_train.add_argument("--kernel", type=int)
    p_train.add_argument("--ff", type=int)
    p_train.add_argument("--pi-decay", dest="pi_decay", type=float)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained model on a dataset split")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out")
    p_eval.add_argument("--config")
    p_eval.add_argument("--split")
    p_eval.add_argument("--oneshot-baseline", action="store_true")
    p_eval.add_argument("--noise-snr", dest="noise_snr", type=float)
    p_eval.add_argument("--noise-seed", dest="noise_seed", type=int)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run an ablation matrix")
    p_abl.add_argument("axis", choices=("order", "granularity", "scheme"))
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--out")
    p_abl.add_argument("--config")
    p_abl.add_argument("--seeds", type=int)
    p_abl.add_argument("--schedules", help="comma-separated granularity conditions")
    for flag, kw in (
        ("--backbone", dict(choices=pred.BACKBONE_KINDS)),
        ("--scheme", dict(choices=sorted(SCHEME_ALIASES))),
        ("--pi", dict(type=float)),
        ("--epochs", dict(type=int)),
        ("--batch", dict(type=int)),
        ("--lr", dict(type=float)),
        ("--seed", dict(type=int)),
        ("--order", dict(choices=ORDER_CHOICES)),
    ):
        p_abl.add_argument(flag, **kw)
    p_abl.set_defaults(func=cmd_ablate)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of all primitives")
    p_gc.add_argument("--seeds", type=int, default=10)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
