"""Command-line entry point: train | attack | analyze | sweep.

Exit codes are a stable contract: 0 success, 2 configuration or usage
error, 3 numeric failure during training, 4 partially failed sweep. Every
command echoes its fully resolved configuration into the output directory
and refuses to overwrite previous results unless --overwrite is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .analysis import (AttackConfig, SweepGrid, evaluate, layer_profile, sweep,
                       write_profiles_csv)
from .attacks import pgd_schedule, run_attack
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, parse_config_file, resolve_config, serialize_config
from .lipschitz import spectral_report, write_spectral_csv
from .data import Dataset, save_cifar10_binary
from .models import build_model
from .training import NanLossError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdlab",
                                description="quantized-network robustness laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--out", help="output directory (overrides out.dir)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        sp.add_argument("--overwrite", action="store_true",
                        help="allow reusing a non-empty output directory")

    sp = sub.add_parser("train", help="train a model from a config")
    common(sp)

    sp = sub.add_parser("attack", help="evaluate a checkpoint under attack")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--attack", dest="attack_kind",
                    choices=("random", "fgsm", "rfgsm", "bim", "pgd"))
    sp.add_argument("--eps", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--export-adv", help="write adversarial samples to this binary file")

    sp = sub.add_parser("analyze", help="per-layer amplification profiles")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--eps-list", default="1,2,3,4,5,6,7,8",
                    help="comma-separated budgets in 0-255 units")

    sp = sub.add_parser("sweep", help="bits x beta robustness sweep")
    common(sp)
    return p


def _load_config(args) -> RunConfig:
    raw = parse_config_file(args.config) if args.config else {}
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out:
        overrides["out.dir"] = args.out
    if getattr(args, "attack_kind", None):
        overrides["attack.kind"] = args.attack_kind
    if getattr(args, "eps", None) is not None:
        overrides["attack.eps"] = str(args.eps)
    if getattr(args, "alpha", None) is not None:
        overrides["attack.alpha"] = str(args.alpha)
    if getattr(args, "iters", None) is not None:
        overrides["attack.iters"] = str(args.iters)
    return resolve_config(raw, overrides)


def _prepare_out(cfg: RunConfig, overwrite: bool, markers: tuple) -> str:
    out = cfg["out.dir"]
    if not out:
        raise ConfigError("out.dir", "output directory required (set out.dir or pass --out)")
    os.makedirs(out, exist_ok=True)
    if not overwrite:
        for marker in markers:
            if os.path.exists(os.path.join(out, marker)):
                raise ConfigError("out.dir",
                                  f"{out} already holds {marker}; pass --overwrite to redo")
    with open(os.path.join(out, "config.resolved"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
    return out


def _load_model_for(cfg: RunConfig, checkpoint: str):
    model = build_model(cfg.model_spec(), seed=cfg["seed"])
    model.load(checkpoint)
    return model


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.overwrite, ("model.dqw",))
    train_data, _ = cfg.datasets()
    model = build_model(cfg.model_spec(), seed=cfg["seed"])
    try:
        curve = train(model, train_data, cfg.train_cfg(),
                      advtrain=cfg.advtrain_cfg(), out_dir=out)
    except NanLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    model.save(os.path.join(out, "model.dqw"))
    curve.to_csv(os.path.join(out, "loss_curve.csv"))
    print(f"trained {cfg['train.epochs']} epochs; final loss {curve.final_loss():.6f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.overwrite, ("attack.json",))
    model = _load_model_for(cfg, args.checkpoint)
    _, test = cfg.datasets()
    atk = cfg.attack_cfg()
    iters = atk.iters if atk.iters is not None else pgd_schedule(atk.epsilon)
    if atk.kind in ("bim", "pgd"):
        print(f"attack {atk.kind} eps={atk.epsilon:g} alpha={atk.alpha:g} iters={iters}")
    else:
        print(f"attack {atk.kind} eps={atk.epsilon:g}")
    clean = evaluate(model, test)
    adversarial = evaluate(model, test, atk)
    result = {"clean": clean, "adversarial": adversarial,
              "attack": atk.kind, "eps": atk.epsilon, "seed": cfg["seed"]}
    with open(os.path.join(out, "attack.json"), "w") as f:
        json.dump(result, f, indent=2)
    if args.export_adv:
        x_adv = run_attack(model, test.images, test.labels, atk)
        save_cifar10_binary(args.export_adv, Dataset(x_adv, test.labels, split="adv"))
    print(f"clean {clean:.2f}% adversarial {adversarial:.2f}%")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.overwrite, ("profiles.csv",))
    model = _load_model_for(cfg, args.checkpoint)
    _, test = cfg.datasets()
    batch = test.subset(min(128, len(test)))
    profiles = []
    for eps_text in args.eps_list.split(","):
        eps = float(eps_text)
        atk = AttackConfig(kind=cfg["attack.kind"], epsilon=eps, seed=cfg["seed"])
        x_adv = run_attack(model, batch.images, batch.labels, atk)
        for quant_on in (True, False):
            profiles.append(layer_profile(model, batch.images, x_adv,
                                          quant_on=quant_on, eps=eps))
    write_profiles_csv(os.path.join(out, "profiles.csv"), profiles)
    write_spectral_csv(os.path.join(out, "spectral_norms.csv"),
                       spectral_report(model.weight_matrices()))
    print(f"wrote {len(profiles)} profiles")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(cfg, args.overwrite, ("report.csv",))
    train_data, test_data = cfg.datasets()
    grid = SweepGrid(bits=tuple(cfg["sweep.bits"]), betas=tuple(cfg["sweep.betas"]),
                     attacks=tuple(cfg.sweep_attacks()), seeds=tuple(cfg["sweep.seeds"]),
                     include_fp=cfg["sweep.include_fp"], quant_mode=cfg["quant.mode"],
                     range_max=cfg["quant.range_max"])
    report = sweep(grid, train_data, test_data, spec_base=cfg.model_spec(),
                   train_cfg=cfg.train_cfg(), out_dir=out,
                   workers=cfg["sweep.workers"])
    print(f"sweep wrote {len(report.records)} rows to {os.path.join(out, 'report.csv')}")
    if not report.complete:
        print("sweep incomplete: some cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "attack": cmd_attack,
                "analyze": cmd_analyze, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
