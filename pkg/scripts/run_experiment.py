"""Run the full pipeline into a workspace directory and print the report.

Thin convenience wrapper over `nowcast all`: builds a config file with the
workspace's data/ and out/ dirs filled in, applies a few common overrides,
runs every stage, then dumps the skill table.

    python3 scripts/run_experiment.py --workspace runs/exp01 --seed 3
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from stormcast.cli import main as nowcast_main
from stormcast.config import ExperimentConfig, config_hash, to_ini_text


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workspace", required=True, help="directory for data/ and out/")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--k", type=int, default=None, choices=(1, 2),
                   help="oversampling shift magnitude")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--force", action="store_true",
                   help="overwrite artifacts from a different config")
    return p.parse_args(argv)


def build_config(args) -> ExperimentConfig:
    ws = Path(args.workspace)
    cfg = replace(ExperimentConfig(),
                  data_dir=str(ws / "data"), out_dir=str(ws / "out"))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threshold is not None:
        cfg = replace(cfg, threshold=args.threshold)
    if args.k is not None:
        cfg = replace(cfg, oversample_k=args.k)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return cfg


def main(argv=None) -> int:
    args = parse_args(argv)
    cfg = build_config(args)
    ws = Path(args.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    ini = ws / "experiment.ini"
    ini.write_text(to_ini_text(cfg))
    print(f"config {config_hash(cfg)} -> {ini}")

    cli_args = ["all", "--config", str(ini)]
    if args.force:
        cli_args.append("--force")
    rc = nowcast_main(cli_args)
    if rc != 0:
        return rc

    def fmt(text: str) -> str:
        return text if text == "NA" else f"{float(text):.4f}"

    print("\nskill summary")
    with open(ws / "out" / "report.csv", newline="") as f:
        for row in csv.DictReader(f):
            print(f"  {row['method']:<12} CSI {fmt(row['csi']):>6}  "
                  f"POD {fmt(row['pod']):>6}  FAR {fmt(row['far']):>6}  "
                  f"AUC {fmt(row['auc']):>6}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
