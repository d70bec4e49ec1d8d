"""Retrain the model across several seeds on one fixed corpus and compare
each run's test skill against the persistence baseline.

The corpus (synthetic events, splits, normalizer) comes from a finished
pipeline run in --workspace; only the training seed varies, so the spread
isolates sensitivity to initialization and batch order.

    python3 scripts/run_experiment.py --workspace runs/exp01
    python3 scripts/seed_robustness.py --workspace runs/exp01 --seeds 5
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from stormcast.config import derive_seed, load_config
from stormcast.model import predict_samples, train_model
from stormcast.pipeline import Normalizer, prepare_event, read_sample_set
from stormcast.synth import read_grid
from stormcast.verification import (
    confusion,
    persistence_baseline,
    roc_curve,
    skill_scores,
)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workspace", required=True,
                   help="directory holding a finished run (experiment.ini, data/)")
    p.add_argument("--seeds", type=int, default=5)
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    ws = Path(args.workspace)
    ini = ws / "experiment.ini"
    if not ini.exists():
        print(f"no experiment.ini in {ws}; run scripts/run_experiment.py first",
              file=sys.stderr)
        return 2
    cfg = load_config(ini)

    data = Path(cfg.data_dir)
    train_set = read_sample_set(data / "samples_train.nws", with_values=False)
    val_set = read_sample_set(data / "samples_validation.nws", with_values=False)
    test_set = read_sample_set(data / "samples_test.nws", with_values=False)
    meta = train_set.meta["normalizer"]
    normalizer = Normalizer(
        bounds={v: tuple(b) for v, b in meta["bounds"].items()},
        clamp=meta["clamp"],
    )
    events_by_id = {}
    for path in sorted(data.glob("*.nwc")):
        seq = read_grid(path)
        events_by_id[seq.event_id] = prepare_event(seq, normalizer)

    labels = np.array([s.label for s in test_set.samples])
    pers = persistence_baseline(test_set.samples, normalizer, events_by_id)
    pers_scores = skill_scores(confusion(pers, labels, cfg.threshold))
    print(f"persistence: CSI {pers_scores.csi:.4f}  "
          f"({len(test_set)} test samples, threshold {cfg.threshold})")

    wins = 0
    for s in range(args.seeds):
        tc = replace(cfg.train, seed=derive_seed(s, "train"))
        t0 = time.monotonic()
        model, log = train_model(train_set, val_set, tc, events_by_id, normalizer)
        probs = predict_samples(model, test_set.samples, events_by_id)
        csi = skill_scores(confusion(probs, labels, cfg.threshold)).csi
        auc = roc_curve(probs, labels).auc
        beat = csi is not None and csi >= pers_scores.csi + 0.05 and auc >= 0.80
        wins += beat
        print(f"seed {s}: CSI {csi:.4f}  AUC {auc:.4f}  "
              f"best epoch {log.best_epoch}  "
              f"{'beats persistence' if beat else 'NO MARGIN'}  "
              f"({time.monotonic() - t0:.0f} s)")
    print(f"{wins}/{args.seeds} seeds beat persistence by >= 0.05 CSI "
          f"with AUC >= 0.80")
    return 0


if __name__ == "__main__":
    sys.exit(main())
