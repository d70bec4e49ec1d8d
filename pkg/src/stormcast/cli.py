"""Command line front end.

Subcommands mirror the pipeline:

  synth    generate the event grids
  prepare  build train/validation/test sample sets
  train    fit the nowcaster
  eval     score it against persistence on the held-out events
  all      run the four stages in order

Every run is pinned to an INI config; the effective config (after flag
overrides) is hashed and the hash is stamped into every artifact. A stage
whose outputs already exist with the matching hash is skipped; outputs
from a different config refuse to be overwritten unless --force is given.

NOWCAST_THREADS caps the BLAS thread pool. It is applied before numpy is
first imported, so it must be handled at the very top of this module.
"""

from __future__ import annotations

import os

if os.environ.get("NOWCAST_THREADS"):
    _n = os.environ["NOWCAST_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

import argparse
import csv
import json
import struct
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    derive_seed,
    load_config,
)
from .errors import ConfigError, DataError, DivergenceError, StormcastError
from .model import (
    load_model,
    predict_samples,
    save_model,
    train_model,
)
from .pipeline import (
    Normalizer,
    anchor_frames,
    cell_grid_shape,
    interior_cells,
    label_cell,
    oversample_positives,
    prepare_event,
    read_sample_set,
    split_events,
    write_sample_set,
)
from .synth import read_grid, synth_event, write_grid
from .verification import (
    confusion,
    outcome_map,
    per_frame_series,
    persistence_baseline,
    roc_curve,
    skill_scores,
    write_frames_csv,
    write_outcome_csv,
    write_outcome_svg,
    write_predictions_csv,
    write_report_csv,
    write_roc_csv,
)


def _try_limit_threads():
    n = os.environ.get("NOWCAST_THREADS")
    if not n:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(n))
    except (ImportError, ValueError):
        pass


# ---------------------------------------------------------------------------
# Artifact hash probes (cheap header reads, no payload parsing)


def _footer_hash(path: Path, header_len: int, payload_len_fn) -> str | None:
    try:
        with open(path, "rb") as f:
            head = f.read(header_len)
            skip = payload_len_fn(head)
            if skip is None:
                return None
            f.seek(skip, os.SEEK_CUR)
            magic = f.read(4)
            if magic != b"META":
                return None
            (mlen,) = struct.unpack("<I", f.read(4))
            meta = json.loads(f.read(mlen).decode())
            return meta.get("config_hash")
    except (OSError, ValueError, struct.error, json.JSONDecodeError, UnicodeDecodeError):
        return None


def _grid_hash(path: Path) -> str | None:
    def payload(head: bytes):
        if len(head) < 24 or head[:4] != b"NWC1":
            return None
        t, z, y, x, v = struct.unpack_from("<5I", head, 4)
        names_len = 0
        with open(path, "rb") as f:
            f.seek(24)
            for _ in range(v):
                while True:
                    b = f.read(1)
                    if not b:
                        return None
                    names_len += 1
                    if b == b"\0":
                        break
        return names_len + t * v * z * y * x * 4

    return _footer_hash(path, 24, payload)


def _samples_hash(path: Path) -> str | None:
    def payload(head: bytes):
        if len(head) < 8 or head[:4] != b"NWS1":
            return None
        (count,) = struct.unpack_from("<I", head, 4)
        return count * (24 + 38880 * 4)

    return _footer_hash(path, 8, payload)


def _model_hash(path: Path) -> str | None:
    try:
        with open(path, "rb") as f:
            head = f.read(12)
            if len(head) < 12 or head[:4] != b"NWM1":
                return None
            (jlen,) = struct.unpack_from("<I", head, 8)
            echo = json.loads(f.read(jlen).decode())
            return echo.get("config_hash")
    except (OSError, ValueError, struct.error, json.JSONDecodeError, UnicodeDecodeError):
        return None


def _csv_hash(path: Path) -> str | None:
    try:
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                return row.get("config_hash")
    except OSError:
        return None
    return None


def _stage_state(paths_and_probes, expected: str) -> str:
    """'fresh' (skip), 'stale' (hash mismatch), or 'missing' (run)."""
    states = []
    for path, probe in paths_and_probes:
        if not Path(path).exists():
            states.append("absent")
        elif probe(Path(path)) == expected:
            states.append("fresh")
        else:
            states.append("stale")
    if states and all(s == "fresh" for s in states):
        return "fresh"
    if any(s == "stale" for s in states):
        return "stale"
    return "missing"


def _gate(stage: str, state: str, force: bool) -> bool:
    """True when the stage should run now."""
    if state == "fresh" and not force:
        print(f"[{stage}] outputs up to date, skipping (use --force to redo)")
        return False
    if state == "stale" and not force:
        raise ConfigError(
            f"{stage}: existing outputs were built from a different config; "
            "pass --force to overwrite them"
        )
    return True


# ---------------------------------------------------------------------------
# Paths


def _grid_paths(cfg: ExperimentConfig) -> list[Path]:
    d = Path(cfg.data_dir)
    return [d / f"event_{i:03d}.nwc" for i in range(cfg.synth.events)]


def _sample_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    d = Path(cfg.data_dir)
    return {split: d / f"samples_{split}.nws"
            for split in ("train", "validation", "test")}


def _model_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "model.nwm"


def _log_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "train_log.csv"


def _eval_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    d = Path(cfg.out_dir)
    return {
        "report": d / "report.csv",
        "frames": d / "frames.csv",
        "roc": d / "roc.csv",
        "predictions": d / "predictions.csv",
    }


# ---------------------------------------------------------------------------
# Stages


def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> int:
    chash = config_hash(cfg)
    if cfg.synth.events == 0:
        print("[synth] warning: zero events requested, nothing to do")
        return 0
    paths = _grid_paths(cfg)
    state = _stage_state([(p, _grid_hash) for p in paths], chash)
    if not _gate("synth", state, force):
        return 0
    Path(cfg.data_dir).mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(paths):
        seq = synth_event(
            cfg.synth, derive_seed(cfg.seed, f"synth/{i}"), event_id=f"event_{i:03d}"
        )
        write_grid(seq, path, provenance={"config_hash": chash})
        r = seq.fields["R"]
        frac = float((r >= 35.0).mean())
        print(
            f"[synth] {path.name}: dims {seq.dims}, "
            f"pixels >= 35 dBZ: {frac:.4f}, max R {float(r.max()):.1f}"
        )
    print(f"[synth] wrote {len(paths)} events to {cfg.data_dir} (config {chash})")
    return 0


def _check_input(path: Path, probe, expected: str, producer: str):
    """Inputs from an earlier stage must carry the current config hash.

    Unlike stale *outputs* (which --force may overwrite), a stale input
    means the earlier stage must be rerun, so there is no bypass here.
    """
    got = probe(Path(path))
    if got != expected:
        raise ConfigError(
            f"{path} was produced under config {got or 'unknown'}, current is "
            f"{expected}; rerun the {producer} stage"
        )


def _load_events(cfg: ExperimentConfig, expected_hash: str | None = None):
    events = []
    for path in _grid_paths(cfg):
        if not path.exists():
            raise DataError(f"event grid missing: {path} (run the synth stage first)")
        if expected_hash is not None:
            _check_input(path, _grid_hash, expected_hash, "synth")
        events.append(read_grid(path))
    return events


def cmd_prepare(cfg: ExperimentConfig, force: bool = False) -> int:
    chash = config_hash(cfg)
    paths = _sample_paths(cfg)
    state = _stage_state([(p, _samples_hash) for p in paths.values()], chash)
    if not _gate("prepare", state, force):
        return 0
    events = _load_events(cfg, expected_hash=chash)
    prepared = split_events(
        events,
        cfg.train_events,
        cfg.test_events,
        seed=derive_seed(cfg.seed, "prepare"),
        val_fraction=cfg.val_fraction,
    )
    t_n, _, gy, gx = events[0].dims
    per_event = len(anchor_frames(t_n)) * len(interior_cells(gy, gx))
    total = len(prepared.train) + len(prepared.validation)
    print(
        f"[prepare] enumeration: {cfg.train_events} train events x {per_event} "
        f"samples = {cfg.train_events * per_event}, got {total} (train+val)"
    )
    before = prepared.train.positive_fraction
    train = oversample_positives(
        prepared.train, prepared.events_by_id, cfg.oversample_k
    )
    after = train.positive_fraction
    print(
        f"[prepare] train {len(train)} samples "
        f"(+{len(train) - len(prepared.train)} oversampled, K={cfg.oversample_k}), "
        f"positive fraction {before:.4f} -> {after:.4f}"
    )
    print(
        f"[prepare] validation {len(prepared.validation)} samples, "
        f"test {len(prepared.test)} samples "
        f"(positive fraction {prepared.test.positive_fraction:.4f})"
    )
    if any(s.oversampled for s in prepared.test.samples):
        raise DataError("test set contains oversampled samples")
    if set(train.events) & set(prepared.test.events):
        raise DataError("train and test share events")
    # label distribution of the test set must be exactly what raw enumeration
    # of its events gives: preparation may not add, drop, or duplicate samples
    raw_pos = raw_total = 0
    for eid in prepared.test.events:
        ev = prepared.events_by_id[eid]
        t_n, _, gy, gx = ev.raw_r.shape
        for frame in anchor_frames(t_n):
            target = ev.raw_r[frame + 2]
            for row, col in interior_cells(gy, gx):
                raw_pos += label_cell(target, row, col)
                raw_total += 1
    raw_frac = raw_pos / raw_total if raw_total else None
    if raw_frac != prepared.test.positive_fraction:
        raise DataError(
            f"test positive fraction {prepared.test.positive_fraction} differs "
            f"from raw enumeration {raw_frac}; preparation altered the test set"
        )
    print(
        f"[prepare] test purity: no oversampling, events disjoint from train, "
        f"positive fraction {_na(raw_frac)} matches raw enumeration"
    )
    Path(cfg.data_dir).mkdir(parents=True, exist_ok=True)
    write_sample_set(train, paths["train"], config_hash=chash,
                     normalizer=prepared.normalizer)
    write_sample_set(prepared.validation, paths["validation"], config_hash=chash,
                     normalizer=prepared.normalizer)
    write_sample_set(prepared.test, paths["test"], config_hash=chash,
                     normalizer=prepared.normalizer)
    for split, p in paths.items():
        print(f"[prepare] wrote {p} ({split})")
    return 0


def _normalizer_from_meta(meta: dict | None, source) -> Normalizer:
    if not meta or "normalizer" not in meta:
        raise DataError(
            f"{source}: no normalizer provenance; rerun the prepare stage"
        )
    n = meta["normalizer"]
    return Normalizer(
        bounds={v: tuple(b) for v, b in n["bounds"].items()},
        clamp=n["clamp"],
    )


def _event_tensors_for(cfg: ExperimentConfig, event_ids, normalizer: Normalizer):
    by_id = {}
    wanted = set(event_ids)
    for path in _grid_paths(cfg):
        if not wanted:
            break
        if not path.exists():
            raise DataError(f"event grid missing: {path}")
        seq = read_grid(path)
        if seq.event_id in wanted:
            by_id[seq.event_id] = prepare_event(seq, normalizer)
            wanted.discard(seq.event_id)
    if wanted:
        raise DataError(f"event grids not found for: {sorted(wanted)}")
    return by_id


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> int:
    chash = config_hash(cfg)
    model_path = _model_path(cfg)
    log_path = _log_path(cfg)
    state = _stage_state(
        [(model_path, _model_hash), (log_path, _csv_hash)], chash
    )
    if not _gate("train", state, force):
        return 0
    spaths = _sample_paths(cfg)
    for p in spaths.values():
        if not p.exists():
            raise DataError(f"sample set missing: {p} (run the prepare stage first)")
    for split in ("train", "validation"):
        _check_input(spaths[split], _samples_hash, chash, "prepare")
    train_set = read_sample_set(spaths["train"], with_values=False)
    val_set = read_sample_set(spaths["validation"], with_values=False)
    normalizer = _normalizer_from_meta(train_set.meta, spaths["train"])
    events_by_id = _event_tensors_for(
        cfg, set(train_set.events) | set(val_set.events), normalizer
    )
    tc = replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
    t0 = time.monotonic()
    model, log = train_model(train_set, val_set, tc, events_by_id, normalizer)
    dt = time.monotonic() - t0
    print(f"[train] epoch 0 validation CSI: {_na(log.epoch0_val_csi)}")
    for row in log.rows:
        print(
            f"[train] epoch {row.epoch}: loss {row.loss:.4f}, "
            f"val CSI {_na(row.val_csi)}"
        )
    print(
        f"[train] kept epoch {log.best_epoch} weights"
        f"{' (early stop)' if log.stopped_early else ''}, {dt:.1f} s"
    )
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    save_model(model, model_path, config_hash=chash)
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "val_csi", "config_hash"])
        for row in log.rows:
            w.writerow([
                row.epoch, repr(row.loss),
                "NA" if row.val_csi is None else repr(row.val_csi),
                chash,
            ])
    print(f"[train] wrote {model_path} and {log_path}")
    return 0


def _na(x) -> str:
    return "NA" if x is None else f"{x:.4f}"


def cmd_eval(cfg: ExperimentConfig, force: bool = False) -> int:
    chash = config_hash(cfg)
    paths = _eval_paths(cfg)
    state = _stage_state(
        [(paths["report"], _csv_hash), (paths["predictions"], _csv_hash)], chash
    )
    if not _gate("eval", state, force):
        return 0
    model_path = _model_path(cfg)
    if not model_path.exists():
        raise DataError(f"model missing: {model_path} (run the train stage first)")
    model = load_model(model_path)
    if model.config_hash is not None and model.config_hash != chash and not force:
        raise ConfigError(
            f"model {model_path} was trained under config {model.config_hash}, "
            f"current is {chash}; pass --force to evaluate anyway"
        )
    test_path = _sample_paths(cfg)["test"]
    if not test_path.exists():
        raise DataError(f"sample set missing: {test_path} (run the prepare stage first)")
    _check_input(test_path, _samples_hash, chash, "prepare")
    test = read_sample_set(test_path, with_values=True)
    file_norm = _normalizer_from_meta(test.meta, test_path)
    if file_norm.bounds != model.normalizer.bounds:
        raise ConfigError(
            "test set and model disagree on normalization bounds; "
            "they come from different prepare runs"
        )
    events_by_id = _event_tensors_for(cfg, set(test.events), model.normalizer)

    labels = np.array([s.label for s in test.samples])
    probs = predict_samples(model, test.samples, events_by_id)
    pers = persistence_baseline(test.samples, model.normalizer)

    rows = []
    curves = {}
    frame_rows = []
    frames = np.array([s.frame for s in test.samples])
    for method, preds in (("cnn_lstm", probs), ("persistence", pers)):
        m = confusion(preds, labels, cfg.threshold)
        sc = skill_scores(m)
        curve = roc_curve(preds, labels)
        curves[method] = curve
        rows.append({
            "method": method, "threshold": cfg.threshold, "n": m.total,
            "tp": m.tp, "fn": m.fn, "fp": m.fp, "tn": m.tn,
            "pod": sc.pod, "far": sc.far, "csi": sc.csi,
            "auc": curve.auc, "roc_degenerate": int(curve.degenerate),
            "config_hash": chash,
        })
        for fs in per_frame_series(preds, labels, frames, cfg.threshold):
            frame_rows.append({
                "method": method, "frame": fs.frame, "n": fs.n,
                "tp": fs.matrix.tp, "fn": fs.matrix.fn,
                "fp": fs.matrix.fp, "tn": fs.matrix.tn,
                "pod": fs.scores.pod, "far": fs.scores.far, "csi": fs.scores.csi,
                "config_hash": chash,
            })
        print(
            f"[eval] {method}: POD {_na(sc.pod)} FAR {_na(sc.far)} "
            f"CSI {_na(sc.csi)} AUC {curve.auc:.4f}"
            f"{' (degenerate ROC)' if curve.degenerate else ''}"
        )

    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    write_report_csv(paths["report"], rows)
    write_frames_csv(paths["frames"], frame_rows)
    write_roc_csv(paths["roc"], curves)
    write_predictions_csv(paths["predictions"], test.samples, probs, pers,
                          config_hash=chash)

    outcome_dir = Path(cfg.out_dir) / "outcomes"
    outcome_dir.mkdir(parents=True, exist_ok=True)
    n_maps = 0
    for event_id in test.events:
        ev = events_by_id[event_id]
        rows_n, cols_n = cell_grid_shape(ev.dims[2], ev.dims[3])
        sel_ev = [i for i, s in enumerate(test.samples) if s.event_id == event_id]
        for frame in sorted({test.samples[i].frame for i in sel_ev}):
            idx = [i for i in sel_ev if test.samples[i].frame == frame]
            omap = outcome_map(
                probs[idx], labels[idx],
                [(test.samples[i].row, test.samples[i].col) for i in idx],
                rows=rows_n, cols=cols_n, threshold=cfg.threshold,
            )
            stem = outcome_dir / f"outcome_{event_id}_f{frame:03d}"
            write_outcome_csv(omap, stem.with_suffix(".csv"))
            write_outcome_svg(omap, stem.with_suffix(".svg"))
            n_maps += 1
    print(f"[eval] wrote report, ROC, predictions and {n_maps} outcome maps to {cfg.out_dir}")
    return 0


def cmd_all(cfg: ExperimentConfig, force: bool = False) -> int:
    for name, fn in (("synth", cmd_synth), ("prepare", cmd_prepare),
                     ("train", cmd_train), ("eval", cmd_eval)):
        try:
            rc = fn(cfg, force)
        except StormcastError as e:
            print(f"stage {name} failed: {e}", file=sys.stderr)
            raise
        if rc != 0:
            print(f"stage {name} failed with exit code {rc}", file=sys.stderr)
            return rc
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nowcast",
        description="Cell-based 30-minute convective nowcasting on synthetic storms",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("synth", "generate synthetic event grids"),
        ("prepare", "build train/validation/test sample sets"),
        ("train", "train the nowcaster"),
        ("eval", "score the model and the persistence baseline"),
        ("all", "run synth, prepare, train and eval in order"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the [run] seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--k", type=int, default=None, choices=(1, 2),
                       help="override the oversampling shift magnitude")
        p.add_argument("--threshold", type=float, default=None,
                       help="override the decision threshold")
        p.add_argument("--force", action="store_true",
                       help="rebuild outputs even if present or from another config")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "all": cmd_all,
}


def main(argv=None) -> int:
    _try_limit_threads()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(
            cfg,
            seed=args.seed,
            out_dir=args.out,
            oversample_k=args.k,
            threshold=args.threshold,
        )
        return _COMMANDS[args.command](cfg, force=args.force)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except StormcastError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
