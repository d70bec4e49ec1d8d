"""From gridded events to model-ready cell samples.

The grid is tiled into 6x6 px cells. A sample is the 18x18 px window
centered on a cell (one cell of margin on every side) at one anchor frame,
holding six variables: reflectivity R, vertical velocity w, perturbation
temperature pt, and their frame-to-frame differences dR, dw, dpt. Values
are stored as a [6, 18, 18, 20] block ordered (variable, y, x, z).

The label is 1 when the composite reflectivity (max over height) anywhere
in the 6x6 cell reaches 35 dBZ two frames (30 minutes) after the anchor.
Anchors range over t in [3, T-3] so that the two preceding context frames
still have a valid difference channel and the verifying frame exists.

Differences use the previous frame, so frame 0 of every difference field
is undefined and kept as NaN; anchors never read it. Normalization maps
train-set extrema to [-1, 1] and clamps everything else to [-1.5, 1.5].

Positive train samples are oversampled by re-centering the window at the
eight unit offsets scaled by K; a shifted copy is kept only when its
window stays in the domain and the label recomputed on the shifted cell
footprint is still positive. Test samples are never oversampled.

Sample sets serialize to a flat format (magic "NWS1"): a count, then per
sample six u32 metadata words and 38,880 float32 values. An optional META
JSON footer carries split provenance and normalizer bounds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    InsufficientHistoryError,
    UsageError,
)
from .synth import GridSequence

SAMPLES_MAGIC = b"NWS1"
META_MAGIC = b"META"

CELL = 6
WINDOW = 18
MARGIN = (WINDOW - CELL) // 2
LEVELS = 20
THRESHOLD_DBZ = 35.0
VARIABLES = ("R", "dR", "w", "dw", "pt", "dpt")
HISTORY = 2            # model context: blocks at t-2, t-1, t
LEAD_FRAMES = 2        # label verifies 2 frames (30 min) ahead
BLOCK_VALUES = len(VARIABLES) * WINDOW * WINDOW * LEVELS  # 38,880
SPAN_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Derived fields and normalization


def time_difference(seq: GridSequence, var: str) -> np.ndarray:
    """Frame-to-frame change of one field, [T,Z,Y,X] float64, frame 0 NaN."""
    if var not in seq.fields:
        raise DataError(f"event {seq.event_id!r} has no field {var!r}")
    f = seq.fields[var].astype(np.float64)
    if f.shape[0] < 2:
        raise InsufficientHistoryError(
            f"time difference needs >= 2 frames, event {seq.event_id!r} has {f.shape[0]}"
        )
    out = np.empty_like(f)
    out[0] = np.nan
    out[1:] = f[1:] - f[:-1]
    return out


def derive_fields(seq: GridSequence) -> dict[str, np.ndarray]:
    """All six model variables as float64 [T,Z,Y,X] arrays."""
    for var in ("R", "w", "pt"):
        if var not in seq.fields:
            raise DataError(f"event {seq.event_id!r} missing field {var!r}")
    return {
        "R": seq.fields["R"].astype(np.float64),
        "dR": time_difference(seq, "R"),
        "w": seq.fields["w"].astype(np.float64),
        "dw": time_difference(seq, "w"),
        "pt": seq.fields["pt"].astype(np.float64),
        "dpt": time_difference(seq, "pt"),
    }


@dataclass(frozen=True)
class Normalizer:
    """Per-variable min/max scaling to [-1, 1] with a clamp at +/-1.5."""

    bounds: dict[str, tuple[float, float]]
    clamp: float = 1.5

    def transform(self, x: np.ndarray, var: str) -> np.ndarray:
        lo, hi = self._span(var)
        y = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * 2.0 - 1.0
        return np.clip(y, -self.clamp, self.clamp)

    def inverse(self, y: np.ndarray, var: str) -> np.ndarray:
        """Undo the affine map. Clamped values cannot be recovered exactly."""
        lo, hi = self._span(var)
        return (np.asarray(y, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo

    def _span(self, var: str) -> tuple[float, float]:
        if var not in self.bounds:
            raise DataError(f"normalizer has no bounds for variable {var!r}")
        return self.bounds[var]


def fit_normalizer(events, clamp: float = 1.5) -> Normalizer:
    """Scan training events for per-variable extrema.

    Difference channels skip their undefined first frame. A degenerate
    span is floored at 1e-6 so the transform stays finite.
    """
    events = list(events)
    if not events:
        raise DataError("cannot fit a normalizer on zero events")
    bounds: dict[str, tuple[float, float]] = {}
    for var in VARIABLES:
        lo, hi = np.inf, -np.inf
        for seq in events:
            f = derive_fields(seq)[var]
            if var.startswith("d"):
                f = f[1:]
            lo = min(lo, float(f.min()))
            hi = max(hi, float(f.max()))
        if hi - lo < SPAN_FLOOR:
            hi = lo + SPAN_FLOOR
        bounds[var] = (lo, hi)
    return Normalizer(bounds=bounds, clamp=clamp)


# ---------------------------------------------------------------------------
# Cell geometry


def cell_grid_shape(grid_y: int, grid_x: int) -> tuple[int, int]:
    return grid_y // CELL, grid_x // CELL


def window_origin(row: int, col: int, dy: int = 0, dx: int = 0) -> tuple[int, int]:
    """Top-left pixel of the 18x18 window for a cell, plus a pixel shift."""
    return row * CELL - MARGIN + dy, col * CELL - MARGIN + dx


def window_in_domain(
    grid_y: int, grid_x: int, row: int, col: int, dy: int = 0, dx: int = 0
) -> bool:
    y0, x0 = window_origin(row, col, dy, dx)
    return 0 <= y0 and 0 <= x0 and y0 + WINDOW <= grid_y and x0 + WINDOW <= grid_x


def interior_cells(grid_y: int, grid_x: int) -> list[tuple[int, int]]:
    """Cells whose unshifted window fits the domain, row-major order."""
    rows, cols = cell_grid_shape(grid_y, grid_x)
    return [
        (r, c)
        for r in range(1, rows - 1)
        for c in range(1, cols - 1)
        if window_in_domain(grid_y, grid_x, r, c)
    ]


def anchor_frames(frames: int) -> range:
    """Frames usable as anchors: t-3 must exist for context differences
    and t+2 for the verifying observation."""
    return range(HISTORY + 1, frames - LEAD_FRAMES)


def label_cell(
    raw_r_frame: np.ndarray, row: int, col: int, dy: int = 0, dx: int = 0
) -> int:
    """1 when composite reflectivity in the (shifted) cell reaches 35 dBZ."""
    if raw_r_frame.ndim != 3:
        raise DataError(f"label needs a [Z,Y,X] frame, got {raw_r_frame.shape}")
    y0 = row * CELL + dy
    x0 = col * CELL + dx
    _, grid_y, grid_x = raw_r_frame.shape
    if y0 < 0 or x0 < 0 or y0 + CELL > grid_y or x0 + CELL > grid_x:
        raise DataError(
            f"cell footprint ({row},{col}) shifted ({dy},{dx}) leaves the domain"
        )
    composite = raw_r_frame[:, y0:y0 + CELL, x0:x0 + CELL].max(axis=0)
    return int(composite.max() >= THRESHOLD_DBZ)


# ---------------------------------------------------------------------------
# Event tensors and sample assembly


@dataclass
class EventTensors:
    """One event prepared for sampling: normalized variable stack plus the
    raw reflectivity kept for labeling and the persistence baseline."""

    event_id: str
    norm: np.ndarray       # [T, 6, Z, Y, X] float32, normalized
    raw_r: np.ndarray      # [T, Z, Y, X] float32, dBZ

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.raw_r.shape


def prepare_event(seq: GridSequence, normalizer: Normalizer) -> EventTensors:
    derived = derive_fields(seq)
    norm = np.stack(
        [normalizer.transform(derived[v], v) for v in VARIABLES], axis=1
    ).astype(np.float32)
    return EventTensors(
        event_id=seq.event_id,
        norm=norm,
        raw_r=seq.fields["R"],
    )


def extract_block(
    ev: EventTensors, t: int, row: int, col: int, dy: int = 0, dx: int = 0
) -> np.ndarray:
    """The [6, 18, 18, Z] normalized block for one cell window at frame t."""
    y0, x0 = window_origin(row, col, dy, dx)
    sub = ev.norm[t, :, :, y0:y0 + WINDOW, x0:x0 + WINDOW]   # [6, Z, 18, 18]
    return np.ascontiguousarray(sub.transpose(0, 2, 3, 1))


def block_to_channels(values: np.ndarray) -> np.ndarray:
    """Flatten a [6, 18, 18, Z] block to [6*Z, 18, 18] conv channels.

    Channel order is variable-major: all Z slices of R, then of dR, and
    so on, matching the order the model's first layer was sized for.
    """
    v, wy, wx, z = values.shape
    return np.ascontiguousarray(values.transpose(0, 3, 1, 2)).reshape(v * z, wy, wx)


def extract_channels(
    ev: EventTensors, t: int, row: int, col: int, dy: int = 0, dx: int = 0
) -> np.ndarray:
    y0, x0 = window_origin(row, col, dy, dx)
    sub = ev.norm[t, :, :, y0:y0 + WINDOW, x0:x0 + WINDOW]
    v, z = sub.shape[0], sub.shape[1]
    return np.ascontiguousarray(sub).reshape(v * z, WINDOW, WINDOW)


@dataclass
class CellSample:
    values: np.ndarray              # [6, 18, 18, Z] float32 normalized
    label: int
    event_id: str
    frame: int
    row: int
    col: int
    oversampled: bool = False
    offset: tuple[int, int] = (0, 0)


@dataclass
class SampleSet:
    samples: list[CellSample]
    split: str
    events: tuple[str, ...]
    meta: dict | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def n_positive(self) -> int:
        return sum(s.label for s in self.samples)

    @property
    def positive_fraction(self) -> float | None:
        if not self.samples:
            return None
        return self.n_positive / len(self.samples)


def assemble_sample(ev: EventTensors, t: int, row: int, col: int) -> CellSample | None:
    """Build one unshifted sample, or None when the window leaves the grid."""
    t_n = ev.dims[0]
    if t < HISTORY + 1 or t + LEAD_FRAMES >= t_n:
        raise InsufficientHistoryError(
            f"anchor {t} outside usable range [{HISTORY + 1}, {t_n - LEAD_FRAMES - 1}]"
        )
    grid_y, grid_x = ev.dims[2], ev.dims[3]
    if not window_in_domain(grid_y, grid_x, row, col):
        return None
    values = extract_block(ev, t, row, col)
    if not np.isfinite(values).all():
        raise DataError(
            f"non-finite values in sample ({ev.event_id}, t={t}, cell=({row},{col}))"
        )
    return CellSample(
        values=values,
        label=label_cell(ev.raw_r[t + LEAD_FRAMES], row, col),
        event_id=ev.event_id,
        frame=t,
        row=row,
        col=col,
    )


def assemble_event_samples(ev: EventTensors) -> list[CellSample]:
    """Every (anchor frame, interior cell) sample, frame-major order."""
    t_n, _, grid_y, grid_x = ev.dims
    cells = interior_cells(grid_y, grid_x)
    out = []
    for t in anchor_frames(t_n):
        for row, col in cells:
            s = assemble_sample(ev, t, row, col)
            if s is not None:
                out.append(s)
    return out


def shift_offsets(k: int) -> tuple[tuple[int, int], ...]:
    """The eight oversampling shifts at magnitude k, fixed order."""
    if k not in (1, 2):
        raise ConfigError(f"oversample shift K must be 1 or 2, got {k}")
    return (
        (-k, 0), (k, 0), (0, -k), (0, k),
        (-k, -k), (-k, k), (k, -k), (k, k),
    )


def oversample_positives(
    train: SampleSet, events_by_id: dict[str, EventTensors], k: int
) -> SampleSet:
    """Append shifted copies of positive train samples.

    A copy is kept only when the shifted window stays inside the grid and
    the label recomputed on the shifted cell footprint is still 1. The
    originals are preserved in order; copies follow them.
    """
    offsets = shift_offsets(k)
    if train.split != "train":
        raise UsageError(f"oversampling is train-only, got split {train.split!r}")
    added = []
    for s in train.samples:
        if s.label != 1 or s.oversampled:
            continue
        ev = events_by_id.get(s.event_id)
        if ev is None:
            raise DataError(f"sample references unknown event {s.event_id!r}")
        grid_y, grid_x = ev.dims[2], ev.dims[3]
        for dy, dx in offsets:
            if not window_in_domain(grid_y, grid_x, s.row, s.col, dy, dx):
                continue
            if label_cell(ev.raw_r[s.frame + LEAD_FRAMES], s.row, s.col, dy, dx) != 1:
                continue
            added.append(CellSample(
                values=extract_block(ev, s.frame, s.row, s.col, dy, dx),
                label=1,
                event_id=s.event_id,
                frame=s.frame,
                row=s.row,
                col=s.col,
                oversampled=True,
                offset=(dy, dx),
            ))
    return SampleSet(
        samples=train.samples + added,
        split="train",
        events=train.events,
        meta=train.meta,
    )


# ---------------------------------------------------------------------------
# Event-level split


@dataclass
class PreparedData:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    normalizer: Normalizer
    events_by_id: dict[str, EventTensors] = field(repr=False, default_factory=dict)


def split_events(
    events,
    n_train: int,
    n_test: int,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> PreparedData:
    """Event-level split: the first n_train events feed train/validation,
    the remaining n_test are held out for testing.

    The normalizer is fitted on training events only and applied to all.
    Validation is the last val_fraction of train samples under one seeded
    shuffle; train and validation share events, the test events overlap
    with neither.
    """
    events = list(events)
    if n_train < 1 or n_test < 1:
        raise ConfigError(f"need n_train >= 1 and n_test >= 1, got {n_train}/{n_test}")
    if len(events) != n_train + n_test:
        raise ConfigError(
            f"got {len(events)} events but n_train + n_test = {n_train + n_test}"
        )
    if not 0.0 <= val_fraction <= 0.5:
        raise ConfigError(f"val_fraction must be in [0, 0.5], got {val_fraction}")
    ids = [e.event_id for e in events]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate event ids in corpus: {ids}")

    train_events = events[:n_train]
    test_events = events[n_train:]
    normalizer = fit_normalizer(train_events)
    tensors = {e.event_id: prepare_event(e, normalizer) for e in events}

    pool: list[CellSample] = []
    for e in train_events:
        pool.extend(assemble_event_samples(tensors[e.event_id]))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pool))
    n_val = int(len(pool) * val_fraction)
    train_samples = [pool[i] for i in perm[: len(pool) - n_val]]
    val_samples = [pool[i] for i in perm[len(pool) - n_val:]]

    test_samples: list[CellSample] = []
    for e in test_events:
        test_samples.extend(assemble_event_samples(tensors[e.event_id]))

    train_ids = tuple(e.event_id for e in train_events)
    test_ids = tuple(e.event_id for e in test_events)
    assert not set(train_ids) & set(test_ids)
    return PreparedData(
        train=SampleSet(train_samples, "train", train_ids),
        validation=SampleSet(val_samples, "validation", train_ids),
        test=SampleSet(test_samples, "test", test_ids),
        normalizer=normalizer,
        events_by_id=tensors,
    )


# ---------------------------------------------------------------------------
# File format


def _encode_flags(s: CellSample) -> int:
    dy, dx = s.offset
    if not (-128 <= dy < 128 and -128 <= dx < 128):
        raise DataError(f"offset {s.offset} does not fit the flags encoding")
    return (1 if s.oversampled else 0) | ((dy + 128) << 8) | ((dx + 128) << 16)


def write_sample_set(
    sset: SampleSet,
    path,
    config_hash: str | None = None,
    normalizer: Normalizer | None = None,
):
    """Serialize a sample set, streaming one record at a time."""
    index = {eid: i for i, eid in enumerate(sset.events)}
    meta = {"split": sset.split, "events": list(sset.events)}
    if config_hash is not None:
        meta["config_hash"] = config_hash
    if normalizer is not None:
        meta["normalizer"] = {
            "bounds": {v: list(b) for v, b in normalizer.bounds.items()},
            "clamp": normalizer.clamp,
        }
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(SAMPLES_MAGIC)
        f.write(struct.pack("<I", len(sset.samples)))
        for s in sset.samples:
            if s.event_id not in index:
                raise DataError(
                    f"sample event {s.event_id!r} missing from set provenance"
                )
            if s.values.shape != (len(VARIABLES), WINDOW, WINDOW, LEVELS):
                raise DataError(
                    f"sample block shape {s.values.shape} != "
                    f"{(len(VARIABLES), WINDOW, WINDOW, LEVELS)}"
                )
            f.write(struct.pack(
                "<6I", index[s.event_id], s.frame, s.row, s.col,
                int(s.label), _encode_flags(s),
            ))
            f.write(s.values.astype("<f4").tobytes())
        f.write(META_MAGIC)
        f.write(struct.pack("<I", len(js)))
        f.write(js)


def read_sample_set(path, with_values: bool = True) -> SampleSet:
    """Parse a sample set. with_values=False skips the value payloads,
    which is enough when blocks are rebuilt from event grids anyway."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != SAMPLES_MAGIC:
        raise FormatError(f"{path}: bad magic, expected NWS1", offset=0)
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    (count,) = struct.unpack_from("<I", buf, 4)
    record = 24 + BLOCK_VALUES * 4
    pos = 8
    if len(buf) - pos < count * record:
        raise FormatError(
            f"{path}: truncated: {count} samples need {count * record} bytes, "
            f"have {len(buf) - pos}",
            offset=pos,
        )
    metas = []
    for i in range(count):
        ev_idx, frame, row, col, label, flags = struct.unpack_from("<6I", buf, pos)
        if label not in (0, 1):
            raise FormatError(f"{path}: sample {i} label {label} not in {{0,1}}", offset=pos)
        if flags >> 24:
            raise FormatError(f"{path}: sample {i} has unknown flag bits", offset=pos)
        values = None
        if with_values:
            values = np.frombuffer(
                buf, dtype="<f4", count=BLOCK_VALUES, offset=pos + 24
            ).reshape(len(VARIABLES), WINDOW, WINDOW, LEVELS)
        metas.append((ev_idx, frame, row, col, label, flags, values))
        pos += record

    meta = None
    if pos < len(buf):
        if len(buf) - pos < 8 or buf[pos:pos + 4] != META_MAGIC:
            raise FormatError(f"{path}: trailing bytes are not a META footer", offset=pos)
        (mlen,) = struct.unpack_from("<I", buf, pos + 4)
        if len(buf) - pos - 8 < mlen:
            raise FormatError(f"{path}: truncated META footer", offset=pos + 8)
        try:
            meta = json.loads(buf[pos + 8:pos + 8 + mlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad META JSON: {e}", offset=pos + 8) from None
        if pos + 8 + mlen != len(buf):
            raise FormatError(
                f"{path}: {len(buf) - pos - 8 - mlen} junk bytes after META footer",
                offset=pos + 8 + mlen,
            )

    if meta and "events" in meta:
        events = tuple(meta["events"])
    else:
        events = tuple(f"event_{i}" for i in range(
            max((m[0] for m in metas), default=-1) + 1
        ))
    split = meta.get("split", "unknown") if meta else "unknown"
    samples = []
    for i, (ev_idx, frame, row, col, label, flags, values) in enumerate(metas):
        if ev_idx >= len(events):
            raise FormatError(f"{path}: sample {i} event index {ev_idx} out of range")
        samples.append(CellSample(
            values=values,
            label=label,
            event_id=events[ev_idx],
            frame=frame,
            row=row,
            col=col,
            oversampled=bool(flags & 1),
            offset=(((flags >> 8) & 0xFF) - 128, ((flags >> 16) & 0xFF) - 128),
        ))
    return SampleSet(samples=samples, split=split, events=events, meta=meta)
