"""Synthetic 3D storm fields with a built-in precursor signal.

Each event is a short sequence of volumetric grids on a 15-minute cadence
holding reflectivity R (dBZ), perturbation temperature pt (K), and vertical
velocity w (m/s). Storms are Gaussian blobs advected along straight tracks
with a grow/plateau/decay intensity envelope. The thermodynamic fields lead
reflectivity by a fixed number of frames: pt and w at time t are drawn from
the storm state at t + initiation_lead, so updrafts appear before the
reflectivity core does. A nowcaster that reads w therefore has information
a reflectivity-persistence forecast cannot have.

Reflectivity combines storms with a pointwise max (overlapping cores do not
add dBZ); pt and w are additive. Gaussian pixel noise is applied last and R
is clamped to [0, 70].

Grid files use a flat little-endian layout (magic "NWC1"): dimension header,
null-terminated variable names, then float32 values nested time-major as
[T][V][Z][Y][X]. An optional "META" JSON footer carries provenance such as
the generating config hash; readers accept files without it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

GRID_MAGIC = b"NWC1"
META_MAGIC = b"META"
RAW_VARIABLES = ("R", "pt", "w")
FRAME_MINUTES = 15


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the storm generator. Ranges are (low, high) inclusive."""

    grid_y: int = 48
    grid_x: int = 60
    levels: int = 20
    frames: int = 24
    events: int = 7
    storms_min: int = 3
    storms_max: int = 5
    peak_dbz: tuple[float, float] = (44.0, 58.0)
    sigma_h: tuple[float, float] = (4.0, 6.0)       # horizontal extent, px
    sigma_z: tuple[float, float] = (3.0, 6.0)       # vertical extent, levels
    speed: tuple[float, float] = (0.8, 2.2)          # px per frame
    grow_frames: tuple[int, int] = (2, 5)
    plateau_frames: tuple[int, int] = (5, 12)
    decay_frames: tuple[int, int] = (3, 7)
    start_frame: tuple[int, int] = (-2, 14)
    amp_pt: tuple[float, float] = (2.0, 4.0)         # K at blob center
    amp_w: tuple[float, float] = (6.0, 12.0)         # m/s at blob center
    initiation_lead: int = 2                          # frames w/pt lead R by
    noise_sigma_r: float = 2.0
    noise_sigma_pt: float = 0.12
    noise_sigma_w: float = 0.25

    def validate(self):
        if self.grid_y < 18 or self.grid_x < 18:
            raise ConfigError(
                f"grid must be at least 18x18, got {self.grid_y}x{self.grid_x}"
            )
        if self.grid_y % 6 or self.grid_x % 6:
            raise ConfigError(
                f"grid dims must be multiples of the 6 px cell, got {self.grid_y}x{self.grid_x}"
            )
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.frames < 6:
            raise ConfigError(f"frames must be >= 6, got {self.frames}")
        if self.events < 0:
            raise ConfigError(f"events must be >= 0, got {self.events}")
        if not 0 <= self.storms_min <= self.storms_max:
            raise ConfigError(
                f"storm count range invalid: ({self.storms_min}, {self.storms_max})"
            )
        if self.initiation_lead < 1:
            raise ConfigError(
                f"initiation_lead must be >= 1 frame, got {self.initiation_lead}"
            )
        for name in (
            "peak_dbz", "sigma_h", "sigma_z", "speed", "grow_frames",
            "plateau_frames", "decay_frames", "start_frame", "amp_pt", "amp_w",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) has low > high")
        for name in ("sigma_h", "sigma_z", "amp_pt", "amp_w", "peak_dbz"):
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.speed[0] < 0:
            raise ConfigError("speed must be >= 0")
        if min(self.grow_frames[0], self.plateau_frames[0], self.decay_frames[0]) < 1:
            raise ConfigError("envelope stage durations must be >= 1 frame")
        for name in ("noise_sigma_r", "noise_sigma_pt", "noise_sigma_w"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class GridSequence:
    """One event: a dict of [T,Z,Y,X] float32 fields sharing a grid."""

    event_id: str
    fields: dict[str, np.ndarray]
    frame_minutes: int = FRAME_MINUTES
    provenance: dict | None = None

    def __post_init__(self):
        if not self.fields:
            raise DataError("grid sequence has no fields")
        shapes = {v: a.shape for v, a in self.fields.items()}
        ref = next(iter(shapes.values()))
        if len(ref) != 4:
            raise DataError(f"fields must be [T,Z,Y,X], got {ref}")
        for v, s in shapes.items():
            if s != ref:
                raise DataError(f"field {v!r} shape {s} != {ref}")
        for v, a in self.fields.items():
            if a.dtype != np.float32:
                self.fields[v] = a.astype(np.float32)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return next(iter(self.fields.values())).shape

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(self.fields.keys())


@dataclass(frozen=True)
class _Storm:
    cy: float
    cx: float
    vy: float
    vx: float
    peak: float
    sigma_h: float
    sigma_z: float
    z_center: float
    t0: int
    grow: int
    plateau: int
    decay: int
    amp_pt: float
    amp_w: float

    def envelope(self, t: float) -> float:
        """Piecewise-linear intensity: ramp up, hold, ramp down."""
        knots_t = (
            self.t0,
            self.t0 + self.grow,
            self.t0 + self.grow + self.plateau,
            self.t0 + self.grow + self.plateau + self.decay,
        )
        return float(np.interp(t, knots_t, (0.0, 1.0, 1.0, 0.0), left=0.0, right=0.0))

    def center(self, t: float) -> tuple[float, float]:
        return self.cy + self.vy * t, self.cx + self.vx * t


def _draw_storms(cfg: SynthConfig, rng: np.random.Generator) -> list[_Storm]:
    n = int(rng.integers(cfg.storms_min, cfg.storms_max + 1))
    storms = []
    for _ in range(n):
        cy = rng.uniform(0.1 * cfg.grid_y, 0.9 * cfg.grid_y)
        cx = rng.uniform(0.1 * cfg.grid_x, 0.9 * cfg.grid_x)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(*cfg.speed)
        storms.append(_Storm(
            cy=cy,
            cx=cx,
            vy=speed * np.sin(angle),
            vx=speed * np.cos(angle),
            peak=rng.uniform(*cfg.peak_dbz),
            sigma_h=rng.uniform(*cfg.sigma_h),
            sigma_z=rng.uniform(*cfg.sigma_z),
            z_center=rng.uniform(0.2 * cfg.levels, 0.8 * cfg.levels),
            t0=int(rng.integers(cfg.start_frame[0], cfg.start_frame[1] + 1)),
            grow=int(rng.integers(cfg.grow_frames[0], cfg.grow_frames[1] + 1)),
            plateau=int(rng.integers(cfg.plateau_frames[0], cfg.plateau_frames[1] + 1)),
            decay=int(rng.integers(cfg.decay_frames[0], cfg.decay_frames[1] + 1)),
            amp_pt=rng.uniform(*cfg.amp_pt),
            amp_w=rng.uniform(*cfg.amp_w),
        ))
    return storms


def _blob(storm: _Storm, t: float, zz, yy, xx) -> np.ndarray:
    """Unit-amplitude Gaussian [Z,Y,X] for the storm position at time t."""
    cy, cx = storm.center(t)
    horiz = np.exp(
        -((yy - cy)[:, None] ** 2 + (xx - cx)[None, :] ** 2)
        / (2.0 * storm.sigma_h ** 2)
    )
    vert = np.exp(-((zz - storm.z_center) ** 2) / (2.0 * storm.sigma_z ** 2))
    return vert[:, None, None] * horiz[None, :, :]


def synth_event(
    cfg: SynthConfig,
    seed: int,
    event_id: str | None = None,
    with_noise: bool = True,
) -> GridSequence:
    """Generate one event deterministically from (cfg, seed).

    with_noise=False returns the clean construction, which is useful for
    checking signal-to-noise properties; production data keeps the noise.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    storms = _draw_storms(cfg, rng)
    t_n, z_n, y_n, x_n = cfg.frames, cfg.levels, cfg.grid_y, cfg.grid_x
    zz = np.arange(z_n, dtype=np.float64)
    yy = np.arange(y_n, dtype=np.float64)
    xx = np.arange(x_n, dtype=np.float64)

    r = np.zeros((t_n, z_n, y_n, x_n))
    pt = np.zeros_like(r)
    w = np.zeros_like(r)
    lead = cfg.initiation_lead
    for t in range(t_n):
        for s in storms:
            e_now = s.envelope(t)
            if e_now > 0.0:
                np.maximum(r[t], s.peak * e_now * _blob(s, t, zz, yy, xx), out=r[t])
            e_next = s.envelope(t + lead)
            if e_next > 0.0:
                g = _blob(s, t + lead, zz, yy, xx)
                pt[t] += s.amp_pt * e_next * g
                w[t] += s.amp_w * e_next * g

    if with_noise:
        # One draw per field in fixed order keeps events reproducible.
        r += rng.normal(0.0, cfg.noise_sigma_r, r.shape)
        pt += rng.normal(0.0, cfg.noise_sigma_pt, pt.shape)
        w += rng.normal(0.0, cfg.noise_sigma_w, w.shape)
    np.clip(r, 0.0, 70.0, out=r)

    if event_id is None:
        event_id = f"event_{seed}"
    fields = {
        "R": r.astype(np.float32),
        "pt": pt.astype(np.float32),
        "w": w.astype(np.float32),
    }
    return GridSequence(event_id=event_id, fields=fields)


# ---------------------------------------------------------------------------
# File format


def write_grid(seq: GridSequence, path, provenance: dict | None = None):
    """Serialize a grid sequence. Always appends the META footer."""
    t_n, z_n, y_n, x_n = seq.dims
    names = seq.variables
    for v in names:
        if not v.isascii() or "\0" in v:
            raise DataError(f"variable name {v!r} is not plain ASCII")
    meta = {
        "event_id": seq.event_id,
        "frame_minutes": seq.frame_minutes,
    }
    if provenance:
        meta.update(provenance)
    payload = np.stack([seq.fields[v] for v in names], axis=1)
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<5I", t_n, z_n, y_n, x_n, len(names)))
        for v in names:
            f.write(v.encode("ascii") + b"\0")
        f.write(payload.astype("<f4").tobytes())
        f.write(META_MAGIC)
        f.write(struct.pack("<I", len(js)))
        f.write(js)


def read_grid(path) -> GridSequence:
    """Parse a grid file, validating structure before touching values."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic, expected NWC1", offset=0)
    if len(buf) < 24:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    t_n, z_n, y_n, x_n, v_n = struct.unpack_from("<5I", buf, 4)
    for label, d in (("T", t_n), ("Z", z_n), ("Y", y_n), ("X", x_n), ("V", v_n)):
        if d == 0 or d > 1_000_000:
            raise FormatError(f"{path}: implausible dimension {label}={d}", offset=4)
    total = t_n * v_n * z_n * y_n * x_n
    if total > 2 ** 33:
        raise FormatError(f"{path}: dimension product overflows sanity bound", offset=4)
    pos = 24
    names = []
    for _ in range(v_n):
        end = buf.find(b"\0", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated variable table", offset=pos)
        try:
            names.append(buf[pos:end].decode("ascii"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: non-ASCII variable name", offset=pos) from None
        pos = end + 1
    if len(set(names)) != len(names):
        raise FormatError(f"{path}: duplicate variable names {names}", offset=24)
    need = total * 4
    if len(buf) - pos < need:
        raise FormatError(
            f"{path}: truncated payload, need {need} bytes, have {len(buf) - pos}",
            offset=pos,
        )
    arr = np.frombuffer(buf, dtype="<f4", count=total, offset=pos)
    arr = arr.reshape(t_n, v_n, z_n, y_n, x_n)
    pos += need

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

    fields = {v: np.ascontiguousarray(arr[:, i]) for i, v in enumerate(names)}
    event_id = Path(path).stem
    frame_minutes = FRAME_MINUTES
    if meta:
        event_id = meta.get("event_id", event_id)
        frame_minutes = meta.get("frame_minutes", frame_minutes)
    return GridSequence(
        event_id=event_id,
        fields=fields,
        frame_minutes=frame_minutes,
        provenance=meta,
    )
