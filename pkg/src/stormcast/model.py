"""The nowcasting network and its training loop.

Per time step, a shared CNN reads the cell window as a 2D image whose
channels are the 20 height slices of all six variables (120 channels at
18x18 px): conv 5x5 then three conv 3x3 stages, each batch-normalized and
rectified, a 2x2 max pool, and two dense layers down to a 50-dim feature
vector. The spatial chain is checked layer by layer: 18 -> 14 -> 12 -> 10
-> 8 -> pool -> 4.

Three consecutive steps (t-2, t-1, t) feed an LSTM whose final hidden
state drives a 2-way softmax classifier. Blocks for the earlier steps are
cut from the event grids at the same (possibly shifted) window as the
anchor sample, which is why training needs the prepared event tensors and
not only the sample file.

Model selection tracks validation CSI at threshold 0.5: the initial
weights count as epoch 0 and the best state is restored after the last
epoch, so a run can never end worse than it started on that metric.

Model files (magic "NWM1") carry a JSON echo of the architecture, the
normalizer, and the config hash, then named float64 parameter sections,
and end with a CRC32 so truncation or corruption is detected on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Optimizer, Tensor, no_grad
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
)
from .pipeline import (
    LEVELS,
    VARIABLES,
    WINDOW,
    EventTensors,
    Normalizer,
    SampleSet,
    block_to_channels,
    extract_channels,
)
from .verification import confusion, skill_scores

MODEL_MAGIC = b"NWM1"
MODEL_VERSION = 1
PREDICT_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    conv_channels: tuple[int, int, int, int] = (80, 64, 48, 32)
    kernel_sizes: tuple[int, int, int, int] = (5, 3, 3, 3)
    fc_hidden: int = 128
    feature_dim: int = 50
    lstm_hidden: int = 64
    early_stop_patience: int = 5
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 for batch norm, got {self.batch_size}"
            )
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if len(self.conv_channels) != 4 or len(self.kernel_sizes) != 4:
            raise ConfigError("conv_channels and kernel_sizes must have 4 entries")
        if min(self.conv_channels) < 1:
            raise ConfigError(f"conv channels must be >= 1, got {self.conv_channels}")
        if min(self.fc_hidden, self.feature_dim) < 1:
            raise ConfigError("fc_hidden and feature_dim must be >= 1")
        if self.lstm_hidden < 2:
            raise ConfigError(f"lstm_hidden must be >= 2, got {self.lstm_hidden}")
        if self.early_stop_patience < 1:
            raise ConfigError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}"
            )
        spatial = WINDOW
        for k in self.kernel_sizes:
            spatial = spatial - k + 1
            if spatial < 2:
                raise ConfigError(
                    f"kernel sizes {self.kernel_sizes} exhaust the {WINDOW} px window"
                )
        if spatial % 2:
            raise ConfigError(
                f"spatial size {spatial} before pooling must be even"
            )


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class NowcastModel:
    """Shared-CNN + LSTM binary nowcaster over three consecutive blocks."""

    def __init__(
        self,
        cfg: TrainConfig,
        normalizer: Normalizer,
        input_channels: int = len(VARIABLES) * LEVELS,
        rng: np.random.Generator | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.normalizer = normalizer
        self.input_channels = input_channels
        self.config_hash: str | None = None
        self.last_shapes: list[int] = []
        if rng is None:
            rng = np.random.default_rng([cfg.seed, 0])

        c1, c2, c3, c4 = cfg.conv_channels
        k1, k2, k3, k4 = cfg.kernel_sizes
        self.params: dict[str, Tensor] = {}
        self.bn: list[BatchNormState] = []

        def conv_param(name, out_c, in_c, k):
            self.params[f"{name}_w"] = ad.parameter(
                _uniform_init(rng, (out_c, in_c, k, k), in_c * k * k)
            )
            self.params[f"{name}_b"] = ad.parameter(np.zeros(out_c))

        conv_param("conv1", c1, input_channels, k1)
        conv_param("conv2", c2, c1, k2)
        conv_param("conv3", c3, c2, k3)
        conv_param("conv4", c4, c3, k4)
        for c in (c1, c2, c3, c4):
            self.bn.append(BatchNormState(c))

        spatial = WINDOW
        self._chain = [spatial]
        for k in (k1, k2, k3, k4):
            spatial = spatial - k + 1
            self._chain.append(spatial)
        spatial //= 2
        self._chain.append(spatial)
        flat = c4 * spatial * spatial

        def fc_param(name, out_n, in_n):
            self.params[f"{name}_w"] = ad.parameter(
                _uniform_init(rng, (out_n, in_n), in_n)
            )
            self.params[f"{name}_b"] = ad.parameter(np.zeros(out_n))

        fc_param("fc1", cfg.fc_hidden, flat)
        fc_param("fc2", cfg.feature_dim, cfg.fc_hidden)

        h, d = cfg.lstm_hidden, cfg.feature_dim
        for gate in ("i", "f", "g", "o"):
            self.params[f"lstm_w{gate}"] = ad.parameter(
                _uniform_init(rng, (h, d), d)
            )
            self.params[f"lstm_u{gate}"] = ad.parameter(
                _uniform_init(rng, (h, h), h)
            )
            bias = np.ones(h) if gate == "f" else np.zeros(h)
            self.params[f"lstm_b{gate}"] = ad.parameter(bias)

        fc_param("cls", 2, h)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = list(self.params.values())
        for bn in self.bn:
            out.extend((bn.gamma, bn.beta))
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array, including BN running statistics."""
        out = {name: t.data for name, t in self.params.items()}
        for i, bn in enumerate(self.bn, start=1):
            out[f"bn{i}_gamma"] = bn.gamma.data
            out[f"bn{i}_beta"] = bn.beta.data
            out[f"bn{i}_running_mean"] = bn.running_mean
            out[f"bn{i}_running_var"] = bn.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def restore(self, state: dict[str, np.ndarray]):
        current = self.named_arrays()
        if set(state) != set(current):
            raise DataError("snapshot does not match this model's parameters")
        for name, t in self.params.items():
            t.data = state[name].copy()
        for i, bn in enumerate(self.bn, start=1):
            bn.gamma.data = state[f"bn{i}_gamma"].copy()
            bn.beta.data = state[f"bn{i}_beta"].copy()
            bn.running_mean = state[f"bn{i}_running_mean"].copy()
            bn.running_var = state[f"bn{i}_running_var"].copy()

    # -- forward passes -----------------------------------------------------

    def _expect(self, t: Tensor, size: int):
        if t.data.shape[-1] != size or t.data.shape[-2] != size:
            raise DimensionError(
                f"spatial chain broken: got {t.data.shape[-2:]}, expected {size}x{size}"
            )
        self.last_shapes.append(size)

    def _cnn(self, x: Tensor, training: bool) -> Tensor:
        """[B, C, 18, 18] -> [B, feature_dim] shared feature extractor."""
        if x.data.shape[1] != self.input_channels:
            raise DimensionError(
                f"expected {self.input_channels} input channels, got {x.data.shape[1]}"
            )
        self.last_shapes = []
        self._expect(x, self._chain[0])
        for i in range(4):
            x = ad.conv2d(x, self.params[f"conv{i + 1}_w"], self.params[f"conv{i + 1}_b"])
            self._expect(x, self._chain[i + 1])
            x = ad.batch_norm(x, self.bn[i], training)
            x = ad.relu(x)
        x = ad.max_pool2d(x, 2)
        self._expect(x, self._chain[5])
        b = x.data.shape[0]
        x = ad.reshape(x, (b, -1))
        x = ad.relu(ad.linear(x, self.params["fc1_w"], self.params["fc1_b"]))
        return ad.linear(x, self.params["fc2_w"], self.params["fc2_b"])

    def _lstm_step(self, v: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params

        def gate(name, act):
            pre = ad.add(
                ad.linear(v, p[f"lstm_w{name}"], p[f"lstm_b{name}"]),
                ad.linear(h, p[f"lstm_u{name}"]),
            )
            return act(pre)

        i = gate("i", ad.sigmoid)
        f = gate("f", ad.sigmoid)
        g = gate("g", ad.tanh)
        o = gate("o", ad.sigmoid)
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def forward(self, x3: np.ndarray, training: bool) -> Tensor:
        """Logits for a batch of step-major inputs [B, 3, C, 18, 18]."""
        x3 = np.asarray(x3)
        if x3.ndim != 5 or x3.shape[1] != 3:
            raise DimensionError(
                f"expected [B, 3, C, {WINDOW}, {WINDOW}] input, got {x3.shape}"
            )
        b = x3.shape[0]
        h = Tensor(np.zeros((b, self.cfg.lstm_hidden)))
        c = Tensor(np.zeros((b, self.cfg.lstm_hidden)))
        for step in range(3):
            v = self._cnn(Tensor(x3[:, step].astype(np.float64)), training)
            h, c = self._lstm_step(v, h, c)
        return ad.linear(h, self.params["cls_w"], self.params["cls_b"])

    def predict_proba(self, x3: np.ndarray) -> np.ndarray:
        """Probability of the positive class, inference mode, no tape."""
        x3 = np.asarray(x3)
        out = np.empty(x3.shape[0], dtype=np.float64)
        with no_grad():
            for lo in range(0, x3.shape[0], PREDICT_CHUNK):
                chunk = x3[lo:lo + PREDICT_CHUNK]
                logits = self.forward(chunk, training=False)
                probs = ad.softmax(logits, axis=1).data
                out[lo:lo + chunk.shape[0]] = probs[:, 1]
        return out


def cnn_forward(model: NowcastModel, block: np.ndarray, training: bool = False) -> np.ndarray:
    """Feature vector for one [6, 18, 18, Z] block (inference by default)."""
    channels = block_to_channels(np.asarray(block, dtype=np.float32))
    with no_grad():
        feats = model._cnn(
            Tensor(channels[None].astype(np.float64)), training
        )
    return feats.data[0]


def lstm_forward(model: NowcastModel, features: list[np.ndarray]) -> np.ndarray:
    """Final hidden state for a sequence of feature vectors [B, feature]."""
    if len(features) != 3:
        raise DimensionError(f"expected 3 feature steps, got {len(features)}")
    b = np.asarray(features[0]).shape[0]
    with no_grad():
        h = Tensor(np.zeros((b, model.cfg.lstm_hidden)))
        c = Tensor(np.zeros((b, model.cfg.lstm_hidden)))
        for v in features:
            h, c = model._lstm_step(Tensor(np.asarray(v, dtype=np.float64)), h, c)
    return h.data


# ---------------------------------------------------------------------------
# Batch assembly from event grids


def gather_inputs(
    samples, events_by_id: dict[str, EventTensors]
) -> np.ndarray:
    """Stack [B, 3, C, 18, 18] float32 inputs for a list of samples.

    Context blocks at t-1 and t-2 reuse the anchor's window shift so the
    three views stay co-registered.
    """
    if not samples:
        raise DataError("cannot gather an empty batch")
    first = samples[0]
    ev0 = events_by_id.get(first.event_id)
    if ev0 is None:
        raise DataError(f"sample references unknown event {first.event_id!r}")
    channels = ev0.norm.shape[1] * ev0.norm.shape[2]
    out = np.empty((len(samples), 3, channels, WINDOW, WINDOW), dtype=np.float32)
    for i, s in enumerate(samples):
        ev = events_by_id.get(s.event_id)
        if ev is None:
            raise DataError(f"sample references unknown event {s.event_id!r}")
        dy, dx = s.offset
        for j, t in enumerate((s.frame - 2, s.frame - 1, s.frame)):
            out[i, j] = extract_channels(ev, t, s.row, s.col, dy, dx)
    return out


def predict_samples(
    model: NowcastModel, samples, events_by_id: dict[str, EventTensors]
) -> np.ndarray:
    """predict_proba over sample metadata, gathering inputs chunk-wise."""
    out = np.empty(len(samples), dtype=np.float64)
    for lo in range(0, len(samples), PREDICT_CHUNK):
        chunk = samples[lo:lo + PREDICT_CHUNK]
        out[lo:lo + len(chunk)] = model.predict_proba(
            gather_inputs(chunk, events_by_id)
        )
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    loss: float
    val_csi: float | None


@dataclass
class TrainingLog:
    epoch0_val_csi: float | None
    rows: list[EpochRow]
    best_epoch: int
    stopped_early: bool = False


def _val_csi(model, val_samples, events_by_id) -> float | None:
    if not val_samples:
        return None
    probs = predict_samples(model, val_samples, events_by_id)
    labels = np.array([s.label for s in val_samples])
    return skill_scores(confusion(probs, labels, 0.5)).csi


def train_model(
    train_set: SampleSet,
    val_set: SampleSet,
    cfg: TrainConfig,
    events_by_id: dict[str, EventTensors],
    normalizer: Normalizer,
) -> tuple[NowcastModel, TrainingLog]:
    """Train from scratch, keeping the best-validation-CSI state.

    Shuffling, initialization and therefore the final weights are fully
    determined by cfg.seed and the input sets.
    """
    cfg.validate()
    if len(train_set.samples) < 2:
        raise DataError(f"need at least 2 train samples, got {len(train_set.samples)}")
    model = NowcastModel(cfg, normalizer)
    opt = Optimizer(
        model.parameters(), kind=cfg.optimizer, lr=cfg.learning_rate
    )
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    samples = train_set.samples
    n = len(samples)

    best_csi = _val_csi(model, val_set.samples, events_by_id)
    epoch0_csi = best_csi
    best_key = -np.inf if best_csi is None else best_csi
    best_state = model.snapshot()
    best_epoch = 0

    rows: list[EpochRow] = []
    stopped_early = False
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        bounds = list(range(0, n, cfg.batch_size))
        loss_sum = 0.0
        for bi, lo in enumerate(bounds):
            hi = min(lo + cfg.batch_size, n)
            if n - hi == 1:
                hi = n    # fold a trailing singleton into this batch
            batch = [samples[i] for i in perm[lo:hi]]
            x3 = gather_inputs(batch, events_by_id)
            labels = np.array([s.label for s in batch])
            logits = model.forward(x3, training=True)
            loss = ad.cross_entropy_with_logits(logits, labels)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(epoch=epoch, batch=bi, loss=loss_val)
            loss.backward()
            opt.step()
            loss_sum += loss_val * len(batch)
            if hi == n:
                break
        epoch_loss = loss_sum / n
        csi = _val_csi(model, val_set.samples, events_by_id)
        rows.append(EpochRow(epoch=epoch, loss=epoch_loss, val_csi=csi))
        key = -np.inf if csi is None else csi
        # a scoreless epoch (no validation signal) cannot be ranked, so it
        # always becomes the checkpoint; otherwise only strict improvement does
        if csi is None or key > best_key:
            best_key = key
            best_state = model.snapshot()
            best_epoch = epoch
        if epoch - best_epoch >= cfg.early_stop_patience:
            stopped_early = True
            break

    model.restore(best_state)
    return model, TrainingLog(
        epoch0_val_csi=epoch0_csi,
        rows=rows,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )


# ---------------------------------------------------------------------------
# Model file IO


def save_model(model: NowcastModel, path, config_hash: str | None = None):
    echo = {
        "format_version": MODEL_VERSION,
        "train": asdict(model.cfg),
        "input_channels": model.input_channels,
        "window": WINDOW,
        "normalizer": {
            "bounds": {v: list(b) for v, b in model.normalizer.bounds.items()},
            "clamp": model.normalizer.clamp,
        },
    }
    if config_hash is not None:
        echo["config_hash"] = config_hash
    js = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode()
    arrays = model.named_arrays()
    body = bytearray()
    body += MODEL_MAGIC
    body += struct.pack("<I", MODEL_VERSION)
    body += struct.pack("<I", len(js))
    body += js
    body += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        nb = name.encode()
        body += struct.pack("<I", len(nb))
        body += nb
        body += struct.pack("<I", arr.ndim)
        body += struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (0,)))
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_model(path) -> NowcastModel:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic, expected NWM1", offset=0)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    stored_crc = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise FormatError(f"{path}: checksum mismatch", offset=len(buf) - 4)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    (jlen,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    if len(buf) - pos < jlen:
        raise FormatError(f"{path}: truncated config echo", offset=pos)
    try:
        echo = json.loads(buf[pos:pos + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad config JSON: {e}", offset=pos) from None
    pos += jlen

    tc = dict(echo["train"])
    for key in ("conv_channels", "kernel_sizes"):
        tc[key] = tuple(tc[key])
    try:
        cfg = TrainConfig(**tc)
    except TypeError as e:
        raise FormatError(f"{path}: config echo mismatch: {e}") from None
    norm = Normalizer(
        bounds={v: tuple(b) for v, b in echo["normalizer"]["bounds"].items()},
        clamp=echo["normalizer"]["clamp"],
    )
    model = NowcastModel(cfg, norm, input_channels=echo["input_channels"])
    model.config_hash = echo.get("config_hash")

    (n_sections,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(n_sections):
        if len(buf) - 4 - pos < 8:
            raise FormatError(f"{path}: truncated section header", offset=pos)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - 4 - pos < nlen + 4:
            raise FormatError(f"{path}: truncated section name", offset=pos)
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if ndim > 8:
            raise FormatError(f"{path}: section {name!r} has ndim {ndim}", offset=pos)
        dims = struct.unpack_from(f"<{max(ndim, 1)}I", buf, pos)
        pos += 4 * max(ndim, 1)
        shape = tuple(dims[:ndim]) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        nbytes = count * 8
        if len(buf) - 4 - pos < nbytes:
            raise FormatError(f"{path}: truncated section {name!r}", offset=pos)
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += nbytes

    expected = model.named_arrays()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise FormatError(
            f"{path}: parameter sections mismatch (missing {missing}, extra {extra})"
        )
    for name, arr in arrays.items():
        if arr.shape != expected[name].shape:
            raise FormatError(
                f"{path}: section {name!r} shape {arr.shape} != {expected[name].shape}"
            )
    model.restore({k: v.copy() for k, v in arrays.items()})
    return model
