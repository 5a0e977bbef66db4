"""Dataset splitting, AdamW training, checkpoints and history logging."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .dsp import DspConfig, read_image
from .model import EAViT, ModelConfig, param_shapes
from .tensor import Tensor

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
CHECKPOINT_MAGIC = b"EAVT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Unknown or malformed configuration key."""


class DataError(ValueError):
    """Dataset or manifest problem."""


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be positive")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class DataConfig:
    manifest: str = ""
    split_strategy: str = "track"
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.split_strategy not in ("track", "segment"):
            raise ConfigError(f"split_strategy must be 'track' or 'segment', got {self.split_strategy!r}")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)


@dataclass
class RunConfig:
    """Everything one flat ``key=value`` config file can set."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_flat(self) -> dict:
        flat = {}
        for section in (self.dsp, self.data, self.model, self.train):
            for f in fields(section):
                flat[f.name] = getattr(section, f.name)
        flat["split_ratios"] = list(self.data.split_ratios)
        return flat

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        unknown = set(values) - set(known_keys())
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        sections = {}
        for name, klass in (("model", ModelConfig), ("train", TrainConfig), ("dsp", DspConfig), ("data", DataConfig)):
            kw = {f.name: values[f.name] for f in fields(klass) if f.name in values}
            try:
                sections[name] = klass(**kw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**sections)


def known_keys() -> dict[str, object]:
    """Config key -> dataclass field; shared keys such as image_size feed every section."""
    keys = {}
    for klass in (DspConfig, DataConfig, ModelConfig, TrainConfig):
        for f in fields(klass):
            keys.setdefault(f.name, f)
    return keys


def _coerce(key: str, raw: str):
    f = known_keys()[key]
    raw = raw.strip()
    if key in ("head_hidden", "split_ratios"):
        parts = [p for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
        return [float(p) if key == "split_ratios" else int(p) for p in parts]
    if key in ("fmax", "mlp_encoder_hidden") and raw.lower() in ("", "none"):
        return None
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def parse_assignments(lines: Sequence[str], source: str = "<overrides>") -> dict:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known_keys():
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {raw!r}") from exc
    return values


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    values = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        values.update(parse_assignments(text.splitlines(), str(path)))
    values.update(parse_assignments(overrides))
    return RunConfig.from_flat(values)


def write_config(path, cfg: RunConfig) -> None:
    lines = []
    for k, v in cfg.to_flat().items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={'none' if v is None else v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# reproducibility
# ---------------------------------------------------------------------------


@contextmanager
def thread_limit(n: int | None) -> Iterator[None]:
    """Cap BLAS worker threads; ``n=1`` gives run-to-run identical reductions."""
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class DatasetIndex:
    entries: list[tuple[str, str, int]]
    splits: list[str]
    split_strategy: str
    seed: int

    def select(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == name]

    def tracks(self, name: str) -> set[str]:
        return {self.entries[i][1] for i in self.select(name)}


def _allocate(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest, strategy: str = "track", ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetIndex:
    """Stratified train/val/test assignment.

    ``manifest`` rows are ``(path, track_id, segment_index, label)``.  With the
    track strategy every segment of a recording lands in the same split.
    """
    rows = list(manifest)
    if not rows:
        raise DataError("manifest is empty")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    if strategy not in ("track", "segment"):
        raise DataError(f"unknown split strategy {strategy!r}")

    labels = sorted({int(r[3]) for r in rows})
    missing = sorted(set(range(labels[-1] + 1)) - set(labels))
    if missing:
        raise DataError(f"genre label(s) {missing} have no entries")

    rng = np.random.default_rng(seed)
    unit_split: dict = {}
    for lab in labels:
        if strategy == "track":
            units = sorted({r[1] for r in rows if int(r[3]) == lab})
        else:
            units = sorted((r[1], int(r[2])) for r in rows if int(r[3]) == lab)
        perm = rng.permutation(len(units))
        n_train, n_val, _ = _allocate(len(units), ratios)
        for rank, u in enumerate(perm):
            unit_split[units[u]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    entries, splits = [], []
    for path, tid, seg, lab in rows:
        key = tid if strategy == "track" else (tid, int(seg))
        entries.append((path, tid, int(lab)))
        splits.append(unit_split[key])
    return DatasetIndex(entries, splits, strategy, seed)


class ImageSet:
    """In-memory uint8 images and labels for a subset of a manifest."""

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, track_ids: Sequence[str] = ()):
        self.pixels = pixels
        self.labels = np.asarray(labels, dtype=np.int64)
        self.track_ids = list(track_ids)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def load(cls, index: DatasetIndex, split: str, root) -> "ImageSet":
        root = Path(root)
        sel = index.select(split)
        if not sel:
            return cls(np.zeros((0,), dtype=np.uint8), np.zeros(0), [])
        imgs = []
        for i in sel:
            path = root / index.entries[i][0]
            try:
                imgs.append(read_image(path))
            except (OSError, ValueError) as exc:
                raise DataError(f"cannot load {path}: {exc}") from exc
        return cls(np.stack(imgs), [index.entries[i][2] for i in sel], [index.entries[i][1] for i in sel])


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, lr: float, weight_decay: float) -> None:
    """One AdamW update with decoupled weight decay.

    ``p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``.  Parameters
    without a gradient are treated as having a zero gradient.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


@dataclass
class Trainer:
    """Mutable training state: model, optimizer, shuffling RNG and history."""

    model: EAViT
    config: RunConfig
    optimizer: OptimizerState
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig) -> "Trainer":
        model = EAViT(cfg.model, seed=cfg.train.seed, dtype=cfg.train.dtype)
        return cls(model, cfg, OptimizerState.zeros(model.params),
                   np.random.default_rng([cfg.train.seed, 1]))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(trainer: Trainer, data: ImageSet) -> tuple[float, float]:
    """One shuffled pass over ``data``; returns (mean loss, accuracy)."""
    model, tcfg = trainer.model, trainer.config.train
    if len(data) == 0:
        raise DataError("training split is empty")
    total_loss, correct = 0.0, 0
    for idx in batches(len(data), tcfg.batch_size, trainer.rng):
        logits = model.forward(data.pixels[idx])
        loss = T.cross_entropy(logits, data.labels[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {trainer.epoch + 1}, "
                               f"step {trainer.optimizer.step + 1}")
        model.zero_grad()
        T.backward(loss)
        optimizer_step(model.params, trainer.optimizer, tcfg.learning_rate, tcfg.weight_decay)
        total_loss += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
    return total_loss / len(data), correct / len(data)


def predict_logits(model: EAViT, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(pixels), batch_size):
            out.append(model.forward(pixels[start:start + batch_size]).data)
    if not out:
        return np.zeros((0, model.config.classes))
    return np.concatenate(out).astype(np.float64)


def evaluate(model: EAViT, data: ImageSet, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy; NaN for an empty split."""
    if len(data) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, data.pixels, batch_size)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(data)), data.labels].mean()
    return float(loss), float((logits.argmax(axis=1) == data.labels).mean())


def fit(trainer: Trainer, train_set: ImageSet, val_set: ImageSet, out_dir=None,
        epochs: int | None = None, checkpoint_every: int = 1) -> list[dict]:
    """Train until ``epochs`` (default: config) epochs are done, checkpointing as it goes."""
    target = epochs if epochs is not None else trainer.config.train.epochs
    if trainer.config.train.batch_size > len(train_set):
        logger.warning("batch_size %d exceeds %d training samples; using one batch per epoch",
                       trainer.config.train.batch_size, len(train_set))
    out_dir = Path(out_dir) if out_dir is not None else None
    while trainer.epoch < target:
        train_loss, train_acc = train_epoch(trainer, train_set)
        val_loss, val_acc = evaluate(trainer.model, val_set, trainer.config.train.batch_size)
        trainer.epoch += 1
        trainer.history.append(dict(epoch=trainer.epoch, train_loss=train_loss, train_acc=train_acc,
                                    val_loss=val_loss, val_acc=val_acc))
        logger.info("epoch %d: loss %.4f acc %.4f | val loss %.4f acc %.4f",
                    trainer.epoch, train_loss, train_acc, val_loss, val_acc)
        if out_dir is not None and (trainer.epoch % checkpoint_every == 0 or trainer.epoch == target):
            save_checkpoint(out_dir / "checkpoint.bin", trainer)
            log_history(trainer.history, out_dir / "history.csv")
    return trainer.history


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def log_history(history: list[dict], path) -> None:
    if not history:
        raise ValueError("history is empty")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[k])) for k in HISTORY_HEADER[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def _from_json_history(rows):
    return [{k: (float(v) if isinstance(v, str) else v) for k, v in r.items()} for r in rows]


def save_checkpoint(path, trainer: Trainer) -> None:
    """Write ``EAVT | u32 version | u32 len | JSON meta | raw buffers | u32 CRC32``.

    Buffers are little-endian and appear as all parameters in declaration
    order, then every first-moment buffer, then every second-moment buffer.
    """
    params = trainer.model.params
    dtype = trainer.model.dtype.newbyteorder("<")
    meta = {
        "config": trainer.config.to_flat(),
        "dtype": trainer.model.dtype.name,
        "params": [[k, list(p.shape)] for k, p in params.items()],
        "epoch": trainer.epoch,
        "optimizer": {"step": trainer.optimizer.step, "betas": list(trainer.optimizer.betas),
                      "eps": trainer.optimizer.eps},
        "rng": trainer.rng.bit_generator.state,
        "history": _json_safe(trainer.history),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for group in (
        [p.data for p in params.values()],
        [trainer.optimizer.m[k] for k in params],
        [trainer.optimizer.v[k] for k in params],
    ):
        parts.extend(np.ascontiguousarray(a, dtype=dtype).tobytes() for a in group)
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def load_checkpoint(path) -> Trainer:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an EAViT checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    version, n = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    meta = json.loads(body[12:12 + n].decode("utf-8"))
    cfg = RunConfig.from_flat(meta["config"])
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    offset = 12 + n
    shapes = [(k, tuple(s)) for k, s in meta["params"]]
    if dict(shapes) != param_shapes(cfg.model):
        raise CheckpointError(f"{path}: parameter layout does not match stored config")

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * dtype.itemsize
        return arr.astype(dtype.newbyteorder("="))

    params = {k: Tensor(take(s), requires_grad=True, name=k) for k, s in shapes}
    m = {k: take(s) for k, s in shapes}
    v = {k: take(s) for k, s in shapes}
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    opt = meta["optimizer"]
    model = EAViT(cfg.model, dtype=dtype.newbyteorder("="), params=params)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return Trainer(model, cfg, OptimizerState(m, v, opt["step"], tuple(opt["betas"]), opt["eps"]),
                   rng, meta["epoch"], _from_json_history(meta["history"]))


