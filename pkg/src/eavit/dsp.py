"""Audio to mel-spectrogram image preprocessing.

The chain is: 16-bit mono WAV -> fixed-length segments -> Hann-windowed STFT
power -> triangular mel filter bank -> decibels -> 8-bit grayscale image.
"""

from __future__ import annotations

import csv
import logging
import os
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

GTZAN_GENRES = (
    "blues", "classical", "country", "disco", "hiphop",
    "jazz", "metal", "pop", "reggae", "rock",
)
MANIFEST_HEADER = ("path", "track_id", "segment_index", "label")


class AudioError(ValueError):
    """Unreadable or unsupported audio input."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""
    label: int | None = None

    def __post_init__(self):
        if self.samples.size == 0:
            raise AudioError("audio clip has no samples")
        if self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio clip contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Segment:
    samples: np.ndarray
    sample_rate: int
    parent_track_id: str
    segment_index: int


@dataclass
class Spectrogram:
    """Per-frame STFT magnitudes; ``power`` is the squared magnitude."""

    magnitudes: np.ndarray
    bin_hz: float
    hop_seconds: float

    @property
    def power(self) -> np.ndarray:
        return self.magnitudes ** 2

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass
class MelFilterBank:
    weights: np.ndarray
    fmin_hz: float
    fmax_hz: float
    n_mels: int
    center_hz: np.ndarray = field(repr=False, default=None)


@dataclass
class MelImage:
    pixels: np.ndarray
    label: int | None = None
    track_id: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]


@dataclass
class DspConfig:
    segment_seconds: float = 3.0
    n_fft: int = 2048
    hop: int = 512
    window: str = "hann"
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None
    top_db: float = 80.0
    image_size: int = 256
    channels: int = 1


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def load_wav(path, label: int | None = None) -> AudioClip:
    """Read a 16-bit PCM mono WAV file into amplitudes in [-1, 1)."""
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"{path}: no such file")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if channels != 1:
        raise AudioError(f"{path}: channel count {channels} unsupported")
    if width != 2:
        raise AudioError(f"{path}: {8 * width}-bit samples unsupported, need 16-bit PCM")
    if len(raw) < 2 * n:
        raise AudioError(f"{path}: truncated data ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, str(path), label)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write amplitudes in [-1, 1] as 16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def segment(clip: AudioClip, segment_seconds: float = 3.0, track_id: str | None = None) -> list[Segment]:
    """Cut ``clip`` into contiguous non-overlapping segments, dropping the tail."""
    seg_len = int(round(segment_seconds * clip.sample_rate))
    if seg_len <= 0:
        raise AudioError(f"segment length {segment_seconds}s is empty")
    count = clip.samples.size // seg_len
    if count == 0:
        raise AudioError(
            f"clip of {clip.duration:.3f}s is shorter than one {segment_seconds}s segment")
    tid = track_id if track_id is not None else Path(clip.source_path).stem
    return [
        Segment(clip.samples[i * seg_len:(i + 1) * seg_len], clip.sample_rate, tid, i)
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# spectral analysis
# ---------------------------------------------------------------------------


def window_fn(kind: str, n: int) -> np.ndarray:
    """Periodic window of length ``n``."""
    k = np.arange(n)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * k / n)
    if kind == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * k / n)
    if kind in ("rect", "boxcar"):
        return np.ones(n)
    raise ValueError(f"unknown window {kind!r}")


def frame_signal(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Reflect-pad by ``n_fft // 2`` and cut into ``1 + len // hop`` frames."""
    pad = n_fft // 2
    mode = "reflect" if x.size > pad else "constant"
    padded = np.pad(x, pad, mode=mode)
    n_frames = 1 + x.size // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(seg: Segment | np.ndarray, n_fft: int = 2048, hop: int = 512, window: str = "hann",
         sample_rate: int | None = None) -> Spectrogram:
    """Magnitude short-time Fourier transform, ``[n_fft // 2 + 1, n_frames]``."""
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must be in (0, {n_fft}], got {hop}")
    if isinstance(seg, Segment):
        x, sr = seg.samples, seg.sample_rate
    else:
        x, sr = np.asarray(seg, dtype=np.float64), sample_rate or 22050
    frames = frame_signal(x, n_fft, hop) * window_fn(window, n_fft)
    mags = np.abs(np.fft.rfft(frames, axis=1)).T
    return Spectrogram(mags, sr / n_fft, hop / sr)


def power_to_db(power, top_db: float = 80.0, amin: float = 1e-10) -> np.ndarray:
    """Decibels relative to the matrix maximum, floored ``top_db`` below it."""
    if top_db <= 0:
        raise ValueError("top_db must be positive")
    p = power.power if isinstance(power, Spectrogram) else np.asarray(power, dtype=np.float64)
    ref = max(float(p.max()), amin) if p.size else amin
    db = 10.0 * np.log10(np.maximum(p, amin)) - 10.0 * np.log10(ref)
    return np.maximum(db, db.max() - top_db)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 128, n_fft: int = 2048, sample_rate: int = 22050,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterBank:
    """HTK-scale triangular filters with unit peak height.

    Filter ``m`` peaks at the ``m``-th of ``n_mels`` points equally spaced in mel
    between ``fmin`` and ``fmax``; its edges sit on the neighbouring points.
    """
    if fmax is None:
        fmax = sample_rate / 2
    if n_mels < 2:
        raise ValueError("n_mels must be at least 2")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"invalid frequency range [{fmin}, {fmax}] for rate {sample_rate}")
    bins_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    f = bins_hz[None, :]
    rising = (f - lower[:, None]) / (center - lower)[:, None]
    falling = (upper[:, None] - f) / (upper - center)[:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # the discrete bin grid rarely hits a centre exactly
    peak = weights.max(axis=1, keepdims=True)
    weights = np.divide(weights, peak, out=np.zeros_like(weights), where=peak > 0)
    return MelFilterBank(weights, float(fmin), float(fmax), n_mels, center)


def apply_mel(power, bank: MelFilterBank) -> np.ndarray:
    p = power.power if isinstance(power, Spectrogram) else np.asarray(power)
    if p.shape[0] != bank.weights.shape[1]:
        raise ValueError(f"filter bank expects {bank.weights.shape[1]} bins, spectrogram has {p.shape[0]}")
    return bank.weights @ p


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w = x.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    r0, r1, fr = coords(height, h)
    c0, c1, fc = coords(width, w)
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def to_image(mel_db: np.ndarray, height: int = 256, width: int = 256, channels: int = 1,
             label: int | None = None, track_id: str = "") -> MelImage:
    """Resize to ``height x width`` and min-max scale into 8-bit intensities.

    Low mel bands end up in the bottom rows, as in a conventional spectrogram
    plot.  A constant input yields an all-zero image.
    """
    m = np.asarray(mel_db, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("mel matrix contains non-finite values")
    r = resize_bilinear(m[::-1], height, width)
    lo, hi = r.min(), r.max()
    if hi > lo:
        pixels = np.round((r - lo) * (255.0 / (hi - lo))).astype(np.uint8)
    else:
        pixels = np.zeros((height, width), dtype=np.uint8)
    if channels == 3:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    elif channels != 1:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    return MelImage(pixels, label, track_id)


def write_image(path, image: MelImage) -> None:
    """Write binary PGM (one channel) or PPM (three channels)."""
    magic = b"P5" if image.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (image.width, image.height)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported image format")
    ch = 1 if magic == b"P5" else 3
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return pixels.reshape((h, w) if ch == 1 else (h, w, ch)).copy()


def segment_to_image(seg: Segment, cfg: DspConfig, label: int | None = None) -> MelImage:
    spec = stft(seg, cfg.n_fft, cfg.hop, cfg.window)
    bank = mel_filterbank(cfg.n_mels, cfg.n_fft, seg.sample_rate, cfg.fmin, cfg.fmax)
    mel_db = power_to_db(apply_mel(spec, bank), cfg.top_db)
    return to_image(mel_db, cfg.image_size, cfg.image_size, cfg.channels, label, seg.parent_track_id)


def clip_to_images(clip: AudioClip, cfg: DspConfig, track_id: str | None = None) -> list[MelImage]:
    return [segment_to_image(s, cfg, clip.label) for s in segment(clip, cfg.segment_seconds, track_id)]


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class PreprocessReport:
    rows: list[tuple[str, str, int, int]]
    class_names: list[str]
    skipped: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.skipped


def discover(root) -> tuple[list[str], list[tuple[Path, int]]]:
    """Genre subdirectories of ``root`` (sorted) and their WAV files."""
    root = Path(root)
    if not root.is_dir():
        raise AudioError(f"{root}: not a directory")
    genres = sorted(p.name for p in root.iterdir() if p.is_dir())
    files = [
        (wav, label)
        for label, genre in enumerate(genres)
        for wav in sorted((root / genre).glob("*.wav"))
    ]
    if not files:
        raise AudioError(f"{root}: no genre directories with .wav files")
    return genres, files


def preprocess_dataset(root, out_dir, cfg: DspConfig | None = None, workers: int = 1) -> PreprocessReport:
    """Turn ``root/<genre>/*.wav`` into images plus ``manifest.csv``.

    Unreadable files are skipped and listed in the report.  Output ordering
    does not depend on ``workers``.
    """
    cfg = cfg or DspConfig()
    genres, files = discover(root)
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if cfg.channels == 1 else "ppm"

    def work(item):
        wav, label = item
        track_id = f"{genres[label]}/{wav.stem}"
        try:
            clip = load_wav(wav, label)
            images = clip_to_images(clip, cfg, track_id)
        except AudioError as exc:
            return track_id, None, str(exc)
        rows = []
        for i, img in enumerate(images):
            rel = f"images/{genres[label]}/{wav.stem}.{i:02d}.{ext}"
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            write_image(out_dir / rel, img)
            rows.append((rel, track_id, i, label))
        return track_id, rows, None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, files))
    else:
        results = [work(f) for f in files]

    rows, skipped = [], []
    for (wav, _), (track_id, r, err) in zip(files, results):
        if err is not None:
            logger.warning("skipping %s: %s", wav, err)
            skipped.append((str(wav), err))
        else:
            rows.extend(r)
    write_manifest(out_dir / "manifest.csv", rows)
    (out_dir / "classes.txt").write_text("\n".join(genres) + "\n")
    return PreprocessReport(rows, genres, skipped)


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def read_manifest(path) -> list[tuple[str, str, int, int]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_HEADER:
            raise AudioError(f"{path}: bad manifest header {header}")
        rows = [(p, t, int(i), int(lab)) for p, t, i, lab in reader]
    if not rows:
        raise AudioError(f"{path}: manifest is empty")
    return rows


def read_class_names(manifest_path) -> list[str]:
    path = Path(manifest_path).with_name("classes.txt")
    if path.is_file():
        return [line for line in path.read_text().splitlines() if line]
    return list(GTZAN_GENRES)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EAVIT_THREADS", "1")))
    except ValueError:
        return 1
