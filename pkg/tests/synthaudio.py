"""Synthetic GTZAN-layout audio for exercising the pipeline without the dataset.

Each pseudo-genre has its own pitch register, harmonic profile, tempo and
noise colour; individual tracks jitter all of these so that segments of
different tracks in one genre are similar but not identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from eavit.dsp import GTZAN_GENRES, write_wav

SR = 22050


def genre_track(genre: int, track: int, seconds: float = 30.0, sr: int = SR, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, genre, track])
    n = int(round(seconds * sr))
    t = np.arange(n) / sr
    f0 = 80.0 * 2 ** (genre * 0.42) * (1 + 0.04 * rng.uniform(-1, 1))
    n_harm = 1 + genre % 4
    bpm = 70 + 12 * genre + rng.uniform(-4, 4)
    vib = 0.004 * (genre % 3) * np.sin(2 * np.pi * (3 + genre % 5) * t)
    phase = 2 * np.pi * f0 * np.cumsum(1 + vib) / sr

    tone = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** (0.5 + 0.3 * (genre % 2))
               for k in range(1, n_harm + 1))
    # melody: the pitch steps between two notes every bar
    bar = (t * bpm / 60 / 4).astype(int) % 2
    tone = tone * (0.6 + 0.4 * bar) + 0.3 * bar * np.sin(1.5 * phase)

    beat = (t * bpm / 60) % 1.0
    env = np.exp(-beat * (4 + genre))
    noise = rng.standard_normal(n)
    if genre % 3 == 1:
        noise = np.convolve(noise, np.ones(8) / 8, mode="same")
    elif genre % 3 == 2:
        noise = np.diff(noise, prepend=0.0)
    x = 0.5 * tone * (0.5 + 0.5 * env) + (0.1 + 0.04 * (genre % 4)) * noise * env
    x += 0.02 * rng.standard_normal(n)
    return 0.9 * x / np.abs(x).max()


def make_tree(root, genres: int = 10, tracks_per_genre: int = 2, seconds: float = 30.0,
              sr: int = SR, seed: int = 0) -> Path:
    """Write ``root/<genre>/<genre>.000NN.wav`` for the first ``genres`` GTZAN names."""
    root = Path(root)
    for g in range(genres):
        d = root / GTZAN_GENRES[g]
        d.mkdir(parents=True, exist_ok=True)
        for k in range(tracks_per_genre):
            write_wav(d / f"{GTZAN_GENRES[g]}.{k:05d}.wav", genre_track(g, k, seconds, sr, seed), sr)
    return root
