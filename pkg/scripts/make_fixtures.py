"""Regenerate the CSV fixtures shipped in src/timeexpert/fixtures/.

sinusoid_p24.csv     period-24 unit sinusoid + N(0, 0.1^2) noise, T=2000, seed 0
etth1_excerpt.csv    2,880 hourly rows in the ETTh1 column layout. The values are
                     a seeded synthetic stand-in (daily and weekly load cycles,
                     slow drift, AR(1) noise, oil temperature lagging the loads),
                     not the published transformer recordings.
"""

from __future__ import annotations

import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from timeexpert.data import Series, hourly_stamps, save_csv, synth_series  # noqa: E402
from timeexpert.numerics import Rng  # noqa: E402

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "timeexpert", "fixtures")
ETT_COLUMNS = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]


def ar1(rng: Rng, n: int, phi: float, sigma: float) -> np.ndarray:
    eps = rng.normal((n,), 0.0, sigma)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + eps[i]
        out[i] = acc
    return out


def etth1_like(length: int = 2880, seed: int = 2016) -> Series:
    rng = Rng(seed)
    t = np.arange(length, dtype=np.float64)
    day = 2 * math.pi * t / 24
    week = 2 * math.pi * t / 168
    drift = np.cumsum(rng.normal((length,), 0.0, 0.02))
    base = np.sin(day - 1.2) + 0.35 * np.sin(2 * day + 0.4) + 0.4 * np.sin(week)
    specs = [  # (scale, offset, drift weight, noise)
        (3.0, 6.0, 1.0, 0.6), (1.0, 2.0, 0.4, 0.3), (2.6, 4.2, 0.9, 0.55),
        (0.9, 0.9, 0.3, 0.25), (0.8, 3.1, 0.2, 0.2), (0.3, 1.2, 0.1, 0.1),
    ]
    cols = []
    for scale, offset, dw, noise in specs:
        cols.append(offset + scale * base + dw * drift + ar1(rng, length, 0.8, noise))
    load = np.mean(cols[:4], axis=0)
    lagged = np.convolve(load, np.ones(12) / 12, mode="full")[:length]
    ot = 12.0 + 1.5 * lagged + 2.0 * np.sin(day - 2.0) + 3.0 * drift + ar1(rng, length, 0.95, 0.25)
    cols.append(ot)
    values = np.round(np.stack(cols, axis=1), 3)
    stamps = hourly_stamps(length)
    return Series("ETTh1-excerpt", values, ETT_COLUMNS, stamps)


def main() -> None:
    os.makedirs(OUT, exist_ok=True)
    save_csv(synth_series([24], [1.0], noise=0.1, length=2000, seed=0, name="sinusoid_p24"),
             os.path.join(OUT, "sinusoid_p24.csv"))
    save_csv(etth1_like(), os.path.join(OUT, "etth1_excerpt.csv"))


if __name__ == "__main__":
    main()
