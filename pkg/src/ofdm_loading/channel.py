"""Frequency-selective Rayleigh channel with an exponential power delay profile.

Taps are independent circularly-symmetric complex Gaussians whose variances
decay as ``exp(-n * decay)`` and sum to one, so the average energy per
subcarrier is unity.  Every realization is addressed by ``(seed, trial)``:
the generator for trial ``t`` is a Philox stream keyed by
``SeedSequence(seed, spawn_key=(t,))``, so any trial can be regenerated on
its own, in any process, without drawing the trials before it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "ChannelParams",
    "ChannelRealization",
    "normalization_constant",
    "trial_generator",
    "generate_taps",
    "frequency_response",
    "cnr",
    "realize",
    "write_channel_dump",
    "read_channel_dump",
]


@dataclass(frozen=True)
class ChannelParams:
    """Static description of the channel ensemble.

    Parameters
    ----------
    n_subcarriers : int
        Number of OFDM subcarriers.
    n_taps : int
        Length of the channel impulse response.
    decay : float
        Exponential decay factor of the power delay profile.
    noise_variance : float
        AWGN variance in watts.
    seed : int
        Root seed of the trial streams.
    """

    n_subcarriers: int = 128
    n_taps: int = 5
    decay: float = 0.2
    noise_variance: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.n_subcarriers < 1:
            raise ValueError("n_subcarriers must be positive")
        if not 1 <= self.n_taps <= self.n_subcarriers:
            raise ValueError("need 1 <= n_taps <= n_subcarriers")
        if self.decay < 0:
            raise ValueError("decay must be nonnegative")
        if not (self.noise_variance > 0 and np.isfinite(self.noise_variance)):
            raise ValueError("noise_variance must be positive and finite")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class ChannelRealization:
    """One channel draw: taps, per-subcarrier gains and CNRs (per watt)."""

    taps: np.ndarray
    gains: np.ndarray
    cnr: np.ndarray

    @property
    def n_subcarriers(self) -> int:
        return len(self.gains)


def normalization_constant(n_taps: int, decay: float) -> float:
    """Tap-variance scale making the delay profile sum to one.

    >>> normalization_constant(5, 0.0)
    0.2
    """
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    if decay == 0:
        return 1.0 / n_taps
    # -expm1 keeps precision for small decay
    return float(-np.expm1(-decay) / -np.expm1(-decay * n_taps))


def delay_profile(n_taps: int, decay: float) -> np.ndarray:
    """Expected tap powers ``E|h(n)|^2``, n = 0 .. n_taps-1."""
    return normalization_constant(n_taps, decay) * np.exp(-decay * np.arange(n_taps))


def trial_generator(seed: int, trial_index: int) -> np.random.Generator:
    """Independent generator for one Monte-Carlo trial."""
    if trial_index < 0:
        raise ValueError("trial_index must be nonnegative")
    ss = np.random.SeedSequence(seed, spawn_key=(trial_index,))
    return np.random.Generator(np.random.Philox(ss))


def generate_taps(params: ChannelParams, trial_index: int) -> np.ndarray:
    rng = trial_generator(params.seed, trial_index)
    std = np.sqrt(delay_profile(params.n_taps, params.decay) / 2.0)
    re = rng.standard_normal(params.n_taps)
    im = rng.standard_normal(params.n_taps)
    return std * (re + 1j * im)


def frequency_response(taps, n_subcarriers: int) -> np.ndarray:
    """Length-``n_subcarriers`` DFT of the zero-padded taps.

    Evaluated as the direct sum ``H_i = sum_n h(n) exp(-2j pi n i / N)``;
    with a handful of taps this is cheaper than padding for an FFT and is
    literally the defining formula.
    """
    taps = np.asarray(taps, dtype=complex)
    if len(taps) > n_subcarriers:
        raise ValueError("more taps than subcarriers")
    n = np.arange(len(taps))
    i = np.arange(n_subcarriers)
    # reduce n*i mod N before scaling so the phase argument stays small
    phase = -2j * np.pi * (np.outer(i, n) % n_subcarriers) / n_subcarriers
    return np.exp(phase) @ taps


def cnr(gains, noise_variance: float) -> np.ndarray:
    """Channel-to-noise ratio ``|H_i|^2 / sigma_n^2``."""
    if not noise_variance > 0:
        raise ValueError("noise_variance must be positive")
    g = np.asarray(gains)
    return (g.real**2 + g.imag**2) / noise_variance


def realize(params: ChannelParams, trial_index: int) -> ChannelRealization:
    taps = generate_taps(params, trial_index)
    gains = frequency_response(taps, params.n_subcarriers)
    return ChannelRealization(taps=taps, gains=gains, cnr=cnr(gains, params.noise_variance))


DUMP_FIELDS = ("trial", "i", "re_H", "im_H", "C")


def write_channel_dump(path, realizations: Iterable[tuple[int, ChannelRealization]]) -> None:
    """Write ``trial, i, re(H_i), im(H_i), C_i`` rows, one per subcarrier."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DUMP_FIELDS)
        for trial, ch in realizations:
            for i, (h, c) in enumerate(zip(ch.gains, ch.cnr)):
                w.writerow([trial, i, repr(float(h.real)), repr(float(h.imag)), repr(float(c))])


def read_channel_dump(path) -> dict[int, ChannelRealization]:
    """Inverse of :func:`write_channel_dump`.

    Taps are not stored in the dump; the returned realizations carry an
    empty ``taps`` array.
    """
    rows: dict[int, list[tuple[int, complex, float]]] = {}
    with open(Path(path), newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["trial"]), []).append(
                (int(rec["i"]), complex(float(rec["re_H"]), float(rec["im_H"])), float(rec["C"]))
            )
    out = {}
    for trial, items in rows.items():
        items.sort()
        if [i for i, _, _ in items] != list(range(len(items))):
            raise ValueError(f"trial {trial}: subcarrier indices are not 0..N-1")
        out[trial] = ChannelRealization(
            taps=np.zeros(0, dtype=complex),
            gains=np.array([h for _, h, _ in items]),
            cnr=np.array([c for _, _, c in items]),
        )
    return out
