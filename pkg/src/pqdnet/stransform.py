"""Discrete Stockwell (S-) transform.

Row ``n`` of the result is the inverse FFT of the spectrum shifted by ``n``
bins and multiplied by the sampled Gaussian ``exp(-2 pi^2 m^2 / n^2)``, so
that the window narrows in time as frequency rises.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal


def _is_pow2(n: int) -> bool:
    return n >= 2 and n & (n - 1) == 0


def dft(x) -> np.ndarray:
    """Forward DFT normalized by 1/N: ``X[m] = (1/N) sum_k x[k] exp(-2j pi m k / N)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or not _is_pow2(x.shape[0]):
        raise ValueError(f"dft needs a 1-D power-of-two length >= 2, got shape {x.shape}")
    return np.fft.fft(x) / x.shape[0]


def centered_bins(n: int) -> np.ndarray:
    """FFT bin indices mapped onto [-n/2, n/2)."""
    m = np.arange(n)
    return np.where(m < n // 2, m, m - n)


def gaussian_windows(n_fft: int) -> np.ndarray:
    """Frequency-domain Gaussians for rows 1..n_fft/2, shape (n_fft/2, n_fft)."""
    m = centered_bins(n_fft).astype(np.float64)
    rows = np.arange(1, n_fft // 2 + 1, dtype=np.float64)[:, None]
    return np.exp(-2.0 * np.pi ** 2 * m[None, :] ** 2 / rows ** 2)


@dataclass
class STMatrix:
    """Complex ST coefficients: rows are frequency bins 0..N/2, columns are samples.

    ``sample_rate`` is the rate of the transformed signal; ``n_original`` is the
    waveform length before any resampling.
    """

    entries: np.ndarray
    sample_rate: float
    n_original: int

    @property
    def n_samples(self) -> int:
        return self.entries.shape[1]

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(self.entries.shape[0]) * self.sample_rate / self.n_samples


def prev_pow2(n: int) -> int:
    return 1 << (int(n).bit_length() - 1)


def resample_pow2(x, sample_rate: float):
    """FFT-resample ``x`` to the largest power-of-two length not above len(x).

    Returns ``(samples, new_rate)``; the record duration is unchanged.
    """
    n = len(x)
    m = prev_pow2(n)
    if m == n:
        return np.asarray(x, dtype=np.float64), float(sample_rate)
    return signal.resample(np.asarray(x, dtype=np.float64), m), sample_rate * m / n


def forward_st(x, sample_rate: float = 1.0) -> STMatrix:
    """S-transform of a real signal.

    Arrays must have power-of-two length. Waveforms of other lengths are
    first resampled to the previous power of two (640 samples at 3200 Hz
    become 512 samples at 2560 Hz, which keeps 50 Hz on bin 10).
    """
    tb = getattr(x, "timebase", None)
    if tb is not None:
        n_original = tb.n_samples
        x, sample_rate = resample_pow2(x.samples, tb.sample_rate)
    else:
        x = np.asarray(x, dtype=np.float64)
        n_original = x.shape[0] if x.ndim == 1 else -1
    if x.ndim != 1:
        raise ValueError("forward_st expects a 1-D signal")
    n = x.shape[0]
    spec = dft(x)
    half = n // 2
    # shifted[r, m] = X[(m + n_r) mod N] for n_r = r + 1
    idx = (np.arange(n)[None, :] + np.arange(1, half + 1)[:, None]) % n
    shifted = spec[idx] * gaussian_windows(n)
    st = np.empty((half + 1, n), dtype=np.complex128)
    st[0, :] = x.mean()
    st[1:] = np.fft.ifft(shifted, axis=1) * n
    return STMatrix(entries=st, sample_rate=float(sample_rate), n_original=n_original)


def amplitude(s) -> np.ndarray:
    entries = getattr(s, "entries", s)
    return np.abs(entries)


def direct_st(x) -> np.ndarray:
    """O(N^3) reference: explicit DFT sums, no FFT. For small N only."""
    x = np.asarray(x, dtype=np.float64)
    n_fft = x.shape[0]
    if not _is_pow2(n_fft):
        raise ValueError("direct_st needs a power-of-two length")
    k = np.arange(n_fft)
    X = np.array([np.sum(x * np.exp(-2j * np.pi * m * k / n_fft)) / n_fft for m in k])
    out = np.empty((n_fft // 2 + 1, n_fft), dtype=np.complex128)
    out[0, :] = x.mean()
    for n in range(1, n_fft // 2 + 1):
        for j in range(n_fft):
            total = 0j
            for m in range(-n_fft // 2, n_fft // 2):
                g = np.exp(-2 * np.pi ** 2 * m * m / (n * n))
                total += X[(m + n) % n_fft] * g * np.exp(2j * np.pi * m * j / n_fft)
            out[n, j] = total
    return out


def dump_amplitude(s: STMatrix, path) -> None:
    """Row-major float64 dump of |S| with a JSON header next to it."""
    path = Path(path)
    a = amplitude(s).astype("<f8")
    a.tofile(path)
    header = {"rows": a.shape[0], "cols": a.shape[1], "fs": s.sample_rate}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header))


def load_amplitude(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.fromfile(path, dtype="<f8").reshape(header["rows"], header["cols"])
