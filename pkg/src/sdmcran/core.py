"""Shared numeric substrate: sampled fields, unitary spectra, seeded streams.

Internal units: time in ps, frequency in THz, distance in km, power in W.
Field samples are in sqrt(W); symbol energies in W*ps (pJ).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, SizeError

HZ_PER_THZ = 1e12


def channel_order(S: int) -> list[tuple[int, str]]:
    """Row layout of a 2S-channel stack: (mode 1 x, mode 1 y, mode 2 x, ...)."""
    return [(s, p) for s in range(1, S + 1) for p in ("x", "y")]


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModeField:
    """Complex baseband field of 2S channels sampled on a periodic time grid.

    ``samples`` has shape (2S, N_t); row ``2s-2`` holds mode ``s`` x-pol and row
    ``2s-1`` its y-pol (zero based).
    """

    samples: np.ndarray
    sample_rate_thz: float
    z_km: float = 0.0
    domain: str = "time"
    order: tuple = field(default=())

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=complex)
        if samples.ndim != 2:
            raise SizeError("ModeField samples must be a (channels, N_t) matrix")
        if samples.shape[0] % 2:
            raise SizeError("ModeField needs an even number of rows (2S)")
        object.__setattr__(self, "samples", samples)
        if not self.order:
            object.__setattr__(self, "order", tuple(channel_order(samples.shape[0] // 2)))
        if sorted(self.order) != sorted(channel_order(samples.shape[0] // 2)):
            raise SizeError("channel order must be a bijection onto modes x {x, y}")

    @property
    def S(self) -> int:
        return self.samples.shape[0] // 2

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def dt_ps(self) -> float:
        return 1.0 / self.sample_rate_thz

    def angular_frequencies(self) -> np.ndarray:
        """Angular frequency grid (rad/ps) in FFT bin order."""
        return 2 * np.pi * np.fft.fftfreq(self.n_samples, d=self.dt_ps)

    def with_samples(self, samples, **changes) -> "ModeField":
        return replace(self, samples=samples, **changes)

    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2))


def forward_spectrum(f: ModeField) -> ModeField:
    """Row-wise unitary DFT of a time-domain field."""
    if not _is_pow2(f.n_samples):
        raise SizeError(f"FFT length {f.n_samples} is not a power of two")
    return f.with_samples(np.fft.fft(f.samples, axis=1, norm="ortho"), domain="frequency")


def inverse_spectrum(f: ModeField) -> ModeField:
    if not _is_pow2(f.n_samples):
        raise SizeError(f"FFT length {f.n_samples} is not a power of two")
    return f.with_samples(np.fft.ifft(f.samples, axis=1, norm="ortho"), domain="time")


def _path_key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.blake2b(str(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RandomStream:
    """Counter-based random stream addressed by (seed, hierarchical path).

    Every call to :meth:`rng` returns a generator positioned at the start of
    the stream, so identical (seed, path) pairs reproduce identical draws.
    Use :meth:`child` to derive independent sub-streams.
    """

    seed: int
    path: tuple = ()

    def child(self, *parts) -> "RandomStream":
        return RandomStream(self.seed, self.path + tuple(parts))

    def rng(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=tuple(_path_key(p) for p in self.path))
        return np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> str:
        return "/".join(str(p) for p in self.path)


def cscg(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circularly-symmetric complex Gaussian draws from an existing generator."""
    if variance < 0:
        raise DomainError("variance must be non-negative")
    scale = np.sqrt(variance / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def cscg_samples(stream: RandomStream, n: int, variance: float) -> np.ndarray:
    """``n`` i.i.d. CSCG samples with E|x|^2 = variance, reproducible per stream."""
    if variance < 0:
        raise DomainError("variance must be non-negative")
    return cscg(stream.rng(), n, variance)


def dbm_to_watts(p_dbm):
    return 10.0 ** (np.asarray(p_dbm, dtype=float) / 10.0) * 1e-3


def watts_to_dbm(p_w):
    p_w = np.asarray(p_w, dtype=float)
    if np.any(p_w <= 0):
        raise DomainError("power must be positive to convert to dBm")
    return 10.0 * np.log10(p_w * 1e3)
