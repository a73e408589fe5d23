"""WDM/PAM transmitter with sinc pulses and the coherent receiver chain.

Pulses are unit-energy sincs, s(t) = sinc(t/T)/sqrt(T), realised as ideal
brick-wall spectra on a periodic FFT grid.  With this normalisation a
noiseless linear link returns y_m = x_m and ASE of PSD N_ASE gives per-symbol
noise variance N_ASE.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import ModeField, RandomStream, cscg, dbm_to_watts
from .errors import AliasingError
from .fiber import CouplingSpec, SsfmConfig, backpropagate, linear_phase

COMPENSATIONS = ("LDC", "DBP_1pol", "DBP_2pol", "DBP_multimode")
_DBP_MODES = {"DBP_1pol": "row", "DBP_2pol": "mode", "DBP_multimode": "full"}


@dataclass(frozen=True)
class WdmSpec:
    """Channel grid.  Frequencies in THz, times in ps.

    ``delays_ps`` has shape (n_channels, subcarriers) in the order of
    ``channels``; the COI (c = 0) single-carrier delay is always zero.
    """

    channels: tuple = (-2, -1, 0, 1, 2)
    spacing_thz: float = 0.05
    bandwidth_thz: float = 0.05
    subcarriers: int = 1
    delays_ps: Optional[np.ndarray] = None

    def __post_init__(self):
        chans = tuple(int(c) for c in self.channels)
        if 0 not in chans:
            raise ValueError("channel grid must contain the COI (c = 0)")
        if chans != tuple(range(min(chans), max(chans) + 1)):
            raise ValueError("channels must be a contiguous index range")
        object.__setattr__(self, "channels", chans)
        if self.subcarriers not in (1, 2, 4, 8):
            raise ValueError("subcarriers must be 1, 2, 4 or 8")
        if self.delays_ps is None:
            object.__setattr__(self, "delays_ps", np.zeros((len(chans), self.subcarriers)))
        else:
            d = np.asarray(self.delays_ps, dtype=float).reshape(len(chans), self.subcarriers)
            if np.any(np.abs(d) > self.symbol_period_ps / 2 + 1e-12):
                raise ValueError("delays must lie in [-T/2, T/2]")
            if self.subcarriers == 1 and d[self.coi_index, 0] != 0:
                raise ValueError("COI delay must be zero")
            object.__setattr__(self, "delays_ps", d)

    @property
    def T(self) -> float:
        """Single-carrier symbol period (ps)."""
        return 1.0 / self.bandwidth_thz

    @property
    def symbol_period_ps(self) -> float:
        return self.T * self.subcarriers

    @property
    def coi_index(self) -> int:
        return self.channels.index(0)

    @property
    def interferers(self) -> tuple:
        return tuple(c for c in self.channels if c != 0)

    def carrier_thz(self, c: int, q: int = 0) -> float:
        sub_bw = self.bandwidth_thz / self.subcarriers
        return c * self.spacing_thz + (q - (self.subcarriers - 1) / 2) * sub_bw

    def delay(self, c: int, q: int = 0) -> float:
        return float(self.delays_ps[self.channels.index(c), q])

    def with_delays(self, delays) -> "WdmSpec":
        return replace(self, delays_ps=np.asarray(delays, dtype=float))

    def min_oversampling(self) -> float:
        span = 2 * max(abs(c) for c in self.channels) * self.spacing_thz + self.bandwidth_thz
        return span / self.bandwidth_thz


def default_oversampling(wdm: WdmSpec, guard: float = 0.25) -> int:
    """Samples per single-carrier symbol: WDM span plus guard, next power of two."""
    need = (1 + guard) * len(wdm.channels) * wdm.spacing_thz / wdm.bandwidth_thz
    return int(2 ** np.ceil(np.log2(max(need, 1.0))))


def draw_delays(wdm: WdmSpec, stream: RandomStream) -> WdmSpec:
    """Uniform delays on [-T/2, T/2] for every channel/subcarrier (COI fixed at 0 for single carrier)."""
    rng = stream.rng()
    Ts = wdm.symbol_period_ps
    d = rng.uniform(-Ts / 2, Ts / 2, size=(len(wdm.channels), wdm.subcarriers))
    if wdm.subcarriers == 1:
        d[wdm.coi_index, 0] = 0.0
    return wdm.with_delays(d)


@dataclass(frozen=True)
class SymbolFrame:
    """Symbols of one transmitted sequence.

    ``x`` has shape (subcarriers, 2S, M) for the COI; ``b`` has shape
    (n_interferers, subcarriers, 2S, M) ordered as ``WdmSpec.interferers``.
    """

    x: np.ndarray
    b: Optional[np.ndarray] = None
    energies: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return self.x.shape[-2] // 2

    @property
    def n_symbols(self) -> int:
        return self.x.shape[-1]


def random_frame(wdm: WdmSpec, S: int, n_symbols: int, power_dbm: float, stream: RandomStream,
                 interferers: bool = True) -> SymbolFrame:
    """i.i.d. CSCG symbols with launch power ``power_dbm`` per WDM channel."""
    P = float(dbm_to_watts(power_dbm))
    E = P * wdm.T  # per-subcarrier power P/Q times period Q*T
    rng = stream.rng()
    Q = wdm.subcarriers
    x = cscg(rng, (Q, 2 * S, n_symbols), E)
    n_int = len(wdm.interferers)
    b = cscg(rng, (n_int, Q, 2 * S, n_symbols), E) if interferers and n_int else None
    energies = {"E": E, "E_c": {c: E for c in wdm.interferers}, "Q_c": {c: 2 * E**2 for c in wdm.interferers}}
    return SymbolFrame(x=x, b=b, energies=energies)


def _band_bins(wdm: WdmSpec, c: int, q: int, M: int, n_t: int) -> np.ndarray:
    """FFT bin indices of one (sub)carrier band, ordered by increasing frequency."""
    period = M * wdm.symbol_period_ps
    centre = wdm.carrier_thz(c, q) * period
    lo = int(round(centre)) - M // 2
    return np.arange(lo, lo + M) % n_t


def _period_ps(wdm, M):
    return M * wdm.symbol_period_ps


def modulate(frames: SymbolFrame, wdm: WdmSpec, oversampling: int) -> ModeField:
    """Transmitted field at z = 0: frequency-shifted, delayed sinc pulse trains."""
    if oversampling <= wdm.min_oversampling():
        raise AliasingError(f"oversampling {oversampling} cannot hold channels up to c={max(map(abs, wdm.channels))}")
    Q = wdm.subcarriers
    M = frames.n_symbols
    n_t = M * Q * oversampling
    if n_t & (n_t - 1):
        raise ValueError(f"grid length {n_t} is not a power of two")
    period = _period_ps(wdm, M)
    Ts = wdm.symbol_period_ps
    rows = frames.x.shape[-2]
    U = np.zeros((rows, n_t), dtype=complex)
    offsets = (np.arange(M) - M // 2) / period

    def place(symbols, c, q):
        bins = _band_bins(wdm, c, q, M, n_t)
        Xs = np.fft.fftshift(np.fft.fft(symbols, axis=-1), axes=-1)
        phase = np.exp(-2j * np.pi * offsets * wdm.delay(c, q))
        U[:, bins] += np.sqrt(Ts) * Xs * phase

    for q in range(Q):
        place(frames.x[q], 0, q)
        if frames.b is not None:
            for ci, c in enumerate(wdm.interferers):
                place(frames.b[ci, q], c, q)
    u = np.fft.ifft(U, axis=1) * n_t / period
    return ModeField(u, sample_rate_thz=n_t / period)


def _spectrum(field: ModeField, period):
    return np.fft.fft(field.samples, axis=1) * period / field.n_samples


def bandpass(field: ModeField, wdm: WdmSpec, c: int = 0) -> ModeField:
    """Ideal brick-wall filter keeping channel ``c`` (all its subcarriers)."""
    f = np.fft.fftfreq(field.n_samples, d=field.dt_ps)
    centre = c * wdm.spacing_thz
    df = 1.0 / (field.n_samples * field.dt_ps)
    keep = (f >= centre - wdm.bandwidth_thz / 2 - df / 2) & (f < centre + wdm.bandwidth_thz / 2 - df / 2)
    U = np.fft.fft(field.samples, axis=1)
    U[:, ~keep] = 0
    return field.with_samples(np.fft.ifft(U, axis=1))


def sample_symbols(field: ModeField, wdm: WdmSpec, M: int, c: int = 0) -> np.ndarray:
    """Matched filter and sampler; returns (subcarriers, 2S, M)."""
    Q = wdm.subcarriers
    period = _period_ps(wdm, M)
    Ts = wdm.symbol_period_ps
    U = _spectrum(field, period)
    offsets = (np.arange(M) - M // 2) / period
    out = np.empty((Q, field.samples.shape[0], M), dtype=complex)
    for q in range(Q):
        bins = _band_bins(wdm, c, q, M, field.n_samples)
        Uq = U[:, bins] * np.exp(2j * np.pi * offsets * wdm.delay(c, q))
        out[q] = np.sqrt(Ts) / period * M * np.fft.ifft(np.fft.ifftshift(Uq, axes=-1), axis=-1)
    return out


def receive(field: ModeField, wdm: WdmSpec, spec: CouplingSpec, comp: str, n_symbols: int,
            cfg: Optional[SsfmConfig] = None) -> np.ndarray:
    """Band-pass, LDC or DBP, matched filter and sampler for the COI.

    Returns received symbols of shape (subcarriers, 2S, n_symbols).
    """
    if comp not in COMPENSATIONS:
        raise ValueError(f"unknown compensation {comp!r}; expected one of {COMPENSATIONS}")
    filt = bandpass(field, wdm, 0)
    if comp == "LDC":
        U = np.fft.fft(filt.samples, axis=1) * linear_phase(spec, filt.angular_frequencies(), -spec.length_km)
        comp_field = filt.with_samples(np.fft.ifft(U, axis=1), z_km=0.0)
    else:
        cfg = cfg or SsfmConfig(noise_on=False)
        comp_field = backpropagate(filt, spec, cfg, _DBP_MODES[comp])
    return sample_symbols(comp_field, wdm, n_symbols, 0)
