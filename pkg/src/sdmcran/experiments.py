"""End-to-end experiment: simulate the SDM link, fit the receiver models, sweep rates.

Everything random is addressed by (root seed, role, power, subcarriers,
sequence index), so a cell can be recomputed in isolation and cached runs
resume to bit-identical output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import RandomStream, dbm_to_watts
from .cran import ALGO_KINDS
from .errors import ConfigError, SeriesError
from .estimation import FitResult, TrainingSet, estimate_mean_phase, estimate_sigma_z, fit_all
from .fiber import CouplingSpec, SsfmConfig, propagate
from .kernels import covariance_approx
from .particle import ReceiverAlgo, achievable_rate
from .wdm import COMPENSATIONS, WdmSpec, default_oversampling, draw_delays, modulate, random_frame, receive

RATE_COLUMNS = ("power_dbm", "algo", "subcarriers", "rate_bits", "h_cond", "h_out", "mc_stderr",
                "n_sequences", "seed")
FIGURE_COLUMNS = ("series", "power_dbm", "rate")
CAPACITY_SERIES = "log2(1+SNR)"


@dataclass(frozen=True)
class ExperimentConfig:
    """Experiment description.  Keys carry their units; defaults are the 1000-km S = 2 system."""

    modes: int = 2
    length_km: float = 1000.0
    beta2_ps2_per_km: float = -21.7
    gamma_per_w_per_km: float = 1.27
    kappa: float = 1.0
    n_ase_w_per_hz: float = 5.902e-18
    channels: tuple = (-2, -1, 0, 1, 2)
    spacing_ghz: float = 50.0
    bandwidth_ghz: float = 50.0
    subcarriers: tuple = (1,)
    powers_dbm: tuple = (-12.0, -11.0, -10.0, -9.0, -8.0, -7.0, -6.0, -5.0, -4.0)
    algos: tuple = ALGO_KINDS
    train_sequences: int = 24
    train_symbols: int = 4092
    test_sequences: int = 120
    test_symbols: int = 4092
    train_sequences_multicarrier: int = 20
    test_sequences_multicarrier: int = 100
    symbols_per_subcarrier: int = 1023
    step_km: float = 0.1
    memory: int = 2
    n_particles: int = 512
    fit_particles: int = 256
    compensation: str = "DBP_multimode"
    oversampling: Optional[int] = None
    noise_on: bool = True
    seed: int = 0
    desk_scale: bool = False

    # ------------------------------------------------------------------ io
    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"unknown configuration key {k!r}", field=k)
        kw = dict(d)
        for k in ("channels", "subcarriers", "powers_dbm", "algos"):
            if k in kw:
                if not isinstance(kw[k], (list, tuple)):
                    raise ConfigError(f"{k} must be a list", field=k)
                kw[k] = tuple(kw[k])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg

    # ----------------------------------------------------------- validation
    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}", field=name)

        need(isinstance(self.modes, int) and self.modes >= 1, "modes", "must be a positive integer")
        need(self.length_km > 0, "length_km", "must be positive")
        need(self.step_km > 0, "step_km", "must be positive")
        n = self.length_km / self.step_km
        need(abs(n - round(n)) < 1e-9 * max(n, 1), "step_km", "must divide length_km")
        need(self.beta2_ps2_per_km != 0, "beta2_ps2_per_km", "must be nonzero")
        need(self.gamma_per_w_per_km >= 0, "gamma_per_w_per_km", "must be non-negative")
        need(self.kappa > 0, "kappa", "must be positive")
        need(self.n_ase_w_per_hz > 0, "n_ase_w_per_hz", "must be positive")
        ch = tuple(self.channels)
        need(len(ch) > 0 and all(isinstance(c, int) for c in ch), "channels", "must be a list of integers")
        need(0 in ch and ch == tuple(range(min(ch), max(ch) + 1)), "channels",
             "must be a contiguous range containing 0")
        need(self.bandwidth_ghz > 0, "bandwidth_ghz", "must be positive")
        need(self.spacing_ghz >= self.bandwidth_ghz, "spacing_ghz", "must be at least the bandwidth")
        need(len(self.subcarriers) > 0 and set(self.subcarriers) <= {1, 4}, "subcarriers",
             "entries must be 1 or 4")
        need(len(self.powers_dbm) > 0 and all(math.isfinite(p) for p in self.powers_dbm), "powers_dbm",
             "must be a non-empty list of finite numbers")
        need(len(set(self.powers_dbm)) == len(self.powers_dbm), "powers_dbm", "must not repeat")
        need(len(self.algos) > 0 and set(self.algos) <= set(ALGO_KINDS), "algos",
             f"entries must be among {list(ALGO_KINDS)}")
        for name in ("train_sequences", "test_sequences", "train_sequences_multicarrier",
                     "test_sequences_multicarrier"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 2, name, "must be an integer >= 2")
        for name in ("train_symbols", "test_symbols", "symbols_per_subcarrier"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 8, name, "must be an integer >= 8")
        need(isinstance(self.memory, int) and 0 <= self.memory <= 16, "memory", "must be an integer in 0..16")
        need(self.n_particles >= 1, "n_particles", "must be positive")
        need(self.fit_particles >= 1, "fit_particles", "must be positive")
        need(self.compensation in COMPENSATIONS, "compensation", f"must be one of {list(COMPENSATIONS)}")
        if self.oversampling is not None:
            os_ = self.oversampling
            need(isinstance(os_, int) and os_ > 0 and not os_ & (os_ - 1), "oversampling",
                 "must be a power of two")
            need(os_ > self.wdm(1).min_oversampling(), "oversampling", "too small for the channel span")
        need(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")

    # ------------------------------------------------------------- physics
    def link(self) -> CouplingSpec:
        return CouplingSpec.strong(self.modes, self.beta2_ps2_per_km, self.gamma_per_w_per_km, self.kappa,
                                   self.length_km, self.n_ase_w_per_hz)

    def wdm(self, subcarriers: int = 1) -> WdmSpec:
        return WdmSpec(channels=tuple(self.channels), spacing_thz=self.spacing_ghz / 1000,
                       bandwidth_thz=self.bandwidth_ghz / 1000, subcarriers=subcarriers)

    def samples_per_symbol(self) -> int:
        return self.oversampling or default_oversampling(self.wdm(1))

    def symbols(self, Q: int, role: str) -> int:
        if Q == 1:
            return self.train_symbols if role == "train" else self.test_symbols
        return self.symbols_per_subcarrier

    def sequences(self, Q: int, role: str) -> int:
        if Q == 1:
            return self.train_sequences if role == "train" else self.test_sequences
        return self.train_sequences_multicarrier if role == "train" else self.test_sequences_multicarrier

    def symbol_energy(self, power_dbm: float) -> float:
        """Energy per symbol (W*ps); equal for every subcarrier split."""
        return float(dbm_to_watts(power_dbm)) * self.wdm(1).T

    def snr(self, power_dbm: float) -> float:
        return float(dbm_to_watts(power_dbm)) / (self.n_ase_w_per_hz * self.bandwidth_ghz * 1e9)

    def physics_digest(self) -> str:
        keep = {k: v for k, v in self.to_dict().items()
                if k not in ("powers_dbm", "algos", "n_particles", "fit_particles", "desk_scale",
                             "train_sequences", "test_sequences", "train_sequences_multicarrier",
                             "test_sequences_multicarrier")}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def desk_config(**overrides) -> ExperimentConfig:
    """Reduced system that keeps the symbol rate and dispersion of the full one.

    The ASE density scales with length, so the SNR at a given launch power
    matches a full-length link with proportionally fewer amplified spans.
    """
    base = dict(length_km=200.0, channels=(-1, 0, 1), n_ase_w_per_hz=5.902e-18 * 200 / 1000,
                powers_dbm=(-14.0, -11.0, -8.0, -5.0, -2.0), train_sequences=8, test_sequences=16,
                train_symbols=1024, test_symbols=1024, train_sequences_multicarrier=8,
                test_sequences_multicarrier=16, symbols_per_subcarrier=256, fit_particles=128,
                desk_scale=True)
    base.update(overrides)
    return ExperimentConfig.from_dict(base)


# ---------------------------------------------------------------------------
# simulation

def _grid_symbols(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _power_key(p: float) -> str:
    return f"{float(p):+.3f}"


def simulate_sequence(cfg: ExperimentConfig, power_dbm: float, Q: int, role: str, index: int):
    """One transmitted/received sequence pair, each of shape (Q, 2S, n)."""
    stream = RandomStream(cfg.seed, ("sequence", role, _power_key(power_dbm), Q, index))
    n = cfg.symbols(Q, role)
    M = _grid_symbols(n)
    spec = cfg.link()
    wdm = draw_delays(cfg.wdm(Q), stream.child("delays"))
    frames = random_frame(wdm, cfg.modes, M, power_dbm, stream.child("symbols"))
    tx = modulate(frames, wdm, cfg.samples_per_symbol())
    rx = propagate(tx, spec, SsfmConfig(cfg.step_km, noise_on=cfg.noise_on), stream.child("ase"))
    y = receive(rx, wdm, spec, cfg.compensation, M, SsfmConfig(cfg.step_km, noise_on=False))
    return frames.x[..., :n], y[..., :n]


def _cache_path(cache_dir: Path, cfg: ExperimentConfig, power, Q, role, index) -> Path:
    return cache_dir / f"{cfg.physics_digest()}_{cfg.seed}_{role}_{_power_key(power)}_{Q}_{index}.npz"


def _simulate_cached(args):
    cfg, power, Q, role, index, cache_dir = args
    path = _cache_path(Path(cache_dir), cfg, power, Q, role, index) if cache_dir else None
    if path is not None and path.exists():
        with np.load(path) as d:
            return d["x"], d["y"]
    x, y = simulate_sequence(cfg, power, Q, role, index)
    if path is not None:
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, x=x, y=y)
        os.replace(tmp, path)
    return x, y


def simulate_set(cfg: ExperimentConfig, power_dbm: float, Q: int, role: str,
                 cache_dir: Optional[Path] = None, workers: int = 1) -> list:
    """All sequences of one role as (x, y) pairs of shape (2S, n), subcarriers flattened."""
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, power_dbm, Q, role, i, str(cache_dir) if cache_dir else None)
            for i in range(cfg.sequences(Q, role))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_simulate_cached, jobs))
    else:
        results = [_simulate_cached(j) for j in jobs]
    return [(x[q], y[q]) for x, y in results for q in range(Q)]


def model_geometry(cfg: ExperimentConfig, power_dbm: float, Q: int):
    """Base r[l], s[l] (averaged over COI subcarriers) and the predicted mean phase."""
    spec = cfg.link()
    wdm = cfg.wdm(Q)
    E = cfg.symbol_energy(power_dbm)
    energies = {c: (E, 2 * E * E) for c in wdm.interferers}
    if not energies:
        z = np.zeros(cfg.memory + 1)
        return z, z.copy(), 0.0
    covs = [covariance_approx(spec, wdm, energies, cfg.memory, subcarrier=q) for q in range(Q)]
    r = np.mean([c.r for c in covs], axis=0)
    s = np.mean([c.s for c in covs], axis=0)
    return r, s, float(np.mean([c.mean_diag for c in covs]))


# ---------------------------------------------------------------------------
# pipeline

def _fit_path(out: Path, power, Q, algo) -> Path:
    return out / "fits" / f"fit_{_power_key(power)}_{Q}_{algo}.json"


def fit_cell(cfg: ExperimentConfig, power_dbm: float, Q: int, out: Optional[Path] = None,
             workers: int = 1) -> dict:
    """Fit every requested receiver family on the training set of one (power, subcarriers) cell."""
    algos = [ReceiverAlgo(a) for a in cfg.algos]
    if out is not None and all(_fit_path(out, power_dbm, Q, a.kind).exists() for a in algos):
        return {a.kind: json.loads(_fit_path(out, power_dbm, Q, a.kind).read_text()) for a in algos}
    cache = out / "cache" if out is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    pairs = simulate_set(cfg, power_dbm, Q, "train", cache, workers)
    r, s, mean_pred = model_geometry(cfg, power_dbm, Q)
    train = TrainingSet(pairs, cfg.modes, cfg.memory, r, s)
    stream = RandomStream(cfg.seed, ("fit", _power_key(power_dbm), Q))
    fits = fit_all(train, algos, cfg.fit_particles, stream, workers=workers,
                   fit_scale_axes=bool(np.any(r) or np.any(s)))
    reports = {}
    for kind, fr in fits.items():
        rep = fr.to_dict()
        rep["provenance"].update({"power_dbm": float(power_dbm), "subcarriers": Q,
                                  "config_digest": cfg.physics_digest(),
                                  "mean_phase_predicted": mean_pred})
        reports[kind] = rep
        if out is not None:
            p = _fit_path(out, power_dbm, Q, kind)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(rep, indent=2, sort_keys=True))
    return reports


def rate_cell(cfg: ExperimentConfig, power_dbm: float, Q: int, fits: dict, out: Optional[Path] = None,
              workers: int = 1) -> list:
    from .cran import CranParams

    cache = out / "cache" if out is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    pairs = simulate_set(cfg, power_dbm, Q, "test", cache, workers)
    E = cfg.symbol_energy(power_dbm)
    rows = []
    for kind in cfg.algos:
        params = CranParams.from_dict(fits[kind]["params"])
        stream = RandomStream(cfg.seed, ("rate", _power_key(power_dbm), Q, kind))
        res = achievable_rate(pairs, params, ReceiverAlgo(kind), E, cfg.n_particles, stream)
        rows.append({"power_dbm": float(power_dbm), "algo": kind, "subcarriers": Q, "rate_bits": res.rate,
                     "h_cond": res.h_cond, "h_out": res.h_out, "mc_stderr": res.stderr,
                     "n_sequences": res.n_sequences, "seed": cfg.seed})
    return rows


def run_pipeline(cfg: ExperimentConfig, out: Optional[Path] = None, workers: int = 1) -> dict:
    """Simulate, fit and evaluate every (power, subcarriers) cell; write rates.csv when ``out`` is given."""
    cfg.validate()
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    rows, fits = [], {}
    for Q in cfg.subcarriers:
        for p in cfg.powers_dbm:
            f = fit_cell(cfg, p, Q, out, workers)
            fits[(float(p), Q)] = f
            rows.extend(rate_cell(cfg, p, Q, f, out, workers))
    if out is not None:
        (out / "rates.csv").write_text(format_rate_table(rows))
    return {"rates": rows, "fits": fits}


# ---------------------------------------------------------------------------
# tables

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def format_rate_table(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RATE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in RATE_COLUMNS])
    return buf.getvalue()


def parse_rate_table(text: str) -> list:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"power_dbm": float(r["power_dbm"]), "algo": r["algo"], "subcarriers": int(r["subcarriers"]),
                     "rate_bits": float(r["rate_bits"]), "h_cond": float(r["h_cond"]), "h_out": float(r["h_out"]),
                     "mc_stderr": float(r["mc_stderr"]), "n_sequences": int(r["n_sequences"]),
                     "seed": int(r["seed"])})
    return rows


def series_name(algo: str, subcarriers: int) -> str:
    return algo if subcarriers == 1 else f"{algo}_{subcarriers}sc"


def capacity_rate(power_dbm: float, n_ase_w_per_hz: float, bandwidth_hz: float) -> float:
    """log2(1 + P / (N_ASE * B))."""
    return float(np.log2(1 + float(dbm_to_watts(power_dbm)) / (n_ase_w_per_hz * bandwidth_hz)))


def emit_figure_data(tables: Sequence[dict], cfg: Optional[ExperimentConfig] = None,
                     series: Optional[Sequence[str]] = None) -> list:
    """Plot-ready rows (series, power_dbm, rate), one series per algo/subcarrier plus the capacity curve.

    ``series`` lists the series that must be present; by default every
    algo/subcarrier pair of ``cfg`` (or whatever the tables contain).
    """
    cfg = cfg or ExperimentConfig()
    expected = list(series) if series is not None else [series_name(a, q) for q in cfg.subcarriers for a in cfg.algos]
    have = {}
    for r in tables:
        have.setdefault(series_name(r["algo"], int(r["subcarriers"])), []).append(r)
    missing = [s for s in expected if s not in have]
    if not tables or missing:
        raise SeriesError(missing or expected)
    out = []
    for name in expected:
        for r in sorted(have[name], key=lambda r: r["power_dbm"]):
            out.append({"series": name, "power_dbm": float(r["power_dbm"]), "rate": float(r["rate_bits"])})
    powers = sorted({float(r["power_dbm"]) for r in tables})
    for p in powers:
        out.append({"series": CAPACITY_SERIES, "power_dbm": p,
                    "rate": capacity_rate(p, cfg.n_ase_w_per_hz, cfg.bandwidth_ghz * 1e9)})
    return out


def format_figure_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIGURE_COLUMNS)
    for r in rows:
        w.writerow([r["series"], _fmt(r["power_dbm"]), _fmt(r["rate"])])
    return buf.getvalue()


def parse_figure_csv(text: str) -> list:
    return [{"series": r["series"], "power_dbm": float(r["power_dbm"]), "rate": float(r["rate"])}
            for r in csv.DictReader(io.StringIO(text))]
