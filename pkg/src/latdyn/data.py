"""Dataset plumbing: CSV schema, normalization, windowing, synthetic cycles.

The synthetic generator stands in for bench measurements. Its equations are
the ground truth the model-quality checks are scored against, so they are
spelled out in ``static_emission_map`` / ``emissions_from_inputs`` rather than
hidden behind fitted constants.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

SAMPLE_DT_S = 0.2  # 5 Hz grid
CSV_HEADER = ["time_s", "torque_nm", "speed_rpm", "lambda", "nox", "co2", "co", "thc"]
CHANNELS = tuple(CSV_HEADER[1:])  # 7 data channels, time excluded
INPUT_COLS = (0, 1, 2)  # torque, speed, lambda
EMISSION_COLS = (3, 4, 5, 6)  # nox, co2, co, thc
SPECIES = ("nox", "co2", "co", "thc")

TORQUE_MAX_NM = 290.0  # bench engine's rated torque bound
SPEED_MIN_RPM = 800.0
SPEED_MAX_RPM = 5000.0


@dataclass(frozen=True)
class EmissionRecord:
    """One 5 Hz sample: inputs (torque, speed, lambda) and four species."""

    time_s: float
    torque_nm: float
    speed_rpm: float
    lambda_: float
    nox: float
    co2: float
    co: float
    thc: float

    def row(self) -> tuple[float, ...]:
        return (
            self.time_s,
            self.torque_nm,
            self.speed_rpm,
            self.lambda_,
            self.nox,
            self.co2,
            self.co,
            self.thc,
        )


def _validate_record(rec: EmissionRecord, where: str) -> None:
    if rec.lambda_ <= 0:
        raise DataError(f"{where}: lambda must be > 0, got {rec.lambda_}")
    for name in SPECIES:
        if getattr(rec, name) < 0:
            raise DataError(f"{where}: species {name} must be >= 0, got {getattr(rec, name)}")


def load_csv(path: str | Path) -> list[EmissionRecord]:
    """Parse an emission CSV, rejecting malformed rows with their line number."""
    path = Path(path)
    records: list[EmissionRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}")
        if header != CSV_HEADER:
            raise DataError(f"{path}: bad header {header!r}, expected {CSV_HEADER!r}")
        prev_t = None
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}:{line_no}: expected {len(CSV_HEADER)} columns, got {len(row)}")
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            rec = EmissionRecord(*values)
            _validate_record(rec, f"{path}:{line_no}")
            if prev_t is not None:
                if rec.time_s <= prev_t:
                    raise DataError(f"{path}:{line_no}: time not strictly increasing")
                if abs(rec.time_s - prev_t - SAMPLE_DT_S) > 1e-6:
                    raise DataError(
                        f"{path}:{line_no}: time step {rec.time_s - prev_t:.6f}s, expected {SAMPLE_DT_S}s"
                    )
            prev_t = rec.time_s
            records.append(rec)
    return records


def save_csv(records: list[EmissionRecord], path: str | Path) -> None:
    """Write records at full float precision so load(save(x)) is value-exact."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow([repr(v) for v in rec.row()])


def records_to_array(records: list[EmissionRecord]) -> np.ndarray:
    """[T, 7] float64 array of the data channels (time dropped)."""
    return np.array([rec.row()[1:] for rec in records], dtype=np.float64)


def split_records(
    records: list[EmissionRecord], fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
) -> tuple[list[EmissionRecord], list[EmissionRecord], list[EmissionRecord]]:
    """Contiguous train/val/test split; no shuffling, no boundary overlap."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n = len(records)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return records[:n_train], records[n_train : n_train + n_val], records[n_train + n_val :]


@dataclass
class Normalizer:
    """Per-channel min-max scaling fitted on the training split.

    Channels where max == min map to 0 and invert back to the stored constant.
    Values outside the fitted range map outside [0, 1] and are never clipped.
    """

    mins: np.ndarray  # [7]
    maxs: np.ndarray  # [7]

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        if data.ndim != 2 or data.shape[1] != len(CHANNELS):
            raise ContractError(f"expected [T, {len(CHANNELS)}] array, got {data.shape}")
        if data.shape[0] < 2:
            raise ContractError(f"need >= 2 records to fit a normalizer, got {data.shape[0]}")
        return cls(mins=data.min(axis=0).copy(), maxs=data.max(axis=0).copy())

    def _denom(self) -> np.ndarray:
        span = self.maxs - self.mins
        return np.where(span > 0, span, 1.0)

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mins) / self._denom()

    def invert(self, normed: np.ndarray) -> np.ndarray:
        return normed * self._denom() + self.mins

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(mins=np.asarray(d["mins"], dtype=np.float64), maxs=np.asarray(d["maxs"], dtype=np.float64))


@dataclass(frozen=True)
class SequenceWindow:
    """One training sample anchored at index ``origin`` of its source series.

    p_past:   [t_past, 4]        emissions up to and including the anchor
    u_future: [t_future - 1, 3]  inputs driving the predicted transitions
    p_future: [t_future, 4]      emissions after the anchor
    """

    p_past: np.ndarray
    u_future: np.ndarray
    p_future: np.ndarray
    origin: int


def window_dataset(
    data: np.ndarray, t_past: int, t_future: int, stride: int = 1
) -> list[SequenceWindow]:
    """Slide over a normalized [T, 7] array; never crosses the array bounds."""
    if t_past < 1 or t_future < 1 or stride < 1:
        raise ContractError(f"t_past/t_future/stride must be >= 1, got {t_past}/{t_future}/{stride}")
    n = data.shape[0]
    if n < t_past + t_future:
        raise ContractError(f"series of length {n} shorter than one window ({t_past + t_future})")
    inputs = data[:, INPUT_COLS]
    emissions = data[:, EMISSION_COLS]
    windows = []
    for k in range(t_past - 1, n - t_future, stride):
        windows.append(
            SequenceWindow(
                p_past=emissions[k - t_past + 1 : k + 1].copy(),
                u_future=inputs[k + 1 : k + t_future].copy(),
                p_future=emissions[k + 1 : k + t_future + 1].copy(),
                origin=k,
            )
        )
    return windows


def stack_windows(windows: list[SequenceWindow]) -> dict[str, np.ndarray]:
    """Batch a window list into contiguous arrays keyed by field name."""
    if not windows:
        raise ContractError("cannot stack an empty window list")
    return {
        "p_past": np.stack([w.p_past for w in windows]),
        "u_future": np.stack([w.u_future for w in windows]),
        "p_future": np.stack([w.p_future for w in windows]),
    }


# ---------------------------------------------------------------------------
# Synthetic drive-cycle surrogate
# ---------------------------------------------------------------------------

# First-order response time constants per species (s) and transient gains per
# unit of positive per-sample torque step (fraction of rated torque).
_LAG_TAU_S = np.array([0.35, 0.5, 0.4, 0.45])  # nox, co2, co, thc
_TRANSIENT_GAIN = np.array([2500.0, 3.0, 1.2, 700.0])
_TRANSIENT_DECAY_TAU_S = 0.3
_NOISE_SIGMA = np.array([3.0, 0.03, 0.005, 1.5])


def static_emission_map(tau: np.ndarray, omega: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Steady-state species concentrations for given operating points.

    Smooth nonlinear maps: NOx peaks near-stoichiometric at high load, CO2
    tracks fuel flow, CO and THC rise sharply when running rich, THC is also
    elevated at low load. Returns [n, 4] in generator units
    (ppm, %, %, ppm).
    """
    tau_n = np.clip(np.asarray(tau, dtype=np.float64) / TORQUE_MAX_NM, 0.0, 1.0)
    omega_n = np.clip(
        (np.asarray(omega, dtype=np.float64) - SPEED_MIN_RPM) / (SPEED_MAX_RPM - SPEED_MIN_RPM),
        0.0,
        1.0,
    )
    lam = np.asarray(lam, dtype=np.float64)
    rich = np.clip(1.02 - lam, 0.0, None)

    nox = 15.0 + 1400.0 * tau_n**1.3 * (0.25 + 0.75 * omega_n) * np.exp(-(((lam - 1.03) / 0.07) ** 2))
    co2 = 1.0 + 13.0 * (0.20 + 0.80 * tau_n) * (0.25 + 0.75 * omega_n) / lam**2
    co = 0.04 + 0.15 * tau_n * omega_n + 6.0 * rich**1.4
    thc = 120.0 + 250.0 * (1.0 - tau_n) ** 1.2 * np.sqrt(1.0 - omega_n) + 900.0 * rich**1.2
    return np.stack([nox, co2, co, thc], axis=-1)


def emissions_from_inputs(
    tau: np.ndarray,
    omega: np.ndarray,
    lam: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Dynamic species response: lagged static map + tip-in transients + noise.

    Each species follows a first-order lag toward its static value, plus a
    fast-decaying transient proportional to the positive torque step (the
    sharp tip-in peaks), plus, when ``rng`` is given, white measurement noise.
    Values are clamped at zero.
    """
    tau = np.asarray(tau, dtype=np.float64)
    n = tau.shape[0]
    ss = static_emission_map(tau, omega, lam)  # [n, 4]
    pstep = np.clip(np.diff(tau, prepend=tau[0]), 0.0, None) / TORQUE_MAX_NM

    alpha = SAMPLE_DT_S / _LAG_TAU_S  # per-species lag update, all < 1
    decay = np.exp(-SAMPLE_DT_S / _TRANSIENT_DECAY_TAU_S)

    out = np.empty_like(ss)
    base = ss[0].copy()
    trans = np.zeros(4)
    for t in range(n):
        base = base + alpha * (ss[t] - base)
        trans = decay * trans + _TRANSIENT_GAIN * pstep[t]
        out[t] = base + trans
    if rng is not None:
        out = out + rng.normal(0.0, _NOISE_SIGMA, size=out.shape)
    return np.clip(out, 0.0, None)


def _piecewise_profile(
    rng: np.random.Generator,
    n: int,
    lo: float,
    hi: float,
    seg_s: tuple[float, float],
    step_prob: float = 0.0,
) -> np.ndarray:
    """Segments of random duration ramping to random targets; with probability
    ``step_prob`` a segment holds its level and jumps at the boundary."""
    vals = np.empty(n)
    current = rng.uniform(lo, hi)
    idx = 0
    while idx < n:
        seg_len = max(1, int(round(rng.uniform(*seg_s) / SAMPLE_DT_S)))
        target = rng.uniform(lo, hi)
        end = min(n, idx + seg_len)
        if rng.random() < step_prob:
            vals[idx:end] = current  # hold, then tip-in at the boundary
        else:
            vals[idx:end] = np.linspace(current, target, end - idx, endpoint=False)
        current = target
        idx = end
    return vals


def _one_pole(x: np.ndarray, tau_s: float) -> np.ndarray:
    alpha = SAMPLE_DT_S / tau_s
    y = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc = acc + alpha * (v - acc)
        y[i] = acc
    return y


def build_input_profile(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic-for-rng input trajectories (torque, speed, lambda)."""
    omega = _piecewise_profile(rng, n, SPEED_MIN_RPM + 100, SPEED_MAX_RPM - 200, (5.0, 15.0))
    omega = np.clip(_one_pole(omega, 1.0), SPEED_MIN_RPM, SPEED_MAX_RPM)

    tau = _piecewise_profile(rng, n, 5.0, TORQUE_MAX_NM - 30.0, (1.5, 6.0), step_prob=0.5)
    tau = np.clip(tau, 0.0, TORQUE_MAX_NM)

    # Lambda: near-stoichiometric with drift noise, enrichment dips on tip-ins.
    ar = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = 0.9 * acc + rng.normal(0.0, 0.002)
        ar[i] = acc
    pstep = np.clip(np.diff(tau, prepend=tau[0]), 0.0, None) / TORQUE_MAX_NM
    enrich = np.empty(n)
    e = 0.0
    e_decay = np.exp(-SAMPLE_DT_S / 0.8)
    for i in range(n):
        e = e_decay * e + pstep[i]
        enrich[i] = e
    lam = np.clip(1.0 + ar - 0.25 * enrich, 0.75, 1.15)
    return tau, omega, lam


def generate_synthetic_cycle(seed: int, duration_s: float) -> list[EmissionRecord]:
    """Deterministic synthetic drive cycle at 5 Hz.

    Raises:
        ContractError: duration below 60 s (too short for a meaningful cycle).
    """
    if duration_s < 60.0:
        raise ContractError(f"cycle duration must be >= 60 s, got {duration_s}")
    n = int(round(duration_s / SAMPLE_DT_S))
    rng = np.random.default_rng(seed)
    tau, omega, lam = build_input_profile(rng, n)
    species = emissions_from_inputs(tau, omega, lam, rng=rng)
    records = []
    for i in range(n):
        records.append(
            EmissionRecord(
                time_s=round(i * SAMPLE_DT_S, 6),
                torque_nm=float(tau[i]),
                speed_rpm=float(omega[i]),
                lambda_=float(lam[i]),
                nox=float(species[i, 0]),
                co2=float(species[i, 1]),
                co=float(species[i, 2]),
                thc=float(species[i, 3]),
            )
        )
    return records
