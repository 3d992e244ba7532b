"""Keystroke and IMU feature extraction, IMU resampling, min-max normalisation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SENSORS = ("accelerometer", "gyroscope", "magnetometer")
SENSOR_FLAGS = {"A": "accelerometer", "G": "gyroscope", "M": "magnetometer"}
IMU_BINS = 100
DEFAULT_WINDOW = 50


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    labels: tuple[str, ...]

    @property
    def channels(self) -> int:
        return len(self.labels)

    @property
    def is_keystroke(self) -> bool:
        return self.name in ("full-keystroke", "humidb-keystroke")


FULL_KEYSTROKE = FeatureSchema(
    "full-keystroke",
    ("HL", "DU_di", "UD_di", "DD_di", "UU_di", "DU_tri", "UD_tri", "DD_tri", "UU_tri", "ASCII"),
)
HUMIDB_KEYSTROKE = FeatureSchema("humidb-keystroke", ("DD_di", "DD_tri", "ASCII"))


def imu_schema(sensors: Sequence[str] = SENSORS) -> FeatureSchema:
    sensors = ordered_sensors(sensors)
    labels = []
    for s in sensors:
        for kind in ("", "d1_", "d2_", "fft_"):
            labels.extend(f"{s}.{kind}{axis}" for axis in "xyz")
    return FeatureSchema("imu", tuple(labels))


def keystroke_schema(name: str) -> FeatureSchema:
    try:
        return {"full": FULL_KEYSTROKE, "full-keystroke": FULL_KEYSTROKE,
                "humidb": HUMIDB_KEYSTROKE, "humidb-keystroke": HUMIDB_KEYSTROKE}[name]
    except KeyError:
        raise FeatureError(f"unknown keystroke schema {name!r}") from None


def ordered_sensors(sensors: Sequence[str]) -> tuple[str, ...]:
    unknown = set(sensors) - set(SENSORS)
    if unknown:
        raise FeatureError(f"unknown sensors {sorted(unknown)}")
    return tuple(s for s in SENSORS if s in sensors)


@dataclass
class EventLog:
    user: str
    session: str
    codes: np.ndarray
    press: np.ndarray
    release: np.ndarray | None = None

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.press = np.asarray(self.press, dtype=np.float64)
        if self.release is not None:
            self.release = np.asarray(self.release, dtype=np.float64)
            if np.any(self.release < self.press):
                raise FeatureError(f"{self.user}/{self.session}: release before press")
        if np.any(np.diff(self.press) < 0):
            raise FeatureError(f"{self.user}/{self.session}: events not sorted by press time")

    def __len__(self) -> int:
        return len(self.press)

    @property
    def has_release(self) -> bool:
        return self.release is not None

    def slice(self, start: int, stop: int) -> "EventLog":
        rel = None if self.release is None else self.release[start:stop]
        return EventLog(self.user, self.session, self.codes[start:stop], self.press[start:stop], rel)

    def span(self) -> tuple[float, float]:
        last = self.press[-1] if self.release is None else max(self.press[-1], self.release.max())
        return float(self.press[0]), float(last)


@dataclass
class ImuLog:
    """Per-sensor (timestamps (n,), values (n, 3)) pairs."""

    streams: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (t, xyz) in list(self.streams.items()):
            t = np.asarray(t, dtype=np.float64)
            xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
            if len(t) != len(xyz):
                raise FeatureError(f"{name}: {len(t)} timestamps but {len(xyz)} samples")
            if np.any(np.diff(t) <= 0):
                raise FeatureError(f"{name}: timestamps not strictly increasing")
            self.streams[name] = (t, xyz)

    @property
    def sensors(self) -> tuple[str, ...]:
        return ordered_sensors(list(self.streams))


# --------------------------------------------------------------------------
# keystrokes


def extract_keystroke_features(log: EventLog, schema: FeatureSchema = FULL_KEYSTROKE, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Return a ``window x schema.channels`` matrix for one keystroke sequence.

    Row i carries the hold latency of key i and the di-/tri-gram intervals that
    start at key i. Missing partners, and rows past the end of the log, are
    zero; longer logs keep their first ``window`` keys.
    """
    n = len(log)
    if n == 0:
        raise FeatureError("empty event log")
    if not schema.is_keystroke:
        raise FeatureError(f"{schema.name} is not a keystroke schema")
    if schema is FULL_KEYSTROKE and not log.has_release:
        raise FeatureError("full keystroke schema needs release times")

    n = min(n, window)
    d = log.press[:n]
    ascii_ = np.clip(log.codes[:n] / 255.0, 0.0, 1.0)

    def gram(later, earlier, lag):
        out = np.zeros(n)
        if n > lag:
            out[: n - lag] = later[lag:] - earlier[: n - lag]
        return out

    # di/tri-grams only pair keys inside the kept window
    if schema is FULL_KEYSTROKE:
        u = log.release[:n]
        cols = [u - d]
        for lag in (1, 2):
            cols += [gram(u, d, lag), gram(d, u, lag), gram(d, d, lag), gram(u, u, lag)]
        cols.append(ascii_)
    else:
        cols = [gram(d, d, 1), gram(d, d, 2), ascii_]

    out = np.zeros((window, schema.channels))
    out[:n] = np.stack(cols, axis=1)
    return out


def segment_log(log: EventLog, window: int) -> list[EventLog]:
    """Split a session into consecutive, non-overlapping ``window``-key chunks.

    A trailing remainder is kept only if it holds at least half a window.
    """
    chunks = []
    for start in range(0, len(log), window):
        stop = min(start + window, len(log))
        if stop - start >= max(1, window // 2) or start == 0:
            chunks.append(log.slice(start, stop))
    return chunks


# --------------------------------------------------------------------------
# IMU


def synchronize_resample(imu: ImuLog, t_start: float, t_end: float, sensors: Sequence[str] = SENSORS, bins: int = IMU_BINS) -> dict[str, np.ndarray]:
    """Average raw samples into ``bins`` equal bins over [t_start, t_end].

    Empty bins take linear interpolation (by bin index) between the nearest
    non-empty bins; leading/trailing empties copy their nearest neighbour.
    """
    if not t_start < t_end:
        raise FeatureError(f"invalid window [{t_start}, {t_end}]")
    out = {}
    for s in ordered_sensors(sensors):
        if s not in imu.streams:
            raise FeatureError(f"sensor {s} missing from IMU log")
        t, xyz = imu.streams[s]
        inside = (t >= t_start) & (t <= t_end)
        if not inside.any():
            raise FeatureError(f"no {s} samples in window [{t_start}, {t_end}]")
        idx = np.floor((t[inside] - t_start) / (t_end - t_start) * bins).astype(np.int64)
        idx = np.clip(idx, 0, bins - 1)
        counts = np.bincount(idx, minlength=bins)
        res = np.empty((bins, 3))
        filled = np.nonzero(counts)[0]
        for c in range(3):
            sums = np.bincount(idx, weights=xyz[inside, c], minlength=bins)
            res[:, c] = np.interp(np.arange(bins), filled, sums[filled] / counts[filled])
        out[s] = res
    return out


def _diff_padded(x: np.ndarray, order: int) -> np.ndarray:
    d = np.diff(x, n=order, axis=0)
    tail = np.repeat(d[-1:], order, axis=0)
    return np.concatenate([d, tail], axis=0)


def extract_imu_features(resampled: dict[str, np.ndarray], sensors: Sequence[str] = SENSORS, bins: int = IMU_BINS) -> np.ndarray:
    """Per sensor: raw xyz, first and second differences, |DFT|; 12 channels each."""
    blocks = []
    for s in ordered_sensors(sensors):
        if s not in resampled:
            raise FeatureError(f"resampled data missing sensor {s}")
        x = np.asarray(resampled[s], dtype=np.float64)
        if x.shape != (bins, 3):
            raise FeatureError(f"{s}: expected shape {(bins, 3)}, got {x.shape}")
        blocks += [x, _diff_padded(x, 1), _diff_padded(x, 2), np.abs(np.fft.fft(x, axis=0))]
    if not blocks:
        raise FeatureError("no IMU sensors enabled")
    return np.concatenate(blocks, axis=1)


# --------------------------------------------------------------------------
# normalisation


@dataclass
class NormalizerState:
    schema: str
    lo: np.ndarray
    hi: np.ndarray
    passthrough: np.ndarray
    target: tuple[float, float] = (0.0, 10.0)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "passthrough": self.passthrough.astype(bool).tolist(),
            "target": list(self.target),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizerState":
        return cls(d["schema"], np.asarray(d["lo"], float), np.asarray(d["hi"], float),
                   np.asarray(d["passthrough"], bool), tuple(d["target"]))


def fit_normalizer(train: Sequence[np.ndarray] | np.ndarray, schema: FeatureSchema, target: tuple[float, float] = (0.0, 10.0)) -> NormalizerState:
    """Per-channel min/max over the training sequences.

    Keystroke channels are already in seconds or [0, 1] and pass through.
    """
    data = np.concatenate([np.asarray(s).reshape(-1, schema.channels) for s in train], axis=0)
    if data.size == 0:
        raise FeatureError("cannot fit a normalizer on no data")
    passthrough = np.full(schema.channels, schema.is_keystroke)
    return NormalizerState(schema.name, data.min(axis=0), data.max(axis=0), passthrough, tuple(target))


def apply_normalizer(state: NormalizerState | None, seq: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    if state is None:
        raise FeatureError("normalizer has not been fitted")
    if state.schema != schema.name or len(state.lo) != schema.channels:
        raise FeatureError(f"normalizer fitted for {state.schema}/{len(state.lo)} channels, got {schema.name}/{schema.channels}")
    seq = np.asarray(seq, dtype=np.float64)
    a, b = state.target
    span = state.hi - state.lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, a + (seq - state.lo) / safe * (b - a), a)
    return np.where(state.passthrough, seq, scaled)
