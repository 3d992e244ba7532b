"""Corpus ingestion, user splits, synthetic corpora, feature stores and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import (
    FULL_KEYSTROKE,
    HUMIDB_KEYSTROKE,
    IMU_BINS,
    SENSORS,
    EventLog,
    FeatureError,
    FeatureSchema,
    ImuLog,
    NormalizerState,
    apply_normalizer,
    extract_imu_features,
    extract_keystroke_features,
    imu_schema,
    keystroke_schema,
    fit_normalizer,
    ordered_sensors,
    segment_log,
    synchronize_resample,
)

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# corpus


@dataclass
class Manifest:
    """Which columns and modalities a dataset provides."""

    name: str
    keystroke_file: str
    imu_file: str | None = None
    has_release: bool = True
    sensors: tuple[str, ...] = ()

    @property
    def keystroke_schema(self) -> FeatureSchema:
        return FULL_KEYSTROKE if self.has_release else HUMIDB_KEYSTROKE

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        base = Path(path).parent
        imu = d.get("imu_file")
        return cls(
            d["name"],
            str(base / d["keystroke_file"]),
            str(base / imu) if imu else None,
            bool(d.get("has_release", True)),
            ordered_sensors(d.get("sensors", list(SENSORS) if imu else [])),
        )

    def dump(self, path: str | Path) -> None:
        base = Path(path).parent
        d = {
            "name": self.name,
            "keystroke_file": str(Path(self.keystroke_file).relative_to(base)) if Path(self.keystroke_file).is_absolute() else self.keystroke_file,
            "imu_file": None,
            "has_release": self.has_release,
            "sensors": list(self.sensors),
        }
        if self.imu_file:
            d["imu_file"] = str(Path(self.imu_file).relative_to(base)) if Path(self.imu_file).is_absolute() else self.imu_file
        Path(path).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


@dataclass
class Corpus:
    name: str
    sessions: dict[tuple[str, str], tuple[EventLog, ImuLog | None]]
    has_release: bool = True
    sensors: tuple[str, ...] = ()
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def users(self) -> list[str]:
        return sorted({u for u, _ in self.sessions})

    def __len__(self) -> int:
        return len(self.sessions)


def _read_rows(path: str, min_cols: int, max_cols: int):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip().lower() in ("user", "user_id", "sequence")):
                continue
            if not min_cols <= len(row) <= max_cols:
                raise DatasetError(f"{path}:{lineno}: expected {min_cols}-{max_cols} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def ingest(manifest: Manifest | str | Path) -> Corpus:
    """Load keystroke (and IMU) rows into per-session logs.

    Sessions missing a modality the manifest declares are dropped; the count
    per reason is kept in ``Corpus.dropped``.
    """
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    events: dict[tuple[str, str], list[tuple[int, float, float | None]]] = {}
    for lineno, row in _read_rows(manifest.keystroke_file, 4, 5):
        try:
            code, press = int(row[2]), float(row[3])
            release = float(row[4]) if len(row) == 5 and row[4] != "" else None
        except ValueError:
            raise DatasetError(f"{manifest.keystroke_file}:{lineno}: malformed keystroke row {row}") from None
        if manifest.has_release and release is None:
            raise DatasetError(f"{manifest.keystroke_file}:{lineno}: release time required by manifest")
        if not manifest.has_release:
            release = None
        events.setdefault((row[0], row[1]), []).append((code, press, release))
    if not events:
        raise DatasetError(f"{manifest.keystroke_file}: empty corpus")

    imu: dict[tuple[str, str], dict[str, list]] = {}
    if manifest.imu_file:
        for lineno, row in _read_rows(manifest.imu_file, 7, 7):
            sensor = row[2]
            if sensor not in SENSORS:
                raise DatasetError(f"{manifest.imu_file}:{lineno}: unknown sensor {sensor!r}")
            try:
                vals = [float(v) for v in row[3:]]
            except ValueError:
                raise DatasetError(f"{manifest.imu_file}:{lineno}: malformed IMU row {row}") from None
            imu.setdefault((row[0], row[1]), {}).setdefault(sensor, []).append(vals)

    sessions = {}
    dropped: dict[str, int] = {}
    for key in sorted(events):
        rows = sorted(events[key], key=lambda r: r[1])
        codes = [r[0] for r in rows]
        press = [r[1] for r in rows]
        release = [r[2] for r in rows] if manifest.has_release else None
        try:
            elog = EventLog(key[0], key[1], codes, press, release)
        except FeatureError as exc:
            raise DatasetError(f"session {key}: {exc}") from None
        ilog = None
        if manifest.imu_file:
            streams = imu.get(key, {})
            missing = [s for s in manifest.sensors if s not in streams]
            if missing:
                dropped["missing_imu"] = dropped.get("missing_imu", 0) + 1
                continue
            parsed = {}
            for s in manifest.sensors:
                arr = np.asarray(sorted(streams[s]), dtype=np.float64)
                parsed[s] = (arr[:, 0], arr[:, 1:])
            ilog = ImuLog(parsed)
        sessions[key] = (elog, ilog)
    if not sessions:
        raise DatasetError("empty corpus after filtering")
    if dropped:
        log.info("dropped sessions: %s", dropped)
    return Corpus(manifest.name, sessions, manifest.has_release, manifest.sensors, dropped)


def write_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write the delimited keystroke/IMU files plus a manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "keystrokes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "session", "key_code", "press_time", "release_time"])
        for (u, s), (elog, _) in sorted(corpus.sessions.items()):
            for i in range(len(elog)):
                rel = "" if elog.release is None else repr(float(elog.release[i]))
                w.writerow([u, s, int(elog.codes[i]), repr(float(elog.press[i])), rel])
    imu_file = None
    if corpus.sensors:
        imu_file = "imu.csv"
        with open(d / imu_file, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "session", "sensor", "timestamp", "x", "y", "z"])
            for (u, s), (_, ilog) in sorted(corpus.sessions.items()):
                for sensor in corpus.sensors:
                    t, xyz = ilog.streams[sensor]
                    for ti, row in zip(t, xyz):
                        w.writerow([u, s, sensor, repr(float(ti))] + [repr(float(v)) for v in row])
    manifest = Manifest(corpus.name, "keystrokes.csv", imu_file, corpus.has_release, corpus.sensors)
    manifest.dump(d / "manifest.json")
    return d / "manifest.json"


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    train: int
    test: int
    validation: int
    seed: int = 0


def split_users(users: Sequence[str] | Corpus, spec: SplitSpec) -> tuple[list[str], list[str], list[str]]:
    """Seeded shuffle into disjoint train / test / validation user lists."""
    if isinstance(users, Corpus):
        users = users.users
    users = sorted(set(users))
    need = spec.train + spec.test + spec.validation
    if min(spec.train, spec.test, spec.validation) < 0 or need > len(users):
        raise DatasetError(f"split needs {need} users, only {len(users)} eligible")
    order = np.random.default_rng(spec.seed).permutation(len(users))
    shuffled = [users[i] for i in order]
    return (
        sorted(shuffled[: spec.train]),
        sorted(shuffled[spec.train : spec.train + spec.test]),
        sorted(shuffled[spec.train + spec.test : need]),
    )


def write_split_manifest(path: str | Path, splits: dict[str, Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "split"])
        for name, users in splits.items():
            for u in users:
                w.writerow([u, name])


def read_split_manifest(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for _, row in _read_rows(str(path), 2, 2):
        if row[0] == "user_id":
            continue
        out.setdefault(row[1], []).append(row[0])
    return out


# --------------------------------------------------------------------------
# synthetic corpora

KEY_CODES = np.arange(97, 123)


def synthesize(
    users: int,
    sessions: int,
    theta: float = 5.0,
    seed: int = 0,
    keystrokes: int = 100,
    sensors: Sequence[str] = SENSORS,
    imu_rate: float = 50.0,
    noise: float = 0.25,
    user_prefix: str = "u",
) -> Corpus:
    """Generate a behavioural corpus with user-specific latent profiles.

    Per user: log-mean hold time and inter-key gap, plus a per-axis sinusoid
    (offset, amplitude, frequency, phase) for every IMU sensor. Profile
    dispersion across users is ``theta * noise`` in log-space for timings and
    ``theta`` times the IMU noise scale for offsets; within-user variation uses
    ``noise``.
    """
    if users < 2 or sessions < 2 or keystrokes < 2:
        raise DatasetError("synthesize needs users >= 2, sessions >= 2 and keystrokes >= 2")
    rng = np.random.default_rng(seed)
    sensors = ordered_sensors(sensors)
    out = {}
    imu_noise = 0.2
    for ui in range(users):
        uid = f"{user_prefix}{ui:03d}"
        hold_mu = np.log(0.10) + theta * noise * 0.5 * rng.standard_normal()
        gap_mu = np.log(0.20) + theta * noise * 0.5 * rng.standard_normal()
        prof = {
            s: dict(
                offset=theta * imu_noise * rng.standard_normal(3),
                amp=np.exp(0.3 * theta * imu_noise * rng.standard_normal(3)),
                freq=rng.uniform(0.5, 3.0, 3),
                phase=rng.uniform(0, 2 * np.pi, 3),
            )
            for s in sensors
        }
        for si in range(sessions):
            sid = f"s{si:02d}"
            codes = rng.choice(KEY_CODES, size=keystrokes)
            holds = np.exp(hold_mu + noise * rng.standard_normal(keystrokes))
            gaps = np.exp(gap_mu + noise * rng.standard_normal(keystrokes))
            press = np.round(np.cumsum(gaps) - gaps[0] + 0.5, 6)
            release = np.round(press + holds, 6)
            elog = EventLog(uid, sid, codes, press, release)
            ilog = None
            if sensors:
                t_end = float(release.max()) + 0.5
                n = int(np.ceil(t_end * imu_rate)) + 1
                streams = {}
                for s in sensors:
                    t = np.arange(n) / imu_rate + rng.uniform(0, 0.5 / imu_rate, n)
                    p = prof[s]
                    xyz = (
                        p["offset"]
                        + p["amp"] * np.sin(2 * np.pi * p["freq"] * t[:, None] + p["phase"])
                        + imu_noise * rng.standard_normal((n, 3))
                    )
                    streams[s] = (np.round(t, 6), np.round(xyz, 6))
                ilog = ImuLog(streams)
            out[(uid, sid)] = (elog, ilog)
    return Corpus("synthetic", out, True, sensors)


# --------------------------------------------------------------------------
# feature stores


@dataclass
class FeatureSet:
    """Extracted sequences: one row per keystroke window."""

    users: np.ndarray
    sessions: np.ndarray
    timestamps: np.ndarray
    keystroke: np.ndarray
    imu: np.ndarray | None
    key_schema: str
    sensors: tuple[str, ...] = ()
    window: int = 50

    def __len__(self) -> int:
        return len(self.users)

    def subset(self, mask_or_idx) -> "FeatureSet":
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        return FeatureSet(
            self.users[idx], self.sessions[idx], self.timestamps[idx], self.keystroke[idx],
            None if self.imu is None else self.imu[idx], self.key_schema, self.sensors, self.window,
        )

    def for_users(self, users: Sequence[str]) -> "FeatureSet":
        return self.subset(np.isin(self.users, list(users)))

    def with_sensors(self, sensors: Sequence[str]) -> "FeatureSet":
        """Keep only the IMU channel blocks of ``sensors`` (all-K ablation when empty)."""
        sensors = ordered_sensors(sensors)
        if not sensors:
            return FeatureSet(self.users, self.sessions, self.timestamps, self.keystroke, None,
                              self.key_schema, (), self.window)
        missing = set(sensors) - set(self.sensors)
        if missing or self.imu is None:
            raise DatasetError(f"feature store lacks sensors {sorted(missing) or list(sensors)}")
        cols = np.concatenate([np.arange(12) + 12 * self.sensors.index(s) for s in sensors])
        return FeatureSet(self.users, self.sessions, self.timestamps, self.keystroke, self.imu[:, :, cols],
                          self.key_schema, sensors, self.window)

    @property
    def users_list(self) -> list[str]:
        return sorted(set(self.users.tolist()))


def build_feature_set(corpus: Corpus, window: int = 50, schema: str | None = None, sensors: Sequence[str] | None = None) -> FeatureSet:
    """Segment every session into keystroke windows and extract both modalities."""
    kschema = keystroke_schema(schema) if schema else (FULL_KEYSTROKE if corpus.has_release else HUMIDB_KEYSTROKE)
    sensors = corpus.sensors if sensors is None else ordered_sensors(sensors)
    if set(sensors) - set(corpus.sensors):
        raise DatasetError(f"corpus lacks sensors {sorted(set(sensors) - set(corpus.sensors))}")
    users, sess, stamps, keys, imus = [], [], [], [], []
    for (u, s), (elog, ilog) in sorted(corpus.sessions.items()):
        for chunk in segment_log(elog, window):
            t0, t1 = chunk.span()
            if sensors:
                if not t1 > t0:
                    continue
                imus.append(extract_imu_features(synchronize_resample(ilog, t0, t1, sensors), sensors))
            keys.append(extract_keystroke_features(chunk, kschema, window))
            users.append(u)
            sess.append(s)
            stamps.append(t1)
    if not keys:
        raise DatasetError("no sequences extracted")
    return FeatureSet(
        np.asarray(users), np.asarray(sess), np.asarray(stamps, dtype=np.float64), np.stack(keys),
        np.stack(imus) if sensors else None, kschema.name, tuple(sensors), window,
    )


def fit_normalizers(fs: FeatureSet, target: tuple[float, float] = (0.0, 10.0)) -> dict[str, dict]:
    """Fit per-modality normalizers on a (training) feature set."""
    out = {"keystroke": fit_normalizer(fs.keystroke, keystroke_schema(fs.key_schema), target).to_dict()}
    if fs.imu is not None:
        out["imu"] = fit_normalizer(fs.imu, imu_schema(fs.sensors), target).to_dict()
    return out


def normalize(fs: FeatureSet, normalizers: dict[str, dict]) -> FeatureSet:
    """Apply fitted normalizers; raises if a modality has none or the schema differs."""
    key = apply_normalizer(_state(normalizers, "keystroke"), fs.keystroke, keystroke_schema(fs.key_schema))
    imu = None
    if fs.imu is not None:
        imu = apply_normalizer(_state(normalizers, "imu"), fs.imu, imu_schema(fs.sensors))
    return FeatureSet(fs.users, fs.sessions, fs.timestamps, key, imu, fs.key_schema, fs.sensors, fs.window)


def _state(normalizers: dict, name: str) -> NormalizerState | None:
    d = normalizers.get(name)
    return None if d is None else NormalizerState.from_dict(d)


def save_features(fs: FeatureSet, directory: str | Path) -> None:
    """Delimited feature store: index.csv, keystroke.csv, optional imu.csv, plus features.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"key_schema": fs.key_schema, "sensors": list(fs.sensors), "window": fs.window,
            "keystroke_channels": fs.keystroke.shape[2], "imu_rows": IMU_BINS}
    (d / "features.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(d / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "user", "session", "t_end"])
        for i in range(len(fs)):
            w.writerow([i, fs.users[i], fs.sessions[i], repr(float(fs.timestamps[i]))])
    _write_matrix_csv(d / "keystroke.csv", fs.keystroke)
    if fs.imu is not None:
        _write_matrix_csv(d / "imu.csv", fs.imu)


def _write_matrix_csv(path: Path, arr: np.ndarray) -> None:
    n, rows, cols = arr.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "row"] + [f"c{j}" for j in range(cols)])
        for i in range(n):
            for r in range(rows):
                w.writerow([i, r] + [repr(float(v)) for v in arr[i, r]])


def _read_matrix_csv(path: Path, n: int, rows: int) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != n * rows:
        raise DatasetError(f"{path}: expected {n * rows} rows, found {data.shape[0]}")
    return data[:, 2:].reshape(n, rows, -1)


def load_features(directory: str | Path) -> FeatureSet:
    d = Path(directory)
    meta = json.loads((d / "features.json").read_text(encoding="utf-8"))
    index = list(_read_rows(str(d / "index.csv"), 4, 4))
    users = np.asarray([r[1] for _, r in index])
    sess = np.asarray([r[2] for _, r in index])
    stamps = np.asarray([float(r[3]) for _, r in index])
    n = len(index)
    keys = _read_matrix_csv(d / "keystroke.csv", n, meta["window"])
    imu = _read_matrix_csv(d / "imu.csv", n, meta["imu_rows"]) if meta["sensors"] else None
    return FeatureSet(users, sess, stamps, keys, imu, meta["key_schema"], tuple(meta["sensors"]), meta["window"])


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"BHVFCKPT"
FORMAT_VERSION = 1
_DIGEST_LEN = 32


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    normalizers: dict[str, dict] = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        # hold metadata in its JSON form so a reloaded checkpoint compares equal
        self.model_config = json.loads(json.dumps(self.model_config))
        self.normalizers = json.loads(json.dumps(self.normalizers))
        self.train_config = json.loads(json.dumps(self.train_config))

    def shape_table(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def config_digest(self) -> str:
        blob = json.dumps({"model": self.model_config, "train": self.train_config}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def equals(self, other: "Checkpoint") -> bool:
        if (self.version, self.model_config, self.normalizers, self.train_config) != (
            other.version, other.model_config, other.normalizers, other.train_config
        ):
            return False
        if list(self.params) != list(other.params):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params.values(), other.params.values())
        )


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Container: magic | u32 version | u64 header length | JSON header | float64 LE payload | sha256."""
    table = []
    payload = []
    offset = 0
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {
            "model_config": ckpt.model_config,
            "normalizers": ckpt.normalizers,
            "train_config": ckpt.train_config,
            "config_digest": ckpt.config_digest(),
            "shape_table": table,
        },
        sort_keys=True,
    ).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", ckpt.version, len(header)) + header + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST_LEN:
        raise CheckpointError("checkpoint truncated")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity digest mismatch")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    try:
        header = json.loads(body[fixed : fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header unreadable: {exc}") from None
    payload = np.frombuffer(body[fixed + hlen :], dtype="<f8")
    params = {}
    for entry in header["shape_table"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"checkpoint payload too short for {entry['name']}")
        params[entry["name"]] = payload[start : start + size].reshape(entry["shape"]).astype(np.float64)
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["shape_table"])
    if expected != payload.size:
        raise CheckpointError(f"checkpoint payload holds {payload.size} values, shape table expects {expected}")
    return Checkpoint(header["model_config"], params, header["normalizers"], header["train_config"], version)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    return parse_checkpoint(blob)
