"""Enrollment-verification scoring, DET/EER, continuous-authentication metrics, silhouette.

Scores are distances: lower means more likely genuine, and a sample is
accepted iff its score is <= the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass
class EnrollmentProfile:
    user: str
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] == 0:
            raise EvaluationError(f"empty enrollment profile for user {self.user}")


def verification_score(profile: EnrollmentProfile, probe: np.ndarray) -> float:
    """Mean Euclidean distance from the probe to each enrollment embedding."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != profile.embeddings.shape[1:]:
        raise EvaluationError(f"probe dim {probe.shape} != enrollment dim {profile.embeddings.shape[1:]}")
    return float(np.linalg.norm(profile.embeddings - probe, axis=1).mean())


def verification_scores(profile: EnrollmentProfile, probes: np.ndarray) -> np.ndarray:
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    diff = profile.embeddings[None, :, :] - probes[:, None, :]
    return np.linalg.norm(diff, axis=2).mean(axis=1)


# --------------------------------------------------------------------------
# DET / EER


@dataclass
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_threshold: float

    def rows(self) -> Iterable[tuple[float, float, float]]:
        return zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist())


def compute_det(genuine: Sequence[float], impostor: Sequence[float]) -> DetCurve:
    """Sweep thresholds over every observed score and locate FAR = FRR.

    The first sweep point sits below all scores (FAR 0, FRR 1). The EER is
    linearly interpolated between the two sweep points that bracket the sign
    change of FRR - FAR.
    """
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise EvaluationError("DET needs non-empty genuine and impostor score lists")
    thr = np.unique(np.concatenate([gen, imp]))
    far = np.searchsorted(imp, thr, side="right") / imp.size
    frr = 1.0 - np.searchsorted(gen, thr, side="right") / gen.size
    thr = np.concatenate([[-np.inf], thr])
    far = np.concatenate([[0.0], far])
    frr = np.concatenate([[1.0], frr])

    d = frr - far
    j = int(np.argmax(d <= 0))  # d ends at -1 so a crossing always exists
    if d[j] == 0:
        eer, t = far[j], thr[j]
    else:
        lam = d[j - 1] / (d[j - 1] - d[j])
        eer = far[j - 1] + lam * (far[j] - far[j - 1])
        t = thr[j] if not np.isfinite(thr[j - 1]) else thr[j - 1] + lam * (thr[j] - thr[j - 1])
    return DetCurve(thr, far, frr, float(eer), float(t))


def per_user_eer(scores: Sequence["ScoreRecord"]) -> float:
    """EER computed per claimed identity, then averaged with equal user weight."""
    by_user: dict[str, tuple[list, list]] = {}
    for r in scores:
        g, i = by_user.setdefault(r.claimed, ([], []))
        (g if r.genuine else i).append(r.score)
    eers = [compute_det(g, i).eer for g, i in by_user.values() if g and i]
    if not eers:
        raise EvaluationError("no user has both genuine and impostor scores")
    return float(np.mean(eers))


# --------------------------------------------------------------------------
# continuous authentication


@dataclass
class ScoredTimeline:
    timestamps: np.ndarray
    scores: np.ndarray
    genuine: bool

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.timestamps.size == 0:
            raise EvaluationError("timeline with zero samples")
        if self.timestamps.shape != self.scores.shape:
            raise EvaluationError("timestamps and scores differ in length")
        if np.any(np.diff(self.timestamps) < 0):
            raise EvaluationError("timeline timestamps must be non-decreasing")


@dataclass
class CAMetrics:
    usability: float
    tcr_s: float
    frwi_min: float
    fawi_min: float
    never_rejected: int = 0

    def as_dict(self) -> dict:
        return {
            "usability": self.usability,
            "tcr_s": self.tcr_s,
            "frwi_min": self.frwi_min,
            "fawi_min": self.fawi_min,
            "never_rejected_impostors": self.never_rejected,
        }


def _longest_run_seconds(t: np.ndarray, flags: np.ndarray) -> float:
    """Longest (last - first timestamp) over maximal runs of True in ``flags``."""
    best = 0.0
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        if start is not None and (not f or i == len(flags) - 1):
            end = i if f else i - 1
            best = max(best, t[end] - t[start])
            start = None
    return float(best)


def ca_metrics(timelines: Sequence[ScoredTimeline], threshold: float) -> CAMetrics:
    """Usability, TCR (s), FRWI (min) and FAWI (min) at a fixed threshold.

    Each quantity is averaged over the timelines it is defined on. An
    impostor timeline that is never rejected contributes its full duration to
    TCR and is counted in ``never_rejected``. Missing timeline kinds yield NaN
    for the metrics that need them.
    """
    if not timelines:
        raise EvaluationError("no timelines given")
    usab, frwi, tcr, fawi = [], [], [], []
    never = 0
    for tl in timelines:
        accept = tl.scores <= threshold
        if tl.genuine:
            usab.append(accept.mean())
            frwi.append(_longest_run_seconds(tl.timestamps, ~accept) / 60.0)
        else:
            rejects = np.nonzero(~accept)[0]
            if rejects.size:
                tcr.append(tl.timestamps[rejects[0]] - tl.timestamps[0])
            else:
                tcr.append(tl.timestamps[-1] - tl.timestamps[0])
                never += 1
            fawi.append(_longest_run_seconds(tl.timestamps, accept) / 60.0)

    def avg(xs):
        return float(np.mean(xs)) if xs else float("nan")

    return CAMetrics(avg(usab), avg(tcr), avg(frwi), avg(fawi), never)


# --------------------------------------------------------------------------
# silhouette


def silhouette(embeddings: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette coefficient with Euclidean distance; singletons score 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise EvaluationError("silhouette needs at least two labels")
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        if own.sum() < 2:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == other].mean() for other in uniq if other != labels[i])
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


# --------------------------------------------------------------------------
# protocol


@dataclass
class ScoreRecord:
    claimed: str
    source: str
    session: str
    timestamp: float
    score: float

    @property
    def genuine(self) -> bool:
        return self.claimed == self.source


@dataclass
class EvaluationReport:
    eer: float
    eer_per_user: float
    threshold: float
    ca: CAMetrics
    silhouette: float
    scores: list[ScoreRecord] = field(repr=False, default_factory=list)
    det: DetCurve | None = field(repr=False, default=None)
    skipped_users: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {"eer": self.eer, "eer_per_user": self.eer_per_user, "threshold": self.threshold}
        d.update(self.ca.as_dict())
        d["silhouette"] = self.silhouette
        d["skipped_users"] = list(self.skipped_users)
        return d


def enrollment_split(users: np.ndarray, sessions: np.ndarray, timestamps: np.ndarray, enroll: int):
    """Per user, the first ``enroll`` sequences (session, then time order) enroll; the rest verify."""
    order = np.lexsort((timestamps, sessions, users))
    enrol: dict[str, np.ndarray] = {}
    verify: dict[str, np.ndarray] = {}
    skipped = []
    for u in np.unique(users):
        idx = order[users[order] == u]
        if len(idx) <= enroll:
            skipped.append(str(u))
            continue
        enrol[str(u)] = idx[:enroll]
        verify[str(u)] = idx[enroll:]
    return enrol, verify, skipped


def score_protocol(embeddings, users, sessions, timestamps, enroll: int = 5) -> tuple[list[ScoreRecord], list[str]]:
    """Score every verification sample of every test user against every profile."""
    emb = np.asarray(embeddings, dtype=np.float64)
    users = np.asarray(users).astype(str)
    sessions = np.asarray(sessions).astype(str)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    enrol, verify, skipped = enrollment_split(users, sessions, timestamps, enroll)
    if len(enrol) < 2:
        raise EvaluationError("need at least two users with enough sequences to enroll and verify")
    records = []
    for claimed, eidx in enrol.items():
        profile = EnrollmentProfile(claimed, emb[eidx])
        for source, vidx in verify.items():
            s = verification_scores(profile, emb[vidx])
            records.extend(
                ScoreRecord(claimed, source, sessions[i], float(timestamps[i]), float(sc)) for i, sc in zip(vidx, s)
            )
    return records, skipped


def build_timelines(records: Sequence[ScoreRecord]) -> list[ScoredTimeline]:
    """One timeline per (claimed identity, source user, source session), ordered by time."""
    groups: dict[tuple[str, str, str], list[ScoreRecord]] = {}
    for r in records:
        groups.setdefault((r.claimed, r.source, r.session), []).append(r)
    out = []
    for key in sorted(groups):
        rs = sorted(groups[key], key=lambda r: r.timestamp)
        out.append(ScoredTimeline([r.timestamp for r in rs], [r.score for r in rs], rs[0].genuine))
    return out


def evaluate(embeddings, users, sessions, timestamps, enroll: int = 5, threshold: float | None = None) -> EvaluationReport:
    records, skipped = score_protocol(embeddings, users, sessions, timestamps, enroll)
    gen = [r.score for r in records if r.genuine]
    imp = [r.score for r in records if not r.genuine]
    det = compute_det(gen, imp)
    thr = det.eer_threshold if threshold is None else threshold
    ca = ca_metrics(build_timelines(records), thr)
    sil = silhouette(embeddings, np.asarray(users).astype(str))
    return EvaluationReport(det.eer, per_user_eer(records), thr, ca, sil, records, det, skipped)
