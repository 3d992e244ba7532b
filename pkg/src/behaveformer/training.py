"""Triplet sampling, the triplet objective, the training loop and fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datasets import Checkpoint, FeatureSet
from .evaluation import EvaluationError, compute_det, per_user_eer, score_protocol
from .model import BehaveFormer, BehaveFormerConfig
from .numerics import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


class SchemaMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    margin: float = 1.0
    lr: float = 0.001
    users_per_batch: int = 16
    seqs_per_user: int = 2
    epochs: int = 50
    batches_per_epoch: int | None = None
    patience: int = 10
    enroll: int = 5
    seed: int = 0
    eer_variant: str = "per_user"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.seqs_per_user < 2:
            raise ValueError("need at least two sequences per user in a batch")
        if self.eer_variant not in ("per_user", "global"):
            raise ValueError(f"unknown EER variant {self.eer_variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    user: str
    negative_user: str


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, margin: float = 1.0) -> Tensor:
    """max(0, D(a, p) - D(a, n) + margin) per row, D Euclidean."""
    f_a, f_p, f_n = nx.as_tensor(f_a), nx.as_tensor(f_p), nx.as_tensor(f_n)
    if not f_a.shape == f_p.shape == f_n.shape:
        raise nx.ShapeError(f"triplet_loss: embedding shapes differ {f_a.shape}/{f_p.shape}/{f_n.shape}")
    d_ap = nx.euclidean(f_a, f_p)
    d_an = nx.euclidean(f_a, f_n)
    return nx.hinge(nx.add(nx.sub(d_ap, d_an), margin))


def sample_triplets(users: np.ndarray, users_per_batch: int, seqs_per_user: int, rng: np.random.Generator) -> list[Triplet]:
    """One batch of triplets over sequence indices.

    Draws up to ``users_per_batch`` users without replacement and
    ``seqs_per_user`` distinct sequences from each; every ordered pair of
    those sequences is an anchor/positive, and each gets a negative drawn
    from another user's sequences in the same batch.
    """
    users = np.asarray(users).astype(str)
    pool = {u: np.nonzero(users == u)[0] for u in sorted(set(users.tolist()))}
    eligible = [u for u, idx in pool.items() if len(idx) >= 2]
    if len(eligible) < 2:
        raise TrainingError(f"need at least two users with two or more sequences, found {len(eligible)}")
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=min(users_per_batch, len(eligible)), replace=False)]
    drawn = {u: rng.choice(pool[u], size=min(seqs_per_user, len(pool[u])), replace=False) for u in chosen}
    triplets = []
    for u in chosen:
        others = [v for v in chosen if v != u]
        for a in drawn[u]:
            for p in drawn[u]:
                if a == p:
                    continue
                v = others[rng.integers(len(others))]
                n = drawn[v][rng.integers(len(drawn[v]))]
                triplets.append(Triplet(int(a), int(p), int(n), u, v))
    return triplets


def _inputs(model: BehaveFormer, fs: FeatureSet, idx):
    xk = fs.keystroke[idx]
    xi = fs.imu[idx] if model.dual else None
    return xk, xi


def embed(model: BehaveFormer, fs: FeatureSet, batch: int = 64) -> np.ndarray:
    """Eval-mode embeddings of every sequence in ``fs``."""
    was_training = model.training
    model.eval()
    out = []
    with nx.no_grad():
        for start in range(0, len(fs), batch):
            idx = np.arange(start, min(start + batch, len(fs)))
            out.append(model(*_inputs(model, fs, idx)).data)
    model.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.embedding_dim))


def validation_eer(model: BehaveFormer, fs: FeatureSet, enroll: int, variant: str = "per_user") -> float:
    records, _ = score_protocol(embed(model, fs), fs.users, fs.sessions, fs.timestamps, enroll)
    if variant == "per_user":
        return per_user_eer(records)
    return compute_det([r.score for r in records if r.genuine], [r.score for r in records if not r.genuine]).eer


@dataclass
class History:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_eer"]
        lines += [f"{e},{loss!r},{eer!r}" for e, loss, eer in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    @property
    def val_eers(self) -> list[float]:
        return [r[2] for r in self.rows]


def check_compatible(model: BehaveFormer, fs: FeatureSet) -> None:
    kc = model.cfg.keystroke
    problems = []
    if fs.keystroke.shape[1:] != (kc.seq_len, kc.channels):
        problems.append(f"keystroke tower expects {(kc.seq_len, kc.channels)}, data has {fs.keystroke.shape[1:]}")
    if model.dual:
        ic = model.cfg.imu
        if fs.imu is None:
            problems.append("dual-tower model but data has no IMU features")
        elif fs.imu.shape[1:] != (ic.seq_len, ic.channels):
            problems.append(f"IMU tower expects {(ic.seq_len, ic.channels)}, data has {fs.imu.shape[1:]}")
    if problems:
        raise SchemaMismatch("; ".join(problems))


def make_checkpoint(model: BehaveFormer, normalizers: dict | None, config: TrainConfig | None) -> Checkpoint:
    return Checkpoint(model.cfg.to_dict(), model.state_dict(), dict(normalizers or {}),
                      config.to_dict() if config else {})


def model_from_checkpoint(ckpt: Checkpoint) -> BehaveFormer:
    model = BehaveFormer(BehaveFormerConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.params)
    return model


def train(
    model: BehaveFormer,
    train_set: FeatureSet,
    val_set: FeatureSet | None,
    config: TrainConfig,
    normalizers: dict | None = None,
    frozen: Sequence[str] = (),
) -> tuple[Checkpoint, History]:
    """Optimise the mean triplet loss with Adam; keep the best-validation parameters.

    ``frozen`` lists parameter-name prefixes excluded from optimisation.
    Without a validation set the final parameters are returned.
    """
    check_compatible(model, train_set)
    if val_set is not None:
        check_compatible(model, val_set)
    rng = np.random.default_rng(config.seed)
    params = [p for name, p in model.named_parameters() if not any(name.startswith(f) for f in frozen)]
    opt = nx.Adam(params, lr=config.lr)
    per_batch = config.users_per_batch * config.seqs_per_user
    n_batches = config.batches_per_epoch or max(1, math.ceil(len(train_set) / per_batch))

    history = History()
    best = make_checkpoint(model, normalizers, config)
    best_eer = math.inf
    stale = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for _ in range(n_batches):
            triplets = sample_triplets(train_set.users, config.users_per_batch, config.seqs_per_user, rng)
            idx = np.unique([i for t in triplets for i in (t.anchor, t.positive, t.negative)])
            pos = {int(i): k for k, i in enumerate(idx)}
            try:
                emb = model(*_inputs(model, train_set, idx))
                a = nx.take(emb, [pos[t.anchor] for t in triplets])
                p = nx.take(emb, [pos[t.positive] for t in triplets])
                n = nx.take(emb, [pos[t.negative] for t in triplets])
                loss = nx.mean(triplet_loss(a, p, n, config.margin))
                model.zero_grad()
                nx.backward(loss)
            except nx.NonFiniteError:
                raise TrainingDiverged(epoch) from None
            opt.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        if not np.isfinite(train_loss):
            raise TrainingDiverged(epoch)
        val_eer = validation_eer(model, val_set, config.enroll, config.eer_variant) if val_set is not None else float("nan")
        history.rows.append((epoch, train_loss, val_eer))
        log.info("epoch %d loss %.4f val_eer %.4f", epoch, train_loss, val_eer)
        if val_set is None:
            best = make_checkpoint(model, normalizers, config)
            continue
        # ties keep the later parameters but do not reset patience
        if val_eer <= best_eer:
            stale = 0 if val_eer < best_eer else stale + 1
            best_eer = val_eer
            best = make_checkpoint(model, normalizers, config)
        else:
            stale += 1
        if stale >= config.patience:
            break
    return best, history


def fine_tune(
    checkpoint: Checkpoint,
    train_set: FeatureSet,
    val_set: FeatureSet | None,
    config: TrainConfig,
    freeze: Sequence[str] = (),
) -> tuple[Checkpoint, History]:
    """Continue training from pretrained weights, optionally freezing sub-modules by name prefix."""
    try:
        model = model_from_checkpoint(checkpoint)
    except (KeyError, TypeError, nx.ShapeError) as exc:
        raise SchemaMismatch(f"corrupt or inconsistent checkpoint: {exc}") from None
    check_compatible(model, train_set)
    names = [n for n, _ in model.named_parameters()]
    for f in freeze:
        if not any(n.startswith(f) for n in names):
            raise ValueError(f"freeze prefix {f!r} matches no parameter")
    ckpt, history = train(model, train_set, val_set, config, checkpoint.normalizers, frozen=freeze)
    if config.epochs == 0:
        ckpt = Checkpoint(checkpoint.model_config, {k: v.copy() for k, v in checkpoint.params.items()},
                          dict(checkpoint.normalizers), dict(checkpoint.train_config), checkpoint.version)
    return ckpt, history


__all__ = [
    "EvaluationError",
    "History",
    "SchemaMismatch",
    "TrainConfig",
    "TrainingDiverged",
    "TrainingError",
    "Triplet",
    "check_compatible",
    "embed",
    "fine_tune",
    "make_checkpoint",
    "model_from_checkpoint",
    "sample_triplets",
    "train",
    "triplet_loss",
    "validation_eer",
]
