"""Feedforward compatibility scorer trained on direct-call pairs.

Dense layers with batch normalization, LeakyReLU and dropout, a sigmoid output
and binary cross-entropy loss, trained with Adam, early stopping and
learning-rate halving on plateaus. Pure numpy, float64, deterministic for a
given seed.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .features import PAIR_DIM, FeatureCache, FeaturePair
from .model import Program

log = logging.getLogger(__name__)

MAGIC = b"ICRSCORE"
FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


# -- data --------------------------------------------------------------------

@dataclass
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    # (program index, callsite address, callee start) per row
    origin: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def pairs(self) -> list[FeaturePair]:
        return [FeaturePair(x, int(l)) for x, l in zip(self.X, self.y)]

    @classmethod
    def from_pairs(cls, pairs: Iterable[FeaturePair]) -> "TrainingSet":
        pairs = list(pairs)
        if any(fp.label not in (0, 1) for fp in pairs):
            raise ValueError("every training pair needs a 0/1 label")
        X = np.array([fp.values for fp in pairs], dtype=np.float64).reshape(len(pairs), -1)
        return cls(X, np.array([fp.label for fp in pairs], dtype=np.float64))


def generate_training_pairs(corpus: Sequence[Program], negatives_per_positive: float = 1.4,
                            rng_seed: int = 0, tau_arg: float = 6.0,
                            tau_ret: float = 2.0) -> TrainingSet:
    """Positive pairs from direct calls, negatives from other functions of the
    same program. Fractional ratios are rounded stochastically per call."""
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(rng_seed)
    base = math.floor(negatives_per_positive)
    frac = negatives_per_positive - base
    rows, labels, origin = [], [], []
    for pi, p in enumerate(corpus):
        cache = FeatureCache(p, tau_arg, tau_ret)
        starts = sorted(p.start_set)
        for ins in p.instructions():
            if ins.mnemonic != "call":
                continue
            callee = ins.target
            rows.append(cache.pair(ins.address, callee))
            labels.append(1.0)
            origin.append((pi, ins.address, callee))
            k = base + (1 if frac > 0 and rng.random() < frac else 0)
            others = [s for s in starts if s != callee]
            k = min(k, len(others))
            if k:
                for j in sorted(rng.choice(len(others), size=k, replace=False)):
                    rows.append(cache.pair(ins.address, others[j]))
                    labels.append(0.0)
                    origin.append((pi, ins.address, others[j]))
    X = np.array(rows, dtype=np.float64).reshape(len(rows), PAIR_DIM)
    return TrainingSet(X, np.array(labels), origin)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


def fit_standardizer(ts: TrainingSet | np.ndarray) -> Standardizer:
    X = ts.X if isinstance(ts, TrainingSet) else np.asarray(ts, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot fit a standardizer on an empty training set")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return Standardizer(mean, std)


# -- network -----------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (1024, 512, 256, 128)
    dropout: tuple[float, ...] = (0.4, 0.4, 0.3, 0.2)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 8
    lr_patience: int = 4
    lr_factor: float = 0.5
    val_fraction: float = 0.2
    slope: float = 0.01
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


class ScorerModel:
    """Parameters are held in ``self.params`` (trainable) and ``self.stats``
    (batch-norm running statistics), both dicts of arrays keyed by name."""

    def __init__(self, input_dim: int = PAIR_DIM, hidden: Sequence[int] = (1024, 512, 256, 128),
                 dropout: Sequence[float] = (0.4, 0.4, 0.3, 0.2), slope: float = 0.01,
                 bn_momentum: float = 0.99, bn_eps: float = 1e-3, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
        if len(dropout) != len(hidden):
            raise ModelError("one dropout rate per hidden layer required")
        if any(not 0.0 <= r < 1.0 for r in dropout):
            raise ModelError("dropout rates must lie in [0, 1)")
        self.input_dim = input_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = tuple(float(r) for r in dropout)
        self.slope = slope
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.seed = seed
        self.standardizer: Optional[Standardizer] = None
        self.history: list[dict] = []
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        dims = (input_dim,) + self.hidden + (1,)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            limit = math.sqrt(6.0 / (a + b))
            self.params[f"W{i}"] = rng.uniform(-limit, limit, size=(a, b))
            self.params[f"b{i}"] = np.zeros(b)
            if i < len(self.hidden):
                self.params[f"gamma{i}"] = np.ones(b)
                self.params[f"beta{i}"] = np.zeros(b)
                self.stats[f"mean{i}"] = np.zeros(b)
                self.stats[f"var{i}"] = np.ones(b)

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden + (1,)

    def forward(self, X: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None,
                use_dropout: bool = True) -> tuple[np.ndarray, list]:
        """Logits and the cache needed by ``backward``. In training mode the
        batch statistics are used (and running statistics updated)."""
        cache = []
        h = X
        n_hidden = len(self.hidden)
        for i in range(n_hidden):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                m = self.bn_momentum
                self.stats[f"mean{i}"] = m * self.stats[f"mean{i}"] + (1 - m) * mu
                self.stats[f"var{i}"] = m * self.stats[f"var{i}"] + (1 - m) * var
            else:
                mu, var = self.stats[f"mean{i}"], self.stats[f"var{i}"]
            inv_std = 1.0 / np.sqrt(var + self.bn_eps)
            xhat = (z - mu) * inv_std
            u = self.params[f"gamma{i}"] * xhat + self.params[f"beta{i}"]
            a = np.where(u > 0, u, self.slope * u)
            mask = None
            rate = self.dropout[i]
            if train and use_dropout and rate > 0:
                mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
                a = a * mask
            cache.append((h, xhat, inv_std, u, mask))
            h = a
        k = n_hidden
        logits = (h @ self.params[f"W{k}"] + self.params[f"b{k}"])[:, 0]
        cache.append(h)
        return logits, cache

    def backward(self, cache: list, dlogits: np.ndarray, train: bool = True) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        k = len(self.hidden)
        h_last = cache[-1]
        dz = dlogits[:, None]
        grads[f"W{k}"] = h_last.T @ dz
        grads[f"b{k}"] = dz.sum(axis=0)
        dh = dz @ self.params[f"W{k}"].T
        for i in range(k - 1, -1, -1):
            h_in, xhat, inv_std, u, mask = cache[i]
            if mask is not None:
                dh = dh * mask
            du = dh * np.where(u > 0, 1.0, self.slope)
            grads[f"gamma{i}"] = (du * xhat).sum(axis=0)
            grads[f"beta{i}"] = du.sum(axis=0)
            dxhat = du * self.params[f"gamma{i}"]
            if train:
                n = dxhat.shape[0]
                dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                      - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dz = dxhat * inv_std
            grads[f"W{i}"] = h_in.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"W{i}"].T
        return grads

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray, train: bool = True,
                       rng: Optional[np.random.Generator] = None,
                       use_dropout: bool = True) -> tuple[float, dict[str, np.ndarray]]:
        logits, cache = self.forward(X, train=train, rng=rng, use_dropout=use_dropout)
        loss = bce_with_logits(logits, y)
        dlogits = (_sigmoid(logits) - y) / len(y)
        return loss, self.backward(cache, dlogits, train=train)

    def predict_logits(self, X: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(X, dtype=np.float64), train=False)[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Scores in [0, 1] for already-standardized rows."""
        return _sigmoid(self.predict_logits(X))

    def score(self, X_raw: np.ndarray) -> np.ndarray:
        X_raw = np.atleast_2d(np.asarray(X_raw, dtype=np.float64))
        if X_raw.shape[1] != self.input_dim:
            raise ModelError(f"expected {self.input_dim} features, got {X_raw.shape[1]}")
        X = self.standardizer.transform(X_raw) if self.standardizer else X_raw
        return np.clip(self.predict(X), 0.0, 1.0)

    # -- persistence --

    def _header(self) -> dict:
        return {
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
            "dropout": list(self.dropout),
            "hidden": list(self.hidden),
            "input_dim": self.input_dim,
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
            "seed": self.seed,
            "slope": self.slope,
            "standardized": self.standardizer is not None,
            "stats": [[k, list(v.shape)] for k, v in self.stats.items()],
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self._header(), sort_keys=True).encode()
        arrays = []
        if self.standardizer is not None:
            arrays += [self.standardizer.mean, self.standardizer.std]
        arrays += list(self.params.values()) + list(self.stats.values())
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScorerModel":
        if data[:len(MAGIC)] != MAGIC:
            raise ModelError("not a scorer model file")
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<II", data, off)
        if version != FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {version}")
        off += 8
        try:
            h = json.loads(data[off:off + hlen])
        except ValueError as e:
            raise ModelError(f"corrupt model header: {e}") from None
        off += hlen
        m = cls(h["input_dim"], h["hidden"], h["dropout"], h["slope"],
                h["bn_momentum"], h["bn_eps"], h["seed"])

        def take(shape):
            nonlocal off
            n = int(np.prod(shape)) if shape else 1
            if off + 8 * n > len(data):
                raise ModelError("truncated model file")
            a = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
            return a.reshape(shape)

        if h["standardized"]:
            m.standardizer = Standardizer(take([h["input_dim"]]), take([h["input_dim"]]))
        m.params = {k: take(s) for k, s in h["params"]}
        m.stats = {k: take(s) for k, s in h["stats"]}
        if off != len(data):
            raise ModelError("trailing bytes in model file")
        return m

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ScorerModel":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise ModelError(f"cannot read model {path}: {e}") from None
        return cls.from_bytes(data)


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = c.adam_beta1, c.adam_beta2
        corr = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= lr * corr * self.m[k] / (np.sqrt(self.v[k]) + c.adam_eps)


def _metrics(model: ScorerModel, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if len(y) == 0:
        return float("nan"), float("nan")
    z = model.predict_logits(X)
    return bce_with_logits(z, y), float(np.mean((z > 0) == (y > 0.5)))


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if val_fraction > 0 and n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    return perm[n_val:], perm[:n_val]


def train_scorer(ts: TrainingSet, std: Optional[Standardizer] = None,
                 cfg: TrainConfig = TrainConfig()) -> ScorerModel:
    y = np.asarray(ts.y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty training set")
    if len(np.unique(y)) < 2:
        raise ValueError("training set contains a single class")
    std = std if std is not None else fit_standardizer(ts)
    X = std.transform(ts.X)
    rng = np.random.default_rng(cfg.seed)
    model = ScorerModel(X.shape[1], cfg.hidden, cfg.dropout, cfg.slope,
                        cfg.bn_momentum, cfg.bn_eps, cfg.seed, rng=rng)
    model.standardizer = std
    tr, va = split_indices(len(y), cfg.val_fraction, rng)
    Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]
    monitor_val = len(va) > 0

    opt = _Adam(model.params, cfg)
    lr = cfg.lr
    best = math.inf
    best_state = None
    wait = plateau = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(tr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, grads = model.loss_and_grads(Xtr[idx], ytr[idx], train=True, rng=rng)
            opt.step(model.params, grads, lr)
        loss, acc = _metrics(model, Xtr, ytr)
        vloss, vacc = _metrics(model, Xva, yva) if monitor_val else (loss, acc)
        model.history.append({"epoch": epoch + 1, "loss": loss, "accuracy": acc,
                              "val_loss": vloss, "val_accuracy": vacc, "lr": lr})
        log.debug("epoch %d loss %.4f acc %.3f val_loss %.4f val_acc %.3f lr %g",
                  epoch + 1, loss, acc, vloss, vacc, lr)
        if vloss < best:
            best = vloss
            best_state = ({k: v.copy() for k, v in model.params.items()},
                          {k: v.copy() for k, v in model.stats.items()})
            wait = plateau = 0
        else:
            wait += 1
            plateau += 1
            if plateau >= cfg.lr_patience:
                lr *= cfg.lr_factor
                plateau = 0
            if wait >= cfg.patience:
                break
    if best_state is not None:
        model.params, model.stats = best_state
    return model


def score_pair(m: ScorerModel, std: Optional[Standardizer], fp: FeaturePair | np.ndarray) -> float:
    x = fp.values if isinstance(fp, FeaturePair) else np.asarray(fp, dtype=np.float64)
    x = np.atleast_2d(x)
    if x.shape[1] != m.input_dim:
        raise ModelError(f"expected {m.input_dim} features, got {x.shape[1]}")
    if std is not None:
        x = std.transform(x)
    return float(np.clip(m.predict(x)[0], 0.0, 1.0))
