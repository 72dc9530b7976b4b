"""Contrastive feature encoder trained on a correlation loss.

The encoder is a two-layer tanh MLP, ``f(x) = W2 tanh(W1 x + b1) + b2``. Pairs
of images from the same patient are pulled toward correlation 1 and pairs from
different patients are pushed below a margin:

    positive:  1 - r(f(a), f(b))
    negative:  max(0, r(f(a), f(b)) - margin)

where r is Pearson correlation. All training arithmetic is float64; weights are
rounded to float32 at init and after training so that saved models round-trip.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .dataset import DatasetManifest, SplitPlan, SPACES

log = logging.getLogger(__name__)

MODEL_MAGIC = b"PVE1"
_MODEL_HEADER = struct.Struct("<4sIIIBBQ")
KINDS = ("mlp", "identity")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(eq=False)
class EncoderModel:
    dims: tuple[int, int, int]
    seed: int
    space: str = "latent"
    kind: str = "mlp"
    w1: np.ndarray | None = None  # (h, d)
    b1: np.ndarray | None = None  # (h,)
    w2: np.ndarray | None = None  # (k, h)
    b2: np.ndarray | None = None  # (k,)
    final_loss: float | None = field(default=None, compare=False)
    undefined_pairs: int = field(default=0, compare=False)
    activation: str = "tanh"

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def with_params(self, params) -> "EncoderModel":
        w1, b1, w2, b2 = params
        return replace(self, w1=w1, b1=b1, w2=w2, b2=b2)

    def encode(self, x) -> np.ndarray:
        return encode(self, x)

    def to_bytes(self) -> bytes:
        d, h, k = self.dims
        head = _MODEL_HEADER.pack(MODEL_MAGIC, d, h, k, KINDS.index(self.kind),
                                  SPACES.index(self.space), self.seed)
        if self.kind == "identity":
            return head
        body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes()
                        for p in self.params())
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncoderModel":
        if len(data) < _MODEL_HEADER.size:
            raise ValueError("truncated model file")
        magic, d, h, k, kind, space, seed = _MODEL_HEADER.unpack_from(data)
        if magic != MODEL_MAGIC:
            raise ValueError(f"bad model magic {magic!r}")
        if KINDS[kind] == "identity":
            return identity_encoder(d, SPACES[space])
        shapes = [(h, d), (h,), (k, h), (k,)]
        need = _MODEL_HEADER.size + 4 * sum(math.prod(s) for s in shapes)
        if len(data) != need:
            raise ValueError(f"model file has {len(data)} bytes, expected {need}")
        off = _MODEL_HEADER.size
        params = []
        for s in shapes:
            n = math.prod(s)
            params.append(np.frombuffer(data, dtype="<f4", count=n, offset=off)
                          .astype(np.float64).reshape(s))
            off += 4 * n
        w1, b1, w2, b2 = params
        return cls(dims=(d, h, k), seed=seed, space=SPACES[space], kind="mlp",
                   w1=w1, b1=b1, w2=w2, b2=b2)

    def save(self, path) -> None:
        atomic_write_bytes(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path) -> "EncoderModel":
        return cls.from_bytes(Path(path).read_bytes())


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def identity_encoder(d: int, space: str = "pixel") -> EncoderModel:
    if d < 1:
        raise ValueError("identity encoder needs d >= 1")
    return EncoderModel(dims=(d, d, d), seed=0, space=space, kind="identity")


def init_encoder(dims, seed: int, space: str = "latent") -> EncoderModel:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every layer."""
    d, h, k = (int(x) for x in dims)
    if min(d, h, k) < 1:
        raise ValueError(f"encoder dims must all be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    lim1, lim2 = 1 / math.sqrt(d), 1 / math.sqrt(h)
    w1 = _f32(rng.uniform(-lim1, lim1, size=(h, d)))
    b1 = _f32(rng.uniform(-lim1, lim1, size=h))
    w2 = _f32(rng.uniform(-lim2, lim2, size=(k, h)))
    b2 = _f32(rng.uniform(-lim2, lim2, size=k))
    return EncoderModel(dims=(d, h, k), seed=int(seed), space=space, kind="mlp",
                        w1=w1, b1=b1, w2=w2, b2=b2)


def encode(model: EncoderModel, x) -> np.ndarray:
    """Map one vector (d,) or a batch (m, d) into embedding space."""
    x = np.asarray(x, dtype=np.float64)
    d = model.dims[0]
    if x.shape[-1] != d:
        raise ValueError(f"dimension mismatch: input has {x.shape[-1]}, encoder expects {d}")
    if model.kind == "identity":
        return x
    h = np.tanh(x @ model.w1.T + model.b1)
    return h @ model.w2.T + model.b2


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def _corr_and_grads(u: np.ndarray, v: np.ndarray):
    """Row-wise Pearson r of (m, k) embeddings plus dr/du, dr/dv; rows with zero
    variance come back with ``defined == False`` and zero gradients."""
    uc = u - u.mean(axis=1, keepdims=True)
    vc = v - v.mean(axis=1, keepdims=True)
    nu = np.sqrt((uc * uc).sum(axis=1))
    nv = np.sqrt((vc * vc).sum(axis=1))
    defined = ((nu > 0) & (nv > 0)
               & (u != u[:, :1]).any(axis=1) & (v != v[:, :1]).any(axis=1))
    nu_s = np.where(defined, nu, 1.0)[:, None]
    nv_s = np.where(defined, nv, 1.0)[:, None]
    uh, vh = uc / nu_s, vc / nv_s
    r = (uh * vh).sum(axis=1)
    dr_du = (vh - r[:, None] * uh) / nu_s
    dr_dv = (uh - r[:, None] * vh) / nv_s
    r = np.where(defined, r, 0.0)
    dr_du[~defined] = 0.0
    dr_dv[~defined] = 0.0
    return r, dr_du, dr_dv, defined


def batch_loss(model: EncoderModel, a, b, positive, margin: float,
               need_grad: bool = True):
    """Mean pair loss over a batch and its gradient w.r.t. (w1, b1, w2, b2).

    Returns ``(loss, grads, n_undefined)``. Pairs whose embedding has zero
    variance contribute zero loss and zero gradient.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    positive = np.atleast_1d(np.asarray(positive, dtype=bool))
    m = a.shape[0]
    x = np.concatenate([a, b])
    pre = x @ model.w1.T + model.b1
    hid = np.tanh(pre)
    emb = hid @ model.w2.T + model.b2
    r, dr_du, dr_dv, defined = _corr_and_grads(emb[:m], emb[m:])

    hinge = r - margin
    per_pair = np.where(positive, 1.0 - r, np.maximum(0.0, hinge))
    per_pair = np.where(defined, per_pair, 0.0)
    loss = float(per_pair.sum() / m)
    n_undef = int((~defined).sum())
    if not need_grad:
        return loss, None, n_undef

    dl_dr = np.where(positive, -1.0, np.where(hinge > 0, 1.0, 0.0))
    dl_dr = np.where(defined, dl_dr, 0.0) / m
    d_emb = np.concatenate([dl_dr[:, None] * dr_du, dl_dr[:, None] * dr_dv])
    g_w2 = d_emb.T @ hid
    g_b2 = d_emb.sum(axis=0)
    d_pre = (d_emb @ model.w2) * (1.0 - hid * hid)
    g_w1 = d_pre.T @ x
    g_b1 = d_pre.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2], n_undef


def pair_loss(model: EncoderModel, pair, margin: float = 0.2):
    """Loss and analytic gradient for one ``(a, b, label)`` pair.

    ``label`` is ``"positive"``/``"negative"`` or a bool (True = same patient).
    A zero-variance embedding yields loss 0, zero gradient and a logged warning.
    """
    a, b, label = pair
    positive = label == "positive" if isinstance(label, str) else bool(label)
    loss, grads, n_undef = batch_loss(model, a, b, [positive], margin)
    if n_undef:
        log.warning("zero-variance embedding: pair contributes no loss")
    return loss, grads


def correlation_loss(u, v, positive: bool, margin: float = 0.2) -> float:
    """The pair loss evaluated directly on two embeddings."""
    r, _, _, defined = _corr_and_grads(np.atleast_2d(np.asarray(u, dtype=np.float64)),
                                       np.atleast_2d(np.asarray(v, dtype=np.float64)))
    if not defined[0]:
        return 0.0
    return float(1.0 - r[0]) if positive else float(max(0.0, r[0] - margin))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    margin: float = 0.2
    negatives_per_positive: int = 4
    seed: int = 0
    hidden: int = 64
    embedding: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if not -1.0 < self.margin < 1.0:
            raise ValueError(f"margin must lie in (-1, 1), got {self.margin}")
        if self.negatives_per_positive < 0:
            raise ValueError("negatives_per_positive must be >= 0")
        if self.hidden < 1 or self.embedding < 2:
            raise ValueError("hidden >= 1 and embedding >= 2 required")


def sample_pairs(patient_of: np.ndarray, rng: np.random.Generator,
                 negatives_per_positive: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One epoch of index pairs: every same-patient pair once, each with
    ``negatives_per_positive`` random different-patient partners for its anchor."""
    by_patient: dict[int, list[int]] = {}
    for i, p in enumerate(patient_of):
        by_patient.setdefault(int(p), []).append(i)
    ia, ib, lab = [], [], []
    for p in sorted(by_patient):
        idx = by_patient[p]
        others = np.flatnonzero(patient_of != p)
        for x in range(len(idx)):
            for y in range(x + 1, len(idx)):
                a = idx[x]
                ia.append(a)
                ib.append(idx[y])
                lab.append(True)
                if negatives_per_positive and len(others):
                    picks = others[rng.integers(0, len(others), size=negatives_per_positive)]
                    for o in picks:
                        ia.append(a)
                        ib.append(int(o))
                        lab.append(False)
    return np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64), np.array(lab)


def train(manifest: DatasetManifest, plan: SplitPlan, config: TrainConfig,
          space: str | None = None) -> EncoderModel:
    """Train an encoder on the plan's ``ref_train`` images with minibatch SGD."""
    idx = [i for i, iid in enumerate(manifest.image_ids) if plan.roles[iid] == "ref_train"]
    pids = [manifest.patient_ids[i] for i in idx]
    codes = {p: c for c, p in enumerate(sorted(set(pids)))}
    if len(codes) < 2:
        raise TrainingError(f"training needs >= 2 patients, found {len(codes)}")
    x = np.asarray(manifest.vectors[idx], dtype=np.float64)
    patient_of = np.array([codes[p] for p in pids], dtype=np.int64)

    model = init_encoder((manifest.dimension, config.hidden, config.embedding),
                         config.seed, space=space or manifest.space)
    if config.epochs == 0:
        return model
    rng = np.random.default_rng([config.seed, 1])
    params = [p.copy() for p in model.params()]
    epoch_loss = math.nan
    undefined = 0
    for epoch in range(config.epochs):
        ia, ib, lab = sample_pairs(patient_of, rng, config.negatives_per_positive)
        if len(ia) == 0:
            raise TrainingError("no positive pairs: every training patient has one image")
        order = rng.permutation(len(ia))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo:lo + config.batch_size]
            current = model.with_params(params)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, n_undef = batch_loss(current, x[ia[sel]], x[ib[sel]], lab[sel],
                                                  config.margin)
            undefined += n_undef
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(epoch)
            for p, g in zip(params, grads):
                p -= config.learning_rate * g
            if not all(np.isfinite(p).all() for p in params):
                raise TrainingDiverged(epoch)
            total += loss * len(sel)
            count += len(sel)
        epoch_loss = total / count
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    if undefined:
        log.warning("%d pair evaluations had zero-variance embeddings", undefined)
    trained = model.with_params([_f32(p) for p in params])
    trained.final_loss = epoch_loss
    trained.undefined_pairs = undefined
    return trained
