"""Sequential diagnosis prediction on top of the concept encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import glorot
from .autodiff import Module, Tensor
from .cohort import Sample, Visit
from .encoder import EncoderGraphs, LinkoEncoder
from .errors import ConfigError, NumericalError, UnknownCodeError
from .metakg import UnifiedIndex
from .metrics import average_precision

logger = logging.getLogger(__name__)


def visit_multi_hot(visit: Visit, index: UnifiedIndex) -> np.ndarray:
    u = np.zeros(index.n_leaves)
    for c in visit:
        try:
            u[index.leaf_position(c)] = 1.0
        except KeyError:
            raise UnknownCodeError(c.code) from None
    return u


def visit_embed(z, visit: Visit, index: UnifiedIndex, normalize: bool = False) -> Tensor:
    """Sum of the member codes' rows of ``z`` (optionally divided by the visit size)."""
    if len(visit) == 0:
        logger.warning("empty visit embeds to the zero vector")
    u = visit_multi_hot(visit, index)
    if normalize and len(visit):
        u /= len(visit)
    z = ad.as_tensor(z)
    return ad.reshape(ad.matmul(ad.as_tensor(u[None, :]), z), (z.shape[1],))


@dataclass
class Batch:
    """Padded multi-hot visit sequences (B, T, N_leaf), a position mask and dx targets."""

    visits: np.ndarray
    mask: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[Sample], index: UnifiedIndex, normalize: bool = False) -> "Batch":
        t_max = max(s.t for s in samples)
        u = np.zeros((len(samples), t_max, index.n_leaves))
        mask = np.zeros((len(samples), t_max), dtype=bool)
        for b, s in enumerate(samples):
            for t, visit in enumerate(s.input_visits):
                u[b, t] = visit_multi_hot(visit, index)
                if normalize and len(visit):
                    u[b, t] /= len(visit)
                mask[b, t] = True
        return cls(u, mask, np.vstack([s.target for s in samples]).astype(np.float64))


class BaseModel(Module):
    """Learned positions, one pre-norm self-attention block with a feed-forward layer, masked mean-pool."""

    def __init__(self, d, max_len, rng, hidden=None):
        hidden = hidden or d
        self.d = d
        self.pos = ad.parameter(rng.normal(0.0, 0.02, size=(max_len, d)), "base.pos")
        self.Wq = ad.parameter(glorot(rng, (d, d)), "base.Wq")
        self.Wk = ad.parameter(glorot(rng, (d, d)), "base.Wk")
        self.Wv = ad.parameter(glorot(rng, (d, d)), "base.Wv")
        self.W1 = ad.parameter(glorot(rng, (d, hidden)), "base.W1")
        self.b1 = ad.parameter(np.zeros(hidden), "base.b1")
        self.W2 = ad.parameter(glorot(rng, (hidden, d)), "base.W2")
        self.b2 = ad.parameter(np.zeros(d), "base.b2")
        self.norm1 = (ad.parameter(np.ones(d), "base.norm1.g"), ad.parameter(np.zeros(d), "base.norm1.b"))
        self.norm2 = (ad.parameter(np.ones(d), "base.norm2.g"), ad.parameter(np.zeros(d), "base.norm2.b"))
        self.norm_out = (ad.parameter(np.ones(d), "base.norm_out.g"), ad.parameter(np.zeros(d), "base.norm_out.b"))

    def forward(self, v: Tensor, mask: np.ndarray) -> Tensor:
        """``v``: (B, T, d) visit vectors; ``mask``: (B, T) valid positions. Returns (B, d)."""
        b, t, d = v.shape
        if t > self.pos.shape[0]:
            raise ConfigError(f"sequence of {t} visits exceeds max_len={self.pos.shape[0]}")
        mask = np.asarray(mask, dtype=bool)
        if not mask[:, 0].all():
            raise ValueError("every sequence needs at least one visit")
        x = ad.add(v, ad.index_select(self.pos, slice(0, t)))
        y = ad.layer_norm(x, *self.norm1)
        q = ad.matmul(y, self.Wq)
        k = ad.matmul(y, self.Wk)
        val = ad.matmul(y, self.Wv)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
        attn = ad.masked_softmax(scores, mask[:, None, :], axis=-1)
        x = ad.add(x, ad.matmul(attn, val))
        y = ad.layer_norm(x, *self.norm2)
        ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(y, self.W1), self.b1)), self.W2), self.b2)
        x = ad.add(x, ff)
        w = mask / mask.sum(axis=1, keepdims=True)
        return ad.layer_norm(ad.tsum(ad.mul(x, w[:, :, None]), axis=1), *self.norm_out)

    __call__ = forward


class PredictionHead(Module):
    def __init__(self, d, n_labels, rng):
        self.W = ad.parameter(glorot(rng, (n_labels, d)), "head.W")
        self.b = ad.parameter(np.zeros(n_labels), "head.b")

    def forward(self, h: Tensor) -> Tensor:
        """Logits; the predicted probabilities are their sigmoid."""
        return ad.add(ad.matmul(h, ad.transpose(self.W)), self.b)

    __call__ = forward


def loss(logits: Tensor, targets) -> Tensor:
    return ad.bce_with_logits(logits, targets)


class LinkoPredictor(Module):
    """Encoder, visit aggregation, base sequence model and the diagnosis head."""

    def __init__(self, encoder: LinkoEncoder, graphs: EncoderGraphs, index: UnifiedIndex, max_len, rng,
                 normalize_visits=False):
        self.encoder = encoder
        self.graphs = graphs
        self.index = index
        self.normalize_visits = normalize_visits
        d = encoder.cfg.d
        self.base = BaseModel(d, max_len, rng)
        self.head = PredictionHead(d, index.ontologies["dx"].size(index.depth), rng)

    def logits(self, batch: Batch, rng=None, z: Tensor | None = None) -> Tensor:
        z = self.encoder(self.graphs, rng) if z is None else z
        v = ad.matmul(ad.as_tensor(batch.visits), z)
        return self.head(self.base(v, batch.mask))

    def predict(self, samples: list[Sample], batch_size=256) -> np.ndarray:
        """Sigmoid probabilities for ``samples`` in eval mode, Z computed once."""
        was_training = self.training
        self.eval()
        out = []
        with ad.no_grad():
            z = self.encoder(self.graphs, None)
            for start in range(0, len(samples), batch_size):
                batch = Batch.from_samples(samples[start:start + batch_size], self.index, self.normalize_visits)
                out.append(ad.sigmoid(self.logits(batch, z=z)).data)
        self.train(was_training)
        return np.vstack(out)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    weight_decay: float = 0.0
    normalize_visits: bool = False
    max_len: int = 16


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int  # 1-based epoch with the best validation AUPRC
    best_val_auprc: float
    epoch_losses: list = field(default_factory=list)
    val_auprc: list = field(default_factory=list)
    initial_loss: float = float("nan")  # training loss before any update
    diverged: bool = False


def _mean_loss(model: LinkoPredictor, samples, batch_size) -> float:
    model.eval()
    total = 0.0
    with ad.no_grad():
        z = model.encoder(model.graphs, None)
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = Batch.from_samples(chunk, model.index, model.normalize_visits)
            total += loss(model.logits(batch, z=z), batch.targets).item() * len(chunk)
    model.train()
    return total / len(samples)


def train_model(model: LinkoPredictor, train: list[Sample], val: list[Sample], cfg: TrainConfig,
                shuffle_rng, dropout_rng) -> TrainResult:
    """Adam with early stopping on validation AUPRC. The model is left at its last state; see ``best_state``."""
    if not train:
        raise ConfigError("empty training set")
    if not val:
        raise ConfigError("empty validation set")
    params = model.parameters()
    opt = ad.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    val_targets = np.vstack([s.target for s in val])
    result = TrainResult(model.state_dict(), 0, -1.0, initial_loss=_mean_loss(model, train, cfg.batch_size))
    stale = 0
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        running, seen = 0.0, 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train[i] for i in order[start:start + cfg.batch_size]]
                batch = Batch.from_samples(chunk, model.index, model.normalize_visits)
                ad.zero_grad(params)
                value = loss(model.logits(batch, dropout_rng), batch.targets)
                grads = ad.backward(value)
                if not opt.step([grads.get(p) for p in params]):
                    raise NumericalError("non-finite gradient")
                running += value.item() * len(chunk)
                seen += len(chunk)
        except NumericalError as exc:
            logger.error("training diverged in epoch %d (%s); keeping epoch %d", epoch, exc, result.best_epoch)
            result.diverged = True
            break
        result.epoch_losses.append(running / seen)
        score = average_precision(model.predict(val), val_targets)
        result.val_auprc.append(score)
        logger.info("epoch %d loss %.5f val auprc %.5f", epoch, result.epoch_losses[-1], score)
        if score > result.best_val_auprc:
            result.best_val_auprc = score
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return result
