"""Joint training of the encoder and category classifier."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset, default_num_views, sample_pairs
from .encoder import (
    EncoderConfig, EncoderParams, checkpoint_record, decode_array, dumps_checkpoint, encode,
    encode_array, init_encoder, split_batch,
)
from .evaluation import Diagnostics, track_distances
from .io import atomic_write_text
from .losses import LossToggles, Margins, total_loss

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, epoch: int, term: str):
        super().__init__(f"non-finite loss in epoch {epoch}, term {term!r}")
        self.epoch = epoch
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    pairs_per_epoch: int = 256
    batch_pairs: int = 8
    views: int | None = None  # V per object; default min(4, available)
    learning_rate: float = 1e-5
    lr_halving_period: int = 5
    margins: Margins = field(default_factory=Margins)
    dropout_rate: float = 0.25
    seed: int = 0
    backbone_widths: tuple[int, ...] = (64, 64)
    d_obj: int = 64
    d_cat: int = 64
    dual_space: bool = True
    use_cat: bool = True
    use_picat: bool = True
    use_piobj: bool = True
    use_inter: bool = True
    lambda_start: float = 10.0
    lambda_decay: float = 0.99
    lambda_min: float = 0.0
    checkpoint_every: int = 5
    backbone_lr_scale: float = 1.0
    head_init_gain: float = 0.1  # unit-gain heads collapse the backbone early in training

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        positive = ("epochs", "pairs_per_epoch", "batch_pairs", "lr_halving_period", "d_obj", "d_cat", "checkpoint_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.views is not None and self.views < 1:
            raise ValueError("views must be >= 1")
        if not self.backbone_lr_scale >= 0 or not self.head_init_gain > 0:
            raise ValueError("backbone_lr_scale must be >= 0 and head_init_gain > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0.0 <= self.lambda_decay <= 1.0 or self.lambda_start < 0 or self.lambda_min < 0:
            raise ValueError("lambda_start/lambda_min must be >= 0 and lambda_decay in [0, 1]")
        if not (self.use_cat or self.use_picat or self.use_piobj):
            raise ValueError("at least one loss term must be enabled")

    @property
    def toggles(self) -> LossToggles:
        return LossToggles(self.use_cat, self.use_picat, self.use_piobj, self.use_inter)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.pairs_per_epoch // self.batch_pairs)

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim, backbone_widths=self.backbone_widths, d_obj=self.d_obj,
            d_cat=self.d_cat if self.dual_space else self.d_obj, dropout_rate=self.dropout_rate,
            dual_space=self.dual_space,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone_widths"] = list(self.backbone_widths)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("margins"), dict):
            d["margins"] = Margins(**d["margins"])
        if "backbone_widths" in d:
            d["backbone_widths"] = tuple(d["backbone_widths"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule: halve every ``lr_halving_period`` epochs (1-based)."""
    return config.learning_rate * 0.5 ** ((epoch - 1) // config.lr_halving_period)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             lr_scale: dict[str, float] | None = None) -> None:
        """In-place update of every array in ``params`` (sorted name order)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step_lr = lr * (lr_scale or {}).get(name, 1.0)
            params[name] -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: encode_array(v) for k, v in sorted(self.m.items())},
            "v": {k: encode_array(v) for k, v in sorted(self.v.items())},
        }

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls()
        opt.t = int(state["t"])
        opt.m = {k: decode_array(v) for k, v in state["m"].items()}
        opt.v = {k: decode_array(v) for k, v in state["v"].items()}
        return opt


@dataclass
class TrainLogEntry:
    epoch: int
    loss: float
    loss_cat: float
    loss_picat: float
    loss_intra: float
    loss_inter: float
    lr: float
    lambda_blend: float
    d_max_intra: float
    d_min_inter: float | None
    rho: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    params: EncoderParams
    classifier: np.ndarray
    log: list[TrainLogEntry]
    optimizer: Adam
    categories: list[str]
    config: TrainConfig
    lambda_blend: float = 0.0

    def checkpoint_record(self, epoch: int | None = None) -> dict:
        extra = {
            "train_config": self.config.to_dict(),
            "optimizer": self.optimizer.state(),
            "lambda_blend": self.lambda_blend,
            "epoch": epoch if epoch is not None else (self.log[-1].epoch if self.log else 0),
        }
        return checkpoint_record(self.params, self.classifier, self.categories, extra)

    def checkpoint_text(self, epoch: int | None = None) -> str:
        return dumps_checkpoint(self.checkpoint_record(epoch))


def _stack_batch(dataset: Dataset, batch) -> tuple[np.ndarray, list[int]]:
    views, labels = [], []
    for pair in batch.pairs:
        for obj, idx in ((pair.a, pair.views_a), (pair.b, pair.views_b)):
            views.append(obj.views[idx])
            labels.append(dataset.category_index(obj.category_id))
    return np.stack(views), labels


def train(config: TrainConfig, dataset: Dataset, out_dir: Path | None = None,
          on_epoch: Callable[[TrainLogEntry], None] | None = None) -> TrainResult:
    """Adam over all encoder and classifier weights with a step schedule.

    Each step samples ``batch_pairs`` same-category pairs, accumulates the
    loss over the batch and applies one update. After every epoch, distance
    diagnostics are computed on the train split. With ``out_dir``, the log
    (JSON lines) and checkpoints are written there.
    """
    train_objects = dataset.split("train")
    if not train_objects:
        raise ValueError("train split is empty")
    V = config.views or default_num_views(train_objects)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, sample_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)

    params = init_encoder(config.encoder_config(dataset.input_dim), init_rng, head_gain=config.head_init_gain)
    lr_scale = {k: config.backbone_lr_scale for k in params.tensors if k.startswith("backbone.")}
    d_cat = params.config.d_cat
    classifier = init_rng.normal(0.0, 1.0 / math.sqrt(d_cat), size=(d_cat, len(dataset.categories)))
    optimizer = Adam()
    lam = config.lambda_start
    result = TrainResult(params, classifier, [], optimizer, dataset.category_ids, config, lam)
    log_lines: list[str] = []

    for epoch in range(1, config.epochs + 1):
        lr = learning_rate_at(config, epoch)
        totals = {"loss": 0.0, "cat": 0.0, "picat": 0.0, "intra": 0.0, "inter": 0.0}
        for _ in range(config.steps_per_epoch):
            batch = sample_pairs(dataset, V, config.batch_pairs, sample_rng)
            views, labels = _stack_batch(dataset, batch)
            leaves = params.as_leaves()
            W = ad.Tensor(classifier, requires_grad=True)
            per_object = split_batch(encode(leaves, views, "train", dropout_rng))
            pairs = [
                (per_object[2 * i], labels[2 * i], per_object[2 * i + 1], labels[2 * i + 1])
                for i in range(len(batch))
            ]
            breakdown = total_loss(pairs, W, config.margins, config.toggles, lambda_blend=lam)
            for term, value in breakdown.terms.items():
                if not math.isfinite(value):
                    raise NumericalError(epoch, term)
            if not math.isfinite(breakdown.total.item()):
                raise NumericalError(epoch, "total")
            ad.backward(breakdown.total)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.tensors.items()}
            grads["__classifier__"] = W.grad if W.grad is not None else np.zeros_like(classifier)
            state = dict(params.tensors)
            state["__classifier__"] = classifier
            optimizer.step(state, grads, lr, lr_scale)
            lam = max(lam * config.lambda_decay, config.lambda_min)
            totals["loss"] += breakdown.total.item()
            for term, value in breakdown.terms.items():
                totals[term] += value

        n = config.steps_per_epoch
        diag: Diagnostics = track_distances(params, train_objects)
        entry = TrainLogEntry(
            epoch=epoch, loss=totals["loss"] / n, loss_cat=totals["cat"] / n,
            loss_picat=totals["picat"] / n, loss_intra=totals["intra"] / n, loss_inter=totals["inter"] / n,
            lr=lr, lambda_blend=lam, d_max_intra=diag.d_max_intra, d_min_inter=diag.d_min_inter, rho=diag.rho,
        )
        result.log.append(entry)
        result.lambda_blend = lam
        log.info("epoch %d loss %.5f lr %.3g rho %s", epoch, entry.loss, lr, entry.rho)
        if on_epoch is not None:
            on_epoch(entry)
        if out_dir is not None:
            log_lines.append(entry.to_json())
            atomic_write_text(Path(out_dir) / "train_log.jsonl", "\n".join(log_lines) + "\n")
            if epoch % config.checkpoint_every == 0:
                atomic_write_text(Path(out_dir) / f"checkpoint_epoch{epoch:03d}.json", result.checkpoint_text(epoch))
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "checkpoint.json", result.checkpoint_text())
    return result


