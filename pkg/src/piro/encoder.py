"""Pose-invariant attention network: shared backbone, dual heads, dual
single-head self-attention layers and mean pooling over views."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "piro-checkpoint"
CHECKPOINT_VERSION = 1

SPACES = ("obj", "cat")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    backbone_widths: tuple[int, ...] = (64, 64)
    d_obj: int = 64
    d_cat: int = 64
    dropout_rate: float = 0.25
    dual_space: bool = True
    backbone: str = "mlp"

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        if self.input_dim < 1 or any(w < 1 for w in self.backbone_widths):
            raise ValueError("input_dim and backbone widths must be positive")
        if self.d_obj < 1 or self.d_cat < 1:
            raise ValueError("embedding dims must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.dual_space and self.d_obj != self.d_cat:
            raise ValueError("single-space encoder needs d_obj == d_cat")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")

    @property
    def feature_dim(self) -> int:
        return self.backbone_widths[-1] if self.backbone_widths else self.input_dim


@dataclass
class EncoderParams:
    """Named weights plus the config that fixes their shapes.

    Values are numpy arrays when stored, or ``Tensor`` leaves while a
    training step is being differentiated (see ``as_leaves``).
    """

    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def head_name(self, space: str) -> str:
        return f"head_{space}" if self.config.dual_space else "head"

    def attn_name(self, space: str) -> str:
        return f"attn_{space}" if self.config.dual_space else "attn"

    def get(self, name: str) -> Tensor:
        return ad.as_tensor(self.tensors[name])

    def as_leaves(self) -> "EncoderParams":
        return EncoderParams(self.config, ad.leaves(self.arrays()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in self.tensors.items()}


@dataclass
class MultiViewSet:
    object_id: str
    category_id: str
    views: np.ndarray

    def __post_init__(self):
        if not self.object_id or not self.category_id:
            raise ValueError("labels must be non-empty")
        self.views = _stack_views(self.views)
        if self.views.shape[0] < 1:
            raise ValueError(f"object {self.object_id!r} needs at least one view")


@dataclass
class DualEmbeddings:
    """Single-view (V, d) and multi-view (d,) embeddings in both spaces."""

    obj_single: Tensor
    cat_single: Tensor
    obj_mv: Tensor
    cat_mv: Tensor

    @property
    def num_views(self) -> int:
        return self.obj_single.shape[-2]


# ---------------------------------------------------------------------------
# backbones

def _mlp_param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    fan_in = config.input_dim
    for i, width in enumerate(config.backbone_widths):
        shapes[f"backbone.{i}.weight"] = (fan_in, width)
        shapes[f"backbone.{i}.bias"] = (width,)
        fan_in = width
    return shapes


def _mlp_forward(params: EncoderParams, x: Tensor) -> Tensor:
    h = x
    for i in range(len(params.config.backbone_widths)):
        h = ad.relu(h @ params.get(f"backbone.{i}.weight") + params.get(f"backbone.{i}.bias"))
    return h


# name -> (parameter shapes, forward); a convolutional variant slots in here
BACKBONES: dict[str, tuple[Callable, Callable]] = {
    "mlp": (_mlp_param_shapes, _mlp_forward),
}


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shape_fn, _ = BACKBONES[config.backbone]
    shapes = dict(shape_fn(config))
    f = config.feature_dim
    spaces = [("obj", config.d_obj), ("cat", config.d_cat)] if config.dual_space else [("", config.d_obj)]
    for space, d in spaces:
        head = f"head_{space}" if space else "head"
        attn = f"attn_{space}" if space else "attn"
        shapes[f"{head}.weight"] = (f, d)
        shapes[f"{head}.bias"] = (d,)
        for proj in ("query", "key", "value", "out"):
            shapes[f"{attn}.{proj}"] = (d, d)
    return shapes


def init_encoder(config: EncoderConfig, rng: np.random.Generator, head_gain: float = 1.0) -> EncoderParams:
    """He-normal backbone, zero biases, N(0, 1/fan_in) heads and attention;
    ``head_gain`` rescales the head weights (and so the initial embedding scale)."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("backbone"):
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
        else:
            gain = head_gain if name.startswith("head") else 1.0
            tensors[name] = rng.normal(0.0, gain * math.sqrt(1.0 / shape[0]), size=shape)
    return EncoderParams(config, tensors)


def identity_encoder(dim: int, depth: int = 1, dual_space: bool = True) -> EncoderParams:
    """Backbone, heads and attention projections all identity, zero biases.

    With non-negative inputs every stage passes views through unchanged, and
    multi-view embeddings are attention-weighted averages of the views.
    """
    config = EncoderConfig(
        input_dim=dim, backbone_widths=(dim,) * depth, d_obj=dim, d_cat=dim,
        dropout_rate=0.0, dual_space=dual_space,
    )
    tensors = {}
    for name, shape in param_shapes(config).items():
        tensors[name] = np.zeros(shape) if name.endswith(".bias") else np.eye(shape[0])
    return EncoderParams(config, tensors)


# ---------------------------------------------------------------------------
# forward pass

def _stack_views(views) -> np.ndarray:
    if isinstance(views, np.ndarray) and views.ndim == 2:
        return views.astype(np.float64, copy=False)
    views = [np.asarray(v, dtype=np.float64) for v in views]
    if not views:
        raise ValueError("a multi-view set needs at least one view")
    dim = views[0].shape
    for i, v in enumerate(views):
        if v.ndim != 1 or v.shape != dim:
            raise ValueError(f"view {i} has shape {v.shape}, expected {dim}")
    return np.stack(views)


def _check_views(params: EncoderParams, views) -> Tensor:
    if isinstance(views, MultiViewSet):
        views = views.views
    if isinstance(views, Tensor):
        x = views
    elif isinstance(views, np.ndarray) and views.ndim >= 2:
        x = Tensor(views)
    else:
        x = Tensor(_stack_views(views))
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError(f"expected (V, D) or (N, V, D) views, got shape {x.shape}")
    d_in = params.config.input_dim
    if x.shape[-1] != d_in:
        raise ValueError(f"views have dimension {x.shape[-1]}, backbone expects {d_in}")
    return x


def embed_single_views(params: EncoderParams, views, mode: str = "eval", rng=None) -> tuple[Tensor, Tensor]:
    """Per-view object and category embeddings, F_obj(B(x)) and F_cat(B(x)).

    ``views`` is a ``MultiViewSet``, a (V, D) array, a list of D-vectors, or a
    batch (N, V, D). The backbone is shared by every view and both heads.
    """
    x = _check_views(params, views)
    _, backbone = BACKBONES[params.config.backbone]
    features = backbone(params, x)
    out = []
    for space in SPACES:
        head = params.head_name(space)
        out.append(features @ params.get(f"{head}.weight") + params.get(f"{head}.bias"))
    if not params.config.dual_space:
        return out[0], out[0]
    return out[0], out[1]


def _attention(params: EncoderParams, space: str, emb: Tensor, train: bool, rng) -> tuple[Tensor, Tensor]:
    attn = params.attn_name(space)
    q = emb @ params.get(f"{attn}.query")
    k = emb @ params.get(f"{attn}.key")
    v = emb @ params.get(f"{attn}.value")
    scores = ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(emb.shape[-1]))
    weights = ad.softmax(scores, axis=-1)
    dropped = ad.dropout(weights, params.config.dropout_rate, rng, train)
    return (dropped @ v) @ params.get(f"{attn}.out"), weights


def aggregate_multi_view(params: EncoderParams, obj_single: Tensor, cat_single: Tensor,
                         mode: str = "eval", rng=None) -> tuple[Tensor, Tensor]:
    """Self-attention over the view set followed by a mean over views."""
    train = _is_train(mode)
    results = []
    for space, emb in zip(SPACES, (obj_single, cat_single)):
        emb = ad.as_tensor(emb)
        if emb.ndim < 2 or emb.shape[-2] == 0:
            raise ValueError(f"empty {space} embedding set")
        if space == "cat" and not params.config.dual_space and cat_single is obj_single:
            results.append(results[0])
            continue
        attended, _ = _attention(params, space, emb, train, rng)
        results.append(ad.mean(attended, axis=-2))
    return results[0], results[1]


def aggregate_space(params: EncoderParams, emb, space: str, mode: str = "eval", rng=None) -> Tensor:
    """Multi-view embedding for one space only."""
    emb = ad.as_tensor(emb)
    if emb.ndim < 2 or emb.shape[-2] == 0:
        raise ValueError(f"empty {space} embedding set")
    attended, _ = _attention(params, space, emb, _is_train(mode), rng)
    return ad.mean(attended, axis=-2)


def attention_weights(params: EncoderParams, single_embeddings: Mapping[str, np.ndarray] | tuple) -> dict[str, np.ndarray]:
    """Eval-mode V x V attention matrices, one per space; row i is view i's
    softmax distribution over all views."""
    if not isinstance(single_embeddings, Mapping):
        single_embeddings = dict(zip(SPACES, single_embeddings))
    out = {}
    for space in SPACES:
        emb = ad.as_tensor(single_embeddings[space])
        if emb.ndim < 2 or emb.shape[-2] == 0:
            raise ValueError(f"empty {space} embedding set")
        _, weights = _attention(params, space, emb, False, None)
        out[space] = weights.data
    return out


def encode(params: EncoderParams, views, mode: str = "eval", rng=None) -> DualEmbeddings:
    obj, cat = embed_single_views(params, views, mode, rng)
    if not params.config.dual_space:
        obj_mv, _ = aggregate_multi_view(params, obj, obj, mode, rng)
        return DualEmbeddings(obj, obj, obj_mv, obj_mv)
    obj_mv, cat_mv = aggregate_multi_view(params, obj, cat, mode, rng)
    return DualEmbeddings(obj, cat, obj_mv, cat_mv)


def split_batch(emb: DualEmbeddings) -> list[DualEmbeddings]:
    """Slice batched (N, V, d) embeddings into per-object records."""
    n = emb.obj_single.shape[0]
    shared = emb.cat_single is emb.obj_single
    out = []
    for i in range(n):
        obj, obj_mv = emb.obj_single[i], emb.obj_mv[i]
        if shared:
            out.append(DualEmbeddings(obj, obj, obj_mv, obj_mv))
        else:
            out.append(DualEmbeddings(obj, emb.cat_single[i], obj_mv, emb.cat_mv[i]))
    return out


def _is_train(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


# ---------------------------------------------------------------------------
# checkpoints

def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def decode_array(record: Mapping) -> np.ndarray:
    shape = tuple(record["shape"])
    data = np.array(record["data"], dtype=np.float64)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"array record has {data.size} values for shape {shape}")
    return data.reshape(shape)


def checkpoint_record(params: EncoderParams, classifier: np.ndarray | None = None,
                      categories: list[str] | None = None, extra: Mapping | None = None) -> dict:
    config = asdict(params.config)
    config["backbone_widths"] = list(config["backbone_widths"])
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder": {
            "config": config,
            "tensors": {k: encode_array(v) for k, v in sorted(params.arrays().items())},
        },
    }
    if classifier is not None:
        record["classifier"] = encode_array(classifier)
    if categories is not None:
        record["categories"] = list(categories)
    if extra:
        record.update(extra)
    return record


def dumps_checkpoint(record: Mapping) -> str:
    # repr-based float formatting in json round-trips float64 exactly
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(path, params: EncoderParams, classifier=None, categories=None, extra=None) -> None:
    from .io import atomic_write_text

    atomic_write_text(Path(path), dumps_checkpoint(checkpoint_record(params, classifier, categories, extra)))


def load_checkpoint(path) -> tuple[EncoderParams, np.ndarray | None, dict]:
    """Return (encoder params, classifier weight or None, full record)."""
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record.get('version')}")
    cfg = dict(record["encoder"]["config"])
    cfg["backbone_widths"] = tuple(cfg["backbone_widths"])
    config = EncoderConfig(**cfg)
    tensors = {k: decode_array(v) for k, v in record["encoder"]["tensors"].items()}
    expected = param_shapes(config)
    if set(tensors) != set(expected):
        raise ValueError(f"{path}: tensor names do not match the encoder config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
    classifier = decode_array(record["classifier"]) if "classifier" in record else None
    return EncoderParams(config, tensors), classifier, record
