"""Pose-invariant ranking losses and the large-margin softmax category term.

All losses take ``Tensor`` (or array) embeddings and return scalar tensors so
gradients flow back into the encoder. Confuser selection is a hard argmin
recomputed on every call and treated as a constant index in the backward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import DualEmbeddings


@dataclass(frozen=True)
class Margins:
    alpha: float = 0.25
    beta: float = 1.00
    theta: float = 0.25
    gamma: int = 4
    lambda_blend: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "theta", "lambda_blend"):
            if getattr(self, name) < 0:
                raise ValueError(f"margin {name} must be >= 0")
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ValueError(f"gamma must be an integer >= 1, got {self.gamma}")
        object.__setattr__(self, "gamma", int(self.gamma))

    def describe(self) -> str:
        return f"α={self.alpha:.2f} β={self.beta:.2f} θ={self.theta:.2f} γ={self.gamma:.2f}"


@dataclass
class ConfuserPair:
    o_a_con: Tensor
    o_b_con: Tensor
    distance: float
    indices: tuple[int, int]


def _cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def find_confusers(E_a, E_b) -> ConfuserPair:
    """Closest cross pair between two single-view embedding sets.

    Exhaustive over all |E_a| x |E_b| pairs; ties go to the lexicographically
    smallest (index_a, index_b).
    """
    E_a, E_b = ad.as_tensor(E_a), ad.as_tensor(E_b)
    if E_a.ndim != 2 or E_b.ndim != 2 or E_a.shape[0] == 0 or E_b.shape[0] == 0:
        raise ValueError("find_confusers needs two non-empty (n, d) embedding sets")
    if E_a.shape[1] != E_b.shape[1]:
        raise ValueError(f"embedding dims differ: {E_a.shape[1]} vs {E_b.shape[1]}")
    dists = _cross_distances(E_a.data, E_b.data)
    # np.argmin returns the first minimum in row-major order
    i, j = np.unravel_index(int(np.argmin(dists)), dists.shape)
    return ConfuserPair(E_a[int(i)], E_b[int(j)], float(dists[i, j]), (int(i), int(j)))


def clustering_loss(o_mv, o_con, alpha: float) -> Tensor:
    """[d(o_mv, o_con) - alpha]_+"""
    return ad.hinge(ad.distance(o_mv, o_con) - alpha)


def separation_loss(con_a, con_b, mv_a, mv_b, beta: float) -> Tensor:
    """[beta - d(con_a, con_b)]_+ + [beta - d(mv_a, mv_b)]_+"""
    return ad.hinge(beta - ad.distance(con_a, con_b)) + ad.hinge(beta - ad.distance(mv_a, mv_b))


@dataclass
class ObjectLossTerms:
    intra_a: Tensor
    intra_b: Tensor
    inter: Tensor
    confusers: ConfuserPair

    @property
    def total(self) -> Tensor:
        return self.intra_a + self.intra_b + self.inter


def piobj_terms(emb_a: DualEmbeddings, emb_b: DualEmbeddings, margins: Margins) -> ObjectLossTerms:
    con = find_confusers(emb_a.obj_single, emb_b.obj_single)
    return ObjectLossTerms(
        intra_a=clustering_loss(emb_a.obj_mv, con.o_a_con, margins.alpha),
        intra_b=clustering_loss(emb_b.obj_mv, con.o_b_con, margins.alpha),
        inter=separation_loss(con.o_a_con, con.o_b_con, emb_a.obj_mv, emb_b.obj_mv, margins.beta),
        confusers=con,
    )


def piobj_loss(emb_a: DualEmbeddings, emb_b: DualEmbeddings, margins: Margins) -> Tensor:
    """Object-space loss for a same-category pair: both clustering terms plus
    the separation term, all anchored on the pair's confusers."""
    return piobj_terms(emb_a, emb_b, margins).total


def mean_single_to_multi(cat_single, cat_mv) -> Tensor:
    """Mean distance between each single-view embedding and the multi-view one."""
    return ad.mean(ad.distance(cat_single, cat_mv), axis=-1)


def picat_loss(emb_a: DualEmbeddings, emb_b: DualEmbeddings, theta: float) -> Tensor:
    d_sm_a = mean_single_to_multi(emb_a.cat_single, emb_a.cat_mv)
    d_sm_b = mean_single_to_multi(emb_b.cat_single, emb_b.cat_mv)
    return (
        ad.hinge(d_sm_a - theta)
        + ad.hinge(d_sm_b - theta)
        + ad.hinge(ad.distance(emb_a.cat_mv, emb_b.cat_mv) - theta)
    )


# ---------------------------------------------------------------------------
# large-margin softmax

def chebyshev_cos_multiple(c: Tensor, m: int) -> Tensor:
    """cos(m * t) as a polynomial in c = cos(t) (Chebyshev T_m), which keeps
    the gradient finite at c = +-1 where arccos is not differentiable."""
    prev, cur = ad.as_tensor(np.ones_like(c.data)), c
    if m == 0:
        return prev
    for _ in range(m - 1):
        prev, cur = cur, 2.0 * (c * cur) - prev
    return cur


def margin_psi(cos_theta: Tensor, gamma: int) -> Tensor:
    """psi(t) = (-1)^k cos(gamma t) - 2k for t in [k pi/gamma, (k+1) pi/gamma].

    k is read off the current angle and held constant for the backward pass.
    """
    c = np.clip(cos_theta.data, -1.0, 1.0)
    theta = ad.arccos(c).data
    k = np.minimum(np.floor(gamma * theta / math.pi), gamma - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * chebyshev_cos_multiple(cos_theta, gamma) - 2.0 * k


def lsoftmax_cat_loss(c_k, labels, classifier, gamma: int, lambda_blend: float = 0.0) -> Tensor:
    """Mean L-Softmax cross-entropy over the rows of ``c_k``.

    ``c_k`` is one embedding (d,) or a stack (n, d); ``classifier`` is the
    d x C weight matrix without bias. The target logit ||W_y|| ||x|| cos(t)
    becomes ||W_y|| ||x|| (lambda cos(t) + psi(t)) / (1 + lambda).
    """
    x = ad.as_tensor(c_k)
    W = ad.as_tensor(classifier)
    if x.ndim == 1:
        x = ad.reshape(x, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, num_classes = x.shape[0], W.shape[1]
    if x.shape[1] != W.shape[0]:
        raise ValueError(f"embedding dim {x.shape[1]} != classifier rows {W.shape[0]}")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must be in [0, {num_classes})")
    if int(gamma) != gamma or gamma < 1:
        raise ValueError(f"gamma must be an integer >= 1, got {gamma}")

    rows = np.arange(n)
    x_norm = ad.norm(x, axis=1)
    w_norm = ad.norm(W, axis=0)[labels]
    if np.any(x_norm.data == 0) or np.any(w_norm.data == 0):
        raise ValueError("zero-norm embedding or weight column: angle undefined")
    logits = x @ W
    target = logits[rows, labels]
    scale = x_norm * w_norm
    cos_t = target / scale
    blended = (lambda_blend * cos_t + margin_psi(cos_t, int(gamma))) / (1.0 + lambda_blend)
    new_target = scale * blended
    onehot = np.zeros((n, num_classes))
    onehot[rows, labels] = 1.0
    adjusted = logits + onehot * ad.reshape(new_target - target, (n, 1))
    return ad.mean(ad.logsumexp(adjusted, axis=1) - new_target)


def softmax_cross_entropy(c_k, labels, classifier) -> Tensor:
    """Plain softmax cross-entropy, averaged over rows."""
    x = ad.as_tensor(c_k)
    if x.ndim == 1:
        x = ad.reshape(x, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logits = x @ ad.as_tensor(classifier)
    return ad.mean(ad.logsumexp(logits, axis=1) - logits[np.arange(x.shape[0]), labels])


# ---------------------------------------------------------------------------
# total objective

@dataclass
class LossToggles:
    use_cat: bool = True
    use_picat: bool = True
    use_piobj: bool = True
    use_inter: bool = True  # separation half of the object loss


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


TERM_NAMES = ("cat", "picat", "intra", "inter")


def total_loss(pairs, classifier, margins: Margins, toggles: LossToggles | None = None,
               lambda_blend: float | None = None) -> LossBreakdown:
    """Mean over same-category pairs of L_cat^a + L_cat^b + L_picat + L_piobj.

    ``pairs`` is a sequence of (DualEmbeddings, label, DualEmbeddings, label).
    Disabled terms are neither computed nor differentiated and log as 0.
    ``terms`` holds per-pair means of each component.
    """
    toggles = toggles or LossToggles()
    lam = margins.lambda_blend if lambda_blend is None else lambda_blend
    pairs = list(pairs)
    if not pairs:
        raise ValueError("total_loss needs at least one pair")
    parts: list[Tensor] = []
    sums = dict.fromkeys(TERM_NAMES, 0.0)
    for emb_a, label_a, emb_b, label_b in pairs:
        if toggles.use_cat:
            for emb, label in ((emb_a, label_a), (emb_b, label_b)):
                v = emb.cat_single.shape[0]
                term = lsoftmax_cat_loss(emb.cat_single, np.full(v, label), classifier, margins.gamma, lam)
                parts.append(term)
                sums["cat"] += term.item()
        if toggles.use_picat:
            term = picat_loss(emb_a, emb_b, margins.theta)
            parts.append(term)
            sums["picat"] += term.item()
        if toggles.use_piobj:
            obj = piobj_terms(emb_a, emb_b, margins)
            intra = obj.intra_a + obj.intra_b
            parts.append(intra)
            sums["intra"] += intra.item()
            if toggles.use_inter:
                parts.append(obj.inter)
                sums["inter"] += obj.inter.item()
    if not parts:
        raise ValueError("every loss term is disabled")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    n = len(pairs)
    return LossBreakdown(ad.scale(total, 1.0 / n), {k: v / n for k, v in sums.items()})
