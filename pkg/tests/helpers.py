"""Shared builders for tests: small random encoders, pair instances and the
finite-difference check of a loss through the whole encoder."""
import numpy as np

from piro import autodiff as ad
from piro.encoder import EncoderConfig, encode, init_encoder
from piro.losses import Margins, lsoftmax_cat_loss, picat_loss, piobj_loss, total_loss

from oracles import central_difference, relative_error

LOSSES = ("piobj", "picat", "cat", "total")


def random_instance(seed: int, dim: int = 4, V: int = 2, d: int = 3, C: int = 3, dual: bool = True):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(input_dim=dim, backbone_widths=(5,), d_obj=d, d_cat=d, dropout_rate=0.0, dual_space=dual)
    params = init_encoder(cfg, rng, head_gain=1.0)
    # move biases off zero so their gradients are exercised
    for k in params.tensors:
        if k.endswith(".bias"):
            params.tensors[k] = rng.normal(scale=0.3, size=params.tensors[k].shape)
    views = rng.normal(size=(2, V, dim))
    W = rng.normal(size=(d, C))
    labels = [int(rng.integers(C))] * 2
    return params, views, W, labels


def loss_value(which: str, params, views, W, labels, margins: Margins, lam: float = 0.5):
    a, b = encode(params, views[0]), encode(params, views[1])
    if which == "piobj":
        return piobj_loss(a, b, margins)
    if which == "picat":
        return picat_loss(a, b, margins.theta)
    if which == "cat":
        return lsoftmax_cat_loss(a.cat_single, [labels[0]] * a.num_views, W, margins.gamma, lam)
    return total_loss([(a, labels[0], b, labels[1])], W, margins, lambda_blend=lam).total


def gradcheck(which: str, seed: int, margins: Margins | None = None, dual: bool = True) -> float:
    """Worst relative error over every encoder tensor and the classifier."""
    margins = margins or Margins(alpha=0.05, beta=3.0, theta=0.05)  # keep hinges active
    params, views, W, labels = random_instance(seed, dual=dual)
    leaves = params.as_leaves()
    Wt = ad.Tensor(W, requires_grad=True)
    ad.backward(loss_value(which, leaves, views, Wt, labels, margins))
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.tensors.items()}
    analytic["__W__"] = Wt.grad if Wt.grad is not None else np.zeros_like(W)
    arrays = dict(params.tensors)
    arrays["__W__"] = W
    numeric = central_difference(lambda: loss_value(which, params, views, W, labels, margins).item(), arrays)
    return max(relative_error(analytic[k], numeric[k]) for k in arrays)
