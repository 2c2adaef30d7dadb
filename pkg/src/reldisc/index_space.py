"""Class-index space.

A single affine classifier shared by all three views maps hidden vectors
to K softmax heads, K matching the cluster count so heads cover both the
pre-defined relations and the ones still to be discovered. Training keeps
the per-class assignment columns consistent across views with a
contrastive term and balances the column marginals with an entropy
regularizer; the per-view argmax rows serve as anchor labels.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn


class IndexSpaceError(ValueError):
    pass


def make_classifier(
    hidden_dim: int, num_heads: int, seed: int = 0, dtype: torch.dtype = torch.float64
) -> nn.Linear:
    """Affine map from hidden width to K logits; every head (pre-defined
    or novel) gets the same small random initialization."""
    if num_heads < 1:
        raise IndexSpaceError(f"num_heads must be >= 1, got {num_heads}")
    gen = torch.Generator().manual_seed(seed)
    clf = nn.Linear(hidden_dim, num_heads, dtype=dtype)
    with torch.no_grad():
        clf.weight.copy_(
            torch.randn(num_heads, hidden_dim, generator=gen, dtype=dtype) * 0.02
        )
        clf.bias.zero_()
    return clf


def classify(hidden: torch.Tensor, classifier: nn.Linear) -> torch.Tensor:
    """Softmax head assignments for a batch of hidden vectors.

    Accepts [..., d] and returns [..., K]; rows are probability rows.
    """
    if hidden.shape[-1] != classifier.in_features:
        raise IndexSpaceError(
            f"hidden width {hidden.shape[-1]} does not match classifier "
            f"input width {classifier.in_features}"
        )
    return torch.softmax(classifier(hidden), dim=-1)


def consistency_loss(
    z: torch.Tensor,
    tau: float,
    reg_weight: float = 1.0,
    exclude_self: bool = False,
) -> torch.Tensor:
    """Tri-view label-index consistency loss.

    ``z`` has shape [3, N, K]. Anchors are the per-class assignment
    columns z[m, :, j]; the same column in the other two views is
    positive, and the denominator runs over all 3K columns (the anchor
    included unless ``exclude_self``), with dot-product similarity at
    temperature ``tau``. The mean over all 3K anchors is regularized by
    the signed entropy of the column marginals, weighted so that
    minimizing the loss pushes the marginals toward uniform and away from
    the collapse where every instance lands on one head.
    """
    if tau <= 0:
        raise IndexSpaceError(f"temperature must be positive, got {tau}")
    if z.ndim != 3 or z.shape[0] != 3:
        raise IndexSpaceError(f"expected [3, N, K] view tensor, got {tuple(z.shape)}")
    n_views, _, k = z.shape
    cols = z.transpose(1, 2).reshape(n_views * k, -1)  # anchor (m, j) at row m * K + j
    sim = cols @ cols.T / tau

    total = n_views * k
    view_idx = torch.arange(total, device=z.device) // k
    class_idx = torch.arange(total, device=z.device) % k
    pos_mask = (class_idx.unsqueeze(1) == class_idx.unsqueeze(0)) & (
        view_idx.unsqueeze(1) != view_idx.unsqueeze(0)
    )
    neg_inf = torch.finfo(sim.dtype).min
    denom_sim = sim
    if exclude_self:
        denom_sim = sim.masked_fill(torch.eye(total, dtype=torch.bool, device=sim.device), neg_inf)
    log_denom = torch.logsumexp(denom_sim, dim=1)
    log_num = torch.logsumexp(sim.masked_fill(~pos_mask, neg_inf), dim=1)
    contrastive = (log_denom - log_num).mean()

    marginals = z.mean(dim=1)  # [3, K], each view's row sums to 1
    tiny = torch.finfo(z.dtype).tiny
    signed_entropy = (marginals * torch.log(marginals.clamp_min(tiny))).sum()
    return contrastive + reg_weight * signed_entropy


def column_marginals(z: torch.Tensor) -> torch.Tensor:
    """Mean assignment per class and view: Z[m, j] = mean_i z[m, i, j]."""
    if z.ndim != 3:
        raise IndexSpaceError(f"expected [3, N, K] view tensor, got {tuple(z.shape)}")
    return z.mean(dim=1)


def anchor_labels(z: torch.Tensor | np.ndarray | Sequence[Sequence[float]]) -> np.ndarray:
    """Per-instance argmax over heads, lowest index on ties."""
    rows = z.detach().cpu().numpy() if isinstance(z, torch.Tensor) else np.asarray(z)
    return np.argmax(rows, axis=-1)
