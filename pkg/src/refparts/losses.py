"""Loss functions: smoothed target classification, attention sharpening
regularizer, and the rank-based group consistency loss."""

from __future__ import annotations

import logging

import torch

from .errors import InvalidInputError

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


def classification_loss(
    logits: torch.Tensor, target_index: torch.Tensor, smoothing: float = 0.1
) -> torch.Tensor:
    """Cross entropy of the 3-way listener distribution against a smoothed
    target: 1 - eps on the target, eps/2 on each distractor."""
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
        target_index = torch.atleast_1d(torch.as_tensor(target_index))
    if not torch.isfinite(logits).all():
        raise InvalidInputError("non-finite logits")
    if not 0.0 <= smoothing < 1.0:
        raise InvalidInputError("smoothing must be in [0, 1)")
    n_classes = logits.shape[1]
    logp = torch.log_softmax(logits, dim=1)
    target = torch.full_like(logp, smoothing / (n_classes - 1))
    target.scatter_(1, target_index.view(-1, 1), 1.0 - smoothing)
    return -(target * logp).sum(dim=1).mean()


def ce_regularization(y: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over segments of -log of each row's largest part probability.

    The row argmax acts as a constant pseudo-label: gradients flow only
    through the selected probability, never through the label choice.
    """
    if y.ndim == 2:
        y = y.unsqueeze(0)
    if mask is None:
        mask = torch.ones(y.shape[:2], dtype=torch.bool)
    pseudo = y.argmax(dim=2, keepdim=True).detach()
    picked = y.gather(2, pseudo).squeeze(2).clamp(min=LOG_CLAMP)
    per_shape = (-(torch.log(picked)) * mask).sum(dim=1)
    return per_shape.mean()


def _second_singular_value(m: torch.Tensor) -> torch.Tensor:
    if m.shape[0] < 2:
        return m.new_zeros(())
    sv = torch.linalg.svdvals(m)
    return sv[1] if sv.numel() > 1 else m.new_zeros(())


def group_consistency_loss(descriptors: torch.Tensor, parts: torch.Tensor) -> torch.Tensor:
    """1 + max_k s2(M_k) - min_{k != l} s2([M_k; M_l]) over a minibatch.

    M_k stacks the descriptors of the segments currently assigned to part
    k; s2 is the second singular value. Parts with fewer than two members
    contribute 0 to the max term.
    """
    present = torch.unique(parts).tolist()
    groups = {k: descriptors[parts == k] for k in present}
    max_term = torch.stack([_second_singular_value(m) for m in groups.values()]).max()
    if len(present) < 2:
        log.warning("group consistency loss: single part present, min term undefined")
        return 1.0 + max_term
    pair_terms = []
    for i, k in enumerate(present):
        for l in present[i + 1 :]:
            pair_terms.append(_second_singular_value(torch.cat([groups[k], groups[l]])))
    return 1.0 + max_term - torch.stack(pair_terms).min()
