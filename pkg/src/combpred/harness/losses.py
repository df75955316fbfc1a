"""Evaluation losses for set-valued and taxonomy predictions."""

from __future__ import annotations

import logging
from typing import NamedTuple, Sequence

import numpy as np

from ..counting import validate_tree
from ..errors import ValidationError
from ..ridge import RidgeModel

log = logging.getLogger(__name__)


def _indicator(s, d: int | None) -> np.ndarray:
    if isinstance(s, (set, frozenset)):
        if d is None:
            raise ValidationError("set-valued structures need the alphabet size d")
        out = np.zeros(d)
        idx = list(s)
        if any(not 0 <= i < d for i in idx):
            raise ValidationError(f"set {sorted(s)} has elements outside 0..{d - 1}")
        out[idx] = 1.0
        return out
    return np.asarray(s, dtype=float).ravel()


def _ancestors(parents: Sequence[int]) -> list[list[int]]:
    out = []
    for v in range(len(parents)):
        chain, a = [], parents[v]
        while a != -1:
            chain.append(a)
            a = parents[a]
        out.append(chain)
    return out


def hierarchical_loss(z, y, tree: Sequence[int]) -> int:
    """Count nodes where z and y disagree while every ancestor agrees.

    ``tree`` is a parent array (-1 marks a top-level node; several are
    allowed); ``z`` and ``y`` are microlabel vectors over its nodes.
    """
    parents = [int(p) for p in tree]
    roots = [v for v, p in enumerate(parents) if p == -1]
    if not roots:
        raise ValidationError("taxonomy has no top-level node")
    # a forest is checked by hanging it under a virtual root
    validate_tree([-1] + [p + 1 for p in parents])
    z = np.asarray(z).ravel()
    y = np.asarray(y).ravel()
    if z.shape != (len(parents),) or y.shape != (len(parents),):
        raise ValidationError(f"microlabel vectors must have {len(parents)} entries")
    wrong = z != y
    return int(sum(1 for v, anc in enumerate(_ancestors(parents)) if wrong[v] and not wrong[anc].any()))


class SetLosses(NamedTuple):
    zero_one: int
    hamming: float
    ranking: float


def ranking_loss(scores, relevant) -> float:
    """Fraction of (relevant, irrelevant) pairs the scores misorder; ties count one half."""
    s = np.asarray(scores, dtype=float).ravel()
    rel = _indicator(relevant, s.size).astype(bool)
    pos, neg = s[rel], s[~rel]
    if pos.size == 0 or neg.size == 0:
        return 0.0
    diff = pos[:, None] - neg[None, :]
    return float(((diff < 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def set_losses(z, y, d: int | None = None, scores=None) -> SetLosses:
    """Zero-one, per-label Hamming, and ranking loss of prediction z against y.

    Sets need ``d``; 0/1 vectors carry it.  Without ``scores`` the ranking
    loss ranks by the prediction's own indicator.
    """
    if d is None and scores is not None:
        d = len(scores)
    zi, yi = _indicator(z, d), _indicator(y, d)
    if zi.shape != yi.shape:
        raise ValidationError("prediction and target have different lengths")
    wrong = int((zi != yi).sum())
    rank = ranking_loss(zi if scores is None else scores, yi)
    return SetLosses(int(wrong > 0), wrong / zi.size, rank)


def eval_policy_cosine(model: RidgeModel, test_inputs, policy) -> float:
    """Mean cosine between learned per-instance weights and the true reward vectors."""
    X = np.atleast_2d(np.asarray(test_inputs, dtype=float))
    learned = model.weights(X)
    truth = policy.pair_vectors(X, model.space)
    ln = np.linalg.norm(learned, axis=1)
    tn = np.linalg.norm(truth, axis=1)
    ok = (ln > 0) & (tn > 0)
    if not ok.all():
        log.warning("%d of %d test instances have a zero-norm policy; counted as cosine 0", (~ok).sum(), len(X))
    cos = np.zeros(len(X))
    cos[ok] = (learned[ok] * truth[ok]).sum(axis=1) / (ln[ok] * tn[ok])
    return float(np.clip(cos, -1.0, 1.0).mean())
