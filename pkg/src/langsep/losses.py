"""Objective functions for speaker and language training.

All functions take tape tensors and return a 1x1 tensor, so any mix of
them stays differentiable end to end. `total_loss` assembles the final
objective for each training mode:

    baseline  speaker loss only
    grl       speaker + lam * language CE (through an active reversal node)
    cos       speaker + mean absolute cosine between paired embeddings
    mapc      speaker + mean absolute per-dimension Pearson correlation
    ours      speaker + correlation term + lam * language CE (reversal on)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError, ShapeError

MODES = ("baseline", "grl", "cos", "mapc", "ours")

#: modes whose total loss includes the language CE through an active
#: gradient-reversal node during embedding training
ADVERSARIAL_MODES = ("grl", "ours")


@dataclass(frozen=True)
class LossTerms:
    """Measured loss values for one step (or one epoch average)."""

    mode: str
    l_spk: float = 0.0
    l_lang: float = 0.0
    l_corr: float = 0.0
    l_cos: float = 0.0
    l_total: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        for field in ("l_spk", "l_lang", "l_corr", "l_cos", "l_total"):
            if not np.isfinite(getattr(self, field)):
                raise NumericError(f"{field} is not finite")


def cross_entropy(logits: ad.Tensor, labels: Sequence[int]) -> ad.Tensor:
    """Mean categorical cross-entropy with integer class labels."""
    return ad.softmax_cross_entropy(logits, labels)


def angular_prototypical(embeddings: ad.Tensor, n_speakers: int, m_utts: int,
                         w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Angular prototypical speaker loss.

    `embeddings` holds n_speakers * m_utts rows in speaker-major order
    (rows k*m .. k*m+m-1 belong to speaker k). The last utterance of each
    speaker is the query; the prototype is the mean of the other m-1.
    Logits are w * cos(query_j, prototype_k) + b, and the loss is the
    cross-entropy of matching each query with its own prototype.
    """
    if m_utts < 2:
        raise ContractError("angular_prototypical: need at least 2 utterances per speaker")
    n_rows = n_speakers * m_utts
    if embeddings.rows != n_rows:
        raise ShapeError(
            f"expected {n_rows} rows for {n_speakers} speakers x {m_utts} utts, "
            f"got {embeddings.rows}")
    # constant selector matrices: queries pick the last utterance per
    # speaker, prototypes average the first m-1
    query_sel = np.zeros((n_speakers, n_rows))
    proto_sel = np.zeros((n_speakers, n_rows))
    for k in range(n_speakers):
        query_sel[k, k * m_utts + m_utts - 1] = 1.0
        proto_sel[k, k * m_utts:k * m_utts + m_utts - 1] = 1.0 / (m_utts - 1)
    queries = ad.l2_normalize(ad.matmul(ad.Tensor(query_sel), embeddings))
    protos = ad.l2_normalize(ad.matmul(ad.Tensor(proto_sel), embeddings))
    cos_matrix = ad.matmul(queries, ad.transpose(protos))
    logits = ad.add_scalar(ad.mul_scalar(cos_matrix, w), b)
    return ad.softmax_cross_entropy(logits, np.arange(n_speakers))


def cosine_min(e_spk: ad.Tensor, e_lang: ad.Tensor, eps: float = 1e-8) -> ad.Tensor:
    """Mean absolute cosine similarity between paired rows.

    The absolute value keeps the objective bounded at 0; a signed cosine
    could be driven to -1 while the pair stays perfectly aligned.
    """
    if e_spk.shape != e_lang.shape:
        raise ShapeError(f"cosine_min: {e_spk.shape} vs {e_lang.shape}")
    ns = ad.l2_normalize(e_spk, eps)
    nl = ad.l2_normalize(e_lang, eps)
    per_row = ad.row_sum(ad.elementwise_mul(ns, nl))
    return ad.mean_all(ad.absolute(per_row))


def mapc(e_spk: ad.Tensor, e_lang: ad.Tensor, eps: float = 1e-8) -> ad.Tensor:
    """Mean absolute Pearson correlation between paired dimensions.

    For each dimension j, the correlation is taken across the batch
    between column j of the two embedding matrices; the result is the
    mean of the absolute correlations. Standard deviations carry the
    additive eps inside the square root, so constant columns yield a
    finite (near zero) correlation instead of a division by zero.
    """
    if e_spk.shape != e_lang.shape:
        raise ShapeError(f"mapc: {e_spk.shape} vs {e_lang.shape}")
    n = e_spk.rows
    if n < 2:
        raise ContractError("mapc: need a batch of at least 2 rows")
    ones = ad.Tensor(np.ones((n, 1)))
    centered_s = ad.sub(e_spk, ad.matmul(ones, ad.col_mean(e_spk)))
    centered_l = ad.sub(e_lang, ad.matmul(ones, ad.col_mean(e_lang)))
    cov = ad.col_mean(ad.elementwise_mul(centered_s, centered_l))
    denom = ad.elementwise_mul(ad.col_std(e_spk, eps), ad.col_std(e_lang, eps))
    corr = ad.elementwise_div(cov, denom)
    return ad.mean_all(ad.absolute(corr))


def total_loss(mode: str, lam: float, l_spk: ad.Tensor,
               l_lang: ad.Tensor | None = None,
               l_corr: ad.Tensor | None = None,
               l_cos: ad.Tensor | None = None) -> ad.Tensor:
    """Assemble the per-mode training objective (see module docstring)."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if lam < 0.0:
        raise ContractError("lam must be >= 0")
    if mode == "baseline":
        return l_spk
    if mode == "grl":
        if l_lang is None:
            raise ContractError("mode 'grl' needs the language loss")
        return ad.add(l_spk, ad.scale(l_lang, lam))
    if mode == "cos":
        if l_cos is None:
            raise ContractError("mode 'cos' needs the cosine loss")
        return ad.add(l_spk, l_cos)
    if mode == "mapc":
        if l_corr is None:
            raise ContractError("mode 'mapc' needs the correlation loss")
        return ad.add(l_spk, l_corr)
    # ours
    if l_corr is None or l_lang is None:
        raise ContractError("mode 'ours' needs correlation and language losses")
    return ad.add(ad.add(l_spk, l_corr), ad.scale(l_lang, lam))
