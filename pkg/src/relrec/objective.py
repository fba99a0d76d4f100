"""Training losses: BPR ranking, knowledge-graph embedding, and the
negative-sampled latent-relation-discovery loss with entropy
regularization, combined into one weighted objective.

Also holds a slow exact evaluation of the variational bound and the
pseudo-likelihood it approximates (full softmax over the vocabulary,
numpy, test-scale only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import RecModel, distmult


@dataclass
class Batch:
    """One training mini-batch. All sampling (negatives, corruption)
    happens at assembly time so loss evaluation is a pure function of
    (parameters, batch)."""

    users: torch.Tensor  # (B,)
    hist: torch.Tensor  # (B, L) item ids, left-padded
    mask: torch.Tensor  # (B, L) bool, True on real history positions
    pos: torch.Tensor  # (B,) positive target items
    neg: torch.Tensor  # (B, N) sampled negative targets
    lrd_neg: torch.Tensor  # (B, L, N) reconstruction negatives per pair
    kge_heads: torch.Tensor  # (T,)
    kge_rels: torch.Tensor  # (T,)
    kge_tails: torch.Tensor  # (T,)
    kge_corrupt_heads: torch.Tensor  # (T, N)
    kge_corrupt_tails: torch.Tensor  # (T, N)

    @property
    def size(self) -> int:
        return int(self.users.shape[0])


@dataclass
class LossBreakdown:
    l_rec: torch.Tensor
    l_kge: torch.Tensor
    l_lrd: torch.Tensor
    total: torch.Tensor
    mean_entropy: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "l_rec": float(self.l_rec),
            "l_kge": float(self.l_kge),
            "l_lrd": float(self.l_lrd),
            "total": float(self.total),
            "mean_entropy": float(self.mean_entropy),
        }


def bpr_loss(y_pos: torch.Tensor, y_neg: torch.Tensor) -> torch.Tensor:
    """-log sigmoid(y_pos - y_neg), elementwise, via the stable softplus
    form. Broadcasts, so (B,) positives pair with (B, N) negatives."""
    if y_pos.dim() < y_neg.dim():
        y_pos = y_pos.unsqueeze(-1)
    return F.softplus(y_neg - y_pos)


def entropy(q: torch.Tensor) -> torch.Tensor:
    """Shannon entropy over the last axis, with 0 log 0 = 0."""
    return -torch.special.xlogy(q, q).sum(-1)


def reconstruction_term(phi_pos: torch.Tensor, phi_neg: torch.Tensor) -> torch.Tensor:
    """log sigmoid(phi_pos) + log sigmoid(-phi_neg); with several sampled
    negatives stacked on the last axis of phi_neg, their term is averaged."""
    pos = -F.softplus(-phi_pos)
    neg = -F.softplus(phi_neg)
    if phi_neg.dim() > phi_pos.dim():
        neg = neg.mean(-1)
    return pos + neg


def lrd_pair_losses(
    model: RecModel, batch: Batch, alpha: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pair discovery losses and posterior entropies, both (B, L).

    A pair is (history item, target item). The expectation over relations
    is computed exactly: the posterior weights the reconstruction term of
    every relation. Padded positions carry garbage and must be masked by
    the caller."""
    inputs = model.posterior_inputs_table()
    e_hist = inputs[batch.hist]  # (B, L, d)
    e_tgt = inputs[batch.pos][:, None, :].expand_as(e_hist)
    q = model.relation_posterior(e_hist, e_tgt)  # (B, L, R)

    v_hist = model.item_emb[batch.hist]  # (B, L, d)
    v_tgt = model.item_emb[batch.pos]  # (B, d)
    v_neg = model.item_emb[batch.lrd_neg]  # (B, L, N, d)
    scored_tgt = torch.einsum("bd,rd->brd", v_tgt, model.rel_emb)
    phi_pos = torch.einsum("bld,brd->blr", v_hist, scored_tgt)
    phi_neg = torch.einsum("blnd,brd->blrn", v_neg, scored_tgt)
    recon = reconstruction_term(phi_pos, phi_neg)  # (B, L, R)

    ent = entropy(q)  # (B, L)
    pair_loss = -((q * recon).sum(-1) + alpha * ent)
    return pair_loss, ent


def lrd_loss(model: RecModel, batch: Batch, alpha: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Discovery loss averaged over the valid pairs in the batch; also
    returns the mean posterior entropy as a diagnostic."""
    pair_loss, ent = lrd_pair_losses(model, batch, alpha)
    fmask = batch.mask.to(pair_loss.dtype)
    n_pairs = fmask.sum().clamp(min=1.0)
    loss = (pair_loss * fmask).sum() / n_pairs
    mean_ent = (ent * fmask).sum() / n_pairs
    return loss, mean_ent


def kge_loss(model: RecModel, batch: Batch) -> torch.Tensor:
    """-log sigmoid(phi(true) - phi(corrupted)) over the sampled triplets."""
    if batch.kge_heads.numel() == 0:
        return model.item_emb.sum() * 0.0
    r = model.rel_emb[batch.kge_rels]
    phi_true = distmult(model.item_emb[batch.kge_heads], r, model.item_emb[batch.kge_tails])
    phi_corr = distmult(
        model.item_emb[batch.kge_corrupt_heads],
        r[:, None, :],
        model.item_emb[batch.kge_corrupt_tails],
    )
    return bpr_loss(phi_true, phi_corr).mean()


def joint_loss(
    model: RecModel, batch: Batch, gamma: float, lam: float, alpha: float
) -> LossBreakdown:
    """total = l_rec + gamma * l_kge + lam * l_lrd. Component terms with a
    zero coefficient are skipped entirely, so gamma = lam = 0 reduces to
    plain BPR training."""
    if gamma < 0 or lam < 0:
        raise ValueError(f"loss weights must be nonnegative, got gamma={gamma}, lam={lam}")
    scores_pos = model.preference_scores(
        batch.users, batch.hist, batch.mask, batch.pos[:, None]
    )[:, 0]
    scores_neg_all = model.preference_scores(batch.users, batch.hist, batch.mask, batch.neg)
    l_rec = bpr_loss(scores_pos, scores_neg_all).mean()

    zero = l_rec.detach() * 0.0
    l_kge = kge_loss(model, batch) if gamma > 0 else zero
    if lam > 0:
        l_lrd, mean_ent = lrd_loss(model, batch, alpha)
    else:
        l_lrd, mean_ent = zero, zero
    total = l_rec + gamma * l_kge + lam * l_lrd
    return LossBreakdown(l_rec, l_kge, l_lrd, total, mean_ent)


# -- exact bound oracle ------------------------------------------------------


def log_softmax_scores(item_emb: np.ndarray, rel_emb: np.ndarray, given: int) -> np.ndarray:
    """log p(v | given, r) for every candidate v and relation r, (R, |V|),
    with the normalizer summed over the full vocabulary."""
    # phi(v', given, r) for all v', r: (R, |V|)
    phi = (rel_emb * item_emb[given]) @ item_emb.T
    log_z = _logsumexp(phi, axis=1, keepdims=True)
    return phi - log_z


def exact_posterior(v1: int, v2: int, item_emb: np.ndarray, rel_emb: np.ndarray) -> np.ndarray:
    """The relation posteriors that make the variational bound tight, one
    row per reconstruction direction: (2, R)."""
    lp1 = log_softmax_scores(item_emb, rel_emb, v2)[:, v1]
    lp2 = log_softmax_scores(item_emb, rel_emb, v1)[:, v2]
    return np.stack([_softmax(lp1), _softmax(lp2)])


def elbo_exact(
    v1: int,
    v2: int,
    item_emb: np.ndarray,
    rel_emb: np.ndarray,
    alpha: float = 1.0,
    q: np.ndarray | None = None,
    max_items: int = 4096,
) -> tuple[float, float]:
    """Exact variational bound and pseudo-likelihood for one item pair,
    averaged over the two reconstruction directions.

    The bound includes the uniform-prior constant -log R, so at alpha = 1
    it never exceeds the pseudo-likelihood, with equality exactly when q
    is the true relation posterior. Full-softmax cost limits this to
    test-scale vocabularies."""
    item_emb = np.asarray(item_emb, dtype=np.float64)
    rel_emb = np.asarray(rel_emb, dtype=np.float64)
    n_items, n_rel = item_emb.shape[0], rel_emb.shape[0]
    if n_items > max_items:
        raise ValueError(f"vocabulary of {n_items} exceeds the oracle cap {max_items}")
    lp = np.stack([
        log_softmax_scores(item_emb, rel_emb, v2)[:, v1],
        log_softmax_scores(item_emb, rel_emb, v1)[:, v2],
    ])  # (2, R)
    if q is None:
        q = np.stack([_softmax(lp[0]), _softmax(lp[1])])
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (2, n_rel):
        raise ValueError(f"q must have shape (2, {n_rel}), got {q.shape}")

    pseudo = float(np.mean(_logsumexp(lp, axis=1) - np.log(n_rel)))
    ent = -np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0), axis=1)
    bound = float(np.mean((q * lp).sum(axis=1) + alpha * ent - np.log(n_rel)))
    return bound, pseudo


def _logsumexp(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()
