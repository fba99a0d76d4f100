"""Learnable parameters and forward computations for the relation-aware
sequential recommender.

Scoring chain for a (user, history, target) query:
  phi(v_i, r, v_j)          bilinear DistMult triplet score
  omega(v_i, v_j, r)        softmax of phi over the history window
  s_r = sum_i omega * v_i   relation-conditioned sequence representation
  m = AGG_r(s_r)            aggregated over all relations
  y = (u + m) . v_j + b_j   preference score

The relation posterior q(r | pair) is a linear classifier over the
concatenated projected text vectors of the two items (or their ID
embeddings under the no-text ablation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_MAGIC = b"LRDC"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    """Raised for shape or state problems in the model."""


@dataclass
class ModelConfig:
    num_users: int
    num_items: int
    num_predefined: int
    num_latent: int = 6
    d: int = 64
    d_raw: int = 1536
    agg: str = "mean"  # mean | attention
    max_len: int = 20
    posterior_input: str = "text"  # text | id (ablation)
    freeze_projection: bool = False

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ModelError(f"embedding dim must be >= 1, got {self.d}")
        if self.num_latent < 0:
            raise ModelError(f"num_latent must be >= 0, got {self.num_latent}")
        if self.num_relations < 1:
            raise ModelError("need at least one relation (predefined + latent)")
        if self.agg not in ("mean", "attention"):
            raise ModelError(f"unknown aggregation mode {self.agg!r}")
        if self.posterior_input not in ("text", "id"):
            raise ModelError(f"unknown posterior input {self.posterior_input!r}")

    @property
    def num_relations(self) -> int:
        return self.num_predefined + self.num_latent


def distmult(head: torch.Tensor, relation: torch.Tensor, tail: torch.Tensor) -> torch.Tensor:
    """Bilinear score sum_k head_k * relation_k * tail_k over the last dim.

    Symmetric in head/tail; inputs broadcast."""
    if head.shape[-1] != relation.shape[-1] or head.shape[-1] != tail.shape[-1]:
        raise ModelError(
            f"distmult dims differ: {head.shape[-1]}, {relation.shape[-1]}, {tail.shape[-1]}"
        )
    return (head * relation * tail).sum(-1)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Softmax restricted to mask==True positions; rows with no valid
    position come back all-zero."""
    neg = torch.finfo(scores.dtype).min
    filled = scores.masked_fill(~mask, neg)
    probs = torch.softmax(filled, dim=dim)
    return probs * mask.to(scores.dtype)


class RecModel(nn.Module):
    """Parameter store plus every forward quantity the trainer, evaluator
    and analysis tooling need."""

    def __init__(
        self,
        cfg: ModelConfig,
        text_vectors: np.ndarray | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB10C])))

        def normal(*shape):
            return torch.as_tensor(rng.normal(0.0, 0.01, size=shape), dtype=dtype)

        def glorot(n_in, n_out):
            bound = np.sqrt(6.0 / (n_in + n_out))
            return torch.as_tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), dtype=dtype)

        R = cfg.num_relations
        self.user_emb = nn.Parameter(normal(cfg.num_users, cfg.d))
        self.item_emb = nn.Parameter(normal(cfg.num_items, cfg.d))
        self.item_bias = nn.Parameter(torch.zeros(cfg.num_items, dtype=dtype))
        self.rel_emb = nn.Parameter(normal(R, cfg.d))
        self.proj_weight = nn.Parameter(glorot(cfg.d_raw, cfg.d))
        self.proj_bias = nn.Parameter(torch.zeros(cfg.d, dtype=dtype))
        self.cls_weight = nn.Parameter(glorot(2 * cfg.d, R))
        self.cls_bias = nn.Parameter(torch.zeros(R, dtype=dtype))
        if cfg.agg == "attention":
            self.attn_weight = nn.Parameter(glorot(cfg.d, cfg.d))
            self.attn_query = nn.Parameter(glorot(cfg.d, 1).squeeze(1))
        if cfg.freeze_projection:
            self.proj_weight.requires_grad_(False)
            self.proj_bias.requires_grad_(False)

        if text_vectors is not None:
            if text_vectors.shape != (cfg.num_items, cfg.d_raw):
                raise ModelError(
                    f"text vectors shape {text_vectors.shape} does not match "
                    f"({cfg.num_items}, {cfg.d_raw})"
                )
            raw = torch.as_tensor(np.ascontiguousarray(text_vectors), dtype=dtype)
        else:
            raw = torch.zeros(cfg.num_items, cfg.d_raw, dtype=dtype)
        self.register_buffer("text_raw", raw)

    # -- relation posterior ------------------------------------------------

    def pair_inputs(self, items: torch.Tensor) -> torch.Tensor:
        """Per-item posterior inputs: projected text vectors, or ID
        embeddings under the no-text ablation."""
        if self.cfg.posterior_input == "id":
            return self.item_emb[items]
        return self.text_raw[items] @ self.proj_weight + self.proj_bias

    def posterior_inputs_table(self) -> torch.Tensor:
        """Posterior inputs for the whole vocabulary, (|V|, d). Projecting
        the full table once per step beats projecting gathered duplicates
        whenever batch x window exceeds the vocabulary."""
        if self.cfg.posterior_input == "id":
            return self.item_emb
        return self.text_raw @ self.proj_weight + self.proj_bias

    def relation_posterior(self, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        """q(r | pair) = softmax(W2 [e_first; e_second] + b2), over all
        relations. Inputs are (..., d) posterior inputs; output (..., R)."""
        if not (torch.isfinite(first).all() and torch.isfinite(second).all()):
            raise ModelError("non-finite posterior input")
        logits = torch.cat([first, second], dim=-1) @ self.cls_weight + self.cls_bias
        return torch.softmax(logits, dim=-1)

    def posterior_for_items(self, first_items: torch.Tensor, second_items: torch.Tensor) -> torch.Tensor:
        return self.relation_posterior(self.pair_inputs(first_items), self.pair_inputs(second_items))

    # -- relation-aware sequence scoring ------------------------------------

    def relation_intensity(
        self, hist: torch.Tensor, mask: torch.Tensor, targets: torch.Tensor
    ) -> torch.Tensor:
        """omega(v_i, v_j, r): softmax over the history window of the
        triplet scores, per relation and per candidate target.

        hist (B, L) item ids, mask (B, L) bool, targets (B, C) item ids.
        Returns (B, C, R, L)."""
        if not bool(mask.any(dim=-1).all()):
            raise ModelError("empty history window")
        v_hist = self.item_emb[hist]  # (B, L, d)
        v_tgt = self.item_emb[targets]  # (B, C, d)
        scored_hist = torch.einsum("bld,rd->brld", v_hist, self.rel_emb)
        phi = torch.einsum("brld,bcd->bcrl", scored_hist, v_tgt)
        return masked_softmax(phi, mask[:, None, None, :], dim=-1)

    def sequence_repr(
        self, hist: torch.Tensor, mask: torch.Tensor, targets: torch.Tensor
    ) -> torch.Tensor:
        """s_r: intensity-weighted sum of history item embeddings,
        (B, C, R, d)."""
        omega = self.relation_intensity(hist, mask, targets)
        return torch.einsum("bcrl,bld->bcrd", omega, self.item_emb[hist])

    def aggregate(self, reprs: torch.Tensor) -> torch.Tensor:
        """Collapse the per-relation axis of (..., R, d) representations."""
        if reprs.shape[-2] != self.cfg.num_relations:
            raise ModelError(
                f"expected {self.cfg.num_relations} relation slots, got {reprs.shape[-2]}"
            )
        if self.cfg.agg == "mean":
            return reprs.mean(dim=-2)
        hidden = torch.tanh(reprs @ self.attn_weight)
        attn = torch.softmax(hidden @ self.attn_query, dim=-1)
        return torch.einsum("...r,...rd->...d", attn, reprs)

    def preference_scores(
        self, users: torch.Tensor, hist: torch.Tensor, mask: torch.Tensor, targets: torch.Tensor
    ) -> torch.Tensor:
        """y = (u + m) . v_j + b_j for each candidate target, (B, C)."""
        m = self.aggregate(self.sequence_repr(hist, mask, targets))  # (B, C, d)
        u = self.user_emb[users][:, None, :]
        v_tgt = self.item_emb[targets]
        return ((u + m) * v_tgt).sum(-1) + self.item_bias[targets]

    def triplet_scores(
        self, heads: torch.Tensor, relations: torch.Tensor, tails: torch.Tensor
    ) -> torch.Tensor:
        return distmult(self.item_emb[heads], self.rel_emb[relations], self.item_emb[tails])

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy() for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise ModelError(f"checkpoint missing tensors: {missing}")
        with torch.no_grad():
            for name, param in own.items():
                arr = arrays[name]
                if tuple(arr.shape) != tuple(param.shape):
                    raise ModelError(
                        f"checkpoint tensor {name} has shape {arr.shape}, expected {tuple(param.shape)}"
                    )
                param.copy_(torch.as_tensor(arr, dtype=param.dtype))


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Binary container: magic, version, then name/shape/f32 payload per
    tensor. Round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<BI", fh.read(5))
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = fh.read(4 * n)
            if len(data) != 4 * n:
                raise ModelError(f"{path}: truncated payload for tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return tensors
