"""Joint optimization driver: mini-batch assembly with explicit rng
streams, Adam updates with coupled L2, early stopping on validation
nDCG@5, ablation switches, and checkpoint bookkeeping.

Training is deterministic per seed: every random draw comes from a
generator derived from the run seed, and iteration order is fixed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import evaluation
from .corpus import PreparedDataset
from .model import ModelConfig, RecModel
from .objective import Batch, joint_loss

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_llm", "no_kge", "no_lrd")


class TrainerError(Exception):
    """Raised for invalid training configuration or runtime failures."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2: float = 1e-6
    batch_size: int = 256
    gamma: float = 1.0
    lam: float = 1.0
    alpha: float = 0.1
    patience: int = 10
    max_epochs: int = 200
    seed: int = 1
    num_negatives: int = 1
    kge_batch: int = 0  # 0 means batch_size
    corrupt_both: bool = False

    def __post_init__(self) -> None:
        for name in ("lr", "l2", "gamma", "lam", "alpha"):
            if getattr(self, name) < 0:
                raise TrainerError(f"{name} must be nonnegative")
        if self.patience < 1:
            raise TrainerError("patience must be >= 1")
        if self.batch_size < 1 or self.num_negatives < 1:
            raise TrainerError("batch_size and num_negatives must be >= 1")


def apply_ablation(
    model_cfg: ModelConfig, train_cfg: TrainConfig, variant: str
) -> tuple[ModelConfig, TrainConfig]:
    """Variant switches: no_llm feeds ID embeddings to the relation
    posterior, no_kge drops the graph-embedding task, no_lrd drops the
    discovery task and its latent relations."""
    if variant not in VARIANTS:
        raise TrainerError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if variant == "no_llm":
        model_cfg = dataclasses.replace(model_cfg, posterior_input="id")
    elif variant == "no_kge":
        train_cfg = dataclasses.replace(train_cfg, gamma=0.0)
    elif variant == "no_lrd":
        model_cfg = dataclasses.replace(model_cfg, num_latent=0)
        train_cfg = dataclasses.replace(train_cfg, lam=0.0)
    return model_cfg, train_cfg


class Adam:
    """Classic Adam with coupled L2: the penalty gradient l2 * w joins the
    loss gradient before the moment updates."""

    def __init__(
        self,
        params: dict[str, torch.Tensor],
        lr: float = 1e-3,
        l2: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.l2 = l2
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor] | None = None) -> None:
        """Apply one update from explicit grads, or from .grad fields."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            if self.l2:
                g = g + self.l2 * p
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + self.eps)
            if not torch.isfinite(update).all():
                raise TrainerError(f"non-finite optimizer update for {name}")
            p.add_(update, alpha=-self.lr)


def compute_gradients(
    model: RecModel, batch: Batch, cfg: TrainConfig
) -> dict[str, torch.Tensor]:
    """Gradients of the joint loss for every trainable tensor, validated
    to be finite (reported by tensor name and index otherwise)."""
    model.zero_grad(set_to_none=True)
    breakdown = joint_loss(model, batch, cfg.gamma, cfg.lam, cfg.alpha)
    breakdown.total.backward()
    grads = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        bad = ~torch.isfinite(g)
        if bad.any():
            index = tuple(int(i) for i in bad.nonzero()[0])
            raise TrainerError(f"non-finite gradient in {name} at index {index}")
        grads[name] = g
    return grads


class BatchSampler:
    """Assembles training batches from the prepared dataset.

    One training example per (user, position) with the position ranging
    over the user's train sequence; histories are windows of at most
    max_len items, right-padded."""

    def __init__(self, prepared: PreparedDataset, model_cfg: ModelConfig, cfg: TrainConfig):
        self.cfg = cfg
        self.max_len = model_cfg.max_len
        self.num_items = prepared.num_items
        self.train_items = {u: np.asarray(items, dtype=np.int64)
                            for u, items in prepared.split.train.items()}
        self.train_sets = {u: set(items) for u, items in prepared.split.train.items()}
        ex_users, ex_positions = [], []
        for u in sorted(self.train_items):
            for p in range(1, len(self.train_items[u])):
                ex_users.append(u)
                ex_positions.append(p)
        self.ex_users = np.asarray(ex_users, dtype=np.int64)
        self.ex_positions = np.asarray(ex_positions, dtype=np.int64)
        self.triplets = prepared.triplets.astype(np.int64)
        seed = cfg.seed

        def stream(tag: int) -> np.random.Generator:
            return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))

        self.shuffle_rng = stream(1)
        self.neg_rng = stream(2)
        self.lrd_rng = stream(3)
        self.kge_rng = stream(4)

    @property
    def num_examples(self) -> int:
        return len(self.ex_users)

    def epoch_batches(self):
        perm = self.shuffle_rng.permutation(self.num_examples)
        for start in range(0, self.num_examples, self.cfg.batch_size):
            yield self.assemble(perm[start:start + self.cfg.batch_size])

    def assemble(self, example_idx: np.ndarray) -> Batch:
        B, L, N = len(example_idx), self.max_len, self.cfg.num_negatives
        users = self.ex_users[example_idx]
        positions = self.ex_positions[example_idx]
        hist = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        pos = np.zeros(B, dtype=np.int64)
        for b in range(B):
            items = self.train_items[users[b]]
            p = positions[b]
            window = items[max(0, p - L):p]
            hist[b, :len(window)] = window
            mask[b, :len(window)] = True
            pos[b] = items[p]

        neg = np.zeros((B, N), dtype=np.int64)
        for b in range(B):
            seen = self.train_sets[users[b]]
            for n in range(N):
                while True:
                    cand = int(self.neg_rng.integers(self.num_items))
                    if cand not in seen:
                        neg[b, n] = cand
                        break

        lrd_neg = self.lrd_rng.integers(0, self.num_items, size=(B, L, N))
        collide = lrd_neg == hist[:, :, None]
        while collide.any():
            lrd_neg[collide] = self.lrd_rng.integers(0, self.num_items, size=int(collide.sum()))
            collide = lrd_neg == hist[:, :, None]

        kge_n = self.cfg.kge_batch or self.cfg.batch_size
        if len(self.triplets) and self.cfg.gamma > 0:
            rows = self.triplets[self.kge_rng.integers(0, len(self.triplets), size=kge_n)]
            heads, tails, rels = rows[:, 0], rows[:, 1], rows[:, 2]
            corrupt_heads = np.repeat(heads[:, None], N, axis=1)
            corrupt_tails = np.repeat(tails[:, None], N, axis=1)
            new_heads = self._corrupt(heads, (kge_n, N))
            new_tails = self._corrupt(tails, (kge_n, N))
            if self.cfg.corrupt_both:
                corrupt_heads, corrupt_tails = new_heads, new_tails
            else:
                side = self.kge_rng.integers(0, 2, size=kge_n)
                corrupt_heads[side == 0] = new_heads[side == 0]
                corrupt_tails[side == 1] = new_tails[side == 1]
        else:
            heads = tails = rels = np.zeros(0, dtype=np.int64)
            corrupt_heads = corrupt_tails = np.zeros((0, N), dtype=np.int64)

        t = torch.as_tensor
        return Batch(
            users=t(users), hist=t(hist), mask=t(mask), pos=t(pos), neg=t(neg),
            lrd_neg=t(lrd_neg), kge_heads=t(heads), kge_rels=t(rels), kge_tails=t(tails),
            kge_corrupt_heads=t(corrupt_heads), kge_corrupt_tails=t(corrupt_tails),
        )

    def _corrupt(self, original: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        draws = self.kge_rng.integers(0, self.num_items, size=shape)
        collide = draws == original[:, None]
        while collide.any():
            draws[collide] = self.kge_rng.integers(0, self.num_items, size=int(collide.sum()))
            collide = draws == original[:, None]
        return draws


@dataclass
class TrainResult:
    model: RecModel
    best_state: dict[str, np.ndarray]
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ndcg5: float = 0.0
    diverged: bool = False


def train(
    prepared: PreparedDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    text_vectors: np.ndarray | None = None,
    log_path: str | None = None,
) -> TrainResult:
    """Run joint optimization with early stopping on validation nDCG@5;
    returns the best checkpoint state and the per-epoch loss log."""
    neg_key = f"valid_{cfg.seed}"
    if neg_key not in prepared.eval_negatives:
        raise TrainerError(
            f"prepared dataset has no evaluation negatives for seed {cfg.seed}; "
            f"available: {sorted(prepared.eval_negatives)}"
        )
    model = RecModel(model_cfg, text_vectors=text_vectors, seed=cfg.seed)
    sampler = BatchSampler(prepared, model_cfg, cfg)
    if sampler.num_examples == 0:
        raise TrainerError("no training examples (all train sequences have length 1)")
    trainable = {n: p for n, p in model.named_parameters() if p.requires_grad}
    optimizer = Adam(trainable, lr=cfg.lr, l2=cfg.l2)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    result = TrainResult(model=model, best_state=model.state_arrays())
    bad_epochs = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            sums = {"l_rec": 0.0, "l_kge": 0.0, "l_lrd": 0.0, "total": 0.0, "mean_entropy": 0.0}
            count = 0
            diverged = False
            for batch in sampler.epoch_batches():
                model.zero_grad(set_to_none=True)
                breakdown = joint_loss(model, batch, cfg.gamma, cfg.lam, cfg.alpha)
                if not torch.isfinite(breakdown.total):
                    diverged = True
                    break
                breakdown.total.backward()
                optimizer.step()
                for key, value in breakdown.to_floats().items():
                    sums[key] += value * batch.size
                count += batch.size
            if diverged:
                logger.error("non-finite loss at epoch %d; keeping last good checkpoint", epoch)
                result.diverged = True
                break

            metrics = evaluation.evaluate_split(
                model, prepared, "valid", cfg.seed, max_len=model_cfg.max_len
            )
            row = {"epoch": epoch}
            row.update({k: sums[k] / max(count, 1) for k in ("l_rec", "l_kge", "l_lrd", "mean_entropy", "total")})
            row["valid_ndcg5"] = metrics["ndcg5"]
            result.log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()

            if metrics["ndcg5"] > result.best_valid_ndcg5:
                result.best_valid_ndcg5 = metrics["ndcg5"]
                result.best_epoch = epoch
                result.best_state = model.state_arrays()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_arrays(result.best_state)
    return result
