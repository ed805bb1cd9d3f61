"""Ranking losses, sparsity regularizers and the quadratic lambda ramp.

Losses accept :class:`~adapter_splade.autodiff.Tensor` inputs so they can sit
on a tape, and plain arrays for direct evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .sparse import SparseVector


@dataclass(frozen=True)
class RegularizerConfig:
    lambda_q: float = 5e-4
    lambda_d: float = 9e-5
    ramp_steps: int = 50_000
    flops_squared: bool = True  # False: literal unsquared mean, for comparison only

    def __post_init__(self):
        if min(self.lambda_q, self.lambda_d, self.ramp_steps) < 0:
            raise ValueError("regularizer settings must be >= 0")

    @classmethod
    def distillation(cls, **kw) -> "RegularizerConfig":
        return cls(lambda_q=9e-2, lambda_d=1e-2, **kw)


def in_batch_mask(batch_size: int, variant: str = "all") -> np.ndarray:
    """Candidate mask over a (B, 2B) score matrix with columns [pos_0..pos_B-1, neg_0..neg_B-1].

    ``all``: every positive and negative in the batch.  ``positives``: own
    negative plus every positive.  ``none``: own positive and own negative only.
    """
    eye = np.eye(batch_size, dtype=bool)
    if variant == "all":
        return np.ones((batch_size, 2 * batch_size), dtype=bool)
    if variant == "positives":
        return np.hstack([np.ones((batch_size, batch_size), dtype=bool), eye])
    if variant == "none":
        return np.hstack([eye, eye])
    raise ValueError(f"unknown in-batch variant {variant!r}")


def contrastive_loss(scores, positive_cols, candidates: np.ndarray | None = None) -> Tensor:
    """Mean over rows of -log softmax(score of the positive) among the candidates.

    ``scores`` is (B, C); ``positive_cols[i]`` names row i's positive column;
    ``candidates`` is an optional boolean (B, C) mask of the denominator.
    """
    scores = ad.as_tensor(scores)
    lse = ad.logsumexp(scores, axis=-1, where=candidates)
    return (lse - ad.pick(scores, positive_cols)).mean()


def pair_contrastive_loss(pos_scores, neg_scores) -> Tensor:
    """Two-candidate contrastive loss (no in-batch negatives)."""
    s = ad.stack([pos_scores, neg_scores], axis=1)
    return contrastive_loss(s, np.zeros(s.shape[0], dtype=np.int64))


def margin_mse_loss(student_pos, student_neg, teacher_margins) -> Tensor:
    """mean((s(q,d+) - s(q,d-)) - teacher_margin)^2."""
    student_pos, student_neg = ad.as_tensor(student_pos), ad.as_tensor(student_neg)
    teacher = np.asarray(teacher_margins, dtype=np.float64)
    if student_pos.shape != student_neg.shape or student_pos.shape != teacher.shape:
        raise ContractError(
            f"margin_mse_loss: {student_pos.shape[0] if student_pos.ndim else 1} student triples "
            f"vs {teacher.size} teacher margins"
        )
    return ad.square(student_pos - student_neg - teacher).mean()


def _as_batch(reps):
    if isinstance(reps, Tensor):
        return reps
    if len(reps) and isinstance(reps[0], SparseVector):
        return np.array([v.weights.sum() for v in reps])[:, None]
    return np.asarray(reps, dtype=np.float64)


def l1_reg(reps) -> Tensor:
    """Mean over the batch of the summed (nonnegative) term weights."""
    reps = ad.as_tensor(_as_batch(reps))
    if reps.shape[0] == 0:
        return ad.Tensor(0.0)
    return reps.sum(axis=-1).mean()


def flops_reg(reps, squared: bool = True) -> Tensor:
    """sum_j (mean_i w_j^{(i)})^2 over a batch of N document weight vectors."""
    if not isinstance(reps, Tensor) and len(reps) and isinstance(reps[0], SparseVector):
        vocab = max([int(v.ids.max()) + 1 for v in reps if len(v)] + [1])
        reps = np.stack([v.to_dense(vocab) for v in reps])
    reps = ad.as_tensor(reps)
    if reps.shape[0] < 1:
        raise ContractError("flops_reg needs at least one document")
    mean = reps.mean(axis=0)
    return (ad.square(mean) if squared else mean).sum()


def lambda_at(step: int, config: RegularizerConfig) -> tuple[float, float]:
    """Quadratic ramp: lambda_max * min(1, (step / T)^2)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.ramp_steps == 0:
        factor = 1.0
    else:
        factor = min(1.0, (step / config.ramp_steps) ** 2)
    return config.lambda_q * factor, config.lambda_d * factor


def total_loss(task_loss, q_reps, d_reps, step: int, config: RegularizerConfig) -> Tensor:
    lq, ld = lambda_at(step, config)
    loss = ad.as_tensor(task_loss)
    if lq:
        loss = loss + lq * l1_reg(q_reps)
    if ld:
        loss = loss + ld * flops_reg(d_reps, squared=config.flops_squared)
    return loss
