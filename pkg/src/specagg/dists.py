"""Vocabulary-indexed log-probability vectors and the operations on them.

Everything downstream manipulates distributions in natural-log space: the
two-stream interpolation, its softmax weights, the overlap divergence, and
the sparse top-p codec used on the wire.  Linear probabilities only appear
where a CDF is unavoidable (sampling, codec) and in test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-6
# f16 rounding can push the kept mass slightly above 1.
COMPRESSED_SUM_BOUND = 1.0 + 2.0**-9


class VocabMismatchError(ValueError):
    """Two distributions indexed by different vocabularies."""


@dataclass(frozen=True)
class Vocab:
    """Dense token-id space: ids are 0 .. size-1."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")


def logsumexp(logs: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Stable log(sum(exp(logs))); handles -inf entries and all--inf input."""
    m = np.max(logs, axis=axis, keepdims=axis is not None)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = m_safe + np.log(np.sum(np.exp(logs - m_safe), axis=axis, keepdims=axis is not None))
    out = np.where(np.isfinite(m), out, m)
    if axis is None:
        return float(out)
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True, eq=False)
class LogDist:
    """A normalized distribution over a vocabulary, stored as log-probs.

    Entries may be -inf (zero probability); logsumexp(logp) must be 0 within
    NORM_TOL.  Instances are immutable and safe to share between threads.
    """

    vocab: Vocab
    logp: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LogDist):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.logp, other.logp)

    def __hash__(self) -> int:
        return hash((self.vocab, self.logp.tobytes()))

    def __post_init__(self) -> None:
        logp = np.asarray(self.logp, dtype=np.float64)
        if logp.shape != (self.vocab.size,):
            raise ValueError(f"logp shape {logp.shape} != ({self.vocab.size},)")
        if np.isnan(logp).any():
            raise ValueError("logp contains NaN")
        if np.isposinf(logp).any():
            raise ValueError("logp contains +inf")
        total = logsumexp(logp)
        if not math.isfinite(total) or abs(total) > NORM_TOL:
            raise ValueError(f"distribution not normalized: logsumexp={total!r}")
        logp.setflags(write=False)
        object.__setattr__(self, "logp", logp)

    @classmethod
    def from_probs(cls, vocab: Vocab, probs: np.ndarray) -> "LogDist":
        p = np.asarray(probs, dtype=np.float64)
        if (p < 0).any():
            raise ValueError("negative probability")
        total = p.sum()
        if total <= 0:
            raise ValueError("empty distribution")
        with np.errstate(divide="ignore"):
            return cls(vocab, np.log(p / total))

    @classmethod
    def from_logits(cls, vocab: Vocab, logits: np.ndarray) -> "LogDist":
        a = np.asarray(logits, dtype=np.float64)
        return cls(vocab, a - logsumexp(a))

    @classmethod
    def one_hot(cls, vocab: Vocab, token: int) -> "LogDist":
        logp = np.full(vocab.size, -np.inf)
        logp[token] = 0.0
        return cls(vocab, logp)

    def probs(self) -> np.ndarray:
        """Linear-space copy; logp <= 0 throughout so exp never overflows."""
        return np.exp(self.logp)

    def prob(self, token: int) -> float:
        return float(np.exp(self.logp[token]))


@dataclass(frozen=True)
class CorrectedWeight:
    """log of the summed exponentiated relevance scores of one side's docs.

    Finite for any finite scores; the softmax of the two sides' values gives
    the interpolation weights.
    """

    hlog: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.hlog):
            raise ValueError(f"corrected weight must be finite, got {self.hlog!r}")


def _hlog(h: CorrectedWeight | float) -> float:
    value = h.hlog if isinstance(h, CorrectedWeight) else float(h)
    if not math.isfinite(value):
        raise ValueError(f"corrected weight must be finite, got {value!r}")
    return value


def eta_log_weights(
    h_l: CorrectedWeight | float, h_r: CorrectedWeight | float
) -> tuple[float, float]:
    """Log-softmax of the two corrected weights: (log eta_l, log eta_r).

    Computed via log-sum-exp so weights hundreds of nats apart neither
    overflow nor underflow.
    """
    a, b = _hlog(h_l), _hlog(h_r)
    total = np.logaddexp(a, b)
    return float(a - total), float(b - total)


def interpolate_target(
    p_l: LogDist,
    p_r: LogDist,
    h_l: CorrectedWeight | float,
    h_r: CorrectedWeight | float,
) -> LogDist:
    """Weighted mixture of the two streams, entirely in log space.

    result(x) = log(eta_l * exp(p_l(x)) + eta_r * exp(p_r(x))).
    """
    if p_l.vocab != p_r.vocab:
        raise VocabMismatchError(f"{p_l.vocab} != {p_r.vocab}")
    log_eta_l, log_eta_r = eta_log_weights(h_l, h_r)
    mixed = np.logaddexp(log_eta_l + p_l.logp, log_eta_r + p_r.logp)
    return LogDist(p_l.vocab, mixed)


def lk_divergence(p_l: LogDist, p_r: LogDist) -> float:
    """1 - sum_x min(p_l(x), p_r(x)); 0 for identical, 1 for disjoint."""
    if p_l.vocab != p_r.vocab:
        raise VocabMismatchError(f"{p_l.vocab} != {p_r.vocab}")
    overlap = logsumexp(np.minimum(p_l.logp, p_r.logp))
    return float(min(1.0, max(0.0, 1.0 - math.exp(overlap))))


@dataclass(frozen=True, eq=False)
class CompressedDist:
    """Sparse top-p form of a LogDist: (token id, f16 probability) pairs.

    Token ids are strictly increasing, values positive, and the total kept
    mass is at most 1 + 2^-9 (f16 rounding slack).
    """

    vocab_size: int
    token_ids: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # float16, positive

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompressedDist):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash((self.vocab_size, self.token_ids.tobytes(), self.values.tobytes()))

    def __post_init__(self) -> None:
        ids = np.asarray(self.token_ids, dtype=np.uint32)
        vals = np.asarray(self.values, dtype=np.float16)
        if ids.shape != vals.shape or ids.ndim != 1:
            raise ValueError("token_ids and values must be 1-d and congruent")
        if ids.size == 0:
            raise ValueError("empty compressed distribution")
        if (np.diff(ids.astype(np.int64)) <= 0).any():
            raise ValueError("token ids must be strictly increasing")
        if ids[-1] >= self.vocab_size:
            raise ValueError("token id outside vocabulary")
        if (vals <= 0).any():
            raise ValueError("values must be positive")
        if float(vals.astype(np.float64).sum()) > COMPRESSED_SUM_BOUND:
            raise ValueError("kept mass exceeds 1 + 2^-9")
        ids.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return int(self.token_ids.size)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.token_ids, self.values)]


def topp_encode(
    p: LogDist, p_threshold: float, *, force_token: int | None = None
) -> CompressedDist:
    """Keep the smallest set of highest-probability tokens covering p_threshold.

    Ties in probability break toward the lower token id.  The boundary is
    inclusive (cumulative >= threshold).  force_token, when given, is always
    part of the kept set regardless of its mass.
    """
    if not 0.0 < p_threshold <= 1.0:
        raise ValueError(f"p_threshold must be in (0, 1], got {p_threshold}")
    probs = p.probs()
    nonzero = np.flatnonzero(probs > 0.0)
    if nonzero.size == 0:
        raise ValueError("empty distribution")
    if p_threshold >= 1.0:
        keep = nonzero
    else:
        # stable argsort keeps ascending-id order among equal probabilities
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        cut = int(np.searchsorted(cum, p_threshold - 1e-12, side="left")) + 1
        keep = order[:cut]
        keep = keep[probs[keep] > 0.0]
    if force_token is not None and force_token not in keep:
        if probs[force_token] <= 0.0:
            raise ValueError(f"cannot force zero-probability token {force_token}")
        keep = np.append(keep, force_token)
    keep = np.sort(keep)
    return CompressedDist(
        vocab_size=p.vocab.size,
        token_ids=keep.astype(np.uint32),
        values=probs[keep].astype(np.float16),
    )


def topp_decode(c: CompressedDist) -> LogDist:
    """Expand to a full LogDist, renormalizing the kept mass to 1."""
    probs = np.zeros(c.vocab_size, dtype=np.float64)
    probs[c.token_ids.astype(np.int64)] = c.values.astype(np.float64)
    return LogDist.from_probs(Vocab(c.vocab_size), probs)


def wire_canonical(p: LogDist, p_threshold: float, token: int) -> LogDist:
    """The distribution as every consumer of the wire sees it.

    Both peers aggregate on this canonical form, the drafting side included,
    so the run's output cannot depend on which side happens to aggregate.
    """
    return topp_decode(topp_encode(p, p_threshold, force_token=token))


def inverse_cdf_sample(probs: np.ndarray, u: float) -> int:
    """Smallest token id whose cumulative probability exceeds u.

    One uniform draw reproduces the pick bit-exactly anywhere; probs need not
    be normalized (u scales with the total mass).
    """
    cdf = np.cumsum(probs)
    total = cdf[-1]
    if total <= 0.0:
        raise ValueError("cannot sample from zero-mass vector")
    idx = int(np.searchsorted(cdf, u * total, side="right"))
    if idx >= probs.size:
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx
