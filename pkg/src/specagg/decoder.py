"""Deterministic document-conditioned toy decoder.

Each side drafts tokens from a mixture of per-document conditionals.  The
conditional is a per-document bigram table with add-one smoothing over the
document's distinct tokens; when the previous token has no successors in the
document, a categorical seeded by (doc id, previous token) stands in.  This
keeps the two sides' distributions genuinely different yet fully
reproducible from (context, documents, scores, seed) alone.  The decoder has
no hidden state, so rolling back is just truncating the context.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .common import Side
from .dists import LogDist, Vocab, inverse_cdf_sample, logsumexp
from .retrieval import Document, relevance_score
from .rng import derive_seed


class ContextExhaustedError(RuntimeError):
    """The context window is full; no further tokens can be decoded."""


@dataclass(frozen=True)
class DraftRecord:
    """One drafted token with everything the aggregator needs.

    step counts generated tokens (0-based, prompt excluded); dist assigns the
    drafted token nonzero probability by construction.
    """

    side: Side
    step: int
    token: int
    dist: LogDist
    h: float
    decode_ms: float


@dataclass
class DecoderState:
    """Owned by exactly one decoding task; mutated in place.

    context holds prompt + generated-so-far; scores carry the current
    relevance estimate per retrieved document.
    """

    vocab: Vocab
    docs: tuple[Document, ...]
    scores: np.ndarray
    context: list[int]
    prompt_len: int
    seed: int
    max_context: int
    chunk_size: int
    side: Side = Side.DEVICE

    @classmethod
    def start(
        cls,
        vocab: Vocab,
        retrieved: Sequence[tuple[Document, float]],
        prompt: Sequence[int],
        seed: int,
        max_context: int,
        chunk_size: int,
        side: Side = Side.DEVICE,
    ) -> "DecoderState":
        if not retrieved:
            raise ValueError("decoder needs at least one document")
        if len(prompt) >= max_context:
            raise ValueError("prompt already fills the context window")
        docs = tuple(doc for doc, _ in retrieved)
        for doc in docs:
            bad = [t for t in doc.tokens if t >= vocab.size]
            if bad:
                raise ValueError(f"document {doc.id} has tokens outside vocab: {bad[:4]}")
        scores = np.array([score for _, score in retrieved], dtype=np.float64)
        return cls(
            vocab=vocab,
            docs=docs,
            scores=scores,
            context=list(prompt),
            prompt_len=len(prompt),
            seed=seed,
            max_context=max_context,
            chunk_size=chunk_size,
            side=side,
        )

    @property
    def step(self) -> int:
        return len(self.context)

    @property
    def gen_step(self) -> int:
        return len(self.context) - self.prompt_len


@lru_cache(maxsize=4096)
def _conditional(doc: Document, prev: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Sparse next-token probabilities for one document. Cached: pure function."""
    support = tuple(sorted(set(doc.tokens)))
    counts = {t: 0 for t in support}
    row_total = 0
    for a, b in zip(doc.tokens, doc.tokens[1:]):
        if a == prev:
            counts[b] += 1
            row_total += 1
    if row_total > 0:
        weights = np.array([counts[t] + 1.0 for t in support])
    else:
        rng = np.random.default_rng(derive_seed(doc.id, "fallback", prev))
        weights = rng.exponential(size=len(support))
    weights = weights / weights.sum()
    return support, tuple(float(w) for w in weights)


def doc_conditional(doc: Document, prev: int, vocab: Vocab) -> np.ndarray:
    """Full log-prob vector for p(next | doc, previous token)."""
    support, weights = _conditional(doc, prev)
    logp = np.full(vocab.size, -np.inf)
    logp[list(support)] = np.log(weights)
    return logp


def rerank(state: DecoderState) -> np.ndarray:
    """Recompute relevance from the trailing context window, in place.

    Window length equals the corpus chunk size.  Also refreshes the corrected
    weight implicitly: it is always the log-sum-exp of the current scores.
    """
    window = state.context[-state.chunk_size :]
    state.scores = np.array(
        [relevance_score(window, doc) for doc in state.docs], dtype=np.float64
    )
    return state.scores


def corrected_weight(state: DecoderState) -> float:
    return float(logsumexp(state.scores))


def local_mixture(state: DecoderState) -> LogDist:
    """Per-side mixture: softmax(scores) over per-document conditionals."""
    prev = state.context[-1]
    log_w = state.scores - logsumexp(state.scores)
    table = np.stack([doc_conditional(doc, prev, state.vocab) for doc in state.docs])
    mixed = logsumexp(table + log_w[:, None], axis=0)
    return LogDist(state.vocab, np.asarray(mixed) - logsumexp(np.asarray(mixed)))


def decode_step(state: DecoderState, rng_draw: float) -> DraftRecord:
    """Draft one token from the locally-aggregated mixture and extend context.

    The token is picked by inverse CDF over ascending token id, so the single
    uniform reproduces the draw bit-exactly in any implementation.
    """
    if len(state.context) >= state.max_context:
        raise ContextExhaustedError(
            f"context {len(state.context)} >= max {state.max_context}"
        )
    started = time.perf_counter()
    dist = local_mixture(state)
    token = inverse_cdf_sample(dist.probs(), rng_draw)
    h = corrected_weight(state)
    step = state.gen_step
    state.context.append(token)
    return DraftRecord(
        side=state.side,
        step=step,
        token=token,
        dist=dist,
        h=h,
        decode_ms=(time.perf_counter() - started) * 1000.0,
    )


def rollback(state: DecoderState, accepted_prefix: Sequence[int], next_input: int) -> None:
    """Truncate context to the accepted prefix and feed the target token.

    Document scores are left untouched; the next rerank/decode pair rebuilds
    everything that depended on the discarded suffix.
    """
    if len(accepted_prefix) > len(state.context):
        raise ValueError(
            f"prefix length {len(accepted_prefix)} exceeds context {len(state.context)}"
        )
    state.context[:] = list(accepted_prefix) + [next_input]
