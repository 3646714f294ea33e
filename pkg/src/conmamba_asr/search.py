"""Greedy and beam-search decoding.

Search runs against a *scorer*: any object with ``bos_id``, ``eos_id``,
``init_state()``, ``step(state, last_tokens) -> (log_probs (k, V), state)`` and
``reorder(state, index)``. :class:`ModelScorer` adapts a trained model for one
utterance; tests plug in hand-written probability tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .decoder import DecoderState
from .encoder import EncodedSequence


@dataclass
class Hypothesis:
    tokens: list[int]  # BOS-prefixed
    log_prob: float = 0.0
    finished: bool = False
    truncated: bool = False
    state: object = field(default=None, repr=False, compare=False)

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def normalized_score(self, alpha: float) -> float:
        return self.log_prob / (((5.0 + self.length) / 6.0) ** alpha)


class ModelScorer:
    """Step-wise log-probabilities of an :class:`ASRModel` for one encoded utterance.

    Each hypothesis is stepped as its own batch of one, so its score does not
    depend on which other hypotheses share the beam: batched float32 kernels
    round differently from batch-1 ones, which would let the same token
    sequence score differently under greedy and beam search.
    """

    def __init__(self, model, enc: EncodedSequence, bos_id: int = 1, eos_id: int = 2):
        if enc.frames.shape[0] != 1:
            raise ValueError("ModelScorer decodes one utterance at a time")
        self.decoder = model.decoder if hasattr(model, "decoder") else model
        self.enc = enc
        self.bos_id, self.eos_id = bos_id, eos_id

    def init_state(self) -> list[DecoderState]:
        return [self.decoder.init_state(self.enc)]

    @torch.no_grad()
    def step(self, states, last_tokens: torch.Tensor):
        rows, new_states = [], []
        for s, tok in zip(states, last_tokens.reshape(-1, 1)):
            logits, s = self.decoder.decode_step(s, tok)
            rows.append(logits)
            new_states.append(s)
        return torch.log_softmax(torch.cat(rows).double(), dim=-1), new_states

    def reorder(self, states, index: torch.Tensor):
        return [states[i] for i in index.tolist()]


def greedy_decode(scorer, max_len: int) -> Hypothesis:
    """Argmax at every step; ties go to the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    state = scorer.init_state()
    hyp = Hypothesis([scorer.bos_id])
    for _ in range(max_len):
        logp, state = scorer.step(state, torch.tensor([hyp.tokens[-1]]))
        tok = int(torch.argmax(logp[0]))  # first maximal index
        hyp.tokens.append(tok)
        hyp.log_prob += float(logp[0, tok])
        if tok == scorer.eos_id:
            hyp.finished = True
            break
    hyp.truncated = not hyp.finished
    hyp.state = state
    return hyp


def _settled(finished, active, beam_size, alpha, max_len) -> bool:
    """True once no active hypothesis can displace the k-th best finished one.

    Log-probs only fall as a hypothesis grows and the length penalty peaks at
    ``max_len``, so ``log_prob / lp(max_len)`` bounds every future score.
    """
    if len(finished) < beam_size:
        return False
    kth = sorted((h.normalized_score(alpha) for h in finished), reverse=True)[beam_size - 1]
    bound = max(h.log_prob for h in active) / (((5.0 + max_len) / 6.0) ** alpha)
    return bound < kth


def beam_search(scorer, beam_size: int = 8, length_penalty_alpha: float = 0.6,
                max_len: int = 200) -> list[Hypothesis]:
    """Beam search with a completed pool, ranked by ``log_prob / ((5 + len) / 6) ** alpha``.

    Candidates are ordered by score with ties resolved by (beam slot, token id),
    so ``beam_size=1`` reproduces :func:`greedy_decode` token for token. If no
    hypothesis finishes within ``max_len`` steps, the best unfinished ones are
    returned with ``truncated=True``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    state = scorer.init_state()
    active = [Hypothesis([scorer.bos_id])]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        last = torch.tensor([h.tokens[-1] for h in active])
        logp, state = scorer.step(state, last)
        base = torch.tensor([h.log_prob for h in active], dtype=logp.dtype)
        cand = (base.unsqueeze(1) + logp).reshape(-1)
        order = torch.sort(cand, descending=True, stable=True).indices.tolist()
        V = logp.shape[1]
        keep, next_active = [], []
        for rank, flat in enumerate(order):
            score = float(cand[flat])
            if score == float("-inf") or len(next_active) == beam_size:
                break
            src, tok = divmod(flat, V)
            hyp = Hypothesis(active[src].tokens + [tok], score)
            if tok == scorer.eos_id:
                if rank < beam_size:
                    hyp.finished = True
                    finished.append(hyp)
            else:
                keep.append(src)
                next_active.append(hyp)
        if not next_active or _settled(finished, next_active, beam_size, length_penalty_alpha, max_len):
            break
        active = next_active
        state = scorer.reorder(state, torch.tensor(keep))
    if not finished:
        for h in active:
            h.truncated = True
        pool = active
    else:
        pool = finished
    ranked = sorted(pool, key=lambda h: -h.normalized_score(length_penalty_alpha))
    return ranked[:beam_size]
