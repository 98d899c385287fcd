"""Lexically constrained decoding.

Plain beam search plus a grid variant that frames decoding in a
(constraint coverage x time) matrix: cell (c, t) holds a beam of partial
sequences with t+1 generated tokens containing exactly c distinct
constraint words. A cell is fed both by free continuations of the previous
column and by forced constraint insertions from the row below, and every
new hypothesis is routed to the row matching its actual coverage, however
the word arrived. Row n therefore holds exactly the sequences that satisfy
all n constraints.

Forced tokens keep their model log-probability instead of being scored as
free insertions, which is what makes the sequence score differentiable:
``sequence_logprob`` recomputes the whole sum under the trainable model so
reward gradients flow through constrained decodes too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class SearchError(Exception):
    """The search produced no usable hypothesis."""


class InfeasibleConstraintsError(SearchError):
    """More constraints than the decoding budget can hold."""


@dataclass(frozen=True)
class Hypothesis:
    """A partial or finished decode; tokens exclude BOS."""

    tokens: tuple[int, ...]
    logprob: float
    met: frozenset[int] = frozenset()
    finished: bool = False
    forced: tuple[int, ...] = ()  # positions filled by constraint insertion

    def sort_key(self):
        return (-self.logprob, self.tokens)

    def normalized_key(self, length_norm: str):
        if length_norm == "per_token":
            return (-self.logprob / max(1, len(self.tokens)), self.tokens)
        return self.sort_key()


@dataclass(frozen=True)
class ConstraintSet:
    """Ordered distinct single-token constraint words with their ids."""

    words: tuple[str, ...]
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.words) != len(self.ids):
            raise ValueError("words and ids are misaligned")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate constraint ids")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def empty(cls) -> "ConstraintSet":
        return cls((), ())

    @classmethod
    def from_words(cls, words, vocab, max_constraints: int = 5) -> "ConstraintSet":
        words = tuple(dict.fromkeys(words))
        if len(words) > max_constraints:
            raise ValueError(f"{len(words)} constraints exceed cap {max_constraints}")
        reserved = {vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id}
        ids = []
        for w in words:
            i = vocab.token_to_id.get(w)
            if i is None or i in reserved:
                raise ValueError(f"constraint {w!r} is not a usable vocabulary token")
            ids.append(i)
        return cls(words, tuple(ids))


def feasible_coverage(t: int, n: int, T: int) -> range:
    """Coverage rows that may be populated after t generated tokens.

    Lower edge: rows that can still reach full coverage n within the T-token
    budget. Upper edge: t tokens cover at most min(t, n) constraints.
    """
    lo = max(0, n + t - T)
    hi = min(t, n)
    return range(lo, hi + 1)


def add_constr(h: Hypothesis, constraints: ConstraintSet, step_logprobs) -> list[Hypothesis]:
    """One forced continuation per still-unmet constraint word.

    The appended token is scored with the model's own log-probability for
    it, never substituted by zero.
    """
    if h.finished:
        raise SearchError("cannot extend a finished hypothesis")
    out = []
    for cid in constraints.ids:
        if cid in h.met:
            continue
        out.append(Hypothesis(
            tokens=h.tokens + (cid,),
            logprob=h.logprob + float(step_logprobs[cid]),
            met=h.met | {cid},
            finished=False,
            forced=h.forced + (len(h.tokens),),
        ))
    return out


@dataclass
class GridResult:
    best: Hypothesis
    finished: list[Hypothesis]  # all finished full-coverage hypotheses, ranked
    trace: list[dict] = field(default_factory=list)


def _prune(cands: dict[tuple, Hypothesis], k: int) -> list[Hypothesis]:
    ranked = sorted(cands.values(), key=Hypothesis.sort_key)
    return ranked[:k]


def run_grid_search(model, constraints: ConstraintSet, k: int, T: int,
                    trace: bool = False, token_names=None,
                    length_norm: str = "none") -> GridResult:
    """Fill the coverage-by-time grid and return the best full-coverage decode.

    ``model`` provides ``bos_id``, ``eos_id``, ``vocab_size`` and
    ``step(prefix_ids) -> log-prob array``. Ties break on token ids so the
    search is deterministic for identical inputs. Beams prune on the raw
    log-prob sum; ``length_norm="per_token"`` switches only the final
    ranking of finished hypotheses to a mean per token.
    """
    if length_norm not in ("none", "per_token"):
        raise ValueError(f"unknown length_norm {length_norm!r}")
    n = len(constraints)
    if k < 1 or T < 1:
        raise ValueError("beam size and budget must be positive")
    if n >= T:
        raise InfeasibleConstraintsError(f"{n} constraints cannot fit a budget of {T}")
    constraint_ids = set(constraints.ids)
    eos = model.eos_id
    root = Hypothesis(tokens=(), logprob=0.0)

    # cells[c][t]; column t holds hypotheses with t+1 generated tokens
    cells: list[list[list[Hypothesis]]] = [[[] for _ in range(T)] for _ in range(n + 1)]
    finished_full: list[Hypothesis] = []
    trace_rows: list[dict] = []

    for t in range(T):
        window = feasible_coverage(t + 1, n, T)
        new_cells: dict[int, dict[tuple, Hypothesis]] = {c: {} for c in window}

        def offer(h: Hypothesis):
            c = len(h.met)
            bucket = new_cells.get(c)
            if bucket is not None and h.tokens not in bucket:
                bucket[h.tokens] = h

        parents: list[Hypothesis] = []
        if t == 0:
            parents = [root]
        else:
            for c in feasible_coverage(t, n, T):
                parents.extend(cells[c][t - 1])

        for parent in parents:
            if parent.finished:
                continue
            lp = model.step((model.bos_id,) + parent.tokens)
            for tok in range(model.vocab_size):
                met = parent.met
                if tok in constraint_ids and tok not in met:
                    met = met | {tok}
                offer(Hypothesis(
                    tokens=parent.tokens + (tok,),
                    logprob=parent.logprob + float(lp[tok]),
                    met=met,
                    finished=(tok == eos),
                    forced=parent.forced,
                ))
            if len(parent.met) < n:
                for h in add_constr(parent, constraints, lp):
                    offer(h)

        for c in window:
            kept = _prune(new_cells[c], k)
            for h in kept:
                assert len(h.tokens) == t + 1 and len(h.met) == c
            cells[c][t] = kept
            if c == n:
                finished_full.extend(h for h in kept if h.finished)
            if trace:
                trace_rows.append({
                    "t": t, "c": c,
                    "hyps": [{
                        "tokens": (token_names(h.tokens) if token_names
                                   else list(h.tokens)),
                        "logprob": h.logprob,
                        "finished": h.finished,
                    } for h in kept],
                })

    finished_full.sort(key=lambda h: h.normalized_key(length_norm))
    if finished_full:
        return GridResult(best=finished_full[0], finished=finished_full,
                          trace=trace_rows)

    # no finished full-coverage decode: fall back to the most complete
    # unfinished one, flagged by finished=False
    for t in range(T - 1, -1, -1):
        open_hyps = [h for h in cells[n][t] if not h.finished]
        if open_hyps:
            best = min(open_hyps, key=lambda h: h.normalized_key(length_norm))
            return GridResult(best=best, finished=[], trace=trace_rows)
    raise SearchError("no hypothesis ever reached full constraint coverage")


def grid_beam_search(model, constraints: ConstraintSet, k: int, T: int,
                     length_norm: str = "none") -> Hypothesis:
    """Best finished hypothesis containing every constraint word."""
    return run_grid_search(model, constraints, k, T, length_norm=length_norm).best


def beam_search(model, k: int, T: int, length_norm: str = "none") -> Hypothesis:
    """Length-bounded beam search; the unconstrained case of the grid."""
    return run_grid_search(model, ConstraintSet.empty(), k, T,
                           length_norm=length_norm).best


def sequence_logprob(tokens, forced_positions, model) -> Tensor:
    """Differentiable sum of per-token log-probs for a completed decode.

    Free and forced positions are scored identically under the trainable
    model (a forced token's probability is the model's own), so the scalar
    matches the search-time hypothesis score and its gradient reaches every
    parameter.
    """
    tokens = tuple(int(x) for x in tokens)
    if not tokens:
        raise ValueError("cannot score an empty sequence")
    for pos in forced_positions:
        if not 0 <= pos < len(tokens):
            raise ValueError(f"forced position {pos} outside sequence")
    lsm = model.all_step_logprobs((model.bos_id,) + tokens)
    rows = np.arange(len(tokens))
    picked = nm.take(lsm, rows, np.asarray(tokens, dtype=np.intp))
    return nm.tsum(picked)
