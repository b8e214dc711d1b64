"""Synonym variant normalization, frozen synonym embedding, and
diversity-maximizing selection of a fixed number of synonyms per code.

Selection maximizes the sum of pairwise cosine distances among the chosen
synonyms.  A branch-and-bound solver handles lists up to EXACT_LIMIT
synonyms; larger lists fall back to a greedy heuristic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import textenc
from .textenc import EncoderParams, Vocabulary

EXACT_LIMIT = 24

_KEPT_SPECIALS = set("-()[]")
_CONJUNCTIONS = {"and", "or"}


def normalize_variants(raw: str) -> list[str]:
    """The raw synonym plus a cleaned variant, de-duplicated.

    Cleaning strips special characters except hyphens and brackets, drops
    standalone "and"/"or", and collapses whitespace.
    """
    base = " ".join(raw.split())
    cleaned_chars = [ch if ch.isalnum() or ch.isspace() or ch in _KEPT_SPECIALS
                     else " " for ch in raw]
    words = "".join(cleaned_chars).split()
    cleaned = " ".join(w for w in words if w.lower() not in _CONJUNCTIONS)
    variants = []
    for v in (base, cleaned):
        if v and v not in variants:
            variants.append(v)
    return variants


@dataclass
class SynonymRecord:
    code: str
    variants: list[str]

    def __post_init__(self):
        if not self.variants:
            raise ValueError(f"code {self.code!r} has no synonym variants")
        if len(set(self.variants)) != len(self.variants):
            raise ValueError(f"code {self.code!r} has duplicate variants")

    @classmethod
    def from_raw(cls, code: str, raw_synonyms: Iterable[str]) -> "SynonymRecord":
        variants: list[str] = []
        for raw in raw_synonyms:
            for v in normalize_variants(raw):
                if v not in variants:
                    variants.append(v)
        return cls(code=code, variants=variants)


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances, symmetric with a zero diagonal."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-d matrix of vectors, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    zero = np.where(norms == 0)[0]
    if zero.size:
        raise ValueError(f"zero-norm vector at row {zero[0]}: cosine distance undefined")
    unit = v / norms[:, None]
    d = 1.0 - unit @ unit.T
    d = 0.5 * (d + d.T)
    np.clip(d, 0.0, 2.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class Selection:
    indices: tuple[int, ...]
    objective: float
    mode: str

    def as_bool_vector(self, n: int) -> np.ndarray:
        x = np.zeros(n, dtype=bool)
        x[list(self.indices)] = True
        return x


def pairwise_objective(d: np.ndarray, indices: Sequence[int]) -> float:
    idx = list(indices)
    return float(d[np.ix_(idx, idx)].sum() / 2.0)


def _check_selection_inputs(d: np.ndarray, m: int) -> int:
    d = np.asarray(d)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {d.shape}")
    n = d.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"target count {m} outside [1, {n}]")
    return n


def select_exact(d: np.ndarray, m: int) -> Selection:
    """Optimal size-m subset by branch and bound over index-ordered subsets.

    The bound at each node adds, for every remaining slot, the largest
    achievable cross distance to the chosen set plus half the candidate's
    largest within-candidate distances.  Ties resolve to the
    lexicographically smallest index set because depth-first search visits
    subsets in index order and only strict improvements replace the
    incumbent.
    """
    d = np.asarray(d, dtype=np.float64)
    n = _check_selection_inputs(d, m)
    if n > EXACT_LIMIT:
        raise ValueError(f"exact mode handles at most {EXACT_LIMIT} synonyms, "
                         f"got {n}; use select_greedy")

    best_obj = -1.0
    best: tuple[int, ...] | None = None

    def dfs(start: int, chosen: list[int], obj: float) -> None:
        nonlocal best_obj, best
        r = m - len(chosen)
        if r == 0:
            if obj > best_obj + 1e-12:
                best_obj, best = obj, tuple(chosen)
            return
        cands = np.arange(start, n)
        if len(cands) < r:
            return
        cross = d[np.ix_(cands, chosen)].sum(axis=1) if chosen else np.zeros(len(cands))
        if r > 1:
            within = np.sort(d[np.ix_(cands, cands)], axis=1)[:, -(r - 1):].sum(axis=1)
        else:
            within = np.zeros(len(cands))
        potential = cross + 0.5 * within
        bound = obj + np.sort(potential)[-r:].sum()
        if bound <= best_obj + 1e-12:
            return
        for pos, i in enumerate(cands):
            dfs(int(i) + 1, chosen + [int(i)], obj + float(cross[pos]))

    dfs(0, [], 0.0)
    assert best is not None
    return Selection(indices=best, objective=best_obj, mode="exact")


def select_greedy(d: np.ndarray, m: int) -> Selection:
    """Heuristic: seed with the farthest pair, then grow by marginal distance.

    Ties always resolve to the lowest index, so the result is deterministic.
    """
    d = np.asarray(d, dtype=np.float64)
    n = _check_selection_inputs(d, m)
    if m == 1:
        return Selection(indices=(0,), objective=0.0, mode="greedy")

    iu = np.triu_indices(n, k=1)
    k = int(np.argmax(d[iu]))  # triu order is lexicographic, argmax takes the first
    chosen = [int(iu[0][k]), int(iu[1][k])]
    while len(chosen) < m:
        marginal = d[:, chosen].sum(axis=1)
        marginal[chosen] = -np.inf
        chosen.append(int(np.argmax(marginal)))
    chosen.sort()
    return Selection(indices=tuple(chosen),
                     objective=pairwise_objective(d, chosen), mode="greedy")


def select_random(n: int, m: int, rng: np.random.Generator) -> Selection:
    """Uniform size-m subset, for the random-selection ablation."""
    if not 1 <= m <= n:
        raise ValueError(f"target count {m} outside [1, {n}]")
    idx = tuple(sorted(int(i) for i in rng.choice(n, size=m, replace=False)))
    return Selection(indices=idx, objective=float("nan"), mode="random")


def select_diverse(d: np.ndarray, m: int) -> Selection:
    """Exact selection where feasible, greedy beyond the exact-size limit."""
    if np.asarray(d).shape[0] <= EXACT_LIMIT:
        return select_exact(d, m)
    return select_greedy(d, m)


# ---------------------------------------------------------------------------
# frozen code embeddings
# ---------------------------------------------------------------------------

@dataclass
class CodeEmbedding:
    code: str
    q: np.ndarray              # (m, hidden) selected synonym [CLS] vectors
    v: np.ndarray              # (hidden,) row mean of q
    selected: tuple[str, ...]  # synonym texts backing the rows of q
    objective: float
    mode: str


class CodeEmbeddings:
    """Frozen per-code synonym matrices and pooled code vectors.

    Rows of ``q_stack[l, z]`` are the selected synonym vectors of code ``l``;
    ``v_matrix[l]`` is their mean.  Values never change during training,
    which ``state_hash`` lets callers assert.
    """

    def __init__(self, entries: list[CodeEmbedding]):
        if not entries:
            raise ValueError("no code embeddings")
        self.entries = entries
        self.codes = [e.code for e in entries]
        self.q_stack = np.stack([e.q for e in entries]).astype(np.float32)
        self.v_matrix = np.stack([e.v for e in entries]).astype(np.float32)
        self.q_stack.flags.writeable = False
        self.v_matrix.flags.writeable = False

    @property
    def num_codes(self) -> int:
        return len(self.entries)

    @property
    def synonyms_per_code(self) -> int:
        return self.q_stack.shape[1]

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.q_stack.tobytes())
        h.update(self.v_matrix.tobytes())
        return h.hexdigest()

    def selection_report(self) -> dict:
        return {e.code: {"selected": list(e.selected),
                         "objective": e.objective,
                         "mode": e.mode}
                for e in self.entries}


def build_code_embeddings(codebook: Sequence[SynonymRecord],
                          encoder: EncoderParams, vocab: Vocabulary,
                          m: int, selection: str = "diverse",
                          rng: np.random.Generator | None = None) -> CodeEmbeddings:
    """Embed every variant, pick ``m`` per code, pool into code vectors.

    Codes with fewer than ``m`` variants cycle what they have to fill all
    rows.  ``selection`` is "diverse" (exact solver with greedy fallback),
    "greedy", or "random" (requires ``rng``).
    """
    if selection not in ("diverse", "greedy", "random"):
        raise ValueError(f"unknown selection mode {selection!r}")
    if selection == "random" and rng is None:
        raise ValueError("random selection needs an rng")

    entries = []
    for rec in codebook:
        if not rec.variants:
            raise ValueError(f"code {rec.code!r} has no variants")
        vectors = np.stack([
            textenc.encode_text_cls(textenc.tokenize(v, vocab), encoder).data
            for v in rec.variants
        ])
        n = len(rec.variants)
        if n <= m:
            idx = [i % n for i in range(m)]
            sel = Selection(indices=tuple(range(n)),
                            objective=pairwise_objective(
                                cosine_distance_matrix(vectors), range(n)),
                            mode="exact")
        else:
            d = cosine_distance_matrix(vectors)
            if selection == "random":
                sel = select_random(n, m, rng)
                sel = Selection(indices=sel.indices,
                                objective=pairwise_objective(d, sel.indices),
                                mode="random")
            elif selection == "greedy":
                sel = select_greedy(d, m)
            else:
                sel = select_diverse(d, m)
            idx = list(sel.indices)
        q = vectors[idx]
        entries.append(CodeEmbedding(
            code=rec.code,
            q=q.astype(np.float32),
            v=q.mean(axis=0).astype(np.float32),
            selected=tuple(rec.variants[i] for i in sel.indices),
            objective=sel.objective,
            mode=sel.mode,
        ))
    return CodeEmbeddings(entries)


# ---------------------------------------------------------------------------
# codebook files
# ---------------------------------------------------------------------------

def write_codebook(path, records: Iterable[dict]) -> None:
    """Write codebook records as JSON Lines: {"code", "synonyms"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_codebook(path, normalize: bool = True) -> list[SynonymRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "code" not in rec or "synonyms" not in rec:
                raise ValueError(f"{path}:{lineno}: expected keys 'code' and 'synonyms'")
            if normalize:
                records.append(SynonymRecord.from_raw(rec["code"], rec["synonyms"]))
            else:
                records.append(SynonymRecord(rec["code"], list(rec["synonyms"])))
    return records


def write_selection_report(path, embeddings: CodeEmbeddings) -> None:
    Path(path).write_text(json.dumps(embeddings.selection_report(), indent=2,
                                     sort_keys=True) + "\n", encoding="utf-8")
