"""Tokenization, smooth overlapping chunking, and a small trainable
transformer encoder producing per-token matrices and a [CLS] vector.

Chunks hold a fixed number of token slots; the last occupied slot is always
the separator, the rest of the tail is padding excluded from attention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3


class Vocabulary:
    """Bidirectional token/id table with four fixed reserved ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = list(RESERVED_TOKENS)
        self._index: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token in self._index:
            return self._index[token]
        self._index[token] = len(self._tokens)
        self._tokens.append(token)
        return self._index[token]

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({w for text in texts for w in text.lower().split()})
        return cls(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED_TOKENS:
            raise ValueError(f"{path}: first four vocabulary lines must be "
                             f"{RESERVED_TOKENS}, got {lines[:4]}")
        return cls(lines[4:])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercased whitespace tokenization; unknown words map to [UNK]."""
    return [vocab.id(w) for w in text.lower().split()]


@dataclass
class Document:
    id: str
    tokens: list[int]
    gold_codes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if any(t < len(RESERVED_TOKENS) for t in self.tokens):
            raise ValueError(f"document {self.id}: reserved token ids are not "
                             "allowed inside document text")
        self.gold_codes = frozenset(self.gold_codes)

    def label_vector(self, num_codes: int) -> np.ndarray:
        y = np.zeros(num_codes, dtype=np.float32)
        for c in self.gold_codes:
            y[c] = 1.0
        return y


@dataclass
class Chunk:
    ids: np.ndarray    # (chunk_len,) int64, SEP at the last occupied slot
    mask: np.ndarray   # (chunk_len,) bool, True through the SEP
    index: int


def chunk_count(n_tokens: int, chunk_len: int, overlap: int) -> int:
    """Closed-form number of chunks for a document of ``n_tokens`` tokens."""
    capacity = chunk_len - 1
    stride = capacity - overlap
    if n_tokens <= capacity:
        return 1
    return 1 + math.ceil((n_tokens - capacity) / stride)


def chunk_document(tokens: Sequence[int], chunk_len: int, overlap: int) -> list[Chunk]:
    """Split a token sequence into overlapping fixed-length chunks.

    Each chunk offers ``chunk_len - 1`` content slots followed by a separator;
    consecutive chunks share exactly ``overlap`` content tokens.  The final
    chunk is padded and masked.
    """
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot chunk an empty token sequence")
    if not 0 <= overlap < chunk_len - 1:
        raise ValueError(f"overlap must satisfy 0 <= overlap < chunk_len - 1, "
                         f"got overlap={overlap}, chunk_len={chunk_len}")
    capacity = chunk_len - 1
    stride = capacity - overlap
    count = chunk_count(n, chunk_len, overlap)
    arr = np.asarray(tokens, dtype=np.int64)

    chunks = []
    for c in range(count):
        content = arr[c * stride: c * stride + capacity]
        ids = np.full(chunk_len, PAD_ID, dtype=np.int64)
        ids[:len(content)] = content
        ids[len(content)] = SEP_ID
        mask = np.zeros(chunk_len, dtype=bool)
        mask[:len(content) + 1] = True
        chunks.append(Chunk(ids=ids, mask=mask, index=c))
    return chunks


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    """Weights of one pre-norm self-attention block."""

    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    """Token and positional embeddings plus self-attention block weights."""

    hidden: int
    heads: int
    max_len: int
    vocab_size: int
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[BlockParams]

    @classmethod
    def init(cls, vocab_size: int, hidden: int = 64, heads: int = 4,
             max_len: int = 512, num_blocks: int = 1, seed: int = 0,
             dtype=np.float32) -> "EncoderParams":
        """Initialize for training from scratch.

        Value and output projections start near the identity and the FFN
        output near zero, so at initialization the residual stream (and the
        [CLS] summary read off it) stays in token-embedding space.  Frozen
        synonym vectors taken from the fresh encoder then share a space
        with the token keys they must match, which is what lets attention
        find planted mentions without a pretrained encoder.  Positional
        embeddings start at zero and are learned.
        """
        if hidden % heads != 0:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        rng = np.random.default_rng(seed)

        def xavier(rows, cols):
            s = math.sqrt(2.0 / (rows + cols))
            return Tensor(rng.normal(0.0, s, size=(rows, cols)).astype(dtype),
                          requires_grad=True)

        def eye_ish(n):
            w = np.eye(n) + rng.normal(0.0, 0.02, size=(n, n))
            return Tensor(w.astype(dtype), requires_grad=True)

        def small(rows, cols):
            return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)).astype(dtype),
                          requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        ffn = 2 * hidden
        blocks = [
            BlockParams(
                ln1_g=ones(hidden), ln1_b=zeros(hidden),
                wq=xavier(hidden, hidden), bq=zeros(hidden),
                wk=xavier(hidden, hidden), bk=zeros(hidden),
                wv=eye_ish(hidden), bv=zeros(hidden),
                wo=eye_ish(hidden), bo=zeros(hidden),
                ln2_g=ones(hidden), ln2_b=zeros(hidden),
                w1=xavier(hidden, ffn), b1=zeros(ffn),
                w2=small(ffn, hidden), b2=zeros(hidden),
            )
            for _ in range(num_blocks)
        ]
        return cls(hidden=hidden, heads=heads, max_len=max_len,
                   vocab_size=vocab_size,
                   tok_emb=Tensor(rng.normal(0.0, 0.1, size=(vocab_size, hidden))
                                  .astype(dtype), requires_grad=True),
                   pos_emb=zeros(max_len, hidden),
                   blocks=blocks)

    def named(self) -> dict[str, Tensor]:
        out = {"enc.tok_emb": self.tok_emb, "enc.pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            for fname in blk.__dataclass_fields__:
                out[f"enc.block{i}.{fname}"] = getattr(blk, fname)
        return out


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = dc.tmean(x, axis=-1, keepdims=True)
    centered = dc.sub(x, mu)
    var = dc.tmean(dc.mul(centered, centered), axis=-1, keepdims=True)
    inv = dc.div(centered, dc.sqrt(dc.add(var, eps)))
    return dc.add(dc.mul(inv, g), b)


def _self_attention(h: Tensor, mask: np.ndarray, blk: BlockParams, heads: int) -> Tensor:
    n, hidden = h.shape
    dh = hidden // heads
    q = dc.add(dc.matmul(h, blk.wq), blk.bq)
    k = dc.add(dc.matmul(h, blk.wk), blk.bk)
    v = dc.add(dc.matmul(h, blk.wv), blk.bv)
    scale = 1.0 / math.sqrt(dh)
    key_mask = mask[None, :]
    outs = []
    for z in range(heads):
        qz = dc.narrow(q, 1, z * dh, dh)
        kz = dc.narrow(k, 1, z * dh, dh)
        vz = dc.narrow(v, 1, z * dh, dh)
        scores = dc.mul(dc.matmul(qz, dc.transpose(kz)), scale)
        att = dc.masked_softmax(scores, key_mask, axis=-1)
        outs.append(dc.matmul(att, vz))
    merged = dc.concat(outs, axis=1)
    return dc.add(dc.matmul(merged, blk.wo), blk.bo)


def _encode_ids(ids: np.ndarray, mask: np.ndarray, params: EncoderParams) -> Tensor:
    n = len(ids)
    if n > params.max_len:
        raise ValueError(f"sequence of length {n} exceeds encoder maximum "
                         f"{params.max_len}")
    x = dc.add(dc.embedding(params.tok_emb, ids),
               dc.narrow(params.pos_emb, 0, 0, n))
    for blk in params.blocks:
        attended = _self_attention(_layer_norm(x, blk.ln1_g, blk.ln1_b), mask,
                                   blk, params.heads)
        x = dc.add(x, attended)
        pre = _layer_norm(x, blk.ln2_g, blk.ln2_b)
        f = dc.add(dc.matmul(dc.relu(dc.add(dc.matmul(pre, blk.w1), blk.b1)),
                             blk.w2), blk.b2)
        x = dc.add(x, f)
    return x


def encode_chunk(chunk: Chunk, params: EncoderParams) -> Tensor:
    """Per-token representations for one chunk, shape (chunk_len, hidden).

    Padded positions produce rows too; the chunk mask flags them for
    exclusion downstream.
    """
    return _encode_ids(chunk.ids, chunk.mask, params)


def encode_text_cls(tokens: Sequence[int], params: EncoderParams) -> Tensor:
    """Encode ``[CLS] tokens [SEP]`` and return the [CLS] row, shape (hidden,)."""
    if len(tokens) > params.max_len - 2:
        raise ValueError(f"text of {len(tokens)} tokens does not fit: maximum is "
                         f"{params.max_len - 2} plus [CLS] and [SEP]")
    ids = np.asarray([CLS_ID, *tokens, SEP_ID], dtype=np.int64)
    mask = np.ones(len(ids), dtype=bool)
    out = _encode_ids(ids, mask, params)
    return dc.reshape(dc.narrow(out, 0, 0, 1), (params.hidden,))


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def write_corpus(path, records: Iterable[dict]) -> None:
    """Write corpus records as JSON Lines: {"id", "tokens", "codes"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_corpus(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("id", "tokens", "codes"):
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing key {key!r}")
            records.append(rec)
    return records


def documents_from_records(records: Iterable[dict], vocab: Vocabulary,
                           code_index: dict[str, int]) -> list[Document]:
    docs = []
    for rec in records:
        ids = [vocab.id(w.lower()) for w in rec["tokens"]]
        gold = frozenset(code_index[c] for c in rec["codes"] if c in code_index)
        docs.append(Document(id=rec["id"], tokens=ids, gold_codes=gold))
    return docs
