"""Multi-synonym attention over encoded chunks.

Each code owns a fixed matrix of synonym vectors.  Synonym z queries head z
of every chunk's token representations; the attended per-head vectors are
concatenated into one code-wise text representation per chunk, scored
against the pooled code vector through a learned bi-affine matrix, and
consolidated across chunks by max-pooling.  A truncating baseline head is
included for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import textenc
from .diffcore import Tensor
from .synsel import CodeEmbeddings
from .textenc import Chunk, EncoderParams, Vocabulary


@dataclass
class MsamParams:
    """Trainable projections of the attention head.

    w_q maps a full-width synonym vector to head width, w_k reprojects keys
    inside each head (shared across heads and codes), and w is the bi-affine
    matrix pairing text representations with code vectors.  The bi-affine
    score carries no bias term.
    """

    w_q: Tensor  # (hidden/heads, hidden)
    w_k: Tensor  # (hidden/heads, hidden/heads)
    w: Tensor    # (hidden, hidden)
    heads: int

    @classmethod
    def init(cls, hidden: int, heads: int, seed: int = 0,
             dtype=np.float32) -> "MsamParams":
        """Initialize with a token-matching prior.

        The query projection starts as the block average of the full-width
        synonym vector and the key projection near the identity, so the
        initial attention score of code l at token t is roughly the inner
        product between the synonym vector and the token key.  Together
        with the encoder's identity-flavored residual initialization this
        makes synonym-token matching visible to the very first gradients.
        The bi-affine matrix starts near zero: probabilities begin at one
        half and the score map is learned from scratch.
        """
        if hidden % heads != 0:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        dh = hidden // heads
        w_q = np.tile(np.eye(dh), heads) / heads + rng.normal(0.0, 0.02,
                                                              size=(dh, hidden))
        w_k = np.eye(dh) + rng.normal(0.0, 0.02, size=(dh, dh))
        w = rng.normal(0.0, 0.02, size=(hidden, hidden))
        return cls(
            w_q=Tensor(w_q.astype(dtype), requires_grad=True),
            w_k=Tensor(w_k.astype(dtype), requires_grad=True),
            w=Tensor(w.astype(dtype), requires_grad=True),
            heads=heads,
        )

    def named(self) -> dict[str, Tensor]:
        return {"msam.w_q": self.w_q, "msam.w_k": self.w_k, "msam.w": self.w}


def split_heads(k: Tensor, heads: int) -> list[Tensor]:
    """Column-wise split of a (tokens, hidden) matrix into equal head slices."""
    t, hidden = k.shape
    if hidden % heads != 0:
        raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
    dh = hidden // heads
    return [dc.narrow(k, 1, z * dh, dh) for z in range(heads)]


def attend(q_l: np.ndarray, heads: list[Tensor], mask: np.ndarray,
           params: MsamParams) -> list[Tensor]:
    """Attention weights of one code over one chunk, one vector per head.

    Synonym z queries head z: weights are a masked softmax over tokens of
    (w_q q_z) . tanh(w_k k_t).
    """
    if len(heads) != params.heads or q_l.shape[0] != params.heads:
        raise ValueError(f"need exactly {params.heads} synonym rows and head "
                         f"slices, got {q_l.shape[0]} and {len(heads)}")
    alphas = []
    for z, head in enumerate(heads):
        q = dc.matmul(params.w_q, Tensor(q_l[z][:, None]))        # (dh, 1)
        keys = dc.tanh(dc.matmul(head, dc.transpose(params.w_k)))  # (t, dh)
        scores = dc.reshape(dc.matmul(keys, q), (head.shape[0],))
        alphas.append(dc.masked_softmax(scores, mask, axis=-1))
    return alphas


def code_text_repr(heads: list[Tensor], alphas: list[Tensor]) -> Tensor:
    """Attended per-head vectors assembled into one full-width vector."""
    parts = []
    for head, alpha in zip(heads, alphas):
        row = dc.reshape(alpha, (1, head.shape[0]))
        parts.append(dc.matmul(row, dc.tanh(head)))  # (1, dh)
    merged = dc.concat(parts, axis=1)
    return dc.reshape(merged, (merged.shape[1],))


def score(r: Tensor, v: np.ndarray, w: Tensor) -> Tensor:
    """Bi-affine logit r^T W v; no bias."""
    hidden = r.shape[0]
    row = dc.matmul(dc.reshape(r, (1, hidden)), w)
    return dc.tsum(dc.mul(row, Tensor(v[None, :])))


def chunk_logits(k: Tensor, mask: np.ndarray, code_embeddings: CodeEmbeddings,
                 params: MsamParams) -> Tensor:
    """Logits of all codes for one encoded chunk, computed codes-batched.

    Equivalent to running attend/code_text_repr/score per code; kept in
    matrix form so one chunk costs a handful of matmuls.
    """
    heads = split_heads(k, params.heads)
    parts = []
    for z, head in enumerate(heads):
        qz = Tensor(code_embeddings.q_stack[:, z, :])              # (codes, hidden)
        pz = dc.matmul(qz, dc.transpose(params.w_q))               # (codes, dh)
        keys = dc.tanh(dc.matmul(head, dc.transpose(params.w_k)))  # (t, dh)
        scores = dc.matmul(pz, dc.transpose(keys))                 # (codes, t)
        alpha = dc.masked_softmax(scores, mask[None, :], axis=-1)
        parts.append(dc.matmul(alpha, dc.tanh(head)))              # (codes, dh)
    r = dc.concat(parts, axis=1)                                   # (codes, hidden)
    projected = dc.matmul(r, params.w)
    return dc.tsum(dc.mul(projected, Tensor(code_embeddings.v_matrix)), axis=1)


@dataclass
class DocumentScores:
    """Per-chunk logits, their max-pooled consolidation, and probabilities."""

    chunk_logits: Tensor   # (chunks, codes)
    pooled_logits: Tensor  # (codes,)
    probabilities: np.ndarray

    @property
    def num_chunks(self) -> int:
        return self.chunk_logits.shape[0]


def classify_document(tokens, encoder: EncoderParams,
                      code_embeddings: CodeEmbeddings, params: MsamParams,
                      chunk_len: int, overlap: int) -> DocumentScores:
    """Chunk, encode, attend, score, and max-pool one document."""
    chunks = textenc.chunk_document(tokens, chunk_len, overlap)
    return classify_chunks(chunks, encoder, code_embeddings, params)


def classify_chunks(chunks: list[Chunk], encoder: EncoderParams,
                    code_embeddings: CodeEmbeddings,
                    params: MsamParams) -> DocumentScores:
    rows = []
    for chunk in chunks:
        k = textenc.encode_chunk(chunk, encoder)
        logits = chunk_logits(k, chunk.mask, code_embeddings, params)
        rows.append(dc.reshape(logits, (1, code_embeddings.num_codes)))
    stacked = dc.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    pooled = dc.max_pool(stacked, axis=0)
    return DocumentScores(chunk_logits=stacked, pooled_logits=pooled,
                          probabilities=dc.sigmoid_array(pooled.data))


def bm_head(tokens, encoder: EncoderParams, weight: Tensor, bias: Tensor,
            chunk_len: int) -> Tensor:
    """Truncating baseline: [CLS] vector of the first window through an
    affine map, returning logits of shape (codes,)."""
    first = list(tokens)[: chunk_len - 2]
    cls = textenc.encode_text_cls(first, encoder)
    row = dc.matmul(dc.reshape(cls, (1, encoder.hidden)), weight)
    return dc.reshape(dc.add(row, dc.reshape(bias, (1, bias.shape[0]))),
                      (bias.shape[0],))


class ChunkClassifier:
    """Chunked encoder + multi-synonym attention head over frozen code
    embeddings.  One instance owns all trainable tensors of the model."""

    def __init__(self, vocab: Vocabulary, encoder: EncoderParams,
                 msam: MsamParams, code_embeddings: CodeEmbeddings,
                 chunk_len: int, overlap: int):
        self.vocab = vocab
        self.encoder = encoder
        self.msam = msam
        self.code_embeddings = code_embeddings
        self.chunk_len = chunk_len
        self.overlap = overlap

    @property
    def num_codes(self) -> int:
        return self.code_embeddings.num_codes

    def scores(self, tokens) -> DocumentScores:
        return classify_document(tokens, self.encoder, self.code_embeddings,
                                 self.msam, self.chunk_len, self.overlap)

    def logits(self, tokens) -> Tensor:
        return self.scores(tokens).pooled_logits

    def proba(self, tokens) -> np.ndarray:
        return self.scores(tokens).probabilities

    def loss(self, tokens, targets) -> Tensor:
        return dc.bce_with_logits(self.logits(tokens), targets)

    def trainable(self) -> dict[str, Tensor]:
        return {**self.encoder.named(), **self.msam.named()}

    @classmethod
    def build(cls, vocab: Vocabulary, codebook, *, hidden: int, heads: int,
              synonyms: int, chunk_len: int, overlap: int, num_blocks: int = 1,
              seed: int = 0, selection: str = "diverse",
              selection_rng: np.random.Generator | None = None) -> "ChunkClassifier":
        from .synsel import build_code_embeddings
        if heads != synonyms:
            raise ValueError(f"head count {heads} must equal synonyms per code "
                             f"{synonyms}")
        encoder = EncoderParams.init(vocab_size=len(vocab), hidden=hidden,
                                     heads=heads, max_len=chunk_len,
                                     num_blocks=num_blocks, seed=seed)
        embeddings = build_code_embeddings(codebook, encoder, vocab, synonyms,
                                           selection=selection, rng=selection_rng)
        msam = MsamParams.init(hidden=hidden, heads=heads, seed=seed + 1)
        return cls(vocab, encoder, msam, embeddings, chunk_len, overlap)


class BaselineClassifier:
    """Encoder over the first window only, with a linear per-code head."""

    def __init__(self, vocab: Vocabulary, encoder: EncoderParams,
                 weight: Tensor, bias: Tensor, chunk_len: int):
        self.vocab = vocab
        self.encoder = encoder
        self.weight = weight
        self.bias = bias
        self.chunk_len = chunk_len

    @property
    def num_codes(self) -> int:
        return self.bias.shape[0]

    def logits(self, tokens) -> Tensor:
        return bm_head(tokens, self.encoder, self.weight, self.bias,
                       self.chunk_len)

    def proba(self, tokens) -> np.ndarray:
        return dc.sigmoid_array(self.logits(tokens).data)

    def loss(self, tokens, targets) -> Tensor:
        return dc.bce_with_logits(self.logits(tokens), targets)

    def trainable(self) -> dict[str, Tensor]:
        return {**self.encoder.named(), "bm.weight": self.weight,
                "bm.bias": self.bias}

    @classmethod
    def build(cls, vocab: Vocabulary, *, hidden: int, heads: int,
              num_codes: int, chunk_len: int, num_blocks: int = 1,
              seed: int = 0) -> "BaselineClassifier":
        encoder = EncoderParams.init(vocab_size=len(vocab), hidden=hidden,
                                     heads=heads, max_len=chunk_len,
                                     num_blocks=num_blocks, seed=seed)
        rng = np.random.default_rng(seed + 2)
        weight = Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden),
                                   size=(hidden, num_codes)).astype(np.float32),
                        requires_grad=True)
        bias = Tensor(np.zeros(num_codes, dtype=np.float32), requires_grad=True)
        return cls(vocab, encoder, weight, bias, chunk_len)
