"""Synthetic corpora with planted code mentions.

Documents are noise tokens; each gold code contributes one contiguous
synonym phrase at a position chosen by the placement policy.  Label
frequencies follow a power law over code rank.  The "late-only" policy
plants every mention after the first standard window, which is what
separates a chunked model from a truncating baseline.
"""

from __future__ import annotations

import itertools
import json
import string
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .. import synsel, textenc
from ..textenc import Vocabulary

# first window of a standard encoder; late-only mentions start after it
LATE_START = 512

_TOP_CODE_RATE = 0.35  # marginal rate of the most frequent code, kept below
                       # the 0.5 decision boundary so marginals alone never
                       # tip a prediction


@dataclass
class CorpusSpec:
    n_train: int = 2000
    n_valid: int = 300
    n_test: int = 300
    len_min: int = 600
    len_max: int = 1500
    num_codes: int = 20
    syn_min: int = 2
    syn_max: int = 8
    prevalence_exponent: float = 1.5
    placement: str = "uniform"      # "uniform" | "late-only"
    noise_vocab: int = 500
    synonym_style: str = "varied"   # "varied" | "near-duplicate"
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ValueError("every split needs at least one document")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError(f"bad length range [{self.len_min}, {self.len_max}]")
        if self.prevalence_exponent <= 0:
            raise ValueError("prevalence exponent must be positive")
        if self.placement not in ("uniform", "late-only"):
            raise ValueError(f"unknown placement policy {self.placement!r}")
        if self.synonym_style not in ("varied", "near-duplicate"):
            raise ValueError(f"unknown synonym style {self.synonym_style!r}")
        if not 1 <= self.syn_min <= self.syn_max:
            raise ValueError(f"bad synonym range [{self.syn_min}, {self.syn_max}]")
        if self.noise_vocab < 1:
            raise ValueError("noise vocabulary must be non-empty")
        max_mention = 3
        if self.placement == "late-only" and self.len_min < LATE_START + max_mention + 1:
            raise ValueError(
                f"late-only placement needs documents of at least "
                f"{LATE_START + max_mention + 1} tokens, got len_min={self.len_min}")
        if self.len_min < max_mention:
            raise ValueError("documents too short to hold a mention")


def _keyword_stems(rng: np.random.Generator, needed: int) -> list[str]:
    """Synthetic word stems for synonym phrases, disjoint from noise words."""
    stems = ["".join(p) for p in itertools.product(string.ascii_lowercase, repeat=3)]
    if needed > len(stems):
        raise ValueError(f"cannot express {needed} synonym keywords with the "
                         f"available lexicon of {len(stems)} stems")
    order = rng.permutation(len(stems))
    return [stems[i] for i in order[:needed]]


def _build_codebook(spec: CorpusSpec, rng: np.random.Generator) -> list[dict]:
    pool_size = 4 + spec.syn_max
    stems = _keyword_stems(rng, pool_size * spec.num_codes)
    records = []
    for l in range(spec.num_codes):
        pool = stems[l * pool_size:(l + 1) * pool_size]
        n_syn = int(rng.integers(spec.syn_min, spec.syn_max + 1))
        synonyms: list[str] = []
        if spec.synonym_style == "near-duplicate":
            base = pool[:3]
            synonyms.append(" ".join(base))
            # mostly single-token edits of the base phrase, a few disjoint ones
            for j in range(1, n_syn):
                if j % 3 == 0 and 3 + j // 3 < len(pool):
                    distinct = pool[3 + j // 3 - 1: 3 + j // 3 + 2]
                    phrase = " ".join(distinct) if distinct else pool[-1]
                else:
                    variant = list(base)
                    variant[j % 3] = pool[3 + (j % (len(pool) - 3))]
                    phrase = " ".join(variant)
                if phrase not in synonyms:
                    synonyms.append(phrase)
        else:
            while len(synonyms) < n_syn:
                length = int(rng.integers(2, 4))
                phrase = " ".join(rng.choice(pool, size=length, replace=False))
                if phrase not in synonyms:
                    synonyms.append(phrase)
        records.append({"code": f"c{l:03d}", "synonyms": synonyms})
    return records


def _code_rates(spec: CorpusSpec) -> np.ndarray:
    ranks = np.arange(1, spec.num_codes + 1, dtype=np.float64)
    return _TOP_CODE_RATE * ranks ** (-spec.prevalence_exponent)


def _place_mentions(rng: np.random.Generator, tokens: list[str],
                    mentions: list[list[str]], placement: str) -> None:
    n = len(tokens)
    occupied: list[tuple[int, int]] = []
    for words in mentions:
        m = len(words)
        lo = LATE_START if placement == "late-only" else 0
        hi = n - m
        if hi < lo:
            raise RuntimeError("document too short for its mentions")
        for _ in range(200):
            start = int(rng.integers(lo, hi + 1))
            if all(start + m <= s or start >= e for s, e in occupied):
                break
        else:
            raise RuntimeError("could not place mentions without overlap; "
                               "lengthen the documents or reduce codes per doc")
        tokens[start:start + m] = words
        occupied.append((start, start + m))


def _gen_split(spec: CorpusSpec, rng: np.random.Generator, codebook: list[dict],
               rates: np.ndarray, prefix: str, count: int) -> list[dict]:
    noise = [f"w{i:04d}" for i in range(spec.noise_vocab)]
    records = []
    for i in range(count):
        n = int(rng.integers(spec.len_min, spec.len_max + 1))
        tokens = [noise[j] for j in rng.integers(0, spec.noise_vocab, size=n)]
        present = np.where(rng.random(spec.num_codes) < rates)[0]
        mentions = []
        for l in present:
            synonyms = codebook[int(l)]["synonyms"]
            phrase = synonyms[int(rng.integers(0, len(synonyms)))]
            mentions.append(phrase.split())
        _place_mentions(rng, tokens, mentions, spec.placement)
        records.append({
            "id": f"{prefix}{i:05d}",
            "tokens": tokens,
            "codes": [codebook[int(l)]["code"] for l in present],
        })
    return records


def gen_corpus(spec: CorpusSpec) -> dict:
    """Generate codebook plus train/valid/test corpus records.

    Deterministic for a fixed spec: one seeded generator drives everything.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    codebook = _build_codebook(spec, rng)
    rates = _code_rates(spec)
    return {
        "codebook": codebook,
        "train": _gen_split(spec, rng, codebook, rates, "tr", spec.n_train),
        "valid": _gen_split(spec, rng, codebook, rates, "va", spec.n_valid),
        "test": _gen_split(spec, rng, codebook, rates, "te", spec.n_test),
    }


def build_vocabulary(corpus: dict) -> Vocabulary:
    """Reserved tokens plus every word in the corpus and codebook, sorted."""
    words = set()
    for split in ("train", "valid", "test"):
        for rec in corpus[split]:
            words.update(w.lower() for w in rec["tokens"])
    for rec in corpus["codebook"]:
        for syn in rec["synonyms"]:
            words.update(syn.lower().split())
    return Vocabulary(sorted(words))


def write_dataset(out_dir, spec: CorpusSpec, corpus: dict | None = None) -> dict:
    """Materialize a dataset directory: corpora, codebook, vocabulary, spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = gen_corpus(spec)
    synsel.write_codebook(out / "codebook.jsonl", corpus["codebook"])
    for split in ("train", "valid", "test"):
        textenc.write_corpus(out / f"{split}.jsonl", corpus[split])
    build_vocabulary(corpus).save(out / "vocab.txt")
    (out / "corpus_spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n",
                                          encoding="utf-8")
    return corpus


def fit_power_law_exponent(frequencies: np.ndarray) -> float:
    """Slope magnitude of the log-log rank-frequency line."""
    freq = np.sort(np.asarray(frequencies, dtype=np.float64))[::-1]
    freq = freq[freq > 0]
    ranks = np.arange(1, len(freq) + 1)
    slope, _ = np.polyfit(np.log(ranks), np.log(freq), 1)
    return float(-slope)
