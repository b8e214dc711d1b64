import itertools
import re

import numpy as np
import pytest

from msam.synsel import (
    EXACT_LIMIT,
    CodeEmbeddings,
    Selection,
    SynonymRecord,
    build_code_embeddings,
    cosine_distance_matrix,
    normalize_variants,
    pairwise_objective,
    read_codebook,
    select_exact,
    select_greedy,
    select_random,
    write_codebook,
)
from msam.textenc import EncoderParams, Vocabulary


class TestNormalizeVariants:
    def test_plain_phrase_yields_single_variant(self):
        assert normalize_variants("heart failure") == ["heart failure"]

    def test_conjunctions_and_slash_removed(self):
        variants = normalize_variants("kidney and/or renal failure")
        assert "kidney renal failure" in variants
        assert variants[0] == "kidney and/or renal failure"

    def test_hyphen_and_brackets_preserved(self):
        for v in normalize_variants("beta-blocker (oral)"):
            assert "beta-blocker" in v
            assert "(oral)" in v

    def test_specials_removed(self):
        variants = normalize_variants("failure, acute & chronic!")
        assert "failure acute chronic" in variants

    def test_whitespace_collapsed(self):
        assert normalize_variants("heart   failure ") == ["heart failure"]

    def test_matches_reference_regex_oracle(self):
        # independent formulation of the same cleaning rules
        def oracle(raw):
            cleaned = re.sub(r"[^0-9a-zA-Z\s\-\(\)\[\]]", " ", raw)
            words = [w for w in cleaned.split() if w.lower() not in ("and", "or")]
            return " ".join(words)

        cases = [
            "kidney and/or renal failure",
            "beta-blocker (oral)",
            "type 2 diabetes mellitus, without complication",
            "st-elevation [anterior] infarction & shock",
        ]
        for raw in cases:
            assert oracle(raw) in normalize_variants(raw) or oracle(raw) == " ".join(raw.split())


class TestCosineDistance:
    def test_identical_rows(self):
        v = np.tile([1.0, 2.0, 3.0], (3, 1))
        d = cosine_distance_matrix(v)
        np.testing.assert_allclose(d, 0.0, atol=1e-12)

    def test_orthogonal_rows(self):
        d = cosine_distance_matrix(np.eye(3))
        off = d[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, 1.0, atol=1e-12)

    def test_opposite_rows(self):
        d = cosine_distance_matrix(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        assert d[0, 1] == pytest.approx(2.0)

    def test_zero_norm_row_is_an_error(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_distance_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_symmetry_zero_diagonal_range(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(8, 5))
        d = cosine_distance_matrix(v)
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), 0.0)
        assert (d >= 0).all() and (d <= 2).all()


def enumerate_optimum(d, m):
    """Exhaustive oracle: first maximizer in lexicographic subset order."""
    n = d.shape[0]
    best_obj, best = -1.0, None
    for combo in itertools.combinations(range(n), m):
        obj = pairwise_objective(d, combo)
        if obj > best_obj + 1e-12:
            best_obj, best = obj, combo
    return best, best_obj


def random_distance_matrix(rng, n):
    v = rng.normal(size=(n, 6))
    return cosine_distance_matrix(v)


class TestSelectExact:
    def test_m_equals_n_selects_all(self):
        d = random_distance_matrix(np.random.default_rng(0), 6)
        sel = select_exact(d, 6)
        assert sel.indices == tuple(range(6))
        assert sel.objective == pytest.approx(d.sum() / 2.0)

    def test_m_one_tie_breaks_to_index_zero(self):
        d = random_distance_matrix(np.random.default_rng(1), 5)
        sel = select_exact(d, 1)
        assert sel.indices == (0,)
        assert sel.objective == 0.0

    def test_eight_by_eight_matches_enumeration(self):
        d = random_distance_matrix(np.random.default_rng(2), 8)
        sel = select_exact(d, 4)
        oracle_idx, oracle_obj = enumerate_optimum(d, 4)
        assert sel.indices == oracle_idx
        assert sel.objective == pytest.approx(oracle_obj)

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_enumeration_on_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 13))
        m = int(rng.integers(1, n + 1))
        d = random_distance_matrix(rng, n)
        sel = select_exact(d, m)
        oracle_idx, oracle_obj = enumerate_optimum(d, m)
        assert sel.indices == oracle_idx
        assert sel.objective == pytest.approx(oracle_obj, abs=1e-9)

    def test_cardinality_always_m(self):
        rng = np.random.default_rng(5)
        d = random_distance_matrix(rng, 10)
        for m in range(1, 11):
            assert len(select_exact(d, m).indices) == m

    def test_objective_invariant_under_permutation(self):
        rng = np.random.default_rng(6)
        d = random_distance_matrix(rng, 9)
        perm = rng.permutation(9)
        dp = d[np.ix_(perm, perm)]
        assert select_exact(d, 4).objective == pytest.approx(
            select_exact(dp, 4).objective, abs=1e-9)

    def test_too_large_directs_to_greedy(self):
        d = np.zeros((EXACT_LIMIT + 1, EXACT_LIMIT + 1))
        with pytest.raises(ValueError, match="greedy"):
            select_exact(d, 4)

    def test_branch_and_bound_handles_largest_exact_size(self):
        rng = np.random.default_rng(7)
        d = random_distance_matrix(rng, EXACT_LIMIT)
        sel = select_exact(d, 4)
        assert len(sel.indices) == 4
        g = select_greedy(d, 4)
        assert sel.objective >= g.objective - 1e-9


class TestSelectGreedy:
    def test_m_equals_n(self):
        d = random_distance_matrix(np.random.default_rng(0), 5)
        assert select_greedy(d, 5).indices == tuple(range(5))

    def test_never_beats_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(3, 12))
            m = int(rng.integers(2, n + 1))
            d = random_distance_matrix(rng, n)
            assert select_greedy(d, m).objective <= select_exact(d, m).objective + 1e-9

    def test_quality_ratio_on_12x12(self):
        # empirical regression bound against the exact optimum
        ratios = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            d = random_distance_matrix(rng, 12)
            g = select_greedy(d, 4)
            e = select_exact(d, 4)
            ratios.append(g.objective / e.objective)
        assert min(ratios) >= 0.8

    def test_deterministic(self):
        d = random_distance_matrix(np.random.default_rng(2), 10)
        assert select_greedy(d, 4) == select_greedy(d, 4)


class TestSelectRandom:
    def test_cardinality_and_range(self):
        rng = np.random.default_rng(0)
        sel = select_random(10, 4, rng)
        assert len(sel.indices) == 4
        assert all(0 <= i < 10 for i in sel.indices)

    def test_seeded_reproducibility(self):
        a = select_random(10, 4, np.random.default_rng(9))
        b = select_random(10, 4, np.random.default_rng(9))
        assert a.indices == b.indices


@pytest.fixture(scope="module")
def embed_setup():
    vocab = Vocabulary([f"word{i}" for i in range(40)])
    encoder = EncoderParams.init(vocab_size=len(vocab), hidden=16, heads=4,
                                 max_len=16, num_blocks=1, seed=1)
    return vocab, encoder


class TestBuildCodeEmbeddings:
    def test_single_synonym_cycles(self, embed_setup):
        vocab, encoder = embed_setup
        book = [SynonymRecord("c0", ["word1 word2"])]
        ce = build_code_embeddings(book, encoder, vocab, m=4)
        q = ce.entries[0].q
        assert q.shape == (4, 16)
        for row in q[1:]:
            np.testing.assert_array_equal(row, q[0])
        np.testing.assert_allclose(ce.entries[0].v, q[0], atol=1e-6)

    def test_selection_matches_enumeration(self, embed_setup):
        vocab, encoder = embed_setup
        variants = [f"word{i} word{i + 1}" for i in range(1, 21, 2)]
        book = [SynonymRecord("c0", variants)]
        ce = build_code_embeddings(book, encoder, vocab, m=4)
        from msam import textenc
        vectors = np.stack([
            textenc.encode_text_cls(textenc.tokenize(v, vocab), encoder).data
            for v in variants])
        d = cosine_distance_matrix(vectors)
        oracle_idx, _ = enumerate_optimum(d, 4)
        assert ce.entries[0].selected == tuple(variants[i] for i in oracle_idx)

    def test_mean_of_opposite_rows_is_zero(self):
        e = CodeEmbeddings.__new__(CodeEmbeddings)  # bypass init, test the pooling rule
        r = np.array([1.0, -2.0, 3.0])
        q = np.stack([r, -r])
        np.testing.assert_allclose(q.mean(axis=0), 0.0)

    def test_zero_variant_code_is_an_error(self, embed_setup):
        with pytest.raises(ValueError):
            SynonymRecord("c0", [])

    def test_frozen_hash_is_stable(self, embed_setup):
        vocab, encoder = embed_setup
        book = [SynonymRecord("c0", ["word1", "word2 word3"])]
        ce = build_code_embeddings(book, encoder, vocab, m=2)
        assert ce.state_hash() == ce.state_hash()
        assert not ce.q_stack.flags.writeable

    def test_random_mode_needs_rng(self, embed_setup):
        vocab, encoder = embed_setup
        book = [SynonymRecord("c0", [f"word{i}" for i in range(1, 8)])]
        with pytest.raises(ValueError):
            build_code_embeddings(book, encoder, vocab, m=2, selection="random")
        ce = build_code_embeddings(book, encoder, vocab, m=2, selection="random",
                                   rng=np.random.default_rng(0))
        assert ce.entries[0].mode == "random"


class TestCodebookFiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "codebook.jsonl"
        write_codebook(path, [{"code": "c0", "synonyms": ["heart failure"]},
                              {"code": "c1", "synonyms": ["kidney and/or renal failure"]}])
        book = read_codebook(path)
        assert book[0].code == "c0"
        assert "kidney renal failure" in book[1].variants

    def test_missing_key_is_an_error(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"code": "c0"}\n')
        with pytest.raises(ValueError):
            read_codebook(path)
