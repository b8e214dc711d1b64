import numpy as np
import pytest

from msam.quant import (
    QuantGroup,
    Refiner,
    cc_estimate,
    group_probabilities,
    pcc_estimate,
    read_groups,
    refine,
    sample_groups,
    train_refiner_standalone,
    write_groups,
)
from msam.textenc import Document
from msam.training import GroupAccumulator


class TestCcEstimate:
    def test_all_ones(self):
        np.testing.assert_array_equal(cc_estimate(np.ones((3, 2))), [1.0, 1.0])

    def test_single_document(self):
        np.testing.assert_array_equal(cc_estimate(np.array([[0.6, 0.4]])), [1.0, 0.0])

    def test_counting(self):
        probs = np.array([[0.9], [0.7], [0.2], [0.1]])
        assert cc_estimate(probs)[0] == pytest.approx(0.5)

    def test_empty_group_is_an_error(self):
        with pytest.raises(ValueError):
            cc_estimate(np.zeros((0, 3)))

    def test_range(self):
        rng = np.random.default_rng(0)
        est = cc_estimate(rng.random((20, 5)))
        assert (est >= 0).all() and (est <= 1).all()


class TestPccEstimate:
    def test_single_document_echoes_itself(self):
        p = np.array([[0.3, 0.8]])
        np.testing.assert_array_equal(pcc_estimate(p), p[0])

    def test_two_documents(self):
        p = np.array([[0.2], [0.8]])
        assert pcc_estimate(p)[0] == pytest.approx(0.5)

    def test_streaming_accumulator_agrees(self):
        rng = np.random.default_rng(1)
        probs = rng.random((9, 4))
        acc = GroupAccumulator(limit=9, num_codes=4)
        for row in probs:
            acc.add(row, np.zeros(4))
        np.testing.assert_allclose(acc.pcc(), pcc_estimate(probs), atol=1e-6)

    def test_partition_mean_associativity(self):
        rng = np.random.default_rng(2)
        probs = rng.random((10, 3))
        whole = pcc_estimate(probs)
        part = (pcc_estimate(probs[:4]) * 4 + pcc_estimate(probs[4:]) * 6) / 10
        np.testing.assert_allclose(whole, part, atol=1e-12)

    def test_empty_group_is_an_error(self):
        with pytest.raises(ValueError):
            pcc_estimate(np.zeros((0, 3)))


class TestRefiner:
    def test_output_shape_and_range(self):
        r = Refiner.init(num_codes=6, hidden=3, seed=0)
        out = refine(np.full(6, 0.5), r)
        assert out.shape == (6,)
        assert (out > 0).all() and (out < 1).all()

    def test_deterministic(self):
        r = Refiner.init(num_codes=5, hidden=2, seed=1)
        x = np.linspace(0.1, 0.9, 5)
        np.testing.assert_array_equal(refine(x, r), refine(x, r))

    def test_dimension_mismatch_is_an_error(self):
        r = Refiner.init(num_codes=5, hidden=2, seed=0)
        with pytest.raises(ValueError):
            refine(np.zeros(4), r)

    def test_input_range_checked(self):
        r = Refiner.init(num_codes=3, hidden=2, seed=0)
        with pytest.raises(ValueError):
            refine(np.array([0.1, 1.2, 0.3]), r)

    def test_hidden_must_be_undercomplete(self):
        with pytest.raises(ValueError):
            Refiner.init(num_codes=4, hidden=4)


def make_docs(num, num_codes, seed=0, patterns=None):
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(num):
        if patterns is not None:
            gold = patterns[int(rng.integers(0, len(patterns)))]
        else:
            gold = {int(c) for c in np.where(rng.random(num_codes) > 0.6)[0]}
        docs.append(Document(id=f"d{i}", tokens=[10, 11], gold_codes=gold))
    return docs


class TestSampleGroups:
    def test_size_one_group_is_indicator(self):
        docs = [Document(id="d0", tokens=[10], gold_codes={1})]
        (g,) = sample_groups(docs, count=1, num_codes=3, seed=0)
        assert g.size == 1
        np.testing.assert_array_equal(g.prevalence, [0.0, 1.0, 0.0])

    def test_full_set_group_matches_whole_prevalence(self):
        docs = make_docs(20, 4, seed=3)
        gold = np.stack([d.label_vector(4) for d in docs])
        for g in sample_groups(docs, count=200, num_codes=4, seed=1):
            if g.size == len(docs):
                np.testing.assert_allclose(g.prevalence, gold.mean(axis=0))
                break
        else:
            pytest.fail("no full-set group sampled in 200 draws")

    def test_seeded_reproducibility(self):
        docs = make_docs(15, 3, seed=0)
        a = sample_groups(docs, count=50, num_codes=3, seed=9)
        b = sample_groups(docs, count=50, num_codes=3, seed=9)
        assert [g.ids for g in a] == [g.ids for g in b]

    def test_members_unique_within_group(self):
        docs = make_docs(10, 2, seed=1)
        for g in sample_groups(docs, count=100, num_codes=2, seed=2):
            assert len(set(g.ids)) == g.size

    def test_sizes_cover_all_deciles(self):
        docs = make_docs(50, 2, seed=2)
        groups = sample_groups(docs, count=5000, num_codes=2, seed=3)
        sizes = np.array([g.size for g in groups])
        deciles = np.linspace(1, 50, 11)
        covered = sum(((sizes >= lo) & (sizes < hi + (hi == 50))).any()
                      for lo, hi in zip(deciles[:-1], deciles[1:]))
        assert covered >= 0.95 * 10

    def test_bad_count_is_an_error(self):
        with pytest.raises(ValueError):
            sample_groups(make_docs(5, 2), count=0, num_codes=2)


class TestTrainRefinerStandalone:
    def _perfect_setup(self):
        # perfect oracle: each document's probabilities equal its gold
        # indicator, so the PCC of every group equals its true prevalence.
        # Mixing fractions stay in [0.3, 0.7] where a sigmoid-output
        # bottleneck can realize the identity map tightly.
        docs = []
        for i in range(20):
            docs.append(Document(id=f"a{i}", tokens=[10], gold_codes={0}))
            docs.append(Document(id=f"b{i}", tokens=[10], gold_codes={1, 2}))
        probs_by_id = {d.id: d.label_vector(3).astype(np.float64) for d in docs}
        by_id = {d.id: d for d in docs}
        groups = []
        for t in np.linspace(0.3, 0.7, 60):
            k = min(max(int(round(20 * t)), 1), 19)
            ids = tuple([f"a{i}" for i in range(k)]
                        + [f"b{i}" for i in range(20 - k)])
            gold = np.stack([by_id[i].label_vector(3) for i in ids])
            groups.append(QuantGroup(ids=ids, prevalence=gold.mean(axis=0),
                                     size=20))
        return docs, probs_by_id, groups

    def test_identity_achievable_case_reaches_tiny_loss(self):
        _, probs_by_id, groups = self._perfect_setup()
        refiner = Refiner.init(num_codes=3, hidden=2, seed=0)
        history = train_refiner_standalone(refiner, groups, probs_by_id,
                                           lr0=1e-1, patience=40,
                                           max_epochs=300, seed=0)
        assert min(h["valid_mse"] for h in history) < 1e-4

    def test_zero_epoch_budget_leaves_refiner_unchanged(self):
        _, probs_by_id, groups = self._perfect_setup()
        refiner = Refiner.init(num_codes=3, hidden=2, seed=1)
        before = {k: v.data.copy() for k, v in refiner.trainable().items()}
        train_refiner_standalone(refiner, groups, probs_by_id, max_epochs=0)
        for k, v in refiner.trainable().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_seeded_run_is_bit_reproducible(self):
        _, probs_by_id, groups = self._perfect_setup()
        finals = []
        for _ in range(2):
            refiner = Refiner.init(num_codes=3, hidden=2, seed=2)
            train_refiner_standalone(refiner, groups, probs_by_id, lr0=1e-2,
                                     patience=3, max_epochs=10, seed=5)
            finals.append({k: v.data.copy() for k, v in refiner.trainable().items()})
        for k in finals[0]:
            np.testing.assert_array_equal(finals[0][k], finals[1][k])


class TestGroupFiles:
    def test_round_trip_recomputes_prevalence(self, tmp_path):
        docs = make_docs(12, 3, seed=4)
        docs_by_id = {d.id: d for d in docs}
        groups = sample_groups(docs, count=20, num_codes=3, seed=5)
        path = tmp_path / "groups.jsonl"
        write_groups(path, groups)
        loaded = read_groups(path, docs_by_id, num_codes=3)
        assert len(loaded) == len(groups)
        for a, b in zip(groups, loaded):
            assert a.ids == b.ids
            np.testing.assert_allclose(a.prevalence, b.prevalence)

    def test_unknown_id_is_an_error(self, tmp_path):
        path = tmp_path / "groups.jsonl"
        path.write_text('{"ids": ["ghost"], "size": 1}\n')
        with pytest.raises(ValueError):
            read_groups(path, {}, num_codes=2)

    def test_group_probabilities_stacks_rows(self):
        g = QuantGroup(ids=("a", "b"), prevalence=np.array([0.5]), size=2)
        probs = group_probabilities(g, {"a": np.array([0.1]), "b": np.array([0.9])})
        np.testing.assert_array_equal(probs, [[0.1], [0.9]])
