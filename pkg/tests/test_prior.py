import numpy as np
import pytest

from sonoalign import prior
from sonoalign.dataset import SampleRecord
from sonoalign.taxonomy import TASK_IDS, SimTable, default_catalog


def make_record(labels, case="c", image="i"):
    return SampleRecord(case, image, np.zeros(2), "", labels)


def random_sim(rng, n):
    """Symmetric, unit-diagonal, [0,1] similarity table."""
    m = rng.uniform(0.0, 1.0, size=(n, n))
    m = (m + m.T) / 2.0
    np.fill_diagonal(m, 1.0)
    return SimTable(m)


def random_catalog(rng):
    catalog = default_catalog()
    for tid in TASK_IDS:
        catalog.set_similarity(tid, random_sim(rng, catalog.task(tid).n_labels))
    return catalog


def random_batch(rng, catalog, max_b=16, max_labels=3):
    b = int(rng.integers(2, max_b + 1))
    batch = []
    for i in range(b):
        labels = {}
        for tid in TASK_IDS:
            if rng.random() < 0.35:
                continue  # task missing for this sample
            n_k = catalog.task(tid).n_labels
            count = int(rng.integers(1, min(max_labels, n_k) + 1))
            idxs = rng.choice(n_k, size=count, replace=False)
            labels[tid] = tuple(sorted(int(x) for x in idxs))
        batch.append(make_record(labels, case=f"c{i}", image=f"i{i}"))
    return batch


def brute_force_prior(batch, catalog):
    """Independent triple-loop oracle: tasks, then label pairs, no
    vectorization or shared code with the implementation."""
    b = len(batch)
    matrix = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            if i == j:
                matrix[i, j] = 1.0
                continue
            affinities = []
            for tid in TASK_IDS:
                li = batch[i].labels.get(tid, ())
                lj = batch[j].labels.get(tid, ())
                if not li or not lj:
                    continue
                sim = catalog.task(tid).similarity.matrix
                total = 0.0
                for a in sorted(li):
                    for c in sorted(lj):
                        total += sim[a, c]
                affinities.append(total / (len(li) * len(lj)))
            matrix[i, j] = sum(affinities) / len(affinities) if affinities else 0.0
    return matrix


class TestTaskAffinity:
    def test_identical_singletons_identity_sim(self):
        sim = SimTable.identity(4)
        assert prior.task_affinity((2,), (2,), sim) == 1.0

    def test_weighted_pair_mean(self):
        m = np.eye(3)
        m[0, 1] = m[1, 0] = 0.4
        m[0, 2] = m[2, 0] = 0.2
        assert prior.task_affinity((0,), (1, 2), SimTable(m)) == pytest.approx(0.3, abs=1e-15)

    def test_disjoint_singletons(self):
        assert prior.task_affinity((0,), (1,), SimTable.identity(3)) == 0.0

    def test_empty_set_rejected(self):
        with pytest.raises(prior.PriorError):
            prior.task_affinity((), (1,), SimTable.identity(3))


class TestPriorMatrix:
    def test_identical_labels_give_one(self):
        catalog = default_catalog()
        labels = {"T1": (0,), "T3": (1,), "T5": (0,)}
        batch = [make_record(dict(labels)), make_record(dict(labels))]
        result = prior.prior_matrix(batch, catalog)
        assert result.matrix[0, 1] == 1.0
        assert result.coverage[0, 1] == 3

    def test_two_shared_tasks_averaged(self):
        catalog = default_catalog()
        m5 = np.eye(2)
        m5[0, 1] = m5[1, 0] = 0.5
        catalog.set_similarity("T5", SimTable(m5))
        batch = [make_record({"T3": (1,), "T5": (0,)}),
                 make_record({"T3": (1,), "T5": (1,)})]
        result = prior.prior_matrix(batch, catalog)
        # T3 affinity 1.0, T5 affinity 0.5
        assert result.matrix[0, 1] == pytest.approx(0.75, abs=1e-15)
        assert result.matrix[0, 1] == brute_force_prior(batch, catalog)[0, 1]

    def test_unlabeled_sample_row(self):
        catalog = default_catalog()
        batch = [make_record({}), make_record({"T3": (0,)})]
        result = prior.prior_matrix(batch, catalog)
        assert result.matrix[0, 1] == 0.0
        assert result.matrix[1, 0] == 0.0
        assert result.matrix[0, 0] == 1.0
        assert result.coverage[0, 1] == 0

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            catalog = random_catalog(rng)
            batch = random_batch(rng, catalog)
            result = prior.prior_matrix(batch, catalog)
            oracle = brute_force_prior(batch, catalog)
            assert np.allclose(result.matrix, oracle, atol=1e-12)
            assert np.allclose(result.matrix, result.matrix.T, atol=1e-12)
            assert np.all(result.matrix.diagonal() == 1.0)
            assert result.matrix.min() >= 0.0 and result.matrix.max() <= 1.0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        catalog = random_catalog(rng)
        batch = random_batch(rng, catalog, max_b=8)
        perm = rng.permutation(len(batch))
        base = prior.prior_matrix(batch, catalog).matrix
        permuted = prior.prior_matrix([batch[i] for i in perm], catalog).matrix
        assert np.allclose(permuted, base[np.ix_(perm, perm)], atol=0)

    def test_label_overlap_special_case(self):
        # identity sims + single-label tasks: affinity = matching / shared
        catalog = default_catalog()
        batch = [make_record({"T3": (0,), "T5": (0,), "T6": (1,)}),
                 make_record({"T3": (0,), "T5": (1,), "T6": (1,)})]
        result = prior.prior_matrix(batch, catalog)
        assert result.matrix[0, 1] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_empty_batch(self):
        with pytest.raises(prior.PriorError):
            prior.prior_matrix([], default_catalog())


class TestExportPrior:
    def test_identity_csv(self, tmp_path):
        result = prior.PriorMatrix(np.eye(2), np.full((2, 2), 9, dtype=np.int64))
        path = tmp_path / "prior.csv"
        prior.export_prior(result, path)
        assert path.read_text().strip().splitlines() == ["1,0", "0,1"]

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        catalog = random_catalog(rng)
        batch = random_batch(rng, catalog)
        result = prior.prior_matrix(batch, catalog)
        path = tmp_path / "prior.csv"
        prior.export_prior(result, path)
        loaded = prior.load_prior(path)
        assert np.allclose(loaded.matrix, result.matrix, atol=1e-15)
        assert np.array_equal(loaded.coverage, result.coverage)

    def test_coverage_counts_all_tasks_present(self, tmp_path):
        catalog = default_catalog()
        labels = {tid: (0,) for tid in TASK_IDS}
        batch = [make_record(dict(labels)), make_record(dict(labels))]
        result = prior.prior_matrix(batch, catalog)
        path = tmp_path / "prior.csv"
        prior.export_prior(result, path)
        loaded = prior.load_prior(path)
        assert loaded.coverage[0, 1] == 9
        assert loaded.coverage[1, 0] == 9
