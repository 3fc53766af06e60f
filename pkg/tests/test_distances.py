import math

import numpy as np
import pytest

from pcgen import (
    LabeledPointCloud,
    PartVocabulary,
    PointCloudSet,
    chamfer,
    distance_matrix,
    emd_exact,
    part_aware_chamfer,
    snap_score,
)
from pcgen.distances import DistanceMatrix, exact_squared_distances, squared_distances
from pcgen.errors import (
    EmptyInput,
    SinglePart,
    SizeMismatch,
    TooLarge,
    VocabMismatch,
)


from oracles import chamfer_oracle, emd_oracle


def labeled(rng, n, d=2, c=2, vocab=None, labels=None):
    if labels is None:
        labels = rng.integers(0, c, size=n)
        labels[: c] = np.arange(c)  # every part present
    return LabeledPointCloud(
        rng.normal(size=(n, d)), labels, vocab or PartVocabulary.default(c)
    )


class TestSquaredDistances:
    def test_transpose_bit_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.normal(size=(int(rng.integers(1, 30)), 3))
            b = rng.normal(size=(int(rng.integers(1, 30)), 3))
            assert np.array_equal(squared_distances(a, b), squared_distances(b, a).T)
            assert np.array_equal(
                exact_squared_distances(a, b), exact_squared_distances(b, a).T
            )

    def test_exact_variant_zero_diagonal(self):
        a = np.random.default_rng(1).normal(size=(10, 3))
        assert np.all(np.diag(exact_squared_distances(a, a)) == 0.0)


class TestChamfer:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(20, 3))
        assert chamfer(a, a) == 0.0

    def test_singletons(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == 2.0

    def test_symmetry_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.normal(size=(int(rng.integers(1, 40)), 3))
            b = rng.normal(size=(int(rng.integers(1, 40)), 3))
            assert chamfer(a, b) == chamfer(b, a)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(13)
        worst = 0.0
        for _ in range(200):
            d = int(rng.integers(2, 4))
            a = rng.normal(size=(int(rng.integers(1, 25)), d))
            b = rng.normal(size=(int(rng.integers(1, 25)), d))
            worst = max(worst, abs(chamfer(a, b) - chamfer_oracle(a, b)))
        assert worst <= 1e-9

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))


class TestPartAwareChamfer:
    def test_identity(self):
        c = labeled(np.random.default_rng(0), 12)
        assert part_aware_chamfer(c, c) == 0.0

    def test_part_mismatch_infinite(self):
        v = PartVocabulary.default(2)
        rng = np.random.default_rng(1)
        both = LabeledPointCloud(rng.normal(size=(4, 2)), [0, 0, 1, 1], v)
        only0 = LabeledPointCloud(rng.normal(size=(4, 2)), [0, 0, 0, 0], v)
        assert part_aware_chamfer(both, only0) == math.inf
        assert part_aware_chamfer(only0, both) == math.inf

    def test_matches_per_part_bruteforce(self):
        rng = np.random.default_rng(8)
        for _ in range(60):
            a = labeled(rng, int(rng.integers(4, 20)))
            b = labeled(rng, int(rng.integers(4, 20)))
            expected = sum(
                chamfer_oracle(a.part_points(p), b.part_points(p)) for p in (0, 1)
            )
            assert abs(part_aware_chamfer(a, b) - expected) <= 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            a = labeled(rng, 10)
            b = labeled(rng, 14)
            assert part_aware_chamfer(a, b) == part_aware_chamfer(b, a)

    def test_finite_implies_equal_part_sets_and_dominates_parts(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            a = labeled(rng, int(rng.integers(3, 15)), c=3)
            b = labeled(rng, int(rng.integers(3, 15)), c=3)
            v = part_aware_chamfer(a, b)
            if math.isfinite(v):
                assert a.part_set() == b.part_set()
                per_part = max(
                    chamfer(a.part_points(p), b.part_points(p))
                    for p in a.part_set()
                )
                assert v >= per_part - 1e-12

    def test_vocab_mismatch(self):
        a = labeled(np.random.default_rng(0), 5, c=2)
        b = labeled(np.random.default_rng(1), 5, c=3)
        with pytest.raises(VocabMismatch):
            part_aware_chamfer(a, b)


class TestEmd:
    def test_permutation_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(30, 3))
        perm = rng.permutation(30)
        assert emd_exact(x, x[perm]) == 0.0

    def test_singleton(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])
        assert abs(emd_exact(a, b) - 5.0) < 1e-12

    def test_matches_factorial_enumeration(self):
        rng = np.random.default_rng(21)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(1, 8))
            a = rng.normal(size=(n, 2))
            b = rng.normal(size=(n, 2))
            worst = max(worst, abs(emd_exact(a, b) - emd_oracle(a, b)))
        assert worst <= 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(22)
        for _ in range(30):
            a = rng.normal(size=(12, 3))
            b = rng.normal(size=(12, 3))
            assert abs(emd_exact(a, b) - emd_exact(b, a)) <= 1e-12

    def test_triangle_inequality(self):
        rng = np.random.default_rng(23)
        for _ in range(40):
            n = int(rng.integers(2, 6))
            a, b, c = (rng.normal(size=(n, 2)) for _ in range(3))
            assert emd_exact(a, c) <= emd_exact(a, b) + emd_exact(b, c) + 1e-9

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            emd_exact(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_cap(self):
        big = np.zeros((10, 2))
        with pytest.raises(TooLarge) as exc:
            emd_exact(big, big, cap=5)
        assert "cap" in str(exc.value)


def snap_oracle(cloud, n_snap, contact_delta):
    """Direct re-implementation with explicit subset extraction."""
    parts = sorted(cloud.part_set())
    pts = {p: cloud.part_points(p) for p in parts}
    diag = math.dist(cloud.points.min(axis=0), cloud.points.max(axis=0))

    def mindist(p, q):
        return min(math.dist(x, y) for x in pts[p] for y in pts[q])

    def subset(src, other, k):
        gaps = [min(math.dist(x, y) for y in pts[other]) for x in pts[src]]
        order = sorted(range(len(gaps)), key=lambda i: gaps[i])
        return pts[src][order[: min(k, len(gaps))]]

    total = 0.0
    for p1 in parts:
        others = [p for p in parts if p != p1]
        contacts = [p for p in others if mindist(p1, p) <= contact_delta * diag]
        if not contacts:
            contacts = [min(others, key=lambda p: (mindist(p1, p), p))]
        total += min(
            chamfer_oracle(subset(p1, p2, n_snap), subset(p2, p1, n_snap))
            for p2 in contacts
        )
    return total / len(parts)


class TestSnap:
    def test_coincident_parts(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(10, 2))
        cloud = LabeledPointCloud(
            np.vstack([pts, pts]),
            np.repeat([0, 1], 10),
            PartVocabulary.default(2),
        )
        assert snap_score(cloud) == 0.0

    def test_single_part_rejected(self):
        c = LabeledPointCloud(
            np.zeros((3, 2)), [0, 0, 0], PartVocabulary.default(2)
        )
        with pytest.raises(SinglePart):
            snap_score(c)

    def test_matches_reimplementation(self):
        rng = np.random.default_rng(31)
        for trial in range(10):
            n = 18
            labels = np.concatenate([np.zeros(6), np.ones(6), np.full(6, 2)]).astype(int)
            offsets = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
            pts = rng.normal(scale=0.3, size=(n, 2)) + offsets[labels]
            cloud = LabeledPointCloud(pts, labels, PartVocabulary.default(3))
            got = snap_score(cloud, n_snap=4, contact_delta=0.3)
            want = snap_oracle(cloud, n_snap=4, contact_delta=0.3)
            assert abs(got - want) <= 1e-9

    def test_nsnap_clamped_to_part_size(self):
        rng = np.random.default_rng(5)
        cloud = labeled(rng, 6)
        # n_snap far above part sizes must still work
        assert np.isfinite(snap_score(cloud, n_snap=1000))


class TestDistanceMatrix:
    def make_sets(self, seed, na=5, nb=5, c=2):
        rng = np.random.default_rng(seed)
        vocab = PartVocabulary.default(c)
        a = PointCloudSet(
            tuple(labeled(rng, int(rng.integers(5, 12)), c=c, vocab=vocab) for _ in range(na)),
            vocab, "A",
        )
        b = PointCloudSet(
            tuple(labeled(rng, int(rng.integers(5, 12)), c=c, vocab=vocab) for _ in range(nb)),
            vocab, "B",
        )
        return a, b

    def test_self_matrix_zero_diagonal_symmetric(self):
        a, _ = self.make_sets(0)
        m = distance_matrix(a, a, "cd")
        assert np.all(np.diag(m.values) == 0.0)
        assert np.array_equal(m.values, m.values.T)

    def test_thread_count_does_not_change_bytes(self):
        a, b = self.make_sets(1)
        for kind in ("cd", "pcd"):
            m1 = distance_matrix(a, b, kind, threads=1)
            m8 = distance_matrix(a, b, kind, threads=8)
            assert m1.values.tobytes() == m8.values.tobytes()
        # EMD needs equal cloud sizes
        rng = np.random.default_rng(17)
        vocab = PartVocabulary.default(2)
        ea = PointCloudSet(
            tuple(labeled(rng, 9, vocab=vocab) for _ in range(4)), vocab, "A"
        )
        eb = PointCloudSet(
            tuple(labeled(rng, 9, vocab=vocab) for _ in range(4)), vocab, "B"
        )
        m1 = distance_matrix(ea, eb, "emd", threads=1)
        m8 = distance_matrix(ea, eb, "emd", threads=8)
        assert m1.values.tobytes() == m8.values.tobytes()

    def test_pcd_entries_equal_looped_kernel(self):
        a, b = self.make_sets(2)
        m = distance_matrix(a, b, "pcd", threads=4)
        for i in range(len(a)):
            for j in range(len(b)):
                assert m.values[i, j] == part_aware_chamfer(a[i], b[j])

    def test_kernel_errors_annotated(self):
        a, b = self.make_sets(3)
        with pytest.raises(SizeMismatch) as exc:
            distance_matrix(a, b, "emd")  # clouds have unequal sizes
        assert "entry (0, " in str(exc.value)

    def test_env_thread_fallback(self, monkeypatch):
        a, b = self.make_sets(4)
        monkeypatch.setenv("PCGEN_THREADS", "3")
        m = distance_matrix(a, b, "cd", threads=None)
        ref = distance_matrix(a, b, "cd", threads=1)
        assert m.values.tobytes() == ref.values.tobytes()

    def test_json_roundtrip_with_inf(self, tmp_path):
        vals = np.array([[0.0, np.inf], [2.5, 1.25]])
        m = DistanceMatrix(vals, "pcd", "A", "B")
        path = tmp_path / "m.json"
        m.save(path)
        text = path.read_text()
        assert '"inf"' in text
        back = DistanceMatrix.load(path)
        assert back.kind == "pcd"
        assert np.array_equal(back.values, vals)
