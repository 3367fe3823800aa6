import numpy as np
import pytest

from npnorm.cohort import (DESK_GRID, DESK_PROTOCOL, PAPER_PROTOCOL, CohortSpec, DeviationSpec, SplitProtocol,
                           generate, load_cohort, region_layout, save_cohort, split)
from npnorm.normative import first_principal_component


def paper_labels():
    return np.array(["healthy"] * 119 + ["group1"] * 49 + ["group2"] * 39 + ["group3"] * 48)


class TestGenerate:
    def test_default_desk_cohort(self):
        c = generate()
        assert c.X.shape == (90, 11) and c.Y.shape == (90,) + DESK_GRID
        assert (c.labels == "healthy").sum() == 60
        for g in ("group1", "group2", "group3"):
            assert (c.labels == g).sum() == 10

    def test_deterministic(self):
        a, b = generate(CohortSpec(seed=4)), generate(CohortSpec(seed=4))
        assert a.Y.tobytes() == b.Y.tobytes() and a.X.tobytes() == b.X.tobytes()
        assert not np.array_equal(a.Y, generate(CohortSpec(seed=5)).Y)

    def test_deviation_mask_size(self):
        c = generate()
        for mask in c.truth["deviation_masks"].values():
            assert mask.size == int(np.ceil(0.05 * 480))

    def test_planted_offset(self):
        # subtracting the deviation-free cohort isolates offset * (1 + coupling * pc1)
        spec = CohortSpec(seed=2)
        clean = generate(CohortSpec(seed=2, deviations=[DeviationSpec(offset=0.0) for _ in range(3)]))
        c = generate(spec)
        diff = (c.Y - clean.Y).reshape(90, -1)
        s = c.truth["pc1_scores"]
        for g, name in enumerate(spec.group_names):
            rows = np.flatnonzero(c.labels == name)
            mask = c.truth["deviation_masks"][name]
            expected = 3.0 * (1 + 0.4 * s[rows])
            np.testing.assert_allclose(diff[np.ix_(rows, mask)], np.repeat(expected[:, None], mask.size, 1),
                                       atol=1e-12)
            outside = np.setdiff1d(np.arange(480), mask)
            assert np.all(diff[np.ix_(rows, outside)] == 0)
        assert np.all(diff[c.labels == "healthy"] == 0)

    def test_pc1_scores_standardized(self):
        c = generate(CohortSpec(seed=1))
        _, raw = first_principal_component(c.X)
        np.testing.assert_allclose(c.truth["pc1_scores"], raw / raw.std(), atol=1e-12)

    def test_regions_disjoint(self):
        regions = region_layout(DESK_GRID, 9, 0.05)
        assert len(regions) == 9
        flat = np.concatenate(regions)
        assert flat.size == len(set(flat.tolist()))

    @pytest.mark.parametrize("kwargs", [
        {"noise_std": -1.0}, {"n_healthy": -1}, {"grid": (8, 0, 6)}, {"covariate_correlation": 1.0},
        {"deviation_fraction": 0.0}, {"n_regions": 2},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            generate(CohortSpec(**kwargs))

    def test_deviation_region_out_of_layout(self):
        with pytest.raises(ValueError, match="outside"):
            generate(CohortSpec(deviations=[DeviationSpec(region=20)] * 3))


class TestSplit:
    def test_paper_counts(self):
        train, test = split(paper_labels(), SplitProtocol(PAPER_PROTOCOL, seed=0))
        labels = paper_labels()
        counts = [int((labels[test] == g).sum()) for g in ("healthy", "group1", "group2", "group3")]
        assert counts == [44, 44, 34, 43]
        assert train.size == 90
        assert np.sum(labels[train] != "healthy") / train.size == pytest.approx(15 / 90)

    def test_disjoint_and_complete(self):
        c = generate()
        train, test = split(c, SplitProtocol(DESK_PROTOCOL, seed=3))
        assert np.intersect1d(train, test).size == 0
        np.testing.assert_array_equal(np.union1d(train, test), np.arange(90))

    def test_deterministic(self):
        a = split(paper_labels(), SplitProtocol(PAPER_PROTOCOL, seed=7))
        b = split(paper_labels(), SplitProtocol(PAPER_PROTOCOL, seed=7))
        np.testing.assert_array_equal(a[0], b[0])

    def test_too_many_requested(self):
        with pytest.raises(ValueError, match="only 10"):
            split(generate(), SplitProtocol({"group1": 11}))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        c = generate(CohortSpec(seed=6))
        save_cohort(c, tmp_path / "c")
        d = load_cohort(tmp_path / "c")
        assert d.Y.tobytes() == c.Y.tobytes() and d.X.tobytes() == c.X.tobytes()
        assert list(d.labels) == list(c.labels)
        assert d.truth["A_true"].tobytes() == c.truth["A_true"].tobytes()
        for k, v in c.truth["deviation_masks"].items():
            np.testing.assert_array_equal(d.truth["deviation_masks"][k], v)
        assert d.spec == c.spec
        for name in ("meta.json", "X.npnt", "Y.npnt", "truth/A_true.npnt", "truth/masks.json"):
            assert (tmp_path / "c" / name).is_file()

    def test_truncated_file(self, tmp_path):
        c = generate(CohortSpec(seed=6))
        save_cohort(c, tmp_path / "c")
        path = tmp_path / "c" / "Y.npnt"
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(ValueError, match="offset"):
            load_cohort(tmp_path / "c")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cohort(tmp_path / "none")

    def test_subset(self):
        c = generate()
        s = c.subset(np.array([0, 5, 70]))
        assert s.n_subjects == 3 and s.truth["pc1_scores"].shape == (3,)
