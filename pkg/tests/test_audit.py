import csv

import numpy as np
import pytest

from terracover import audit
from terracover.errors import AuditError
from terracover.trainer import ArrayData

K = 5


class CopyStub:
    """Predicts exactly the label vector stored in the first image row."""

    task = "classify"

    def forward(self, x):
        return (x[:, 0, 0, :K] * 2 - 1) * 40


class SegStub:
    task = "segment"

    def forward(self, x):
        return np.moveaxis(np.eye(K)[x[:, 0].astype(int)], -1, 1) * 40


def make_data(rng, n, flip=()):
    """Images carry the clean labels; targets may be tampered at ``flip``."""
    clean = (rng.random((n, K)) > 0.5).astype(np.float32)
    clean[:, 0] = 1
    images = np.zeros((n, 3, 2, K), np.float32)
    images[:, 0, 0, :] = clean
    targets = clean.copy()
    for i in flip:
        targets[i, 4] = 1 - targets[i, 4]
    truths = [frozenset(np.flatnonzero(t).tolist()) for t in targets]
    ids = [f"r{i // 10}_c{i % 10}" for i in range(n)]
    return ArrayData(ids, images, np.zeros((n, 2, K), np.uint8), targets, truths)


class TestRank:
    def test_stub_equal_losses_in_id_order(self, rng, taxonomy):
        data = make_data(rng, 12)
        ranked = audit.rank_by_loss(CopyStub(), None, 1, taxonomy, data=data)
        assert len(ranked) == 12
        assert len({r.loss for r in ranked}) == 1
        assert [r.patch_id for r in ranked] == sorted(data.ids)
        assert ranked[0].loss < 1e-15

    def test_flipped_label_ranks_first(self, rng, taxonomy):
        data = make_data(rng, 20, flip=[13])
        ranked = audit.rank_by_loss(CopyStub(), None, 1, taxonomy, data=data)
        assert ranked[0].patch_id == data.ids[13]
        assert ranked[0].stored_truth.indices == data.truths[13]
        assert all(a.loss >= b.loss for a, b in zip(ranked, ranked[1:]))

    def test_probabilities(self, rng, taxonomy):
        ranked = audit.rank_by_loss(CopyStub(), None, 1, taxonomy, data=make_data(rng, 4))
        for r in ranked:
            assert set(r.probabilities) == set(r.predicted.indices)
            assert all(0 <= p <= 1 for p in r.probabilities.values())

    def test_deterministic(self, rng, taxonomy):
        data = make_data(rng, 15, flip=[2, 7])
        a = audit.rank_by_loss(CopyStub(), None, 1, taxonomy, data=data)
        b = audit.rank_by_loss(CopyStub(), None, 1, taxonomy, data=data)
        assert a == b

    def test_empty(self, taxonomy):
        with pytest.raises(AuditError, match="empty"):
            audit.rank_by_loss(CopyStub(), [], 1, taxonomy)

    def test_segmentation(self, rng, taxonomy):
        masks = rng.integers(0, K, (4, 8, 8)).astype(np.uint8)
        images = np.zeros((4, 3, 8, 8), np.float32)
        images[:, 0] = masks
        stored = masks.copy()
        stored[2] = (stored[2] + 1) % K
        data = ArrayData(list("abcd"), images, stored, np.zeros((4, K)), [frozenset()] * 4)
        ranked = audit.rank_by_loss(SegStub(), None, 1, taxonomy, data=data)
        assert ranked[0].patch_id == "c"
        assert ranked[0].predicted.indices == frozenset(np.unique(masks[2]).tolist())


class TestFlag:
    @pytest.fixture
    def ranked(self, rng, taxonomy):
        return audit.rank_by_loss(CopyStub(), None, 1, taxonomy,
                                  data=make_data(rng, 10, flip=[1, 5, 8]))

    def test_all(self, ranked):
        ids, _ = audit.flag_suspects(ranked, 1.0)
        assert ids == [r.patch_id for r in ranked]

    def test_ceiling(self, ranked):
        assert len(audit.flag_suspects(ranked, 0.25)[0]) == 3
        assert len(audit.flag_suspects(ranked, 0.3)[0]) == 3
        assert len(audit.flag_suspects(ranked, 0.01)[0]) == 1

    def test_monotone(self, ranked):
        prev = set()
        for f in (0.1, 0.2, 0.35, 0.5, 0.9, 1.0):
            cur = set(audit.flag_suspects(ranked, f)[0])
            assert prev <= cur
            prev = cur

    @pytest.mark.parametrize("f", [0, -0.5, 1.01])
    def test_fraction_range(self, ranked, f):
        with pytest.raises(AuditError):
            audit.flag_suspects(ranked, f)

    def test_report_text(self, ranked, taxonomy):
        _, text = audit.flag_suspects(ranked, 0.1, taxonomy)
        assert "Predicted: " in text and "True label: " in text and "Loss: " in text
        assert "(Probability: 1.00)" in text
        assert "Artificial surfaces" in text

    def test_planted_recall(self, ranked):
        ids, _ = audit.flag_suspects(ranked, 0.3)
        assert audit.planted_recall(ids, ["r0_c1", "r0_c5", "r0_c8"]) == 1.0
        assert audit.planted_recall(ids[:1], ["r0_c1", "r0_c5"]) == 0.5


def test_csv(tmp_path, rng, taxonomy):
    ranked = audit.rank_by_loss(CopyStub(), None, 1, taxonomy, data=make_data(rng, 5, flip=[0]))
    path = audit.write_suspects(ranked, tmp_path / "s.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["rank", "patch_id", "loss", "predicted", "probabilities", "stored_truth"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    assert rows[1][1] == "r0_c0"
    assert len(rows[1][3].split(";")) == len(rows[1][4].split(";"))
