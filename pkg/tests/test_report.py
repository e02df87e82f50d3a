import numpy as np

from terracover import metrics, report


def test_table_csv_and_markdown(tmp_path):
    t = report.Table("demo", ["a", "b"], [[1, 0.5], ["x", float("nan")]])
    csv_path, md_path = t.write(tmp_path, "demo")
    assert csv_path.read_text() == "a,b\n1,0.5000\nx,\n"
    assert md_path.read_text().splitlines()[2:] == ["| a | b |", "|---|---|", "| 1 | 0.5000 |",
                                                   "| x |  |"]


def test_confusion_rows_sum_to_one(taxonomy):
    counts = np.zeros((5, 5), int)
    counts[0, 0], counts[0, 2], counts[2, 2], counts[2, 0] = 6, 2, 3, 1
    t = report.confusion_table(metrics.ConfusionMatrix(counts), taxonomy, 1)
    assert t.header == ["true \\ predicted", "1", "3"]
    assert [row[0] for row in t.rows] == ["1", "3"]
    for row in t.rows:
        assert abs(sum(row[1:]) - 1) < 1e-12
    assert t.rows[0][1] == 0.75


def test_per_class_skips_absent(taxonomy):
    batch = metrics.MultiLabelBatch([{0}, {0, 3}], [{0}, {0}], 5)
    t = report.per_class_table(metrics.class_report(batch), taxonomy, 1)
    assert [r[0] for r in t.rows] == [0, 3]
    assert t.rows[1][-1] == 1 and t.rows[1][4] == 0


def test_correlation_table_constant_is_nan():
    t = report.correlation_table([1, 2, 3], [0.5, 0.5, 0.5], "f1")
    assert np.isnan(t.rows[0][2])
    t = report.correlation_table([1, 2, 3, 0], [0.1, 0.2, 0.3, 0.9], "f1")
    assert t.rows[0][1] == 3 and abs(t.rows[0][2] - 1) < 1e-12


def test_bundle(tmp_path):
    report.Table("one", ["k"], [[1]]).write(tmp_path / "a", "one")
    report.Table("two", ["k"], [[2]]).write(tmp_path / "b" / "sub", "two")
    out = report.bundle([tmp_path / "a", tmp_path / "b"], tmp_path / "r" / "report.md")
    text = out.read_text()
    assert text.index("### one") < text.index("### two")
    assert "| 2 |" in text
