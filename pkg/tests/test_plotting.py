import math

from mlk.eval import EvalReport, QueryRecord, aggregate
from mlk.plotting import plot_loss_curve, render_report_figures


def fake_report():
    recs = []
    for k in (2, 4):
        for i, err in enumerate((1.0, 3.0, math.inf)):
            failed = math.isinf(err)
            recs.append(QueryRecord(f"q-{i}", "oracle", "motion_averaging", k, "covis_oracle", err / 10, err, err,
                                    0.5 * k, failed, "degenerate" if failed else ""))
    return EvalReport(recs, aggregate(recs))


def test_report_figures_are_written_and_reproducible(tmp_path):
    a = render_report_figures(fake_report(), tmp_path / "a")
    b = render_report_figures(fake_report(), tmp_path / "b")
    assert set(a) == {"recall_png", "k_sweep_png"}
    for key in a:
        assert a[key].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert a[key].read_bytes() == b[key].read_bytes()


def test_single_k_has_no_sweep(tmp_path):
    report = fake_report()
    report.aggregates = [r for r in report.aggregates if r["k"] == 2]
    assert "k_sweep_png" not in render_report_figures(report, tmp_path)


def test_loss_curve_plot(tmp_path):
    curve = [{"step": i, "total": 1.0 / (i + 1), "grad_norm": 0.1 * i} for i in range(80)]
    path = plot_loss_curve(curve, tmp_path / "loss.png")
    assert path.stat().st_size > 1000
