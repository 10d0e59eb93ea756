import pathlib
import xml.etree.ElementTree as ET

import pytest

from fewshot_rlvr.plotting import DEFAULT_COLUMNS, metrics_svg, series_table_csv
from fewshot_rlvr.trainer import MetricsRow

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
NS = "{http://www.w3.org/2000/svg}"


def toy_series():
    def run(scale):
        return [
            MetricsRow(s, scale * s / 10, 0.9, scale * s / 20, 7.0 + s % 3, 1e-3 * s * scale, 0.0, 0.0)
            for s in range(1, 11)
        ]

    return {"beta0.001": run(1.0), "beta0.04 <b>": run(0.5)}


class TestTable:
    def test_long_format(self):
        text = series_table_csv(toy_series(), ("mean_kl",))
        lines = text.splitlines()
        assert lines[0] == "run,step,mean_kl"
        assert len(lines) == 1 + 20
        assert lines[1] == "beta0.001,1,0.001"


class TestSvg:
    def test_well_formed_and_complete(self):
        svg = metrics_svg(toy_series(), title="a & b")
        root = ET.fromstring(svg)
        lines = root.findall(f"{NS}polyline")
        assert len(lines) == len(DEFAULT_COLUMNS) * 2
        assert root.find(f"{NS}title").text == "a & b"
        assert root.find(f"{NS}desc").text.strip() == series_table_csv(toy_series(), DEFAULT_COLUMNS).strip()

    def test_points_span_panel(self):
        root = ET.fromstring(metrics_svg(toy_series(), ("mean_total_reward",)))
        xs = [float(p.split(",")[0]) for line in root.findall(f"{NS}polyline") for p in line.get("points").split()]
        assert min(xs) == 70.0 and max(xs) == 590.0

    def test_golden(self):
        # frozen rendering; any layout change must be deliberate
        assert metrics_svg(toy_series(), title="golden") == (FIXTURES / "golden_plot.svg").read_text()

    def test_flat_series(self):
        flat = {"r": [MetricsRow(s, 1.0, 1.0, 1.0, 5.0, 0.0, 0.0, 0.0) for s in range(3)]}
        ET.fromstring(metrics_svg(flat))

    def test_empty(self):
        with pytest.raises(ValueError):
            metrics_svg({})
