import json

import pytest
from openpyxl import load_workbook

from app import __version__
from services.eval_harness import AblationRow, SweepRow, TransferReport, VarianceProfile
from services.report_writer import (
    MEAN_BLACK_BOX,
    REPORT_SCHEMA,
    ablation_frame,
    render_text,
    report_payload,
    sweep_frame,
    transfer_frame,
    variance_frame,
    write_report,
)


@pytest.fixture
def reports():
    return [
        TransferReport("a", "MIM", {"a": 100.0, "b": 40.0, "c": 20.0}, 5),
        TransferReport("a", "TGR", {"a": 100.0, "b": 60.0, "c": 50.0}, 5),
    ]


class TestFrames:

    def test_transfer_frame(self, reports):
        frame = transfer_frame(reports)
        assert list(frame.index) == ["MIM", "TGR"]
        assert list(frame.columns) == ["a", "b", "c", MEAN_BLACK_BOX]
        assert frame.loc["TGR", MEAN_BLACK_BOX] == 55.0

    def test_variance_frame(self):
        profile = VarianceProfile("m", "MIM", [1.0, 2.0, 3.0], (1.0, 2.0, 3.0), 4)
        frame = variance_frame([profile])
        assert list(frame.columns) == ["block_0", "block_1", "block_2", "shallow", "middle", "deep", "overall"]
        assert frame.loc["MIM", "overall"] == 2.0

    def test_ablation_and_sweep_index(self, reports):
        ablation = ablation_frame([AblationRow(frozenset(), reports[0])])
        assert ablation.index.name == "components" and list(ablation.index) == ["none"]
        sweep = sweep_frame([SweepRow(0, reports[0]), SweepRow(1, reports[1])])
        assert sweep.index.name == "k" and list(sweep.index) == [0, 1]

    def test_text_uses_one_decimal(self, reports):
        text = render_text("Transfer from a", transfer_frame(reports))
        assert text.startswith("Transfer from a\n")
        assert "55.0" in text and "55.00" not in text


class TestWriteReport:

    def test_files_and_payload(self, reports, tmp_path):
        payload = report_payload("transfer", "a", reports, samples=5)
        paths = write_report(tmp_path / "out" / "r", payload, transfer_frame(reports), "t", csv=True, xlsx=True)
        assert [p.name for p in paths] == ["r.json", "r.txt", "r.csv", "r.xlsx"]

        data = json.loads(paths[0].read_text())
        assert data["schema"] == REPORT_SCHEMA and data["tool_version"] == __version__
        assert data["samples"] == 5
        assert data["entries"][1]["mean_black_box_asr"] == 55.0
        assert paths[2].read_text().splitlines()[0] == "attack,a,b,c,mean_black_box"

    def test_plain_files_are_byte_stable(self, reports, tmp_path):
        payload = report_payload("transfer", "a", reports)
        first = write_report(tmp_path / "x", payload, transfer_frame(reports), "t", csv=True)
        blobs = [p.read_bytes() for p in first]
        second = write_report(tmp_path / "x", payload, transfer_frame(reports), "t", csv=True)
        assert [p.read_bytes() for p in second] == blobs

    def test_workbook_sheets(self, reports, tmp_path):
        payload = report_payload("transfer", "a", reports)
        path = write_report(tmp_path / "w", payload, transfer_frame(reports), "t", xlsx=True)[-1]
        wb = load_workbook(path)
        assert wb.sheetnames == ["Summary", "Results"]
        assert wb["Summary"]["B2"].value == "a"
        assert wb["Results"]["A3"].value == "TGR"
        assert wb["Results"]["E3"].value == 55.0
