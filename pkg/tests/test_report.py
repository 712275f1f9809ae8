import json

import pytest

from zsforget.encoders import InputError
from zsforget.evaluation import EvalReport
from zsforget.report import emit_report, format_json, format_text, format_tsv, load_report, table_rows

PAPER_ROW = dict(
    method="Lip", forgetting_type="ZS", target_class="2009 Bentley Arnage Sedan", dataset="StanfordCars",
    target_acc_bf=0.397, target_acc_af=0.056, other_acc_bf=0.6, other_acc_af=0.59,
)


def _row(**kw):
    return EvalReport(**{**PAPER_ROW, **kw})


def test_text_table_carries_zs_tag_and_arrow():
    text = format_text([_row()])
    header, line = text.splitlines()[0], text.splitlines()[2]
    for col in ("Method", "Dataset", "Forgetting Type", "Target BF → AF", "Other BF → AF"):
        assert col in header
    assert line.split()[:3] == ["Lip", "StanfordCars", "ZS"]
    assert "0.397 → 0.056" in line


def test_not_zs_label():
    assert "not ZS" in format_text([_row(method="AmnsRetain", forgetting_type="not_ZS")])


def test_empty_cross_dataset_columns_omitted():
    header, _ = table_rows([_row()])
    assert len(header) == 6
    header, cells = table_rows([_row(cross_dataset_acc={"Flowers": (0.7, 0.69)}), _row()])
    assert header[-1] == "Flowers BF → AF"
    assert cells[0][-1] == "0.700 → 0.690" and cells[1][-1] == "-"


def test_json_round_trip(tmp_path):
    row = _row(cross_dataset_acc={"Flowers": (0.7, 0.69)}, retrieval={"bf": {"IfT@1": 1.0}, "af": {"IfT@1": 0.0}})
    path = tmp_path / "r.json"
    path.write_text(format_json([row], config_hash="abc"))
    rows, extra = load_report(path)
    assert rows == [row] and extra == {"config_hash": "abc"}


def test_bad_schema(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps({"schema_version": 99, "rows": []}))
    with pytest.raises(InputError):
        load_report(path)


def test_tsv_columns():
    lines = format_tsv([_row(cross_dataset_acc={"Flowers": (0.7, 0.69)})]).splitlines()
    assert lines[0].split("\t")[-2:] == ["Flowers_bf", "Flowers_af"]
    assert lines[1].split("\t")[4] == "0.397000"


def test_retrieval_keys_sorted_numerically():
    ret = {k: {"IfT@1": 1.0, "IfT@10": 1.0, "IfT@5": 1.0} for k in ("bf", "af")}
    line = [l for l in format_text([_row(retrieval=ret)]).splitlines() if l.startswith("retrieval")][0]
    assert line.index("IfT@5") < line.index("IfT@10")


def test_verdict_lines_tagged_by_method_when_mixed():
    rows = [_row(verdicts=["consistent_forgotten"]), _row(method="ULip", verdicts=["consistent_forgotten"])]
    text = format_text(rows)
    assert "verification [Lip: 2009 Bentley Arnage Sedan]" in text
    assert "verification [ULip: 2009 Bentley Arnage Sedan]" in text


def test_emit_report(tmp_path):
    paths = emit_report(_row(), tmp_path / "out", formats=("json", "txt", "tsv"))
    assert [p.name for p in paths] == ["report.json", "report.txt", "report.tsv"]
    assert load_report(paths[0])[0] == [_row()]
    with pytest.raises(InputError):
        emit_report(_row(), tmp_path, formats=("pdf",))


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(_row(), blocker / "sub")
