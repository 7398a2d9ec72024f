import json

from occ4d.diffusion import DiffusionLossRecord
from occ4d.export import DIFFUSION_LOSS_HEADER, LossLog, read_loss_csv, write_metrics_report, write_rows


def _record(step, stage="simple"):
    return DiffusionLossRecord(step=step, stage=stage, l_simple=0.5 / (step + 1), l_vlb=0.0, total=0.5 / (step + 1))


def test_loss_log_writes_header_and_rows(tmp_path):
    path = tmp_path / "logs" / "loss.csv"
    log = LossLog(path, DIFFUSION_LOSS_HEADER)
    for step in range(3):
        log.append(_record(step))
    rows = read_loss_csv(path)
    assert list(rows[0]) == list(DIFFUSION_LOSS_HEADER)
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert float(rows[1]["l_simple"]) == 0.25


def test_loss_log_resume_drops_rows_from_resume_step(tmp_path):
    path = tmp_path / "loss.csv"
    log = LossLog(path, DIFFUSION_LOSS_HEADER)
    for step in range(5):
        log.append(_record(step))
    resumed = LossLog(path, DIFFUSION_LOSS_HEADER, resume_from=3)
    resumed.append(_record(3, "full"))
    rows = read_loss_csv(path)
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert rows[-1]["stage"] == "full"


def test_fresh_log_truncates_existing_file(tmp_path):
    path = tmp_path / "loss.csv"
    LossLog(path, DIFFUSION_LOSS_HEADER).append(_record(0))
    LossLog(path, DIFFUSION_LOSS_HEADER)
    assert read_loss_csv(path) == []


def test_metrics_report(tmp_path):
    report = {"iou": 0.5, "per_class": {"car": 0.25}, "sweep": [{"steps": 10, "ratio": 1.0, "fid_proxy": 2.0}]}
    out = write_metrics_report(report, tmp_path / "eval" / "metrics.json")
    assert json.loads(out.read_text(encoding="utf-8")) == report


def test_write_rows(tmp_path):
    out = write_rows([{"steps": 10, "ratio": 0.5}, {"steps": 20, "ratio": 1.0}], tmp_path / "sweep.csv")
    assert out.read_text(encoding="utf-8").splitlines() == ["steps,ratio", "10,0.5", "20,1.0"]


def test_resumed_log_keeps_earlier_rows_verbatim(tmp_path):
    path = tmp_path / "loss.csv"
    path.write_text(
        "step,stage,l_simple,l_vlb,total\n0,simple,0.9,0.0,0.9\n1,simple,0.125,0.0,0.125\n2,full,0.1,0.5,0.1005\n",
        encoding="utf-8",
    )
    LossLog(path, DIFFUSION_LOSS_HEADER, resume_from=2).append(_record(2, "full"))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[:3] == ["step,stage,l_simple,l_vlb,total", "0,simple,0.9,0.0,0.9", "1,simple,0.125,0.0,0.125"]
    assert [r["stage"] for r in read_loss_csv(path)] == ["simple", "simple", "full"]
