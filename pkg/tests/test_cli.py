import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from cbmlab.cli import config_hash, main, stage_seed, validate_config
from cbmlab.interventions import InterventionCurve

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


def rows(path):
    return [r for r in csv.reader(Path(path).read_text().splitlines()) if r and not r[0].startswith("#")]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


def write_config(tmp_path, **changes):
    cfg = json.loads(SMOKE.read_text())
    cfg.update(changes)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_missing_seed_names_field(tmp_path, capsys):
    cfg = json.loads(SMOKE.read_text())
    del cfg["seed"]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "seed: missing required field" in capsys.readouterr().err


def test_bad_json_reports_line(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text('{\n  "schema_version": 1,\n  "seed": ,\n}')
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("patch,field", [
    ({"schema_version": 2}, "schema_version"),
    ({"task": {"K": 4, "k": 5, "n": 4, "L": 4, "N": 10}}, "task"),
    ({"models": [{"kind": "resnet"}]}, "models[0].kind"),
    ({"train": {"lr": -1}}, "train"),
    ({"interventions": {"fractions": [0.2, 1.0]}}, "interventions.fractions"),
    ({"bogus": 1}, "bogus"),
])
def test_validation_errors_name_field(patch, field):
    cfg = {**json.loads(SMOKE.read_text()), **patch}
    with pytest.raises(ValueError, match=field.replace("[", r"\[").replace("]", r"\]")):
        validate_config(cfg)


def test_stage_seeds_are_independent_and_stable():
    assert stage_seed(7, "train:cem") == stage_seed(7, "train:cem")
    assert stage_seed(7, "train:cem") != stage_seed(7, "train:mixcem")
    assert stage_seed(7, "curve") != stage_seed(8, "curve")
    assert 0 <= stage_seed(2**64 - 1, "x") < 2**64


def test_every_csv_has_header(run_dir):
    h = config_hash(validate_config(json.loads(SMOKE.read_text())))
    csvs = sorted(run_dir.rglob("*.csv"))
    assert csvs
    for path in csvs:
        first = path.read_text().splitlines()[0]
        assert first.startswith("# stage=") and f"config_hash={h}" in first and "schema_version=1" in first


def test_rerun_is_byte_identical(run_dir, tmp_path):
    other = tmp_path / "again"
    assert main(["run", "--config", str(SMOKE), "--out", str(other)]) == 0
    for path in run_dir.rglob("*"):
        if path.is_file():
            assert path.read_bytes() == (other / path.relative_to(run_dir)).read_bytes(), path


def test_curve_subcommand_shape(run_dir, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(run_dir, out)
    assert main(["curve", "--config", str(SMOKE), "--out", str(out), "--fractions", "0,0.5,1",
                 "--trials", "3", "--noise", "0.1", "--model", "mixcem", "--no-plots"]) == 0
    body = rows(out / "curves" / "mixcem_shift0.1.csv")
    assert body[0] == ["fraction", "trial", "accuracy"] and len(body) == 1 + 9
    assert InterventionCurve.read(out / "curves" / "mixcem_shift0.1.csv").accuracies.shape == (3, 3)


def test_report_row_count(run_dir, tmp_path):
    out = tmp_path / "one"
    shutil.copytree(run_dir, out)
    for p in (out / "curves").glob("*"):
        if not p.name.startswith("mixcem_"):
            p.unlink()
    assert main(["report", "--config", str(SMOKE), "--out", str(out), "--no-plots"]) == 0
    body = rows(out / "report" / "summary.csv")
    cfg = validate_config(json.loads(SMOKE.read_text()))
    shift_levels = 1 + len(cfg["interventions"]["shift_levels"])
    assert len(body) - 1 == 1 * shift_levels


def test_evaluate_matches_curve_fraction_zero(run_dir):
    for kind in ("vanilla_cbm", "mixcem"):
        metrics = {float(r[2]): float(r[4]) for r in rows(run_dir / "metrics" / f"{kind}.csv")[1:]}
        for level, acc in metrics.items():
            curve = InterventionCurve.read(run_dir / "curves" / f"{kind}_shift{level:g}.csv")
            assert np.all(curve.accuracies[:, 0] == acc)


def test_plots_are_svg_without_dates(run_dir):
    svgs = list((run_dir / "report").glob("*.svg"))
    assert svgs
    for p in svgs:
        text = p.read_text()
        assert text.lstrip().startswith("<?xml") and "<dc:date>" not in text


def test_missing_upstream_cites_path(tmp_path, capsys):
    assert main(["train", "--config", str(SMOKE), "--out", str(tmp_path)]) == 1
    assert str(tmp_path / "data" / "meta.json") in capsys.readouterr().err


def test_stale_model_detected(run_dir, tmp_path, capsys):
    out = tmp_path / "stale"
    shutil.copytree(run_dir, out)
    path = write_config(tmp_path, train={"max_epochs": 5, "val_freq": 2, "val_mc_samples": 2})
    assert main(["evaluate", "--config", str(path), "--out", str(out)]) == 1
    assert "stale model" in capsys.readouterr().err


def test_unknown_model_flag(run_dir, capsys):
    assert main(["evaluate", "--config", str(SMOKE), "--out", str(run_dir), "--model", "cem"]) == 1
    assert "cem" in capsys.readouterr().err
