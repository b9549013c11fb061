import json
import shutil
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from coxmesh.cli import main

FIXTURES = resources.files("coxmesh") / "fixtures"

FIT_TOML = """
seed = 0
[paths]
data = "data.csv"
domain = "domain.json"
[covariates]
sst = "synthetic"
[mesh]
inner_res = 4.0
outer_extension = 8.0
outer_res = 8.0
[model]
covariates = ["dcoast"]
months = [7]
years = [2010]
marks = true
random_effects = false
mark_covariates = ["dcoast"]
[inference]
optimizer = "bfgs"
init = { h_x = 5.0, h_y = 5.0, sigma = 1.0, size = [2.0, 10.0] }
[kfunc]
r_max = 6.0
n_radii = 6
n_sim = 9
[predict]
dx = 4.0
n_draws = 20
"""


def _workspace(tmp: Path) -> Path:
    for name in ("domain.json", "sim.toml"):
        shutil.copy(FIXTURES / name, tmp / name)
    (tmp / "fit.toml").write_text(FIT_TOML)
    return tmp


def _pipeline(ws: Path, out_name: str = "out") -> dict:
    assert main(["simulate", "--config", str(ws / "sim.toml"), "--out", str(ws / "data.csv"),
                 "--truth", str(ws / "truth.json")]) == 0
    out = ws / out_name
    assert main(["fit", "--config", str(ws / "fit.toml"), "--out-dir", str(out)]) == 0
    fit = str(out / "fit.json")
    assert main(["predict", "--fit", fit, "--species", "beluga", "--out-dir", str(out)]) == 0
    assert main(["evaluate", "--fit", fit, "--n-draws", "500", "--out-dir", str(out)]) == 0
    assert main(["kfunc", "--fit", fit, "--species", "bowhead", "--out-dir", str(out)]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "run.json"} | {
        "data.csv": (ws / "data.csv").read_bytes()
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    ws = _workspace(tmp_path_factory.mktemp("cli"))
    return ws, _pipeline(ws)


class TestPipeline:
    def test_outputs_written(self, pipeline):
        _, files = pipeline
        for name in ("fit.json", "fit_summary.csv", "raster.csv", "raster.svg", "scores.json", "k.csv", "k.svg"):
            assert name in files, name

    def test_fit_document(self, pipeline):
        ws, files = pipeline
        doc = json.loads(files["fit.json"])
        assert doc["converged"] is True
        assert {"nll", "logdet", "log_marginal", "iters"} <= set(doc["diagnostics"])
        assert doc["hyper"]["sigma"] > 0
        names = [r["name"] for r in doc["fixed_effects"]]
        assert "Beluga: intercept" in names

    def test_summary_csv(self, pipeline):
        _, files = pipeline
        lines = files["fit_summary.csv"].decode().splitlines()
        assert lines[0] == "name,mean,q025,q975"
        lo, hi = (float(v) for v in lines[1].split(",")[2:4])
        assert lo <= float(lines[1].split(",")[1]) <= hi

    def test_scores(self, pipeline):
        _, files = pipeline
        w = json.loads(files["scores.json"])["waic"]
        assert w["waic"] == -2 * (w["lppd"] - w["p_waic"])
        np.testing.assert_allclose(w["components"]["location"]["waic"] + w["components"]["marks"]["waic"], w["waic"])

    def test_kfunc_csv(self, pipeline):
        _, files = pipeline
        lines = files["k.csv"].decode().splitlines()
        assert lines[0] == "r,khat,norm,lo,hi" and len(lines) == 7

    def test_run_manifest(self, pipeline):
        ws, _ = pipeline
        run = json.loads((ws / "out" / "run.json").read_text())
        assert run["seed"] == 0 and len(run["config_sha256"]) == 64

    def test_byte_stable(self, pipeline):
        ws, first = pipeline
        second = _pipeline(ws, "again")
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], name


class TestErrors:
    def test_missing_data_file(self, tmp_path, capsys):
        ws = _workspace(tmp_path)
        code = main(["fit", "--config", str(ws / "fit.toml"), "--out-dir", str(ws / "o")])
        assert code == 1
        err = capsys.readouterr().err
        assert "paths.data" in err and "data.csv" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        ws = _workspace(tmp_path)
        (ws / "bad.toml").write_text(FIT_TOML.replace("[kfunc]", "[kfunc]\nbogus = 1"))
        assert main(["fit", "--config", str(ws / "bad.toml")]) == 1
        assert "kfunc.bogus" in capsys.readouterr().err

    def test_missing_fit(self, tmp_path, capsys):
        assert main(["predict", "--fit", str(tmp_path / "nope.json")]) == 1
        assert "nope.json" in capsys.readouterr().err

    def test_mesh_command(self, tmp_path):
        ws = _workspace(tmp_path)
        assert main(["mesh", "--domain", str(ws / "domain.json"), "--inner-res", "4", "--out", str(ws / "m")]) == 0
        from coxmesh.mesh import read_mesh

        mesh, w = read_mesh(ws / "m.mesh.json")
        np.testing.assert_allclose(w.sum(), 1148.0, rtol=1e-9)
        assert mesh.min_angles().min() >= 20 - 1e-9
