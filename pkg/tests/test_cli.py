import json
import subprocess
import sys

import numpy as np
import pytest

from geokrige import __version__
from geokrige.cli import main, parse_cells, read_dataset
from geokrige.geo import GeoDataset, grid_centers, save_geo_csv, synthetic_geo
from geokrige.kernels import GEODESIC, KernelSpec


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "data.csv"
    assert main(["simulate", "--beta", "0.5", "--sigma2-u", "0.2", "--sigma2-x", "0.01",
                 "--seed", "3", "--out", str(path)]) == 0
    return path


def body(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


class TestSimulate:
    def test_header_and_rows(self, dataset):
        text = dataset.read_text()
        assert text.startswith(f"# geokrige {__version__}\n")
        assert "# seed: 3" in text
        assert "beta=0.5" in text
        assert "out=" not in text
        obs, y, targets = read_dataset(dataset)
        assert obs.shape == (54, 2) and y.shape == (54,) and targets.shape == (10, 2)

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GEOKRIGE_SEED", "3")
        a = tmp_path / "a.csv"
        main(["simulate", "--beta", "0.5", "--sigma2-u", "0.2", "--sigma2-x", "0.01", "--out", str(a)])
        b = tmp_path / "b.csv"
        main(["simulate", "--beta", "0.5", "--sigma2-u", "0.2", "--sigma2-x", "0.01", "--seed", "3",
              "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_missing_required(self, capsys):
        assert main(["simulate"]) == 2
        err = capsys.readouterr().err
        assert "usage:" in err and "--beta" in err

    def test_config_file_and_precedence(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("# comment\nbeta = 0.5\nsigma2-u = 0.2\nsigma2_x=0.01\nseed = 9\n")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["simulate", "--config", str(conf), "--seed", "3", "--out", str(a)]) == 0
        main(["simulate", "--beta", "0.5", "--sigma2-u", "0.2", "--sigma2-x", "0.01", "--seed", "3",
              "--out", str(b)])
        assert body(a) == body(b)

    def test_bad_config(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("nonsense = 1\n")
        assert main(["simulate", "--config", str(conf)]) == 2


class TestKrige:
    def test_kale_and_kile(self, dataset, tmp_path):
        out = {}
        for m in ("kale", "kile"):
            path = tmp_path / f"{m}.csv"
            assert main(["krige", "--data", str(dataset), "--method", m, "--beta", "0.5",
                         "--sigma2-u", "0.2", "--sigma2-x", "0.01", "--intervals", "--out", str(path)]) == 0
            rows = body(path)
            assert rows[0] == "x1,x2,mean,mse,var,lo,hi"
            out[m] = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        assert np.all(out["kale"][:, 3] <= out["kile"][:, 3] + 1e-10)

    def test_malformed_data(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("kind,x1,x2,y\nobs,0,0,1\nobs,1,zz,2\n")
        assert main(["krige", "--data", str(path), "--beta", "1"]) == 2
        assert "bad.csv:3" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["krige", "--data", str(tmp_path / "nope.csv"), "--beta", "1"]) == 2

    def test_duplicate_sites_jittered(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text("kind,x1,y\nobs,0,1\nobs,0,2\ntarget,1,\n")
        assert main(["krige", "--data", str(path), "--beta", "1", "--method", "kile",
                     "--out", str(tmp_path / "o.csv")]) == 0

    def test_numeric_failure_exit_code(self, dataset, monkeypatch, capsys):
        import geokrige.cli as cli
        from geokrige.gp_core import SingularMatrixError

        def boom(*a, **k):
            raise SingularMatrixError("leading minor 2 failed", 2)
        monkeypatch.setattr(cli, "build_cov_matrices", boom)
        assert main(["krige", "--data", str(dataset), "--beta", "1"]) == 1
        assert "numerical" in capsys.readouterr().err


class TestFitHmc:
    def test_fit_json(self, dataset, tmp_path):
        path = tmp_path / "fit.json"
        assert main(["fit", "--data", str(dataset), "--restarts", "2", "--godambe",
                     "--godambe-draws", "20", "--sigma2-u", "0.2", "--n-mc", "64", "--out", str(path)]) == 0
        d = json.loads(path.read_text())
        assert d["header"]["command"] == "fit"
        assert d["beta"] > 0 and np.array(d["godambe"]["H"]).shape == (3, 3)

    def test_hmc_outputs(self, dataset, tmp_path):
        pred, draws, diag = tmp_path / "p.csv", tmp_path / "d.csv", tmp_path / "g.json"
        argv = ["hmc", "--data", str(dataset), "--beta", "0.5", "--sigma2-u", "0.2", "--sigma2-x",
                "0.01", "--chains", "2", "--warmup", "30", "--draws", "20", "--leapfrog", "4",
                "--out", str(pred), "--draws-out", str(draws), "--diagnostics-out", str(diag)]
        assert main(argv) == 0
        assert body(pred)[0] == "x1,x2,mean,var,lo,hi"
        assert len(body(draws)) == 1 + 2 * 20
        d = json.loads(diag.read_text())
        assert {"max_rhat", "min_ess", "divergences", "acceptance_rate"} <= set(d)
        first = pred.read_bytes()
        assert main(argv) == 0
        assert pred.read_bytes() == first


class TestSweep:
    def test_parse_cells(self):
        cells = parse_cells("beta=0.1,2;sigma2_u=1", True)
        assert len(cells) == 10
        assert {c.beta for c in cells} == {0.1, 2.0}
        with pytest.raises(ValueError):
            parse_cells("gamma=1", True)
        with pytest.raises(ValueError):
            parse_cells("beta=7", True)

    def test_threads_do_not_change_output(self, tmp_path):
        base = ["sweep", "--cells", "beta=0.5;sigma2_x=0.1;sigma2_u=0.1,1", "--reps", "3",
                "--chains", "2", "--warmup", "20", "--draws", "20", "--leapfrog", "4", "--seed", "1"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(base + ["--threads", "1", "--out", str(a)]) == 0
        assert main(base + ["--threads", "2", "--out", str(b), "--checkpoint-dir", str(tmp_path / "ck")]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(body(a)) == 1 + 2 * 3

    def test_unknown_method(self):
        assert main(["sweep", "--methods", "KALE,IDW", "--reps", "1"]) == 2


class TestGeo:
    def make(self, tmp_path):
        spec = KernelSpec(1.0, 1e-3, 0.3, GEODESIC)
        data, _, _ = synthetic_geo(spec, 7500.0, grid_centers((-20, 10), (45, 65)), n_obs=12, seed=2)
        path = tmp_path / "anom.csv"
        save_geo_csv(GeoDataset(data.lon, data.lat, data.value + 0.4), path)
        return path

    def test_geo_kale(self, tmp_path):
        data = self.make(tmp_path)
        out, summ = tmp_path / "g.csv", tmp_path / "s.json"
        argv = ["geo", "--data", str(data), "--center", "--n-mc", "64", "--restarts", "2",
                "--out", str(out), "--summary", str(summ)]
        assert main(argv) == 0
        rows = body(out)
        assert rows[0] == "lon,lat,mean,var,lo95,hi95"
        assert len(rows) == 1 + 24 - 12
        s = json.loads(summ.read_text())
        assert s["mode"] == "KALE" and s["runtime_s"] is None and s["sigma2_u"] == 7500.0
        first = out.read_bytes()
        main(argv)
        assert out.read_bytes() == first

    def test_geo_bad_line(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("lon,lat,value\n370,10,1\n")
        assert main(["geo", "--data", str(path)]) == 2
        assert "line 2" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "geokrige", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and __version__ in r.stdout
