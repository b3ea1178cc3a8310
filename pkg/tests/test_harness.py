import json
import math

import numpy as np
import pytest

from saddlemax import cli
from saddlemax.errors import GridUnderflow
from saddlemax.harness import (
    ExperimentConfig,
    build_model,
    fit_slope,
    run_converge,
    run_posterior,
    run_sample,
    run_spa_vs_clt,
    theta_from_params,
)
from saddlemax.model_zoo import ConcatModel, LinearMapModel


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(model="poisson", n_grid=[4, 2])
    with pytest.raises(ValueError):
        ExperimentConfig(model="poisson", n_grid=[0, 2])
    with pytest.raises(ValueError):
        ExperimentConfig(model="poisson", experiment="nope")
    with pytest.raises(ValueError):
        ExperimentConfig(model="poisson", replicates=0)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"model": "poisson", "colour": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(model="poisson", kinds=["laplace"])
    assert ExperimentConfig(model="poisson", experiment="spa-vs-clt").experiment == "spa_vs_clt"


def test_build_model_structure():
    m = build_model("birth_death", {"t": 2.0, "beta": [1, 2]})
    assert isinstance(m, ConcatModel) and m.m == 2
    m = build_model("gamma_log", {"A": [[1, 0.5], [0.2, 1]]})
    assert isinstance(m, LinearMapModel)
    np.testing.assert_array_equal(theta_from_params(build_model("poisson"), {"lambda": 3}), [3.0])
    assert theta_from_params(build_model("gamma"), {"alpha": 2}) is None
    with pytest.raises(ValueError):
        build_model("weibull")


def test_fit_slope_exact_power():
    n = np.array([4, 8, 16, 32, 64, 128])
    fit = fit_slope(n, 3.0 * n**-2.0, window=5)
    assert fit.slope == pytest.approx(-2.0, abs=1e-12)
    assert fit.n_used == [8.0, 16.0, 32.0, 64.0, 128.0]
    assert not fit.noisy
    noisy = fit_slope(n, [1, 0.1, 1, 0.1, 1, 0.1])
    assert noisy.noisy
    assert math.isnan(fit_slope([4], [1.0]).slope)


def _converge_cfg(tmp_path, threads):
    return ExperimentConfig(model="gamma_fi", theta0=[1.0], n_grid=[4, 8, 16, 32], kinds=["exact", "spa", "zeroth"],
                            box=[[0.05, 20]], output=str(tmp_path / f"conv{threads}.csv"), threads=threads)


def test_converge_deterministic_across_threads(tmp_path):
    _, s1, t1, _ = run_converge(_converge_cfg(tmp_path, 1))
    _, s2, t2, _ = run_converge(_converge_cfg(tmp_path, 2))
    assert t1 == t2
    assert (tmp_path / "conv1.csv").read_bytes() == (tmp_path / "conv2.csv").read_bytes()
    meta = json.loads((tmp_path / "conv1.csv.json").read_text())
    assert meta["reference_source"] == ["closed_form"]
    assert "numpy" in meta["versions"]
    assert s1["spa"].slope < -1.7 and s1["zeroth"].slope == pytest.approx(-1, abs=0.15)


def test_sample_deterministic_has_zero_spread():
    cfg = ExperimentConfig(model="poisson", experiment="sample", theta0=[3.0], n_grid=[20], replicates=5,
                           kinds=["spa", "exact"], deterministic=True, box=[[1e-3, 100]])
    summary, _, _ = run_sample(cfg)
    assert summary["failed"] == 0
    for k in ("spa", "exact"):
        np.testing.assert_allclose(summary["kinds"][k]["cov"], 0.0, atol=1e-20)
        np.testing.assert_allclose(summary["kinds"][k]["mean"], 0.0, atol=1e-8)
    assert summary["theory_cov"][0, 0] == pytest.approx(3.0, rel=1e-10)


def test_sample_seeded_reproducible():
    cfg = ExperimentConfig(model="poisson", experiment="sample", theta0=[3.0], n_grid=[20], replicates=20,
                           kinds=["spa"], seed=7, box=[[1e-3, 100]])
    a = run_sample(cfg)[1]
    b = run_sample(cfg)[1]
    assert a == b


def test_misspecified_sandwich():
    # Gamma(2, 1) data fitted by a Poisson mean: theta_hat = x_bar, variance of the data is 2
    cfg = ExperimentConfig(model="poisson", experiment="sample", theta0=[2.0], n_grid=[50], replicates=400,
                           kinds=["spa"], seed=3, box=[[1e-3, 100]], data_model="gamma",
                           data_theta=[2.0, 1.0])
    summary, _, _ = run_sample(cfg)
    assert summary["theory_cov"][0, 0] == pytest.approx(2.0, rel=1e-10)
    assert summary["kinds"]["spa"]["cov"][0, 0] == pytest.approx(2.0, rel=0.2)


def test_posterior_normal_location_is_exact():
    cfg = ExperimentConfig(model="normal", experiment="posterior", params={"cov": [[1.0]]}, theta0=[0.0],
                           n_grid=[16], kinds=["exact", "spa"], xi=[0.5])
    summary, _, _ = run_posterior(cfg)
    for k in ("exact", "spa"):
        assert summary["kinds"][k]["cov"][0, 0] == pytest.approx(1.0, rel=1e-4)
        assert summary["kinds"][k]["mean"][0] == pytest.approx(0.5, abs=1e-6)


def test_posterior_grid_underflow():
    cfg = ExperimentConfig(model="poisson", experiment="posterior", theta0=[0.01], n_grid=[1], kinds=["spa"],
                           grid_halfwidth=0.005, grid_points=11, y0=[0.0])
    with pytest.raises(GridUnderflow):
        run_posterior(cfg)


def test_spa_vs_clt_rows():
    cfg = ExperimentConfig(model="gamma", experiment="spa_vs_clt", theta0=[2.0, 1.0], n_grid=[8, 16, 32, 64],
                           s_grid=[0.2], y_scaled=[1.0])
    rows, slopes, _, _ = run_spa_vs_clt(cfg)
    assert len(rows) == 8
    assert slopes["s=0.2"].slope == pytest.approx(-1, abs=0.1)
    last = [r for r in rows if r[0] == "y_scaled" and r[2] == 64][0]
    assert last[4] < last[5]


def test_cli_solve_eval_fit(tmp_path, capsys):
    assert cli.main(["solve", "--model", "poisson", "--params", "lambda=3", "--y", "5"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["s_hat"][0] == pytest.approx(math.log(5 / 3), rel=1e-12)

    assert cli.main(["eval", "--model", "gamma_fi", "--theta", "1.2", "--kind", "exact", "--x", "40",
                     "--n", "32"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert np.isfinite(out["total"])

    dest = tmp_path / "fit.json"
    assert cli.main(["fit", "--model", "poisson", "--kind", "spa", "--x", "14", "--n", "2", "--init", "1",
                     "--box", "0.001:100", "--out", str(dest)]) == 0
    fit = json.loads(dest.read_text())
    assert fit["theta_hat"][0] == pytest.approx(7.0, rel=1e-8)
    assert fit["converged"]


def test_cli_errors(capsys):
    assert cli.main(["solve", "--model", "poisson", "--theta", "3", "--y", "0"]) == 2
    assert "NoSaddlepoint" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["eval", "--model", "poisson", "--x", "3"])


def test_cli_experiment_config_file(tmp_path):
    cfg = {"model": "gamma", "theta0": [2.0, 1.0], "n_grid": [8, 16], "s_grid": [0.3], "y_scaled": [0.5]}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out.csv"
    assert cli.main(["experiment", "spa-vs-clt", "--config", str(path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "mode,point,n,y,ratio_spa,ratio_clt"
    assert len(lines) == 5
    assert (tmp_path / "out.csv.json").exists()
