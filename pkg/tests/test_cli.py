import json
import os

import numpy as np
import pandas as pd
import pytest

from helpers import DATA, bernoulli_slope, epilepsy, epilepsy_config, poisson_ri
from svi_glmm.cli import (
    EXIT_DATA,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_USAGE,
    ModelConfig,
    UsageError,
    build_run_output,
    export_csv,
    export_trace,
    fit_from_output,
    ingest_csv,
    load_run_output,
    main,
    random_effect_means,
    run_fit,
    simulate_from_fit,
    thread_limit,
)
from svi_glmm.data_model import DataError, validate_dataset
from svi_glmm.ncvmp import FitConfig, fit_ncvmp


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


TOY = "id,y,x\na,1,0.5\na,0,1.5\nb,2,-1\n"


def toy_config(**kw):
    return ModelConfig(**{"response": "y", "cluster": "id", "fixed": ["x"], **kw})


# ---------------------------------------------------------------- ingestion


def test_ingest_toy_file(tmp_path):
    ds = ingest_csv(write(tmp_path, "toy.csv", TOY), toy_config())
    assert ds.n == 2 and [c.n_obs for c in ds.clusters] == [2, 1]
    assert ds.ids == ["a", "b"]
    np.testing.assert_array_equal(ds.clusters[0].X, [[1, 0.5], [1, 1.5]])
    assert ds.x_names == ["(Intercept)", "x"] and ds.z_columns == (0,)


def test_clusters_follow_first_appearance(tmp_path):
    ds = ingest_csv(write(tmp_path, "t.csv", "id,y,x\nz,1,0\na,0,1\nz,2,3\n"), toy_config())
    assert ds.ids == ["z", "a"] and ds.clusters[0].y.tolist() == [1, 2]


def test_offset_for_bernoulli_is_rejected():
    with pytest.raises(UsageError, match="offset"):
        toy_config(offset="E", family="bernoulli")


def test_random_terms_must_be_fixed():
    with pytest.raises(UsageError, match="must also appear"):
        toy_config(random=["w"])


@pytest.mark.parametrize("text, msg", [
    ("id,y\na,1\n", "not found"),
    ("id,y,x\na,1,oops\n", "non-numeric"),
    ("id,y,x\na,1,\n", "non-numeric"),
    ("id,y,x\n", "no rows"),
])
def test_ingest_errors(tmp_path, text, msg):
    with pytest.raises(DataError, match=msg):
        ingest_csv(write(tmp_path, "bad.csv", text), toy_config())


def test_standardize_and_center(tmp_path):
    ds = ingest_csv(write(tmp_path, "t.csv", "id,y,x\na,1,1\na,0,2\nb,2,6\n"), toy_config(standardize=["x"]))
    x = np.concatenate([c.X[:, 1] for c in ds.clusters])
    assert x.mean() == pytest.approx(0, abs=1e-15) and x.std() == pytest.approx(1)
    ds = ingest_csv(write(tmp_path, "t.csv", "id,y,x\na,1,1\na,0,2\nb,2,6\n"), toy_config(center=["x"]))
    np.testing.assert_allclose(np.concatenate([c.X[:, 1] for c in ds.clusters]), [-2, -1, 3])


def test_epilepsy_patient_one_design():
    ds = epilepsy(2)
    assert ds.n == 59 and ds.n_obs == 236
    assert ds.x_names == ["(Intercept)", "Base", "Trt", "Base:Trt", "Age", "Visit"]
    raw = pd.read_csv(DATA / "epil.csv")
    age_center = np.log(raw["age"]).mean()
    base = np.log(11 / 4)
    age = np.log(31) - age_center
    visit = np.array([-0.3, -0.1, 0.1, 0.3])
    X = np.column_stack([np.ones(4), np.full(4, base), np.zeros(4), np.zeros(4), np.full(4, age), visit])
    p1 = ds.clusters[0]
    np.testing.assert_allclose(p1.X, X, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(p1.Z, X[:, [0, 5]], rtol=1e-14, atol=1e-15)
    np.testing.assert_array_equal(p1.y, [5, 3, 3, 3])
    # progabide patients get the interaction
    treated = next(c for c in ds.clusters if c.X[0, 2] == 1.0)
    assert treated.X[0, 3] == treated.X[0, 1]
    assert epilepsy(1).r == 1


@pytest.mark.parametrize("maker, family", [(poisson_ri, "poisson"), (bernoulli_slope, "bernoulli")])
def test_export_ingest_round_trip(tmp_path, maker, family):
    ds = validate_dataset(maker(n=7, seed=3, **({"offset": True} if family == "poisson" else {})), family)
    cfg = export_csv(ds, tmp_path / "d.csv", family)
    back = ingest_csv(tmp_path / "d.csv", cfg)
    assert back.ids == ds.ids and back.x_names == ds.x_names and back.z_columns == ds.z_columns
    for a, b in zip(ds.clusters, back.clusters):
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Z, b.Z)
        if a.offset is not None:
            np.testing.assert_array_equal(a.offset, b.offset)


def test_epilepsy_round_trip(tmp_path):
    ds = epilepsy(2)
    back = ingest_csv(tmp_path / "e.csv", export_csv(ds, tmp_path / "e.csv"))
    for a, b in zip(ds.clusters, back.clusters):
        np.testing.assert_array_equal(a.X, b.X)


# ---------------------------------------------------------------- run output


def test_run_output_contents():
    cfg = epilepsy_config(1)
    fit, doc = run_fit(cfg, epilepsy(1))
    assert doc["converged"] and doc["lower_bound"] == fit.lower_bound
    names = [b["name"] for b in doc["summary"]["beta"]]
    assert names == ["(Intercept)", "Base", "Trt", "Base:Trt", "Age", "Visit"]
    sd = [b["sd"] for b in doc["summary"]["beta"]]
    np.testing.assert_allclose(sd, np.sqrt(np.diag(fit.global_state.Sigma_beta_q)))
    np.testing.assert_allclose(doc["summary"]["D_mean"], fit.global_state.D_mean)
    assert len(doc["summary"]["random_effects"]) == 59
    assert doc["metadata"]["fit"]["parametrization"] == "partial"
    assert all("wall_time" not in t for t in doc["trace"])


def test_reloaded_fit_reproduces_state(tmp_path):
    cfg = epilepsy_config(2)
    ds = epilepsy(2)
    fit, doc = run_fit(cfg, ds)
    path = tmp_path / "fit.json"
    from svi_glmm.cli import dump_json

    dump_json(doc, path)
    again = fit_from_output(load_run_output(path), ds, cfg.family)
    np.testing.assert_array_equal(again.global_state.mu_beta, fit.global_state.mu_beta)
    np.testing.assert_array_equal(again.problem.W_tilde, fit.problem.W_tilde)
    np.testing.assert_array_equal(random_effect_means(again), random_effect_means(fit))
    assert again.lower_bound == fit.lower_bound


def test_run_output_is_deterministic():
    cfg = epilepsy_config(1)
    _, a = run_fit(cfg, epilepsy(1))
    _, b = run_fit(cfg, epilepsy(1))
    a.pop("timing")
    b.pop("timing")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_stochastic_run_records_switch():
    ds = simulate_from_fit(fit_ncvmp(bernoulli_slope(n=50, seed=1), "bernoulli", FitConfig()), 20, seed=3)
    cfg = ModelConfig(response="y", cluster="id", family="bernoulli")
    fit, doc = run_fit(cfg, ds, FitConfig(stochastic=True, batch_size=20))
    assert doc["switched_at"] is not None and 1 <= doc["switched_at"] <= 10
    assert fit.converged


# ---------------------------------------------------------------- simulation


def test_simulate_single_replicate_keeps_designs():
    fit = fit_ncvmp(poisson_ri(n=8, offset=True, seed=2), "poisson", FitConfig())
    sim = simulate_from_fit(fit, 1, seed=4)
    assert sim.n == 8 and sim.ids == fit.problem.dataset.ids
    for a, b in zip(fit.problem.dataset.clusters, sim.clusters):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.offset, b.offset)
    again = simulate_from_fit(fit, 1, seed=4)
    assert all(np.array_equal(a.y, b.y) for a, b in zip(sim.clusters, again.clusters))
    other = simulate_from_fit(fit, 1, seed=5)
    assert not all(np.array_equal(a.y, b.y) for a, b in zip(sim.clusters, other.clusters))


def test_simulate_replication_count():
    fit = fit_ncvmp(bernoulli_slope(n=25, seed=2), "bernoulli", FitConfig())
    sim = simulate_from_fit(fit, 20, seed=1)
    assert sim.n == 500 and sim.ids[:2] == [(1, 0), (1, 1)]


def test_simulated_response_moments():
    fit = fit_ncvmp(poisson_ri(n=3, k=4, seed=2, sd=0.4), "poisson", FitConfig())
    m = 20000
    sim = simulate_from_fit(fit, m, seed=9)
    g = fit.global_state
    D = g.D_mean[0, 0]
    for i, c in enumerate(fit.problem.dataset.clusters):
        Y = np.array([sim.clusters[i * m + k].y for k in range(m)])
        # marginally y_ij = Poisson(exp(x^T beta + u)), u ~ N(0, D)
        mean = np.exp(c.X @ g.mu_beta + D / 2)
        var = mean + mean**2 * (np.exp(D) - 1)
        np.testing.assert_array_less(np.abs(Y.mean(0) - mean), 4 * np.sqrt(var / m))
        # and the within-cluster covariance comes from the shared u
        cov = np.exp(c.X[0] @ g.mu_beta + c.X[1] @ g.mu_beta + D) * (np.exp(D) - 1)
        emp = np.cov(Y[:, 0], Y[:, 1])[0, 1]
        assert abs(emp - cov) < 5 * np.sqrt(var[0] * var[1] / m)


def test_simulate_rejects_bad_requests():
    fit = fit_ncvmp(poisson_ri(n=3), "poisson", FitConfig())
    with pytest.raises(ValueError):
        simulate_from_fit(fit, 0, seed=1)


# ---------------------------------------------------------------- trace


@pytest.mark.filterwarnings("ignore::svi_glmm.ConvergenceWarning")
def test_trace_export(tmp_path):
    ds = poisson_ri(n=60, seed=3)
    cfg = ModelConfig(response="y", cluster="id", fixed=["x1"], family="poisson")
    fit = fit_ncvmp(ds, "poisson", FitConfig(max_cycles=5, stop_tol=1e-300))
    doc = build_run_output(fit, cfg, FitConfig())
    df = export_trace(doc, tmp_path / "t.csv", parameters=["x1"] if "x1" in fit.problem.dataset.x_names else None)
    back = pd.read_csv(tmp_path / "t.csv")
    assert len(back) == 5
    for col in ("index", "lower_bound", "step_size", "wall_time"):
        assert pd.api.types.is_numeric_dtype(back[col])
    assert df.shape[0] == 5
    with pytest.raises(UsageError):
        export_trace(doc, tmp_path / "t.csv", parameters=["nope"])


# ---------------------------------------------------------------- command line


@pytest.fixture
def epi_files(tmp_path):
    cfg = tmp_path / "model.json"
    cfg.write_text((DATA / "epilepsy_model2.json").read_text())
    return DATA / "epil.csv", cfg


def test_cli_fit_diagnose_simulate_trace(tmp_path, epi_files, capsys):
    data, cfg = epi_files
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", str(data), "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["converged"]
    assert main(["diagnose", "--data", str(data), "--config", str(cfg), "--fit", str(out),
                 "--out", str(tmp_path / "rep")]) == EXIT_OK
    rep = pd.read_csv(tmp_path / "rep.csv")
    assert len(rep) == 59 and rep["p"].is_monotonic_increasing
    assert main(["simulate", "--data", str(data), "--config", str(cfg), "--fit", str(out),
                 "--replicates", "2", "--seed", "3", "--out", str(tmp_path / "sim.csv")]) == EXIT_OK
    assert len(pd.read_csv(tmp_path / "sim.csv")) == 2 * 236
    assert main(["trace", "--fit", str(out), "--out", str(tmp_path / "trace.csv")]) == EXIT_OK
    trace = pd.read_csv(tmp_path / "trace.csv")
    assert len(trace) == len(doc["trace"])
    assert (np.diff(trace["lower_bound"]) >= -1e-9).all()
    assert "lower bound" in capsys.readouterr().out


def test_cli_runs_are_byte_identical(tmp_path, epi_files):
    data, cfg = epi_files
    texts = []
    for k in range(2):
        out = tmp_path / f"f{k}.json"
        main(["fit", "--data", str(data), "--config", str(cfg), "--out", str(out), "--seed", "4"])
        doc = json.loads(out.read_text())
        doc.pop("timing")
        texts.append(json.dumps(doc, sort_keys=True))
    assert texts[0] == texts[1]


def test_cli_flags_override_config(tmp_path, epi_files):
    data, cfg = epi_files
    out = tmp_path / "f.json"
    main(["fit", "--data", str(data), "--config", str(cfg), "--out", str(out), "--parametrization", "centered",
          "--quadrature-order", "30"])
    fitcfg = json.loads(out.read_text())["metadata"]["fit"]
    assert fitcfg["parametrization"] == "centered" and fitcfg["quadrature_order"] == 30


def test_cli_not_converged_exit(tmp_path, epi_files):
    data, cfg = epi_files
    doc = json.loads(cfg.read_text())
    doc["fit"]["max_cycles"] = 2
    cfg.write_text(json.dumps(doc))
    assert main(["fit", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "f.json")]) \
        == EXIT_NOT_CONVERGED


def test_cli_usage_errors(tmp_path, epi_files, capsys):
    data, cfg = epi_files
    with pytest.raises(SystemExit) as e:
        main(["fit", "--data", str(data)])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == EXIT_USAGE
    assert main(["fit", "--data", str(data), "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o.json")]) == EXIT_USAGE
    bad = write(tmp_path, "bad.json", json.dumps({"response": "y", "cluster": "subject", "colour": 1}))
    assert main(["fit", "--data", str(data), "--config", str(bad), "--out", str(tmp_path / "o.json")]) == EXIT_USAGE
    assert main(["fit", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o.json"),
                 "--step-alpha", "0.3"]) == EXIT_USAGE
    assert main(["trace", "--fit", str(tmp_path / "nothing.json"), "--out", str(tmp_path / "t.csv")]) == EXIT_USAGE


def test_cli_data_errors(tmp_path):
    cfg = write(tmp_path, "m.json", json.dumps({"response": "y", "cluster": "id", "fixed": ["x"],
                                                 "family": "bernoulli"}))
    data = write(tmp_path, "d.csv", "id,y,x\na,2,1\na,0,2\n")
    assert main(["fit", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o.json")]) == EXIT_DATA
    assert main(["fit", "--data", str(tmp_path / "none.csv"), "--config", str(cfg),
                 "--out", str(tmp_path / "o.json")]) == EXIT_DATA


def test_thread_limit_environment(monkeypatch):
    monkeypatch.setenv("SVI_GLMM_THREADS", "1")
    with thread_limit():
        pass
    monkeypatch.setenv("SVI_GLMM_THREADS", "zero")
    with pytest.raises(UsageError):
        with thread_limit():
            pass
    monkeypatch.delenv("SVI_GLMM_THREADS")
    assert "SVI_GLMM_THREADS" not in os.environ
