import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biosim.cli import OUTPUT_DIR_ENV, run_command
from biosim.dataio import InputDataset, Row, SchemaError, parse_config, parse_dataset, parse_text
from biosim.models import ExpDecayParams
from biosim.report import AnalysisReport, emit_plots
from biosim.simlab import simulate_trial

TIMES = [0, 1, 2, 4, 6, 8, 12, 16, 20, 24, 30, 36, 42, 52]


@pytest.fixture
def ra_like(tmp_path):
    """Two arms on a weekly schedule up to one year."""
    rows = ["arm,time,responders,n"]
    for arm, curve, n, seed in (("MTX", ExpDecayParams(0.2, 0.3), 199, 1),
                                ("czp200", ExpDecayParams(0.55, 0.25), 393, 2)):
        s = simulate_trial(curve, n, TIMES, seed)
        rows += [f"{arm},{t},{y},{n}" for t, y in zip(TIMES, s.counts)]
    path = tmp_path / "d.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


def write(tmp_path, text, name="x.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- parsing ---------------------------------------------------------------------------

def test_parse_valid(tmp_path):
    ds = parse_dataset(write(tmp_path, "arm,time,responders,n\nA,0,0,10\nA,2,3,10\nB,1,4,20\n"))
    assert ds.warnings == [] and ds.arms() == ["A", "B"]
    s = ds.series("A")
    assert s.times == (0.0, 2.0) and s.counts == (0, 3) and s.n == 10


def test_parse_sorts_times(tmp_path):
    ds = parse_dataset(write(tmp_path, "arm,time,responders,n\nA,4,5,10\nA,1,2,10\nA,2,3,10\n"))
    assert ds.series("A").times == (1.0, 2.0, 4.0)


@pytest.mark.parametrize(
    "body,line,fragment",
    [
        ("A,1,11,10\n", 2, "responders"),
        ("A,1,5,10\nA,1,6,10\n", 3, "duplicate"),
        ("A,1,5,10\nA,2,6,12\n", 3, "changes n"),
        ("A,-1,5,10\n", 2, "non-negative"),
        ("A,x,5,10\n", 2, "number"),
        ("A,1,2.5,10\n", 2, "integer"),
        ("A,1,5\n", 2, "fields"),
        ("A,1,5,0\n", 2, "positive"),
    ],
)
def test_parse_errors_name_row(tmp_path, body, line, fragment):
    with pytest.raises(SchemaError) as exc:
        parse_dataset(write(tmp_path, "arm,time,responders,n\n" + body))
    assert exc.value.line == line and fragment in str(exc.value)
    assert f"line {line}" in str(exc.value)


def test_parse_bad_header_and_missing_file(tmp_path):
    with pytest.raises(SchemaError):
        parse_dataset(write(tmp_path, "arm,t,y,n\nA,1,1,2\n"))
    with pytest.raises(OSError):
        parse_dataset(tmp_path / "missing.csv")


def test_parse_study_column(tmp_path):
    text = "study_id,arm,time,responders,n\nS1,A,1,2,10\nS1,A,2,3,10\nS2,A,1,4,20\n"
    ds = parse_dataset(write(tmp_path, text))
    assert ds.has_studies and [s.n for s in ds.studies("A")] == [10, 20]
    with pytest.raises(SchemaError):
        ds.series("A")


rows = st.lists(
    st.tuples(
        st.sampled_from(["A", "B", "arm x"]),
        st.floats(0, 100, allow_nan=False).map(lambda v: round(v, 3)),
        st.integers(0, 50),
    ),
    min_size=1,
    max_size=30,
    unique_by=lambda r: (r[0], r[1]),
)


@given(rows, st.booleans())
def test_canonical_csv_roundtrip(data, with_study):
    n = {"A": 50, "B": 60, "arm x": 70}
    ds = InputDataset([Row(a, t, y, n[a], "S1" if with_study else None) for a, t, y in data])
    again = parse_text(ds.to_csv())
    assert again.key() == ds.key()
    assert again.to_csv() == ds.to_csv()


def test_config_parse(tmp_path):
    cfg = parse_config(write(tmp_path, "# study\nn = 100\nks-threshold=0.5  # inline\n\n", "s.cfg"))
    assert cfg == {"n": "100", "ks_threshold": "0.5"}
    with pytest.raises(SchemaError):
        parse_config(write(tmp_path, "just words\n", "b.cfg"))


# --- commands --------------------------------------------------------------------------

def test_metric_command_reports_estimate_se_ci(ra_like, tmp_path):
    out = tmp_path / "m.json"
    code, report = run_command([
        "metric", "--data", str(ra_like), "--arm1", "MTX", "--arm2", "czp200",
        "--model", "bernstein", "--p", "1", "--a", "5", "--b", "25", "--bootstrap", "1000",
        "--out", str(out), "--quiet",
    ])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["status"] == "ok" and doc["config"]["seed"] == 42
    assert doc["results"]["metric"]["value"] > 0
    boot = doc["results"]["bootstrap"]
    assert boot["B"] == 1000 and boot["se"] > 0
    assert boot["ci_lower"] <= boot["median"] <= boot["ci_upper"]


def test_reports_are_reproducible(ra_like, tmp_path):
    argv = ["bootstrap", "--data", str(ra_like), "--arm1", "MTX", "--arm2", "czp200",
            "--bootstrap", "200", "--quiet", "--seed", "7"]
    a = run_command(argv + ["--out", str(tmp_path / "a.json")])[1].to_dict()
    b = run_command(argv + ["--out", str(tmp_path / "b.json")])[1].to_dict()
    a["argv"] = b["argv"] = None
    assert a == b


def test_simulate_with_config(tmp_path):
    cfg = write(tmp_path, "n = 50\nreps = 6\nspacing = 2\nseed = 3\n", "study.cfg")
    out = tmp_path / "s.json"
    code, report = run_command(["simulate", "--config", str(cfg), "--reps", "4",
                                "--out", str(out), "--quiet"])
    assert code == 0
    study = json.loads(out.read_text())["results"]["study"]
    assert study["config"]["reps"] == 4  # flag beats config
    assert study["config"]["n"] == 50 and study["config"]["N"] == 16
    assert set(study["relative_bias"]) == {"TP", "MP", "NP"}
    assert len(study["rb_vectors"]["TP"]) == 4


def test_output_dir_env(ra_like, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "outdir"))
    code, _ = run_command(["fit", "--data", str(ra_like), "--quiet"])
    assert code == 0
    assert (tmp_path / "outdir" / "fit_report.json").exists()


def test_random_effects_command(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["study_id,arm,time,responders,n"]
    for i in range(6):
        la, lb = rng.multivariate_normal([-1, -1.5], [[0.09, 0], [0, 0.12]])
        s = simulate_trial(ExpDecayParams(math.exp(la), math.exp(lb)), 300, [2, 4, 8, 16, 24],
                           rng=rng)
        rows += [f"S{i},drug,{t},{y},300" for t, y in zip(s.times, s.counts)]
    data = write(tmp_path, "\n".join(rows) + "\n")
    code, report = run_command(["random-effects", "--data", str(data), "--times", "4", "52",
                                "--out", str(tmp_path / "r.json"), "--quiet"])
    assert code == 0
    res = report.to_dict()["results"]
    assert set(res["random_effects"]["se"]) == {"mu_a", "mu_b", "sigma_a", "sigma_b", "sigma_ab"}
    assert len(res["population_mean"]["theta"]) == 2


@pytest.mark.parametrize(
    "argv_tail,expected",
    [
        (["fit", "--bogus"], 2),
        (["nonsense"], 2),
        (["fit"], 2),  # missing --data
        (["metric", "--arm1", "MTX", "--arm2", "nope"], 2),
        (["metric", "--arm1", "MTX", "--arm2", "czp200", "--a", "30", "--b", "20"], 2),
        (["metric", "--arm1", "MTX", "--arm2", "czp200", "--bootstrap", "50"], 2),
        (["metric", "--arm1", "MTX", "--arm2", "czp200", "--p", "0.5"], 2),
        (["bootstrap", "--arm1", "MTX", "--arm2", "czp200", "--bootstrap", "0"], 2),
        (["fit", "--model", "cubic"], 2),
    ],
)
def test_exit_code_matrix(ra_like, tmp_path, argv_tail, expected, capsys):
    argv = list(argv_tail)
    if argv and argv[0] in ("fit", "metric", "bootstrap") and "--bogus" not in argv and len(argv) > 1:
        argv += ["--data", str(ra_like)]
    argv += ["--out", str(tmp_path / "r.json"), "--quiet"]
    code, _ = run_command(argv)
    assert code == expected
    if "--bogus" in argv:
        assert "usage:" in capsys.readouterr().err


@pytest.mark.parametrize(
    "body,expected",
    [
        ("arm,time,responders,n\nA,1,11,10\n", 2),
        ("arm,time,responders,n\nA,1,1,10\nA,1,2,10\n", 2),
        ("arm,time,responders\nA,1,1\n", 2),
        ("", 2),
        ("arm,time,responders,n\nA,0,0,10\nA,1,0,10\nA,2,0,10\n", 1),  # no responders
        ("arm,time,responders,n\nA,1,1,10\n", 1),  # too few points to fit
    ],
)
def test_exit_codes_for_data(tmp_path, body, expected):
    data = write(tmp_path, body)
    code, report = run_command(["fit", "--data", str(data), "--out", str(tmp_path / "r.json"),
                                "--quiet"])
    assert code == expected
    assert report.status != "ok" and report.error


def test_missing_data_file(tmp_path):
    code, _ = run_command(["fit", "--data", str(tmp_path / "none.csv"), "--quiet",
                           "--out", str(tmp_path / "r.json")])
    assert code == 2


def test_help_exits_zero(capsys):
    assert run_command(["--help"])[0] == 0


# --- reports and plots -----------------------------------------------------------------

def test_text_rendering_is_subset_of_json(ra_like, tmp_path):
    code, report = run_command(["fit", "--data", str(ra_like), "--quiet",
                                "--out", str(tmp_path / "f.json")])
    machine = report.to_dict()
    for key, value in report.scalar_rows():
        node = machine
        for part in key.split("."):
            node = node[part]
        assert node == value
    text = report.render_text()
    assert "results.fits.MTX.alpha" in text and "results.fits.MTX.se_alpha" in text


def test_non_finite_values_serialize():
    rep = AnalysisReport("x", [], results={"a": math.nan, "b": math.inf})
    doc = json.loads(rep.to_json())
    assert doc["results"] == {"a": "nan", "b": "inf"}


def test_plots_curves_and_histogram(ra_like, tmp_path):
    _, report = run_command(["metric", "--data", str(ra_like), "--arm1", "MTX", "--arm2",
                             "czp200", "--bootstrap", "200", "--quiet",
                             "--out", str(tmp_path / "m.json")])
    files = emit_plots(report, tmp_path / "plots")
    names = sorted(p.name for p in files)
    assert names == ["metric_bootstrap_hist.svg", "metric_curves.svg"]
    hist = (tmp_path / "plots" / "metric_bootstrap_hist.svg").read_text()
    assert hist.startswith("<?xml") and "<svg" in hist


def test_plots_only_curves(ra_like, tmp_path):
    _, report = run_command(["fit", "--data", str(ra_like), "--quiet",
                             "--out", str(tmp_path / "f.json")])
    files = emit_plots(report, tmp_path / "p")
    assert [p.name for p in files] == ["fit_curves.svg"]


def test_plots_empty_report_warns(tmp_path):
    with pytest.warns(RuntimeWarning):
        files = emit_plots(AnalysisReport("noop", []), tmp_path / "empty")
    assert files == [] and not (tmp_path / "empty").exists()


def test_plots_flag_writes_files(ra_like, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        code, report = run_command(["fit", "--data", str(ra_like), "--quiet",
                                    "--plots", str(tmp_path / "pl"),
                                    "--out", str(tmp_path / "f.json")])
    assert code == 0 and report.results["plots"]
