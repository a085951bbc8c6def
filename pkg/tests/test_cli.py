import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ddnnv.cli import main
from ddnnv.examples import load_example
from ddnnv.reach import verify_safety
from ddnnv.sdp import import_sdpa
from ddnnv.sectors import SectorData


def read(path):
    with open(path) as fh:
        return fh.read()


def test_stability_example_exit_zero(tmp_path):
    out = tmp_path / "o"
    assert main(["--mode", "stability", "--example", "contraction", "--out", str(out)]) == 0
    v = json.loads(read(out / "verdict.json"))
    assert v["verdict"] == "certified" and v["exit_code"] == 0
    cert = json.loads(read(out / "certificate.json"))
    assert np.linalg.eigvalsh(np.array(cert["Q1"]))[0] > 0
    for f in ("report.txt", "metadata.json", "roa.csv", "roa.svg"):
        assert (out / f).exists()


def test_not_certified_exit_two(tmp_path):
    ex = load_example("safety2d")
    ex.write(tmp_path / "in")
    out = tmp_path / "o"
    code = main(["--mode", "invariance", "--nn", str(tmp_path / "in/nn.json"), "--data", str(tmp_path / "in/data.csv"),
                 "--sets", str(tmp_path / "in/sets.json"), "--out", str(out)])
    assert code == 2
    assert json.loads(read(out / "verdict.json"))["verdict"] == "not-certified"


def test_check_data_rank_failure(tmp_path):
    assert main(["--mode", "collect", "--example", "vehicle", "--samples", "4", "--out", str(tmp_path / "c")]) == 0
    out = tmp_path / "o"
    code = main(["--mode", "check-data", "--data", str(tmp_path / "c/data.csv"), "--out", str(out)])
    assert code == 2
    report = read(out / "report.txt")
    assert "rank([U0;X0]) = 4 < 5" in report and "collect at least 5" in report


def test_stability_on_rank_deficient_data_is_an_error(tmp_path):
    main(["--mode", "collect", "--example", "vehicle", "--samples", "4", "--out", str(tmp_path / "c")])
    code = main(["--mode", "stability", "--example", "vehicle", "--data", str(tmp_path / "c/data.csv"),
                 "--out", str(tmp_path / "o")])
    v = json.loads(read(tmp_path / "o/verdict.json"))
    assert code == 1 and v["error"] == "ExcitationError" and "excitation" in v


def test_collect_from_plant(tmp_path):
    (tmp_path / "plant.json").write_text(json.dumps({"A": [[0.5, 0], [0, 0.5]], "B": [[0], [1]]}))
    out = tmp_path / "o"
    assert main(["--mode", "collect", "--plant", str(tmp_path / "plant.json"), "--samples", "6", "--out", str(out)]) == 0
    assert main(["--mode", "check-data", "--data", str(out / "data.csv"), "--out", str(tmp_path / "c")]) == 0


@pytest.mark.parametrize("argv", [
    ["--mode", "stability"],
    ["--mode", "bogus"],
    ["--mode", "safety", "--example", "contraction", "--mult-degree", "3"],
    ["--mode", "stability", "--nn", "/nonexistent/nn.json", "--example", "contraction"],
])
def test_usage_errors_exit_one(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path / "o")]) == 1


def test_dimension_mismatch_is_usage_error(tmp_path):
    load_example("vehicle").write(tmp_path / "v")
    code = main(["--mode", "stability", "--example", "contraction", "--data", str(tmp_path / "v/data.csv"),
                 "--out", str(tmp_path / "o")])
    assert code == 1


def test_safety_matches_library(tmp_path):
    ex = load_example("safety2d")
    out = tmp_path / "o"
    assert main(["--mode", "safety", "--example", "safety2d", "--horizon", "3", "--out", str(out)]) == 0
    lib = verify_safety(ex.net, SectorData.for_network(ex.net), ex.data, ex.input_set, ex.safe_set, 3)
    v = json.loads(read(out / "verdict.json"))
    assert v["verdict"] == "safe" and v["safe_until"] == 3
    assert np.array_equal(np.array(v["gamma"]), np.array(lib.gammas))
    worst = [max(g) for g in v["gamma"]]
    assert worst == sorted(worst)
    for f in ("gamma.csv", "gamma.svg", "reach_slices.csv", "certificate.json"):
        assert (out / f).exists()


def test_invariance_composition_reported(tmp_path):
    out = tmp_path / "o"
    assert main(["--mode", "invariance", "--example", "contraction", "--out", str(out)]) == 0
    v = json.loads(read(out / "verdict.json"))
    assert v["verdict"] == "invariant" and v["safety_via_invariance"] == "safe"


def test_export_sdpa(tmp_path):
    out = tmp_path / "o"
    main(["--mode", "stability", "--example", "contraction", "--export-sdpa", "--out", str(out)])
    assert import_sdpa(out / "stability.dat-s").n_vars > 0
    out = tmp_path / "r"
    main(["--mode", "safety", "--example", "contraction", "--horizon", "1", "--export-sdpa", "--out", str(out)])
    files = sorted(f for f in os.listdir(out) if f.endswith(".dat-s"))
    assert files == [f"safety_k1_facet{i}.dat-s" for i in range(4)]


def test_deterministic_outputs(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["--mode", "safety", "--example", "safety2d", "--seed", "0", "--out", str(out)])
        runs.append({f: read(out / f) for f in sorted(os.listdir(out)) if f != "metadata.json"})
    assert runs[0] == runs[1]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ddnnv", "--mode", "check-data", "--example", "contraction",
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0 and "pass" in res.stdout
