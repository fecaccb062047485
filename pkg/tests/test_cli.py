import json
import subprocess
import sys

import pytest

from dprisk.cli import build_parser, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_oracle_pricing(capsys):
    code, out, _ = run(capsys, "oracle", "--fixture", "pricing")
    assert code == 0
    d = json.loads(out)
    assert d["theta_ST"] == [4.0] and d["theta_OP"] == [2.0]


def test_oracle_cosine(capsys):
    code, out, _ = run(capsys, "oracle", "--fixture", "cosine")
    assert code == 0 and json.loads(out)["theta_OP"][0] == pytest.approx(3.426, abs=5e-4)


def test_oracle_existence_violation_exits_2(capsys):
    code, _, err = run(capsys, "oracle", "--fixture", "mixture", "--b1", "3", "--b2", "3")
    assert code == 2 and "gamma*b1 + (1-gamma)*b2 <= 2*(gamma*a1 + (1-gamma)*a2)" in err


def test_flag_for_another_fixture_exits_2(capsys):
    code, _, err = run(capsys, "oracle", "--fixture", "pricing", "--gamma", "0.3")
    assert code == 2 and "--gamma" in err


def test_unknown_fixture_exits_2(capsys):
    assert run(capsys, "oracle", "--fixture", "moons")[0] == 2


def test_validate_grad_pricing_exits_0(capsys):
    code, out, _ = run(capsys, "validate-grad", "--fixture", "pricing", "--cov-scale", "0")
    assert code == 0 and json.loads(out)["passed"]


def reinforce_pair(out):
    return next(p for p in json.loads(out)["pairs"] if p["estimator_pair"].startswith("reinforce"))


def test_validate_grad_small_n_fails_sometimes_and_error_shrinks_with_n(capsys):
    codes, errs = [], []
    for s in range(100):
        code, out, _ = run(capsys, "validate-grad", "--fixture", "mixture", "--n", "10", "--seed", str(s))
        codes.append(code)
        errs.append(reinforce_pair(out)["max_rel_err"])
    assert set(codes) == {0, 1}
    code, out, _ = run(capsys, "validate-grad", "--fixture", "mixture", "--n", "10000")
    assert code == 0
    assert reinforce_pair(out)["max_rel_err"] < sorted(errs)[50] / 10


def test_validate_grad_mlp_analytic_only_exits_2(capsys):
    code, _, err = run(
        capsys, "validate-grad", "--fixture", "strategic", "--model", "mlp2", "--pool-n", "100", "--analytic-only"
    )
    assert code == 2 and "finite" in err


def test_landscape_writes_files_only_in_out(capsys, tmp_path):
    out = tmp_path / "land"
    code, stdout, _ = run(
        capsys, "landscape", "--fixture", "mixture", "--sigma1", "0", "--sigma2", "0", "--resolution", "21",
        "--out", str(out),
    )
    assert code == 0
    assert sorted(p.name for p in tmp_path.rglob("*") if p.is_file()) == ["landscape.csv", "landscape.json"]
    summary = json.loads(stdout)
    assert summary["diagonal_argmin"]["theta"] == pytest.approx(-0.5)
    assert summary["grid_min"] <= summary["diagonal_argmin"]["pr"]


def test_landscape_slice(capsys, tmp_path):
    code, stdout, _ = run(
        capsys, "landscape", "--fixture", "pricing", "--dim", "3", "--mode", "slice", "--center", "2",
        "--resolution", "5", "--n", "20", "--out", str(tmp_path),
    )
    assert code == 0 and "alpha" in json.loads(stdout)["diagonal_argmin"]


def test_run_and_partial_exit(capsys, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"fixture": {"id": "mixture"}, "algorithm": {"id": "rgd", "stop": {"max_steps": 3}}, "n_runs": 2}))
    code, out, _ = run(capsys, "run", "--config", str(conf), "--out", str(tmp_path / "o"))
    assert code == 0 and json.loads(out)["n_runs"] == 2
    conf.write_text(json.dumps({"fixture": {"id": "pricing"}, "algorithm": {"id": "perfgd", "optimizer": {"learning_rate": 1e300}}, "n_runs": 1}))
    with pytest.warns(RuntimeWarning):
        code, _, _ = run(capsys, "run", "--config", str(conf), "--out", str(tmp_path / "p"))
    assert code == 1


def test_bad_config_exits_2(capsys, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"fixture": {"id": "mixture"}, "algorithm": {"id": "nope"}}))
    code, _, err = run(capsys, "run", "--config", str(conf))
    assert code == 2 and "algorithm.id" in err


def test_list_fixtures(capsys):
    code, out, _ = run(capsys, "list-fixtures")
    ids = [json.loads(line)["id"] for line in out.splitlines()]
    assert code == 0 and ids == ["mixture", "cosine", "nonlinear", "pricing", "quadratic_pricing", "strategic"]


def test_every_subcommand_help_lists_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = " ".join(p.format_help().split())
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[0] in text
                assert action.help, (name, action.dest)
                if action.default not in (None, False):
                    assert f"(default: {action.default})" in text, (name, action.dest)


def test_module_entry_point_and_byte_identical_output(tmp_path):
    args = [sys.executable, "-m", "dprisk", "landscape", "--fixture", "cosine", "--resolution", "11", "--n", "50"]
    a = subprocess.run(args + ["--out", str(tmp_path / "a")], capture_output=True, text=True, check=True)
    b = subprocess.run(args + ["--out", str(tmp_path / "b")], capture_output=True, text=True, check=True)
    assert a.stdout == b.stdout
    for name in ("landscape.csv", "landscape.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
