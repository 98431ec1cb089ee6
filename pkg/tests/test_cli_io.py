"""Config validation and end-to-end CLI runs against tmp_path artifacts."""

import filecmp
import json
import os

import numpy as np
import pytest

from adhesim import analysis, cli_io, coupled, measures
from adhesim.errors import (CertificateBreach, MassMismatch, ParseError,
                            ValidationError)


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def pure_doc():
    return {
        "schema": "adhesim-config/1",
        "grid": {"h": 1 / 64, "radius": 1.0, "d": 1},
        "initial": {"kind": "indicator", "radius": 0.2, "height": 0.5},
        "run": {"T": 0.02},
    }


def coupled_doc():
    return {
        "schema": "adhesim-config/1",
        "grid": {"h": 1 / 64, "radius": 0.6, "d": 1},
        "solver": {"epsilon": 0.0, "chi": {"kind": "saturating", "c": 0.5}},
        "kernels": {
            "rho": 0.25,
            "interaction": {"a_plus": 1.0, "a_minus": 1.0,
                            "b_plus": 2.0, "b_minus": 2.0},
            "K_plus": {"kind": "constant", "value": 2.0},
            "K_minus": {"kind": "constant", "value": 1.0},
        },
        "initial": {"kind": "bump", "mass": 0.2, "radius": 0.04},
        "run": {"T": 1e-4, "m_inf": 10.0},
    }


def zkb_doc():
    return {
        "schema": "adhesim-config/1",
        "grid": {"h": 1 / 64, "radius": 1.5, "d": 1},
        "initial": {"kind": "zkb", "t0": 0.1, "mass": 1.0},
        "run": {"T": 0.15},
    }


class TestParseConfig:
    def test_minimal_pure_pm_valid(self, tmp_path):
        cfg = cli_io.parse_config(write_config(tmp_path, pure_doc()))
        assert cfg.w_mode == "fixed"
        assert cfg.doc["run"]["w_value"] == 0.0
        assert cfg.doc["solver"]["cfl_safety"] == 0.4
        assert cfg.doc["solver"]["chi"]["kind"] == "saturating"
        assert "kernels" not in cfg.doc

    def test_coupled_valid_with_defaults(self, tmp_path):
        cfg = cli_io.parse_config(write_config(tmp_path, coupled_doc()))
        assert cfg.w_mode == "coupled"
        assert cfg.doc["run"]["binding_every"] == 1
        assert cfg.doc["kernels"]["s_cap"] == 0.5

    def test_unknown_top_level_key(self, tmp_path):
        doc = pure_doc()
        doc["grdi"] = {}
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "grdi"
        assert "unknown" in exc.value.reason

    def test_unknown_nested_key_dot_path(self, tmp_path):
        doc = coupled_doc()
        doc["kernels"]["K_plus"]["sgima"] = 1.0
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "kernels.K_plus.sgima"

    def test_negative_a_exponent_cites_rule(self, tmp_path):
        doc = coupled_doc()
        doc["kernels"]["interaction"]["a_minus"] = -1.0
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "kernels.interaction.a_minus"
        assert "positive" in exc.value.reason

    def test_large_rho_cites_half_bound(self, tmp_path):
        doc = coupled_doc()
        doc["kernels"]["rho"] = 0.6
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "kernels.rho"
        assert "1/2" in exc.value.reason

    def test_missing_and_wrong_schema(self, tmp_path):
        doc = pure_doc()
        del doc["schema"]
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "schema"
        doc["schema"] = "adhesim-config/99"
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "schema"

    def test_malformed_json_and_missing_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ParseError):
            cli_io.parse_config(str(bad))
        with pytest.raises(ParseError):
            cli_io.parse_config(str(tmp_path / "absent.json"))

    def test_w_value_rejected_in_coupled_mode(self, tmp_path):
        doc = coupled_doc()
        doc["run"]["w_value"] = 0.5
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "run.w_value"

    def test_coupled_mode_needs_kernels_and_m_inf(self, tmp_path):
        doc = pure_doc()
        doc["run"]["w_mode"] = "coupled"
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "kernels"

        doc = coupled_doc()
        del doc["run"]["m_inf"]
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "run.m_inf"

    def test_positive_fixed_w_needs_kernels(self, tmp_path):
        doc = pure_doc()
        doc["run"]["w_value"] = 0.3
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "kernels"

    def test_output_times_must_increase_inside_horizon(self, tmp_path):
        doc = pure_doc()
        doc["run"]["output_times"] = [0.01, 0.005]
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field.startswith("run.output_times")
        doc["run"]["output_times"] = [0.5]
        with pytest.raises(ValidationError):
            cli_io.parse_config(write_config(tmp_path, doc))

    def test_bool_is_not_a_number(self, tmp_path):
        doc = pure_doc()
        doc["solver"] = {"epsilon": True}
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "solver.epsilon"

    def test_domain_must_contain_sensing_ball(self, tmp_path):
        doc = coupled_doc()
        doc["grid"]["radius"] = 0.2
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "grid.radius"

    def test_bump_must_stay_inside_domain(self, tmp_path):
        doc = coupled_doc()
        doc["initial"]["center"] = [0.59]
        with pytest.raises(ValidationError) as exc:
            cli_io.parse_config(write_config(tmp_path, doc))
        assert exc.value.field == "initial.center"

    def test_normalized_doc_revalidates_to_itself(self, tmp_path):
        cfg = cli_io.parse_config(write_config(tmp_path, coupled_doc()))
        again = cli_io.validate_doc(json.loads(json.dumps(cfg.doc)))
        assert again.doc == cfg.doc


class TestBuilders:
    def test_bump_mass_matches_request(self, tmp_path):
        cfg = cli_io.parse_config(write_config(tmp_path, coupled_doc()))
        u0 = cfg.build_u0()
        assert u0.mass() == pytest.approx(0.2, rel=1e-12)

    def test_zkb_initial_matches_oracle(self, tmp_path):
        cfg = cli_io.parse_config(write_config(tmp_path, zkb_doc()))
        u0 = cfg.build_u0()
        C = analysis.zkb_constant_for_mass(1.0, 1)
        exact = analysis.zkb_solution(0.1, u0.grid.cell_centers(), C, 1)
        assert np.abs(u0.values - exact).max() == 0.0

    def test_indicator_height(self, tmp_path):
        cfg = cli_io.parse_config(write_config(tmp_path, pure_doc()))
        u0 = cfg.build_u0()
        assert u0.values.max() == 0.5

    def test_kernel_builders_cover_modulations(self, tmp_path):
        doc = coupled_doc()
        doc["kernels"]["K_plus"] = {"kind": "gaussian_x", "value": 2.0, "sigma": 0.3}
        doc["kernels"]["K_minus"] = {"kind": "affine_t", "value": 1.0, "slope": 0.1}
        doc["kernels"]["profile"] = {"kind": "linear_decay", "value": 1.5}
        cfg = cli_io.parse_config(write_config(tmp_path, doc))
        kern = cfg.build_kernels()
        assert kern.rho == 0.25
        origin = np.zeros((1, 1))
        assert kern.interaction.K_plus(0.0, origin)[0] == pytest.approx(2.0)
        assert kern.interaction.K_minus(2.0, origin)[0] == pytest.approx(1.2)


class TestOverrides:
    def test_override_changes_value(self, tmp_path):
        path = write_config(tmp_path, coupled_doc())
        code = cli_io.run(["certificate", "--config", path, "--quiet",
                           "--out", str(tmp_path / "o"),
                           "--override", "run.binding_tol=1e-9"])
        assert code == 0

    def test_override_bad_format(self, tmp_path, capsys):
        path = write_config(tmp_path, pure_doc())
        code = cli_io.run(["simulate", "--config", path,
                           "--out", str(tmp_path / "o"), "--override", "run.T"])
        assert code == 2
        assert "key=value" in capsys.readouterr().err

    def test_override_unknown_key_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path, pure_doc())
        code = cli_io.run(["simulate", "--config", path,
                           "--out", str(tmp_path / "o"),
                           "--override", "run.bogus=1"])
        assert code == 2
        assert "run.bogus" in capsys.readouterr().err


def read_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        body = np.array([[float(v) for v in line.split(",")]
                         for line in f if line.strip()])
    return header, body


class TestSimulate:
    def test_pure_pm_run(self, tmp_path, capsys):
        path = write_config(tmp_path, pure_doc())
        out = tmp_path / "run"
        assert cli_io.run(["simulate", "--config", path, "--out", str(out)]) == 0
        assert "wrote 2 snapshots" in capsys.readouterr().out
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "fixed_w"
        header, body = read_csv(out / "u_0001.csv")
        assert header == ["x0", "u"]
        h = manifest["config"]["grid"]["h"]
        assert body[:, 1].sum() * h == pytest.approx(0.5 * 0.4 + 0.5 * float(h) / 2,
                                                     rel=0.1)
        assert (out / "diagnostics.json").exists()

    def test_coupled_run_artifacts(self, tmp_path):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        assert cli_io.run(["simulate", "--config", path, "--out", str(out),
                           "--quiet"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["schema"] == "adhesim-run/1"
        assert manifest["monitors"]["kr_ball"]["bound"] > 0
        names = [entry["u"] for entry in manifest["outputs"]]
        assert all((out / n).exists() for n in names)
        assert all((out / entry["w"]).exists() for entry in manifest["outputs"])
        cert = json.loads((out / "certificate.json").read_text())
        assert cert["r2"] > 0

    def test_manifest_config_replays(self, tmp_path):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        cli_io.run(["simulate", "--config", path, "--out", str(out), "--quiet"])
        manifest = json.loads((out / "manifest.json").read_text())
        replay = write_config(tmp_path, manifest["config"], name="replay.json")
        cfg = cli_io.parse_config(replay)
        assert cfg.doc == manifest["config"]

    def test_byte_identical_reruns(self, tmp_path):
        path = write_config(tmp_path, coupled_doc())
        for name in ("a", "b"):
            cli_io.run(["simulate", "--config", path,
                        "--out", str(tmp_path / name), "--quiet"])
        files = sorted(os.listdir(tmp_path / "a"))
        assert files == sorted(os.listdir(tmp_path / "b"))
        for f in files:
            assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f,
                               shallow=False), f

    def test_quiet_suppresses_stdout(self, tmp_path, capsys):
        path = write_config(tmp_path, pure_doc())
        cli_io.run(["simulate", "--config", path, "--out", str(tmp_path / "o"),
                    "--quiet"])
        assert capsys.readouterr().out == ""


class TestPicard:
    def test_picard_run(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        assert cli_io.run(["picard", "--config", path, "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "picard"
        assert manifest["outer_iterations"] >= 2
        assert all(f < 1 for f in manifest["contraction_factors"])
        assert "outer iterations" in capsys.readouterr().out

    def test_nonconvergence_exit_code(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        code = cli_io.run(["picard", "--config", path, "--out", str(tmp_path / "o"),
                           "--override", "run.picard_tol=1e-300",
                           "--override", "run.picard_max_outer=1"])
        assert code == 5
        err = capsys.readouterr().err
        assert "NonConvergence" in err and "coupled.run_global_picard" in err


class TestBindingAndCertificate:
    def test_binding_solve(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        assert cli_io.run(["binding-solve", "--config", path, "--out", str(out)]) == 0
        doc = json.loads((out / "binding.json").read_text())
        assert doc["converged"] is True
        header, body = read_csv(out / "w.csv")
        assert header == ["x0", "w"]
        assert len(body) == doc["n_nodes"]
        assert np.all((body[:, 1] > 0) & (body[:, 1] < 1))
        assert "w(0) = " in capsys.readouterr().out

    def test_certificate(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        assert cli_io.run(["certificate", "--config", path, "--out", str(out)]) == 0
        cert = json.loads((out / "certificate.json").read_text())
        assert 0 < cert["r2"] < cert["r1"] <= 0.5
        assert "r1 = " in capsys.readouterr().out

    def test_missing_kernels_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path, pure_doc())
        code = cli_io.run(["certificate", "--config", path,
                           "--out", str(tmp_path / "o")])
        assert code == 2
        assert "kernels" in capsys.readouterr().err


class TestKr:
    def test_bundled_measures_print_03(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = cli_io.run(["kr", "delta_origin", "delta_shift", "--out", str(out)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "0.3"
        doc = json.loads((out / "kr.json").read_text())
        assert doc["distance"] == 0.3

    def test_kr_on_files(self, tmp_path, capsys):
        a = measures.DiscreteMeasure([[0.1]], [1.0], domain_radius=1.0)
        b = measures.DiscreteMeasure([[-0.1]], [1.0], domain_radius=1.0)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        measures.measure_to_json(a, str(pa))
        measures.measure_to_json(b, str(pb))
        code = cli_io.run(["kr", str(pa), str(pb), "--out", str(tmp_path / "o")])
        assert code == 0
        assert float(capsys.readouterr().out) == pytest.approx(0.2, abs=1e-15)

    def test_mass_mismatch_exit_code(self, tmp_path, capsys):
        a = measures.DiscreteMeasure([[0.0]], [1.0], domain_radius=1.0)
        b = measures.DiscreteMeasure([[0.0]], [2.0], domain_radius=1.0)
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        measures.measure_to_json(a, str(pa))
        measures.measure_to_json(b, str(pb))
        code = cli_io.run(["kr", str(pa), str(pb), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "measures.kr_distance" in capsys.readouterr().err

    def test_unknown_bundle_name(self, tmp_path, capsys):
        code = cli_io.run(["kr", "delta_origin", "no_such_measure",
                           "--out", str(tmp_path / "o")])
        assert code == 2
        assert "no_such_measure" in capsys.readouterr().err


class TestOracle:
    def test_symmetric_point_mass_table_prints_half(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        code = cli_io.run(["oracle", "--case", "point-mass", "--config", path,
                           "--out", str(out),
                           "--override", "kernels.K_plus.value=1.0"])
        assert code == 0
        assert "w_at_origin,0.5" in capsys.readouterr().out

    def test_asymmetric_point_mass_values(self, tmp_path):
        path = write_config(tmp_path, coupled_doc())
        out = tmp_path / "run"
        code = cli_io.run(["oracle", "--case", "point-mass", "--config", path,
                           "--out", str(out), "--quiet",
                           "--override", "kernels.K_plus.value=4.0"])
        assert code == 0
        doc = json.loads((out / "oracle.json").read_text())
        assert doc["w_at_origin"] == pytest.approx(2.0 / 3.0, abs=1e-14)
        header, body = read_csv(out / "oracle.csv")
        assert header == ["x0", "w0"]
        assert np.all(np.diff(body[:, 0]) > 0)

    def test_zkb_oracle(self, tmp_path, capsys):
        path = write_config(tmp_path, zkb_doc())
        out = tmp_path / "run"
        code = cli_io.run(["oracle", "--case", "zkb", "--config", path,
                           "--out", str(out)])
        assert code == 0
        assert "support_radius," in capsys.readouterr().out
        doc = json.loads((out / "oracle.json").read_text())
        C = analysis.zkb_constant_for_mass(1.0, 1)
        assert doc["support_radius"] == pytest.approx(
            analysis.zkb_support_radius(0.25, C, 1))
        header, body = read_csv(out / "oracle.csv")
        h = 1 / 64
        assert body[:, 1].sum() * h == pytest.approx(1.0, rel=1e-2)

    def test_zkb_case_needs_zkb_initial(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        code = cli_io.run(["oracle", "--case", "zkb", "--config", path,
                           "--out", str(tmp_path / "o")])
        assert code == 2
        assert "initial.kind" in capsys.readouterr().err


class TestConvergence:
    def test_errors_shrink_and_order_reported(self, tmp_path, capsys):
        path = write_config(tmp_path, zkb_doc())
        out = tmp_path / "run"
        code = cli_io.run(["convergence", "--config", path, "--levels", "16,32",
                           "--out", str(out)])
        assert code == 0
        assert "fitted L1 order:" in capsys.readouterr().out
        header, body = read_csv(out / "convergence.csv")
        assert header == ["h", "l1_error"]
        assert body[1, 1] < body[0, 1]
        doc = json.loads((out / "convergence.json").read_text())
        assert doc["fitted_order"] > 0.5

    def test_requires_pure_pm_setup(self, tmp_path, capsys):
        doc = zkb_doc()
        doc["solver"] = {"epsilon": 0.01}
        path = write_config(tmp_path, doc)
        code = cli_io.run(["convergence", "--config", path,
                           "--out", str(tmp_path / "o")])
        assert code == 2
        assert "solver.epsilon" in capsys.readouterr().err

    def test_bad_levels(self, tmp_path, capsys):
        path = write_config(tmp_path, zkb_doc())
        code = cli_io.run(["convergence", "--config", path, "--levels", "a,b",
                           "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--levels" in capsys.readouterr().err


class TestErrorSurface:
    def test_admissibility_exit_and_context(self, tmp_path, capsys):
        path = write_config(tmp_path, coupled_doc())
        code = cli_io.run(["simulate", "--config", path,
                           "--out", str(tmp_path / "o"),
                           "--override", "run.m=0.5"])
        assert code == 3
        err = capsys.readouterr().err
        assert "coupled.run_time_marching" in err
        assert "AdmissibilityError" in err

    def test_certificate_breach_maps_to_4_with_timestamp(self, tmp_path, capsys,
                                                         monkeypatch):
        def boom(u0, config):
            raise CertificateBreach("kr radius exceeded", t=0.125, monitor="kr")

        monkeypatch.setattr(coupled, "run_time_marching", boom)
        path = write_config(tmp_path, coupled_doc())
        code = cli_io.run(["simulate", "--config", path,
                           "--out", str(tmp_path / "o")])
        assert code == 4
        err = capsys.readouterr().err
        assert "t=0.125" in err and "CertificateBreach" in err

    def test_thread_cap_recorded(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ADHESIM_THREADS", "2")
        path = write_config(tmp_path, pure_doc())
        out = tmp_path / "run"
        assert cli_io.run(["simulate", "--config", path, "--out", str(out),
                           "--quiet"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["threads"] == 2
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_invalid_thread_cap(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("ADHESIM_THREADS", "zero")
        path = write_config(tmp_path, pure_doc())
        code = cli_io.run(["simulate", "--config", path,
                           "--out", str(tmp_path / "o")])
        assert code == 2
        assert "ADHESIM_THREADS" in capsys.readouterr().err

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit):
            cli_io.run([])
