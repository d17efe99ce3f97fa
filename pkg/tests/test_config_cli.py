import csv
import json

import pytest
import yaml

from fedhm.cli import EXIT_CONFIG, main
from fedhm.config import ConfigError, load_config, parse_config


def write(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def rows(path):
    return list(csv.reader(path.open()))


SMALL = {"case": "HM1-III", "overrides": {"K": 6}}


class TestParse:
    def test_defaults(self):
        cfg = parse_config({"data": {"case": "HM1-I"}, "algorithm": {"id": "hm1"}}, command="fit")
        assert cfg.rounds.count == 30 and cfg.repeats == 1 and cfg.seeds() == [0]
        assert cfg.algorithm.settings.alpha == 0.1

    def test_seeds(self):
        cfg = parse_config({"data": {"case": "HM1-I"}, "repeats": 3, "master_seed": 10})
        assert cfg.seeds() == [10, 11, 12]

    @pytest.mark.parametrize("doc,match", [
        ({"data": {"case": "HM1-I"}, "algoritm": {}}, "unknown key in config: algoritm"),
        ({"data": {"case": "HM9"}}, "data.case"),
        ({"data": {"case": "HM1-I"}, "algorithm": {"id": "hm1", "eta": 0.1}}, "unknown key in algorithm: eta"),
        ({"data": {"case": "HM1-I"}, "algorithm": {"id": "hm1", "alpha": 1.5}}, "alpha=1.5 is above"),
        ({"data": {"case": "HM1-I"}, "algorithm": {"id": "ep", "damping": 0}}, "damping=0 is below"),
        ({"data": {"case": "HM1-I"}, "rounds": {"count": 2.5}}, "must be an integer"),
        ({"data": {"case": "HM1-I", "csv": {"path": "x"}}}, "exactly one"),
        ({"data": {"csv": {"path": "x.csv"}}}, "device_column is required"),
    ])
    def test_rejected(self, doc, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(doc)

    def test_command_requirements(self):
        with pytest.raises(ConfigError, match="needs an algorithm"):
            parse_config({"data": {"case": "HM1-I"}}, command="fit")
        with pytest.raises(ConfigError, match="algorithm.id: ep"):
            parse_config({"data": {"case": "HM1-I"}, "algorithm": {"id": "hm1"}}, command="select")
        with pytest.raises(ConfigError, match="bench.algorithms"):
            parse_config({"data": {"case": "HM1-I"}}, command="bench")

    def test_grid_expansion(self):
        cfg = parse_config({"data": {"case": "HM1-I"},
                            "bench": {"algorithms": [{"id": "ditto", "lambda_ditto": [0.1, 1.0], "eta": [0.01, 0.02]}]}})
        assert len(cfg.bench["ditto"]) == 4

    def test_relative_paths_follow_config(self, tmp_path):
        p = write(tmp_path, {"data": {"csv": {"path": "d.csv", "preset": "student"}}, "output_dir": "o"})
        cfg = load_config(p)
        assert cfg.data.path == tmp_path / "d.csv" and cfg.output_dir == tmp_path / "o"

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("data: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(p)


class TestGen:
    def test_hm1_case_one(self, tmp_path):
        p = write(tmp_path, {"data": {"case": "HM1-I"}, "output_dir": "g"})
        assert main(["gen", "--config", str(p)]) == 0
        assert len(rows(tmp_path / "g/devices/1.csv")) == 21
        assert len(rows(tmp_path / "g/devices/2.csv")) == 201
        man = json.loads((tmp_path / "g/manifest.json").read_text())
        assert man["devices"] == ["1", "2"] and len(man["true_theta"]) == 5

    def test_byte_identical(self, tmp_path):
        p = write(tmp_path, {"data": {"case": "HM2-II"}})
        main(["gen", "--config", str(p), "--out", str(tmp_path / "a")])
        main(["gen", "--config", str(p), "--out", str(tmp_path / "b")])
        files = sorted(f.relative_to(tmp_path / "a") for f in (tmp_path / "a").rglob("*.csv"))
        assert files
        for f in files + ["manifest.json"]:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_uq_case(self, tmp_path):
        p = write(tmp_path, {"data": {"case": "UQ-100"}, "output_dir": "u"})
        assert main(["gen", "--config", str(p)]) == 0
        files = list((tmp_path / "u/devices").glob("*.csv"))
        assert len(files) == 100 and all(len(rows(f)) == 101 for f in files)

    def test_repeats_write_one_directory_per_seed(self, tmp_path):
        p = write(tmp_path, {"data": SMALL, "repeats": 2, "master_seed": 5, "output_dir": "r"})
        assert main(["gen", "--config", str(p)]) == 0
        assert (tmp_path / "r/seed_5/manifest.json").exists() and (tmp_path / "r/seed_6/manifest.json").exists()


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        p = write(tmp_path, {"data": {"case": "HM1-I"}, "algorithm": {"id": "hm1", "stepsize": 1}})
        assert main(["fit", "--config", str(p)]) == EXIT_CONFIG
        assert "stepsize" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG

    def test_missing_csv_data(self, tmp_path):
        p = write(tmp_path, {"data": {"csv": {"path": "absent.csv", "preset": "student"}}})
        assert main(["gen", "--config", str(p)]) == EXIT_CONFIG

    def test_participation_above_k(self, tmp_path):
        p = write(tmp_path, {"data": SMALL, "algorithm": {"id": "hm1"}, "rounds": {"count": 1, "participation": 7}})
        assert main(["fit", "--config", str(p)]) == EXIT_CONFIG


class TestFit:
    def doc(self, **extra):
        return {"data": SMALL, "algorithm": {"id": "hm1", "local_steps": 2},
                "rounds": {"count": 3, "participation": 3}, **extra}

    def test_manifests_reproducible(self, tmp_path):
        p = write(tmp_path, self.doc())
        main(["fit", "--config", str(p), "--out", str(tmp_path / "a")])
        main(["fit", "--config", str(p), "--out", str(tmp_path / "b")])
        a = (tmp_path / "a/manifest.json").read_bytes()
        assert a == (tmp_path / "b/manifest.json").read_bytes()
        assert (tmp_path / "a/runs/run_000/monitor.csv").read_bytes() == \
            (tmp_path / "b/runs/run_000/monitor.csv").read_bytes()

    def test_seed_changes_participants(self, tmp_path):
        p = write(tmp_path, self.doc())
        main(["fit", "--config", str(p), "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["fit", "--config", str(p), "--out", str(tmp_path / "b"), "--seed", "2"])
        part = lambda d: [r["participants"] for r in
                          json.loads((tmp_path / d / "runs/run_000/manifest.json").read_text())["per_round"]]
        assert part("a") != part("b")

    def test_summary_over_repeats(self, tmp_path):
        p = write(tmp_path, self.doc(repeats=2, output_dir="o"))
        assert main(["fit", "--config", str(p)]) == 0
        summary = rows(tmp_path / "o/summary.csv")
        assert [r[0] for r in summary] == ["run", "0", "1", "mean", "sd"]
        mean = (float(summary[1][2]) + float(summary[2][2])) / 2
        assert float(summary[3][2]) == pytest.approx(mean)

    def test_central_ridge(self, tmp_path):
        p = write(tmp_path, {"data": SMALL, "algorithm": {"id": "centralRidge", "lam": 1.0}, "output_dir": "o"})
        assert main(["fit", "--config", str(p)]) == 0
        assert len(rows(tmp_path / "o/metrics.csv")) == 7

    def test_ep_writes_phi(self, tmp_path):
        p = write(tmp_path, {"data": {"case": "UQ-100", "overrides": {"K": 8}}, "output_dir": "o",
                             "algorithm": {"id": "ep", "kind": "uqModel", "mc_draws": 128}, "rounds": {"count": 2}})
        assert main(["fit", "--config", str(p)]) == 0
        phi = rows(tmp_path / "o/phi.csv")
        assert phi[0][:3] == ["run", "seed", "label"] and len(phi) == 9


def bench_doc(data):
    return {"data": data, "repeats": 2, "rounds": {"count": 2}, "output_dir": "o",
            "bench": {"algorithms": [{"id": "hm1", "local_steps": 2}, {"id": "fedAvg", "local_steps": 2},
                                     {"id": "ditto", "local_steps": 2, "lambda_ditto": [0.1, 1.0]},
                                     {"id": "separate", "local_steps": 40}]}}


def test_bench_grid_needs_validation_rows(tmp_path, capsys):
    p = write(tmp_path, bench_doc(SMALL))
    assert main(["bench", "--config", str(p)]) == EXIT_CONFIG
    assert "n_validation" in capsys.readouterr().err


def test_bench_rows_and_summary(tmp_path):
    doc = {"data": {**SMALL, "overrides": {"K": 6, "n_validation": 10}}, "repeats": 2, "rounds": {"count": 2}, "output_dir": "o",
           "bench": {"algorithms": [{"id": "hm1", "local_steps": 2}, {"id": "fedAvg", "local_steps": 2},
                                    {"id": "ditto", "local_steps": 2, "lambda_ditto": [0.1, 1.0]},
                                    {"id": "separate", "local_steps": 40}]}}
    p = write(tmp_path, doc)
    assert main(["bench", "--config", str(p)]) == 0
    table = rows(tmp_path / "o/bench.csv")
    assert table[0] == ["algorithm", "run", "seed", "a_rmse", "sd", "hyper_parameters"]
    body = table[1:]
    assert len(body) == 4 * 3
    summ = [r for r in body if r[1] == "summary"]
    assert [r[0] for r in summ] == ["hm1", "fedAvg", "ditto", "separate"]
    ditto = [r for r in body if r[0] == "ditto" and r[1] != "summary"]
    assert all(json.loads(r[5])["lambda_ditto"] in (0.1, 1.0) for r in ditto)
    assert float(summ[2][3]) == pytest.approx((float(ditto[0][3]) + float(ditto[1][3])) / 2)


SHIPPED = {
    "table1_hm1_case2.yaml": "bench",
    "table2_hm2_case1.yaml": "select",
    "table3_student_lasso.yaml": "select",
    "table4_cmapss_sensor2.yaml": "bench",
    "table4_poly_surrogate.yaml": "bench",
    "fig3_convergence.yaml": "fit",
    "fig4_uq.yaml": "fit",
}


@pytest.mark.parametrize("name,command", sorted(SHIPPED.items()))
def test_shipped_configs_validate(name, command):
    from pathlib import Path

    cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / name, command)
    assert cfg.repeats == 30 and cfg.seeds()[0] == 0
