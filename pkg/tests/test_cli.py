import subprocess
import sys

import numpy as np
import pytest

import cavistab.errors as err
from cavistab.cli import (
    ERROR_EXIT,
    EXIT_CODES,
    RunConfig,
    emit_config,
    exit_code_for,
    main,
    parse_config,
    run,
)


def write_cfg(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


MINIMAL_CUBE = """
[run]
command = "cube-bench"

[solver]
m = 1
order = 1

[cube]
n_mesh = 3
"""


class TestParseConfig:
    def test_minimal_defaults_filled(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_CUBE))
        assert cfg.command == "cube-bench"
        assert cfg.get("solver", "tau") == 1.0
        assert cfg.get("solver", "order") == 1
        assert cfg.get("cube", "n_mesh") == 3

    def test_negative_tau_names_field(self, tmp_path):
        p = write_cfg(tmp_path, MINIMAL_CUBE + "\ntau = -1.0\n")
        # tau under [cube] is an unknown key; put it in solver properly
        p = write_cfg(tmp_path, """
[run]
command = "cube-bench"
[solver]
tau = -1.0
""")
        with pytest.raises(err.ConfigError, match="solver.tau"):
            parse_config(p)

    def test_parse_error_reports_line(self, tmp_path):
        p = write_cfg(tmp_path, "[run\ncommand = 3")
        with pytest.raises(err.ConfigError, match="line"):
            parse_config(p)

    def test_unknown_command(self, tmp_path):
        p = write_cfg(tmp_path, '[run]\ncommand = "fly"\n')
        with pytest.raises(err.ConfigError, match="run.command"):
            parse_config(p)

    def test_round_trip(self, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, MINIMAL_CUBE))
        text = emit_config(cfg)
        p2 = write_cfg(tmp_path, text, name="canon.toml")
        cfg2 = parse_config(p2)
        assert cfg2.sections == cfg.sections


class TestExitCodes:
    def test_mapping_total_over_error_classes(self):
        def all_subclasses(cls):
            out = set(cls.__subclasses__())
            for c in list(out):
                out |= all_subclasses(c)
            return out

        for cls in all_subclasses(err.CavistabError) | {err.CavistabError}:
            code = exit_code_for(cls("boom"))
            assert code in EXIT_CODES.values()

    def test_io_errors(self):
        assert exit_code_for(FileNotFoundError("x")) == 5

    def test_specific_codes(self):
        assert exit_code_for(err.ConfigError("x")) == 2
        assert exit_code_for(err.InvertedElementError("x")) == 3
        assert exit_code_for(err.NoConvergenceError("x")) == 4

    def test_unknown_command_exit_2(self, tmp_path):
        p = write_cfg(tmp_path, '[run]\ncommand = "fly"\n')
        assert main(["--config", str(p)]) == 2

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.toml")]) == 2


class TestRuns:
    def test_cube_bench_writes_spectrum(self, tmp_path):
        p = write_cfg(tmp_path, MINIMAL_CUBE)
        code = main(["--config", str(p), "--out", str(tmp_path / "out")])
        assert code == 0
        body = (tmp_path / "out" / "spectrum.csv").read_text().splitlines()
        assert body[0].startswith("# cavistab csv v1 schema=cube-bench-clusters")
        assert len(body) == 2 + 1  # header comment + columns + 1 cluster

    def test_mazya_run(self, tmp_path):
        p = write_cfg(tmp_path, """
[run]
command = "mazya"
[mazya]
profile = "constant"
rho_list = [0.1]
""")
        assert main(["--config", str(p), "--out", str(tmp_path / "o")]) == 0
        lines = (tmp_path / "o" / "mazya.csv").read_text().splitlines()
        assert lines[1] == "profile,rho,d32_term,grad_sup,delta,dini_value_or_flag"

    def test_determinism_byte_identical(self, tmp_path):
        p = write_cfg(tmp_path, MINIMAL_CUBE)
        outs = []
        for d in ("a", "b"):
            main(["--config", str(p), "--out", str(tmp_path / d)])
            outs.append((tmp_path / d / "spectrum.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_mesh_run_writes_mesh(self, tmp_path):
        p = write_cfg(tmp_path, """
[run]
command = "mesh"
[mesh]
n = [6, 6, 4]
eps = 0.2
""")
        assert main(["--config", str(p), "--out", str(tmp_path / "m")]) == 0
        head = (tmp_path / "m" / "mesh.txt").read_text().splitlines()[0]
        assert head == "cavmesh 1"

    def test_check_atlas_run(self, tmp_path):
        p = write_cfg(tmp_path, """
[run]
command = "check-atlas"
[atlas_check]
grid_n = 48
eps = 0.1
[sweep]
eps_list = [0.2, 0.1]
""")
        assert main(["--config", str(p), "--out", str(tmp_path / "c")]) == 0
        files = {f.name for f in (tmp_path / "c").iterdir()}
        assert {"conditions.csv", "summary.txt", "config.toml",
                "run.log"} <= files

    def test_console_entry_point(self, tmp_path):
        p = write_cfg(tmp_path, MINIMAL_CUBE)
        proc = subprocess.run(
            [sys.executable, "-m", "cavistab.cli", "--config", str(p),
             "--out", str(tmp_path / "sp")],
            capture_output=True, text=True)
        assert proc.returncode == 0
