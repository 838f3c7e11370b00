import json
from pathlib import Path

import numpy as np
import pytest

from naivetpu.cli import load_config, main
from naivetpu.compiler import NetworkDesc, save_network

NETWORKS = Path(__file__).resolve().parent.parent / "networks"
LENET = str(NETWORKS / "lenet5.net")


def ntpu(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def lenet_artifacts(tmp_path, capsys):
    w = tmp_path / "w.bin"
    d = tmp_path / "d.bin"
    assert ntpu(capsys, "gen-weights", LENET, "-o", w)[0] == 0
    assert ntpu(capsys, "compile", LENET, "--weights", w, "--dram-image", d, "-o", tmp_path / "p.ntpu")[0] == 0
    return w, d


class TestCompile:
    def test_lenet_placement(self, tmp_path, capsys):
        code, out, _ = ntpu(capsys, "compile", LENET, "-o", tmp_path / "l.ntpu")
        assert code == 0
        assert "placement: on-chip" in out.splitlines()
        assert (tmp_path / "l.ntpu").stat().st_size > 0

    def test_vgg_placement(self, tmp_path, capsys):
        code, out, _ = ntpu(capsys, "check-capacity", NETWORKS / "vgg16.net")
        assert code == 0
        assert "placement: dram-streamed" in out.splitlines()
        assert "weights_fit_onchip: no" in out
        assert "total_params: 138357544" in out

    def test_missing_network(self, tmp_path, capsys):
        code, _, err = ntpu(capsys, "compile", tmp_path / "nope.net")
        assert code == 2 and "not found" in err

    def test_bad_network_line(self, tmp_path, capsys):
        p = tmp_path / "bad.net"
        p.write_text("input 1 8 8\nconv out=2 k=3 zz=1\n")
        code, _, err = ntpu(capsys, "compile", p)
        assert code == 2 and "line 2" in err

    def test_capacity_error_exit(self, tmp_path, capsys):
        cfg = tmp_path / "tiny.json"
        cfg.write_text(json.dumps({"base": "naivetpu", "dram_capacity_bits": 1000}))
        code, _, err = ntpu(capsys, "compile", NETWORKS / "vgg16.net", "--config", cfg, "-o", tmp_path / "v.ntpu")
        assert code == 3 and err.startswith("error:")

    def test_unknown_preset(self, capsys):
        code, _, err = ntpu(capsys, "compile", LENET, "--config", "nonesuch")
        assert code == 2

    def test_argparse_error(self, capsys):
        assert ntpu(capsys, "compile")[0] == 2


class TestCheckCapacity:
    def test_lenet_totals(self, capsys):
        code, out, _ = ntpu(capsys, "check-capacity", LENET)
        assert code == 0
        assert "total_params: 61706" in out
        assert "total_weight_bits: 493648" in out
        assert "weights_fit_onchip: yes" in out
        assert "ub_capacity: 16384x32x8b = 4194304 bits" in out

    def test_googletpu_ub(self, capsys):
        _, out, _ = ntpu(capsys, "check-capacity", LENET, "--config", "googletpu")
        assert f"ub_capacity: 98304x256x8b = {96 * 1024 * 256 * 8} bits" in out


class TestDisasm:
    def test_empty_program(self, tmp_path, capsys):
        src = tmp_path / "e.s"
        src.write_text("")
        assert ntpu(capsys, "asm", src, "-o", tmp_path / "e.ntpu")[0] == 0
        code, out, _ = ntpu(capsys, "disasm", tmp_path / "e.ntpu")
        assert code == 0 and out == ""

    def test_corrupt_magic(self, tmp_path, capsys):
        p = tmp_path / "bad.ntpu"
        p.write_bytes(b"XXXXXXXX" + bytes(32))
        code, _, err = ntpu(capsys, "disasm", p)
        assert code == 2 and "magic" in err

    def test_asm_disasm_roundtrip(self, tmp_path, capsys):
        ntpu(capsys, "compile", LENET, "-o", tmp_path / "l.ntpu")
        _, text, _ = ntpu(capsys, "disasm", tmp_path / "l.ntpu")
        (tmp_path / "l.s").write_text(text)
        ntpu(capsys, "asm", tmp_path / "l.s", "-o", tmp_path / "l2.ntpu")
        assert (tmp_path / "l.ntpu").read_bytes() == (tmp_path / "l2.ntpu").read_bytes()


class TestRun:
    def test_seeded_determinism(self, tmp_path, capsys):
        a = ntpu(capsys, "run", LENET, "--seed", 7, "-o", tmp_path / "a.npy")
        b = ntpu(capsys, "run", LENET, "--seed", 7, "-o", tmp_path / "b.npy")
        assert a[0] == b[0] == 0
        assert a[1].replace("a.npy", "") == b[1].replace("b.npy", "")
        assert np.array_equal(np.load(tmp_path / "a.npy"), np.load(tmp_path / "b.npy"))
        assert "total_cycles=" in a[1]

    def test_npy_input(self, tmp_path, capsys):
        x = np.random.default_rng(0).integers(-128, 128, (1, 32, 32)).astype(np.int8)
        np.save(tmp_path / "x.npy", x)
        assert ntpu(capsys, "run", LENET, "--input", tmp_path / "x.npy")[0] == 0
        np.save(tmp_path / "bad.npy", x.astype(np.int16))
        assert ntpu(capsys, "run", LENET, "--input", tmp_path / "bad.npy")[0] == 2

    def test_csv_appends(self, tmp_path, capsys):
        csv = tmp_path / "r.csv"
        ntpu(capsys, "run", LENET, "--csv", csv)
        ntpu(capsys, "run", LENET, "--csv", csv, "--config", "googletpu")
        lines = csv.read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("config,")
        assert lines[1].split(",")[0] == "naivetpu" and lines[2].split(",")[0] == "googletpu"

    def test_sweep_keeps_order(self, tmp_path, capsys):
        names = []
        for bw in (1, 32, 4, 16):
            p = tmp_path / f"bw{bw}.json"
            p.write_text(json.dumps({"base": "naivetpu", "host_bw": bw, "dram_bw": bw}))
            names.append(str(p))
        sweep = tmp_path / "sweep.txt"
        sweep.write_text("# bandwidth sweep\n" + "\n".join(names) + "\n")
        code, out, _ = ntpu(capsys, "run", LENET, "--sweep", sweep, "--jobs", 3)
        assert code == 0
        rows = out.splitlines()[1:]
        assert [r.split(",")[0] for r in rows] == ["bw1", "bw32", "bw4", "bw16"]
        cycles = {r.split(",")[0]: int(r.split(",")[1]) for r in rows}
        assert cycles["bw1"] > cycles["bw4"] > cycles["bw16"] > cycles["bw32"]

    def test_precompiled_program(self, tmp_path, capsys, lenet_artifacts):
        w, d = lenet_artifacts
        a = ntpu(capsys, "run", LENET, "--weights", w)
        b = ntpu(capsys, "run", LENET, "--weights", w, "--program", tmp_path / "p.ntpu", "--dram-image", d)
        assert a == b


class TestVerify:
    def test_lenet_passes(self, capsys, lenet_artifacts):
        w, _ = lenet_artifacts
        code, out, _ = ntpu(capsys, "verify", LENET, "--weights", w, "--count", 3)
        assert code == 0 and out.startswith("PASS lenet5 on naivetpu: 3 input(s)")

    def test_tampered_dram_image_fails(self, tmp_path, capsys, lenet_artifacts):
        w, d = lenet_artifacts
        img = np.fromfile(d, np.int8)
        img[1024] ^= 0x55   # first weight byte of the first conv tile
        bad = tmp_path / "bad.bin"
        img.tofile(bad)
        code, out, _ = ntpu(capsys, "verify", LENET, "--weights", w, "--dram-image", bad)
        assert code == 1
        assert out.startswith("FAIL input 0: first divergence at layer 0 index (0,")
        assert "simulator=" in out and "golden=" in out

    def test_empty_network(self, tmp_path, capsys):
        p = tmp_path / "empty.net"
        save_network(NetworkDesc("empty", (3, 5, 5), ()), p)
        code, out, _ = ntpu(capsys, "verify", p, "--count", 2)
        assert code == 0 and out.startswith("PASS empty")

    def test_random_network(self, tmp_path, capsys):
        net, w = tmp_path / "r.net", tmp_path / "r.bin"
        assert ntpu(capsys, "gen-network", "--seed", 5, "-o", net, "--weights-output", w)[0] == 0
        assert ntpu(capsys, "verify", net, "--weights", w, "--config", "googletpu")[0] == 0


class TestConfig:
    def test_json_overrides(self, tmp_path):
        p = tmp_path / "fast.json"
        p.write_text(json.dumps({"base": "googletpu", "dram_bw": 64}))
        cfg = load_config(str(p))
        assert (cfg.name, cfg.mac_rows, cfg.dram_bw) == ("fast", 256, 64)

    def test_unknown_field(self, tmp_path):
        from naivetpu.cli import UsageError
        p = tmp_path / "x.json"
        p.write_text(json.dumps({"warp": 9}))
        with pytest.raises(UsageError):
            load_config(str(p))
