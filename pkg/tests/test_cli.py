import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kamtori import cli
from kamtori import geometry as geo
from kamtori import spectral as sp
from kamtori.errors import ConfigurationError
from kamtori.ktf import MAGIC, decode, encode, read_ktf, write_ktf


def random_torus(shape, n=1, ell=1, seed=0, params=None):
    rng = np.random.default_rng(seed)
    freq = sp.FrequencyVector(rng.uniform(0, 1, n), rng.uniform(0, 1, ell))
    vals = rng.normal(size=(2 * n,) + tuple(shape))
    return geo.TorusEmbedding.from_grid(vals, np.eye(n, dtype=np.int64)[:1], freq,
                                        params or {"eps": 0.004, "psi0": 0.35})


class TestKTF:
    @pytest.mark.parametrize("shape,ell", [((16, 8), 1), ((8, 4, 16), 2)])
    def test_roundtrip_bit_exact(self, tmp_path, shape, ell):
        K = random_torus(shape, ell=ell)
        path = write_ktf(tmp_path / "t.ktf", K)
        K2 = read_ktf(path)
        assert K2.shape == K.shape
        assert K2.coeffs.tobytes() == K.coeffs.tobytes()
        assert K2.degree.tolist() == K.degree.tolist()
        assert K2.freq.omega.tobytes() == K.freq.omega.tobytes()
        assert K2.freq.alpha.tobytes() == K.freq.alpha.tobytes()
        assert K2.params == K.params
        assert encode(K2) == path.read_bytes()

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(4, 4), (8, 2), (4, 2, 2)]))
    def test_roundtrip_property(self, seed, shape):
        K = random_torus(shape, ell=len(shape) - 1, seed=seed, params={"eps1": 0.5 * seed})
        K2 = decode(encode(K))
        assert np.array_equal(K2.coeffs, K.coeffs) and K2.params == K.params

    def test_header_layout(self):
        K = random_torus((16, 8))
        data = encode(K)
        assert data[:4] == MAGIC
        assert np.frombuffer(data[4:20], dtype="<u4").tolist() == [1, 1, 0, 1]
        assert np.frombuffer(data[20:28], dtype="<u4").tolist() == [16, 8]
        checksum = int(np.frombuffer(data[-8:], dtype="<u8")[0])
        assert checksum == int(np.frombuffer(data[4:-8], dtype=np.uint8).sum())

    def test_corruption_detected(self):
        data = bytearray(encode(random_torus((8, 4))))
        data[40] ^= 0xFF
        with pytest.raises(ConfigurationError, match="checksum"):
            decode(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(ConfigurationError):
            decode(b"XXXX" + bytes(40))

    def test_size_mismatch(self):
        data = encode(random_torus((8, 4)))
        payload = data[4:-8] + bytes(16)
        tail = int(np.frombuffer(payload, dtype=np.uint8).sum()).to_bytes(8, "little")
        with pytest.raises(ConfigurationError, match="coefficient bytes"):
            decode(MAGIC + payload + tail)


class TestConfig:
    def test_file_and_flag_override(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("[model]\nname = tokamak\neps = 0.003\n\n[grid]\nntheta = 7\n\n"
                           "[continuation]\npath = eps=0.003; eps=0.0035\n")
        args = cli.build_parser().parse_args(["refine", "x.ktf", "--config", str(cfgfile), "--eps", "0.004"])
        cfg = cli.resolve_config(args)
        assert cfg.params == {"eps": 0.004}
        assert cfg.ntheta == 7
        assert cfg.path == [{"eps": 0.003}, {"eps": 0.0035}]

    def test_unknown_key(self, tmp_path):
        cfgfile = tmp_path / "bad.cfg"
        cfgfile.write_text("[model]\nname = tokamak\nepsilon = 0.1\n")
        with pytest.raises(ConfigurationError, match="unknown key"):
            cli.read_config_file(cfgfile)

    def test_unknown_section_exit_code(self, tmp_path, capsys):
        cfgfile = tmp_path / "bad.cfg"
        cfgfile.write_text("[solver]\ntol = 1\n")
        assert cli.main(["frequency", "--config", str(cfgfile), "--out", str(tmp_path)]) == 2
        assert "unknown configuration section" in capsys.readouterr().err

    def test_parameter_of_other_model(self, tmp_path):
        assert cli.main(["frequency", "--model", "qp-pendulum", "--eps", "0.1", "--out", str(tmp_path)]) == 2

    def test_grid_range(self, tmp_path):
        assert cli.main(["frequency", "--ntheta", "40", "--out", str(tmp_path)]) == 2

    def test_path_syntax(self):
        assert cli.parse_path("eps2=0,eps3=0; eps2=0.32,eps3=0.0155") == [
            {"eps2": 0.0, "eps3": 0.0}, {"eps2": 0.32, "eps3": 0.0155}]
        with pytest.raises(ConfigurationError):
            cli.parse_path("eps2:0")


class TestCommands:
    def test_frequency_rotor(self, tmp_path, capsys):
        code = cli.main(["frequency", "--model", "qp-pendulum", "--seed", "0, 2", "--iterates", "1000",
                         "--out", str(tmp_path)])
        assert code == 0
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["results"]["omega"] == pytest.approx(2.0, abs=1e-12)
        assert meta["status"] == "ok" and "orbit" in meta["stages"]
        assert capsys.readouterr().out.startswith("omega = ")

    def test_frequency_resonant_orbit_flagged(self, tmp_path, capsys):
        from scipy.optimize import brentq
        from kamtori.models import inverse_q
        psi = brentq(lambda p: inverse_q(p) - 0.6, 0.2, 0.4)
        code = cli.main(["frequency", "--eps", "0", "--seed", f"0, {psi!r}", "--iterates", "400",
                         "--out", str(tmp_path)])
        assert code == 0
        assert "resonant" in capsys.readouterr().out

    def test_flat_rotor_pipeline(self, tmp_path):
        out = tmp_path / "init"
        code = cli.main(["init-guess", "--model", "qp-pendulum", "--mode", "flat", "--omega", "2",
                         "--seed", "0, 2", "--ntheta", "4", "--nphi1", "2", "--nphi2", "2", "--out", str(out)])
        assert code == 0
        meta = json.loads((out / "metadata.json").read_text())
        assert meta["results"]["error"] < 1e-14
        ref = tmp_path / "ref"
        code = cli.main(["refine", str(out / "initial.ktf"), "--model", "qp-pendulum", "--out", str(ref)])
        assert code == 0
        meta = json.loads((ref / "metadata.json").read_text())
        assert meta["results"]["iterations"] <= 1
        assert (ref / "refined.ktf").exists() and (ref / "spectrum.csv").exists()

    def test_autonomous_libration_guess(self, tmp_path):
        code = cli.main(["init-guess", "--model", "qp-pendulum", "--eps1", "1", "--seed", "3.141592653589793, 1.4142135623730951",
                         "--ntheta", "6", "--nphi1", "2", "--nphi2", "2", "--out", str(tmp_path)])
        assert code == 0
        K = read_ktf(tmp_path / "initial.ktf")
        assert K.degree.tolist() == [[0]]
        L = geo.tangent_frame(K)
        assert np.linalg.norm(L.reshape(2, -1), axis=0).min() > 1e-3

    def test_resonant_refine_exit(self, tmp_path, capsys):
        out = tmp_path / "init"
        cli.main(["init-guess", "--eps", "0", "--mode", "flat", "--omega", "0.5", "--seed", "0, 0.4",
                  "--ntheta", "4", "--nphi1", "4", "--out", str(out)])
        code = cli.main(["refine", str(out / "initial.ktf"), "--out", str(tmp_path / "r")])
        assert code == 3
        assert "Resonance" in capsys.readouterr().err

    def test_tokamak_small_pipeline(self, tmp_path):
        init = tmp_path / "init"
        assert cli.main(["init-guess", "--eps", "0.0005", "--seed", "0, 0.35", "--iterates", "1000",
                         "--ntheta", "6", "--nphi1", "6", "--points", "256", "--out", str(init)]) == 0
        ref = tmp_path / "ref"
        assert cli.main(["refine", str(init / "initial.ktf"), "--max-ntheta", "8", "--max-nphi", "8",
                         "--out", str(ref)]) == 0
        lines = (ref / "newton.csv").read_text().splitlines()
        assert lines[0].startswith("step,time,memory_mb,norm_L")
        fam = tmp_path / "fam"
        assert cli.main(["continue", str(ref / "refined.ktf"), "--path", "eps=0.0006", "--delta-eps", "5e-5",
                         "--out", str(fam)]) == 0
        meta = json.loads((fam / "metadata.json").read_text())
        assert meta["results"]["status"] == "complete"
        assert meta["results"]["last"]["eps"] == pytest.approx(0.0006)
        assert meta["results"]["last"]["psi0"] == pytest.approx(0.35)
        assert len((fam / "family.csv").read_text().splitlines()) == 4
        assert len(list((fam / "family").glob("torus_*.ktf"))) == 3
        diag = tmp_path / "diag"
        assert cli.main(["diagnose", str(fam / "family" / "torus_0002.ktf"), "--out", str(diag)]) == 0
        res = json.loads((diag / "metadata.json").read_text())["results"]
        assert res["error"] < 1e-12

    def test_zero_length_continuation(self, tmp_path):
        out = tmp_path / "init"
        cli.main(["init-guess", "--model", "qp-pendulum", "--mode", "flat", "--omega", "2", "--seed", "0, 2",
                  "--ntheta", "4", "--nphi1", "2", "--nphi2", "2", "--out", str(out)])
        code = cli.main(["continue", str(out / "initial.ktf"), "--model", "qp-pendulum",
                         "--path", "eps1=0", "--out", str(tmp_path / "c")])
        assert code == 0
        meta = json.loads((tmp_path / "c" / "metadata.json").read_text())
        assert meta["results"]["members"] == 1
