import numpy as np
import pytest

from isoembed.errors import ConfigurationError
from isoembed.grid import GridField, GridSpec
from isoembed.mesh import parse_triple, read_obj, triangulate, write_obj
from isoembed.stage import Ansatz, InitialSpec, StageOptions, initial_data, run_stage, schedule


@pytest.mark.parametrize("spec,expected", [("1,2,3", (1, 2, 3)), (" 3, 1 ,2", (3, 1, 2)),
                                           ([2, 4, 5], (2, 4, 5))])
def test_parse_triple(spec, expected):
    assert parse_triple(spec, 5) == expected


@pytest.mark.parametrize("spec", ["1,2", "1,1,2", "0,1,2", "1,2,6", "a,b,c"])
def test_parse_triple_rejects(spec):
    with pytest.raises(ConfigurationError):
        parse_triple(spec, 5)


def test_counts_and_round_trip(tmp_path):
    g = GridSpec.ball(2, 33, 1.0)
    f = GridField.from_function(g, lambda x, y: [x + 0 * y, y + 0 * x, x * y, 0 * x], "map")
    verts, faces = triangulate(f, (1, 2, 3))
    assert len(verts) == int(f.valid.sum())
    v = f.valid
    quads = int((v[:-1, :-1] & v[1:, :-1] & v[1:, 1:] & v[:-1, 1:]).sum())
    assert len(faces) == 2 * quads
    nv, nf = write_obj(tmp_path / "m.obj", f, "1,2,3")
    V, F = read_obj(tmp_path / "m.obj")
    assert (nv, nf) == (V.shape[0], F.shape[0])
    assert np.array_equal(V, verts) and np.array_equal(F, faces)
    assert np.allclose(V[:, 2], V[:, 0] * V[:, 1], atol=1e-15)


def test_non_map_rejected():
    g = GridSpec.ball(2, 9, 1.0)
    s = GridField.from_function(g, lambda x, y: x + y, "scalar")
    with pytest.raises(ConfigurationError):
        triangulate(s, (1, 2, 3))


def test_corrugation_wavelength_along_first_direction(tmp_path):
    ans = Ansatz(100, 1.05, 0.5, 0.1, 0.01)
    N = 257
    lam = ans.lam(1)
    grid = GridSpec.ball(2, N, 0.5 * (N - 1) / (40 * lam))
    d = initial_data(grid, "spiral", InitialSpec(kind="inclusion", p_iso="match"), ans)
    f1, rep = run_stage(d.f0, d.g, schedule(0, ans, strict=False), "spiral",
                        StageOptions(block_rows=1024))
    assert rep.ok
    write_obj(tmp_path / "c.obj", f1, "1,2,3")
    V, _ = read_obj(tmp_path / "c.obj")
    row = np.isclose(V[:, 1], 0.0, atol=0.25 * f1.grid.spacing)
    x, z = V[row, 0], V[row, 2]
    assert x.size > 40 and np.abs(z).max() > 0

    def misfit(k):
        M = np.stack([np.sin(k * x), np.cos(k * x)], axis=1)
        c = np.linalg.lstsq(M, z, rcond=None)[0]
        return np.abs(z - M @ c).max() / np.abs(z).max()

    assert misfit(lam) < 1e-9
    assert misfit(1.1 * lam) > 0.03
    assert misfit(0.9 * lam) > 0.03
