import numpy as np
import pytest

from posegen.geometry import PointCloud
from posegen.ply import read_ply, write_ply


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    n = 100
    pc = PointCloud(rng.normal(size=(n, 3)) * 1e-3,
                    {"colors": rng.integers(0, 256, (n, 3)).astype(np.uint8),
                     "normals": rng.normal(size=(n, 3))})
    path = tmp_path / "a.ply"
    write_ply(path, pc)
    back = read_ply(path)
    np.testing.assert_array_equal(back.points, pc.points)
    np.testing.assert_array_equal(back.attributes["normals"], pc.attributes["normals"])
    np.testing.assert_array_equal(back.attributes["colors"], pc.attributes["colors"])
    assert back.attributes["colors"].dtype == np.uint8


def test_header_layout(tmp_path):
    path = tmp_path / "b.ply"
    write_ply(path, PointCloud([[1.0, 2.0, 3.0]], {"colors": [[1, 2, 3]]}))
    lines = path.read_text().splitlines()
    assert lines[:6] == ["ply", "format ascii 1.0", "element vertex 1",
                         "property float x", "property float y", "property float z"]
    assert lines[6:9] == [f"property uchar {c}" for c in ("red", "green", "blue")]
    assert lines[9] == "end_header"
    assert lines[10] == "1 2 3 1 2 3"


def test_unknown_property_skipped_with_warning(tmp_path):
    path = tmp_path / "c.ply"
    path.write_text("ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\n"
                    "property float intensity\nproperty float y\nproperty float z\nend_header\n"
                    "0 5 1 2\n3 6 4 5\n")
    with pytest.warns(UserWarning, match="intensity"):
        pc = read_ply(path)
    np.testing.assert_array_equal(pc.points, [[0, 1, 2], [3, 4, 5]])
    assert pc.attributes == {}


@pytest.mark.parametrize("text,msg", [
    ("hello\n", "not a PLY"),
    ("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n", "ASCII"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
     "missing"),
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
     "property float z\nend_header\n1 2 3\n", "expected 2"),
])
def test_malformed_files(tmp_path, text, msg):
    path = tmp_path / "bad.ply"
    path.write_text(text)
    with pytest.raises(ValueError, match=msg):
        read_ply(path)
