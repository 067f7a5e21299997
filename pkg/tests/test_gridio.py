import numpy as np
import pytest

from bistrain.errors import GridFormatError
from bistrain.gridio import read_frame, read_grid, write_frame, write_grid, write_pgm
from bistrain.signal import RfFrame


def test_round_trip(tmp_path, rng):
    frame = RfFrame(rng.standard_normal((64, 16)), fs=50e6, fc=5e6, c=1500.0, line_pitch=2e-4)
    path = tmp_path / "f.evgrid"
    write_frame(path, frame)
    back = read_frame(path)
    np.testing.assert_array_equal(back.samples, frame.samples)
    assert back.metadata() == frame.metadata()


def test_layout_is_header_plus_little_endian(tmp_path):
    values = np.arange(6, dtype=np.float64).reshape(2, 3)
    path = tmp_path / "g.evgrid"
    write_grid(path, values)
    raw = path.read_bytes()
    header, body = raw.split(b"\n", 1)
    fields = header.decode().split()
    assert fields[:3] == ["EVGRID", "2", "3"]
    assert len(fields) == 7
    np.testing.assert_array_equal(np.frombuffer(body, "<f8"), values.ravel())


@pytest.mark.parametrize("payload", [b"NOTGRID 2 2 1 1 1 1\n" + bytes(32),
                                     b"EVGRID 2 x 1 1 1 1\n" + bytes(32),
                                     b"EVGRID 2 2 1 1 1 1\n" + bytes(31),
                                     b"EVGRID 2 2 1 1 1\n" + bytes(32),
                                     b""])
def test_malformed(tmp_path, payload):
    path = tmp_path / "bad.evgrid"
    path.write_bytes(payload)
    with pytest.raises(GridFormatError):
        read_grid(path)


def test_csv_import(tmp_path, rng):
    x = rng.standard_normal((64, 16))
    path = tmp_path / "f.csv"
    np.savetxt(path, x, delimiter=",")
    np.testing.assert_allclose(read_frame(path).samples, x, rtol=1e-15)


def test_pgm(tmp_path):
    path = tmp_path / "img.pgm"
    write_pgm(path, np.array([[0.0, 1.0], [2.0, 4.0]]))
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 64, 128, 255]
    write_pgm(path, np.ones((3, 3)))
    assert set(path.read_bytes()[-9:]) == {0}
