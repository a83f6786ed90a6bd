import numpy as np
import pytest

from mdrecon.cirio import CirFormatError, load_cir, save_cir
from mdrecon.synth import SynthConfig, synth_sequence


@pytest.fixture
def seq():
    return synth_sequence(SynthConfig(seed=4), 3)


def test_round_trip_bit_identical(tmp_path, seq):
    path = tmp_path / "a.cir"
    save_cir(path, seq)
    back = load_cir(path)
    assert np.array_equal(back.samples, seq.samples)
    assert np.array_equal(back.grid_mask, seq.grid_mask)
    assert back.t_c == seq.t_c and back.f_c == seq.f_c
    assert back.meta == seq.meta


def test_save_is_deterministic(tmp_path, seq):
    p1, p2 = tmp_path / "a.cir", tmp_path / "b.cir"
    save_cir(p1, seq)
    save_cir(p2, seq)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_errors_with_offset(tmp_path, seq):
    path = tmp_path / "a.cir"
    save_cir(path, seq)
    blob = path.read_bytes()
    bad = tmp_path / "trunc.cir"
    bad.write_bytes(blob[:40])
    with pytest.raises(CirFormatError, match="byte"):
        load_cir(bad)


def test_bad_magic_errors(tmp_path, seq):
    path = tmp_path / "a.cir"
    save_cir(path, seq)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    bad = tmp_path / "bad.cir"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CirFormatError, match="magic"):
        load_cir(bad)


def test_csv_input_with_mask(tmp_path):
    path = tmp_path / "a.csv"
    lines = ["index,real,imag,mask"]
    vals = [(0, 1.0, -1.0, 1), (1, 0.0, 0.0, 0), (2, 2.5, 0.5, 1)]
    lines += [f"{i},{r},{im},{m}" for i, r, im, m in vals]
    path.write_text("\n".join(lines) + "\n")
    seq = load_cir(path)
    assert np.array_equal(seq.grid_mask, [True, False, True])
    assert seq.samples[0] == 1.0 - 1.0j
    assert seq.samples[1] == 0.0  # masked-out values are zero-filled


def test_csv_without_mask_warns_all_available(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("index,real,imag\n0,1,0\n1,0,1\n")
    with pytest.warns(UserWarning, match="mask"):
        seq = load_cir(path)
    assert seq.grid_mask.all()


def test_csv_nonconsecutive_index_errors(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("index,real,imag\n0,1,0\n2,0,1\n")
    with pytest.raises(CirFormatError, match="consecutive"):
        load_cir(path)
