import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fragspec.spectrum import Spectrum, SpectrumFormatError, format_record, parse_spectra, read_spectra, write_spectra


def test_sorted_on_construction():
    s = Spectrum([30.0, 10.0, 20.0], [0.5, 0.2, 0.3], (20, 10), "x")
    assert s.masses.tolist() == [10.0, 20.0, 30.0]
    assert s.intensities.tolist() == [0.2, 0.3, 0.5]
    assert s.energies == (20, 10)
    with pytest.raises(ValueError):
        Spectrum([1.0], [0.5, 0.5])


def test_check_and_normalize():
    s = Spectrum([10.0, 20.0], [2.0, 2.0])
    with pytest.raises(ValueError):
        s.check()
    assert s.normalized().check().intensities.tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        Spectrum([10.0], [0.0]).normalized()
    with pytest.raises(ValueError):
        Spectrum([-1.0], [1.0]).check()


def test_record_layout():
    s = Spectrum([100.123456, 55.5], [0.25, 0.75], (10, 20), "mol1")
    assert format_record(s) == ("ID: mol1\nENERGIES: 10,20\nNUMPEAKS: 2\n"
                                "55.50000 0.75000000\n100.12346 0.25000000\n")


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    specs = [Spectrum(rng.uniform(10, 900, 5), rng.dirichlet(np.ones(5)), (10, 30), f"m{k}")
             for k in range(4)]
    path = tmp_path / "s.msp"
    write_spectra(str(path), specs)
    back = read_spectra(str(path))
    assert [s.id for s in back] == [s.id for s in specs]
    for a, b in zip(specs, back):
        assert np.allclose(a.masses, b.masses, atol=5e-6)
        assert np.allclose(a.intensities, b.intensities, atol=1e-7)
        assert b.energies == (10, 30)
    # writing what was read reproduces the file byte for byte
    again = tmp_path / "t.msp"
    write_spectra(str(again), read_spectra(str(path), normalize=False))
    assert again.read_bytes() == path.read_bytes()


@pytest.mark.parametrize("text", [
    "ID: a\nNUMPEAKS: 1\n10.0 1.0\n",
    "ID: a\nENERGIES: 10\nNUMPEAKS: 2\n10.0 1.0\n",
    "ID: a\nENERGIES: 10\nNUMPEAKS: 1\n10.0\n",
    "ID: a\nENERGIES: x\nNUMPEAKS: 1\n10.0 1.0\n",
])
def test_bad_records(text):
    with pytest.raises(SpectrumFormatError):
        parse_spectra(text)


def test_empty_spectrum_record():
    (s,) = parse_spectra("ID: e\nENERGIES: \nNUMPEAKS: 0\n")
    assert len(s) == 0 and s.energies == ()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(1.0, 1499.0), st.floats(0.001, 1.0)), min_size=1, max_size=8,
                unique_by=lambda t: round(t[0], 5)))
def test_format_stable(peaks):
    m, p = zip(*peaks)
    s = Spectrum(np.array(m), np.array(p), (), "h")
    text = format_record(s)
    assert format_record(parse_spectra(text, normalize=False)[0]) == text
