"""Peak-list spectra and the plain-text spectrum file format.

Record layout::

    ID: <molecule id>
    ENERGIES: 10,20
    NUMPEAKS: 2
    41.03858 0.25000000
    59.04914 0.75000000

Records are separated by one blank line. Masses are written with 5 decimals
and intensities with 8, so write -> read -> write is byte-stable.
"""

from dataclasses import dataclass

import numpy as np


class SpectrumFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Spectrum:
    masses: np.ndarray
    intensities: np.ndarray
    energies: tuple = ()
    id: str = ""

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        p = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if m.shape != p.shape:
            raise ValueError("masses and intensities differ in length")
        order = np.argsort(m, kind="stable")
        object.__setattr__(self, "masses", m[order])
        object.__setattr__(self, "intensities", p[order])
        object.__setattr__(self, "energies", tuple(int(e) for e in self.energies))

    def __len__(self):
        return self.masses.size

    @property
    def total(self):
        return float(np.sum(self.intensities))

    def normalized(self):
        t = self.total
        if t <= 0:
            raise ValueError(f"spectrum {self.id!r} has no intensity")
        return Spectrum(self.masses, self.intensities / t, self.energies, self.id)

    def check(self, tol=1e-9):
        """Raise unless masses are positive and intensities a distribution."""
        if np.any(self.masses <= 0):
            raise ValueError(f"spectrum {self.id!r} has non-positive masses")
        if np.any(self.intensities < 0):
            raise ValueError(f"spectrum {self.id!r} has negative intensities")
        if abs(self.total - 1.0) > tol:
            raise ValueError(f"spectrum {self.id!r} intensities sum to {self.total}")
        return self

    def peaks(self):
        return list(zip(self.masses.tolist(), self.intensities.tolist()))


def format_record(spec):
    lines = [f"ID: {spec.id}",
             "ENERGIES: " + ",".join(str(e) for e in spec.energies),
             f"NUMPEAKS: {len(spec)}"]
    lines += [f"{m:.5f} {p:.8f}" for m, p in zip(spec.masses, spec.intensities)]
    return "\n".join(lines) + "\n"


def write_spectra(path, spectra):
    with open(path, "w") as fh:
        fh.write("\n".join(format_record(s) for s in spectra))


def parse_spectra(text, normalize=True):
    out = []
    blocks = [b for b in text.split("\n\n") if b.strip()]
    for block in blocks:
        lines = block.strip("\n").split("\n")
        header = {}
        k = 0
        while k < len(lines) and ":" in lines[k]:
            key, _, value = lines[k].partition(":")
            header[key.strip().upper()] = value.strip()
            k += 1
        for key in ("ID", "ENERGIES", "NUMPEAKS"):
            if key not in header:
                raise SpectrumFormatError(f"record missing {key} header: {lines[0]!r}")
        try:
            npeaks = int(header["NUMPEAKS"])
            energies = tuple(int(e) for e in header["ENERGIES"].split(",") if e.strip())
            rows = [tuple(float(x) for x in line.split()) for line in lines[k:]]
        except ValueError as exc:
            raise SpectrumFormatError(f"record {header['ID']!r}: {exc}") from None
        if len(rows) != npeaks or any(len(r) != 2 for r in rows):
            raise SpectrumFormatError(
                f"record {header['ID']!r}: expected {npeaks} peak lines, got {len(rows)}")
        arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
        spec = Spectrum(arr[:, 0], arr[:, 1], energies, header["ID"])
        if normalize and len(spec):
            spec = spec.normalized()
        out.append(spec)
    return out


def read_spectra(path, normalize=True):
    with open(path) as fh:
        return parse_spectra(fh.read(), normalize=normalize)
