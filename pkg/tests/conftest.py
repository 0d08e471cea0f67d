import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rider.struct_io import BackboneStructure  # noqa: E402


def atom_line(serial, name, resname, chain, resnum, xyz):
    element = name[0]
    return (f"ATOM  {serial:5d} {name:<4s} {resname:>3s} {chain}{resnum:4d}    "
            f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}  1.00  0.00          {element:>2s}")


def pdb_text(residues, chain="A"):
    """``residues``: list of (resname, resnum, {atom_name: xyz})."""
    lines, serial = [], 1
    for resname, resnum, atoms in residues:
        for name, xyz in atoms.items():
            lines.append(atom_line(serial, name, resname, chain, resnum, xyz))
            serial += 1
    return "\n".join(lines + ["END"]) + "\n"


def random_structure(rng, n, spread=10.0):
    seq = "".join(rng.choice(list("ACGU"), size=n))
    centers = np.cumsum(rng.normal(scale=spread / 3, size=(n, 3)), axis=0)
    atoms = centers[:, None, :] + rng.normal(scale=1.5, size=(n, 3, 3))
    return BackboneStructure.from_arrays(seq, atoms)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
