"""Backbone structure parsing, PDB/FASTA writing and sequence encodings.

Only the three atoms per nucleotide that the rest of the package needs are
kept: P, C4' and the glycosidic nitrogen (N1 for pyrimidines, N9 for
purines).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AlphabetError, ParseError, ShapeError

logger = logging.getLogger(__name__)

ALPHABET = "ACGU"
BASE_INDEX = {b: i for i, b in enumerate(ALPHABET)}
PYRIMIDINES = frozenset("CU")

# residue names seen in the wild for the four standard ribonucleotides
_RESNAMES = {
    "A": "A", "C": "C", "G": "G", "U": "U",
    "RA": "A", "RC": "C", "RG": "G", "RU": "U",
    "ADE": "A", "CYT": "C", "GUA": "G", "URA": "U",
}


def glyco_atom_name(base: str) -> str:
    return "N1" if base in PYRIMIDINES else "N9"


@dataclass(frozen=True)
class ResidueAtoms:
    base: str
    p: np.ndarray
    c4p: np.ndarray
    n_glyco: np.ndarray
    number: int = 0

    @property
    def centroid(self) -> np.ndarray:
        return (self.p + self.c4p + self.n_glyco) / 3.0

    @property
    def n_atom_name(self) -> str:
        return glyco_atom_name(self.base)


@dataclass(frozen=True)
class BackboneStructure:
    residues: tuple
    chain_id: str = "A"
    source: str = ""
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "residues", tuple(self.residues))

    def __len__(self):
        return len(self.residues)

    @property
    def sequence(self) -> str:
        return "".join(r.base for r in self.residues)

    @cached_property
    def atoms(self) -> np.ndarray:
        """(N, 3, 3) array ordered (P, C4', N1/N9) per residue."""
        return np.stack([np.stack([r.p, r.c4p, r.n_glyco]) for r in self.residues])

    @property
    def p(self) -> np.ndarray:
        return self.atoms[:, 0]

    @property
    def c4p(self) -> np.ndarray:
        return self.atoms[:, 1]

    @property
    def n_glyco(self) -> np.ndarray:
        return self.atoms[:, 2]

    @property
    def centroids(self) -> np.ndarray:
        return self.atoms.mean(axis=1)

    @classmethod
    def from_arrays(cls, sequence, atoms, chain_id="A", source=""):
        """Build from a sequence string and an (N, 3, 3) atom array."""
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim != 3 or atoms.shape[1:] != (3, 3) or len(atoms) != len(sequence):
            raise ShapeError(f"atoms must be ({len(sequence)}, 3, 3), got {atoms.shape}")
        residues = [
            ResidueAtoms(b, a[0].copy(), a[1].copy(), a[2].copy(), number=i + 1)
            for i, (b, a) in enumerate(zip(sequence, atoms))
        ]
        return cls(tuple(residues), chain_id=chain_id, source=source)

    def transformed(self, rotation=None, translation=None) -> "BackboneStructure":
        """Apply ``x -> x @ rotation.T + translation`` to every atom."""
        atoms = self.atoms
        if rotation is not None:
            atoms = atoms @ np.asarray(rotation).T
        if translation is not None:
            atoms = atoms + np.asarray(translation)
        return BackboneStructure.from_arrays(self.sequence, atoms, self.chain_id, self.source)


@dataclass(frozen=True)
class RnaSequence:
    letters: str
    onehot: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.letters)

    def __str__(self):
        return self.letters


def sequence_to_onehot(letters) -> RnaSequence:
    letters = "".join(letters).upper()
    if not letters:
        raise AlphabetError("empty sequence")
    bad = sorted(set(letters) - set(ALPHABET))
    if bad:
        raise AlphabetError(f"unknown nucleotide(s) {bad!r}; alphabet is {ALPHABET}")
    idx = np.fromiter((BASE_INDEX[c] for c in letters), dtype=int, count=len(letters))
    onehot = np.zeros((len(letters), 4))
    onehot[np.arange(len(letters)), idx] = 1.0
    return RnaSequence(letters, onehot)


def decode_argmax(x0_hat) -> str:
    """Per-row argmax over (A, C, G, U); ties resolve to the lowest index."""
    x0_hat = np.asarray(x0_hat)
    if x0_hat.ndim != 2 or x0_hat.shape[1] != 4:
        raise ShapeError(f"expected an (N, 4) matrix, got {x0_hat.shape}")
    # np.argmax returns the first maximal index, which is the tie rule we want
    return "".join(ALPHABET[i] for i in np.argmax(x0_hat, axis=1))


def parse_pdb_backbone(text: str, chain: str | None = None, source: str = "") -> BackboneStructure:
    """Parse fixed-column ATOM records into a :class:`BackboneStructure`.

    Only the first model is read. HETATM records, alternate locations other
    than blank/``A`` and residues that are not one of the four standard
    ribonucleotides are skipped. Residues missing any of P, C4' or the
    glycosidic N are dropped and counted in ``BackboneStructure.dropped``.

    If ``chain`` is None the first chain carrying RNA residues is used.
    """
    if not text or not text.strip():
        raise ParseError("empty structure input")

    residues: dict[tuple[str, int], dict] = {}
    order: list[tuple[str, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[0:6]
        if record.startswith("ENDMDL"):
            break
        if record != "ATOM  ":
            continue
        if len(line) < 54:
            raise ParseError(f"line {lineno}: ATOM record too short ({len(line)} columns)")
        altloc = line[16]
        if altloc not in (" ", "A"):
            continue
        base = _RESNAMES.get(line[17:20].strip())
        if base is None:
            continue
        chain_id = line[21]
        if chain is not None and chain_id != chain:
            continue
        try:
            resnum = int(line[22:26])
        except ValueError:
            raise ParseError(f"line {lineno}: bad residue number {line[22:26]!r}") from None
        try:
            xyz = np.array([float(line[30:38]), float(line[38:46]), float(line[46:54])])
        except ValueError:
            raise ParseError(f"line {lineno}: malformed coordinate field {line[30:54]!r}") from None
        if not np.all(np.isfinite(xyz)):
            raise ParseError(f"line {lineno}: non-finite coordinate")

        key = (chain_id, resnum)
        if key not in residues:
            residues[key] = {"base": base, "atoms": {}}
            order.append(key)
        name = line[12:16].strip().replace("*", "'")
        residues[key]["atoms"].setdefault(name, xyz)

    if not order:
        raise ParseError("no RNA ATOM records found")

    chain_id = chain if chain is not None else order[0][0]
    keys = sorted((k for k in order if k[0] == chain_id), key=lambda k: k[1])

    kept, dropped = [], 0
    for key in keys:
        rec = residues[key]
        atoms = rec["atoms"]
        n_name = glyco_atom_name(rec["base"])
        if "P" not in atoms or "C4'" not in atoms or n_name not in atoms:
            dropped += 1
            continue
        kept.append(ResidueAtoms(rec["base"], atoms["P"], atoms["C4'"], atoms[n_name], number=key[1]))

    if dropped:
        logger.warning("dropped %d residue(s) missing backbone atoms", dropped)
    if not kept:
        raise ParseError(f"no complete residues in chain {chain_id!r} ({dropped} incomplete)")
    return BackboneStructure(tuple(kept), chain_id=chain_id, source=source, dropped=dropped)


def read_pdb_backbone(path, chain=None) -> BackboneStructure:
    with open(path) as fh:
        return parse_pdb_backbone(fh.read(), chain=chain, source=str(path))


def format_pdb(structure: BackboneStructure) -> str:
    """Write the backbone atoms as fixed-column ATOM records."""
    lines = []
    serial = 1
    for i, res in enumerate(structure.residues, start=1):
        for name, xyz in (("P", res.p), ("C4'", res.c4p), (res.n_atom_name, res.n_glyco)):
            element = name[0]
            lines.append(
                f"ATOM  {serial:5d} {name:<4s} {res.base:>3s} {structure.chain_id:1s}{i:4d}    "
                f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}  1.00  0.00          {element:>2s}"
            )
            serial += 1
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def format_fasta(records, width: int = 60) -> str:
    """``records`` is an iterable of ``(name, sequence)`` pairs."""
    out = []
    for name, seq in records:
        seq = str(seq)
        out.append(f">{name}")
        out.extend(seq[i:i + width] for i in range(0, len(seq), width))
    return "\n".join(out) + "\n"


def parse_fasta(text: str) -> list[tuple[str, str]]:
    records, name, chunks = [], None, []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if name is not None:
                records.append((name, "".join(chunks)))
            name, chunks = line[1:].strip(), []
        else:
            if name is None:
                raise ParseError("FASTA sequence data before the first header")
            chunks.append(line)
    if name is not None:
        records.append((name, "".join(chunks)))
    return records
