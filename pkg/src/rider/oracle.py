"""Folding oracles: sequence -> backbone structure.

:class:`HelixOracle` is a deterministic synthetic predictor used for closed
loop experiments. :class:`SubprocessOracle` wraps an external predictor
that reads FASTA and writes a PDB file.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ConfigError, OracleError, ParseError
from .struct_io import ALPHABET, BackboneStructure, RnaSequence, format_fasta, parse_pdb_backbone, sequence_to_onehot

logger = logging.getLogger(__name__)

MIN_TASK_LENGTH = 4


class FoldingOracle(Protocol):
    name: str

    def fold(self, seq) -> BackboneStructure: ...


def _letters(seq) -> str:
    if isinstance(seq, RnaSequence):
        return seq.letters
    return sequence_to_onehot(seq).letters


@dataclass(frozen=True)
class HelixOracleParams:
    rise: dict = field(default_factory=lambda: {"A": 2.0, "C": 2.8, "G": 3.6, "U": 4.4})
    twist_deg: dict = field(default_factory=lambda: {"A": 30.0, "C": 34.0, "G": 38.0, "U": 42.0})
    # atom offsets (x, y, z) in the residue frame, Angstrom
    p_offset: tuple = (8.9, 0.0, 1.0)
    c4p_offset: tuple = (7.33, -2.67, 0.0)
    n_offset: tuple = (4.53, -2.11, -0.5)
    # fraction of a residue's own rise/twist applied before placing it
    entry_fraction: float = 0.3

    def __post_init__(self):
        if any(self.rise[b] <= 0 for b in ALPHABET):
            raise ConfigError("helix rises must be positive")
        if any(not 0 < self.twist_deg[b] < 90 for b in ALPHABET):
            raise ConfigError("helix twists must lie in (0, 90) degrees")


def helix_fold(params: HelixOracleParams, seq) -> BackboneStructure:
    """Place residues along a screw axis accumulated base by base.

    Residue ``i`` sits at height ``sum(rise[:i]) + f * rise[i]`` and azimuth
    ``sum(twist[:i]) + f * twist[i]`` with ``f = entry_fraction``. Using a
    fraction other than 0 or 1/2 lets every base, including both chain ends,
    change the geometry in a way no rigid motion can undo.
    """
    letters = _letters(seq)
    rise = np.array([params.rise[b] for b in letters])
    twist = np.radians([params.twist_deg[b] for b in letters])
    f = params.entry_fraction
    z = np.concatenate([[0.0], np.cumsum(rise)[:-1]]) + f * rise
    theta = np.concatenate([[0.0], np.cumsum(twist)[:-1]]) + f * twist

    c, s = np.cos(theta), np.sin(theta)
    offsets = np.array([params.p_offset, params.c4p_offset, params.n_offset])
    atoms = np.empty((len(letters), 3, 3))
    atoms[..., 0] = c[:, None] * offsets[:, 0] - s[:, None] * offsets[:, 1]
    atoms[..., 1] = s[:, None] * offsets[:, 0] + c[:, None] * offsets[:, 1]
    atoms[..., 2] = z[:, None] + offsets[:, 2]
    return BackboneStructure.from_arrays(letters, atoms, source="oracle")


class HelixOracle:
    name = "helix"

    def __init__(self, params: HelixOracleParams | None = None):
        self.params = params or HelixOracleParams()

    def fold(self, seq) -> BackboneStructure:
        return helix_fold(self.params, seq)


def subprocess_fold(cmd_template: str, workdir, seq, timeout_s: float = 600.0) -> BackboneStructure:
    """Run an external predictor on one sequence.

    ``cmd_template`` is split shell-style and must reference ``{fasta}`` and
    ``{out_pdb}``. Each call works in a private temporary directory under
    ``workdir`` that is removed afterwards.
    """
    if "{fasta}" not in cmd_template or "{out_pdb}" not in cmd_template:
        raise ConfigError("command template needs {fasta} and {out_pdb} placeholders")
    letters = _letters(seq)
    Path(workdir).mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=workdir, prefix="fold-") as tmp:
        fasta = Path(tmp) / "query.fasta"
        out_pdb = Path(tmp) / "pred.pdb"
        fasta.write_text(format_fasta([("query", letters)]))
        argv = [tok.format(fasta=fasta, out_pdb=out_pdb) for tok in shlex.split(cmd_template)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise OracleError(f"predictor timed out after {timeout_s}s", kind="timeout",
                              stderr=_excerpt(exc.stderr)) from None
        except OSError as exc:
            raise OracleError(f"could not run predictor: {exc}", kind="exec") from None
        if proc.returncode != 0:
            raise OracleError(f"predictor exited with status {proc.returncode}", kind="exit",
                              stderr=_excerpt(proc.stderr))
        if not out_pdb.exists():
            raise OracleError("predictor produced no structure file", kind="parse",
                              stderr=_excerpt(proc.stderr))
        try:
            return parse_pdb_backbone(out_pdb.read_text(), source="oracle")
        except ParseError as exc:
            raise OracleError(f"unparseable predictor output: {exc}", kind="parse",
                              stderr=_excerpt(proc.stderr)) from None


def _excerpt(text, limit=2000):
    if not text:
        return ""
    if isinstance(text, bytes):
        text = text.decode(errors="replace")
    return text[-limit:]


class SubprocessOracle:
    name = "subprocess"

    def __init__(self, cmd_template: str, workdir=None, timeout_s: float = 600.0, pool_size: int = 1):
        self.cmd_template = cmd_template
        self.workdir = workdir or tempfile.gettempdir()
        self.timeout_s = timeout_s
        self.pool_size = max(1, int(pool_size))

    def fold(self, seq) -> BackboneStructure:
        return subprocess_fold(self.cmd_template, self.workdir, seq, self.timeout_s)

    def fold_many(self, seqs) -> list:
        """Fold several sequences with at most ``pool_size`` concurrent calls.

        Failures come back as :class:`OracleError` instances in place of structures.
        """
        def one(s):
            try:
                return self.fold(s)
            except OracleError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.pool_size) as pool:
            return list(pool.map(one, seqs))


def make_task(params: HelixOracleParams | None, native_seq) -> tuple[BackboneStructure, RnaSequence]:
    """Target structure for a known native sequence under the helix oracle."""
    native = native_seq if isinstance(native_seq, RnaSequence) else sequence_to_onehot(native_seq)
    if len(native) < MIN_TASK_LENGTH:
        raise ConfigError(f"task sequences need at least {MIN_TASK_LENGTH} residues, got {len(native)}")
    target = helix_fold(params or HelixOracleParams(), native)
    return target, native


def random_sequence(length: int, rng: np.random.Generator) -> str:
    return "".join(rng.choice(list(ALPHABET), size=length))


def random_tasks(n_tasks: int, length: int, rng: np.random.Generator, params=None):
    """``n_tasks`` (target, native) pairs with uniformly random native sequences."""
    return [make_task(params, random_sequence(length, rng)) for _ in range(n_tasks)]
