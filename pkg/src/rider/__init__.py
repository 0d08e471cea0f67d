"""Structure-conditioned RNA sequence design.

A diffusion sampler over one-hot nucleotide sequences, conditioned on an
equivariant encoding of a target backbone, and fine-tuned with a clipped
policy-gradient objective against a folding oracle.
"""

from .errors import (
    AlphabetError,
    BatchError,
    ConfigError,
    GraphError,
    OracleError,
    ParseError,
    RangeError,
    RiderError,
    ShapeError,
    StateError,
    UpdateError,
)
from .struct_io import BackboneStructure, RnaSequence, parse_pdb_backbone, read_pdb_backbone, sequence_to_onehot
from .metrics import MetricsReport, d0, gdt_ts, kabsch_superpose, metrics_report, rmsd, tm_score
from .featurize import GeometricGraph, StructureEncoder, build_graph, encode_structure
from .diffusion import NoiseSchedule, alpha_sigma, ddim_step, forward_noise, pretrain, pretrain_loss, sample_sequence
from .policy import LinearNoisePolicy, PolicySnapshot, grad_log_prob, load_checkpoint, save_checkpoint
from .rewards import RewardConfig, base_reward, bonus_reward, total_reward
from .oracle import HelixOracle, HelixOracleParams, SubprocessOracle, helix_fold, make_task
from .rl import RlConfig, Target, collect_batch, policy_update, prepare_target, train
from .config import RunConfig, load_config

__version__ = "0.1.0"
