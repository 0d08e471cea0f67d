"""``rider`` command-line interface.

Machine-readable results go to stdout as JSON; progress and human-readable
summaries go to stderr. Exit codes: 0 success, 1 usage, 2 bad input,
3 numeric or training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import errors
from .config import RunConfig, apply_overrides, config_to_dict, dump_config, load_config
from .diffusion import LossProbe, pretrain, sample_sequence
from .featurize import build_graph, default_encoder
from .metrics import MetricsReport, metrics_report
from .oracle import HelixOracle, SubprocessOracle, random_tasks
from .policy import LinearNoisePolicy, load_checkpoint, policy_class, save_checkpoint
from .rewards import reward_breakdown
from .rl import Target, design, prepare_target, train
from .struct_io import format_fasta, format_pdb, parse_fasta, read_pdb_backbone, sequence_to_onehot

log = logging.getLogger("rider")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

INPUT_ERRORS = (errors.ParseError, errors.AlphabetError, errors.ShapeError, errors.GraphError,
                errors.ConfigError, errors.RangeError, FileNotFoundError, IsADirectoryError,
                json.JSONDecodeError)
NUMERIC_ERRORS = (errors.UpdateError, errors.BatchError, errors.StateError, errors.OracleError,
                  FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj, out_path=None):
    text = json.dumps(obj, indent=2) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    sys.stdout.write(text)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("RIDER_SEED"):
        try:
            seed = int(os.environ["RIDER_SEED"])
        except ValueError:
            raise errors.ConfigError(f"RIDER_SEED must be an integer, got {os.environ['RIDER_SEED']!r}")
    if seed is not None:
        cfg = apply_overrides(cfg, {"seed": seed})
    return cfg


def _oracle(cfg: RunConfig):
    o = cfg.oracle
    if o.kind == "helix":
        return HelixOracle()
    if o.kind == "subprocess":
        return SubprocessOracle(o.cmd, o.workdir or None, o.timeout_s, o.pool_size)
    return None


def _encoder(cfg: RunConfig):
    return default_encoder(cfg.encoder.seed, cfg.encoder.layers)


def _target_from_pdb(path, cfg: RunConfig) -> Target:
    return prepare_target(read_pdb_backbone(path), Path(path).stem, _encoder(cfg), cfg.encoder.k,
                          cfg.encoder.standardize)


def _synthetic_tasks(cfg: RunConfig):
    """The synthetic task set as ``(target, native)`` pairs; shared by pretrain and train-rl."""
    p = cfg.pretrain
    tasks = random_tasks(p.n_tasks, p.task_length, np.random.default_rng(p.task_seed))
    enc = _encoder(cfg)
    return [(prepare_target(struct, f"task{i}", enc, cfg.encoder.k, cfg.encoder.standardize), native)
            for i, (struct, native) in enumerate(tasks)]


def _pretraining_set(cfg: RunConfig):
    return [(native.onehot, target.h) for target, native in _synthetic_tasks(cfg)]


def _synthetic_targets(cfg: RunConfig, n: int):
    tasks = _synthetic_tasks(cfg)
    if not 1 <= n <= len(tasks):
        raise errors.ConfigError(f"--synthetic must be in 1..{len(tasks)} (pretrain.n_tasks)")
    return [target for target, _ in tasks[:n]]


def _check_dims(policy: LinearNoisePolicy, cfg: RunConfig):
    want = _encoder(cfg).scalar_dim
    if policy.h_dim != want:
        raise errors.ConfigError(f"checkpoint expects conditioning width {policy.h_dim}, encoder gives {want}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_score(args) -> int:
    a = read_pdb_backbone(args.pdb_a)
    b = read_pdb_backbone(args.pdb_b)
    report = metrics_report(a, b)
    print(f"GDT_TS {report.gdt_ts:.4f}  TM {report.tm_score:.4f}  RMSD {report.rmsd:.3f}", file=sys.stderr)
    _emit(report.to_dict(), args.json)
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = _resolve(args)
    s = read_pdb_backbone(args.pdb)
    g = build_graph(s, k=args.k if args.k is not None else cfg.encoder.k)
    summary = {
        "n_nodes": g.n_nodes,
        "k": g.k,
        "neighbors_per_node": int(g.neighbors.shape[1]),
        "node_scalar_shape": list(g.node_scalar.shape),
        "node_vector_shape": list(g.node_vector.shape),
        "edge_scalar_shape": list(g.edge_scalar.shape),
        "edge_vector_shape": list(g.edge_vector.shape),
    }
    if args.embed:
        emb = _encoder(cfg)(g)
        summary["embedding_scalar_shape"] = list(emb.scalar.shape)
        summary["embedding_vector_shape"] = list(emb.vector.shape)
    if args.dump_json:
        dump = g.to_dict()
        if args.embed:
            dump["embedding_scalar"] = emb.scalar.tolist()
            dump["embedding_vector"] = emb.vector.tolist()
        Path(args.dump_json).write_text(json.dumps(dump) + "\n")
    _emit(summary)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    policy = load_checkpoint(args.checkpoint)
    _check_dims(policy, cfg)
    target = _target_from_pdb(args.target, cfg)
    n = args.n if args.n is not None else cfg.sampler.n_samples
    tau = args.temperature if args.temperature is not None else cfg.sampler.temperature
    steps = args.steps if args.steps is not None else cfg.sampler.n_steps
    oracle = None if args.no_oracle else _oracle(cfg)

    designs = []
    if oracle is None:
        for j in range(n):
            rng = np.random.default_rng([cfg.seed, 0, j])
            seq, _ = sample_sequence(policy, target.h, steps, tau, rng, cfg.schedule, cfg.sampler.min_std)
            designs.append({"id": f"{target.target_id}_{j}", "sequence": seq.letters})
    else:
        rows = design(policy, [target], oracle, steps, tau, cfg.seed, n, cfg.reward, cfg.schedule,
                      cfg.sampler.min_std)
        for j, (_, letters, report, reward) in enumerate(rows):
            designs.append({"id": f"{target.target_id}_{j}", "sequence": letters,
                            "metrics": report.to_dict(), "reward": reward})
            print(f"{j:3d} {letters}  GDT {report.gdt_ts:.3f} RMSD {report.rmsd:.2f}", file=sys.stderr)
    if args.fasta:
        Path(args.fasta).write_text(format_fasta([(d["id"], d["sequence"]) for d in designs]))
    _emit({"target": target.target_id, "temperature": tau, "n_steps": steps, "seed": cfg.seed,
           "designs": designs}, args.json)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    p = cfg.pretrain
    iterations = args.iterations if args.iterations is not None else p.iterations
    dataset = _pretraining_set(cfg)
    policy = policy_class(p.policy).init(dataset[0][1].shape[1], seed=cfg.seed, scale=p.init_scale,
                                         sched=cfg.schedule)
    probe = LossProbe.draw(dataset, p.n_probes, np.random.default_rng([cfg.seed, 11]), cfg.schedule)
    policy, history = pretrain(policy, dataset, iterations, np.random.default_rng([cfg.seed, 7]),
                               p.learning_rate, p.batch_size, cfg.schedule, probe=probe)
    losses, probe_losses = history["loss"], history["probe_loss"]
    save_checkpoint(policy, args.out)
    if args.loss_log:
        Path(args.loss_log).write_text("".join(
            json.dumps({"iteration": i, "loss": v, "probe_loss": w}) + "\n"
            for i, (v, w) in enumerate(zip(losses, probe_losses))))
    if losses:
        print(f"pretrained {iterations} iterations, probe loss {probe_losses[-1]:.3f}", file=sys.stderr)
    _emit({"iterations": iterations, "checkpoint": str(args.out), "digest": policy.digest(),
           "final_loss": losses[-1] if losses else None,
           "final_probe_loss": probe_losses[-1] if probe_losses else None})
    return EXIT_OK


def cmd_train_rl(args) -> int:
    cfg = _resolve(args)
    overrides = {}
    if args.baseline_mode is not None:
        overrides["baseline_mode"] = args.baseline_mode
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        cfg = apply_overrides(cfg, {"rl": overrides})
    policy = load_checkpoint(args.checkpoint)
    _check_dims(policy, cfg)
    oracle = _oracle(cfg)
    if oracle is None:
        raise errors.ConfigError("train-rl needs an oracle (oracle.kind = helix or subprocess)")
    if args.target:
        targets = [_target_from_pdb(p, cfg) for p in args.target]
    else:
        targets = _synthetic_targets(cfg, args.synthetic)

    if args.log:
        with open(args.log, "w") as fh:
            policy, records = train(cfg.rl, targets, oracle, policy, cfg.reward, cfg.seed, cfg.schedule,
                                    fh, args.timing)
    else:
        policy, records = train(cfg.rl, targets, oracle, policy, cfg.reward, cfg.seed, cfg.schedule,
                                None, args.timing)
    save_checkpoint(policy, args.out)
    for r in records:
        print(f"epoch {r.epoch:3d} reward {r.mean_reward:9.3f} baseline {r.baseline:9.3f} "
              f"clip {r.clip_frac:.3f}", file=sys.stderr)
    _emit({"epochs": len(records), "checkpoint": str(args.out), "digest": policy.digest(),
           "targets": [t.target_id for t in targets],
           "mean_reward": [r.mean_reward for r in records]})
    return EXIT_OK


def cmd_reward(args) -> int:
    cfg = _resolve(args)
    if args.kind:
        cfg = apply_overrides(cfg, {"reward": {"base_kind": args.kind}})
    text = Path(args.metrics).read_text() if args.metrics != "-" else sys.stdin.read()
    try:
        report = MetricsReport.from_dict(json.loads(text))
    except (KeyError, TypeError) as exc:
        raise errors.ParseError(f"metrics JSON needs gdt_ts, tm_score and rmsd ({exc})") from exc
    _emit(reward_breakdown(cfg.reward, report))
    return EXIT_OK


def cmd_fold(args) -> int:
    cfg = _resolve(args)
    if args.fasta:
        records = parse_fasta(Path(args.sequence).read_text())
        if not records:
            raise errors.ParseError(f"{args.sequence}: no FASTA records")
        letters = records[0][1]
    else:
        letters = args.sequence
    seq = sequence_to_onehot(letters)
    oracle = _oracle(cfg)
    if oracle is None:
        raise errors.ConfigError("fold needs an oracle (oracle.kind = helix or subprocess)")
    structure = oracle.fold(seq)
    pdb = format_pdb(structure)
    if args.out:
        Path(args.out).write_text(pdb)
        _emit({"sequence": seq.letters, "n_residues": len(structure), "out": str(args.out)})
    else:
        sys.stdout.write(pdb)
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = RunConfig() if args.defaults else _resolve(args)
    if args.json:
        _emit(config_to_dict(cfg))
    else:
        sys.stdout.write(dump_config(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rider", description="Structure-conditioned RNA sequence design toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p, seed=True):
        p.add_argument("--config", help="run config file (section.key = value)")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (falls back to RIDER_SEED, then config)")
        return p

    p = sub.add_parser("score", help="GDT_TS / TM-score / RMSD between two structures")
    p.add_argument("pdb_a")
    p.add_argument("pdb_b", help="reference structure")
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_score)

    p = with_config(sub.add_parser("featurize", help="build the k-NN graph of a structure"))
    p.add_argument("pdb")
    p.add_argument("--k", type=int)
    p.add_argument("--embed", action="store_true", help="also run the structure encoder")
    p.add_argument("--dump-json", help="write full feature arrays as JSON")
    p.set_defaults(func=cmd_featurize)

    p = with_config(sub.add_parser("sample", help="design sequences for a target"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True, help="target structure (PDB)")
    p.add_argument("--n", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--fasta", help="write designs as FASTA")
    p.add_argument("--json", help="also write the JSON result here")
    p.add_argument("--no-oracle", action="store_true", help="skip folding and scoring")
    p.set_defaults(func=cmd_sample)

    p = with_config(sub.add_parser("pretrain", help="fit the noise predictor on synthetic tasks"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--loss-log", help="JSON-lines loss log")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("train-rl", help="policy-gradient fine-tuning"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", action="append", help="target PDB (repeatable)")
    p.add_argument("--synthetic", type=int, default=1, help="number of synthetic targets if no --target")
    p.add_argument("--baseline-mode", choices=("reward", "batch", "moving"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--log", help="JSON-lines epoch log")
    p.add_argument("--timing", action="store_true", help="add wall_ms to log records")
    p.set_defaults(func=cmd_train_rl)

    p = with_config(sub.add_parser("reward", help="reward terms for a metrics JSON"), seed=False)
    p.add_argument("metrics", help="metrics JSON file, or - for stdin")
    p.add_argument("--kind", choices=("tm", "gdt", "rmsd", "gdt_rmsd"))
    p.set_defaults(func=cmd_reward)

    p = with_config(sub.add_parser("fold", help="fold a sequence with the configured oracle"), seed=False)
    p.add_argument("sequence", help="sequence letters, or a FASTA path with --fasta")
    p.add_argument("--fasta", action="store_true")
    p.add_argument("--out", help="output PDB path (default: PDB text on stdout)")
    p.set_defaults(func=cmd_fold)

    p = with_config(sub.add_parser("config", help="print the resolved or default configuration"))
    p.add_argument("--defaults", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"rider {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        print(f"rider {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
