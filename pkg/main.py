#!/usr/bin/env python3
"""
Desk-Scale VLA Recipe - Command-Line Entry Point

One binary with subcommands for dataset generation, encoder pretraining,
training, evaluation, probing, codec debugging and full ablation grids.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

import config
from action_codec import (
    ActionVector,
    BinCodecConfig,
    CodecConfig,
    bin_decode,
    bin_encode,
    bin_index,
    bin_token,
    decode_scalar,
    encode_scalar,
)
from checkpoint import checkpoint_id
from cotrain import DATASET_FILES, Trainer, load_encoder, load_policy, pretrain
from datasets import (
    build_dataset_vocab,
    check_vl_samples,
    class_arrays,
    gen_class_dataset,
    gen_robot_dataset,
    gen_vl_dataset,
    read_dataset,
    write_dataset,
)
from db_manager import ResultsDatabase
from encoders import EncoderConfig
from eval_harness import (
    EvalSpec,
    ExpertPolicy,
    ModelPolicy,
    RandomTokenPolicy,
    check_trainability_gate,
    directional_checks,
    eval_suite,
    expert_gate,
    paraphrase_eval,
    probe_model,
    write_report,
)
from exceptions import ConfigError, DatasetFormatError, GateFailure, VLAError
from logger import setup_logging
from utils import config_hash, derive_seed, ensure_directory

logger = logging.getLogger('vla.main')

EXIT_ERROR = 2
EXIT_GATE = 3


def resolve_path(path: Any) -> Path:
    """Relative paths live under the output root (``VLA_OUTPUT_ROOT``)."""
    path = Path(path)
    return path if path.is_absolute() else config.output_root() / path


def _load(args: argparse.Namespace) -> Dict[str, Any]:
    return config.load_config(args.config, args.override, args.seed)


def _data_dir(cfg: Dict[str, Any]) -> Path:
    return resolve_path(cfg["train"]["dataset_dir"])


def _out(args: argparse.Namespace, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    ensure_directory(out)
    return out


def _registry() -> Optional[ResultsDatabase]:
    try:
        ensure_directory(config.output_root())
        return ResultsDatabase(str(config.output_root() / config.REGISTRY_FILE))
    except Exception as e:
        logger.error(f"Results registry unavailable: {e}")
        return None


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate and validate every dataset: robot demos, VL questions, class images."""
    cfg = _load(args)
    out = _out(args, _data_dir(cfg))
    seed = int(cfg["seed"])
    data = cfg["data"]
    jobs = args.jobs or 1
    digest = config_hash(cfg)

    expert_gate(
        config.TASK_KINDS, int(data["gate_episodes"]), derive_seed(seed, "expert-gate"),
        int(data["horizon"]), int(data["max_episode_steps"]), jobs=jobs,
    )

    vocab = build_dataset_vocab(int(cfg["codec"]["num_bins"]))
    robot = gen_robot_dataset(seed, int(data["robot_episodes"]), data["task_mix"], int(data["horizon"]),
                              int(data["max_episode_steps"]), jobs)
    vl = gen_vl_dataset(seed, int(data["vl_samples"]), data["vl_question_kinds"], jobs)
    checks = check_vl_samples(vl)
    classes = gen_class_dataset(seed, int(data["class_samples"]), "class", jobs)
    holdout = gen_class_dataset(seed, int(data["class_holdout_samples"]), "class_holdout", jobs)

    for name, items in (("robot", robot), ("vl", vl), ("class", classes), ("class_holdout", holdout)):
        write_dataset(out / DATASET_FILES[name], items, vocab, digest)
    logger.info(f"Datasets written to {out} (config {digest[:12]}, VL self-check {checks})")
    return 0


# ---------------------------------------------------------------------------
# pretrain / train
# ---------------------------------------------------------------------------

def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load(args)
    target = Path(args.out) if args.out else resolve_path(cfg["train"]["encoder_checkpoint"])
    summary = pretrain(cfg, target, _data_dir(cfg))
    logger.info(f"Pretraining summary: {summary}")
    return 0


def run_training(cfg: Dict[str, Any], run_dir: Path, resume: bool = False):
    data_dir = _data_dir(cfg)
    if not (data_dir / DATASET_FILES["robot"]).is_file():
        raise DatasetFormatError(f"No robot dataset in {data_dir}; run the gen-data command first")
    trainer = Trainer(cfg, run_dir, data_dir, resolve_path(cfg["train"]["encoder_checkpoint"]))
    return trainer.run(resume)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load(args)
    run_dir = _out(args, config.output_root() / "train")
    result = run_training(cfg, run_dir, args.resume)
    db = _registry()
    if db is not None:
        db.add_run("train", str(result.final_checkpoint), checkpoint_id(result.final_checkpoint),
                   config_hash(cfg), int(cfg["seed"]), "trained")
    logger.info(f"Final checkpoint: {result.final_checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# eval / probe
# ---------------------------------------------------------------------------

def _policy(args: argparse.Namespace, cfg: Dict[str, Any]):
    """Returns (policy, config hash, checkpoint id) for the requested policy kind."""
    if args.policy == "expert":
        return ExpertPolicy(int(cfg["policy"]["horizon"])), config_hash(cfg), "expert"
    if args.policy == "random":
        vocab = build_dataset_vocab(int(cfg["codec"]["num_bins"]))
        policy = RandomTokenPolicy(vocab, int(cfg["policy"]["horizon"]), cfg["policy"]["codec_mode"],
                                   CodecConfig(decimals=int(cfg["codec"]["decimals"])))
        return policy, config_hash(cfg), "random"
    if not args.checkpoint:
        raise ConfigError("eval with the model policy needs --checkpoint")
    model, state = load_policy(args.checkpoint)
    codec = CodecConfig(decimals=int(state.config["codec"]["decimals"]))
    return ModelPolicy(model, codec), config_hash(state.config), checkpoint_id(args.checkpoint)


def evaluate(policy, cfg: Dict[str, Any], out: Path, label: str, digest: str, ckpt_id: str,
             paraphrases: bool = True, jobs: Optional[int] = None):
    spec = EvalSpec.from_dict(cfg["eval"], data_seed=int(cfg["seed"]))
    if jobs:
        spec = EvalSpec(spec.tasks, spec.variants, spec.episodes_per_cell, spec.max_steps, spec.seeds,
                        spec.batch_size, jobs)
    success = eval_suite(policy, spec, label=label, config_hash=digest, checkpoint_id=ckpt_id)
    reports: List[Any] = [success]
    para = None
    if paraphrases:
        para = paraphrase_eval(policy, spec.tasks, episodes=spec.episodes_per_cell, seeds=spec.seeds,
                               max_steps=spec.max_steps, label=label, config_hash=digest,
                               checkpoint_id=ckpt_id, batch_size=spec.batch_size)
        reports.append(para)
    write_report(reports, out / "eval.jsonl", "records")
    write_report(reports, out / "eval.txt", "table")
    write_report(reports, out / "eval.csv", "plot")
    return success, para


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = _out(args, config.output_root() / "eval")
    policy, digest, ckpt_id = _policy(args, cfg)
    success, _ = evaluate(policy, cfg, out, args.label or policy.name, digest, ckpt_id, args.paraphrase, args.jobs)
    db = _registry()
    if db is not None:
        run_id = db.add_run(args.label or policy.name, args.checkpoint, ckpt_id, digest, int(cfg["seed"]))
        if run_id is not None:
            db.record_success_report(run_id, success)
    return 0


def probe(model, cfg: Dict[str, Any], label: str, digest: str, ckpt_id: str):
    data_dir = _data_dir(cfg)
    _, train_samples = read_dataset(data_dir / DATASET_FILES["class"])
    _, test_samples = read_dataset(data_dir / DATASET_FILES["class_holdout"])
    encoder_path = resolve_path(cfg["train"]["encoder_checkpoint"])
    pretrained = load_encoder(encoder_path, EncoderConfig.from_dict(cfg["encoder"])) if encoder_path.is_file() else None
    return probe_model(model, class_arrays(train_samples), class_arrays(test_samples), pretrained, label,
                       int(cfg["seed"]), int(cfg["probe"]["max_iter"]), float(cfg["probe"]["c"]), digest, ckpt_id)


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = _out(args, config.output_root() / "probe")
    model, state = load_policy(args.checkpoint)
    report = probe(model, cfg, args.label or "probe", config_hash(state.config), checkpoint_id(args.checkpoint))
    write_report([report], out / "probe.jsonl", "records")
    write_report([report], out / "probe.txt", "table")
    return 0


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------

def cmd_tokenize(args: argparse.Namespace) -> int:
    """Print the codec view of scalar values, or decode token strings back to a value."""
    codec = CodecConfig(decimals=args.decimals)
    bins = BinCodecConfig(num_bins=args.num_bins)
    if args.decode:
        if args.codec == "bin":
            ids = [bin_index(t) for t in args.values]
            print(list(bin_decode(ids, bins).as_tuple()))
        else:
            print(decode_scalar(args.values, codec))
        return 0
    for raw in args.values:
        value = float(raw)
        if args.codec == "bin":
            ids = bin_encode(ActionVector(value, 0.0, 0.0, 0.0, 0.0, 0.0, 0), bins)
            print(f"{raw}: {bin_token(ids[0])}")
        else:
            print(f"{raw}: {' '.join(encode_scalar(value, codec))}")
    return 0


# ---------------------------------------------------------------------------
# run-manifest
# ---------------------------------------------------------------------------

@dataclass
class ArmSpec:
    name: str
    overrides: List[str] = field(default_factory=list)
    role: Optional[str] = None


@dataclass
class ExperimentManifest:
    """Named training arms sharing one base config; each arm writes under its own directory."""

    arms: List[ArmSpec]
    seeds: List[int] = field(default_factory=lambda: [0])
    base_config: Optional[str] = None
    overrides: List[str] = field(default_factory=list)

    def __post_init__(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"Manifest arm names must be unique: {names}")
        if not self.arms:
            raise ConfigError("Manifest lists no arms")

    @classmethod
    def from_yaml(cls, path: Any) -> "ExperimentManifest":
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Cannot read manifest {path}: {e}") from e
        arms = [ArmSpec(a["name"], list(a.get("overrides", [])), a.get("role")) for a in data.get("arms", [])]
        base = data.get("base_config")
        if base is not None and not Path(base).is_absolute():
            base = str(path.parent / base)
        return cls(arms, [int(s) for s in data.get("seeds", [0])], base, list(data.get("overrides", [])))

    def arm_dir(self, out: Path, arm: ArmSpec, seed: int) -> Path:
        return out / arm.name / f"seed_{seed}"


def cmd_run_manifest(args: argparse.Namespace) -> int:
    """Train, evaluate and probe every arm for every seed, then run the directional checks."""
    manifest = ExperimentManifest.from_yaml(args.manifest)
    out = _out(args, config.output_root() / "manifest")
    db = _registry()
    success_by_role: Dict[str, list] = {}
    para_by_role: Dict[str, list] = {}
    probes_by_role: Dict[str, list] = {}

    for seed in manifest.seeds:
        for arm in manifest.arms:
            cfg = config.load_config(args.config or manifest.base_config,
                                     [*manifest.overrides, *arm.overrides, *args.override], seed)
            run_dir = manifest.arm_dir(out, arm, seed)
            logger.info(f"Arm {arm.name} (seed {seed}) -> {run_dir}")
            run_id = db.add_run(arm.name, None, "", config_hash(cfg), seed) if db else None
            try:
                result = run_training(cfg, run_dir, resume=args.resume)
                model, _ = load_policy(result.final_checkpoint)
                digest, ckpt_id = config_hash(cfg), checkpoint_id(result.final_checkpoint)
                policy = ModelPolicy(model, CodecConfig(decimals=int(cfg["codec"]["decimals"])))
                success, para = evaluate(policy, cfg, run_dir, arm.name, digest, ckpt_id, True, args.jobs)
                probe_report = probe(model, cfg, arm.name, digest, ckpt_id)
                write_report([probe_report], run_dir / "probe.jsonl", "records")
            except VLAError:
                if db and run_id is not None:
                    db.update_run_status(run_id, "failed")
                raise
            if db and run_id is not None:
                db.record_success_report(run_id, success)
                db.record_probe_report(run_id, probe_report)
            if arm.role:
                success_by_role.setdefault(arm.role, []).append(success)
                para_by_role.setdefault(arm.role, []).append(para)
                probes_by_role.setdefault(arm.role, []).append(probe_report)
            if arm.role == "full":
                check_trainability_gate(success)

    checks = directional_checks(success_by_role, para_by_role, probes_by_role)
    with open(out / "checks.json", "w", encoding="utf-8") as fh:
        json.dump([c.__dict__ for c in checks], fh, indent=2, sort_keys=True)
    failed = [c.name for c in checks if c.passed is False]
    if failed:
        raise GateFailure(f"directional checks failed: {failed}", {"failed": failed})
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML key-value config file")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--out", help="Output directory (default: under the output root)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="Config override, repeatable; wins over the config file")
    common.add_argument("--jobs", type=int, default=None, help="Worker threads for generation and eval")
    common.add_argument("--verbose", action="store_true", help="Debug output on the console")

    parser = argparse.ArgumentParser(prog="vla", description=config.APP_NAME)
    parser.add_argument("--version", action="version", version=f"{config.APP_NAME} {config.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate and validate datasets")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain the shared image encoder")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="Train one arm")
    p.add_argument("--resume", action="store_true", help="Continue from last.ckpt in the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint or a stand-in policy")
    p.add_argument("--checkpoint", help="Policy checkpoint (model policy)")
    p.add_argument("--policy", choices=("model", "expert", "random"), default="model")
    p.add_argument("--paraphrase", action="store_true", help="Also run the paired paraphrase evaluation")
    p.add_argument("--label", help="Report label")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", parents=[common], help="Linear-probe the encoders of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", help="Report label")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("tokenize", help="Show codec tokens of values, or decode tokens")
    p.add_argument("values", nargs="+")
    p.add_argument("--decode", action="store_true", help="Treat the arguments as tokens")
    p.add_argument("--codec", choices=("string", "bin"), default="string")
    p.add_argument("--decimals", type=int, default=config.ACTION_DECIMALS)
    p.add_argument("--num-bins", type=int, default=256)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("run-manifest", parents=[common], help="Run every arm of an ablation manifest")
    p.add_argument("manifest", help="Manifest YAML")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_run_manifest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    if args.command != "tokenize":
        setup_logging(config.output_root() / config.LOG_DIR,
                      logging.DEBUG if getattr(args, "verbose", False) else logging.INFO)
    try:
        return args.func(args)
    except GateFailure as e:
        logger.error(f"Gate failed: {e}")
        print(f"Gate failed: {e} {e.diagnostics}", file=sys.stderr)
        return EXIT_GATE
    except VLAError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR

if __name__ == "__main__":
    sys.exit(main())
