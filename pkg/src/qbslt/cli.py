"""Command line entry point: gen-data, pretrain, train, evaluate, ablate, export-heatmap."""

from __future__ import annotations

import argparse
import hashlib
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from .config import ConfigError, RunConfig
from .data import DataError, Sample
from .metrics import ScoreReport, score
from .model import SLTModel
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .ssaw import gate_summary
from .stage1 import NumericError, train_stage1
from .stage2 import evaluate_model, fusion_for_sample, references, train_stage2, uses_gate

log = logging.getLogger("qbslt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_KEYS = ("B1", "B2", "B3", "B4", "ROUGE")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.resolve(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(config_mod.serialize(cfg), encoding="utf-8")
    return run_dir


def _write_manifest(run_dir: Path, cfg: RunConfig, entries: list[tuple[str, str]]) -> None:
    lines = [f"config_sha256={config_mod.digest(cfg)}", f"seed={cfg.seed}"]
    lines += [f"{k}={v}" for k, v in entries]
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_split(cfg: RunConfig, split: str) -> list[Sample]:
    return data_mod.load(cfg.resolve(cfg.corpus_dir) / f"{split}.txt")


def _model_config(cfg: RunConfig):
    header = data_mod.read_header(cfg.resolve(cfg.corpus_dir) / "train.txt")
    return cfg.model(header["vocab_size"], header["frame_dim"])


def _load_model(cfg: RunConfig, path: str) -> SLTModel:
    if not path:
        raise ConfigError("no checkpoint path configured")
    model = SLTModel(_model_config(cfg))
    model.load_state_dict(load_checkpoint(cfg.resolve(path)))
    model.eval()
    return model


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    out = cfg.resolve(cfg.corpus_dir)
    try:
        data_mod.write_corpus(out, cfg.generator())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"wrote corpus to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    run_dir = _prepare_run_dir(cfg)
    train = _load_split(cfg, "train")
    model, history = train_stage1(train, _model_config(cfg), cfg.stage1(), log_path=run_dir / "stage1_loss.log")
    ckpt = run_dir / "stage1.ckpt"
    save_checkpoint(ckpt, model.state_dict())
    _write_manifest(run_dir, cfg, [
        ("stage", "pretrain"),
        ("checkpoint_sha256", _sha256(ckpt)),
        ("final_L_sim", f"{history[-1][1]:.10f}"),
        ("final_L_R", f"{history[-1][2]:.10f}"),
    ])
    print(f"stage-1 checkpoint: {ckpt}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    run_dir = _prepare_run_dir(cfg)
    lineage = []
    if cfg.cold_start:
        state = None
        lineage.append(("cold_start", "true"))
    else:
        if not cfg.stage1_checkpoint:
            raise ConfigError("stage1_checkpoint is required unless cold_start = true")
        path = cfg.resolve(cfg.stage1_checkpoint)
        state = load_checkpoint(path)
        lineage += [("cold_start", "false"), ("stage1_checkpoint", cfg.stage1_checkpoint),
                    ("stage1_checkpoint_sha256", _sha256(path))]
    result = train_stage2(_load_split(cfg, "train"), state, _model_config(cfg), cfg.stage2(),
                          dev=_load_split(cfg, "dev"), log_path=run_dir / "stage2_loss.log")
    model = result.model
    if state is not None and not result.reuse_digests_match:
        raise CheckpointError("reused parameters do not match the stage-1 checkpoint")
    ckpt = run_dir / "stage2.ckpt"
    save_checkpoint(ckpt, model.state_dict())
    test = _load_split(cfg, "test")
    report, _ = evaluate_model(model, test, cfg.fusion, cfg.max_len)
    lineage += [("stage", "train"), ("fusion", cfg.fusion), ("reused_parameters", str(len(result.reused))),
                ("best_epoch", str(result.best_epoch)), ("checkpoint_sha256", _sha256(ckpt))]
    lineage += [(f"test_{k}", f"{v:.10f}") for k, v in report.as_dict().items()]
    _write_manifest(run_dir, cfg, lineage)
    print(report.table())
    return EXIT_OK


def _read_token_lines(path: Path) -> list[list[str]]:
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    return [line.split() for line in path.read_text(encoding="utf-8").splitlines()]


def cmd_evaluate(cfg: RunConfig) -> int:
    run_dir = _prepare_run_dir(cfg)
    if cfg.hyps_path:
        hyps = _read_token_lines(cfg.resolve(cfg.hyps_path))
        if cfg.refs_path:
            refs = _read_token_lines(cfg.resolve(cfg.refs_path))
        else:
            refs = [[str(t) for t in r] for r in references(_load_split(cfg, cfg.split))]
    else:
        samples = _load_split(cfg, cfg.split)
        ckpt = cfg.resolve(cfg.checkpoint)
        model = _load_model(cfg, cfg.checkpoint)
        report, hyp_ids = evaluate_model(model, samples, cfg.fusion, cfg.max_len)
        hyps = [[str(t) for t in h] for h in hyp_ids]
        refs = [[str(t) for t in r] for r in references(samples)]
        (run_dir / "hyps.txt").write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
        _write_manifest(run_dir, cfg, [("stage", "evaluate"), ("checkpoint", cfg.checkpoint),
                                       ("checkpoint_sha256", _sha256(ckpt)), ("split", cfg.split)]
                        + [(k, f"{v:.10f}") for k, v in report.as_dict().items()])
    try:
        report = score(hyps, refs)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    (run_dir / "metrics.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


def ablation_table(results: dict[str, list[ScoreReport]]) -> tuple[str, list[str], dict[str, dict[str, float]]]:
    """Per-arm medians (x100) and pairwise deltas; returns (table, metric lines, medians)."""
    medians = {arm: {k: 100 * statistics.median(getattr(r, k) for r in reps) for k in METRIC_KEYS}
               for arm, reps in results.items()}
    arms = list(results)
    header = f"{'arm':<22}" + "".join(f"{k:>8}" for k in METRIC_KEYS)
    rows = [header]
    lines = []
    for arm in arms:
        rows.append(f"{arm:<22}" + "".join(f"{medians[arm][k]:8.2f}" for k in METRIC_KEYS))
        lines += [f"arm.{arm}.{k}={medians[arm][k]:.6f}" for k in METRIC_KEYS]
    for i, a in enumerate(arms):
        for b in arms[i + 1:]:
            name = f"{a}-{b}"
            rows.append(f"{'delta ' + name:<22}" + "".join(f"{medians[a][k] - medians[b][k]:8.2f}"
                                                           for k in METRIC_KEYS))
            lines += [f"delta.{name}.{k}={medians[a][k] - medians[b][k]:.6f}" for k in METRIC_KEYS]
    return "\n".join(rows), lines, medians


def run_ablation(cfg: RunConfig, on_arm=None) -> dict[str, list[ScoreReport]]:
    """Train every arm for every seed on one shared corpus.

    Each seed's stage-1 checkpoint is trained once and shared by all arms.
    ``on_arm(arm, seed, model, test_samples)`` is called after each arm.
    """
    train, dev, test = (_load_split(cfg, s) for s in ("train", "dev", "test"))
    results: dict[str, list[ScoreReport]] = {arm: [] for arm in cfg.arm_list()}
    for seed in cfg.seed_list():
        seeded = cfg.replace(seed=seed)
        mcfg = _model_config(seeded)
        stage1_model, _ = train_stage1(train, mcfg, seeded.stage1())
        state = stage1_model.state_dict()
        for arm in cfg.arm_list():
            arm_cfg = seeded.replace(fusion=arm)
            result = train_stage2(train, state, mcfg, arm_cfg.stage2(), dev=dev)
            report, _ = evaluate_model(result.model, test, arm, cfg.max_len)
            log.info("seed %d arm %s: B4 %.2f", seed, arm, 100 * report.B4)
            results[arm].append(report)
            if on_arm is not None:
                on_arm(arm, seed, result.model, test)
    return results


def cmd_ablate(cfg: RunConfig) -> int:
    run_dir = _prepare_run_dir(cfg)
    results = run_ablation(cfg)
    table, lines, _ = ablation_table(results)
    per_seed = [f"seed_run.{arm}.{i}.{k}={getattr(r, k):.10f}"
                for arm, reps in results.items() for i, r in enumerate(reps) for k in METRIC_KEYS]
    (run_dir / "ablation.txt").write_text("\n".join(lines + per_seed) + "\n", encoding="utf-8")
    (run_dir / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError("not a binary portable graymap")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def heatmap_arrays(gate: np.ndarray, boundary: int) -> np.ndarray:
    """Grayscale image: question rows, one black separator row, then video rows."""
    pixels = np.rint(np.clip(gate, 0.0, 1.0) * 255).astype(np.uint8)
    sep = np.zeros((1, gate.shape[1]), dtype=np.uint8)
    return np.concatenate([pixels[:boundary], sep, pixels[boundary:]], axis=0)


def export_heatmap(model: SLTModel, sample: Sample, vocab: list[str] | None, out_dir: Path,
                   mode: str = "ssaw") -> dict[str, float]:
    out = fusion_for_sample(model, sample, mode)
    gate = out.gate.data
    m = int(out.boundary)
    per_row = gate.mean(axis=1)
    rows = ["row,segment,token,informative,mean_gate"]
    for i in range(m):
        tok = sample.question.ids[i]
        label = vocab[tok] if vocab else str(tok)
        rows.append(f"{i},question,{label},{int(sample.informative_mask[i])},{per_row[i]:.10f}")
    rows.append(f"{m},boundary,,,")
    for j in range(gate.shape[0] - m):
        rows.append(f"{m + 1 + j},video,t{j},,{per_row[m + j]:.10f}")
    (out_dir / "heatmap.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_pgm(out_dir / "heatmap.pgm", heatmap_arrays(gate, m))
    return gate_summary(out, sample.informative_mask, sample.question.ids)


def cmd_export_heatmap(cfg: RunConfig) -> int:
    run_dir = _prepare_run_dir(cfg)
    if not uses_gate(cfg.fusion):
        raise ConfigError(f"fusion mode {cfg.fusion!r} has no gate to export")
    samples = _load_split(cfg, cfg.split)
    match = [s for s in samples if s.id == cfg.sample_id]
    if not match:
        raise DataError(f"unknown sample id {cfg.sample_id!r} in split {cfg.split}")
    model = _load_model(cfg, cfg.checkpoint)
    vocab_path = cfg.resolve(cfg.corpus_dir) / "vocab.txt"
    vocab = data_mod.load_vocab(vocab_path) if vocab_path.is_file() else None
    summary = export_heatmap(model, match[0], vocab, run_dir, cfg.fusion)
    for k, v in summary.items():
        print(f"{k}={v:.6f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-heatmap": cmd_export_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbslt", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value configuration file (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="global seed, overrides the config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = config_mod.apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: NumericError: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
