"""Command line entry point: ``cimseg {synth,agpl,run,eval,report}``.

Exit codes: 0 success, 1 bad config or malformed input file, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _stringio
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agpl import assign_precomputed_labels, build_clusters, compute_support_masks
from .cim import CimConfig, PseudoGroundTruth
from .evaluation import THRESHOLDS, evaluate, predictions_from_scores
from .io import (MANIFEST_FILE, PEAKS_FILE, PROPOSALS_FILE, SCENE_FILE, SchemaError, load_dataset,
                 load_predictions, read_json, sha256_file, write_json)
from .seeding import derive_seed, rng_for
from .synth import (ProposalRecipe, RunConfig, SceneConfig, SceneGenerationError, ScorerConfig,
                    branch_mining_stats, generate_peaks, generate_proposals, generate_scene,
                    proposals_to_dict, run_refinement)

log = logging.getLogger("cimseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2
RUN_FILES = ("trajectory.json", "predictions.json", "losses.json")


class ConfigError(ValueError):
    pass


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


CONFIG_KEYS = (CimConfig.keys() | _field_names(ScorerConfig) | _field_names(SceneConfig)
               | _field_names(ProposalRecipe) | {"alpha", "sample", "image_score_mode", "seed"})


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return data


def _build(cls, data: dict):
    try:
        return cls.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def _seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return seed


def _manifest(command: str, config: dict, seeds: dict, inputs: dict[str, Path],
              outputs: dict[str, str], **extra) -> dict:
    return {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
        "outputs": dict(sorted(outputs.items())),
        "versions": {"cimseg": __version__, "numpy": np.__version__},
        **extra,
    }


def _dataset_inputs(dataset: Path) -> dict[str, Path]:
    return {name: dataset / name for name in (SCENE_FILE, PROPOSALS_FILE, PEAKS_FILE)}


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    scene_cfg = _build(SceneConfig, cfg)
    recipe = _build(ProposalRecipe, cfg)
    try:
        scene = generate_scene(scene_cfg, rng_for(seed, "scene"))
    except SceneGenerationError as exc:
        raise ConfigError(str(exc)) from None
    proposals, info = generate_proposals(scene, recipe, rng_for(seed, "proposals"))
    peaks = generate_peaks(scene, proposals, info)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digests = {
        SCENE_FILE: write_json(out / SCENE_FILE, scene.to_dict()),
        PROPOSALS_FILE: write_json(out / PROPOSALS_FILE, proposals_to_dict(proposals, info)),
        PEAKS_FILE: write_json(out / PEAKS_FILE, [p.to_dict() for p in peaks]),
    }
    manifest = _manifest("synth", {**asdict(scene_cfg), **asdict(recipe)},
                         {"root": seed, "scene": derive_seed(seed, "scene"),
                          "proposals": derive_seed(seed, "proposals")},
                         {}, digests,
                         summary={"instances": len(scene.instances), "proposals": len(proposals)})
    write_json(out / MANIFEST_FILE, manifest)
    print(f"wrote {len(scene.instances)} instances, {len(proposals)} proposals to {out}")
    return EXIT_OK


def cmd_agpl(args) -> int:
    dataset = Path(args.dataset)
    scene, proposals, _, peaks = load_dataset(dataset)
    supports = compute_support_masks(proposals, peaks)
    labels = assign_precomputed_labels(proposals, supports, scene.num_categories)
    clusters = build_clusters(labels)
    out = Path(args.out) if args.out else dataset / "labels.json"
    write_json(out, {
        "num_proposals": len(proposals),
        "labels": [[int(i), int(c)] for i, c in zip(*np.nonzero(labels.y_hat0))],
        "assigned_support": labels.assigned_support,
        "supports": [{"peak": s.peak_index, "cat": s.category, "score": s.peak_score,
                      "supporters": s.supporter_count, "mask": s.mask.to_dict()} for s in supports],
        "clusters": [{"members": list(cl.members), "cat": cl.category} for cl in clusters],
    })
    print(f"{len(supports)} supports, {int(labels.foreground.sum())} foreground, "
          f"{int(labels.background.sum())} background proposals -> {out}")
    return EXIT_OK


def _run_config(args, cfg: dict) -> RunConfig:
    cfg = dict(cfg)
    if args.branches is not None:
        cfg.pop("K", None)
        cfg["branches"] = args.branches
    if args.sample is not None:
        cfg["sample"] = args.sample
    run_cfg = _build(RunConfig, cfg)
    if run_cfg.image_score_mode not in ("clamp", "softmax"):
        raise ConfigError(f"image_score_mode must be 'clamp' or 'softmax', got {run_cfg.image_score_mode!r}")
    return run_cfg


def cmd_run(args) -> int:
    dataset = Path(args.dataset)
    if args.replay:
        replay = read_json(args.replay)
        if not isinstance(replay, dict) or replay.get("command") != "run":
            raise SchemaError(f"{args.replay}: not a run manifest")
        cfg, args.seed = dict(replay["config"]), replay["seeds"]["root"]
    else:
        cfg = load_config(args.config)
    seed = _seed(args, cfg)
    run_cfg = _run_config(args, cfg)
    scene, proposals, _, peaks = load_dataset(dataset)

    traj = run_refinement(scene, proposals, peaks, run_cfg, seed)
    preds = predictions_from_scores(traj.fused, proposals)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digests = {
        "trajectory.json": write_json(out / "trajectory.json", traj.to_dict()),
        "predictions.json": write_json(out / "predictions.json", [p.to_dict() for p in preds]),
        "losses.json": write_json(out / "losses.json", traj.loss.to_dict()),
    }
    summary = [{"branch": b.k, "seeds": sum(len(v) for v in b.seeds.values()),
                "pseudo_gt": len(b.pseudo_gt), "foreground": b.labels.fg_count,
                "background": b.labels.bg_count, "loss": b.loss.total} for b in traj.branches]
    manifest = _manifest("run", run_cfg.to_dict(),
                         {"root": seed, "scorer": derive_seed(seed, "scorer"),
                          "sampler": derive_seed(seed, "sampler")},
                         _dataset_inputs(dataset), digests, branches=summary)
    write_json(out / MANIFEST_FILE, manifest)
    print(f"{len(traj.branches)} branches, {len(preds)} predictions, "
          f"L_total {traj.loss.l_total:.6f} -> {out}")

    if args.replay:
        expected = replay.get("outputs", {})
        bad = sorted(k for k, v in digests.items() if expected.get(k) != v)
        if bad:
            print(f"replay mismatch in {bad}", file=sys.stderr)
            return EXIT_CONFIG
        print("replay verified: all output digests match")
    return EXIT_OK


def _curves_csv(result) -> str:
    buf = _stringio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "category", "rank", "recall", "precision"])
    for t, c, r, rec, prec in result.curve_rows():
        w.writerow([t, c, r, f"{rec:.6f}", f"{prec:.6f}"])
    return buf.getvalue()


def cmd_eval(args) -> int:
    preds = load_predictions(Path(args.predictions))
    scene, *_ = load_dataset(Path(args.dataset))
    result = evaluate(preds, scene.ground_truth(), THRESHOLDS)
    write_json(Path(args.out), result.to_dict())
    if args.curves:
        Path(args.curves).write_text(_curves_csv(result))
    print(" ".join(f"{k}={v:.4f}" for k, v in result.to_dict()["mAP"].items()))
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_branch_quality, plot_losses, plot_pr_curves

    run_dir, out = Path(args.run_dir), Path(args.out)
    scene, proposals, _, _ = load_dataset(Path(args.dataset))
    traj = read_json(run_dir / "trajectory.json")
    losses = read_json(run_dir / "losses.json")
    preds = load_predictions(run_dir / "predictions.json")
    out.mkdir(parents=True, exist_ok=True)

    try:
        rows = [branch_mining_stats(b["branch"], {int(c): v for c, v in b["seeds"].items()},
                                    PseudoGroundTruth.from_dict(b["pseudo_gt"]), scene, proposals)
                for b in traj["branches"]]
        for row, loss in zip(rows, traj["branches"]):
            row["loss"] = loss["loss"]["total"]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"{run_dir / 'trajectory.json'}: {exc!r}") from None

    result = evaluate(preds, scene.ground_truth(), THRESHOLDS)
    write_json(out / "eval.json", result.to_dict())
    write_json(out / "loss_report.json", losses)
    (out / "pr_curves.csv").write_text(_curves_csv(result))

    cols = ["branch", "seed_count", "pseudo_gt_count", "seed_iou", "pseudo_gt_iou", "loss"]
    buf = _stringio.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    table = buf.getvalue()
    (out / "branch_stats.csv").write_text(table)

    plot_branch_quality(rows, out / "branch_quality.png")
    plot_pr_curves(result.curves, out / "pr_curves.png")
    plot_losses(losses, out / "losses.png")

    sys.stdout.write(table)
    print(",".join(f"{k}={v:.4f}" for k, v in result.to_dict()["mAP"].items()))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cimseg", description="Pseudo-label mining for weakly supervised "
                                "instance segmentation on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--config", type=Path, help="flat JSON config")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("agpl", help="pre-computed labels and proposal clusters from peaks")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, help="default: DATASET/labels.json")
    s.set_defaults(func=cmd_agpl)

    s = sub.add_parser("run", help="run the refinement branches and write predictions")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--branches", "-K", type=int)
    s.add_argument("--sample", action=argparse.BooleanOptionalAction, default=None,
                   help="anti-noise resampling of pseudo ground truth (default on)")
    s.add_argument("--seed", type=int)
    s.add_argument("--replay", type=Path, metavar="MANIFEST",
                   help="reuse config and seed from a run manifest and verify output digests")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="mask mAP of predictions against a dataset's ground truth")
    s.add_argument("predictions", type=Path)
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--curves", type=Path, help="optional PR-curve CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="tables and figures for a run directory")
    s.add_argument("run_dir", type=Path)
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
