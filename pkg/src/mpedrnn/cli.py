"""Command-line entry point: gen, track, train, search, score, eval, report.

Every subcommand takes ``--config FILE`` (flat ``key = value``), repeated
``--set KEY=VALUE`` overrides, ``--seed`` and ``--out``, and writes a JSON
manifest beside its outputs. Exit codes: 0 success, 1 internal failure,
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_overrides, resolve
from .datagen import ANOMALY_KINDS, AnomalySpec, SceneSpec, generate_corpus, write_corpus
from .model import Checkpoint, ModelConfig
from .scoring import (
    normality_report,
    read_mask,
    read_scores,
    roc_auc,
    score_skeletons,
    score_videos,
    window_from,
    write_scores,
)
from .tracking import DEFAULT_GATE, DEFAULT_MAX_GAP, track
from .training import (
    DEFAULT_FRAME_SIZE,
    LossWeights,
    TrainConfig,
    WindowConfig,
    capacity_search,
    segment_trajectory,
    train,
)
from .trajectory import FormatError, load_trajectories, read_detections, save_trajectories

log = logging.getLogger("mpedrnn")


class UsageError(ValueError):
    """Bad input or configuration; maps to exit code 2."""


SCENE_DEFAULTS: dict[str, Any] = {
    **asdict(SceneSpec()),
    "videos": 1,
    "length": 600,
    "anomalies_per_video": 0,
    "prefix": "video",
}

TRACK_DEFAULTS: dict[str, Any] = {"gate": DEFAULT_GATE, "max_gap": DEFAULT_MAX_GAP, "seed": 0}

TRAIN_DEFAULTS: dict[str, Any] = {
    "T": 12, "s": 1, "P": 6, "H": 16, "M": 8,
    "lr": 1e-3, "batch": 64, "epochs": 100, "patience": 10, "split": 0.2, "seed": 0,
    "lambda_g": 1.0, "lambda_l": 1.0, "lambda_p": 1.0,
    "frame_width": DEFAULT_FRAME_SIZE[0], "frame_height": DEFAULT_FRAME_SIZE[1],
    "tolerance": 0.05,
}

SCORE_DEFAULTS: dict[str, Any] = {"stride": 1, "seed": 0}
EVAL_DEFAULTS: dict[str, Any] = {"seed": 0}
REPORT_DEFAULTS: dict[str, Any] = {"stride": 0, "seed": 0}  # stride 0 = one report per T frames


# ---------------------------------------------------------------------------
# helpers


def _config(args: argparse.Namespace, defaults: dict[str, Any]) -> dict[str, Any]:
    layers = []
    if args.config is not None:
        layers.append(load_config(args.config))
    layers.append(parse_overrides(args.set or []))
    if args.seed is not None:
        layers.append({"seed": args.seed})
    return resolve(defaults, *layers)


def _need_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {path}: {e.strerror or e}") from None
    probe = path / ".write-test"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory {path} is not writable: {e.strerror or e}") from None
    return path


def _writable_file(path: Path) -> Path:
    _writable_dir(path.parent if str(path.parent) else Path("."))
    if path.is_dir():
        raise UsageError(f"output path {path} is a directory")
    return path


def _input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def _manifest(path: Path, command: str, config: dict, inputs: dict, outputs: dict) -> None:
    doc = {
        "subcommand": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": config.get("seed"),
        "version": __version__,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(_input(path))
    except (json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"{path}: not a readable checkpoint ({e})") from None


def _parse_anomaly(text: str) -> tuple[int, AnomalySpec]:
    """``[VIDEO/]KIND:PERSON:START-END[:MAGNITUDE]``, e.g. ``run:2:50-70``."""
    video = 0
    body = text
    if "/" in text:
        head, body = text.split("/", 1)
        video = int(head)
    parts = body.split(":")
    if len(parts) not in (3, 4) or "-" not in parts[2]:
        raise UsageError(f"anomaly {text!r} must look like [VIDEO/]KIND:PERSON:START-END[:MAGNITUDE]")
    if parts[0] not in ANOMALY_KINDS:
        raise UsageError(f"anomaly kind {parts[0]!r} not in {ANOMALY_KINDS}")
    try:
        start, end = (int(x) for x in parts[2].split("-", 1))
        mag = float(parts[3]) if len(parts) == 4 else None
        return video, AnomalySpec(parts[0], int(parts[1]), start, end, mag)
    except ValueError as e:
        raise UsageError(f"anomaly {text!r}: {e}") from None


def _write_log(path: Path, rows: Sequence[dict]) -> None:
    cols = ["epoch", "train_loss", "val_loss", "Lg", "Ll", "Lp"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([int(r["epoch"])] + [repr(float(r[c])) for c in cols[1:]])


def _train_parts(cfg: dict) -> tuple[ModelConfig, TrainConfig, WindowConfig, LossWeights, float]:
    window = WindowConfig(cfg["T"], cfg["s"], cfg["P"])
    model_cfg = ModelConfig(hidden=cfg["H"], message=cfg["M"], T=cfg["T"], P=cfg["P"])
    train_cfg = TrainConfig(cfg["lr"], cfg["batch"], cfg["epochs"], cfg["patience"], cfg["split"], cfg["seed"])
    weights = LossWeights(cfg["lambda_g"], cfg["lambda_l"], cfg["lambda_p"])
    return model_cfg, train_cfg, window, weights, float(np.hypot(cfg["frame_width"], cfg["frame_height"]))


def _progress(row: dict) -> None:
    log.info("epoch %d  train %.6g  val %.6g", row["epoch"], row["train_loss"], row["val_loss"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _config(args, SCENE_DEFAULTS)
    out = _writable_dir(_need_out(args))
    scene_keys = set(asdict(SceneSpec()))
    scene = SceneSpec(**{k: v for k, v in cfg.items() if k in scene_keys})
    explicit: dict[int, list[AnomalySpec]] = {}
    for text in args.anomaly or []:
        video, spec = _parse_anomaly(text)
        if not 0 <= video < cfg["videos"]:
            raise UsageError(f"anomaly {text!r} targets video {video}, but only {cfg['videos']} are generated")
        explicit.setdefault(video, []).append(spec)
    videos = generate_corpus(scene, cfg["videos"], cfg["length"], cfg["anomalies_per_video"],
                             explicit, cfg["prefix"])
    det, mask = write_corpus(out, videos)
    cfg["anomalies"] = [f"{v.video_id}/{a.kind}:{a.person}:{a.start}-{a.end}:{a.factor}"
                        for v in videos for a in v.anomalies]
    _manifest(out / "manifest.json", "gen", cfg, {}, {"detections": det, "mask": mask})
    print(f"wrote {len(videos)} video(s) to {out}")
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    cfg = _config(args, TRACK_DEFAULTS)
    src = _input(args.detections)
    out = _writable_file(_need_out(args))
    trajs = track(read_detections(src), gate=cfg["gate"], max_gap=cfg["max_gap"])
    save_trajectories(out, trajs)
    _manifest(_file_manifest(out), "track", cfg, {"detections": src}, {"trajectories": out})
    print(f"{len(trajs)} trajectories -> {out}")
    return 0


def _load_corpus(path: str):
    trajs = load_trajectories(_input(path))
    if not trajs:
        raise UsageError(f"{path}: no trajectories")
    return trajs


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args, TRAIN_DEFAULTS)
    out = _writable_dir(_need_out(args))
    corpus = _load_corpus(args.trajectories)
    init = _load_checkpoint(args.resume) if args.resume else None
    model_cfg, train_cfg, window, weights, scale = _train_parts(cfg)
    res = train(corpus, model_cfg, train_cfg, window, weights, scale, progress=_progress, init=init)
    ckpt, log_path = out / "checkpoint.json", out / "train_log.csv"
    res.checkpoint.save(ckpt)
    _write_log(log_path, res.log)
    inputs = {"trajectories": args.trajectories}
    if args.resume:
        inputs["resume"] = args.resume
    _manifest(out / "manifest.json", "train", cfg, inputs, {"checkpoint": ckpt, "log": log_path})
    print(f"best validation loss {res.best_val:.6g} -> {ckpt}")
    return 0


def _ladder(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--ladder must be comma-separated integers, got {text!r}") from None


def cmd_search(args: argparse.Namespace) -> int:
    cfg = _config(args, TRAIN_DEFAULTS)
    out = _writable_dir(_need_out(args))
    corpus = _load_corpus(args.trajectories)
    ladder = _ladder(args.ladder)
    model_cfg, train_cfg, window, weights, scale = _train_parts(cfg)

    def trainer(*a, **kw):
        return train(*a, progress=_progress, **kw)

    res = capacity_search(corpus, ladder, model_cfg, train_cfg, window, weights, scale,
                          cfg["tolerance"], trainer=trainer)
    table = out / "capacity.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["H", "best_val", "selected"])
        for h, loss in res.losses:
            w.writerow([h, repr(float(loss)), int(h == res.selected)])
    outputs: dict[str, Any] = {"capacity": table}
    for h, r in res.results.items():
        p = out / f"train_log_H{h}.csv"
        _write_log(p, r.log)
        outputs[f"log_H{h}"] = p
    ckpt = out / "checkpoint.json"
    res.results[res.selected].checkpoint.save(ckpt)
    outputs["checkpoint"] = ckpt
    cfg["ladder"] = ladder
    cfg["selected"] = res.selected
    _manifest(out / "manifest.json", "search", cfg, {"trajectories": args.trajectories}, outputs)
    for h, loss in res.losses:
        print(f"H={h} best_val={loss:.6g}")
    print(f"selected H={res.selected}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _config(args, SCORE_DEFAULTS)
    out = _writable_file(_need_out(args))
    ckpt = _load_checkpoint(args.checkpoint)
    trajs = load_trajectories(_input(args.trajectories))
    lengths = None
    if args.mask:
        lengths = {m.video_id: len(m.labels) for m in read_mask(_input(args.mask))}
    scores = score_skeletons(trajs, ckpt, window_from(ckpt, cfg["stride"]))
    write_scores(out, score_videos(scores, lengths))
    inputs = {"trajectories": args.trajectories, "checkpoint": args.checkpoint}
    if args.mask:
        inputs["mask"] = args.mask
    _manifest(_file_manifest(out), "score", cfg, inputs, {"scores": out})
    print(f"scored {len(trajs)} trajectories -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args, EVAL_DEFAULTS)
    series = read_scores(_input(args.scores))
    masks = read_mask(_input(args.mask))
    auc = roc_auc(series, masks)
    print(f"AUC {auc:.4f}")
    if args.out is not None:
        out = _writable_file(Path(args.out))
        out.write_text(json.dumps({"auc": auc}, sort_keys=True) + "\n")
        _manifest(_file_manifest(out), "eval", cfg, {"scores": args.scores, "mask": args.mask},
                  {"report": out})
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _config(args, REPORT_DEFAULTS)
    out = _writable_dir(_need_out(args))
    ckpt = _load_checkpoint(args.checkpoint)
    trajs = load_trajectories(_input(args.trajectories))
    if args.video is not None:
        trajs = [t for t in trajs if t.video_id == args.video]
    if args.person is not None:
        trajs = [t for t in trajs if t.person_id == args.person]
    window = window_from(ckpt)
    stride = cfg["stride"] or window.T
    reports = []
    for tr in trajs:
        if args.offset is not None:
            offsets = [args.offset]
        else:
            offsets = [s.offset for s in segment_trajectory(tr, WindowConfig(window.T, stride, window.P))]
        reports.extend(normality_report(tr, o, ckpt, window) for o in offsets)
    jsonl, errors = out / "reports.jsonl", out / "errors.csv"
    with open(jsonl, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r) + "\n")
    with open(errors, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "person_id", "begin", "frame", "phase", "global", "local", "perceptual"])
        for r in reports:
            for f in r["frames"]:
                e = f["error"]
                w.writerow([r["video_id"], r["person_id"], r["begin"], f["frame"], f["phase"],
                            repr(e["global"]), repr(e["local"]), repr(e["perceptual"])])
    inputs = {"trajectories": args.trajectories, "checkpoint": args.checkpoint}
    _manifest(out / "manifest.json", "report", cfg, inputs, {"reports": jsonl, "errors": errors})
    print(f"{len(reports)} segment report(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="mpedrnn", description="Skeleton-trajectory anomaly detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable[[argparse.Namespace], int], help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic walker corpus (detections.jsonl, mask.csv)")
    sp.add_argument("--anomaly", action="append", metavar="[VIDEO/]KIND:PERSON:START-END[:MAG]",
                    help="inject an anomaly; kinds: " + ", ".join(ANOMALY_KINDS))

    sp = add("track", cmd_track, "link per-frame detections into trajectories")
    sp.add_argument("detections")

    sp = add("train", cmd_train, "train a model on normal trajectories")
    sp.add_argument("trajectories")
    sp.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")

    sp = add("search", cmd_search, "capacity search over a descending ladder of hidden sizes")
    sp.add_argument("trajectories")
    sp.add_argument("--ladder", default="64,32,16,8", help="comma-separated, strictly descending")

    sp = add("score", cmd_score, "per-frame anomaly scores")
    sp.add_argument("trajectories")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mask", help="mask CSV; fixes each video's frame count")

    sp = add("eval", cmd_eval, "frame-level ROC AUC of scores against a mask")
    sp.add_argument("scores")
    sp.add_argument("mask")

    sp = add("report", cmd_report, "per-segment target/output traces and errors")
    sp.add_argument("trajectories")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--video")
    sp.add_argument("--person", type=int)
    sp.add_argument("--offset", type=int, help="segment start within the trajectory")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # library validation failures (bad shapes, single-class masks, invalid configs)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
