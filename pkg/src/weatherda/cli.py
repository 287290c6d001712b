"""Command-line entry points: synth, train, eval, gradcheck.

Exit codes: 0 success, 1 validation error (bad flags, config or input
schema), 2 runtime failure (failed files, non-finite loss, failed checks).
Every command writes ``manifest.json`` into its output directory last.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .core import Box3D, Detection, DomainTag, read_jsonl
from .evalkit import evaluate
from .grad.checkpoint import save_checkpoint

log = logging.getLogger("weatherda")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
IMAGE_SUFFIXES = (".png",)
DEPTH_SUFFIXES = (".depth", ".png")


class ValidationError(Exception):
    pass


# -- manifest ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: list[str],
                   outputs: list[Path], started: float, **extra) -> Path:
    artifacts = {str(p.relative_to(out_dir)): sha256_file(p) for p in sorted(outputs)}
    manifest = {"command": command, "config": config, "seed": seed, "inputs": inputs,
                "outputs": sorted(artifacts), "artifact_sha256": artifacts,
                "wall_clock_seconds": round(time.time() - started, 3), **extra}
    path = out_dir / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _config_text(path) -> str | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    return p.read_text()


# -- synth -----------------------------------------------------------------------

def _find_depth(depth_dir: Path | None, stem: str) -> Path | None:
    if depth_dir is None:
        return None
    for suffix in DEPTH_SUFFIXES:
        p = depth_dir / f"{stem}{suffix}"
        if p.is_file():
            return p
    return None


def cmd_synth(args) -> int:
    from . import weathergen as W

    started = time.time()
    try:
        domain = DomainTag.parse(args.domain)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if not domain.is_target:
        raise ValidationError("synth needs a target domain: night, rain or haze")
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise ValidationError(f"input directory not found: {in_dir}")
    depth_dir = Path(args.depth) if args.depth else None
    if depth_dir is not None and not depth_dir.is_dir():
        raise ValidationError(f"depth directory not found: {depth_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = _config_text(args.config)

    images = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    outputs, errors = [], []
    # the per-image generator depends on (seed, index) only, so order and
    # parallel scheduling cannot change the results
    for index, src in enumerate(images):
        try:
            depth = None
            if domain is DomainTag.HAZE:
                dpath = _find_depth(depth_dir, src.stem)
                if dpath is None:
                    raise FileNotFoundError(f"no depth map for {src.name}")
                depth = W.load_depth(dpath)
            image, params = W.synthesize(W.load_png(src), domain, W.rng_for(args.seed, index), depth)
            target = out_dir / f"{src.stem}.png"
            sidecar = out_dir / f"{src.stem}.json"
            W.save_png(image, target)
            W.write_sidecar(sidecar, domain, params, args.seed, index, src.name)
            outputs += [target, sidecar]
        except Exception as exc:
            errors.append({"file": src.name, "error": f"{type(exc).__name__}: {exc}"})
            log.error("%s: %s", src.name, exc)
    write_manifest(out_dir, "synth", {"domain": domain.value, "input": str(in_dir),
                                      "depth": str(depth_dir) if depth_dir else None,
                                      "config_text": config_text},
                   args.seed, [p.name for p in images], outputs, started, errors=errors)
    print(f"synthesized {len(images) - len(errors)}/{len(images)} images into {out_dir}")
    return EXIT_FAILED if errors else EXIT_OK


# -- train -----------------------------------------------------------------------

METRIC_COLUMNS = ["iteration", "loss_total", "loss_gt", "loss_pseudo", "loss_dom", "loss_con",
                  "loss_dom_raw", "loss_con_raw", "lambda_dom", "lambda_con", "alpha",
                  "n_pseudo", "contrast_skipped"]


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_train_config(args):
    from .selftrain import ConfigError, TrainConfig, apply_overrides, parse_config_text

    overrides = _parse_overrides(args.set)
    if args.self_training is not None:
        overrides["self_training"] = args.self_training
    if args.qddm is not None:
        overrides["qddm"] = args.qddm
    if args.iterations is not None:
        overrides["iterations"] = str(args.iterations)
    overrides["seed"] = str(args.seed)
    try:
        text = _config_text(args.config)
        cfg = parse_config_text(text) if text is not None else TrainConfig()
        return apply_overrides(cfg, overrides)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from None


def _state_tensors(state) -> dict[str, np.ndarray]:
    return {"memory.prototypes": state.memory.prototypes,
            "memory.counts": state.memory.counts.astype(np.float64)}


def cmd_train(args) -> int:
    from .selftrain import NonFiniteLossError, dump_config, eval_scenes, evaluate_params, run_training
    from .selftrain.trainer import eval_model_params

    started = time.time()
    cfg = build_train_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "config.txt"
    atomic_write_text(config_path, dump_config(cfg))
    metrics_path = out_dir / "metrics.csv"
    outputs = [config_path, metrics_path]
    inputs = [str(args.config)] if args.config else []

    with open(metrics_path, "w", newline="") as fh:
        writer = None

        def on_step(state, m):
            nonlocal writer
            if writer is None:
                extra = sorted(k for k in m if k not in METRIC_COLUMNS)
                writer = csv.DictWriter(fh, METRIC_COLUMNS + extra, restval="", extrasaction="ignore")
                writer.writeheader()
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in m.items()})

        try:
            state, _ = run_training(cfg, on_step)
        except NonFiniteLossError as exc:
            dump = out_dir / "nonfinite_dump.ckpt"
            tensors = {f"student.{k}": v for k, v in exc.dump["student"].items()}
            tensors.update({f"teacher.{k}": v for k, v in exc.dump["teacher"].items()})
            tensors.update({f"memory.{k}": np.asarray(v, dtype=np.float64)
                            for k, v in exc.dump["memory"].items()})
            meta = {"iteration": exc.dump["iteration"],
                    "metrics": {k: (None if isinstance(v, float) and not np.isfinite(v) else v)
                                for k, v in exc.dump["metrics"].items()}}
            save_checkpoint(dump, tensors, meta)
            fh.flush()
            write_manifest(out_dir, "train", cfg.snapshot(), cfg.seed, inputs,
                           outputs + [dump], started, error=str(exc))
            print(f"error: {exc}; state dumped to {dump}", file=sys.stderr)
            return EXIT_FAILED

    meta = {"iteration": state.t, "config": cfg.snapshot()}
    for name, params in (("student", state.student_values()), ("teacher", state.teacher)):
        path = out_dir / f"{name}.ckpt"
        save_checkpoint(path, {**params, **_state_tensors(state)}, meta)
        outputs.append(path)

    params = eval_model_params(state)
    summary = {}
    for domain in ("source",) + tuple(cfg.target_domains):
        res = evaluate_params(state.detector, params, eval_scenes(cfg, domain))
        path = out_dir / f"eval_{domain}.json"
        res.to_json(path)
        outputs.append(path)
        summary[domain] = res.mAP
        print(f"{domain:>7}: mAP {res.mAP * 100:6.2f}  mATE {res.mATE:.3f}")
    write_manifest(out_dir, "train", cfg.snapshot(), cfg.seed, inputs, outputs,
                   started, eval_model=cfg.eval_model, mAP=summary)
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def _frames_of(records: list[dict], kind: str) -> dict:
    need, forbid = (("probs",), "category") if kind == "predictions" else (("category",), "probs")
    frames: dict = {}
    for i, rec in enumerate(records):
        missing = [k for k in ("frame", *need) if k not in rec]
        if missing or forbid in rec:
            hint = " (are the file arguments swapped?)" if forbid in rec else ""
            raise ValidationError(f"{kind} record {i}: expected fields {['frame', *need]}, "
                                  f"missing {missing}{hint}")
        frames.setdefault(rec["frame"], []).append(rec)
    return frames


def load_eval_inputs(pred_path, label_path):
    try:
        preds_raw = read_jsonl(pred_path)
        labels_raw = read_jsonl(label_path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(str(exc)) from None
    preds, labels = _frames_of(preds_raw, "predictions"), _frames_of(labels_raw, "labels")
    try:
        num_classes = max([int(r["category"]) + 1 for r in labels_raw]
                          + [len(r["probs"]) - bool(r.get("background")) for r in preds_raw] + [1])
        frames = []
        for key in sorted(set(preds) | set(labels), key=str):
            dets = [Detection.from_record(r) for r in preds.get(key, [])]
            gts = [(Box3D.from_dict(r), int(r["category"])) for r in labels.get(key, [])]
            frames.append((dets, gts))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"bad record: {exc}") from None
    return frames, num_classes


def cmd_eval(args) -> int:
    started = time.time()
    frames, num_classes = load_eval_inputs(args.predictions, args.labels)
    result = evaluate(frames, num_classes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "eval.json"
    text = result.to_json()
    atomic_write_text(path, text + "\n")
    print(text)
    write_manifest(out_dir, "eval", {"num_classes": num_classes, "config_text": _config_text(args.config)},
                   args.seed, [str(args.predictions), str(args.labels)], [path], started)
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_suite

    started = time.time()
    results = run_suite(args.instances, args.seed)
    report = format_report(results)
    print(report)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "gradcheck.txt"
        atomic_write_text(path, report + "\n")
        write_manifest(out_dir, "gradcheck", {"instances": args.instances}, args.seed, [], [path], started)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


# -- parser ----------------------------------------------------------------------

def _on_off(value: str) -> str:
    v = value.lower()
    if v not in ("on", "off", "true", "false"):
        raise argparse.ArgumentTypeError("expected on or off")
    return "true" if v in ("on", "true") else "false"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="weatherda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render night, rain or haze images")
    p.add_argument("--input", required=True, help="directory of source PNG images")
    p.add_argument("--depth", default=None, help="directory of depth maps (needed for haze)")
    p.add_argument("--domain", required=True, choices=["night", "rain", "haze"])
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="run the toy adaptation experiment")
    p.add_argument("--self-training", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--qddm", type=_on_off, default=None, metavar="on|off")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="score predictions against labels")
    p.add_argument("predictions", help="JSONL detections with a frame field")
    p.add_argument("labels", help="JSONL labels with a frame field")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and not args.out:
        print(f"error: {args.command} needs --out", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "eval" and not args.out:
        args.out = "."
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything unexpected is a runtime failure
        log.exception("command failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
