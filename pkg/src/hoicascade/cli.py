"""Command-line entry points: synth, train, infer, eval, gradcheck, oracle.

Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 check failure.
Flags override config-file values; all runs are deterministic under a
fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .errors import DataError, FormatError, TrainingError
from .formats import (
    RunConfig,
    parse_config_file,
    read_meta,
    read_predictions_ndjson,
    read_scenes_ndjson,
    run_config_from,
    scenes_to_gt_records,
    write_meta,
    write_predictions_ndjson,
    write_scenes_ndjson,
)
from .interaction import CascadeModel
from .metrics import format_report_table, map_rel, recall_at_k, report_to_dict
from .synth import SceneSpec, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

CONFIG_KEYS = set(RunConfig.__dataclass_fields__)


def build_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    return run_config_from(values)


def scene_spec_from(config: RunConfig, seed=None) -> SceneSpec:
    return SceneSpec(
        image_size=config.image_size,
        entities_range=(config.entities_min, config.entities_max),
        jitter=config.jitter,
        occlusion_rate=config.occlusion_rate,
        noise_sigma=config.noise_sigma,
        seed=config.seed if seed is None else seed,
    )


def _add_config_flags(parser, keys):
    parser.add_argument("--config", help="flat key = value config file")
    for key in sorted(keys):
        default = RunConfig.__dataclass_fields__[key].default
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key,
                            type=str, default=None,
                            help=f"override {key} (default {default})")


def cmd_synth(args):
    config = build_run_config(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    train_spec = scene_spec_from(config)
    test_spec = scene_spec_from(config, seed=config.seed + 1_000_003)
    train = generate_dataset(train_spec, config.train_scenes, prefix="train")
    test = generate_dataset(test_spec, config.test_scenes, prefix="test")
    write_scenes_ndjson(os.path.join(out_dir, "train.ndjson"), train)
    write_scenes_ndjson(os.path.join(out_dir, "test.ndjson"), test)
    write_meta(os.path.join(out_dir, "meta.json"), train_spec,
               extra={"grid_size": config.grid_size,
                      "channels": config.channels or train_spec.min_channels(),
                      "test_seed": test_spec.seed})
    n_triplets = sum(len(s.triplets) for s in train)
    print(f"wrote {len(train)} train / {len(test)} test scenes "
          f"({n_triplets} train triplets) to {out_dir}")
    return EXIT_OK


def cmd_train(args):
    from .training import TrainLog, prepare_grids, train_model

    config = build_run_config(args)
    spec, meta = read_meta(os.path.join(args.data, "meta.json"))
    scenes = read_scenes_ndjson(os.path.join(args.data, "train.ndjson"))
    log = TrainLog()
    started = time.perf_counter()
    model = train_model(scenes, spec, config, log=log)
    elapsed = time.perf_counter() - started
    model.save(args.out)
    print(f"trained {config.stages}-stage model on {len(scenes)} scenes "
          f"in {elapsed:.1f}s (phase1 loss {log.phase1[-1]:.4f}, "
          f"phase2 loss {log.phase2[-1]:.4f}); saved to {args.out}")
    return EXIT_OK


def cmd_infer(args):
    from .training import infer_scenes

    config = build_run_config(args)
    model = CascadeModel.load(args.model)
    spec, meta = read_meta(os.path.join(args.data, "meta.json"))
    scenes = read_scenes_ndjson(os.path.join(args.data, args.split + ".ndjson"))
    records = infer_scenes(model, scenes, spec, config)
    write_predictions_ndjson(args.out, records)
    n = sum(len(r["triplets"]) for r in records)
    print(f"wrote {n} scored triplets for {len(records)} scenes to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    config = build_run_config(args)
    spec, meta = read_meta(os.path.join(args.data, "meta.json"))
    scenes = read_scenes_ndjson(os.path.join(args.data, args.split + ".ndjson"))
    gts = scenes_to_gt_records(scenes)
    preds = read_predictions_ndjson(args.preds)
    mode = "mask" if config.mode == "segment" else "box"
    map_report = map_rel(preds, gts, spec.n_verbs, mode="box")
    ks = tuple(int(k) for k in args.ks.split(",")) if args.ks else (20, 50, 100)
    recall_report = recall_at_k(preds, gts, spec.geometric_verbs, ks=ks, mode=mode)
    payload = report_to_dict(map_report, recall_report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(args.out + ".txt", "w", encoding="utf-8") as fh:
            fh.write(format_report_table(map_report, recall_report))
    print(format_report_table(map_report, recall_report), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_all_gradchecks

    started = time.perf_counter()
    reports = run_all_gradchecks(points=args.points, tol=args.tol)
    elapsed = time.perf_counter() - started
    worst = 0.0
    ok = True
    for name, report in reports.items():
        status = "PASS" if report.passed else "FAIL"
        print(f"[{status}] {name}: max rel err {report.max_rel_error:.3e}")
        worst = max(worst, report.max_rel_error)
        ok = ok and report.passed
    print(f"gradcheck {'passed' if ok else 'FAILED'} "
          f"(worst {worst:.3e}, tol {args.tol:.1e}, {elapsed:.1f}s)")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_oracle(args):
    from .oracles import run_equivalence_suite

    started = time.perf_counter()
    report = run_equivalence_suite(n_instances=args.instances, seed=args.seed)
    elapsed = time.perf_counter() - started
    status = "passed" if report.passed else "FAILED"
    print(f"oracle equivalence {status}: {report.instances} instances, "
          f"max abs diff {report.max_abs_diff:.2e}, {elapsed:.1f}s")
    for kind, diff in report.mismatches[:10]:
        print(f"  mismatch in {kind}: {diff:.3e}")
    return EXIT_OK if report.passed else EXIT_CHECK


def make_parser():
    parser = argparse.ArgumentParser(
        prog="hoicascade",
        description="Cascaded human-object interaction recognition on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p_synth.add_argument("--out", required=True)
    _add_config_flags(p_synth, CONFIG_KEYS)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="two-phase training on a corpus")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    _add_config_flags(p_train, CONFIG_KEYS)
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="write scored triplets for a split")
    p_infer.add_argument("--model", required=True)
    p_infer.add_argument("--data", required=True)
    p_infer.add_argument("--split", default="test")
    p_infer.add_argument("--out", required=True)
    _add_config_flags(p_infer, CONFIG_KEYS)
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--preds", required=True)
    p_eval.add_argument("--out")
    p_eval.add_argument("--ks", default="20,50,100")
    _add_config_flags(p_eval, CONFIG_KEYS)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p_grad.add_argument("--points", type=int, default=10)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_oracle = sub.add_parser("oracle", help="oracle equivalence suites")
    p_oracle.add_argument("--instances", type=int, default=500)
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors; remap per our contract
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
