"""Command-line surface.

Subcommands: gen-data, train-encoder, train-wm, rollout, swap-demo, probe,
eval, gradcheck, all.  Global flags: --config <path>, --seed <u64>,
--out <dir>, --override key=value (repeatable; file < CLI precedence).

Exit codes: 0 success, 1 validation error (bad args/config/missing
prerequisite), 2 numeric failure (NaN/Inf surfaced by the engine).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness
from .config import Config, apply_override, load_config
from .gradcheck import TOLERANCE, run_suite
from .harness import PipelineError, jsonl_logger
from .tensor import NumericError

SUBCOMMANDS = ("gen-data", "train-encoder", "train-wm", "rollout",
               "swap-demo", "probe", "eval", "gradcheck", "all")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def build_parser():
    parser = _Parser(prog="dyno", description=__doc__, add_help=True,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=SUBCOMMANDS, help="pipeline stage to run")
    parser.add_argument("--config", default=None, help="path to a JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="64-bit run seed")
    parser.add_argument("--out", default="runs/default", help="artifacts directory")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. encoder.K=5 (repeatable)")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else Config()
    for spec in args.override:
        apply_override(cfg, spec)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _load_stage_inputs(cfg, out, need=("dataset",)):
    dataset = None
    if "dataset" in need:
        path = os.path.join(out, "dataset")
        if not os.path.exists(os.path.join(path, "manifest.json")):
            raise PipelineError(f"missing prerequisite dataset at {path}; run gen-data first")
        dataset = harness.load_dataset(path)
    codec = harness.build_codec(cfg)
    encoder_model = None
    if "encoder" in need:
        enc_path = os.path.join(out, "encoder")
        if not harness.checkpoint_complete(enc_path):
            raise PipelineError(f"missing prerequisite encoder checkpoint at {enc_path}")
        encoder_model, _ = harness.load_encoder(enc_path, cfg, codec, cfg.env.image_hw)
    wm = dis = None
    if "wm" in need:
        wm_path = os.path.join(out, "wm")
        if not harness.checkpoint_complete(wm_path):
            raise PipelineError(f"missing prerequisite world-model checkpoint at {wm_path}")
        wm, dis = harness.load_wm(wm_path, cfg)
    return dataset, codec, encoder_model, wm, dis


def run_command(args):
    if args.command == "gradcheck":
        results = run_suite()
        width = max(len(k) for k in results)
        ok = True
        for name in sorted(results):
            err = results[name]
            status = "ok" if err <= TOLERANCE else "FAIL"
            ok &= err <= TOLERANCE
            print(f"{name:<{width}}  {err:.3e}  {status}")
        print(f"gradcheck: {'all ops within' if ok else 'TOLERANCE EXCEEDED'} {TOLERANCE:g}")
        return 0 if ok else 1

    cfg = resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    log = jsonl_logger(os.path.join(out, "logs.jsonl"))

    if args.command == "gen-data":
        dataset = harness.stage_dataset(cfg, out, log)
        print(f"dataset: {len(dataset.episodes)} episodes, {dataset.num_transitions} transitions")
        return 0

    if args.command == "train-encoder":
        dataset, codec, *_ = _load_stage_inputs(cfg, out, need=("dataset",))
        harness.stage_encoder(cfg, out, dataset, codec, log)
        print(f"encoder checkpoint at {os.path.join(out, 'encoder')}")
        return 0

    if args.command == "train-wm":
        dataset, codec, encoder_model, _, _ = _load_stage_inputs(cfg, out, need=("dataset", "encoder"))
        harness.stage_wm(cfg, out, dataset, codec, encoder_model, log)
        print(f"world-model checkpoint at {os.path.join(out, 'wm')}")
        return 0

    if args.command == "rollout":
        _, codec, encoder_model, wm, _ = _load_stage_inputs(cfg, out, need=("encoder", "wm"))
        metrics = harness.export_rollouts(cfg, out, wm, encoder_model, codec, log=log)
        print(json.dumps(metrics, indent=2, sort_keys=True))
        return 0

    if args.command == "swap-demo":
        _, codec, encoder_model, wm, dis = _load_stage_inputs(cfg, out, need=("encoder", "wm"))
        result = harness.swap_demo(cfg, out, wm, encoder_model, codec, dis, log=log)
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0

    if args.command == "probe":
        from .evalkit import extract_probe_dataset, probe_report
        dataset, codec, encoder_model, _, dis = _load_stage_inputs(cfg, out, need=("dataset", "encoder", "wm"))
        if dis is None:
            raise PipelineError("probe needs a trained disentangler (wm.disentangle=true)")
        data = extract_probe_dataset(dataset, encoder_model, codec, dis,
                                     cfg.eval.probe_transitions, cfg.seed, bins=cfg.eval.bins)
        report = probe_report(data, cfg.seed, seeds=cfg.eval.probe_seeds)
        harness.write_metrics(os.path.join(out, "probe"),
                              {"probe": report, "probe_rows": int(len(data.groups)),
                               "probe_skipped_objects": data.skipped})
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0

    if args.command == "eval":
        dataset, codec, encoder_model, wm, dis = _load_stage_inputs(cfg, out, need=("dataset", "encoder", "wm"))
        metrics = harness.stage_eval(cfg, out, dataset, codec, encoder_model, wm, dis, log)
        print(json.dumps(metrics, indent=2, sort_keys=True))
        return 0

    if args.command == "all":
        metrics = harness.run_pipeline(cfg, out, log)
        print(json.dumps(metrics, indent=2, sort_keys=True))
        return 0

    raise CLIError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CLIError as exc:
        print(parser.format_usage(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return run_command(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (CLIError, PipelineError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
