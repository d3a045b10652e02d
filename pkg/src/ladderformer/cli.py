"""``ladderformer`` command line: run experiments, count parameters, dump positions, decode."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .experiments import DEFAULTS, UsageError, experiment_spec, load_model, run_experiment
from .layers import count_parameters, subtotals
from .models import PLAIN_CONFIG, Seq2SeqModel
from .optimize import TrainingDiverged, decode_payload, predict_values
from .tokens import positional_values, write_positional_csv
from .transformer import EncoderDecoder

OUT_ENV = "LADDERFORMER_OUT"

ANCHORS = (
    ("plain transformer, dim_feedforward=1", 46),
    ("plain transformer, dim_feedforward=8", 88),
    ("token transformer, d_model=8, 4 tokens", 1332),
)


def _anchor_registries():
    yield EncoderDecoder(dataclasses.replace(PLAIN_CONFIG, dim_feedforward=1)).registry()
    yield EncoderDecoder(PLAIN_CONFIG).registry()
    yield Seq2SeqModel("token").registry()


def cmd_params(args):
    status = 0
    for (label, want), reg in zip(ANCHORS, _anchor_registries()):
        got = count_parameters(reg)
        print(f"{label}: {got} (expected {want}) {'ok' if got == want else 'MISMATCH'}")
        if got != want:
            status = 1
            for name, n in subtotals(reg, depth=4).items():
                print(f"    {name}: {n}")
    return status


def cmd_posenc(args):
    positions = [int(p) for p in args.positions.split(",")]
    pe = positional_values(max(positions) + 1, args.d_model)
    write_positional_csv(args.out, pe, positions, "long" if args.long else "wide")
    print(f"wrote {args.out}")
    return 0


def cmd_decode(args):
    model, header = load_model(args.checkpoint)
    payload = [int(t) for t in args.input.split(",") if t.strip()]
    if model.uses_tokens:
        out = decode_payload(model, payload, args.max_len)
        print(f"Input sequence: {payload}\nOutput (predicted) sequence: {out}")
    else:
        out = predict_values(model, payload)
        print(f"Input sequence: {payload}\nOutput (predicted) sequence: {','.join(f'{v:.4f}' for v in out)}")
    return 0


def _spec_from_args(args):
    overrides = {}
    if args.config:
        overrides.update(json.loads(Path(args.config).read_text()))
        overrides.pop("id", None)
    flags = {"epochs": args.epochs, "lr": args.lr, "seed": args.seed, "copies_per_task": args.copies}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    if args.inversion:
        overrides["tasks"] = [("all_eight_inverted" if t == "all_eight" else t)
                              for t in overrides.get("tasks", DEFAULTS[args.experiment].tasks)]
    return experiment_spec(args.experiment, **overrides)


def cmd_run(args):
    spec = _spec_from_args(args)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    out = Path(args.out) if args.out else root / f"{spec.id}-seed{spec.seed}"

    def log(epoch, loss, lr):
        if not args.quiet and (epoch + 1) % args.log_every == 0:
            print(f"epoch {epoch + 1:5d}  loss {loss:.6f}  lr {lr:g}", file=sys.stderr)

    try:
        status, result = run_experiment(spec, out, log, args.dump_data)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(result.predictions_text())
    print(f"final loss {result.report.final_loss:.6f} after {spec.epochs} epochs "
          f"({result.report.wall_clock:.1f}s)")
    for name, (ok, detail) in result.expectations.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    print(f"outputs in {out}")
    return status


def build_parser():
    p = argparse.ArgumentParser(prog="ladderformer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one experiment and check its expectations")
    r.add_argument("experiment", help=f"one of {', '.join(DEFAULTS)}")
    r.add_argument("--epochs", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--copies", type=int, help="samples per task")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<id>-seed<seed>, ${OUT_ENV} defaults to ./runs)")
    r.add_argument("--config", help="JSON file of experiment field overrides")
    r.add_argument("--dump-data", action="store_true", help="also write the training pairs to data.txt")
    r.add_argument("--inversion", action="store_true",
                   help="train the constant tasks as inversions (0000 -> 1111) instead of copies")
    r.add_argument("--log-every", type=int, default=100)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    sub.add_parser("params", help="check the 46 / 88 / 1332 parameter counts").set_defaults(func=cmd_params)

    pe = sub.add_parser("posenc", help="write sinusoidal position vectors as CSV")
    pe.add_argument("--d-model", type=int, default=8)
    pe.add_argument("--positions", default="1,2")
    pe.add_argument("--out", default="posenc.csv")
    pe.add_argument("--long", action="store_true", help="pos,dim,value rows instead of one row per position")
    pe.set_defaults(func=cmd_posenc)

    d = sub.add_parser("decode", help="greedy-decode one input with a saved model")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True, help='comma-separated bits, e.g. "0,1,0,1"')
    d.add_argument("--max-len", type=int, default=15)
    d.set_defaults(func=cmd_decode)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64


if __name__ == "__main__":
    sys.exit(main())
