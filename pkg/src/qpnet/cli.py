"""Command-line entry point: ``qpnet <subcommand> [options]``.

Failures print one line, ``error: <kind>: <message>``, and exit 1. Usage
errors exit 2.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .errors import QPNetError
from .model import ARCHITECTURES, AuxTrack, effective_receptive_field_length, load_checkpoint, receptive_field_length

log = logging.getLogger("qpnet")

DEFAULT_OUT = "runs"


def _global_options(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="experiment JSON (see configs/)")
    parser.add_argument("--seed", type=int, default=default(None), help="override every seed")
    parser.add_argument("--out-dir", default=default(DEFAULT_OUT), help="output directory")
    parser.add_argument("--profile", choices=("desk", "paper"), default=default(None))
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="qpnet", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", default="pQPNet", choices=sorted(ARCHITECTURES))
    p.add_argument("--dense-factor", type=int, default=8)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("generate", parents=[common], help="generate a tone from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--f0", type=float, required=True)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--phase", type=float, default=0.0)
    p.add_argument("--no-seed", action="store_true", help="start from empty history")
    p.add_argument("--mode", choices=("categorical", "argmax"), default="categorical")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--output", help="WAV path (default <out-dir>/generated.wav)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", help="model name in the report")

    for name, help_ in (("sweep-dense", "dense-factor sweep"), ("compare-models", "model comparison")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--max-steps", type=int, help="cap training steps (smoke runs)")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")

    p = sub.add_parser("inspect", parents=[common], help="receptive-field tables")
    p.add_argument("--model", action="append", choices=sorted(ARCHITECTURES), help="repeatable; default all")
    p.add_argument("--dense-factor", type=int, default=8)
    p.add_argument("--f0", type=float, action="append", help="repeatable; default the test grid")
    return parser


def _spec(args):
    spec = ex.load_spec(args.config) if args.config else ex.ExperimentSpec()
    if args.profile:
        spec = spec.with_changes(profile=args.profile)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    return spec


def cmd_train(args, spec, out):
    from .tensor import AdamState
    from .training import TrainingConfig, build_sinusoid_dataset, train, write_loss_csv
    from .model import init_params, save_checkpoint
    from dataclasses import asdict

    tc = asdict(spec.training)
    if args.epochs is not None:
        tc["epochs"] = args.epochs
    if args.learning_rate is not None:
        tc["learning_rate"] = args.learning_rate
    tc = TrainingConfig(**tc)
    if args.resume:
        ck = load_checkpoint(args.resume)
        params, adam = ck.params, ck.adam
    else:
        params = init_params(spec.model_config(args.model, args.dense_factor), spec.seed)
        adam = AdamState.for_params(params.values(), learning_rate=tc.learning_rate)
    dataset = build_sinusoid_dataset(spec.dataset)
    result = train(params, tc, dataset, adam=adam, max_steps=args.max_steps, checkpoint_dir=out / "checkpoints")
    name = f"{args.model}_a{params.config.dense_factor}"
    path = out / f"{name}.npz"
    save_checkpoint(path, params, result.adam, result.steps, {"heldout_loss": result.heldout_loss})
    write_loss_csv(out / f"{name}_loss.csv", result.history)
    print(f"checkpoint {path}")
    print(f"steps {result.steps} heldout_loss {result.heldout_loss:.4f}")


def cmd_generate(args, spec, out):
    from .sampler import GenerationRequest, generate, seed_length_for
    from .signal import add_noise_snr, measure_tone, synth_sinusoid, write_wav

    ck = load_checkpoint(args.checkpoint)
    config = ck.config
    seed_clip = None
    if not args.no_seed:
        n = seed_length_for(config, args.f0)
        clean = synth_sinusoid(args.f0, n / config.sample_rate, config.sample_rate, args.phase, spec.test_amplitude)
        seed_clip = add_noise_snr(clean, spec.seed_snr_db, spec.seed)
    req = GenerationRequest(
        args.f0, args.seconds, seed_clip, args.mode, args.temperature, rng_seed=spec.seed
    )
    clip = generate(ck.params, config, req)
    path = Path(args.output) if args.output else out / "generated.wav"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_wav(path, clip)
    m = measure_tone(clip)
    print(f"wav {path}")
    print(f"samples {len(clip)} snr_db {m.snr_db:.2f} peak_hz {m.freq_hz:.2f}")


def cmd_eval(args, spec, out):
    ck = load_checkpoint(args.checkpoint)
    label = args.label or Path(args.checkpoint).stem
    report = ex.evaluate_model(ck.params, ck.config, spec, label)
    report.meta = {"kind": "eval", "profile": spec.profile, "checkpoint": str(args.checkpoint)}
    ex.emit_report(report, out)
    _print_summary(report)


def _print_summary(report):
    print(",".join(ex.SUMMARY_HEADER))
    for s in report.summary:
        print(",".join(ex._fmt(getattr(s, k)) for k in ex.SUMMARY_HEADER))


def cmd_study(args, spec, out):
    if args.max_steps is not None:
        spec = spec.with_changes(max_steps=args.max_steps)
    run = ex.run_dense_sweep if args.command == "sweep-dense" else ex.run_model_comparison
    report = run(spec, out)
    _print_summary(report)
    print(f"report {out / 'summary.csv'}")


def cmd_gradcheck(args, spec, out):
    from .gradcheck import TOLERANCE, run_all

    results = run_all(spec.seed)
    for r in results:
        print(f"{r.name:<24} {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if bad else 0


def cmd_inspect(args, spec, out):
    names = args.model or list(ARCHITECTURES)
    f0s = args.f0 or list(spec.test_f0)
    print("model,dense_factor,layers,receptive_field")
    configs = []
    for name in names:
        c = spec.model_config(name, args.dense_factor)
        configs.append((name, c))
        print(f"{name},{c.dense_factor},{len(c.layers())},{receptive_field_length(c)}")
    print()
    print("model,dense_factor,f0_hz,effective_receptive_field,seconds")
    for name, c in configs:
        for f0 in f0s:
            erf = effective_receptive_field_length(c, AuxTrack.constant(f0, 1), 0)
            print(f"{name},{c.dense_factor},{f0:g},{erf},{erf / c.sample_rate:.4f}")


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "sweep-dense": cmd_study,
    "compare-models": cmd_study,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def _one_line(msg):
    return " ".join(str(msg).split())


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        spec = _spec(args)
        out = Path(args.out_dir)
        if args.command not in ("inspect", "gradcheck"):
            out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, spec, out)
    except QPNetError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f"{exc.filename}: " if getattr(exc, "filename", None) else ""
        print(f"error: io: {where}{_one_line(exc.strerror or exc)}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: interrupted: stopped by user", file=sys.stderr)
        return 130
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
