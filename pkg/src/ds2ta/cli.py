"""Command line front end.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
or format errors, 3 on numeric failures.  Every produced artifact gets a
``<artifact>.manifest.json`` written atomically next to it with the
resolved configuration, seeds, inputs, outputs, tool version and wall
clock, so a run can be reproduced from the manifest alone.

Precedence for settings: command line flags override the config file,
which overrides built-in defaults.  The seed additionally falls back to
the ``DS2TA_SEED`` environment variable before the default of 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analyze import (E_AC_PJ_DEFAULT, export_attention, measure, render_report)
from .data import gen_static_patterns, gen_temporal_order, read_evtb, write_evtb
from .errors import (ConfigError, FormatError, GenerationError, InputError,
                     LabelError, NumericError, PrecisionError, ScoreRangeError)
from .model import (ModelConfig, SpikingTransformer, config_from_dict,
                    load_checkpoint, parse_config_text)
from .train import TrainConfig, evaluate, train

MODES = ("ds2ta", "spatial-only", "nsad-only")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: config file, then DS2TA_SEED, then 0)")


def build_parser() -> _Parser:
    parser = _Parser(prog="ds2ta",
                     description="spiking transformer with windowed decay attention "
                                 "and a lookup-table attention denoiser")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        return p

    p = cmd("gen-data", "generate a synthetic event dataset")
    p.add_argument("--task", choices=("temporal-order", "static-patterns"),
                   default="temporal-order", help="which generator to run")
    p.add_argument("--out", required=True, help="output .evtb path")
    p.add_argument("--count", type=int, default=1000, help="number of samples")
    p.add_argument("--timesteps", type=int, default=8, help="frames per sample")
    p.add_argument("--grid", type=int, default=16, help="frame height and width")
    p.add_argument("--noise", type=float, default=0.02,
                   help="background spike probability per pixel per timestep")
    p.add_argument("--classes", type=int, default=2,
                   help="class count (static-patterns only)")
    p.add_argument("--gap-max", type=int, default=None,
                   help="largest flash separation (temporal-order only; default T/2)")
    _add_seed(p)
    p.set_defaults(func=_cmd_gen_data)

    p = cmd("train", "train a model on an EVTB dataset")
    p.add_argument("--data", required=True, help="training .evtb file")
    p.add_argument("--eval-data", default=None, help="held-out .evtb file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None,
                   help="metrics log path (default: <out>.log.jsonl)")
    p.add_argument("--config", default=None, help="key=value model config file")
    p.add_argument("--mode", choices=MODES, default="ds2ta",
                   help="ds2ta: windowed attention + denoiser; spatial-only: "
                        "neither; nsad-only: denoiser without the window")
    p.add_argument("--nsad-identity", action="store_true",
                   help="pin the denoiser to the identity mapping "
                        "(equivalent to disabling it)")
    p.add_argument("--t-aw", type=int, default=None, help="attention window override")
    p.add_argument("--tau-init", type=float, default=None, help="decay exponent init")
    p.add_argument("--u-init", type=float, default=None, help="denoiser threshold init")
    p.add_argument("--epochs", type=int, default=None, help="training epochs")
    p.add_argument("--batch-size", type=int, default=None, help="samples per step")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate")
    _add_seed(p)
    p.set_defaults(func=_cmd_train)

    p = cmd("eval", "evaluate a checkpoint on an EVTB dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help=".evtb file")
    p.set_defaults(func=_cmd_eval)

    p = cmd("analyze", "measure attention sparsity and estimated energy")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help=".evtb file")
    p.add_argument("--out", required=True, help="report output path")
    p.add_argument("--e-ac", type=float, default=E_AC_PJ_DEFAULT,
                   help="energy per accumulate, picojoule")
    p.set_defaults(func=_cmd_analyze)

    p = cmd("export-attn", "dump attention maps of one sample as CSV and PGM")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help=".evtb file")
    p.add_argument("--sample", type=int, default=0, help="sample index")
    p.add_argument("--out", required=True, help="output file prefix")
    p.set_defaults(func=_cmd_export)

    p = cmd("selftest", "run the built-in gradient and kernel checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def _resolve_seed(flag_seed, config_values: dict[str, str] | None) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if config_values and "seed" in config_values:
        return int(config_values["seed"])
    env = os.environ.get("DS2TA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"DS2TA_SEED must be an integer, got {env!r}") from exc
    return 0


def _write_manifest(artifact_path, command: str, resolved: dict, seeds: dict,
                    inputs: list, outputs: list, started: float) -> Path:
    manifest = {
        "subcommand": command,
        "config": resolved,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(f"{artifact_path}.manifest.json")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    os.replace(tmp, path)
    return path


def _cmd_gen_data(args) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed, None)
    if args.task == "temporal-order":
        ds = gen_temporal_order(args.count, timesteps=args.timesteps, grid=args.grid,
                                noise_rate=args.noise, seed=seed, t_gap_max=args.gap_max)
    else:
        ds = gen_static_patterns(args.count, timesteps=args.timesteps, grid=args.grid,
                                 classes=args.classes, noise_rate=args.noise, seed=seed)
    write_evtb(args.out, ds)
    resolved = {"task": args.task, "count": args.count, "timesteps": args.timesteps,
                "grid": args.grid, "noise": args.noise, "classes": ds.n_classes,
                "gap_max": ds.metadata.get("t_gap_max")}
    _write_manifest(args.out, "gen-data", resolved, {"seed": seed}, [], [args.out], started)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _model_config_for(args, dataset, config_values: dict[str, str], seed: int) -> ModelConfig:
    cfg = config_from_dict(config_values)
    _, t, c, h, w = dataset.frames.shape
    if h != w:
        raise ConfigError(f"frames must be square, got {h}x{w}")
    cfg.timesteps, cfg.in_channels, cfg.img_size = t, c, h
    cfg.n_classes = dataset.n_classes
    if args.mode == "ds2ta":
        cfg.attention_mode, cfg.nsad_enabled = "tasa", True
    elif args.mode == "spatial-only":
        cfg.attention_mode, cfg.nsad_enabled = "spatial_only", False
    else:  # nsad-only
        cfg.attention_mode, cfg.nsad_enabled = "spatial_only", True
    if args.nsad_identity:
        # The identity table maps every score to itself, which is the same
        # forward and backward as running without the denoiser.
        cfg.nsad_enabled = False
    if args.t_aw is not None:
        cfg.t_aw = args.t_aw
    if args.tau_init is not None:
        cfg.tau_init = args.tau_init
    if args.u_init is not None:
        cfg.u_init = args.u_init
    cfg.seed = seed
    return cfg


def _cmd_train(args) -> int:
    started = time.time()
    config_values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    seed = _resolve_seed(args.seed, config_values)
    dataset = read_evtb(args.data)
    eval_dataset = read_evtb(args.eval_data) if args.eval_data else None
    model_cfg = _model_config_for(args, dataset, config_values, seed)
    model = SpikingTransformer(model_cfg)
    tcfg = TrainConfig(seed=seed, checkpoint_path=args.out,
                       log_path=args.log or f"{args.out}.log.jsonl")
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.batch_size is not None:
        tcfg.batch_size = args.batch_size
    if args.lr is not None:
        tcfg.lr_init = args.lr
    metrics = train(model, dataset, tcfg, eval_dataset=eval_dataset)
    resolved = {"model": vars(model_cfg), "train": vars(tcfg), "mode": args.mode,
                "nsad_identity": bool(args.nsad_identity)}
    inputs = [args.data] + ([args.eval_data] if args.eval_data else [])
    _write_manifest(args.out, "train", resolved, {"seed": seed}, inputs,
                    [args.out, tcfg.log_path], started)
    last = metrics[-1]
    print(f"trained {tcfg.epochs} epochs; final train_acc "
          f"{last['train_acc']:.4f}, loss {last['train_loss']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = read_evtb(args.data)
    result = evaluate(model, dataset)
    print(f"accuracy {result.accuracy:.4f}")
    for cls, acc in enumerate(result.per_class):
        print(f"class {cls} accuracy {acc:.4f}")
    for i, (raw, den) in enumerate(zip(result.raw_sparsity, result.denoised_sparsity)):
        print(f"block {i} sparsity raw {raw:.4f} denoised {den:.4f}")
    return 0


def _cmd_analyze(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    dataset = read_evtb(args.data)
    report = measure(model, dataset, e_ac_pj=args.e_ac)
    text = render_report(report)
    Path(args.out).write_text(text, encoding="utf-8")
    _write_manifest(args.out, "analyze", {"e_ac_pj": args.e_ac},
                    {"seed": model.cfg.seed}, [args.ckpt, args.data], [args.out], started)
    sys.stdout.write(text)
    return 0


def _cmd_export(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    dataset = read_evtb(args.data)
    if not 0 <= args.sample < len(dataset):
        raise InputError(f"sample {args.sample} outside [0, {len(dataset)})")
    written = export_attention(model, dataset.frames[args.sample], args.out)
    _write_manifest(args.out, "export-attn", {"sample": args.sample},
                    {"seed": model.cfg.seed}, [args.ckpt, args.data],
                    [str(p) for p in written], started)
    print(f"wrote {len(written)} files with prefix {args.out}")
    return 0


def _cmd_selftest(args) -> int:
    failures = 0
    for label, fn in _selftest_checks():
        try:
            fn()
        except Exception as exc:  # report and keep going
            print(f"FAIL {label}: {exc}")
            failures += 1
        else:
            print(f"ok   {label}")
    if failures:
        print(f"{failures} check(s) failed")
        return 3
    print("all checks passed")
    return 0


def _selftest_checks():
    from .neuron import LifParams, lif_forward
    from .nsad import NsadHead, denoise
    from .tasa import (AttentionScores, TasaConfig, explicit_sta_oracle,
                       shift_decay_apply, tasa_project, temporal_filter)
    from .tensorcore import (Tape, check_gradients, make_rng, matmul,
                             reduce_mean, cross_entropy_logits)

    def grad_primitives():
        rng = make_rng(7)
        rep = check_gradients(lambda a, b: reduce_mean(matmul(a, b)),
                              [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
                              tol=1e-6)
        assert rep.passed, f"matmul gradient error {rep.max_rel_err:.2e}"
        logits = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        rep = check_gradients(lambda x: cross_entropy_logits(x, labels), [logits], tol=1e-5)
        assert rep.passed, f"loss gradient error {rep.max_rel_err:.2e}"

    def grad_lif():
        rng = make_rng(11)
        stream = rng.normal(0.8, 0.5, size=(3, 2, 4))
        rep = check_gradients(
            lambda x: reduce_mean(lif_forward(x, LifParams(), smooth=True)),
            [stream], tol=1e-4)
        assert rep.passed, f"relaxed spike gradient error {rep.max_rel_err:.2e}"

    def grad_filter():
        rng = make_rng(13)
        rep = check_gradients(
            lambda x, tau: reduce_mean(temporal_filter(x, 3, tau)),
            [rng.random(size=(5, 2, 3)), np.asarray(2.0)], tol=1e-6)
        assert rep.passed, f"decay filter gradient error {rep.max_rel_err:.2e}"

    def grad_denoiser():
        rng = make_rng(17)
        scores = rng.integers(0, 9, size=(2, 1, 1, 3, 3)).astype(np.float64)
        # Perturbing integer scores is meaningless; check the head scalars
        # by rebuilding the program with shifted parameter values instead.
        tape = Tape()
        leaf = tape.leaf(scores)
        head = NsadHead(tape, 8, u_init=2.0)
        head.set_params(b=0.05, dw=1.0)
        out = reduce_mean(denoise(AttentionScores(leaf, 8), [head], continuous=True))
        tape.backward(out)
        eps = 1e-6
        for name, dt in head.named_params():
            base = float(dt.value.data)
            vals = []
            for delta in (eps, -eps):
                head.set_params(**{name: base + delta})
                t2 = Tape()
                l2 = t2.leaf(scores)
                vals.append(float(reduce_mean(
                    denoise(AttentionScores(l2, 8), [head], continuous=True)).value.data))
            head.set_params(**{name: base})
            numeric = (vals[0] - vals[1]) / (2 * eps)
            analytic = float(dt.grad.data)
            err = abs(numeric - analytic) / max(1.0, abs(numeric), abs(analytic))
            assert err < 1e-5, f"denoiser d/d{name} error {err:.2e}"

    def replica_equivalence():
        rng = make_rng(19)
        for _ in range(20):
            t, n, d_in = (int(rng.integers(1, 7)), int(rng.integers(1, 9)),
                          int(rng.integers(1, 17)))
            cfg = TasaConfig(t_aw=int(rng.integers(1, 5)),
                             tau_init=float(rng.integers(0, 5)))
            s = (rng.random((t, n, d_in)) < 0.3).astype(np.float64)
            w = rng.normal(size=(d_in, int(rng.integers(1, 9))))
            tape = Tape()
            fast = tasa_project(tape.leaf(s), tape.leaf(w), cfg).value.data
            slow = explicit_sta_oracle(s, w, cfg)
            assert np.max(np.abs(fast - slow)) <= 1e-12, "oracle mismatch"

    def shift_exactness():
        rng = make_rng(23)
        acc = rng.integers(0, 2 ** 10 + 1, size=64)
        for tau in range(7):
            for delta in range(4):
                got = shift_decay_apply(acc, tau, delta)
                want = acc.astype(np.float64) * 2.0 ** (-tau * delta)
                assert np.array_equal(got, want), f"shift mismatch tau={tau} delta={delta}"

    return [
        ("gradient checks: core operations", grad_primitives),
        ("gradient checks: relaxed spike dynamics", grad_lif),
        ("gradient checks: decay filter (incl. exponent)", grad_filter),
        ("gradient checks: denoiser parameters", grad_denoiser),
        ("windowed projection matches per-lag replica oracle", replica_equivalence),
        ("fixed-point shift equals float decay bitwise", shift_exactness),
    ]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ds2ta: configuration error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, GenerationError, InputError, LabelError, OSError) as exc:
        print(f"ds2ta: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, PrecisionError, ScoreRangeError) as exc:
        print(f"ds2ta: numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
