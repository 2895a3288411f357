"""Command-line entry point: ``load``, ``sweep`` and ``selftest``.

Exit codes: 0 when the command ran to completion (a non-converged trial is
reported, not an error), 1 for usage errors, 2 for an internal numerical
fault.  Any flag may also come from a ``--config`` file of ``key = value``
lines (``#`` starts a comment); flags on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import re
import sys
import time
from dataclasses import replace

from . import __version__
from .channel import ChannelParams, read_channel_dump, realize, write_channel_dump
from .experiments import SNR_REFERENCE_POWER, emit, figure_config, noise_for_snr, run_sweep
from .linkmodel import LinkParams
from .lmsolver import SCHEDULES, LmConfig, NumericalFault, write_trace
from .loader import INIT_STRATEGIES, LoaderOptions, optimize, verify_kkt

__all__ = ["main", "parse_power", "build_parser"]

log = logging.getLogger("ofdm_loading")

OUTDIR_ENV = "OFDM_LOADING_OUTDIR"
LOAD_FIELDS = ("trial", "case", "converged", "iters", "throughput_bits", "total_power_W", "avg_ber_final", "res_norm")

_UNITS = {"": 1.0, "w": 1.0, "mw": 1e-3, "uw": 1e-6, "µw": 1e-6, "nw": 1e-9, "pw": 1e-12}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_power(text) -> float:
    """Power or noise variance in watts, with an optional W/mW/uW/nW suffix.

    >>> parse_power("0.1mW")
    0.0001
    """
    s = str(text).strip().replace(" ", "")
    m = re.fullmatch(r"([+-]?(?:inf|[0-9.]+(?:[eE][+-]?[0-9]+)?))([a-zA-Zµ]*)", s)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"invalid power {text!r} (e.g. 1e-4, 0.1mW, 100uW, inf)")
    value = float(m.group(1)) * _UNITS[m.group(2).lower()]
    if not value > 0:
        raise argparse.ArgumentTypeError(f"power must be positive, got {text!r}")
    return value


def _open_unit(text) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _positive(kind):
    def conv(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return conv


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return v


def _add_model_flags(p):
    g = p.add_argument_group("channel")
    g.add_argument("--n-subcarriers", type=_positive(int), default=128, help="subcarriers N [default %(default)s; reference 128]")
    g.add_argument("--n-taps", type=_positive(int), default=5, help="channel taps [default %(default)s; reference 5]")
    g.add_argument("--decay", type=float, default=0.2, help="delay-profile decay per tap [default %(default)s; reference 0.2]")
    g.add_argument("--seed", type=_nonneg_int, default=0, help="master seed [default %(default)s]")
    g = p.add_argument_group("link")
    g.add_argument("--ber-th", type=_positive(float), default=1e-4, help="average BER target [default %(default)s; reference 1e-4]")
    g.add_argument("--alpha", type=_open_unit, default=0.5, help="power weight in (0,1) [default %(default)s; reference 0.5]")
    g.add_argument("--power-unit", type=parse_power, default=1e-6,
                   help="power unit of the weighted objective, W or with suffix [default %(default)s = 1uW]")
    g.add_argument("--init", choices=INIT_STRATEGIES, default="gap", help="starting bits [default %(default)s]")
    g = p.add_argument_group("solver")
    g.add_argument("--mu0", type=_positive(float), default=1e5, help="initial damping [default %(default)s; reference 1e5]")
    g.add_argument("--nu1", type=_positive(float), default=0.5, help="damping shrink factor [default %(default)s; reference 0.5]")
    g.add_argument("--nu2", type=_positive(float), default=2.0, help="damping growth factor [default %(default)s; reference 2]")
    g.add_argument("--mu-th", type=_positive(float), default=1.0, help="damping threshold [default %(default)s]")
    g.add_argument("--tol-residual", type=_positive(float), default=1e-6, help="residual tolerance [default %(default)s; reference 1e-6]")
    g.add_argument("--tol-step", type=_positive(float), default=1e-6, help="step tolerance [default %(default)s; reference 1e-6]")
    g.add_argument("--k-max", type=_positive(int), default=10_000, help="iteration limit [default %(default)s; reference 1e4]")
    g.add_argument("--schedule", choices=SCHEDULES, default="monotone", help="damping schedule [default %(default)s]")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value file; command-line flags override it")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    parser = _Parser(prog="ofdm-loading", description="Joint bit and power loading for OFDM links.", parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("load", parents=[common], help="optimize one channel realization")
    _add_model_flags(p)
    p.add_argument("--trial", type=_nonneg_int, default=0, help="trial index of the channel draw [default %(default)s]")
    p.add_argument("--snr-db", type=float, default=None, help=f"nominal SNR in dB at {SNR_REFERENCE_POWER:g} W (overrides --noise-var)")
    p.add_argument("--noise-var", type=parse_power, default=1e-9, help="noise variance, W or with suffix [default %(default)s; reference 1e-3uW]")
    p.add_argument("--pth", type=parse_power, default=math.inf, help="total power cap, W or with suffix; inf = none [default %(default)s; reference 0.1mW when capped]")
    p.add_argument("--channel-file", metavar="CSV", help="read the channel from a dump file instead of drawing it")
    p.add_argument("--dump-channel", metavar="CSV", help="write the channel used to a dump file")
    p.add_argument("--trace", metavar="CSV", help="write the LM iteration trace of the last solve")

    p = sub.add_parser("sweep", parents=[common], help="run one of the figure sweeps")
    _add_model_flags(p)
    p.add_argument("--figure", type=int, required=True, help="1: SNR, 2: alpha, 3: power cap, 4: baseline comparison")
    p.add_argument("--trials", type=_positive(int), default=1000, help="channel draws per grid point [default %(default)s; reference 1000]")
    p.add_argument("--jobs", type=_positive(int), default=1, help="worker processes [default %(default)s]")
    p.add_argument("--pth", type=parse_power, default=1e-4,
                   help="power cap of the capped curves (figures 1-2), W or with suffix [default %(default)s; reference 0.1mW]")
    p.add_argument("--outdir", default=None, help=f"parent of the run directory [default ${OUTDIR_ENV} or ./runs]")
    p.add_argument("--run-name", default=None, help="run directory name [default: timestamp]")
    p.add_argument("--both-snr", action="store_true", help="also write pre- and post-allocation average SNR per grid point")

    p = sub.add_parser("selftest", parents=[common], help="run the Jacobian, BER and grid-oracle audits")
    p.add_argument("--quick", action="store_true", help="reduced sample counts")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="audit seed [default %(default)s]")
    return parser


def _read_config(path):
    out = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser, argv):
    """Parse ``argv``, filling unset flags from the ``--config`` file."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        values = _read_config(known.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in values.items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
            continue
        try:
            val = act.type(text) if act.type else text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {list(act.choices)}")
        defaults[key] = val
    sub.set_defaults(**defaults)
    # required flags satisfied by the file
    for key in defaults:
        actions[key].required = False
    return parser.parse_args(argv)


def _models(args, noise):
    try:
        chan = ChannelParams(args.n_subcarriers, args.n_taps, args.decay, noise, args.seed)
        link = LinkParams(args.ber_th, getattr(args, "pth", math.inf), args.alpha, args.power_unit)
        lm = LmConfig(args.mu0, args.nu1, args.nu2, args.mu_th, args.tol_residual, args.tol_step, args.k_max, args.schedule)
        opts = LoaderOptions(init=args.init)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return chan, link, lm, opts


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def cmd_load(args) -> int:
    noise = noise_for_snr(args.snr_db) if args.snr_db is not None else args.noise_var
    chan, link, lm, opts = _models(args, noise)
    if args.channel_file:
        try:
            dump = read_channel_dump(args.channel_file)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot read channel file: {exc}") from exc
        if args.trial not in dump:
            raise UsageError(f"trial {args.trial} not in {args.channel_file}")
        ch = dump[args.trial]
    else:
        ch = realize(chan, args.trial)
    if args.dump_channel:
        write_channel_dump(args.dump_channel, [(args.trial, ch)])
    if args.trace:
        lm = replace(lm, keep_trace=True)
    res = optimize(ch, link, lm, opts)
    rep = verify_kkt(res, ch, link, opts)
    if args.trace:
        write_trace(args.trace, res.solver.trace)
    row = (
        args.trial, res.case_used.value if res.case_used else "None", int(res.converged), res.solver.iterations,
        res.throughput, res.total_power, res.achieved_avg_ber, rep.residual_norm,
    )
    print(",".join(LOAD_FIELDS))
    print(",".join(_fmt(v) for v in row))
    for line in rep.lines():
        print("# " + line)
    for note in res.notes:
        print("# note: " + note)
    return 0


def _run_dir(args, label):
    parent = args.outdir or os.environ.get(OUTDIR_ENV) or "runs"
    name = args.run_name or time.strftime("%Y%m%d-%H%M%S") + f"-{label}"
    path = os.path.join(parent, name)
    base, k = path, 1
    while os.path.exists(path) and not args.run_name:
        path = f"{base}-{k}"
        k += 1
    os.makedirs(path, exist_ok=True)
    return path


def _write_run_config(path, args):
    with open(os.path.join(path, "run-config.txt"), "w") as fh:
        fh.write(f"# ofdm-loading {__version__}\n")
        for key, val in sorted(vars(args).items()):
            if key in ("config", "verbose", "command", "outdir", "run_name") or val is None:
                continue
            fh.write(f"{key.replace('_', '-')} = {_fmt(val) if isinstance(val, float) else val}\n")


def cmd_sweep(args) -> int:
    if args.figure not in (1, 2, 3, 4):
        raise UsageError(f"unknown figure {args.figure}; choose 1, 2, 3 or 4")
    chan, link, lm, opts = _models(args, 1e-9)
    cfg = figure_config(args.figure, args.trials, args.seed)
    chan = replace(chan, noise_variance=cfg.channel.noise_variance)
    link = replace(link, power_threshold=math.inf)
    overrides = dict(channel=chan, link=link, lm=lm, options=opts)
    if args.figure in (1, 2):
        overrides["caps"] = (math.inf, args.pth)
    cfg = replace(cfg, **overrides)
    out = _run_dir(args, f"fig{args.figure}")
    _write_run_config(out, args)
    t0 = time.perf_counter()
    result = run_sweep(cfg, jobs=args.jobs)
    files = emit(result, out, both_snr=args.both_snr)
    for row in result.aggregate():
        log.info("%s %s thr=%.2f power=%.4g W converged=%s", *row[:4], row[5])
    print(out)
    for f in files:
        print("  " + os.path.basename(f))
    print(f"# {len(result.records)} records in {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_selftest(args) -> int:
    from . import audit

    results = audit.run_all(quick=args.quick, seed=args.seed)
    for r in results:
        print(r.line())
        for exc in r.exceptions[:10]:
            print(f"      exception: {exc}")
    ok = all(r.passed for r in results)
    print("selftest " + ("passed" if ok else "FAILED"))
    return 0 if ok else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
        handler = {"load": cmd_load, "sweep": cmd_sweep, "selftest": cmd_selftest}[args.command]
        return handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ofdm-loading: error: {exc}", file=sys.stderr)
        return 1
    except NumericalFault as exc:
        print(f"ofdm-loading: numerical fault: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 1


if __name__ == "__main__":
    sys.exit(main())
