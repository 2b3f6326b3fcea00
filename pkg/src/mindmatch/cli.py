"""Command-line entry point: gen, train, interp, match, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench, gradcheck, io, matcher
from .network import NetConfig, build
from .tensor import ShapeError
from .train import TrainConfig, TrainingDiverged, make_triplets, split_windows, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("mindmatch")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalFailure(Exception):
    pass


@dataclass
class GenConfig:
    num_scenes: int = 10
    height: int = 32
    width: int = 64
    rng_seed: int = 0
    max_velocity: float = 3.0
    min_sprites: int = 1
    max_sprites: int = 3
    min_sprite_size: int = 6
    max_sprite_size: int = 14


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path, *classes):
    try:
        return io.load_config(path, *classes)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except io.FormatError as exc:
        raise UsageError(str(exc)) from exc


def cmd_gen(args):
    (gcfg,) = _load_config(args.config, GenConfig)
    out = Path(args.out)
    for n in range(gcfg.num_scenes):
        scene = bench.random_scene(
            gcfg.rng_seed * 1_000_003 + n,
            gcfg.height,
            gcfg.width,
            (gcfg.min_sprites, gcfg.max_sprites),
            (gcfg.min_sprite_size, gcfg.max_sprite_size),
            gcfg.max_velocity,
        )
        frames, flow = bench.generate_sequence(scene)
        d = out / f"seq_{n:04d}"
        d.mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(frames):
            io.write_image(d / f"frame_{t}.ppm", f)
        io.write_flow(d / "flow.flo", flow, mark_invalid=True)
    print(f"wrote {gcfg.num_scenes} sequences to {out}")
    return 0


def _read_sequences(data: Path):
    seqs = []
    dirs = sorted(p for p in data.iterdir() if p.is_dir()) or [data]
    for d in dirs:
        files = sorted(p for p in d.iterdir() if p.suffix in (".ppm", ".pgm"))
        if files:
            seqs.append([io.read_image(f) for f in files])
    if not seqs:
        raise DataError(f"no .ppm/.pgm frames under {data}")
    return seqs


def cmd_train(args):
    net_cfg, tcfg = _load_config(args.config, NetConfig, TrainConfig)
    try:
        net_cfg.validate()
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seqs = _read_sequences(Path(args.data))
    shape = (1, 3, net_cfg.input_h, net_cfg.input_w)
    for s in seqs:
        for f in s:
            if f.shape != shape:
                raise DataError(f"frame shape {f.shape[2:]} does not match network input {shape[2:]}")
    train_w, val_w = split_windows(seqs, args.holdout)
    triplets = []
    for s, t in train_w:
        triplets += make_triplets(seqs[s][t : t + 3], sequence=s)
    for tr in triplets:
        tr.i1, tr.i2, tr.i3 = (a.astype(np.float32) for a in (tr.i1, tr.i2, tr.i3))
    if not triplets:
        raise DataError("no training windows (need sequences of at least 3 frames)")
    net = build(net_cfg, tcfg.rng_seed)
    out = Path(args.out)

    def ckpt(net, state, epoch):
        io.save_checkpoint(out, net, state)

    try:
        net, state, curve = train(net, triplets, tcfg, checkpoint=ckpt)
    except TrainingDiverged as exc:
        raise NumericalFailure(str(exc)) from exc
    io.save_checkpoint(out, net, state)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".loss.csv")
    io.write_loss_curve(loss_csv, curve)
    msg = f"trained {len(curve)} steps on {len(triplets)} triplets; final loss {curve[-1][1]:.5f}"
    if val_w:
        from .train import charbonnier_loss

        vals = []
        for s, t in val_w:
            f = seqs[s][t : t + 3]
            vals.append(charbonnier_loss(net.forward(f[0], f[2]), f[1].astype(net.dtype), tcfg.charbonnier_eps)[0])
        msg += f"; held-out loss {np.mean(vals):.5f} on {len(val_w)} windows"
    print(msg)
    return 0


def _load_net(path):
    try:
        net, _ = io.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    return net


def _read_pair(net, a, b):
    i1, i3 = io.read_image(a), io.read_image(b)
    if i1.shape != i3.shape:
        raise DataError(f"input images differ in size: {i1.shape[2:]} vs {i3.shape[2:]}")
    want = (net.config.input_h, net.config.input_w)
    if i1.shape[2:] != want:
        raise DataError(f"input images are {i1.shape[2:]}, network expects {want}")
    return i1, i3


def cmd_interp(args):
    net = _load_net(args.ckpt)
    i1, i3 = _read_pair(net, args.i1, args.i3)
    io.write_image(args.out, net.forward(i1, i3))
    return 0


def cmd_match(args):
    net = _load_net(args.ckpt).astype(np.float64)
    i1, i3 = _read_pair(net, args.i1, args.i3)
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    ms = matcher.match_grid(net, i1, i3, args.stride, k=args.batch)
    io.write_matches(args.out, ms)
    print(f"{len(ms)} matches, {net.backward_seeds} backward passes in {net.backward_sweeps} sweeps")
    return 0


def cmd_eval(args):
    ms = io.read_matches(args.matches)
    flow = io.read_flow(args.flow)
    pred = gt = None
    if (args.pred is None) != (args.gt is None):
        raise UsageError("--pred and --gt must be given together")
    if args.pred is not None:
        pred, gt = io.read_image(args.pred), io.read_image(args.gt)
    try:
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --thresholds {args.thresholds!r}") from exc
    try:
        report = bench.evaluate(ms, flow, pred, gt, args.top_fraction, thresholds)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    io.write_report(args.out, report)
    print(report.table())
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run(range(args.seed, args.seed + args.seeds))
    worst = {}
    for r in results:
        cur = worst.get(r.name)
        if cur is None or cur.ok and (not r.ok or r.error > cur.error):
            worst[r.name] = r
    for r in worst.values():
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<30} max err {r.error:.3e} (tol {r.tol:g})")
    failed = [r for r in results if not r.ok]
    if failed:
        raise NumericalFailure(f"{len(failed)} of {len(results)} gradient checks failed")
    print(f"all {len(results)} checks passed")
    return 0


def make_parser():
    p = _Parser(prog="mindmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="synthesise coherent sequences with ground-truth flow")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="build triplets and train the interpolation network")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.add_argument("--holdout", type=float, default=0.1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("interp", help="interpolate the middle frame")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--i1", required=True)
    s.add_argument("--i3", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("match", help="grid matching by network inversion")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--i1", required=True)
    s.add_argument("--i3", required=True)
    s.add_argument("--stride", type=int, default=4)
    s.add_argument("--batch", type=int, default=matcher.DEFAULT_BATCH)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("eval", help="score matches against ground-truth flow")
    s.add_argument("--matches", required=True)
    s.add_argument("--flow", required=True)
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--top-fraction", type=float, default=1.0)
    s.add_argument("--thresholds", default=",".join(str(t) for t in bench.DESK_THRESHOLDS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference and adjoint checks of every layer")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, io.FormatError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
