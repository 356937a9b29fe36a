"""``sflc`` command-line front end.

Exit codes: 0 ok, 1 generic failure, 2 wrong password, 3 image locked,
4 image not open, 64 usage error.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import signal
import sys
from pathlib import Path

from . import analyze, bench, header
from .crypto import DEFAULT_COST, FAST_COST, KdfCost
from .errors import LockHeld, NoMatch, NotOpen, SflcError
from .layout import MAX_VOLUMES
from .protocol import OP_CLOSE, STATUS_OK
from .server import BlockClient, BlockServer, socket_path

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_NOMATCH = 2
EXIT_LOCKED = 3
EXIT_NOT_OPEN = 4
EXIT_USAGE = 64

log = logging.getLogger("sflc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class PasswordSource:
    """Passwords from a file descriptor (one per line) or from the terminal."""

    def __init__(self, fd: int | None):
        self._lines = None
        if fd is not None:
            with os.fdopen(fd, "r", closefd=False) as f:
                self._lines = [line.rstrip("\r\n") for line in f.read().splitlines()]

    def get(self, prompt: str) -> bytes:
        if self._lines is not None:
            if not self._lines:
                raise UsageError("not enough passwords on --password-fd")
            return self._lines.pop(0).encode("utf-8")
        return getpass.getpass(prompt).encode("utf-8")


def _cost(args) -> KdfCost:
    if args.kdf_fast or os.environ.get("SFLC_KDF_FAST") == "1":
        return FAST_COST
    return DEFAULT_COST


def cmd_init(args, pw: PasswordSource) -> int:
    if not 1 <= args.volumes <= MAX_VOLUMES:
        raise UsageError(f"--volumes must be between 1 and {MAX_VOLUMES}")
    path = Path(args.image)
    if args.size is not None:
        with open(path, "wb") as f:
            f.truncate(args.size * (1 << 20))
    elif not path.exists():
        raise UsageError(f"{path} does not exist; pass --size to create it")
    passwords = [pw.get(f"Password for volume {i}: ") for i in range(args.volumes)]
    geo = header.init_device(path, passwords, skip_randfill=args.skip_randfill, cost=_cost(args))
    print(f"formatted {path}: {args.volumes} volume(s), {geo.num_slices} slices, "
          f"{geo.volume_blocks} blocks per volume")
    return EXIT_OK


def cmd_open(args, pw: PasswordSource) -> int:
    inst = header.instantiate(args.image, pw.get("Password: "), cost=_cost(args),
                              iv_cache_capacity=args.iv_cache)
    try:
        server = BlockServer(inst, socket_path(args.image), frame_timeout=args.frame_timeout)
    except BaseException:
        header.close_device(inst)
        raise
    for i in inst.open_indices:
        print(f"volume {i}: {inst.geometry.volume_blocks} blocks")
    print(f"serving on {server.socket_file}", flush=True)

    def _stop(signum, frame):
        server.stop()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    server.serve()
    return EXIT_OK


def cmd_close(args, pw: PasswordSource) -> int:
    with BlockClient(socket_path(args.image)) as client:
        status, _ = client.call(OP_CLOSE)
    if status != STATUS_OK:
        print(f"close failed with status {status:#04x}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_testpwd(args, pw: PasswordSource) -> int:
    index = header.testpwd(args.image, pw.get("Password: "), cost=_cost(args))
    print(f"password unlocks volume {index}")
    return EXIT_OK


def cmd_changepwd(args, pw: PasswordSource) -> int:
    old = pw.get("Current password: ")
    new = pw.get("New password: ")
    index = header.changepwd(args.image, old, new, cost=_cost(args))
    print(f"password of volume {index} changed")
    return EXIT_OK


def cmd_wipe_header(args, pw: PasswordSource) -> int:
    index = header.wipe_header(args.image, pw.get("Password: "), cost=_cost(args))
    print(f"volume {index} destroyed")
    return EXIT_OK


def cmd_refresh(args, pw: PasswordSource) -> int:
    policy = analyze.RefreshPolicy(args.p, args.q)
    inst = header.instantiate(args.image, pw.get("Password: "), cost=_cost(args))
    try:
        counts = analyze.random_refresh(inst, policy)
    finally:
        header.close_device(inst)
    print(f"re-randomised {counts['randomized']} free blocks, re-encrypted {counts['reencrypted']} data blocks")
    return EXIT_OK


def cmd_bench(args, pw: PasswordSource) -> int:
    # benchmark images are throwaway, so the cheap KDF is always fine here
    cost = FAST_COST
    workdir = args.image
    os.makedirs(workdir, exist_ok=True)
    record: dict = {"mode": args.mode, "size_mib": args.size}
    if args.mode == "frag":
        res = bench.fragmentation_benchmark(args.size, seed=args.seed, cost=cost, workdir=workdir,
                                           workload=args.workload)
        print(res.to_text())
        record["points"] = res.points
    elif args.mode == "baseline":
        record["ratios"] = {}
        for mode in bench.THROUGHPUT_MODES:
            ratio, s, b = bench.compare_with_baseline(mode, args.size, seed=args.seed, cost=cost,
                                                      repeats=args.repeats, workdir=workdir)
            print(f"{mode:9s}  sflc {s.mb_per_s:8.2f} MB/s  baseline {b.mb_per_s:8.2f} MB/s  ratio {ratio:.3f}")
            record["ratios"][mode] = {"sflc": s.mb_per_s, "baseline": b.mb_per_s, "ratio": ratio}
    else:
        res = bench.throughput_benchmark(args.mode, args.size, seed=args.seed, cost=cost, workdir=workdir)
        print(f"{args.mode}: {res.mb_per_s:.2f} MB/s")
        record["mb_per_s"] = res.mb_per_s
    if args.json:
        with open(args.json, "w") as f:
            json.dump(record, f, indent=2)
    return EXIT_OK


def cmd_diff(args, pw: PasswordSource) -> int:
    print(analyze.snapshot_diff(args.image, args.other).to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--kdf-fast", action="store_true",
                        help="cheap Argon2id parameters (testing only; also SFLC_KDF_FAST=1)")
    common.add_argument("--password-fd", type=int, metavar="FD",
                        help="read passwords, one per line, from file descriptor FD")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sflc", description="Plausibly deniable multi-volume disk images.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", parents=[common], help="format an image")
    p.add_argument("image")
    p.add_argument("--volumes", type=int, required=True)
    p.add_argument("--size", type=int, metavar="MIB", help="create the image with this size first")
    p.add_argument("--skip-randfill", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("open", parents=[common], help="unlock volumes and serve them on <image>.sock")
    p.add_argument("image")
    p.add_argument("--iv-cache", type=int, default=1024)
    p.add_argument("--frame-timeout", type=float, default=1.0)
    p.set_defaults(func=cmd_open)

    p = sub.add_parser("close", parents=[common], help="close a served image")
    p.add_argument("image")
    p.set_defaults(func=cmd_close)

    p = sub.add_parser("testpwd", parents=[common], help="report which volume a password unlocks")
    p.add_argument("image")
    p.set_defaults(func=cmd_testpwd)

    p = sub.add_parser("changepwd", parents=[common], help="change a volume password")
    p.add_argument("image")
    p.set_defaults(func=cmd_changepwd)

    p = sub.add_parser("wipe-header", parents=[common], help="destroy a volume by randomising its DMB cell")
    p.add_argument("image")
    p.set_defaults(func=cmd_wipe_header)

    p = sub.add_parser("refresh", parents=[common], help="random refresh of free and data blocks")
    p.add_argument("image")
    p.add_argument("--p", type=float, default=0.0)
    p.add_argument("--q", type=float, default=0.0)
    p.set_defaults(func=cmd_refresh)

    p = sub.add_parser("bench", parents=[common], help="fragmentation and throughput benchmarks")
    p.add_argument("image", help="scratch directory for benchmark images")
    p.add_argument("--mode", required=True,
                   choices=["seqwrite", "seqread", "randwrite", "randread", "frag", "baseline"])
    p.add_argument("--size", type=int, default=64, metavar="MIB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--workload", choices=["mixed", "sequential"], default="mixed",
                   help="fill pattern for --mode frag")
    p.add_argument("--json", metavar="PATH")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diff", parents=[common], help="per-slice diff of two snapshots")
    p.add_argument("image")
    p.add_argument("other")
    p.set_defaults(func=cmd_diff)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pw = PasswordSource(args.password_fd)
        return args.func(args, pw)
    except UsageError as exc:
        print(f"sflc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoMatch as exc:
        print(f"sflc: {exc}", file=sys.stderr)
        return EXIT_NOMATCH
    except LockHeld as exc:
        print(f"sflc: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except NotOpen as exc:
        print(f"sflc: {exc}", file=sys.stderr)
        return EXIT_NOT_OPEN
    except (SflcError, OSError, ValueError) as exc:
        print(f"sflc: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
