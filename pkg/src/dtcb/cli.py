"""``sim`` command line: run scenarios, sweep faults, derive identities, create and verify quotes.

Exit codes: 0 pass, 1 invariant failure, 2 protocol rejection, 3 input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attestation import create_quote, measured_boot, verify_quote, Quote
from .crypto import ContractViolation
from .dice import build_chain
from .encoding import DecodeError
from .scenario import ConfigError, ScenarioConfig, build_report, build_world, fault_sweep, parse_layers

EXIT_OK, EXIT_INVARIANT, EXIT_REJECTED, EXIT_INPUT = 0, 1, 2, 3


class InputError(Exception):
    pass


def _hex_arg(value: str, what: str, size: int | None = None) -> bytes:
    try:
        raw = bytes.fromhex(value.strip())
    except ValueError:
        raise InputError(f"{what}: malformed hex") from None
    if size is not None and len(raw) != size:
        raise InputError(f"{what}: expected {size} bytes, got {len(raw)}")
    return raw


def _identity(uds_hex: str, measurements: str):
    uds = _hex_arg(uds_hex, "uds", 32)
    try:
        raw = json.loads(Path(measurements).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"measurements: {exc}") from None
    items = raw.get("layers") if isinstance(raw, dict) else raw
    if not isinstance(items, list):
        raise InputError("measurements: expected a list of layers")
    try:
        return build_chain(uds, parse_layers(items, "measurements"))
    except (ConfigError, ContractViolation, ValueError) as exc:
        raise InputError(str(exc)) from None


def cmd_run(args) -> int:
    try:
        cfg = ScenarioConfig.load(args.config)
    except OSError as exc:
        raise InputError(str(exc)) from None
    except ConfigError as exc:
        raise InputError(f"{args.config}: {exc}") from None
    world = build_world(cfg, args.seed)
    world.run(args.ticks if args.ticks is not None else cfg.tick_limit)
    report = build_report(world)
    if args.log:
        Path(args.log).write_text(world.log.text())
    if args.report:
        Path(args.report).write_text(report.to_json())
    if args.figures:
        from .plots import plot_asset_timeline

        out = Path(args.figures)
        out.mkdir(parents=True, exist_ok=True)
        fig = plot_asset_timeline(
            world.auditor.timeline, list(world.ledgers), out / "asset_timeline.png", world.now
        )
        print(f"figure\t{fig}")
    for row in report.rows():
        print(row)
    return EXIT_OK if report.passed else EXIT_INVARIANT


def cmd_sweep(args) -> int:
    try:
        cfg = ScenarioConfig.load(args.config)
    except (OSError, ConfigError) as exc:
        raise InputError(str(exc)) from None
    if not 0.0 <= args.max_drop <= 1.0:
        raise InputError("--max-drop must lie in [0, 1]")
    rows = fault_sweep(cfg, args.runs, args.seed or 0, args.max_drop, args.ticks)
    print("run\tseed\toutcome\tticks\texclusivity\thazards")
    for r in rows:
        print(f"{r['run']}\t{r['seed']}\t{r['outcome']}\t{r['ticks']}\t{'PASS' if r['exclusivity'] else 'FAIL'}\t{r['hazards']}")
    excl = sum(not r["exclusivity"] for r in rows)
    print(f"summary\truns={len(rows)}\texclusivity_failures={excl}\thazards={sum(r['hazards'] for r in rows)}")
    if args.figures:
        from .plots import plot_sweep

        out = Path(args.figures)
        out.mkdir(parents=True, exist_ok=True)
        print(f"figure\t{plot_sweep(rows, out / 'sweep_outcomes.png')}")
    return EXIT_INVARIANT if excl else EXIT_OK


def cmd_derive(args) -> int:
    ident = _identity(args.uds, args.measurements)
    print(f"cdi\t{ident.cdi.hex()}")
    print(f"device_id\t{ident.device_id.public_key.hex()}")
    for layer, alias in zip(ident.chain[1:], ident.alias_ids):
        print(f"alias_id[{layer.layer_index}]\t{alias.public_key.hex()}")
    return EXIT_OK


def cmd_create_quote(args) -> int:
    ident = _identity(args.uds, args.measurements)
    nonce = _hex_arg(args.nonce, "nonce", 32)
    try:
        quote = create_quote(ident, measured_boot(ident), nonce)
    except ContractViolation as exc:
        raise InputError(str(exc)) from None
    blob = quote.to_bytes().hex()
    if args.out:
        Path(args.out).write_text(blob + "\n")
    else:
        print(blob)
    print(f"key\t{quote.signer_public_key.hex()}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_verify_quote(args) -> int:
    try:
        text = Path(args.quote).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"quote: {exc}") from None
    blob = _hex_arg(text, "quote")
    try:
        quote = Quote.from_bytes(blob)
    except DecodeError as exc:
        raise InputError(f"quote: {exc}") from None
    nonce = _hex_arg(args.nonce, "nonce", 32)
    key = _hex_arg(args.key, "key", 32)
    verdict = verify_quote(quote, key, nonce)
    if verdict:
        print("accepted")
        return EXIT_OK
    print(f"rejected\t{verdict.reason}")
    return EXIT_REJECTED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario config to quiescence or the tick limit")
    run.add_argument("config")
    run.add_argument("--log", help="write the event log here")
    run.add_argument("--ticks", type=int, help="tick limit override")
    run.add_argument("--seed", type=int, help="seed override")
    run.add_argument("--report", help="write the JSON run report here")
    run.add_argument("--figures", help="directory for the asset timeline figure")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="re-run a scenario under random seeds and lossy links")
    sw.add_argument("config")
    sw.add_argument("--runs", type=int, default=500)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--ticks", type=int)
    sw.add_argument("--max-drop", type=float, default=0.3)
    sw.add_argument("--figures")
    sw.set_defaults(func=cmd_sweep)

    der = sub.add_parser("derive", help="print CDI, DeviceID and per-layer AliasID keys")
    der.add_argument("--uds", required=True)
    der.add_argument("--measurements", required=True)
    der.set_defaults(func=cmd_derive)

    cq = sub.add_parser("create-quote", help="quote the measured-boot registers of a derived identity")
    cq.add_argument("--uds", required=True)
    cq.add_argument("--measurements", required=True)
    cq.add_argument("--nonce", required=True)
    cq.add_argument("--out")
    cq.set_defaults(func=cmd_create_quote)

    vq = sub.add_parser("verify-quote", help="check a hex-encoded quote against a nonce and key")
    vq.add_argument("--quote", required=True)
    vq.add_argument("--nonce", required=True)
    vq.add_argument("--key", required=True)
    vq.set_defaults(func=cmd_verify_quote)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
