"""Command-line entry point.

One executable, eight workflows: parse, run, inject, simulate, raloc,
validate, serve, fw.  Data goes to standard output, diagnostics to
standard error, and exit codes are fixed: 0 success, 1 validation
mismatch or rejection, 2 usage error, 3 major fault during a run.

Settings can come from an ``llbforge.toml`` config file (current
directory, or ``--config``); command-line flags always win over the file,
the file wins over built-in defaults.  Recognized keys::

    store = "http://127.0.0.1:8455"   # validate: golden store URL or dir
    token_file = "secret.txt"         # validate: bearer token for updates
    dt_ms = 100                       # run: default scan interval
    out_dir = "results"               # simulate: output directory
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

try:
    import tomllib
except ImportError:  # 3.10
    import tomli as tomllib

from . import baseline_text
from .l5k import ParseError, extract_serial, parse, serialize
from .llb import inject, preset_descriptors, report_to_json
from .model import (
    LadderError,
    memory_report,
    normalize,
    raloc,
    serial_text,
)
from .sim import load_scenario, run_scenario
from .vm import FaultRaised, run as vm_run
from . import cls as cls_mod
from . import firmware as fw_mod

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_USAGE = 2
EXIT_FAULT = 3

_DEFAULTS = {"store": None, "token_file": None, "dt_ms": 100,
             "out_dir": None}


class _Usage(Exception):
    pass


def _fail(message: str) -> "NoReturn":  # noqa: F821
    raise _Usage(message)


def _load_config(path: str | None) -> dict:
    cfg = dict(_DEFAULTS)
    candidate = Path(path) if path else Path("llbforge.toml")
    if path is None and not candidate.exists():
        return cfg
    try:
        raw = tomllib.loads(candidate.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        _fail(f"--config: cannot read {candidate}: {exc}")
    for key in cfg:
        if key in raw:
            cfg[key] = raw[key]
    return cfg


def _read_project(path: str):
    try:
        return parse(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LadderError(f"cannot read {path}: {exc}") from None


def _read_token(token_file: str | None) -> str | None:
    if not token_file:
        return None
    try:
        text = Path(token_file).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(f"--token-file: {exc}")
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:  # token.<name> = <value> form
            line = line.partition("=")[2].strip().strip("\"'")
        return line
    return None


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_parse(args, cfg) -> int:
    project = _read_project(args.file)
    rep = memory_report(project)
    rungs = sum(len(r.rungs) for p in project.programs for r in p.routines)
    routines = sum(len(p.routines) for p in project.programs)
    print(f"controller={project.name} serial={serial_text(project.serial_number)} "
          f"programs={len(project.programs)} routines={routines} "
          f"rungs={rungs} tags={len(project.tags)} aois={len(project.aois)} "
          f"data_logic_bytes={rep.data_logic_bytes} io_bytes={rep.io_bytes}")
    return EXIT_OK


_NUM_RE = re.compile(r"^-?\d+$")


def _read_input_csv(path: str):
    """Header ``scan,<channel>,...``; returns (per-scan dicts, scan count)."""
    try:
        lines = [ln for ln in Path(path).read_text(encoding="utf-8")
                 .splitlines() if ln.strip()]
    except OSError as exc:
        raise LadderError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise LadderError(f"{path}: empty input trace")
    head = [c.strip() for c in lines[0].split(",")]
    if head[:1] != ["scan"] or len(head) < 2:
        raise LadderError(f"{path}: header must be scan,<channel>,...")
    try:
        channels = [int(c) for c in head[1:]]
    except ValueError:
        raise LadderError(f"{path}: channel columns must be integers") \
            from None
    rows = []
    for ln in lines[1:]:
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != len(head):
            raise LadderError(f"{path}: row has {len(cells)} cells, "
                              f"expected {len(head)}: {ln!r}")
        try:
            scan_no = int(cells[0])
            values = [int(c) if _NUM_RE.match(c) else float(c)
                      for c in cells[1:]]
        except ValueError:
            raise LadderError(f"{path}: bad number in row {ln!r}") from None
        if scan_no < 1:
            raise LadderError(f"{path}: scan numbers are 1-based")
        rows.append((scan_no, values))
    if not rows:
        raise LadderError(f"{path}: no data rows")
    total = max(s for s, _ in rows)
    trace = [{} for _ in range(total)]
    for scan_no, values in rows:
        trace[scan_no - 1].update(zip(channels, values))
    return trace, total


def _cmd_run(args, cfg) -> int:
    project = _read_project(args.file)
    trace, scans = _read_input_csv(args.trace)
    dt = args.dt if args.dt is not None else int(cfg["dt_ms"])
    result = vm_run(project, input_trace=trace, dt_ms=dt, scans=scans,
                    watch=tuple(args.watch or ()))
    sys.stdout.write(result.to_text())
    return EXIT_FAULT if result.fault else EXIT_OK


def _cmd_inject(args, cfg) -> int:
    project = _read_project(args.file)
    presets = preset_descriptors()
    if args.attack not in presets:
        _fail(f"--attack: unknown preset {args.attack!r} "
              f"(have {', '.join(sorted(presets))})")
    injected, report = inject(project, presets[args.attack])
    text = serialize(injected)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.manifest:
        Path(args.manifest).write_text(report_to_json(report),
                                       encoding="utf-8")
    return EXIT_OK


def _cmd_simulate(args, cfg) -> int:
    scenario_path = Path(args.scenario)
    scenario = load_scenario(scenario_path)
    result = run_scenario(scenario)
    out_dir = Path(args.out_dir or cfg["out_dir"] or scenario_path.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = scenario_path.stem
    written = []
    trace_path = out_dir / f"{stem}.trace"
    trace_path.write_text(result.trace_text(), encoding="utf-8")
    written.append(trace_path)
    events_path = out_dir / f"{stem}.events"
    events_path.write_text(result.events_text(), encoding="utf-8")
    written.append(events_path)
    if result.report is not None:
        manifest_path = out_dir / f"{stem}.manifest.json"
        manifest_path.write_text(report_to_json(result.report),
                                 encoding="utf-8")
        written.append(manifest_path)
    for p in written:
        print(p)
    return EXIT_OK


def _cmd_raloc(args, cfg) -> int:
    before = _read_project(args.before)
    after = _read_project(args.after)
    print(f"{raloc(before, after):.2f}")
    return EXIT_OK


def _open_store(spec: str, token: str | None):
    if spec.startswith(("http://", "https://")):
        return cls_mod.StoreClient(spec, token=token)
    return cls_mod.LogicStore.open(spec)


def _cmd_validate(args, cfg) -> int:
    store_spec = args.store or cfg["store"]
    if not store_spec:
        _fail("--store: no golden store configured")
    token = _read_token(args.token_file or cfg["token_file"])
    store = _open_store(str(store_spec), token)
    try:
        local_text = Path(args.file).read_text(encoding="utf-8")
    except OSError as exc:
        raise LadderError(f"cannot read {args.file}: {exc}") from None
    outcome = cls_mod.validate(local_text, store)
    if outcome.kind == "Match":
        print(f"MATCH serial={outcome.serial_number} "
              f"version={outcome.golden.version}")
        return EXIT_OK
    if outcome.kind == "UnknownSerial":
        print(f"UNKNOWN serial={outcome.serial_number}")
        if args.resolve == "update-golden":
            record = store.upload(outcome.serial_number, local_text,
                                  args.operator, token)
            print(f"GOLDEN created version={record.version}")
        return EXIT_MISMATCH
    print(f"MISMATCH serial={outcome.serial_number} "
          f"golden_version={outcome.golden.version}")
    print(cls_mod.summarize_diff(outcome.diff))
    sys.stdout.write(outcome.text_diff)
    if args.resolve:
        decision = {"attack": "Attack", "update-golden": "LocalNewer",
                    "restore-local": "RestoreLocal"}[args.resolve]
        action = cls_mod.resolve(outcome, decision, store, token=token,
                                 operator=args.operator)
        if decision == "Attack":
            print(f"ALARM raised for serial={outcome.serial_number}")
        elif decision == "LocalNewer":
            print(f"GOLDEN updated to version={action.new_record.version}")
        else:
            if not args.restore_to:
                _fail("--restore-to: required with --resolve restore-local")
            Path(args.restore_to).write_text(action.restored_text,
                                             encoding="utf-8")
            print(f"RESTORED golden version={outcome.golden.version} "
                  f"to {args.restore_to}")
    return EXIT_MISMATCH


def _cmd_serve(args, cfg) -> int:
    host, _, port = args.listen.rpartition(":")
    if not host or not port.isdigit():
        _fail("--listen: expected <addr>:<port>")
    store = cls_mod.LogicStore.open(args.store_dir, args.tokens)
    if not store.tokens:
        print("warning: no upload tokens loaded; uploads will be rejected",
              file=sys.stderr)
    httpd = cls_mod.make_server(store, host, int(port))
    print(f"serving golden store {args.store_dir} on "
          f"{httpd.server_address[0]}:{httpd.server_address[1]}",
          file=sys.stderr)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return EXIT_OK


def _parse_addr(text: str) -> int:
    if text.lower().startswith("16#"):
        return int(text[3:].replace("_", ""), 16)
    return int(text, 0)


def _cmd_fw_keygen(args, cfg) -> int:
    key, anchor = fw_mod.generate_keypair()
    fw_mod.save_private_key(key, args.out_key)
    anchor.save(args.out_anchor)
    print(f"issuer_id={anchor.issuer_id}")
    return EXIT_OK


def _cmd_fw_sign(args, cfg) -> int:
    try:
        key = fw_mod.load_private_key(args.key)
    except (OSError, ValueError) as exc:
        _fail(f"--key: {exc}")
    images = args.images
    addrs = [(0x08000000 + i * 0x00100000) for i in range(len(images))]
    for i, spec in enumerate(args.addr or []):
        if i >= len(images):
            _fail("--addr: more addresses than images")
        addrs[i] = _parse_addr(spec)
    entries = []
    for path, addr in zip(images, addrs):
        p = Path(path)
        try:
            data = p.read_bytes()
        except OSError as exc:
            raise LadderError(f"cannot read image {path}: {exc}") from None
        entries.append({
            "name": p.name,
            "data": data,
            "load_address": addr,
            "fw_version": args.fw_version,
            "product_code": args.code,
        })
    bundle = fw_mod.sign_bundle(entries, key, digest_alg=args.digest)
    fw_mod.save_bundle(bundle, args.out)
    print(args.out)
    return EXIT_OK


def _cmd_fw_verify(args, cfg) -> int:
    try:
        anchor = fw_mod.TrustAnchor.load(args.anchor)
    except (OSError, ValueError) as exc:
        _fail(f"--anchor: {exc}")
    bundle = fw_mod.load_bundle(args.bundle)
    result = fw_mod.verify_bundle(bundle, anchor)
    print(result.render())
    return EXIT_OK if result.accepted else EXIT_MISMATCH


def _cmd_baseline(args, cfg) -> int:
    text = baseline_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Wiring


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="llbforge",
        description="ladder logic security workbench: parse, run, inject, "
                    "simulate, validate, serve, and firmware tooling",
    )
    top.add_argument("--config", help="config file (default llbforge.toml "
                                      "in the current directory)")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="syntax-check a project and print a "
                                     "one-line summary")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_parse)

    p = sub.add_parser("run", help="run a project over an input trace and "
                                   "print the scan trace")
    p.add_argument("file")
    p.add_argument("--trace", required=True,
                   help="input CSV: header scan,<channel>,...")
    p.add_argument("--dt", type=int, help="scan interval in ms")
    p.add_argument("--watch", action="append",
                   help="extra tag/member to record (repeatable)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("inject", help="plant a preset attack into a project")
    p.add_argument("file")
    p.add_argument("--attack", required=True, help="1, 2, 3, 4a, or 4b")
    p.add_argument("--out", help="write the injected project here "
                                 "(default: standard output)")
    p.add_argument("--manifest", help="write the injection manifest JSON")
    p.set_defaults(fn=_cmd_inject)

    p = sub.add_parser("simulate", help="run a closed-loop tank scenario")
    p.add_argument("scenario", help="scenario description file")
    p.add_argument("--out-dir", help="directory for trace/events files "
                                     "(default: next to the scenario)")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("raloc", help="relative data+logic memory growth "
                                     "between two projects")
    p.add_argument("before")
    p.add_argument("after")
    p.set_defaults(fn=_cmd_raloc)

    p = sub.add_parser("validate", help="compare a local project against "
                                        "its golden sample")
    p.add_argument("file")
    p.add_argument("--store", help="golden store URL or directory")
    p.add_argument("--resolve",
                   choices=("attack", "update-golden", "restore-local"),
                   help="apply a resolution to a mismatch")
    p.add_argument("--token-file", help="bearer token for update-golden")
    p.add_argument("--operator", default="operator",
                   help="identity recorded on alarms/uploads")
    p.add_argument("--restore-to",
                   help="output path for --resolve restore-local")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("serve", help="host the golden store over HTTP")
    p.add_argument("--store-dir", required=True)
    p.add_argument("--listen", required=True, help="<addr>:<port>")
    p.add_argument("--tokens", help="token file "
                                    "(default <store-dir>/cls.toml)")
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("baseline", help="emit the bundled tank controller "
                                        "project")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(fn=_cmd_baseline)

    fw = sub.add_parser("fw", help="firmware bundle tooling")
    fws = fw.add_subparsers(dest="fw_command", required=True)

    p = fws.add_parser("keygen", help="generate a signing key and its "
                                      "trust anchor")
    p.add_argument("--out-key", required=True)
    p.add_argument("--out-anchor", required=True)
    p.set_defaults(fn=_cmd_fw_keygen)

    p = fws.add_parser("sign", help="sign images into a bundle")
    p.add_argument("images", nargs="+", help="firmware image files")
    p.add_argument("--key", required=True, help="private key PEM")
    p.add_argument("--out", required=True, help="bundle archive path")
    p.add_argument("--fw-version", default="1.0")
    p.add_argument("--code", type=int, default=1, help="product code")
    p.add_argument("--digest", choices=fw_mod.DIGEST_ALGS,
                   default="sha256")
    p.add_argument("--addr", action="append",
                   help="load address per image, e.g. 16#08000000 "
                        "(repeatable, pairs with images in order)")
    p.set_defaults(fn=_cmd_fw_sign)

    p = fws.add_parser("verify", help="verify a bundle against an anchor")
    p.add_argument("bundle")
    p.add_argument("--anchor", required=True, help="public key PEM")
    p.set_defaults(fn=_cmd_fw_verify)

    return top


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return args.fn(args, cfg)
    except _Usage as exc:
        print(f"llbforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"llbforge: parse error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except FaultRaised as exc:
        print(f"llbforge: major fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except LadderError as exc:
        print(f"llbforge: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
