"""Command-line surface: scan, inspect, rewrite, gate and sim.

Exit codes: 0 success, 1 verified finding, 2 usage or I/O error,
3 analysis limitation (code the tools cannot handle).
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from app import __version__
from app.models.errors import (
    ConfigError, ErimError, ImageError, NotInSubset, ScenarioError, Truncated,
)
from app.models.inspection import PAGE_SIZE, VerdictClass
from app.models.rewrite import RewritePolicy
from app.models.x86 import REG_NAMES_64, Reg
from app.services.bytescan import ByteScanService
from app.services.elfio import ElfIOService
from app.services.gates import PKRU_ALLOW_TRUSTED, PKRU_DISALLOW_TRUSTED, GateKind, emit_call_gate
from app.services.inspector import InspectorService
from app.services.scenario import ScenarioRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FINDING = 1
EXIT_USAGE = 2
EXIT_LIMITATION = 3

USAGE_ERRORS = (ImageError, ConfigError, ScenarioError)


def _emit(report, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _envelope(exc):
    body = exc.to_dict()
    if isinstance(exc, (NotInSubset, Truncated)) and exc.offset is not None:
        body['message'] = f"cannot disassemble at 0x{exc.offset:x}: {exc.message}"
    return body


def _report(args, data, **body):
    body.update({
        'tool': 'erim-forge',
        'version': __version__,
        'input': {'path': str(args.input), 'sha256': hashlib.sha256(data).hexdigest()},
    })
    return body


def _load(args):
    mode = "raw" if args.raw else "elf"
    data = ElfIOService.read_source(args.input)
    return data, ElfIOService.load(data, mode, args.base)


def _entries(args, image, inspector):
    entries = image.entry_points(inspector.entry_marker)
    if args.entries:
        entries = entries.union(InspectorService.load_entry_list(args.entries))
    return entries


def _inspector(args):
    return InspectorService(disallow=args.disallow, entry_marker=args.entry_marker)


def _hex(text):
    return int(text, 16)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_scan(args):
    data, image = _load(args)
    pages, executable = image.pages()
    occurrences = []
    for first, run in ByteScanService.runs(pages, lambda index: True):
        for occ in ByteScanService.scan(run, base=first * PAGE_SIZE):
            body = occ.to_dict()
            body['executable'] = executable(occ.offset // PAGE_SIZE)
            occurrences.append(body)
    _emit(_report(args, data, occurrences=occurrences))
    return EXIT_OK


def cmd_inspect(args):
    data, image = _load(args)
    inspector = _inspector(args)
    report = inspector.inspect_image(image, _entries(args, image, inspector))
    data_hits = sum(1 for v in report.verdicts if v.verdict is VerdictClass.NON_EXECUTABLE_DATA)
    if data_hits and args.on_data == "warn":
        logger.warning("%d occurrence(s) in non-executable segments", data_hits)
    body = report.to_dict(include_data=args.on_data == "warn")
    _emit(_report(args, data, inspection=body))
    return EXIT_OK if report.passed else EXIT_FINDING


def _policy(args):
    free = []
    for name in filter(None, (args.free_registers or "").split(",")):
        try:
            free.append(Reg(REG_NAMES_64.index(name.strip().lower())))
        except ValueError:
            raise ConfigError(f"unknown register {name!r}")
    if Reg.RSP in free or Reg.RBP in free:
        raise ConfigError("rsp and rbp cannot be declared free")
    return RewritePolicy(allow_flag_clobber=args.allow_flag_clobber, free_registers=tuple(free),
                         disallow=args.disallow)


def cmd_rewrite(args):
    data, image = _load(args)
    inspector = _inspector(args)
    entries = _entries(args, image, inspector)
    output, results = ElfIOService.rewrite_image(image, _policy(args), entries,
                                                 inspector.entry_marker)
    Path(args.output).write_bytes(output)

    mode = "raw" if args.raw else "elf"
    rewritten = ElfIOService.load(output, mode, args.base)
    verify = inspector.inspect_image(rewritten, entries)
    histogram = {}
    for result in results:
        for label, count in result.rule_histogram().items():
            histogram[label] = histogram.get(label, 0) + count
    body = _report(args, data, output={
        'path': str(args.output), 'sha256': hashlib.sha256(output).hexdigest()})
    body['rewrite'] = {
        'rules': dict(sorted(histogram.items())),
        'trampolines': sum(len(r.trampolines) for r in results),
        'relocations': sum(len(r.relocations) for r in results),
    }
    body['inspection'] = verify.to_dict(include_data=False)
    _emit(body)
    if not verify.passed:
        logger.error("rewritten output still has %d unsafe occurrence(s)", len(verify.unsafe()))
        return EXIT_FINDING
    return EXIT_OK


def cmd_gate(args):
    code = emit_call_gate(GateKind(args.mode), allow=args.allow, disallow=args.disallow)
    if args.hex:
        sys.stdout.write(code.hex() + "\n")
    else:
        sys.stdout.buffer.write(code)
        sys.stdout.flush()
    return EXIT_OK


def cmd_sim(args):
    seed = args.seed if args.seed is not None else int(os.getenv('ERIM_FORGE_SEED', 0))
    result = ScenarioRunner(seed).run_file(args.scenario)
    if args.sweep and result.sweep is None and result.machine is not None \
            and result.startup_error is None and result.machine.initialized:
        result.sweep = result.machine.attack_sweep()
    if args.trace:
        lines = result.trace_lines()
        Path(args.trace).write_text("".join(line + "\n" for line in lines))
    report = result.to_dict()
    report.update({'tool': 'erim-forge', 'version': __version__})
    _emit(report)
    ok = result.passed and (result.sweep is None or result.sweep.clean)
    if not ok and report['first_violation']:
        logger.error("first violation: %s", json.dumps(report['first_violation'], sort_keys=True))
    return EXIT_OK if ok else EXIT_FINDING


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def _image_arguments(parser):
    parser.add_argument("input", help="ELF64 executable or raw code file")
    parser.add_argument("--raw", action="store_true", help="treat input as raw code")
    parser.add_argument("--base", type=_hex, default=0, help="load address of raw code (hex)")


def _inspection_arguments(parser):
    parser.add_argument("--entries", help="file with one hex entry address per line")
    parser.add_argument("--entry-marker", default=None,
                        help="symbol substring marking entry points (ERIM_ENTRY_MARKER)")
    parser.add_argument("--disallow", type=_hex, default=PKRU_DISALLOW_TRUSTED,
                        help="PKRU value the exit check compares against (hex)")


def build_parser():
    parser = argparse.ArgumentParser(prog="erim-forge",
                                     description="WRPKRU/XRSTOR inspection and rewriting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="list WRPKRU/XRSTOR byte occurrences")
    _image_arguments(scan)
    scan.set_defaults(handler=cmd_scan)

    inspect = sub.add_parser("inspect", help="check every occurrence is safe")
    _image_arguments(inspect)
    _inspection_arguments(inspect)
    inspect.add_argument("--on-data", choices=("ignore", "warn"), default="warn",
                         help="how to report occurrences in non-executable segments")
    inspect.set_defaults(handler=cmd_inspect)

    rewrite = sub.add_parser("rewrite", help="rewrite unsafe occurrences away")
    _image_arguments(rewrite)
    rewrite.add_argument("output", help="where to write the rewritten file")
    _inspection_arguments(rewrite)
    rewrite.add_argument("--allow-flag-clobber", action="store_true",
                         help="permit rewrites that change status flags")
    rewrite.add_argument("--free-registers", default="",
                         help="comma-separated registers that are dead at every site")
    rewrite.set_defaults(handler=cmd_rewrite)

    gate = sub.add_parser("gate", help="emit call gate bytes")
    gate.add_argument("--mode", choices=[k.value for k in GateKind], default="enter")
    gate.add_argument("--allow", type=_hex, default=PKRU_ALLOW_TRUSTED)
    gate.add_argument("--disallow", type=_hex, default=PKRU_DISALLOW_TRUSTED)
    gate.add_argument("--hex", action="store_true", help="print hex instead of raw bytes")
    gate.set_defaults(handler=cmd_gate)

    sim = sub.add_parser("sim", help="run a simulator scenario")
    sim.add_argument("scenario")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--trace", help="write the line-delimited trace here")
    sim.add_argument("--sweep", action="store_true", help="run an attack sweep after the scenario")
    sim.set_defaults(handler=cmd_sim)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.handler(args)
    except USAGE_ERRORS as exc:
        _emit(_envelope(exc), sys.stderr)
        return EXIT_USAGE
    except ErimError as exc:
        _emit(_envelope(exc), sys.stderr)
        return EXIT_LIMITATION
    except OSError as exc:
        _emit({'success': False, 'message': str(exc), 'error_code': "IO_ERROR"}, sys.stderr)
        return EXIT_USAGE
