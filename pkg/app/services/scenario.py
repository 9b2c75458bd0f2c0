"""Scenario files: line-oriented scripts driving the simulator.

One directive per line, `#` starts a comment, arguments are split like a
shell command line. Machine settings come first, then `load`, then
entries and threads, then `run`, `sweep` and `expect` in any order:

    isolation full-isolation
    inspection eager
    load sample protected
    run 10000
    expect status exited
    expect output "ok\\n"
    sweep budget=2000 presets=2
    expect sweep clean

Addresses are integers (any base) or symbol names with an optional
`+offset`.
"""
import codecs
import logging
import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import load_dotenv

from app.models.errors import ErimError, ScenarioError, StartupError
from app.models.inspection import PAGE_SIZE, EntryPointSet
from app.models.sim import DomainConfig, IsolationMode
from app.services.elfio import ElfIOService
from app.services.mpksim import INTERCEPTION_MECHANISMS, Machine

load_dotenv()

logger = logging.getLogger(__name__)

SETTINGS = ("mode", "rewrite-on-fault", "interception", "isolation", "domains", "trust",
            "inspection")
MODE_FLAGS = ("private-stacks", "record-and-continue", "no-check")


@dataclass
class Directive:
    line: int
    name: str
    args: list

    def fail(self, message):
        return ScenarioError(f"{self.name}: {message}", self.line)


@dataclass
class ScenarioResult:
    source: str
    seed: int
    failures: list = field(default_factory=list)
    machine: Machine | None = None
    sweep: object = None
    startup_error: str | None = None
    violations_asserted: bool = False

    @property
    def passed(self):
        """Expectations held, and any violation was one the scenario asked for."""
        unexpected = (self.machine is not None and self.machine.violations
                      and not self.violations_asserted)
        return not self.failures and not unexpected

    def trace_lines(self):
        return self.machine.trace_lines() if self.machine is not None else []

    def to_dict(self):
        summary = self.machine.summary() if self.machine is not None else None
        return {
            'scenario': self.source,
            'seed': self.seed,
            'passed': self.passed,
            'failures': self.failures,
            'first_violation': (self.machine.violations[0].to_dict()
                                if self.machine is not None and self.machine.violations else None),
            'startup_error': self.startup_error,
            'summary': summary,
            'sweep': self.sweep.to_dict() if self.sweep is not None else None,
        }


def _int(directive, text):
    try:
        return int(text, 0)
    except ValueError:
        raise directive.fail(f"expected a number, got {text!r}")


def _options(directive, args):
    """`key=value` arguments as a dict."""
    out = {}
    for arg in args:
        key, sep, value = arg.partition("=")
        if not sep:
            raise directive.fail(f"expected key=value, got {arg!r}")
        out[key] = value
    return out


class ScenarioRunner:
    """Parses and executes one scenario against a fresh Machine."""

    def __init__(self, seed=None, base_dir=None):
        if seed is None:
            seed = int(os.getenv('ERIM_FORGE_SEED', 0))
        self.seed = seed
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.settings = {
            'inspection': None,
            'interception': None,
            'rewrite_on_fault': False,
            'private_stacks': False,
            'record_and_continue': False,
            'check': True,
        }
        self.skip_inspection = False
        self.isolation = IsolationMode.FULL
        self.components = 2
        self.trust = set()
        self.machine = None
        self.image = None
        self.entries = None
        self.trusted = []
        self.main = None
        self.main_trusted = False
        self.started = False
        self.result = None

    # ------------------------------------------------------------------
    # parsing
    # ------------------------------------------------------------------
    @staticmethod
    def parse(text):
        directives = []
        for number, raw in enumerate(text.splitlines(), start=1):
            try:
                tokens = shlex.split(raw, comments=True)
            except ValueError as exc:
                raise ScenarioError(str(exc), number)
            if tokens:
                directives.append(Directive(number, tokens[0], tokens[1:]))
        return directives

    # ------------------------------------------------------------------
    # execution
    # ------------------------------------------------------------------
    def run(self, text, source="<scenario>"):
        self.result = ScenarioResult(source, self.seed)
        for directive in self.parse(text):
            handler = getattr(self, "_do_" + directive.name.replace("-", "_"), None)
            if handler is None:
                raise directive.fail("unknown directive")
            if directive.name in SETTINGS and self.machine is not None:
                raise directive.fail("machine settings must come before load")
            logger.debug("line %d: %s %s", directive.line, directive.name, directive.args)
            handler(directive)
        self.result.machine = self.machine
        return self.result

    def run_file(self, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read {path}: {exc}")
        self.base_dir = path.parent
        return self.run(text, str(path))

    def _need_machine(self, directive):
        if self.machine is None:
            raise directive.fail("no image loaded")
        return self.machine

    def _address(self, directive, text):
        name, sep, offset = text.partition("+")
        try:
            return int(text, 0)
        except ValueError:
            pass
        address = self.image.symbol(name) if self.image is not None else None
        if address is None:
            raise directive.fail(f"unknown symbol {name!r}")
        return address + (_int(directive, offset) if sep else 0)

    def _start(self, directive):
        """Run the startup lifecycle once, on the first directive that needs it."""
        machine = self._need_machine(directive)
        if self.started:
            return machine
        self.started = True
        try:
            machine.init_lifecycle(self.image, self.entries, self.trusted, self.main_trusted,
                                   self.main, skip_inspection=self.skip_inspection)
        except StartupError as exc:
            self.result.startup_error = exc.message
            logger.info("startup aborted: %s", exc.message)
        return machine

    # settings ---------------------------------------------------------
    def _do_mode(self, d):
        for flag in d.args:
            if flag not in MODE_FLAGS:
                raise d.fail(f"unknown flag {flag!r}; expected one of {', '.join(MODE_FLAGS)}")
            key = {'no-check': 'check'}.get(flag, flag.replace("-", "_"))
            self.settings[key] = flag != "no-check"

    def _do_rewrite_on_fault(self, d):
        value = d.args[0] if d.args else "on"
        if value not in ("on", "off"):
            raise d.fail("expected on or off")
        self.settings['rewrite_on_fault'] = value == "on"

    def _do_interception(self, d):
        if len(d.args) != 1 or d.args[0] not in INTERCEPTION_MECHANISMS:
            raise d.fail(f"expected one of {', '.join(INTERCEPTION_MECHANISMS)}")
        self.settings['interception'] = d.args[0]

    def _do_isolation(self, d):
        try:
            self.isolation = IsolationMode(d.args[0])
        except (IndexError, ValueError):
            raise d.fail("expected full-isolation or integrity-only")

    def _do_domains(self, d):
        if len(d.args) != 1:
            raise d.fail("expected the number of components")
        self.components = _int(d, d.args[0])

    def _do_trust(self, d):
        if len(d.args) != 2:
            raise d.fail("expected two domain ids")
        self.trust.add((_int(d, d.args[0]), _int(d, d.args[1])))

    def _do_inspection(self, d):
        if len(d.args) != 1 or d.args[0] not in ("eager", "on-demand", "skip"):
            raise d.fail("expected eager, on-demand or skip")
        if d.args[0] == "skip":
            self.skip_inspection = True
        else:
            self.settings['inspection'] = d.args[0]

    # image ------------------------------------------------------------
    def _do_load(self, d):
        if self.machine is not None:
            raise d.fail("an image is already loaded")
        if len(d.args) < 2 or d.args[0] not in ("raw", "elf", "sample"):
            raise d.fail("expected: load raw PATH [BASE] | load elf PATH | load sample NAME")
        kind, target = d.args[0], d.args[1]
        try:
            trust = self.trust or DomainConfig().trust
            config = DomainConfig(self.components, frozenset(trust), self.isolation)
            machine = Machine(config, self.seed, **self.settings)
            if kind == "sample":
                from app.services.samples import sample

                loaded = sample(target, machine.disallow)
                self.image = loaded.image
                self.entries = loaded.entries
                self.trusted = list(loaded.trusted)
            else:
                base = _int(d, d.args[2]) if len(d.args) > 2 else 0
                self.image = ElfIOService.load(self.base_dir / target, kind, base)
        except ErimError as exc:
            raise d.fail(exc.message)
        self.machine = machine

    def _do_entry(self, d):
        self._need_machine(d)
        addresses = {self._address(d, arg) for arg in d.args}
        base = self.entries if self.entries is not None else self.image.entry_points(
            self.machine.inspector.entry_marker)
        self.entries = base.union(EntryPointSet(frozenset(addresses), ("scenario",)))

    def _do_trusted_code(self, d):
        self._need_machine(d)
        if len(d.args) != 2:
            raise d.fail("expected LO HI")
        self.trusted.append((self._address(d, d.args[0]), self._address(d, d.args[1])))

    def _do_main(self, d):
        self._need_machine(d)
        if not d.args:
            raise d.fail("expected an address")
        self.main = self._address(d, d.args[0])
        self.main_trusted = "trusted" in d.args[1:]

    def _do_handler(self, d):
        machine = self._need_machine(d)
        if len(d.args) != 2:
            raise d.fail("expected SIGNO ADDR")
        machine.handlers[_int(d, d.args[0])] = self._address(d, d.args[1])

    def _do_deny_syscall(self, d):
        machine = self._need_machine(d)
        machine.denied_syscalls.update(_int(d, arg) for arg in d.args)

    # execution --------------------------------------------------------
    def _do_thread(self, d):
        machine = self._start(d)
        if not d.args:
            raise d.fail("expected an address")
        options = _options(d, [a for a in d.args[1:] if "=" in a])
        pkru = _int(d, options['pkru']) if 'pkru' in options else None
        machine.spawn_thread(self._address(d, d.args[0]), pkru, "trusted" in d.args[1:])

    def _do_signal(self, d):
        machine = self._start(d)
        if len(d.args) != 2:
            raise d.fail("expected TID SIGNO")
        tid, signo = _int(d, d.args[0]), _int(d, d.args[1])
        if not 0 <= tid < len(machine.threads):
            raise d.fail(f"no thread {tid}")
        machine.signal(tid, signo)

    def _do_run(self, d):
        machine = self._start(d)
        if self.result.startup_error is None:
            machine.run(_int(d, d.args[0]) if d.args else None)

    def _do_sweep(self, d):
        machine = self._start(d)
        if self.result.startup_error is not None:
            raise d.fail("cannot sweep: startup was aborted")
        options = _options(d, d.args)
        region = None
        if 'region' in options:
            lo, _, hi = options['region'].partition(":")
            region = [(self._address(d, lo), self._address(d, hi))]
        elif 'trusted' in options:
            region = [(lo, hi) for lo, hi in machine.trusted_ranges]
        self.result.sweep = machine.attack_sweep(
            region,
            _int(d, options['presets']) if 'presets' in options else None,
            _int(d, options['budget']) if 'budget' in options else None)

    # assertions -------------------------------------------------------
    def _check(self, d, ok, message):
        if not ok:
            failure = f"line {d.line}: {message}"
            self.result.failures.append(failure)
            logger.info("expectation failed: %s", failure)

    def _do_expect(self, d):
        if not d.args:
            raise d.fail("expected what to check")
        what, args = d.args[0], d.args[1:]
        if what == "startup":
            wanted = args[0] if args else "ok"
            actual = "failed" if self.result.startup_error else "ok"
            self._check(d, actual == wanted, f"startup {actual}, expected {wanted}")
            return
        if what == "sweep":
            report = self.result.sweep
            if report is None:
                raise d.fail("no sweep has run")
            wanted = args[0] if args else "clean"
            actual = "clean" if report.clean else "findings"
            self._check(d, actual == wanted, f"sweep {actual} ({len(report.findings)} findings, "
                                             f"{report.exit_gate_escapes} escapes)")
            return
        machine = self._need_machine(d)
        if what in ("violations", "violation"):
            self.result.violations_asserted = True
        if what == "status":
            self._check(d, machine.status == args[0], f"status {machine.status}, expected {args[0]}")
        elif what == "exit-code":
            code = _int(d, args[0])
            self._check(d, machine.exit_code == code, f"exit code {machine.exit_code}, expected {code}")
        elif what == "output":
            wanted = codecs.decode(args[0], 'unicode_escape').encode('latin-1')
            self._check(d, bytes(machine.output) == wanted,
                        f"output {bytes(machine.output)!r}, expected {wanted!r}")
        elif what == "fault":
            actual = machine.fault.fault.value if machine.fault is not None else None
            self._check(d, actual == args[0], f"fault {actual}, expected {args[0]}")
        elif what == "violations":
            count = _int(d, args[0])
            self._check(d, len(machine.violations) == count,
                        f"{len(machine.violations)} violation(s), expected {count}")
        elif what == "violation":
            names = {v.invariant for v in machine.violations}
            self._check(d, args[0] in names, f"no {args[0]} violation (saw {sorted(names)})")
        elif what == "event":
            seen = sum(1 for e in machine.trace or () if e.event == args[0])
            wanted = _int(d, args[1]) if len(args) > 1 else None
            ok = seen == wanted if wanted is not None else seen > 0
            self._check(d, ok, f"{seen} {args[0]} event(s)")
        elif what == "denied":
            nr = _int(d, args[0])
            ok = any(e.event == "denied" and e.detail.get('nr') == nr for e in machine.trace or ())
            self._check(d, ok, f"syscall {nr} was not denied")
        elif what == "page":
            address = self._address(d, args[0])
            page = machine.pages.get(address // PAGE_SIZE)
            actual = page.to_dict() if page is not None else {}
            ok = args[1] in (actual.get('state'), actual.get('perms'))
            self._check(d, ok, f"page 0x{address:x} is {actual or 'unmapped'}, expected {args[1]}")
        else:
            raise d.fail(f"unknown expectation {what!r}")


def run_scenario(path, seed=None):
    return ScenarioRunner(seed).run_file(path)
