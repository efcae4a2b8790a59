"""Service graph description: parsing and validation of topology files.

Format, one declaration per line, ``#`` starts a comment::

    service <name> role <role> port <p> workers <w> queue <q> cost <ns-per-byte> slowdown <f> [capacity <bytes>] [instance <id>]
    edge <caller> <callee> <parallel|serial>
    entry <name>
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path


class Role(str, enum.Enum):
    FRONTEND = "frontend"
    LOGIC = "logic"
    CACHE = "cache"
    STORE = "store"
    BLOB = "blob"


class Mode(str, enum.Enum):
    PARALLEL = "parallel"
    SERIAL = "serial"


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    role: Role
    port: int
    workers: int = 1
    queue_capacity: int = 64
    compute_cost: float = 0.0
    slowdown: float = 1.0
    capacity: int | None = None
    instance: int | None = None


@dataclass(frozen=True)
class Edge:
    caller: str
    callee: str
    mode: Mode = Mode.SERIAL


@dataclass
class ServiceTopology:
    services: list[ServiceSpec]
    edges: list[Edge]
    entry: str

    def service(self, name: str) -> ServiceSpec:
        for s in self.services:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.services]

    def callees(self, name: str) -> list[Edge]:
        return [e for e in self.edges if e.caller == name]

    def by_role(self, role: Role) -> list[ServiceSpec]:
        return [s for s in self.services if s.role is role]

    def with_ports(self, base: int) -> "ServiceTopology":
        """Copy with ports renumbered consecutively from ``base``."""
        services = [replace(s, port=base + i) for i, s in enumerate(self.services)]
        return ServiceTopology(services, list(self.edges), self.entry)

    def with_service(self, name: str, **changes) -> "ServiceTopology":
        services = [replace(s, **changes) if s.name == name else s for s in self.services]
        return ServiceTopology(services, list(self.edges), self.entry)

    def to_text(self) -> str:
        lines = []
        for s in self.services:
            line = (f"service {s.name} role {s.role.value} port {s.port} workers {s.workers} "
                    f"queue {s.queue_capacity} cost {s.compute_cost:g} slowdown {s.slowdown:g}")
            if s.capacity is not None:
                line += f" capacity {s.capacity}"
            if s.instance is not None:
                line += f" instance {s.instance}"
            lines.append(line)
        lines += [f"edge {e.caller} {e.callee} {e.mode.value}" for e in self.edges]
        lines.append(f"entry {self.entry}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TopologyIssue:
    kind: str  # SyntaxError, DuplicateService, UnknownRole, UnknownService, Cycle, PortCollision, ...
    reason: str
    line: int | None = None
    elements: tuple[str, ...] = ()

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.kind}: {self.reason}"


class TopologyError(ValueError):
    def __init__(self, issues: list[TopologyIssue]):
        super().__init__("; ".join(str(i) for i in issues))
        self.issues = issues


_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")
_REQUIRED = ("role", "port", "workers", "queue", "cost", "slowdown")
_OPTIONAL = ("capacity", "instance")


def _parse_service(tokens: list[str], lineno: int, issues: list[TopologyIssue]) -> ServiceSpec | None:
    if len(tokens) < 2 or len(tokens) % 2:
        issues.append(TopologyIssue("SyntaxError", "service needs a name and key/value pairs", lineno))
        return None
    name = tokens[1]
    if not _NAME.match(name):
        issues.append(TopologyIssue("SyntaxError", f"bad service name {name!r}", lineno, (name,)))
        return None
    kv: dict[str, str] = {}
    for key, value in zip(tokens[2::2], tokens[3::2]):
        if key not in _REQUIRED and key not in _OPTIONAL:
            issues.append(TopologyIssue("SyntaxError", f"unknown key {key!r}", lineno, (name,)))
            return None
        if key in kv:
            issues.append(TopologyIssue("SyntaxError", f"repeated key {key!r}", lineno, (name,)))
            return None
        kv[key] = value
    missing = [k for k in _REQUIRED if k not in kv]
    if missing:
        issues.append(TopologyIssue("SyntaxError", f"missing {', '.join(missing)}", lineno, (name,)))
        return None
    try:
        role = Role(kv["role"])
    except ValueError:
        issues.append(TopologyIssue("UnknownRole", f"role {kv['role']!r}", lineno, (name,)))
        return None
    try:
        port = int(kv["port"])
        workers = int(kv["workers"])
        queue = int(kv["queue"])
        cost = float(kv["cost"])
        slowdown = float(kv["slowdown"])
        capacity = int(kv["capacity"]) if "capacity" in kv else None
        instance = int(kv["instance"]) if "instance" in kv else None
    except ValueError as exc:
        issues.append(TopologyIssue("SyntaxError", f"bad number: {exc}", lineno, (name,)))
        return None
    problems = []
    if not 0 < port < 65536:
        problems.append("port must be in 1..65535")
    if workers < 1:
        problems.append("workers must be >= 1")
    if queue < 1:
        problems.append("queue must be >= 1")
    if not cost >= 0:
        problems.append("cost must be >= 0")
    if not slowdown > 0:
        problems.append("slowdown must be > 0")
    if capacity is not None and capacity < 1:
        problems.append("capacity must be >= 1")
    if instance is not None and not 0 <= instance < 1 << 16:
        problems.append("instance must fit in 16 bits")
    if problems:
        issues.append(TopologyIssue("SyntaxError", "; ".join(problems), lineno, (name,)))
        return None
    return ServiceSpec(name, role, port, workers, queue, cost, slowdown, capacity, instance)


def parse_topology(text: str) -> ServiceTopology:
    """Parse a topology document; raises TopologyError listing every problem found."""
    issues: list[TopologyIssue] = []
    services: list[ServiceSpec] = []
    seen: dict[str, int] = {}
    edges: list[tuple[Edge, int]] = []
    entries: list[tuple[str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "service":
            spec = _parse_service(tokens, lineno, issues)
            if spec is None:
                continue
            if spec.name in seen:
                issues.append(TopologyIssue(
                    "DuplicateService", f"{spec.name} already declared on line {seen[spec.name]}",
                    lineno, (spec.name,)))
                continue
            seen[spec.name] = lineno
            services.append(spec)
        elif head == "edge":
            if len(tokens) not in (3, 4):
                issues.append(TopologyIssue("SyntaxError", "edge <caller> <callee> [parallel|serial]", lineno))
                continue
            mode = tokens[3] if len(tokens) == 4 else "serial"
            try:
                edges.append((Edge(tokens[1], tokens[2], Mode(mode)), lineno))
            except ValueError:
                issues.append(TopologyIssue("SyntaxError", f"edge mode {mode!r}", lineno))
        elif head == "entry":
            if len(tokens) != 2:
                issues.append(TopologyIssue("SyntaxError", "entry <name>", lineno))
                continue
            entries.append((tokens[1], lineno))
        else:
            issues.append(TopologyIssue("SyntaxError", f"unknown declaration {head!r}", lineno))

    for edge, lineno in edges:
        for end in (edge.caller, edge.callee):
            if end not in seen:
                issues.append(TopologyIssue("UnknownService", f"edge references undeclared service {end}",
                                            lineno, (end,)))
    if not entries:
        issues.append(TopologyIssue("SyntaxError", "no entry declared"))
    elif len(entries) > 1:
        issues.append(TopologyIssue("SyntaxError", "more than one entry", entries[1][1]))
    elif entries[0][0] not in seen:
        issues.append(TopologyIssue("UnknownService", f"entry {entries[0][0]} is not declared",
                                    entries[0][1], (entries[0][0],)))
    if issues:
        raise TopologyError(issues)
    return ServiceTopology(services, [e for e, _ in edges], entries[0][0])


def find_cycles(names: list[str], edges: list[tuple[str, str]]) -> list[list[str]]:
    """One representative cycle per strongly connected component with a cycle."""
    graph: dict[str, list[str]] = {n: [] for n in names}
    for a, b in edges:
        graph.setdefault(a, []).append(b)
        graph.setdefault(b, [])
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    comps: list[list[str]] = []
    counter = 0

    def strong(v: str) -> None:
        nonlocal counter
        index[v] = low[v] = counter
        counter += 1
        stack.append(v)
        on_stack.add(v)
        for w in graph[v]:
            if w not in index:
                strong(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            if len(comp) > 1 or v in graph[v]:
                comps.append(comp)

    for n in graph:
        if n not in index:
            strong(n)

    cycles = []
    for comp in comps:
        members = set(comp)
        start = min(comp)
        # walk inside the component until a node repeats
        path = [start]
        pos = {start: 0}
        node = start
        while True:
            node = min(w for w in graph[node] if w in members)
            if node in pos:
                cycles.append(path[pos[node]:])
                break
            pos[node] = len(path)
            path.append(node)
    return cycles


def validate(t: ServiceTopology) -> list[TopologyIssue]:
    issues: list[TopologyIssue] = []
    names = [s.name for s in t.services]
    declared = set()
    for n in names:
        if n in declared:
            issues.append(TopologyIssue("DuplicateService", f"{n} declared twice", elements=(n,)))
        declared.add(n)
    ports: dict[int, str] = {}
    for s in t.services:
        if s.port in ports:
            issues.append(TopologyIssue("PortCollision", f"{ports[s.port]} and {s.name} both use port {s.port}",
                                        elements=(ports[s.port], s.name)))
        else:
            ports[s.port] = s.name
        if not s.slowdown > 0:
            issues.append(TopologyIssue("BadSlowdown", f"{s.name} slowdown {s.slowdown}", elements=(s.name,)))
    if t.entry not in declared:
        issues.append(TopologyIssue("UnknownService", f"entry {t.entry} is not declared", elements=(t.entry,)))
    pairs = set()
    for e in t.edges:
        for end in (e.caller, e.callee):
            if end not in declared:
                issues.append(TopologyIssue("UnknownService", f"edge references {end}", elements=(end,)))
        if (e.caller, e.callee) in pairs:
            issues.append(TopologyIssue("DuplicateEdge", f"{e.caller} -> {e.callee}", elements=(e.caller, e.callee)))
        pairs.add((e.caller, e.callee))
    for cycle in find_cycles(names, [(e.caller, e.callee) for e in t.edges]):
        issues.append(TopologyIssue("Cycle", " -> ".join(cycle + cycle[:1]), elements=tuple(cycle)))
    return issues


def default_topology_text() -> str:
    return resources.files("moviebench").joinpath("data/movie.topo").read_text()


def load_topology(path: str | Path | None = None) -> ServiceTopology:
    text = default_topology_text() if path is None else Path(path).read_text()
    return parse_topology(text)
