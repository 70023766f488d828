"""Agent behaviors and the capabilities a station hands them.

A behavior is the executable logic of an agent, resolved by behavior_id
from the station's registry. The station drives it cooperatively: step()
until it asks to move or finish, handle_command() for every command that
arrives over an attach channel. Both are serialized per agent.

Four behaviors ship built in: an itinerant connectivity tester that logs
arrivals and departures, a file access service with control-channel and
raw-stream transports, an itinerant term search over station file trees,
and a tabular query service over station-registered CSV tables.
"""
from __future__ import annotations

import base64
import csv
import re
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import MeshError
from .wire import canonical_json

CONTROL_CHUNK = 256 * 1024
STREAM_TOKEN_BYTES = 16
STREAM_TOKEN_TTL_S = 30.0

_TOKEN_RE = re.compile(r"[0-9A-Za-z]+")
_OPS = ("=", "!=", "<", "<=", ">", ">=")


class SandboxViolation(MeshError):
    code = "SANDBOX_VIOLATION"


class IOFailure(MeshError):
    code = "IO_ERROR"


class UnknownTable(MeshError):
    code = "UNKNOWN_TABLE"


class UnknownColumn(MeshError):
    code = "UNKNOWN_COLUMN"


class MalformedPredicate(MeshError):
    code = "MALFORMED_PREDICATE"


class UnknownCommand(MeshError):
    code = "UNKNOWN_COMMAND"


class BadParams(MeshError):
    code = "BAD_PARAMS"


@dataclass(frozen=True)
class Continue:
    pass


@dataclass(frozen=True)
class MoveTo:
    endpoint: str


@dataclass(frozen=True)
class Finish:
    result: bytes


CONTINUE = Continue()


class SandboxFS:
    """File operations jailed under a station's fs_root.

    Every path is resolved (symlinks included) and must land inside the
    root; anything else is a SANDBOX_VIOLATION.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root).resolve()

    def resolve(self, rel: str) -> Path:
        candidate = (self.root / rel).resolve()
        if candidate != self.root and not candidate.is_relative_to(self.root):
            raise SandboxViolation(f"path {rel!r} escapes the sandbox")
        return candidate

    def list_dir(self, rel: str) -> list[dict]:
        path = self.resolve(rel)
        if not path.is_dir():
            raise MeshError(f"no directory {rel!r}", code="NOT_FOUND")
        entries = []
        for child in sorted(path.iterdir(), key=lambda p: p.name):
            try:
                size = child.stat().st_size if child.is_file() else 0
            except OSError:
                size = 0
            entries.append(
                {
                    "name": child.name,
                    "kind": "dir" if child.is_dir() else "file",
                    "size": size,
                }
            )
        return entries

    def stat(self, rel: str) -> dict:
        path = self.resolve(rel)
        if not path.exists():
            raise MeshError(f"no such path {rel!r}", code="NOT_FOUND")
        st = path.stat()
        return {
            "name": path.name,
            "kind": "dir" if path.is_dir() else "file",
            "size": st.st_size if path.is_file() else 0,
            "mtime": int(st.st_mtime * 1000),
        }

    def read_bytes(self, rel: str) -> bytes:
        path = self.resolve(rel)
        if not path.is_file():
            raise MeshError(f"no such file {rel!r}", code="NOT_FOUND")
        try:
            return path.read_bytes()
        except OSError as exc:
            raise IOFailure(str(exc)) from exc

    def write_bytes(self, rel: str, data: bytes) -> int:
        path = self.resolve(rel)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as exc:
            raise IOFailure(str(exc)) from exc
        return len(data)

    def walk_files(self, rel: str) -> list[Path]:
        root = self.resolve(rel)
        if not root.is_dir():
            raise MeshError(f"no directory {rel!r}", code="NOT_FOUND")
        found = [p for p in sorted(root.rglob("*")) if p.is_file()]
        # rglob follows directory symlinks; re-check every hit
        return [p for p in found if p.resolve().is_relative_to(self.root)]

    def relative(self, path: Path) -> str:
        return str(path.resolve().relative_to(self.root))


class TableCatalog:
    """Station-registered CSV tables exposed to data-query agents."""

    def __init__(self, tables: dict[str, str | Path]):
        self._tables = {name: Path(p) for name, p in tables.items()}

    def list_tables(self) -> list[dict]:
        out = []
        for name in sorted(self._tables):
            columns, _ = self._read(name)
            out.append({"name": name, "columns": columns})
        return out

    def table_names(self) -> list[str]:
        return sorted(self._tables)

    def _read(self, name: str) -> tuple[list[str], list[list[str]]]:
        path = self._tables.get(name)
        if path is None:
            raise UnknownTable(f"no table {name!r}")
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise IOFailure(str(exc)) from exc
        if not rows:
            return [], []
        return rows[0], rows[1:]

    def query(
        self, name: str, columns: list[str] | None, clauses: list
    ) -> tuple[list[str], list[list[str]]]:
        header, rows = self._read(name)
        parsed = _parse_clauses(clauses, header)
        selected = header if not columns else list(columns)
        for col in selected:
            if col not in header:
                raise UnknownColumn(f"no column {col!r} in {name}")
        idx = [header.index(c) for c in selected]
        out = []
        for row in rows:
            if all(_clause_holds(row, header, c) for c in parsed):
                out.append([row[i] if i < len(row) else "" for i in idx])
        return selected, out


def _parse_clauses(clauses, header: list[str]) -> list[tuple[str, str, str]]:
    if clauses is None:
        return []
    if not isinstance(clauses, list):
        raise MalformedPredicate("predicate must be a list of clauses")
    parsed = []
    for clause in clauses:
        if isinstance(clause, dict):
            try:
                column, op, value = clause["column"], clause["op"], clause["value"]
            except KeyError as exc:
                raise MalformedPredicate(f"clause missing {exc}") from exc
        elif isinstance(clause, (list, tuple)) and len(clause) == 3:
            column, op, value = clause
        else:
            raise MalformedPredicate(f"bad clause shape: {clause!r}")
        if not isinstance(column, str) or op not in _OPS:
            raise MalformedPredicate(f"bad clause: {clause!r}")
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise MalformedPredicate(f"bad literal: {value!r}")
        if column not in header:
            raise UnknownColumn(f"no column {column!r}")
        parsed.append((column, op, str(value)))
    return parsed


def _as_number(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def _clause_holds(row: list[str], header: list[str], clause: tuple[str, str, str]) -> bool:
    column, op, literal = clause
    i = header.index(column)
    cell = row[i] if i < len(row) else ""
    a, b = _as_number(cell), _as_number(literal)
    if a is not None and b is not None:
        left, right = a, b
    else:
        left, right = cell, literal
    if op == "=":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    return left >= right


class AgentContext:
    """Capabilities the station hands a behavior. Read-only identity and
    clock, a sandboxed file system, the table catalog, plus per-session
    send and stream-transfer facilities wired in by the station."""

    def __init__(
        self,
        station_id: str,
        station_endpoint: str,
        fs: SandboxFS,
        catalog: TableCatalog,
        clock=None,
    ):
        self.station_id = station_id
        self.station_endpoint = station_endpoint
        self.fs = fs
        self.catalog = catalog
        self.now_ms = clock or (lambda: int(time.time() * 1000))
        self.arrival_ms = 0
        self.itinerary: tuple[str, ...] = ()
        self.hop_index = 0
        self._travel_log = ()
        self._session_send = None
        self._stream_starter = None

    def travel_log(self) -> tuple:
        return self._travel_log

    def session_send(self, frame: dict) -> None:
        if self._session_send is None:
            raise MeshError("no attached session", code="NO_SESSION")
        self._session_send(frame)

    def start_stream_transfer(self, mode: str, handler) -> None:
        """Hand a byte-moving callback to the station's transfer context.

        The station allocates the ephemeral port, announces STREAM_READY on
        the session, validates the single-use token, runs ``handler(sock)``
        in a transfer thread, and closes out the session with REPLY/ERROR.
        """
        if self._stream_starter is None:
            raise MeshError("no attached session", code="NO_SESSION")
        self._stream_starter(mode, handler)


class Behavior:
    behavior_id = ""
    uses_itinerary = False

    @staticmethod
    def initial_state(params: dict) -> dict:
        raise NotImplementedError

    def __init__(self, state: dict):
        self.state = dict(state)
        self.state.setdefault("recalled", False)

    # lifecycle hooks -----------------------------------------------------
    def on_arrive(self, ctx: AgentContext) -> None:
        pass

    def on_move_failed(self, ctx: AgentContext, dest: str, reason: str) -> None:
        pass

    def step(self, ctx: AgentContext) -> Continue | MoveTo | Finish:
        return CONTINUE

    def handle_command(self, ctx: AgentContext, cmd: dict) -> dict | None:
        name = cmd.get("cmd")
        if name == "recall":
            self.state["recalled"] = True
            return {"ok": True, "recalled": True}
        if name == "ping":
            return {"ok": True, "station_id": ctx.station_id}
        raise UnknownCommand(f"command {name!r}")

    def serialize_state(self) -> bytes:
        return canonical_json(self.state)

    # shared recall choreography: head home, then finish
    def _recall_action(self, ctx: AgentContext, result: bytes) -> Continue | MoveTo | Finish:
        origin = self.state.get("origin") or ""
        if origin and origin != ctx.station_endpoint:
            return MoveTo(origin)
        return Finish(result)


class ConnectivityTest(Behavior):
    """Hops along its itinerary, dwelling at each station, and finishes
    with the travel log it accumulated; hop count includes the launch
    arrival, so n hops leave exactly n log entries."""

    behavior_id = "connectivity-test/1"
    uses_itinerary = True

    @staticmethod
    def initial_state(params: dict) -> dict:
        itinerary = params.get("itinerary")
        if not isinstance(itinerary, list) or not all(isinstance(s, str) for s in itinerary):
            raise BadParams("itinerary must be a list of station endpoints")
        dwell = params.get("dwell_ms")
        if not isinstance(dwell, int) or dwell < 0:
            raise BadParams("dwell_ms must be a non-negative integer")
        hops = params.get("hops")
        if not isinstance(hops, int) or hops < 0:
            raise BadParams("hops must be a non-negative integer")
        return {
            "dwell_ms": dwell,
            "remaining_hops": hops,
            "origin": str(params.get("origin") or ""),
            "move_failures": 0,
            "failure_note": "",
            "recalled": False,
        }

    def on_arrive(self, ctx: AgentContext) -> None:
        self.state["remaining_hops"] -= 1
        self.state["move_failures"] = 0

    def on_move_failed(self, ctx: AgentContext, dest: str, reason: str) -> None:
        failures = self.state["move_failures"] + 1
        self.state["move_failures"] = failures
        if failures >= 3:
            self.state["failure_note"] = f"move to {dest} aborted 3 times: {reason}"

    def _log_json(self, ctx: AgentContext) -> list[dict]:
        return [entry.to_json() for entry in ctx.travel_log()]

    def step(self, ctx: AgentContext):
        log = self._log_json(ctx)
        if self.state["recalled"]:
            return self._recall_action(ctx, canonical_json(log))
        if self.state["failure_note"]:
            return Finish(
                canonical_json({"travel_log": log, "failure": self.state["failure_note"]})
            )
        if self.state["remaining_hops"] <= 0:
            return Finish(canonical_json(log))
        if ctx.now_ms() - ctx.arrival_ms < self.state["dwell_ms"]:
            return CONTINUE
        nxt = self._next_stop(ctx)
        return MoveTo(nxt) if nxt else CONTINUE

    def _next_stop(self, ctx: AgentContext) -> str | None:
        n = len(ctx.itinerary)
        for offset in range(n):
            candidate = ctx.itinerary[(ctx.hop_index + offset) % n]
            if candidate != ctx.station_endpoint:
                return candidate
        return None

    def handle_command(self, ctx: AgentContext, cmd: dict):
        if cmd.get("cmd") == "status":
            return {
                "ok": True,
                "remaining_hops": self.state["remaining_hops"],
                "station_id": ctx.station_id,
                "log_entries": len(ctx.travel_log()),
            }
        return super().handle_command(ctx, cmd)


class FileAccess(Behavior):
    """Stationary service giving its owner the station's sandboxed file
    tree over the attach channel, with a choice of transports: base64
    chunks on the control channel, or a dedicated raw TCP stream."""

    behavior_id = "file-access/1"

    @staticmethod
    def initial_state(params: dict) -> dict:
        return {"origin": str(params.get("origin") or ""), "recalled": False}

    def step(self, ctx: AgentContext):
        if self.state["recalled"]:
            return self._recall_action(ctx, canonical_json({"done": True}))
        return CONTINUE

    def handle_command(self, ctx: AgentContext, cmd: dict):
        name = cmd.get("cmd")
        if name == "list":
            return {"ok": True, "entries": ctx.fs.list_dir(cmd.get("path", "."))}
        if name == "stat":
            return {"ok": True, **ctx.fs.stat(cmd.get("path", "."))}
        if name == "read":
            return self._read(ctx, cmd)
        if name == "write":
            return self._write(ctx, cmd)
        return super().handle_command(ctx, cmd)

    def _read(self, ctx: AgentContext, cmd: dict):
        path = cmd.get("path", "")
        transport = cmd.get("transport", "control")
        if transport == "control":
            data = ctx.fs.read_bytes(path)
            for start in range(0, len(data), CONTROL_CHUNK):
                chunk = data[start : start + CONTROL_CHUNK]
                ctx.session_send(
                    {
                        "type": "DATA",
                        "payload": {
                            "seq": start // CONTROL_CHUNK,
                            "chunk": base64.b64encode(chunk).decode("ascii"),
                        },
                    }
                )
            return {"ok": True, "bytes": len(data)}
        if transport == "stream":
            resolved = ctx.fs.resolve(path)
            if not resolved.is_file():
                raise MeshError(f"no such file {path!r}", code="NOT_FOUND")

            def pump(sock) -> int:
                sent = 0
                with open(resolved, "rb") as fh:
                    while True:
                        chunk = fh.read(1 << 20)
                        if not chunk:
                            break
                        sock.sendall(chunk)
                        sent += len(chunk)
                return sent

            ctx.start_stream_transfer("read", pump)
            return None
        raise MeshError(f"transport {transport!r}", code="BAD_TRANSPORT")

    def _write(self, ctx: AgentContext, cmd: dict):
        path = cmd.get("path", "")
        transport = cmd.get("transport", "control")
        if transport == "control":
            data = cmd.get("_data", b"")
            written = ctx.fs.write_bytes(path, data)
            return {"ok": True, "bytes": written}
        if transport == "stream":
            target = ctx.fs.resolve(path)

            def pump(sock) -> int:
                chunks = []
                while True:
                    chunk = sock.recv(1 << 20)
                    if not chunk:
                        break
                    chunks.append(chunk)
                data = b"".join(chunks)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
                return len(data)

            ctx.start_stream_transfer("write", pump)
            return None
        raise MeshError(f"transport {transport!r}", code="BAD_TRANSPORT")


class Search(Behavior):
    """Visits each itinerary station, weighs every file under its roots
    against the query terms, then carries the ranked hits home.

    A file's weight is the number of its tokens (maximal ASCII alnum runs,
    lowercased) that exactly match query terms, summed over terms.
    """

    behavior_id = "search/1"
    uses_itinerary = True

    @staticmethod
    def initial_state(params: dict) -> dict:
        terms = params.get("query_terms")
        if not isinstance(terms, list) or not terms or not all(
            isinstance(t, str) and t for t in terms
        ):
            raise BadParams("query_terms must be a non-empty list of strings")
        itinerary = params.get("itinerary")
        if not isinstance(itinerary, list) or not itinerary:
            raise BadParams("itinerary must name at least one station")
        roots = params.get("roots", ["."])
        if not isinstance(roots, list) or not all(isinstance(r, str) for r in roots):
            raise BadParams("roots must be a list of relative directories")
        origin = params.get("origin")
        if not isinstance(origin, str) or not origin:
            raise BadParams("origin endpoint is required")
        return {
            "query_terms": [t.lower() for t in terms],
            "roots": roots,
            "origin": origin,
            "visited": 0,
            "hits": [],
            "skipped_files": 0,
            "searched_here": False,
            "returning": False,
            "recalled": False,
        }

    def on_arrive(self, ctx: AgentContext) -> None:
        self.state["searched_here"] = False

    def on_move_failed(self, ctx: AgentContext, dest: str, reason: str) -> None:
        # a dead stop is skipped rather than retried forever
        if self.state["returning"]:
            return
        self.state["visited"] += 1

    def _result(self) -> bytes:
        hits = sorted(
            self.state["hits"],
            key=lambda h: (-h["weight"], h["station_id"], h["path"]),
        )
        return canonical_json(
            {"hits": hits, "skipped_files": self.state["skipped_files"]}
        )

    def step(self, ctx: AgentContext):
        if self.state["recalled"]:
            self.state["returning"] = True
        if self.state["returning"]:
            origin = self.state["origin"]
            if origin == ctx.station_endpoint:
                return Finish(self._result())
            return MoveTo(origin)
        if not self.state["searched_here"]:
            self._search_station(ctx)
            self.state["searched_here"] = True
            self.state["visited"] += 1
        itinerary = ctx.itinerary
        if self.state["visited"] < len(itinerary):
            return MoveTo(itinerary[self.state["visited"]])
        self.state["returning"] = True
        if self.state["origin"] == ctx.station_endpoint:
            return Finish(self._result())
        return MoveTo(self.state["origin"])

    def _search_station(self, ctx: AgentContext) -> None:
        terms = self.state["query_terms"]
        for root in self.state["roots"]:
            try:
                files = ctx.fs.walk_files(root)
            except MeshError:
                continue
            for path in files:
                try:
                    text = path.read_bytes().decode("utf-8")
                except (OSError, UnicodeDecodeError):
                    self.state["skipped_files"] += 1
                    continue
                counts = Counter(tok.lower() for tok in _TOKEN_RE.findall(text))
                weight = sum(counts[t] for t in terms)
                if weight > 0:
                    self.state["hits"].append(
                        {
                            "path": ctx.fs.relative(path),
                            "weight": weight,
                            "station_id": ctx.station_id,
                        }
                    )

    def handle_command(self, ctx: AgentContext, cmd: dict):
        if cmd.get("cmd") == "status":
            return {
                "ok": True,
                "visited": self.state["visited"],
                "hits": len(self.state["hits"]),
                "returning": self.state["returning"],
            }
        return super().handle_command(ctx, cmd)


class DataQuery(Behavior):
    """Stationary service answering conjunctive filters over the CSV
    tables its current station registers. The catalog it serves is the
    snapshot taken when it arrived."""

    behavior_id = "data-query/1"

    @staticmethod
    def initial_state(params: dict) -> dict:
        return {
            "origin": str(params.get("origin") or ""),
            "catalog": [],
            "recalled": False,
        }

    def on_arrive(self, ctx: AgentContext) -> None:
        self.state["catalog"] = ctx.catalog.list_tables()

    def step(self, ctx: AgentContext):
        if self.state["recalled"]:
            return self._recall_action(ctx, canonical_json({"done": True}))
        return CONTINUE

    def handle_command(self, ctx: AgentContext, cmd: dict):
        name = cmd.get("cmd")
        if name == "catalog":
            return {"ok": True, "tables": self.state["catalog"]}
        if name == "query":
            table = cmd.get("table", "")
            if table not in {t["name"] for t in self.state["catalog"]}:
                raise UnknownTable(f"no table {table!r}")
            columns, rows = ctx.catalog.query(
                table, cmd.get("columns"), cmd.get("predicate")
            )
            return {"ok": True, "columns": columns, "rows": rows}
        return super().handle_command(ctx, cmd)


BUILTIN_BEHAVIORS: dict[str, type[Behavior]] = {
    cls.behavior_id: cls
    for cls in (ConnectivityTest, FileAccess, Search, DataQuery)
}


def restore_behavior(behavior_id: str, state_blob: bytes, registry=None) -> Behavior:
    import json

    registry = registry or BUILTIN_BEHAVIORS
    cls = registry.get(behavior_id)
    if cls is None:
        raise MeshError(f"behavior {behavior_id!r} not available", code="UNKNOWN_BEHAVIOR")
    state = json.loads(state_blob.decode("utf-8")) if state_blob else {}
    return cls(state)
