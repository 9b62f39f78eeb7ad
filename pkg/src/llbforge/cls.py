"""Centralized logic store: golden-sample service plus validation client.

The store keeps the authorized ("golden") copy of every controller's
logic, keyed by the 32-bit serial number burned into the project header.
Validation follows a fixed flow: extract the local file's serial, fetch
the latest golden version, normalize both, and compare structurally.  A
byte-level reformat of the same logic therefore still validates, while a
one-rung implant cannot hide behind formatting.

Three resolution decisions exist for a mismatch, all explicit:

* ``Attack``: persist an alarm record; nothing else changes.
* ``LocalNewer``: upload the local text as the next golden version
  (authorization enforced; nothing changes on a bad token).
* ``RestoreLocal``: hand back the golden text to overwrite the local copy.

On disk, a store is a directory of ``<serial-hex>/<version>.l5k`` files
plus ``index.json`` (serial to latest version and digest) and
``alarms.jsonl``.  Upload tokens live in a ``cls.toml`` key/value file
with ``token.<name> = <value>`` lines.  Mutations are atomic (write to a
temp file, then rename) and serialized per serial, so concurrent uploads
through the bundled HTTP server cannot interleave versions.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import requests

from .l5k import extract_serial, parse, serialize, ParseError
from .model import DiffReport, LadderError, diff, normalize

_SERIAL_MAX = 0xFFFFFFFF


class StoreError(LadderError):
    pass


class Unauthorized(StoreError):
    pass


class SerialMismatch(StoreError):
    pass


class ParseRejected(StoreError):
    pass


class UnknownSerial(StoreError):
    def __init__(self, serial: int):
        self.serial = serial
        super().__init__(f"no golden sample for serial {serial}")


class StoreUnreachable(StoreError):
    pass


class BadRequest(StoreError):
    pass


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _serial_dir(serial: int) -> str:
    return f"{serial:08x}"


@dataclass(frozen=True)
class GoldenRecord:
    serial_number: int
    version: int
    l5k_text: str
    digest: str
    uploader: str
    uploaded_at: str

    def to_dict(self) -> dict:
        return {
            "serial_number": self.serial_number,
            "version": self.version,
            "l5k_text": self.l5k_text,
            "digest": self.digest,
            "uploader": self.uploader,
            "uploaded_at": self.uploaded_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GoldenRecord":
        return cls(
            serial_number=int(d["serial_number"]),
            version=int(d["version"]),
            l5k_text=d["l5k_text"],
            digest=d["digest"],
            uploader=d["uploader"],
            uploaded_at=d["uploaded_at"],
        )


@dataclass(frozen=True)
class AlarmRecord:
    serial_number: int
    detected_at: str
    summary: str
    raised_by: str

    def to_dict(self) -> dict:
        return {
            "serial_number": self.serial_number,
            "detected_at": self.detected_at,
            "summary": self.summary,
            "raised_by": self.raised_by,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlarmRecord":
        return cls(int(d["serial_number"]), d["detected_at"],
                   d["summary"], d["raised_by"])


@dataclass(frozen=True)
class ValidationOutcome:
    kind: str                     # Match | Mismatch | UnknownSerial
    serial_number: int
    local_text: str
    golden: GoldenRecord | None
    diff: DiffReport | None       # set on Mismatch
    text_diff: str                # unified diff of canonical forms

    @property
    def is_match(self) -> bool:
        return self.kind == "Match"


@dataclass(frozen=True)
class ResolutionAction:
    decision: str                       # Attack | LocalNewer | RestoreLocal
    alarm: AlarmRecord | None = None
    new_record: GoldenRecord | None = None
    restored_text: str | None = None


# ---------------------------------------------------------------------------
# Token file

_TOKEN_LINE = re.compile(r"^token\.([A-Za-z_]\w*)\s*=\s*(.+?)\s*$")


def load_tokens(path) -> dict:
    """``token.<name> = <value>`` lines; names map to secret values."""
    tokens = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _TOKEN_LINE.match(line)
        if not m:
            continue
        value = m.group(2)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        tokens[m.group(1)] = value
    return tokens


# ---------------------------------------------------------------------------
# On-disk store


class LogicStore:
    """Golden-sample store rooted at a directory.

    One instance owns its directory; uploads through the same instance are
    serialized per serial number.  (Multiple writer processes on one
    directory are out of scope; the bundled server hosts exactly one
    instance.)
    """

    def __init__(self, root, tokens: dict | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.tokens = dict(tokens or {})
        self._locks: dict = {}
        self._locks_guard = threading.Lock()
        self._index_guard = threading.Lock()
        if not self._index_path.exists():
            self._write_index({})

    @classmethod
    def open(cls, root, tokens_path=None) -> "LogicStore":
        root = Path(root)
        if tokens_path is None:
            tokens_path = root / "cls.toml"
        tokens = load_tokens(tokens_path) if Path(tokens_path).exists() \
            else {}
        return cls(root, tokens)

    @property
    def _index_path(self) -> Path:
        return self.root / "index.json"

    @property
    def _alarms_path(self) -> Path:
        return self.root / "alarms.jsonl"

    def _lock_for(self, serial: int) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(serial, threading.Lock())

    def _read_index(self) -> dict:
        with self._index_guard:
            return json.loads(self._index_path.read_text(encoding="utf-8"))

    def _write_index(self, index: dict) -> None:
        with self._index_guard:
            tmp = self._index_path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
            tmp.replace(self._index_path)

    def _record_path(self, serial: int, version: int) -> Path:
        return self.root / _serial_dir(serial) / f"{version}.l5k"

    def _meta_path(self, serial: int, version: int) -> Path:
        return self.root / _serial_dir(serial) / f"{version}.json"

    def check_token(self, token: str | None) -> str:
        """Returns the token's name; raises Unauthorized otherwise."""
        if token:
            for name, value in self.tokens.items():
                if value == token:
                    return name
        raise Unauthorized("missing or unrecognized bearer token")

    def upload(self, serial: int, l5k_text: str, uploader: str,
               token: str | None) -> GoldenRecord:
        self.check_token(token)
        if not 0 <= serial <= _SERIAL_MAX:
            raise BadRequest(f"serial {serial} outside 32-bit range")
        try:
            header_serial = extract_serial(l5k_text)
            parse(l5k_text)
        except ParseError as exc:
            raise ParseRejected(str(exc)) from None
        if header_serial != serial:
            raise SerialMismatch(
                f"payload names serial {serial} but the logic header "
                f"carries {header_serial}")
        with self._lock_for(serial):
            index = self._read_index()
            key = _serial_dir(serial)
            latest = index.get(key, {}).get("latest_version", 0)
            record = GoldenRecord(
                serial_number=serial,
                version=latest + 1,
                l5k_text=l5k_text,
                digest=_digest(l5k_text),
                uploader=uploader,
                uploaded_at=_now(),
            )
            dest = self._record_path(serial, record.version)
            dest.parent.mkdir(parents=True, exist_ok=True)
            tmp = dest.with_suffix(".l5k.tmp")
            tmp.write_text(l5k_text, encoding="utf-8")
            tmp.replace(dest)
            meta = {k: v for k, v in record.to_dict().items()
                    if k != "l5k_text"}
            mtmp = self._meta_path(serial, record.version) \
                .with_suffix(".json.tmp")
            mtmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
            mtmp.replace(self._meta_path(serial, record.version))
            index[key] = {"latest_version": record.version,
                          "digest": record.digest}
            self._write_index(index)
        return record

    def fetch(self, serial: int, version: int | None = None) -> GoldenRecord:
        index = self._read_index()
        entry = index.get(_serial_dir(serial))
        if entry is None:
            raise UnknownSerial(serial)
        version = entry["latest_version"] if version is None else version
        path = self._record_path(serial, version)
        meta_path = self._meta_path(serial, version)
        if not path.exists():
            raise UnknownSerial(serial)
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        text = path.read_text(encoding="utf-8")
        return GoldenRecord(
            serial_number=serial,
            version=version,
            l5k_text=text,
            digest=meta["digest"],
            uploader=meta["uploader"],
            uploaded_at=meta["uploaded_at"],
        )

    def list_serials(self) -> list:
        index = self._read_index()
        return [
            {"serial": int(key, 16),
             "latest_version": entry["latest_version"],
             "digest": entry["digest"]}
            for key, entry in sorted(index.items())
        ]

    def post_alarm(self, alarm: AlarmRecord) -> None:
        with self._lock_for(alarm.serial_number):
            with self._alarms_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(alarm.to_dict(), sort_keys=True) + "\n")

    def alarms(self) -> list:
        if not self._alarms_path.exists():
            return []
        return [AlarmRecord.from_dict(json.loads(line))
                for line in self._alarms_path.read_text(
                    encoding="utf-8").splitlines() if line.strip()]

    def verify_integrity(self) -> None:
        """Every stored digest re-verifies and versions are gapless."""
        index = self._read_index()
        for key, entry in index.items():
            serial = int(key, 16)
            for version in range(1, entry["latest_version"] + 1):
                rec = self.fetch(serial, version)
                if _digest(rec.l5k_text) != rec.digest:
                    raise StoreError(
                        f"digest mismatch for serial {serial} "
                        f"version {version}")


# ---------------------------------------------------------------------------
# HTTP surface

_LOGIC_PATH = re.compile(r"^/v1/logic/(\d+)$")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    store: LogicStore  # set on the subclass built by make_server

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, code: int, payload: dict | list) -> None:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str) -> None:
        self._send(code, {"error": message})

    def _body_json(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        try:
            doc = json.loads(raw)
        except ValueError:
            raise BadRequest("body is not valid JSON") from None
        if not isinstance(doc, dict):
            raise BadRequest("body must be a JSON object")
        return doc

    def _bearer(self) -> str | None:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer "):].strip()
        return None

    def do_GET(self):
        m = _LOGIC_PATH.match(self.path)
        if m:
            try:
                record = self.store.fetch(int(m.group(1)))
            except UnknownSerial as exc:
                self._error(404, str(exc))
                return
            self._send(200, record.to_dict())
            return
        if self.path == "/v1/logic":
            self._send(200, self.store.list_serials())
            return
        self._error(404, f"no such resource: {self.path}")

    def do_POST(self):
        try:
            if self.path == "/v1/logic":
                doc = self._body_json()
                for field in ("serial", "l5k", "uploader"):
                    if field not in doc:
                        raise BadRequest(f"missing field {field!r}")
                record = self.store.upload(
                    int(doc["serial"]), doc["l5k"], doc["uploader"],
                    self._bearer())
                self._send(201, record.to_dict())
                return
            if self.path == "/v1/alarms":
                doc = self._body_json()
                try:
                    alarm = AlarmRecord.from_dict(doc)
                except (KeyError, ValueError):
                    raise BadRequest("malformed alarm record") from None
                self.store.post_alarm(alarm)
                self._send(201, alarm.to_dict())
                return
            self._error(404, f"no such resource: {self.path}")
        except Unauthorized as exc:
            self._error(401, str(exc))
        except SerialMismatch as exc:
            self._error(409, str(exc))
        except (BadRequest, ParseRejected) as exc:
            self._error(400, str(exc))


def make_server(store: LogicStore, host: str = "127.0.0.1",
                port: int = 0) -> ThreadingHTTPServer:
    """Bound but not yet serving; port 0 picks a free one."""
    handler = type("BoundHandler", (_Handler,), {"store": store})
    return ThreadingHTTPServer((host, port), handler)


def serve(store: LogicStore, host: str, port: int) -> None:
    with make_server(store, host, port) as httpd:
        httpd.serve_forever()


class StoreClient:
    """Synchronous client for the HTTP surface; same method shapes as
    LogicStore so validate/resolve work against either."""

    def __init__(self, base_url: str, token: str | None = None,
                 timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def _request(self, method: str, path: str, payload=None,
                 token=None):
        headers = {}
        tok = token if token is not None else self.token
        if tok:
            headers["Authorization"] = f"Bearer {tok}"
        try:
            resp = requests.request(
                method, self.base_url + path, json=payload,
                headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise StoreUnreachable(f"{self.base_url}: {exc}") from None
        if resp.status_code in (200, 201):
            return resp.json()
        try:
            message = resp.json().get("error", resp.text)
        except ValueError:
            message = resp.text
        if resp.status_code == 401:
            raise Unauthorized(message)
        if resp.status_code == 404:
            raise UnknownSerial(-1 if "serial" not in message else
                                self._serial_from(message))
        if resp.status_code == 409:
            raise SerialMismatch(message)
        raise BadRequest(message)

    @staticmethod
    def _serial_from(message: str) -> int:
        m = re.search(r"serial (\d+)", message)
        return int(m.group(1)) if m else -1

    def upload(self, serial: int, l5k_text: str, uploader: str,
               token: str | None = None) -> GoldenRecord:
        doc = self._request("POST", "/v1/logic",
                            {"serial": serial, "l5k": l5k_text,
                             "uploader": uploader},
                            token=token if token is not None else self.token)
        return GoldenRecord.from_dict(doc)

    def fetch(self, serial: int) -> GoldenRecord:
        try:
            doc = self._request("GET", f"/v1/logic/{serial}")
        except UnknownSerial:
            raise UnknownSerial(serial) from None
        return GoldenRecord.from_dict(doc)

    def list_serials(self) -> list:
        return self._request("GET", "/v1/logic")

    def post_alarm(self, alarm: AlarmRecord) -> None:
        self._request("POST", "/v1/alarms", alarm.to_dict())


# ---------------------------------------------------------------------------
# Validation flow


def _canonical(text: str) -> str:
    return serialize(normalize(parse(text)))


def validate(local_l5k: str, store) -> ValidationOutcome:
    """Extract serial, fetch latest golden, compare structurally.

    ``store`` is a LogicStore or StoreClient.  Match means the normalized
    projects are identical; formatting differences alone cannot produce a
    mismatch, and no structural change can hide.
    """
    serial = extract_serial(local_l5k)
    try:
        golden = store.fetch(serial)
    except UnknownSerial:
        return ValidationOutcome("UnknownSerial", serial, local_l5k,
                                 None, None, "")
    local_project = parse(local_l5k)
    golden_project = parse(golden.l5k_text)
    report = diff(golden_project, local_project)
    if report.is_identical:
        return ValidationOutcome("Match", serial, local_l5k, golden,
                                 None, "")
    text_diff = "".join(difflib.unified_diff(
        serialize(normalize(golden_project)).splitlines(keepends=True),
        serialize(normalize(local_project)).splitlines(keepends=True),
        fromfile=f"golden/v{golden.version}",
        tofile="local",
    ))
    return ValidationOutcome("Mismatch", serial, local_l5k, golden,
                             report, text_diff)


def resolve(outcome: ValidationOutcome, decision: str, store, *,
            token: str | None = None, operator: str = "operator"
            ) -> ResolutionAction:
    """Apply one of the three documented decisions to a Mismatch."""
    if outcome.kind != "Mismatch":
        raise StoreError(f"nothing to resolve: outcome is {outcome.kind}")
    if decision == "Attack":
        alarm = AlarmRecord(
            serial_number=outcome.serial_number,
            detected_at=_now(),
            summary=summarize_diff(outcome.diff),
            raised_by=operator,
        )
        store.post_alarm(alarm)
        return ResolutionAction("Attack", alarm=alarm)
    if decision == "LocalNewer":
        record = store.upload(outcome.serial_number, outcome.local_text,
                              operator, token)
        return ResolutionAction("LocalNewer", new_record=record)
    if decision == "RestoreLocal":
        return ResolutionAction("RestoreLocal",
                                restored_text=outcome.golden.l5k_text)
    raise StoreError(f"unknown decision {decision!r}")


def summarize_diff(report: DiffReport) -> str:
    parts = []
    for (prog, routine), rd in report.routines:
        bits = []
        if rd.added:
            bits.append(f"+{len(rd.added)} rung")
        if rd.removed:
            bits.append(f"-{len(rd.removed)} rung")
        if rd.modified:
            bits.append(f"~{len(rd.modified)} rung")
        parts.append(f"{prog}/{routine}: {', '.join(bits)}")
    if report.added_tags:
        parts.append(f"tags added: {', '.join(report.added_tags)}")
    if report.removed_tags:
        parts.append(f"tags removed: {', '.join(report.removed_tags)}")
    if report.modified_tags:
        parts.append(f"tags modified: {', '.join(report.modified_tags)}")
    if report.added_aois:
        parts.append(f"definitions added: {', '.join(report.added_aois)}")
    if report.removed_aois:
        parts.append(
            f"definitions removed: {', '.join(report.removed_aois)}")
    if report.modified_aois:
        parts.append(
            f"definitions modified: {', '.join(report.modified_aois)}")
    if report.serial_changed:
        parts.append("serial number changed")
    if report.renamed_controller:
        parts.append("controller renamed")
    return "; ".join(parts) if parts else "structural change"


__all__ = [
    "AlarmRecord", "BadRequest", "GoldenRecord", "LogicStore",
    "ParseRejected", "ResolutionAction", "SerialMismatch", "StoreClient",
    "StoreError", "StoreUnreachable", "Unauthorized", "UnknownSerial",
    "ValidationOutcome", "load_tokens", "make_server", "resolve", "serve",
    "summarize_diff", "validate",
]
