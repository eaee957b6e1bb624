"""Text-completion backends: remote HTTP, cassette replay/record, persistent cache.

A request is identified by its fingerprint: the SHA-256 hex digest of the
UTF-8 JSON object ``{"model_id", "seed", "system_text", "temperature",
"user_text"}`` dumped with sorted keys, ``(",", ":")`` separators and
``ensure_ascii=False``; temperature is written as a float. ``max_output_tokens``
is not part of it. Distinct canonical inputs collide only if SHA-256 does.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sqlite3
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Protocol, Sequence

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-4o-mini"
DEFAULT_TEMPERATURE = 0.0
DEFAULT_SEED = 42
API_KEY_ENV = "LEGACY2CACAO_API_KEY"
RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    pass


class ReplayMiss(BackendError):
    def __init__(self, fingerprint: str):
        super().__init__(f"cassette has no response for request {fingerprint}")
        self.fingerprint = fingerprint


class RemoteError(BackendError):
    def __init__(self, status: int | None, body: str):
        super().__init__(f"remote backend failed (status {status}): {body[:200]}")
        self.status = status
        self.body = body


class BackendTimeout(BackendError):
    pass


class UnknownModelPrice(KeyError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    system_text: str
    user_text: str
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = DEFAULT_SEED
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    tokens_in: int
    tokens_out: int
    latency_ms: int = 0
    source: str = "remote"  # remote | cache | cassette
    model_id: str = ""

    def __post_init__(self) -> None:
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be >= 0")


def fingerprint(req: CompletionRequest) -> str:
    canonical = json.dumps(
        {
            "model_id": req.model_id,
            "temperature": float(req.temperature),
            "seed": int(req.seed),
            "system_text": req.system_text,
            "user_text": req.user_text,
        },
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def complete(self, req: CompletionRequest) -> CompletionResponse: ...


def _request_to_obj(req: CompletionRequest) -> dict:
    return asdict(req)


def _response_to_obj(resp: CompletionResponse) -> dict:
    return {
        "text": resp.text,
        "tokens_in": resp.tokens_in,
        "tokens_out": resp.tokens_out,
        "latency_ms": resp.latency_ms,
    }


# ------------------------------------------------------------------- cassettes


@dataclass
class Cassette:
    """Recorded request/response pairs, kept in recording order."""

    entries: dict[str, tuple[CompletionRequest, CompletionResponse]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Cassette:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        cassette = cls()
        for item in raw["interactions"]:
            req = CompletionRequest(**item["request"])
            stored = item["fingerprint"]
            if fingerprint(req) != stored:
                raise ValueError(f"{path}: fingerprint {stored} does not match its embedded request")
            resp = CompletionResponse(source="cassette", model_id=req.model_id, **item["response"])
            cassette.entries[stored] = (req, resp)
        return cassette

    def add(self, req: CompletionRequest, resp: CompletionResponse) -> None:
        self.entries[fingerprint(req)] = (req, resp)

    def to_obj(self) -> dict:
        return {
            "version": 1,
            "interactions": [
                {"fingerprint": fp, "request": _request_to_obj(req), "response": _response_to_obj(resp)}
                for fp, (req, resp) in self.entries.items()
            ],
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_obj(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


class ReplayBackend:
    """Answers only from a cassette; never opens a network connection."""

    def __init__(self, cassette: Cassette):
        self.cassette = cassette
        self._lock = threading.Lock()
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> ReplayBackend:
        return cls(Cassette.load(path))

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        fp = fingerprint(req)
        with self._lock:
            self.calls.append(fp)
        hit = self.cassette.entries.get(fp)
        if hit is None:
            raise ReplayMiss(fp)
        return replace(hit[1], source="cassette", model_id=req.model_id)


class RecordingBackend:
    """Forwards to ``inner`` and appends every exchange to a cassette file."""

    def __init__(self, inner: Backend, path: str | os.PathLike, cassette: Cassette | None = None):
        self.inner = inner
        self.path = Path(path)
        self.cassette = cassette if cassette is not None else Cassette()
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        resp = self.inner.complete(req)
        with self._lock:
            self.cassette.add(req, resp)
            self.cassette.save(self.path)
        return resp


class CallableBackend:
    """Wraps ``fn(request) -> text``; token counts use the chars/4 estimate."""

    def __init__(self, fn: Callable[[CompletionRequest], str]):
        self.fn = fn
        self.calls: list[CompletionRequest] = []

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        self.calls.append(req)
        text = self.fn(req)
        return CompletionResponse(
            text=text,
            tokens_in=-(-len(req.system_text + req.user_text) // 4),
            tokens_out=-(-len(text) // 4),
            source="remote",
            model_id=req.model_id,
        )


# ---------------------------------------------------------------------- cache


class CachingBackend:
    """Cache-through wrapper persisting responses in an SQLite file keyed by fingerprint."""

    def __init__(self, inner: Backend | None, path: str | os.PathLike):
        self.inner = inner
        self.path = str(path)
        self._write_lock = threading.Lock()
        with self._connect() as db:
            db.execute("PRAGMA journal_mode=WAL")
            db.execute(
                "CREATE TABLE IF NOT EXISTS responses ("
                " fingerprint TEXT PRIMARY KEY, request TEXT NOT NULL, response TEXT NOT NULL)"
            )

    @contextmanager
    def _connect(self) -> Iterator[sqlite3.Connection]:
        db = sqlite3.connect(self.path, timeout=30)
        try:
            with db:
                yield db
        finally:
            db.close()

    def get(self, fp: str) -> CompletionResponse | None:
        with self._connect() as db:
            row = db.execute("SELECT request, response FROM responses WHERE fingerprint = ?", (fp,)).fetchone()
        if row is None:
            return None
        req = json.loads(row[0])
        return CompletionResponse(source="cache", model_id=req["model_id"], **json.loads(row[1]))

    def put(self, req: CompletionRequest, resp: CompletionResponse) -> None:
        with self._write_lock, self._connect() as db:
            db.execute(
                "INSERT OR REPLACE INTO responses VALUES (?, ?, ?)",
                (fingerprint(req), json.dumps(_request_to_obj(req)), json.dumps(_response_to_obj(resp))),
            )

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        fp = fingerprint(req)
        cached = self.get(fp)
        if cached is not None:
            return cached
        if self.inner is None:
            raise ReplayMiss(fp)
        resp = self.inner.complete(req)
        self.put(req, resp)
        return resp

    def stats(self) -> dict[str, int]:
        with self._connect() as db:
            (count,) = db.execute("SELECT COUNT(*) FROM responses").fetchone()
        return {"entries": count, "bytes": os.path.getsize(self.path)}

    def clear(self) -> int:
        with self._write_lock, self._connect() as db:
            removed = db.execute("DELETE FROM responses").rowcount
        return removed


# --------------------------------------------------------------------- remote


class RemoteBackend:
    """Chat-completion style HTTP endpoint.

    Retries transport errors and HTTP 429/5xx with exponential backoff, three
    attempts in total; other statuses fail immediately.
    """

    def __init__(
        self,
        url: str,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 120.0,
        attempts: int = 3,
        backoff: float = 1.0,
        client=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        import httpx

        self._httpx = httpx
        self.url = url
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.client = client or httpx.Client(timeout=timeout)

    def _payload(self, req: CompletionRequest) -> dict:
        messages = []
        if req.system_text:
            messages.append({"role": "system", "content": req.system_text})
        messages.append({"role": "user", "content": req.user_text})
        return {
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "seed": req.seed,
            "max_tokens": req.max_output_tokens,
        }

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        httpx = self._httpx
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            started = time.monotonic()
            try:
                r = self.client.post(self.url, json=self._payload(req), headers=headers)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(str(exc) or "request timed out")
                log.warning("attempt %d timed out", attempt + 1)
                continue
            except httpx.TransportError as exc:
                last = RemoteError(None, str(exc))
                log.warning("attempt %d failed: %s", attempt + 1, exc)
                continue
            if r.status_code in RETRY_STATUSES:
                last = RemoteError(r.status_code, r.text)
                log.warning("attempt %d got HTTP %d", attempt + 1, r.status_code)
                continue
            if r.status_code >= 400:
                raise RemoteError(r.status_code, r.text)
            body = r.json()
            usage = body.get("usage") or {}
            return CompletionResponse(
                text=body["choices"][0]["message"]["content"],
                tokens_in=int(usage.get("prompt_tokens", 0)),
                tokens_out=int(usage.get("completion_tokens", 0)),
                latency_ms=int((time.monotonic() - started) * 1000),
                source="remote",
                model_id=req.model_id,
            )
        assert last is not None
        raise last


# ---------------------------------------------------------------------- costs


@dataclass(frozen=True)
class PricingConfig:
    """USD per one million tokens, per model."""

    rates: Mapping[str, tuple[Decimal, Decimal]]

    def __post_init__(self) -> None:
        for model, (rin, rout) in self.rates.items():
            if rin < 0 or rout < 0:
                raise ValueError(f"negative rate for {model}")

    @classmethod
    def from_obj(cls, obj: Mapping) -> PricingConfig:
        return cls({
            model: (Decimal(str(r["input_per_1m"])), Decimal(str(r["output_per_1m"])))
            for model, r in obj.items()
        })

    @classmethod
    def load(cls, path: str | os.PathLike) -> PricingConfig:
        return cls.from_obj(json.loads(Path(path).read_text(encoding="utf-8"), parse_float=Decimal))


@dataclass(frozen=True)
class Usage:
    tokens_in: int = 0
    tokens_out: int = 0
    cost_usd: Decimal | None = Decimal(0)

    def to_dict(self) -> dict:
        return {
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "cost_usd": None if self.cost_usd is None else str(self.cost_usd),
        }


@dataclass(frozen=True)
class UsageReport:
    per_playbook: dict[str, Usage]
    total: Usage

    def to_dict(self) -> dict:
        return {
            "per_playbook": {k: v.to_dict() for k, v in self.per_playbook.items()},
            "total": self.total.to_dict(),
        }


def _usage(responses: Iterable[CompletionResponse], pricing: PricingConfig | None) -> Usage:
    tin = tout = 0
    cost: Decimal | None = Decimal(0) if pricing is not None else None
    for r in responses:
        tin += r.tokens_in
        tout += r.tokens_out
        if pricing is not None:
            if r.model_id not in pricing.rates:
                raise UnknownModelPrice(r.model_id)
            rin, rout = pricing.rates[r.model_id]
            cost += (r.tokens_in * rin + r.tokens_out * rout) / Decimal(1_000_000)
    return Usage(tin, tout, cost)


def usage_report(
    responses: Sequence[CompletionResponse] | Mapping[str, Sequence[CompletionResponse]],
    pricing: PricingConfig | None,
) -> UsageReport:
    """Token and cost totals. A plain sequence counts as a single playbook.

    Cost is ``sum(tokens_in * rate_in + tokens_out * rate_out) / 1e6`` in
    exact decimal arithmetic; it is ``None`` when no pricing is given.
    """
    groups = responses if isinstance(responses, Mapping) else {"playbook": responses}
    per = {name: _usage(rs, pricing) for name, rs in groups.items()}
    total = _usage([r for rs in groups.values() for r in rs], pricing)
    return UsageReport(per, total)
