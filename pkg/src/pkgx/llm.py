"""Model access: chat completion, embeddings, persona ratings and path verbalization.

This is the only module that talks to the network. Every call goes through
``LLMGateway``, which owns retries, the in-flight bound and the rating cache.
``StubTransport`` answers the same prompts offline and deterministically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import (
    AuthError,
    ConfigError,
    EmbeddingDimensionError,
    RateLimitError,
    RatingRangeError,
    ResponseParseError,
    TransportError,
    UserError,
)

log = logging.getLogger(__name__)

RATING_PROMPT_VERSION = "rate/1"
VERBALIZE_PROMPT_VERSION = "verbalize/1"
DEFAULT_CHAT_MODEL = "gpt-4o-mini"
DEFAULT_EMBED_MODEL = "all-mpnet-base-v2"
DEFAULT_EMBED_DIM = 768
STUB_URL = "stub://"
SCORE_KEYS = ("validity", "completeness", "relevance")

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _ws(s: str) -> str:
    return " ".join(str(s).split())


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = STUB_URL
    model_id: str = DEFAULT_CHAT_MODEL
    embed_model: str = DEFAULT_EMBED_MODEL
    api_key_env: str = "PKGX_LLM_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4
    temperature: float = 0.0
    embed_dim: int = DEFAULT_EMBED_DIM
    embed_batch: int = 32

    def __post_init__(self):
        if self.max_retries < 0 or self.max_in_flight < 1 or self.timeout <= 0:
            raise ConfigError("max_retries >= 0, max_in_flight >= 1 and timeout > 0 required")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")

    @property
    def is_stub(self) -> bool:
        return self.base_url.startswith("stub")

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None, **overrides) -> "ProviderConfig":
        env = os.environ if environ is None else environ
        kw = {}
        if env.get("PKGX_LLM_BASE_URL"):
            kw["base_url"] = env["PKGX_LLM_BASE_URL"]
        if env.get("PKGX_LLM_MODEL"):
            kw["model_id"] = env["PKGX_LLM_MODEL"]
        if env.get("PKGX_EMBED_MODEL"):
            kw["embed_model"] = env["PKGX_EMBED_MODEL"]
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def api_key(self, environ: Mapping[str, str] | None = None) -> str:
        env = os.environ if environ is None else environ
        key = env.get(self.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set")
        return key

    def to_dict(self) -> dict:
        # never serialize the key itself, only where it comes from
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- transports ------------------------------------------------------------------


class Transport(Protocol):
    def chat(self, messages: list[dict], model: str, temperature: float, timeout: float) -> str: ...

    def embed(self, texts: list[str], model: str, timeout: float) -> list[list[float]]: ...


class HttpTransport:
    """Chat-completions style JSON over HTTP."""

    def __init__(self, config: ProviderConfig, environ: Mapping[str, str] | None = None, client=None):
        import httpx

        self._httpx = httpx
        self.base_url = config.base_url.rstrip("/")
        key = config.api_key(environ)
        self.client = client or httpx.Client(headers={"Authorization": f"Bearer {key}"})

    def _post(self, route: str, body: dict, timeout: float) -> dict:
        httpx = self._httpx
        try:
            resp = self.client.post(f"{self.base_url}/{route}", json=body, timeout=timeout)
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout calling {route}: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"cannot reach {self.base_url}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"provider rejected credentials ({resp.status_code})")
        if resp.status_code == 429:
            raise RateLimitError("provider rate limit")
        if resp.status_code >= 400:
            raise TransportError(f"{route}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"{route}: non-JSON body") from exc

    def chat(self, messages, model, temperature, timeout):
        data = self._post("chat/completions", {"model": model, "messages": messages, "temperature": temperature}, timeout)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("malformed chat response") from exc

    def embed(self, texts, model, timeout):
        data = self._post("embeddings", {"model": model, "input": list(texts)}, timeout)
        try:
            rows = sorted(data["data"], key=lambda d: d.get("index", 0))
            return [r["embedding"] for r in rows]
        except (KeyError, TypeError) as exc:
            raise TransportError("malformed embedding response") from exc


def hashed_text_embedding(text: str, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Signed feature hashing of word unigrams and bigrams (not normalized).

    Texts sharing vocabulary land close together, which gives the offline
    stub a usable notion of similarity.
    """
    words = re.findall(r"[a-z0-9]+", text.lower())
    feats = words + [a + " " + b for a, b in zip(words, words[1:])]
    v = np.zeros(dim)
    for f in feats:
        h = int.from_bytes(hashlib.blake2b(f.encode("utf-8"), digest_size=8).digest(), "little")
        v[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    if not v.any():
        v[0] = 1.0
    return v


def parse_fenced_json(text: str):
    """First fenced JSON block in ``text``; falls back to the outermost braces."""
    candidates = _FENCE_RE.findall(text)
    if not candidates:
        lo, hi = text.find("{"), text.rfind("}")
        if lo >= 0 and hi > lo:
            candidates = [text[lo : hi + 1]]
    for c in candidates:
        try:
            return json.loads(c)
        except ValueError:
            continue
    raise ResponseParseError("no JSON block in model response")


def _task_of(prompt: str) -> str:
    first = prompt.lstrip().split("\n", 1)[0]
    return first.split(":", 1)[1].strip() if first.startswith("task:") else ""


class StubTransport:
    """Offline provider. Answers by the ``task:`` header of the user prompt.

    ``responders`` maps task name to a function of the prompt's JSON input block.
    Unknown tasks get a deterministic echo.
    """

    def __init__(self, embed_dim: int = DEFAULT_EMBED_DIM, responders: Mapping[str, Callable] | None = None):
        self.embed_dim = embed_dim
        self.responders = dict(default_stub_responders())
        if responders:
            self.responders.update(responders)
        self.chat_calls = 0
        self.embed_calls = 0
        self._lock = threading.Lock()

    def chat(self, messages, model, temperature, timeout):
        with self._lock:
            self.chat_calls += 1
        prompt = messages[-1]["content"]
        task = _task_of(prompt)
        fn = self.responders.get(task)
        if fn is None:
            return f"stub echo {prompt_hash(prompt)}"
        return fn(parse_fenced_json(prompt))

    def embed(self, texts, model, timeout):
        with self._lock:
            self.embed_calls += 1
        return [hashed_text_embedding(t, self.embed_dim).tolist() for t in texts]


# -- ratings ---------------------------------------------------------------------


@dataclass(frozen=True)
class PersonaRating:
    validity: float
    completeness: float
    relevance: float
    raw: tuple[int, int, int]
    persona_id: str
    prompt_version: str = RATING_PROMPT_VERSION
    cached: bool = False

    @classmethod
    def from_raw(cls, raw, persona_id, prompt_version=RATING_PROMPT_VERSION, cached=False) -> "PersonaRating":
        raw = tuple(int(x) for x in raw)
        if len(raw) != 3:
            raise RatingRangeError("need exactly three scores")
        for x in raw:
            if not (1 <= x <= 5):
                raise RatingRangeError(f"score {x} outside 1..5")
        v, c, r = ((x - 1) / 4 for x in raw)
        return cls(v, c, r, raw, persona_id, prompt_version, cached)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.validity, self.completeness, self.relevance)


def stub_raw_scores(persona_id: str, path_key: str) -> tuple[int, int, int]:
    h = int.from_bytes(hashlib.blake2b(f"{persona_id}\x1f{path_key}".encode("utf-8"), digest_size=8).digest(), "little")
    out = []
    for _ in range(3):
        h, d = divmod(h, 5)
        out.append(d + 1)
    return tuple(out)


def deterministic_stub_rating(persona_id: str, path_key: str) -> PersonaRating:
    """Rating from a 64-bit hash of (persona id, canonical path string)."""
    return PersonaRating.from_raw(stub_raw_scores(persona_id, _ws(path_key)), persona_id)


@dataclass(frozen=True)
class CacheKey:
    persona_id: str
    path: str
    hypothesis: str
    prompt_version: str

    def digest(self) -> str:
        parts = [_ws(self.persona_id), _ws(self.path), _ws(self.hypothesis), self.prompt_version]
        return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()


class RatingCache:
    """Append-only JSON-lines cache of raw scores, optionally persisted."""

    def __init__(self, path=None):
        self.path = path
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    raw = [int(x) for x in rec["raw_scores"]]
                    if len(raw) != 3:
                        raise ValueError("raw_scores must have 3 entries")
                    self._mem[rec["key_hash"]] = rec
                except (ValueError, KeyError, TypeError) as exc:
                    log.warning("%s:%d: skipping corrupt cache line (%s)", self.path, lineno, exc)

    def __len__(self):
        return len(self._mem)

    def get(self, key: CacheKey) -> tuple[int, int, int] | None:
        rec = self._mem.get(key.digest())
        return None if rec is None else tuple(int(x) for x in rec["raw_scores"])

    def put(self, key: CacheKey, raw) -> None:
        rec = {
            "key_hash": key.digest(),
            "persona_id": key.persona_id,
            "path": key.path,
            "raw_scores": [int(x) for x in raw],
            "prompt_version": key.prompt_version,
            "timestamp": time.time(),
        }
        with self._lock:
            self._mem[rec["key_hash"]] = rec
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- prompt contracts --------------------------------------------------------------


def _persona_id(persona) -> str:
    return persona["id"] if isinstance(persona, Mapping) else persona.id


def _persona_narrative(persona) -> str:
    return persona["narrative"] if isinstance(persona, Mapping) else persona.narrative


def hypothesis_text(h) -> str:
    return f"{_ws(h.subject)}\t{_ws(h.relation)}\t{_ws(h.object)}"


def rating_prompt(persona, hypothesis, hops, path_key) -> str:
    block = {"persona_id": _persona_id(persona), "path": path_key, "hypothesis": [hypothesis.subject, hypothesis.relation, hypothesis.object]}
    lines = [
        "task: rate",
        f"prompt_version: {RATING_PROMPT_VERSION}",
        "You are the following expert persona. Judge the explanation strictly from this perspective.",
        "",
        _persona_narrative(persona),
        "",
        f"Query: does {hypothesis.subject} {hypothesis.relation} {hypothesis.object}?",
        "Explanation path:",
    ]
    lines += [f"  {h} --{r}--> {t}" for h, r, t in hops]
    lines += [
        "",
        "Score validity, completeness and relevance, each as an integer from 1 (poor) to 5 (excellent).",
        'Answer with one fenced block: ```json {"validity": v, "completeness": c, "relevance": r}```',
        "",
        "```json",
        json.dumps(block, sort_keys=True),
        "```",
    ]
    return "\n".join(lines)


REFORMAT_NOTE = "\n\nYour previous answer could not be parsed. Reply with the fenced JSON block only."


def _parse_scores(text: str) -> tuple[int, int, int]:
    data = parse_fenced_json(text)
    try:
        raw = [data[k] for k in SCORE_KEYS]
    except (KeyError, TypeError) as exc:
        raise ResponseParseError(f"missing score field: {exc}") from exc
    out = []
    for x in raw:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or float(x) != int(x):
            raise ResponseParseError(f"score {x!r} is not an integer")
        out.append(int(x))
    return tuple(out)


def template_hop_sentence(h: str, r: str, t: str) -> str:
    return f"{h} {r} {t}."


def verbalize_prompt(hypothesis, paths_hops, persona=None) -> str:
    block = {
        "hypothesis": [hypothesis.subject, hypothesis.relation, hypothesis.object],
        "paths": [[list(x) for x in hops] for hops in paths_hops],
        "persona_id": _persona_id(persona) if persona is not None else None,
    }
    lines = ["task: verbalize", f"prompt_version: {VERBALIZE_PROMPT_VERSION}"]
    if persona is not None:
        lines += ["Write for this reader:", _persona_narrative(persona), ""]
    lines += [
        f"Describe in one paragraph how the paths below support: {hypothesis.subject} {hypothesis.relation} {hypothesis.object}.",
        "Name every entity and relation exactly as written. Do not summarize generically.",
        "",
        "```json",
        json.dumps(block, sort_keys=True),
        "```",
    ]
    return "\n".join(lines)


def _template_verbalization(paths_hops, persona_id=None) -> str:
    body = " ".join(template_hop_sentence(*hop) for hops in paths_hops for hop in hops)
    return f"[{persona_id}] {body}" if persona_id else body


def _stub_rate(block):
    raw = stub_raw_scores(block["persona_id"], _ws(block["path"]))
    return "```json\n" + json.dumps(dict(zip(SCORE_KEYS, raw))) + "\n```"


def _stub_verbalize(block):
    return _template_verbalization(block["paths"], block.get("persona_id"))


def default_stub_responders() -> dict:
    from . import persona as _persona  # persona prompts live with the forge

    return {
        "rate": _stub_rate,
        "verbalize": _stub_verbalize,
        "traits": _persona.stub_extract_traits,
        "persona": _persona.stub_synthesize,
    }


@dataclass
class Verbalization:
    text: str
    audit_ok: bool
    missing: list[str] = field(default_factory=list)
    template: bool = False

    def to_dict(self):
        return {"text": self.text, "audit_ok": self.audit_ok, "missing": self.missing, "template": self.template}


def audit_text(text: str, paths_hops) -> list[str]:
    """Entity and relation labels that do not occur verbatim in ``text``."""
    needed = []
    for hops in paths_hops:
        for h, r, t in hops:
            for x in (h, r, t):
                if x not in needed:
                    needed.append(x)
    return [x for x in needed if x not in text]


# -- gateway ---------------------------------------------------------------------


class LLMGateway:
    def __init__(self, config: ProviderConfig | None = None, transport=None, cache: RatingCache | None = None, environ=None):
        self.config = config or ProviderConfig()
        if transport is None:
            transport = StubTransport(self.config.embed_dim) if self.config.is_stub else HttpTransport(self.config, environ)
        self.transport = transport
        self.cache = cache if cache is not None else RatingCache()
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)
        self.transport_calls = 0
        self._count_lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}

    @property
    def model_id(self) -> str:
        return "stub" if self.config.is_stub else self.config.model_id

    def _call(self, fn, what: str):
        cfg = self.config
        last = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(cfg.backoff * 2 ** (attempt - 1))
            with self._slots:
                with self._count_lock:
                    self.transport_calls += 1
                try:
                    return fn()
                except AuthError:
                    raise
                except (TransportError, RateLimitError) as exc:
                    last = exc
                    log.warning("%s failed (attempt %d/%d): %s", what, attempt + 1, cfg.max_retries + 1, exc)
        if isinstance(last, RateLimitError):
            raise RateLimitError(f"{what}: rate limit persisted after {cfg.max_retries + 1} attempts")
        raise TransportError(f"{what}: giving up after {cfg.max_retries + 1} attempts: {last}")

    def complete(self, prompt: str, system: str | None = None, temperature: float | None = None) -> str:
        msgs = []
        if system:
            msgs.append({"role": "system", "content": system})
        msgs.append({"role": "user", "content": prompt})
        temp = self.config.temperature if temperature is None else temperature
        ph = prompt_hash(prompt)
        log.debug("chat request %s (%d chars)", ph, len(prompt))
        text = self._call(lambda: self.transport.chat(msgs, self.config.model_id, temp, self.config.timeout), f"chat {ph}")
        log.debug("chat response %s: %d chars", ph, len(text))
        return text

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise UserError("nothing to embed")
        rows = []
        b = self.config.embed_batch
        for i in range(0, len(texts), b):
            chunk = texts[i : i + b]
            out = self._call(lambda: self.transport.embed(chunk, self.config.embed_model, self.config.timeout), "embed")
            if len(out) != len(chunk):
                raise EmbeddingDimensionError(f"asked for {len(chunk)} vectors, got {len(out)}")
            rows.extend(out)
        arr = np.asarray(rows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != self.config.embed_dim:
            raise EmbeddingDimensionError(f"expected {self.config.embed_dim}-dim vectors, got shape {arr.shape}")
        return arr

    # ratings

    def rate_explanation(self, persona, env, path) -> PersonaRating:
        env.check_path(path)
        pid = _persona_id(persona)
        path_key = env.canonical_path(path)
        key = CacheKey(pid, path_key, hypothesis_text(path.hypothesis), RATING_PROMPT_VERSION)
        hit = self.cache.get(key)
        if hit is not None:
            return PersonaRating.from_raw(hit, pid, cached=True)
        # one request per key: concurrent callers for the same path wait for the first
        with self._count_lock:
            key_lock = self._key_locks.setdefault(key.digest(), threading.Lock())
        with key_lock:
            hit = self.cache.get(key)
            if hit is not None:
                return PersonaRating.from_raw(hit, pid, cached=True)
            return self._rate_uncached(persona, env, path, pid, path_key, key)

    def _rate_uncached(self, persona, env, path, pid, path_key, key) -> PersonaRating:
        prompt = rating_prompt(persona, path.hypothesis, env.render_path(path), path_key)
        text = self.complete(prompt, temperature=0.0)
        try:
            raw = _parse_scores(text)
        except ResponseParseError:
            log.info("rating response unparseable; asking once more")
            raw = _parse_scores(self.complete(prompt + REFORMAT_NOTE, temperature=0.0))
        rating = PersonaRating.from_raw(raw, pid)
        self.cache.put(key, raw)
        return rating

    def rate_many(self, persona, env, paths, jobs: int = 1) -> list[PersonaRating]:
        if jobs <= 1:
            return [self.rate_explanation(persona, env, p) for p in paths]
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(lambda p: self.rate_explanation(persona, env, p), paths))

    def rater(self, persona, env) -> "PersonaRater":
        return PersonaRater(self, persona, env)

    # verbalization

    def verbalize_path(self, env, hypothesis, paths, persona=None) -> Verbalization:
        paths = list(paths)
        if not paths:
            raise UserError("cannot verbalize an empty explanation")
        hops = [env.render_path(p) for p in paths]
        pid = _persona_id(persona) if persona is not None else None
        text = self.complete(verbalize_prompt(hypothesis, hops, persona), temperature=0.0)
        missing = audit_text(text, hops)
        if missing:
            log.warning("verbalization omits %s; falling back to template", missing)
            return Verbalization(_template_verbalization(hops, pid), False, missing, True)
        return Verbalization(text, True, [], False)


class PersonaRater:
    """Adapter handing (v, c, r) to the reward engine."""

    def __init__(self, gateway: LLMGateway, persona, env):
        self.gateway = gateway
        self.persona = persona
        self.env = env

    def __call__(self, path) -> tuple[float, float, float]:
        return self.gateway.rate_explanation(self.persona, self.env, path).as_tuple()
