"""Graph-augmented prompts, embedding providers and a persistent vector cache."""

from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import (
    DimensionError,
    EmbeddingError,
    ProviderAuthError,
    RetriesExhaustedError,
    UnknownConceptError,
)
from .ontology import SYSTEM_NAMES, ConceptId, Ontology

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
PROMPT_VARIANTS = ("full", "no-task", "no-parent", "concept", "code", "noise")
DEFAULT_TASK = "diagnosis prediction"
NOISE_SENTENCE = "The weather forecast for the coastal region predicts light rain in the afternoon."
API_KEY_ENV = "LINKO_EMBED_API_KEY"


@dataclass(frozen=True)
class PromptRecord:
    concept: ConceptId
    prompt_text: str
    template_version: str
    task_name: str


def _join(items):
    if len(items) <= 1:
        return "".join(items)
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def build_prompt(c: ConceptId, ont: Ontology, task_name: str = DEFAULT_TASK, variant: str = "full") -> PromptRecord:
    """Prompt text for one concept; deterministic in (concept, ontology, task, variant)."""
    if variant not in PROMPT_VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    if c not in ont:
        raise UnknownConceptError(f"{c} not in {ont.type_tag} ontology")
    system = SYSTEM_NAMES[ont.type_tag]
    desc = ont.descriptions[c]
    with_task = variant in ("full", "no-parent")
    with_concept = variant in ("full", "no-task", "no-parent", "concept")
    with_parents = variant in ("full", "no-task")

    head = f"For the task of {task_name}, provide" if with_task else "Provide"
    text = f"{head} a semantic representation for {system} code {c.code}"
    if with_concept:
        text += f" which represents {desc}"
    if with_parents:
        chain = ont.chain_of(c)
        if not chain:
            text += ", a general medical concept."
        else:
            parts = [f"{a.code} ({ont.descriptions[a]})" for a in chain]
            text += f". It falls under the broader {system} categories of {_join(parts)}."
    else:
        text += "."
    if variant == "noise":
        text += " " + NOISE_SENTENCE
    return PromptRecord(c, text, f"{TEMPLATE_VERSION}/{variant}", task_name)


# -- providers ------------------------------------------------------------------

class EmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, text: str, d: int) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9][a-z0-9.\-]*[a-z0-9]|[a-z0-9]")
_STOPWORDS = frozenset(
    "for the task of provide a semantic representation code which represents it falls "
    "under broader categories and general medical concept an is specific".split()
)


@lru_cache(maxsize=65536)
def _token_vector(token: str, d: int, seed: int) -> np.ndarray:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=8).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(d)
    v.setflags(write=False)
    return v


def mock_embed(prompt_text: str, d: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector built from keyed per-token hashes.

    Prompts that share tokens (e.g. an ancestor chain) share vector
    components, so related prompts are closer than unrelated ones.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    tokens = [t for t in _TOKEN.findall(prompt_text.lower()) if t not in _STOPWORDS]
    if not tokens:
        tokens = [prompt_text]
    v = np.zeros(d)
    for tok in tokens:
        v += _token_vector(tok, d, seed)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class MockProvider:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.provider_id = f"mock-v1-seed{seed}"
        self.calls = 0

    def embed(self, text: str, d: int) -> np.ndarray:
        self.calls += 1
        return mock_embed(text, d, self.seed)


class RandomProjection:
    """Seeded Gaussian projection for providers with a fixed output width."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((d_in, d_out)) / np.sqrt(d_out)

    def __call__(self, v):
        return v @ self.matrix


@dataclass
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "text-embedding-3-small"
    api_key_env: str = API_KEY_ENV
    timeout: float = 30.0
    max_attempts: int = 5
    backoff: float = 0.5
    parallel: int = 4
    projection_seed: int | None = None  # enables the random-projection fallback


class RemoteProvider:
    """OpenAI-compatible ``/embeddings`` client requesting ``dimensions=d`` natively."""

    def __init__(self, config: EndpointConfig | None = None, transport=None, sleep=time.sleep):
        import httpx

        self.config = config or EndpointConfig()
        self.provider_id = f"remote:{self.config.model}"
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise ProviderAuthError(f"environment variable {self.config.api_key_env} is not set")
        self._client = httpx.Client(
            base_url=self.config.base_url,
            headers={"Authorization": f"Bearer {key}"},
            timeout=self.config.timeout,
            transport=transport,
        )
        self._sleep = sleep
        self._lock = threading.Lock()
        self._projections: dict[tuple[int, int], RandomProjection] = {}
        self.calls = 0
        self.retries = 0

    def close(self):
        self._client.close()

    def _request(self, text: str, d: int) -> list:
        import httpx

        cfg = self.config
        for attempt in range(1, cfg.max_attempts + 1):
            with self._lock:
                self.calls += 1
            try:
                resp = self._client.post("/embeddings", json={"model": cfg.model, "input": text, "dimensions": d})
            except httpx.TransportError as exc:
                reason = f"transport error: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise ProviderAuthError(f"embedding provider rejected credentials ({resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    reason = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise EmbeddingError(f"embedding request failed: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return resp.json()["data"][0]["embedding"]
            if attempt == cfg.max_attempts:
                raise RetriesExhaustedError(f"gave up after {attempt} attempts ({reason})")
            with self._lock:
                self.retries += 1
            delay = cfg.backoff * 2 ** (attempt - 1)
            logger.warning("retry %d for embedding request after %s; sleeping %.2fs", attempt, reason, delay)
            self._sleep(delay)
        raise AssertionError("unreachable")

    def embed(self, text: str, d: int) -> np.ndarray:
        v = np.asarray(self._request(text, d), dtype=np.float64)
        if v.shape != (d,):
            if self.config.projection_seed is None:
                raise DimensionError(f"provider returned {v.size} dimensions, expected {d}")
            key = (v.size, d)
            if key not in self._projections:
                self._projections[key] = RandomProjection(v.size, d, self.config.projection_seed)
            v = self._projections[key](v)
        return v


# -- cache ------------------------------------------------------------------------

_HEADER = struct.Struct("<32sI")


def cache_key(prompt_text: str, provider_id: str, d: int) -> bytes:
    h = hashlib.sha256()
    for part in (provider_id, str(d), prompt_text):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


class EmbeddingCache:
    """Append-only binary store of ``hash(32B) | d(uint32) | float64 x d`` records.

    A text sidecar (``<path>.idx``) lists ``hexhash offset d template_version``
    per record. The binary file is authoritative: on open it is scanned, and a
    torn trailing record is truncated away.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.index_path = self.path.with_name(self.path.name + ".idx")
        self._lock = threading.Lock()
        self._vectors: dict[bytes, np.ndarray] = {}
        self._meta: dict[bytes, str] = {}
        self._load()

    def _load(self):
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        pos = 0
        while pos + _HEADER.size <= len(raw):
            key, d = _HEADER.unpack_from(raw, pos)
            end = pos + _HEADER.size + 8 * d
            if end > len(raw):
                break
            self._vectors[key] = np.frombuffer(raw, dtype="<f8", count=d, offset=pos + _HEADER.size).copy()
            pos = end
        if pos != len(raw):
            logger.warning("cache %s: truncating %d trailing bytes of a torn record", self.path, len(raw) - pos)
            with open(self.path, "r+b") as fh:
                fh.truncate(pos)
        if self.index_path.exists():
            for line in self.index_path.read_text(encoding="utf-8").splitlines():
                parts = line.split("\t")
                if len(parts) == 4:
                    key = bytes.fromhex(parts[0])
                    if key in self._vectors:
                        self._meta[key] = parts[3]
        self._rewrite_index()

    def _rewrite_index(self):
        lines = []
        offset = 0
        for key, v in self._vectors.items():
            lines.append(f"{key.hex()}\t{offset}\t{v.size}\t{self._meta.get(key, '')}")
            offset += _HEADER.size + 8 * v.size
        self.index_path.parent.mkdir(parents=True, exist_ok=True)
        self.index_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, key: bytes):
        return key in self._vectors

    def get(self, prompt_text: str, provider_id: str, d: int):
        v = self._vectors.get(cache_key(prompt_text, provider_id, d))
        return None if v is None else v.copy()

    def put(self, prompt_text: str, provider_id: str, d: int, vector, template_version: str = "") -> bytes:
        v = np.ascontiguousarray(vector, dtype="<f8")
        if v.shape != (d,):
            raise DimensionError(f"cache put: vector has shape {v.shape}, expected ({d},)")
        key = cache_key(prompt_text, provider_id, d)
        with self._lock:
            if key in self._vectors:
                return key
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                offset = fh.tell()
                fh.write(_HEADER.pack(key, d) + v.tobytes())
            with open(self.index_path, "a", encoding="utf-8") as fh:
                fh.write(f"{key.hex()}\t{offset}\t{d}\t{template_version}\n")
            self._vectors[key] = v.astype(np.float64)
            self._meta[key] = template_version
        return key


def remote_embed(provider: EmbeddingProvider, prompt_text: str, d: int, cache: EmbeddingCache | None = None,
                 template_version: str = "") -> np.ndarray:
    """Embed through the cache: a hit issues no provider call; a miss is written through."""
    if cache is not None:
        hit = cache.get(prompt_text, provider.provider_id, d)
        if hit is not None:
            return hit
    v = provider.embed(prompt_text, d)
    if v.shape != (d,):
        raise DimensionError(f"provider returned {v.shape[0]} dimensions, expected {d}")
    if cache is not None:
        cache.put(prompt_text, provider.provider_id, d, v, template_version)
    return v


@dataclass
class CacheStats:
    nodes: int = 0
    hits: int = 0
    misses: int = 0
    stores: int = 0
    failures: int = 0


def node_prompts(ontologies, task_name=DEFAULT_TASK, variant="full") -> list[PromptRecord]:
    """Prompts for every node of every ontology, level by level (unified index order)."""
    out = []
    for level in range(1, ontologies.depth + 1):
        for ont in ontologies:
            for c in ont.levels[level - 1]:
                out.append(build_prompt(c, ont, task_name, variant))
    return out


def fill_cache(ontologies, provider: EmbeddingProvider, cache: EmbeddingCache, d: int,
               task_name=DEFAULT_TASK, variant="full", parallel: int = 1) -> CacheStats:
    """Ensure every Meta-KG node has a cached vector."""
    prompts = node_prompts(ontologies, task_name, variant)
    stats = CacheStats(nodes=len(prompts))
    todo = []
    seen = set()
    for rec in prompts:
        if cache.get(rec.prompt_text, provider.provider_id, d) is not None:
            stats.hits += 1
        else:
            stats.misses += 1
            if rec.prompt_text not in seen:
                seen.add(rec.prompt_text)
                todo.append(rec)

    def work(rec):
        try:
            remote_embed(provider, rec.prompt_text, d, cache, rec.template_version)
            return True
        except EmbeddingError as exc:
            logger.error("could not embed %s: %s", rec.concept, exc)
            return False

    if parallel > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(rec) for rec in todo]
    stats.stores = sum(results)
    stats.failures = len(results) - stats.stores
    if stats.failures:
        raise EmbeddingError(f"{stats.failures} nodes could not be embedded")
    return stats
