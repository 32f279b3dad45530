"""Gateway for chat-completion and text-embedding providers.

Live providers speak an OpenAI-compatible HTTPS JSON protocol; mock
providers are deterministic and fully offline, so every pipeline stage can
be exercised without network access. All embeddings leaving the gateway
are L2-normalized, so cosine similarity is a plain dot product.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .model import QualifiedColumn, ModelError

PROMPT_DIR = Path(__file__).parent / "prompts"

DEFAULT_EMBED_DIM = 64


class GatewayError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class ParseError(GatewayError):
    pass


@dataclass
class ChatRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.prompt:
            raise GatewayError("empty_prompt", "prompt must be non-empty")
        if self.temperature < 0:
            raise GatewayError("bad_temperature", "temperature must be >= 0")


@dataclass
class ColumnSelectionResponse:
    reasoning: str
    columns: list[QualifiedColumn]

    def serialize(self) -> str:
        return json.dumps(
            {"reasoning": self.reasoning, "columns": [str(c) for c in self.columns]},
            ensure_ascii=False,
        )


class ChatProvider(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


# --- mock providers --------------------------------------------------------


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ScriptedChatProvider:
    """Chat mock keyed by prompt hash; raises on unscripted prompts.

    Script format: JSON map from sha256(prompt) -> response string.
    """

    def __init__(self, script: dict[str, str]):
        self.script = dict(script)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedChatProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, request: ChatRequest) -> str:
        key = prompt_hash(request.prompt)
        if key not in self.script:
            raise GatewayError(
                "no_script_entry", f"no scripted response for prompt hash {key[:12]}..."
            )
        return self.script[key]


class CallableChatProvider:
    """Test helper: delegates to an arbitrary function of the request."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn

    def complete(self, request: ChatRequest) -> str:
        return self.fn(request)


class HashingEmbedder:
    """Deterministic offline embedder.

    Maps each string to a fixed-dimension vector by seeded hashing of its
    character n-grams; equal strings always produce identical vectors.
    """

    def __init__(self, dimension: int = DEFAULT_EMBED_DIM, seed: int = 0):
        self.dimension = dimension
        self.seed = seed

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        padded = f"^{text.lower()}$"
        salt = str(self.seed).encode()
        for n in (2, 3):
            for i in range(len(padded) - n + 1):
                gram = padded[i : i + n]
                h = hashlib.blake2b(gram.encode("utf-8"), key=salt[:64], digest_size=8)
                val = int.from_bytes(h.digest(), "little")
                idx = val % self.dimension
                sign = 1.0 if (val >> 40) & 1 else -1.0
                vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise GatewayError("empty_batch", "embed requires at least one text")
        return np.stack([self._vector(t) for t in texts])


class AliasedEmbedder:
    """Wraps an embedder with a surface-form alias table.

    Aliased strings embed identically to their canonical form, which gives
    tests a controllable stand-in for real synonym similarity
    (e.g. "LA" -> "Los Angeles").
    """

    def __init__(self, base: EmbeddingProvider, aliases: dict[str, str]):
        self.base = base
        self.aliases = {k.lower(): v for k, v in aliases.items()}

    @property
    def dimension(self) -> int:
        return self.base.dimension

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        mapped = [self.aliases.get(t.lower(), t) for t in texts]
        return self.base.embed(mapped)


# --- live providers --------------------------------------------------------


class HttpChatProvider:
    """OpenAI-compatible chat completion client with bounded retries."""

    def __init__(
        self,
        url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "gpt-4o",
        max_retries: int = 3,
        timeout: float = 60.0,
        max_in_flight: int = 8,
    ):
        self.url = url or os.environ.get("FGTR_LLM_URL", "")
        self.api_key = api_key or os.environ.get("FGTR_LLM_KEY", "")
        self.model = model
        self.max_retries = max_retries
        self.timeout = timeout
        self._sem = threading.Semaphore(max_in_flight)

    def complete(self, request: ChatRequest) -> str:
        import httpx

        if not self.url:
            raise GatewayError("no_provider", "chat provider URL not configured")
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        last_code = "transport_failure"
        for attempt in range(self.max_retries):
            try:
                with self._sem:
                    resp = httpx.post(
                        self.url,
                        json=payload,
                        headers={"Authorization": f"Bearer {self.api_key}"},
                        timeout=self.timeout,
                    )
            except httpx.TimeoutException:
                last_code = "timeout"
                continue
            except httpx.HTTPError:
                last_code = "transport_failure"
                continue
            if resp.status_code == 429:
                last_code = "rate_limited"
                time.sleep(min(2**attempt, 8))
                continue
            if resp.status_code >= 400:
                last_code = "provider_error"
                continue
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        raise GatewayError(last_code, f"chat request failed after {self.max_retries} attempts")


class HttpEmbeddingProvider:
    """OpenAI-compatible embedding client; normalizes all returned vectors."""

    def __init__(
        self,
        url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "text-embedding-3-small",
        timeout: float = 60.0,
    ):
        self.url = url or os.environ.get("FGTR_EMBED_URL", "")
        self.api_key = api_key or os.environ.get("FGTR_EMBED_KEY", "")
        self.model = model
        self.timeout = timeout
        self.dimension = 0  # set on first response

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        if len(texts) == 0:
            raise GatewayError("empty_batch", "embed requires at least one text")
        if not self.url:
            raise GatewayError("no_provider", "embedding provider URL not configured")
        resp = httpx.post(
            self.url,
            json={"model": self.model, "input": list(texts)},
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.timeout,
        )
        if resp.status_code >= 400:
            raise GatewayError("provider_error", f"embedding request failed: {resp.status_code}")
        data = resp.json()
        vectors = np.array([item["embedding"] for item in data["data"]], dtype=np.float64)
        dims = {len(item["embedding"]) for item in data["data"]}
        if len(dims) != 1:
            raise GatewayError("dimension_mismatch", f"mixed dimensions in batch: {dims}")
        self.dimension = vectors.shape[1]
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vectors / norms


# --- response parsing ------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?|```", re.IGNORECASE)


def extract_first_json(raw: str) -> dict:
    """Pull the first JSON object out of model output, ignoring prose and fences."""
    text = _FENCE_RE.sub("", raw)
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseError("no_json", "no JSON object found in response")


def parse_column_selection(raw: str) -> ColumnSelectionResponse:
    obj = extract_first_json(raw)
    for key in ("reasoning", "columns"):
        if key not in obj:
            raise ParseError("missing_key", f"response missing key {key!r}")
    extra = set(obj) - {"reasoning", "columns"}
    if extra:
        raise ParseError("unexpected_key", f"unexpected keys in response: {sorted(extra)}")
    if not isinstance(obj["columns"], list):
        raise ParseError("malformed_column", "columns must be a list")
    columns = []
    for entry in obj["columns"]:
        if not isinstance(entry, str):
            raise ParseError("malformed_column", f"column entry is not a string: {entry!r}")
        try:
            columns.append(QualifiedColumn.parse(entry))
        except ModelError as exc:
            raise ParseError("malformed_column", str(exc)) from exc
    return ColumnSelectionResponse(reasoning=str(obj["reasoning"]), columns=columns)


def complete_with_reprompt(
    provider: ChatProvider,
    request: ChatRequest,
    parser: Callable[[str], object],
):
    """Run a chat call whose output must parse; one corrective retry on failure.

    Returns the parsed value, or None if both the original call and the
    single reprompt produce unparseable output. Provider transport errors
    propagate unchanged.
    """
    raw = provider.complete(request)
    try:
        return parser(raw)
    except ParseError as exc:
        hint = (
            f"{request.prompt}\n\n# Your previous answer could not be parsed "
            f"({exc.code}: {exc}). Reply with only the required JSON object."
        )
        retry = ChatRequest(
            prompt=hint,
            temperature=request.temperature,
            max_tokens=request.max_tokens,
            seed=request.seed,
        )
        try:
            raw = provider.complete(retry)
            return parser(raw)
        except (ParseError, GatewayError):
            return None


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def render_prompt(template_name: str, mapping: dict[str, str], prompt_dir: Path = None) -> str:
    """Load ``<name>.txt`` and substitute ``{KEY}`` placeholders."""
    path = (prompt_dir or PROMPT_DIR) / f"{template_name}.txt"
    text = path.read_text(encoding="utf-8")
    for key, value in mapping.items():
        text = text.replace("{" + key + "}", value)
    return text
