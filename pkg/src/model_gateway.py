"""
Model Gateway - the only place that talks to language models

Backends:
- MockBackend: scripted (matcher, response) pairs, records a transcript
- replay_backend: answers from a recorded transcript by request digest
- HttpBackend: OpenAI-style /chat/completions over aiohttp
- AnthropicBackend: Messages API via the anthropic SDK

The filter and the reasoner only see the ModelBackend protocol, so no other
module performs network I/O. Page images travel as references (paths or URLs)
and are resolved here.
"""

import asyncio
import base64
import hashlib
import json
import logging
import random
import re
import threading
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Pattern, Protocol, Sequence, Tuple, Union, runtime_checkable

import aiohttp
import anthropic
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field

from .errors import PipelineError, TransportFailure
from .pipeline_config import GatewaySettings

logger = logging.getLogger("model-gateway")

BODY_PREVIEW_CHARS = 500
RETRYABLE_STATUS = {429, 500, 502, 503, 504}
DIGEST_PATTERN = re.compile(r"^[0-9a-f]{64}$")


# ==============================================================================
# REQUEST TYPES
# ==============================================================================

class Message(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    text: str
    images: Tuple[str, ...] = ()


class PromptRequest(BaseModel):
    """One chat-completion request"""

    model_config = ConfigDict(frozen=True)

    messages: Tuple[Message, ...]
    temperature: float = Field(0.0, ge=0.0)
    max_new_tokens: int = Field(1024, ge=1)
    model_tag: str = ""

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.text for m in self.messages)

    @property
    def image_refs(self) -> List[str]:
        return [ref for m in self.messages for ref in m.images]


def user_request(
    text: str,
    temperature: float,
    max_new_tokens: int,
    model_tag: str = "",
    images: Sequence[str] = (),
) -> PromptRequest:
    return PromptRequest(
        messages=(Message(role="user", text=text, images=tuple(images)),),
        temperature=temperature,
        max_new_tokens=max_new_tokens,
        model_tag=model_tag,
    )


def request_digest(request: PromptRequest) -> str:
    """Stable SHA-256 of the canonical request JSON"""
    canonical = json.dumps(request.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@runtime_checkable
class ModelBackend(Protocol):
    accepts_images: bool

    async def complete(self, request: PromptRequest) -> str:
        ...


# ==============================================================================
# TRANSCRIPTS
# ==============================================================================

class TranscriptEntry(BaseModel):
    digest: str
    request: PromptRequest
    response: str


def save_transcript(path: Union[str, Path], entries: Sequence[TranscriptEntry]) -> None:
    """JSON-lines, sorted by digest so concurrent call order does not matter"""
    rows = sorted(
        (e.model_dump(mode="json") for e in entries),
        key=lambda row: (row["digest"], row["response"]),
    )
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_transcript(path: Union[str, Path]) -> List[TranscriptEntry]:
    entries = []
    with open(path) as f:
        for line in f:
            if line.strip():
                entries.append(TranscriptEntry.model_validate_json(line))
    return entries


# ==============================================================================
# MOCK / REPLAY
# ==============================================================================

Matcher = Union[str, Pattern[str], Callable[[PromptRequest], bool]]
Responder = Union[str, Callable[[PromptRequest], str]]


class MockBackend:
    """
    Scripted backend. Matchers are tried in order against each request:
    a 64-hex string matches the request digest, any other string is a
    substring test on the prompt text, a compiled regex is searched, and a
    callable receives the request.
    """

    def __init__(
        self,
        script: Sequence[Tuple[Matcher, Responder]],
        default_response: Responder = "",
        accepts_images: bool = True,
        delay_fn: Optional[Callable[[PromptRequest], float]] = None,
    ):
        self.script = list(script)
        self.default_response = default_response
        self.accepts_images = accepts_images
        self.delay_fn = delay_fn
        self.transcript: List[TranscriptEntry] = []
        self._lock = threading.Lock()

    @staticmethod
    def _matches(matcher: Matcher, request: PromptRequest, digest: str) -> bool:
        if isinstance(matcher, str):
            if DIGEST_PATTERN.match(matcher):
                return matcher == digest
            return matcher in request.prompt_text
        if isinstance(matcher, re.Pattern):
            return matcher.search(request.prompt_text) is not None
        return bool(matcher(request))

    def respond(self, request: PromptRequest) -> str:
        digest = request_digest(request)
        responder = self.default_response
        for matcher, response in self.script:
            if self._matches(matcher, request, digest):
                responder = response
                break
        text = responder(request) if callable(responder) else responder
        with self._lock:
            self.transcript.append(TranscriptEntry(digest=digest, request=request, response=text))
        return text

    async def complete(self, request: PromptRequest) -> str:
        if self.delay_fn is not None:
            await asyncio.sleep(self.delay_fn(request))
        return self.respond(request)

    @property
    def calls(self) -> int:
        return len(self.transcript)


def mock_backend(
    script: Sequence[Tuple[Matcher, Responder]],
    default_response: Responder = "",
    **kwargs,
) -> MockBackend:
    if not script:
        raise ValueError("mock_backend: script must not be empty")
    return MockBackend(script, default_response=default_response, **kwargs)


class RecordingBackend:
    """Wraps any backend and records its traffic for later replay"""

    def __init__(self, inner: ModelBackend):
        self.inner = inner
        self.accepts_images = inner.accepts_images
        self.transcript: List[TranscriptEntry] = []
        self._lock = threading.Lock()

    async def complete(self, request: PromptRequest) -> str:
        text = await self.inner.complete(request)
        with self._lock:
            self.transcript.append(TranscriptEntry(digest=request_digest(request), request=request, response=text))
        return text

    async def close(self) -> None:
        close = getattr(self.inner, "close", None)
        if close is not None:
            await close()


def replay_backend(transcript: Sequence[TranscriptEntry], accepts_images: bool = True) -> MockBackend:
    """Answer requests whose digest was recorded; anything else is a transport failure"""
    recorded: Dict[str, str] = {}
    for entry in transcript:
        recorded.setdefault(entry.digest, entry.response)

    def _missing(request: PromptRequest) -> str:
        raise TransportFailure(f"no recorded response for request {request_digest(request)[:12]}")

    script = [(digest, response) for digest, response in sorted(recorded.items())]
    return MockBackend(script, default_response=_missing, accepts_images=accepts_images)


# ==============================================================================
# IMAGE REFERENCES
# ==============================================================================

def is_remote_ref(ref: str) -> bool:
    return ref.startswith(("http://", "https://", "data:"))


def encode_image_file(ref: str, base_dir: Optional[Path] = None) -> Optional[Tuple[str, str]]:
    """
    Read a local page image.

    Returns:
        (media type, base64 payload), or None when the file cannot be used
    """
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        with Image.open(path) as img:
            media_type = Image.MIME.get(img.format or "", "image/png")
        payload = base64.b64encode(path.read_bytes()).decode("ascii")
    except (OSError, UnidentifiedImageError) as e:
        logger.warning(f"Skipping unresolvable image reference {ref}: {e}")
        return None
    return media_type, payload


# ==============================================================================
# HTTP (chat completions)
# ==============================================================================

class HttpBackend:
    """Chat-completion client for any OpenAI-compatible endpoint"""

    def __init__(
        self,
        endpoint_url: str,
        api_key: Optional[str] = None,
        model_tag: str = "",
        timeout_s: float = 120.0,
        retries: int = 2,
        backoff_s: float = 0.5,
        accepts_images: bool = True,
        image_base_dir: Optional[Path] = None,
    ):
        if not endpoint_url.startswith(("http://", "https://")):
            raise ValueError(f"endpoint_url must be an http(s) URL, got {endpoint_url!r}")
        self.url = endpoint_url.rstrip("/") + "/chat/completions"
        self.api_key = api_key
        self.model_tag = model_tag
        self.timeout = aiohttp.ClientTimeout(total=timeout_s)
        self.retries = retries
        self.backoff_s = backoff_s
        self.accepts_images = accepts_images
        self.image_base_dir = image_base_dir
        self._session: Optional[aiohttp.ClientSession] = None

    async def __aenter__(self) -> "HttpBackend":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()

    async def close(self) -> None:
        if self._session is not None and not self._session.closed:
            await self._session.close()
        self._session = None

    def _get_session(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            headers = {"Content-Type": "application/json"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            self._session = aiohttp.ClientSession(timeout=self.timeout, headers=headers)
        return self._session

    def _content(self, message: Message) -> Union[str, List[Dict[str, Any]]]:
        if not message.images or not self.accepts_images:
            return message.text
        parts: List[Dict[str, Any]] = [{"type": "text", "text": message.text}]
        for ref in message.images:
            if is_remote_ref(ref):
                url = ref
            else:
                encoded = encode_image_file(ref, self.image_base_dir)
                if encoded is None:
                    continue
                url = f"data:{encoded[0]};base64,{encoded[1]}"
            parts.append({"type": "image_url", "image_url": {"url": url}})
        return parts

    def build_payload(self, request: PromptRequest) -> Dict[str, Any]:
        return {
            "model": request.model_tag or self.model_tag,
            "messages": [{"role": m.role, "content": self._content(m)} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        }

    @staticmethod
    def _first_choice_text(data: Dict[str, Any]) -> str:
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise TransportFailure(f"malformed completion response: {e}", body=json.dumps(data)[:BODY_PREVIEW_CHARS])
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        return content or ""

    async def complete(self, request: PromptRequest) -> str:
        payload = self.build_payload(request)
        session = self._get_session()
        last_error: Optional[TransportFailure] = None

        for attempt in range(self.retries + 1):
            try:
                async with session.post(self.url, json=payload) as response:
                    body = await response.text()
                    if response.status == 200:
                        return self._first_choice_text(json.loads(body))
                    failure = TransportFailure(
                        f"HTTP {response.status} from {self.url}",
                        status=response.status,
                        body=body[:BODY_PREVIEW_CHARS],
                    )
                    if response.status not in RETRYABLE_STATUS:
                        raise failure
                    last_error = failure
            except asyncio.TimeoutError:
                last_error = TransportFailure(f"timeout after {self.timeout.total}s calling {self.url}")
            except aiohttp.ClientError as e:
                last_error = TransportFailure(f"transport error calling {self.url}: {e}")
            except json.JSONDecodeError as e:
                raise TransportFailure(f"response is not JSON: {e.msg}") from e

            if attempt < self.retries:
                wait = self.backoff_s * (2 ** attempt) * (1 + random.random())
                logger.warning(f"{last_error}; retry {attempt + 1}/{self.retries} in {wait:.2f}s")
                await asyncio.sleep(wait)

        raise last_error


def http_backend(
    endpoint_url: str,
    auth_token: Optional[str] = None,
    model_tag: str = "",
    timeout_s: float = 120.0,
    retries: int = 2,
    **kwargs,
) -> HttpBackend:
    return HttpBackend(endpoint_url, api_key=auth_token, model_tag=model_tag, timeout_s=timeout_s, retries=retries, **kwargs)


# ==============================================================================
# ANTHROPIC (Messages API)
# ==============================================================================

class AnthropicBackend:
    """Messages-API backend; images are sent as base64 or URL image blocks"""

    def __init__(
        self,
        api_key: Optional[str],
        model_tag: str,
        timeout_s: float = 120.0,
        retries: int = 2,
        accepts_images: bool = True,
        image_base_dir: Optional[Path] = None,
        client: Optional[Any] = None,
    ):
        self.model_tag = model_tag
        self.accepts_images = accepts_images
        self.image_base_dir = image_base_dir
        self.client = client or anthropic.AsyncAnthropic(api_key=api_key, timeout=timeout_s, max_retries=retries)

    def _blocks(self, message: Message) -> List[Dict[str, Any]]:
        blocks: List[Dict[str, Any]] = []
        if self.accepts_images:
            for ref in message.images:
                if ref.startswith(("http://", "https://")):
                    blocks.append({"type": "image", "source": {"type": "url", "url": ref}})
                    continue
                encoded = encode_image_file(ref, self.image_base_dir)
                if encoded is not None:
                    blocks.append({
                        "type": "image",
                        "source": {"type": "base64", "media_type": encoded[0], "data": encoded[1]},
                    })
        blocks.append({"type": "text", "text": message.text})
        return blocks

    def build_kwargs(self, request: PromptRequest) -> Dict[str, Any]:
        system = "\n".join(m.text for m in request.messages if m.role == "system")
        kwargs: Dict[str, Any] = {
            "model": request.model_tag or self.model_tag,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "messages": [
                {"role": m.role, "content": self._blocks(m)} for m in request.messages if m.role != "system"
            ],
        }
        if system:
            kwargs["system"] = system
        return kwargs

    async def complete(self, request: PromptRequest) -> str:
        try:
            response = await self.client.messages.create(**self.build_kwargs(request))
        except anthropic.APIStatusError as e:
            raise TransportFailure(
                f"HTTP {e.status_code} from Messages API", status=e.status_code, body=str(e.message)[:BODY_PREVIEW_CHARS]
            ) from e
        except (anthropic.APIConnectionError, anthropic.APITimeoutError) as e:
            raise TransportFailure(f"Messages API unreachable: {e}") from e
        return "".join(block.text for block in response.content if getattr(block, "type", "") == "text")


def anthropic_backend(api_key: Optional[str], model_tag: str, **kwargs) -> AnthropicBackend:
    return AnthropicBackend(api_key=api_key, model_tag=model_tag, **kwargs)


def backend_from_settings(
    settings: GatewaySettings,
    role: Literal["filter", "reasoner"],
    kind: Literal["http", "anthropic"] = "http",
    image_base_dir: Optional[Path] = None,
    backoff_s: float = 0.5,
) -> ModelBackend:
    """Build the ranker or reasoner backend from environment settings; transport retries happen here"""
    model_tag = settings.filter_model if role == "filter" else settings.reasoner_model
    accepts_images = role == "reasoner"
    if kind == "anthropic":
        return anthropic_backend(
            settings.api_key,
            model_tag,
            timeout_s=settings.timeout_s,
            retries=settings.retries,
            accepts_images=accepts_images,
            image_base_dir=image_base_dir,
        )
    if kind != "http":
        raise PipelineError(f"unknown backend kind {kind!r}")
    return http_backend(
        settings.endpoint_url,
        settings.api_key,
        model_tag,
        timeout_s=settings.timeout_s,
        retries=settings.retries,
        backoff_s=backoff_s,
        accepts_images=accepts_images,
        image_base_dir=image_base_dir,
    )
