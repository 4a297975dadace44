"""HTTP adapters for chat-completion planners/verifiers and the video endpoint."""

from __future__ import annotations

import base64
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import httpx
from jsonschema import Draft202012Validator

from ..errors import BackendError, GenerationTimeout
from ..gcm import ArtifactRef
from ..resources import prompt, schema
from ..storyboard import CharacterDecl
from ..synthesis import FrameRef, ShotArtifact, SynthesisMode, SynthesisRequest, request_to_wire

log = logging.getLogger(__name__)

DEFAULT_FPS = 16

TOKEN_ENV = {
    "planner": "STORYLOOP_PLANNER_TOKEN",
    "verifier": "STORYLOOP_VERIFIER_TOKEN",
    "synth": "STORYLOOP_SYNTH_TOKEN",
}


@dataclass(frozen=True)
class BackendEndpoint:
    """Where and how to reach a backend.

    ``auth_token_ref`` names the environment variable holding the bearer
    token; the secret itself is never stored in configs or journals.
    """

    base_url: str
    auth_token_ref: str | None = None
    timeout_s: float = 60.0
    transport_retries: int = 1
    model: str | None = None
    extra_headers: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.transport_retries < 0:
            raise ValueError("transport_retries must be non-negative")

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json", **self.extra_headers}
        if self.auth_token_ref:
            token = os.environ.get(self.auth_token_ref)
            if not token:
                raise BackendError("auth", f"environment variable {self.auth_token_ref} is not set")
            h["Authorization"] = f"Bearer {token}"
        return h

    def to_dict(self) -> dict:
        return {
            "base_url": self.base_url,
            "auth_token_ref": self.auth_token_ref,
            "timeout_s": self.timeout_s,
            "transport_retries": self.transport_retries,
            "model": self.model,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendEndpoint":
        return cls(
            base_url=d["base_url"],
            auth_token_ref=d.get("auth_token_ref"),
            timeout_s=float(d.get("timeout_s", 60.0)),
            transport_retries=int(d.get("transport_retries", 1)),
            model=d.get("model"),
        )


def _post(
    endpoint: BackendEndpoint,
    path: str,
    body: dict,
    client: httpx.Client | None,
    *,
    timeout_error: type[BackendError] | None = None,
) -> Any:
    url = endpoint.base_url.rstrip("/") + path
    headers = endpoint.headers()
    own = client is None
    client = client or httpx.Client()
    last: BackendError | None = None
    try:
        for attempt in range(endpoint.transport_retries + 1):
            try:
                resp = client.post(url, json=body, headers=headers, timeout=endpoint.timeout_s)
            except httpx.TimeoutException as e:
                last = timeout_error(str(e) or "timed out") if timeout_error else BackendError("timeout", str(e) or "timed out")
                log.warning("POST %s timed out (attempt %d)", url, attempt + 1)
                continue
            except httpx.TransportError as e:
                last = BackendError("transport", str(e) or type(e).__name__)
                log.warning("POST %s transport error (attempt %d): %s", url, attempt + 1, e)
                continue
            if resp.status_code in (401, 403):
                raise BackendError("auth", f"{url} rejected credentials", resp.status_code)
            if not resp.is_success:
                raise BackendError("http_status", f"{url} returned {resp.status_code}", resp.status_code)
            try:
                return resp.json()
            except ValueError:
                raise BackendError("http_status", f"{url} returned a non-JSON body", resp.status_code) from None
        assert last is not None
        raise last
    finally:
        if own:
            client.close()


def _content_part(part: str | FrameRef | ArtifactRef) -> dict:
    if isinstance(part, str):
        return {"type": "text", "text": part}
    return {"type": "image_url", "image_url": {"url": part.uri}}


def chat_body(endpoint: BackendEndpoint, system: str, user_parts: Sequence[str | FrameRef | ArtifactRef]) -> dict:
    return {
        "model": endpoint.model or "default",
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": [_content_part(p) for p in user_parts]},
        ],
    }


def chat_complete(
    endpoint: BackendEndpoint,
    system: str,
    user_parts: Sequence[str | FrameRef | ArtifactRef],
    *,
    client: httpx.Client | None = None,
) -> str:
    """One chat-completion round-trip; returns the first choice's message text."""
    data = _post(endpoint, "/chat/completions", chat_body(endpoint, system, user_parts), client)
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise BackendError("http_status", "chat response has no message content") from None
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise BackendError("http_status", "chat response content is not text")
    return content


_RESPONSE_VALIDATOR = Draft202012Validator(schema("wire/synthesis_response.json"))


def generate_video(
    endpoint: BackendEndpoint,
    request: SynthesisRequest,
    *,
    last_frame_uri: str | None = None,
    client: httpx.Client | None = None,
) -> ShotArtifact:
    body = request_to_wire(request, last_frame_uri=last_frame_uri)
    data = _post(endpoint, "/videos", body, client, timeout_error=GenerationTimeout)
    errors = sorted(_RESPONSE_VALIDATOR.iter_errors(data), key=str)
    if errors:
        raise BackendError("http_status", f"malformed synthesis response: {errors[0].message}")
    n = int(data["frames"])
    fps = float(data.get("fps") or DEFAULT_FPS)
    duration = float(data["duration_s"]) if data.get("duration_s") is not None else n / fps
    meta = data.get("frame_meta")
    if meta is None:
        uri = data["video_uri"]
        ids = [r.entity_id for r in request.entity_records] or list(request.shot.entities)
        meta = [{e: f"{uri}#frame={i}&entity={e}" for e in ids} for i in range(n)]
    elif len(meta) != n:
        raise BackendError("http_status", f"frame_meta has {len(meta)} entries for {n} frames")
    return ShotArtifact(
        shot_index=request.shot.index,
        mode_used=request.mode,
        seed=request.seed,
        video_ref=data["video_uri"],
        frame_meta=tuple(dict(f) for f in meta),
        duration_s=duration,
        content_digest=None,
    )


def generate_image(
    endpoint: BackendEndpoint, text: str, *, width: int, height: int, seed: int = 0, client: httpx.Client | None = None
) -> ArtifactRef:
    data = _post(endpoint, "/images", {"prompt": text, "width": width, "height": height, "seed": seed}, client)
    if not isinstance(data, dict) or not isinstance(data.get("image_uri"), str):
        raise BackendError("http_status", "image response has no image_uri")
    raw = data.get("image_b64")
    content = base64.b64decode(raw) if raw else data["image_uri"].encode("utf-8")
    return ArtifactRef(uri=data["image_uri"], content=content)


class HttpPlanner:
    def __init__(self, endpoint: BackendEndpoint, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.client = client

    def complete(self, system: str, user: str) -> str:
        return chat_complete(self.endpoint, system, [user], client=self.client)


class HttpVlm:
    """Sends the verifier instruction as the system message and the frames as images."""

    def __init__(self, endpoint: BackendEndpoint, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.client = client

    def ask(self, prompt_text: str, images: Sequence[FrameRef]) -> str:
        return chat_complete(self.endpoint, prompt_text, list(images), client=self.client)


class HttpSynthesisBackend:
    """Video endpoint adapter. Goal frames and portraits go through ``/images``."""

    def __init__(self, endpoint: BackendEndpoint, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.client = client

    def generate(self, request: SynthesisRequest) -> ShotArtifact:
        last_uri = None
        if request.mode is SynthesisMode.FLF2V and request.goal_frame is not None:
            goal = request.goal_frame
            if goal.prompt is not None:
                p = request.backend_params
                last_uri = generate_image(
                    self.endpoint, goal.prompt, width=p.width, height=p.height, seed=request.seed, client=self.client
                ).uri
            else:
                last_uri = goal.uri
        return generate_video(self.endpoint, request, last_frame_uri=last_uri, client=self.client)

    def render_portrait(self, decl: CharacterDecl, style: str) -> ArtifactRef:
        text = prompt("gcm_portrait").format(character=f"{decl.name}: {decl.static_features}", style=style or "Default")
        return generate_image(self.endpoint, text, width=832, height=480, client=self.client)


class HttpEmbedder:
    """Image-embedding service client: POST /embeddings {input: base64} -> {embedding: [...]}."""

    def __init__(self, endpoint: BackendEndpoint, dim: int, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.dim = dim
        self.client = client

    def embed(self, content: bytes) -> tuple[float, ...]:
        from ..errors import EmbeddingError

        data = _post(self.endpoint, "/embeddings", {"input": base64.b64encode(content).decode("ascii")}, self.client)
        vec = data.get("embedding") if isinstance(data, dict) else None
        if not isinstance(vec, list) or len(vec) != self.dim:
            raise EmbeddingError(f"embedding service returned {type(vec).__name__} of wrong shape")
        return tuple(float(x) for x in vec)
