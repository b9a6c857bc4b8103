"""LLM client abstraction: a deterministic mock, an HTTP chat client, and retry handling."""
from dataclasses import dataclass, field
import hashlib
import json
import logging
import random
import threading

import httpx

from ..errors import ContentError, TransportError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LLMRequest:
    stage: str  # "describe" or "rewrite"
    story_id: str
    index: int  # image index for descriptions, -1 for rewrites
    template_id: str
    template_hash: str
    prompt: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def key(self):
        ident = json.dumps([self.story_id, self.stage, self.index, self.template_hash])
        return hashlib.sha256(ident.encode()).hexdigest()


@dataclass
class LLMClientSpec:
    endpoint: str = "mock://"
    model: str = "mock"
    timeout: float = 30.0
    retries: int = 2
    client_id: str = "mock"


class MockLLMClient:
    """Deterministic stand-in for the captioning and rewriting models.

    ``descriptions`` maps image refs to canned text. ``faults`` maps story ids
    to a corruption applied to that story's rewrite: ``wrong_count``,
    ``too_short``, ``bad_order``, ``no_separators`` or ``empty``.
    """

    client_id = "mock"

    def __init__(self, seed=0, descriptions=None, faults=None, paragraph_words=72):
        self.seed = seed
        self.descriptions = dict(descriptions or {})
        self.faults = dict(faults or {})
        self.paragraph_words = paragraph_words
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request, timeout=None):
        with self._lock:
            self.calls += 1
        if request.stage == "describe":
            return self._describe(request.meta["image_ref"])
        return self._rewrite(request)

    def _rng(self, *parts):
        digest = hashlib.sha256(json.dumps([self.seed, *parts]).encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "little"))

    def _describe(self, image_ref):
        if image_ref in self.descriptions:
            return self.descriptions[image_ref]
        rng = self._rng("describe", image_ref)
        scene = rng.choice(["a sunny park", "a quiet street", "a crowded kitchen", "a lakeside dock", "a school hall"])
        who = rng.choice(["a young girl", "an old man", "two friends", "a brown dog", "a family of four"])
        act = rng.choice(["laughing together", "carrying a basket", "pointing at the sky", "sitting on a bench", "waving"])
        detail = rng.choice(["soft evening light", "bright colored flags", "a red bicycle", "tall green trees", "paper lanterns"])
        return f"The photo shows {who} in {scene}, {act}. In the background there are {detail}."

    def _paragraph(self, rng, i, plot, description):
        filler = (
            "The moment felt important to everyone there, and small details seemed to matter more than usual. "
            "Nobody wanted to rush, so they lingered and talked about what might happen next. "
            "A gentle breeze carried voices across the place while the light slowly changed. "
            "Later they would remember this scene as the point where the day really began to turn. "
        ).split()
        words = f"{plot.rstrip('.')}. {description}".split()
        start = rng.randrange(len(filler))
        while len(words) < self.paragraph_words:
            words.append(filler[start % len(filler)])
            start += 1
        return f"Paragraph {i + 1}: " + " ".join(words)

    def _rewrite(self, request):
        plots = request.meta["storyline"]
        descriptions = request.meta["descriptions"]
        rng = self._rng("rewrite", request.story_id)
        paragraphs = [self._paragraph(rng, i, p, d) for i, (p, d) in enumerate(zip(plots, descriptions))]
        fault = self.faults.get(request.story_id)
        if fault == "wrong_count":
            paragraphs = paragraphs[:-1]
        elif fault == "too_short":
            paragraphs[len(paragraphs) // 2] = f"Paragraph {len(paragraphs) // 2 + 1}: Then it ended."
        elif fault == "bad_order" and len(paragraphs) > 1:
            paragraphs[0], paragraphs[1] = paragraphs[1], paragraphs[0]
        elif fault == "no_separators":
            return " ".join(p.split(": ", 1)[1] for p in paragraphs)
        elif fault == "empty":
            return ""
        return "\n\n".join(paragraphs)


class UnreachableClient:
    """Always fails at the transport layer; counts attempts."""

    client_id = "unreachable"

    def __init__(self):
        self.calls = 0

    def complete(self, request, timeout=None):
        self.calls += 1
        raise TransportError("endpoint unreachable")


class HTTPChatClient:
    """Chat-completions style HTTP endpoint (``POST {endpoint}`` with a messages list)."""

    def __init__(self, spec, api_key=None, transport=None):
        self.spec = spec
        self.client_id = spec.client_id
        self.calls = 0
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=spec.timeout, headers=headers, transport=transport)

    def complete(self, request, timeout=None):
        self.calls += 1
        payload = {"model": self.spec.model, "messages": [{"role": "user", "content": request.prompt}]}
        if request.meta.get("image_b64"):
            payload["images"] = [request.meta["image_b64"]]
        try:
            resp = self._http.post(self.spec.endpoint, json=payload, timeout=timeout or self.spec.timeout)
            resp.raise_for_status()
        except (httpx.TransportError, httpx.HTTPStatusError) as exc:
            raise TransportError(f"{self.spec.endpoint}: {exc}") from exc
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return data.get("content", "") if isinstance(data, dict) else ""


def call_with_retries(client, request, retries=2, timeout=None):
    """Call ``client`` up to ``retries + 1`` times; empty answers raise :class:`ContentError`."""
    last = None
    for attempt in range(retries + 1):
        log.info("llm request story=%s stage=%s index=%d attempt=%d", request.story_id, request.stage, request.index, attempt + 1)
        try:
            text = client.complete(request, timeout=timeout)
        except TransportError as exc:
            last = exc
            log.warning("llm transport failure story=%s stage=%s: %s", request.story_id, request.stage, exc)
            continue
        if not text or not text.strip():
            raise ContentError(f"empty response for story {request.story_id} ({request.stage})")
        log.info("llm response story=%s stage=%s index=%d chars=%d", request.story_id, request.stage, request.index, len(text))
        return text
    raise TransportError(f"gave up after {retries + 1} attempts: {last}")
