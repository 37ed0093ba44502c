"""Language-model backends: generate a continuation, or score one token-by-token.

Two implementations share the contract: a deterministic scripted backend
driven by a JSON rule table (the test oracle), and an HTTP client for
completion-protocol inference servers that report token logprobs.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import requests

from .prompting import PromptText


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Network-level or server-side failure after retries."""


class ContextOverflowError(BackendError):
    """Prompt exceeds the backend's context budget; raised before any call."""


class CapabilityError(BackendError):
    """Backend asked for an operation it does not support."""


class RuleMissError(BackendError):
    """Scripted backend has no rule (and no fallback) for this prompt."""


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 256
    temperature: float = 0.0
    stop: tuple[str, ...] = ("\n\n",)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    finish_reason: str


@dataclass(frozen=True)
class TokenLogProbs:
    """Per-token natural-log probabilities of a scored continuation."""

    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.logprobs):
            raise ValueError("tokens and logprobs must have equal length")
        for lp in self.logprobs:
            if lp > 0:
                raise ValueError(f"logprob {lp} > 0 is not a probability")

    @property
    def total(self) -> float:
        return math.fsum(self.logprobs)

    @property
    def text(self) -> str:
        return "".join(self.tokens)


def tokenize_text(text: str) -> list[str]:
    """Whitespace-piece tokenization whose concatenation reproduces the text."""
    if not text:
        return []
    pieces = re.findall(r"\S+\s*", text)
    lead = re.match(r"\s+", text)
    if lead:
        if pieces:
            pieces[0] = lead.group(0) + pieces[0]
        else:
            pieces = [lead.group(0)]
    return pieces


def _prompt_text(prompt: "PromptText | str") -> str:
    return prompt.text if isinstance(prompt, PromptText) else prompt


class Backend:
    """Shared interface: capabilities plus generate/score entry points."""

    capabilities: frozenset[str] = frozenset()
    max_context: Optional[int] = None

    def generate(self, prompt: "PromptText | str",
                 params: GenerationParams = GenerationParams()) -> GenerationResult:
        raise NotImplementedError

    def score(self, prompt: "PromptText | str", continuation: str) -> TokenLogProbs:
        raise NotImplementedError

    def _check_context(self, text: str) -> None:
        if self.max_context is not None:
            if len(tokenize_text(text)) > self.max_context:
                raise ContextOverflowError(
                    f"prompt of ~{len(tokenize_text(text))} tokens exceeds "
                    f"max_context {self.max_context}")


@dataclass
class ScriptedRule:
    """One entry of the scripted backend's rule table."""

    prompt_equals: Optional[str] = None
    prompt_contains: tuple[str, ...] = ()
    prompt_regex: Optional[str] = None
    continuation_equals: Optional[str] = None
    completion: Optional[str] = None
    logprobs: Optional[tuple[float, ...]] = None
    tokens: Optional[tuple[str, ...]] = None

    def matches_prompt(self, prompt: str) -> bool:
        if self.prompt_equals is not None:
            return prompt == self.prompt_equals
        if self.prompt_contains:
            return all(s in prompt for s in self.prompt_contains)
        if self.prompt_regex is not None:
            return re.search(self.prompt_regex, prompt) is not None
        return True  # unconditioned rule

    def matches_continuation(self, continuation: str) -> bool:
        target = self.continuation_equals
        if target is None:
            target = self.completion
        return target is not None and continuation == target

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedRule":
        contains = d.get("prompt_contains", ())
        if isinstance(contains, str):
            contains = (contains,)
        logprobs = d.get("logprobs")
        tokens = d.get("tokens")
        rule = cls(
            prompt_equals=d.get("prompt_equals"),
            prompt_contains=tuple(contains),
            prompt_regex=d.get("prompt_regex"),
            continuation_equals=d.get("continuation_equals"),
            completion=d.get("completion"),
            logprobs=tuple(logprobs) if logprobs is not None else None,
            tokens=tuple(tokens) if tokens is not None else None,
        )
        if rule.logprobs is not None:
            toks = rule.tokens
            if toks is None:
                source = rule.continuation_equals or rule.completion or ""
                toks = tuple(tokenize_text(source))
            if len(toks) != len(rule.logprobs):
                raise ValueError(
                    f"rule has {len(rule.logprobs)} logprobs for {len(toks)} tokens")
        return rule

    def token_logprobs(self, continuation: str) -> TokenLogProbs:
        tokens = self.tokens
        if tokens is None:
            tokens = tuple(tokenize_text(continuation))
        return TokenLogProbs(tokens=tokens, logprobs=self.logprobs or ())


class ScriptedBackend(Backend):
    """Deterministic backend driven by an ordered rule table.

    First matching rule wins. Scoring falls back to a uniform
    distribution (every token at -ln V) when no rule matches and a
    vocabulary size V is configured.
    """

    capabilities = frozenset({"generate", "score"})

    def __init__(self, rules: Sequence[ScriptedRule] = (),
                 vocab_size: Optional[int] = None,
                 fallback_completion: Optional[str] = None,
                 max_context: Optional[int] = None):
        self.rules = list(rules)
        self.vocab_size = vocab_size
        self.fallback_completion = fallback_completion
        self.max_context = max_context
        # exact-prompt rules resolved via dict; pattern rules scanned in order
        self._equals: dict[str, list[tuple[int, ScriptedRule]]] = {}
        self._patterns: list[tuple[int, ScriptedRule]] = []
        for pos, rule in enumerate(self.rules):
            if rule.prompt_equals is not None:
                self._equals.setdefault(rule.prompt_equals, []).append((pos, rule))
            else:
                self._patterns.append((pos, rule))

    @classmethod
    def from_spec(cls, spec: dict) -> "ScriptedBackend":
        return cls(
            rules=[ScriptedRule.from_dict(r) for r in spec.get("rules", [])],
            vocab_size=spec.get("vocab_size"),
            fallback_completion=spec.get("fallback_completion"),
            max_context=spec.get("max_context"),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls.from_spec(json.loads(Path(path).read_text(encoding="utf-8")))

    def _candidates(self, prompt: str):
        cands = list(self._equals.get(prompt, []))
        cands.extend((pos, rule) for pos, rule in self._patterns
                     if rule.matches_prompt(prompt))
        cands.sort(key=lambda pr: pr[0])
        return [rule for _, rule in cands]

    def generate(self, prompt: "PromptText | str",
                 params: GenerationParams = GenerationParams()) -> GenerationResult:
        text = _prompt_text(prompt)
        self._check_context(text)
        for rule in self._candidates(text):
            if rule.completion is not None:
                out = rule.completion
                for stop in params.stop:
                    idx = out.find(stop)
                    if idx >= 0:
                        out = out[:idx]
                return GenerationResult(text=out, finish_reason="stop")
        if self.fallback_completion is not None:
            return GenerationResult(text=self.fallback_completion,
                                    finish_reason="stop")
        raise RuleMissError(f"no scripted rule matches prompt: {text[:80]!r}...")

    def score(self, prompt: "PromptText | str", continuation: str) -> TokenLogProbs:
        text = _prompt_text(prompt)
        self._check_context(text)
        for rule in self._candidates(text):
            if rule.logprobs is not None and rule.matches_continuation(continuation):
                return rule.token_logprobs(continuation)
        if self.vocab_size is not None:
            lp = -math.log(self.vocab_size)
            tokens = tuple(tokenize_text(continuation))
            return TokenLogProbs(tokens=tokens, logprobs=(lp,) * len(tokens))
        raise RuleMissError(
            "no scoring rule matches and no vocab_size fallback configured")


class HTTPBackend(Backend):
    """Client for a completion-protocol inference server.

    Generation posts the prompt; scoring posts prompt+continuation with
    echoed logprobs and reads back the continuation-suffix tokens via
    text offsets. Retries (bounded, exponential backoff) apply only to
    transport failures and 5xx responses.
    """

    capabilities = frozenset({"generate", "score"})

    def __init__(self, base_url: str, model: str,
                 token_env: str = "REXKIT_API_TOKEN",
                 max_context: Optional[int] = None,
                 max_in_flight: int = 4,
                 max_retries: int = 3,
                 backoff: float = 0.5,
                 timeout: float = 120.0,
                 trace: Optional[Callable[[dict, dict], None]] = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token_env = token_env
        self.max_context = max_context
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.trace = trace
        self._sem = threading.Semaphore(max_in_flight)
        self._session = requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, body: dict) -> dict:
        url = f"{self.base_url}/v1/completions"
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                with self._sem:
                    resp = self._session.post(url, json=body,
                                              headers=self._headers(),
                                              timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(
                    f"server error {resp.status_code}: {resp.text[:200]}")
                continue
            if resp.status_code >= 400:
                raise BackendError(
                    f"request rejected ({resp.status_code}): {resp.text[:200]}")
            payload = resp.json()
            if self.trace is not None:
                self.trace(body, payload)
            return payload
        raise TransportError(f"request failed after {self.max_retries + 1} "
                             f"attempts: {last_exc}")

    def generate(self, prompt: "PromptText | str",
                 params: GenerationParams = GenerationParams()) -> GenerationResult:
        text = _prompt_text(prompt)
        self._check_context(text)
        body = {
            "model": self.model,
            "prompt": text,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "stop": list(params.stop),
            "logprobs": 0,
            "echo": False,
        }
        payload = self._post(body)
        choice = payload["choices"][0]
        return GenerationResult(text=choice["text"],
                                finish_reason=choice.get("finish_reason", "stop"))

    def score(self, prompt: "PromptText | str", continuation: str) -> TokenLogProbs:
        text = _prompt_text(prompt)
        self._check_context(text)
        if not continuation:
            return TokenLogProbs(tokens=(), logprobs=())
        body = {
            "model": self.model,
            "prompt": text + continuation,
            "max_tokens": 0,
            "temperature": 0.0,
            "echo": True,
            "logprobs": 1,
        }
        payload = self._post(body)
        lp = payload["choices"][0]["logprobs"]
        tokens = lp["tokens"]
        token_logprobs = lp["token_logprobs"]
        offsets = lp["text_offset"]
        boundary = len(text)
        if boundary not in offsets:
            raise BackendError(
                "server tokenization does not split at the prompt/continuation "
                "boundary; cannot attribute logprobs to the continuation")
        start = offsets.index(boundary)
        suffix_tokens = tuple(tokens[start:])
        suffix_lps = tuple(float(x) for x in token_logprobs[start:])
        if "".join(suffix_tokens) != continuation:
            raise BackendError("echoed continuation tokens do not reconstruct "
                               "the continuation text")
        return TokenLogProbs(tokens=suffix_tokens, logprobs=suffix_lps)


def load_backend(descriptor: str, model: Optional[str] = None,
                 token_env: str = "REXKIT_API_TOKEN",
                 max_in_flight: int = 4) -> Backend:
    """Build a backend from a descriptor: an http(s) URL or a scripted-spec path."""
    if descriptor.startswith(("http://", "https://")):
        if not model:
            raise ValueError("HTTP backend requires a model id")
        return HTTPBackend(descriptor, model=model, token_env=token_env,
                           max_in_flight=max_in_flight)
    return ScriptedBackend.from_file(descriptor)
