"""Provider-agnostic LLM access.

Renders prompt templates, issues structured-output requests, validates the
response against a declarative contract, and retries with a repair
instruction on malformed output. A deterministic scripted provider replays
canned responses for tests and offline runs.
"""

from __future__ import annotations

import json
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import httpx

from .templates import DEFAULT_TEMPLATES, PromptTemplate, ResponseContract


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Network/provider failure; retryable up to max_retries."""


class ContractViolationError(GatewayError):
    """Model output failed the response contract after all retries.

    Carries the last raw response for audit.
    """

    def __init__(self, message: str, raw_response: str = "", attempts: int = 0):
        super().__init__(message)
        self.raw_response = raw_response
        self.attempts = attempts


class TranscriptExhaustedError(GatewayError):
    """Scripted provider has no remaining entry matching the request."""


class MissingBindingError(GatewayError):
    def __init__(self, missing: Sequence[str]):
        super().__init__(f"missing bindings: {', '.join(sorted(missing))}")
        self.missing = tuple(sorted(missing))


class ProviderConfigError(GatewayError):
    """Invalid or incomplete provider configuration (e.g. missing API key)."""


@dataclass(frozen=True)
class ProviderConfig:
    provider_id: str = "scripted"  # "hosted_api" | "scripted"
    model_id: str = "scripted"
    api_key_env_var: str = "SCHEMATIQ_API_KEY"
    base_url: Optional[str] = None
    temperature: float = 0.0
    max_output_tokens: int = 4096
    request_timeout_s: float = 60.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.provider_id not in ("hosted_api", "scripted"):
            raise ProviderConfigError(f"unknown provider_id {self.provider_id!r}")
        if not 0.0 <= self.temperature <= 1.0:
            raise ProviderConfigError("temperature must be in [0, 1]")
        if self.max_output_tokens <= 0 or self.request_timeout_s <= 0:
            raise ProviderConfigError("token and timeout limits must be positive")
        if self.max_retries < 0:
            raise ProviderConfigError("max_retries must be >= 0")


@dataclass(frozen=True)
class LlmExchange:
    template_id: str
    rendered_prompt: str
    raw_response: str
    parsed: Optional[dict]
    attempt: int
    usage: Mapping[str, int] = field(default_factory=lambda: {"input_tokens": 0, "output_tokens": 0})


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute named placeholders; every required binding must be present."""
    missing = [name for name in template.required_bindings if name not in bindings]
    if missing:
        raise MissingBindingError(missing)
    out = template.body
    for name in template.required_bindings:
        out = out.replace("{" + name + "}", str(bindings[name]))
    return out


_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


def parse_structured(raw: str, contract: ResponseContract) -> dict:
    """Strict JSON parse plus contract check. Raises ValueError with a
    human-readable reason on any failure; no regex salvage."""
    text = raw.strip()
    fenced = _FENCE_RE.match(text)
    if fenced:
        text = fenced.group(1).strip()
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(parsed, dict):
        raise ValueError("response must be a JSON object")
    errors = contract.check(parsed)
    if errors:
        raise ValueError("; ".join(errors))
    return parsed


class ScriptedTranscript:
    """Ordered canned responses keyed by template_id plus an optional
    binding-containment predicate. Each entry is consumed at most once, so
    identical request sequences always replay identically."""

    def __init__(self, entries: Sequence[Mapping[str, Any]]):
        self._entries = [dict(e) for e in entries]
        for i, e in enumerate(self._entries):
            if "template_id" not in e or "response" not in e:
                raise ValueError(f"transcript entry {i} needs template_id and response")
        self._used = [False] * len(self._entries)
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path) -> "ScriptedTranscript":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def reset(self) -> None:
        with self._lock:
            self._used = [False] * len(self._entries)

    def take(self, template_id: str, bindings: Mapping[str, str]) -> str:
        with self._lock:
            for i, entry in enumerate(self._entries):
                if self._used[i] or entry["template_id"] != template_id:
                    continue
                needle = entry.get("binding_contains")
                if needle is not None and not any(
                    needle in str(v) for v in bindings.values()
                ):
                    continue
                self._used[i] = True
                return entry["response"]
        raise TranscriptExhaustedError(
            f"no unused transcript entry for template {template_id!r} "
            f"(bindings: {sorted(bindings)})"
        )


def _estimate_tokens(text: str) -> int:
    return max(1, len(text) // 4)


class _HostedBackend:
    """JSON-over-HTTPS chat-completions call. The API key comes from the
    environment variable named in the config, never from config files."""

    DEFAULT_BASE_URL = "https://api.together.xyz/v1/chat/completions"

    def __init__(self, config: ProviderConfig):
        key = os.environ.get(config.api_key_env_var, "")
        if not key:
            raise ProviderConfigError(
                f"environment variable {config.api_key_env_var} is not set"
            )
        self._key = key
        self._url = config.base_url or self.DEFAULT_BASE_URL
        self._config = config

    def send(self, prompt: str) -> tuple[str, dict]:
        cfg = self._config
        body = {
            "model": cfg.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        }
        try:
            resp = httpx.post(
                self._url,
                json=body,
                headers={"Authorization": f"Bearer {self._key}"},
                timeout=cfg.request_timeout_s,
            )
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed provider response: {exc}") from exc
        usage = data.get("usage", {})
        return text, {
            "input_tokens": int(usage.get("prompt_tokens", _estimate_tokens(prompt))),
            "output_tokens": int(usage.get("completion_tokens", _estimate_tokens(text))),
        }


class _ScriptedBackend:
    def __init__(self, transcript: ScriptedTranscript):
        self._transcript = transcript
        self.template_id = ""
        self.bindings: Mapping[str, str] = {}

    def send(self, prompt: str) -> tuple[str, dict]:
        text = self._transcript.take(self.template_id, self.bindings)
        return text, {
            "input_tokens": _estimate_tokens(prompt),
            "output_tokens": _estimate_tokens(text),
        }


_REPAIR_NOTE = (
    "\n\nYour previous response could not be used: {error}\n"
    "Respond again with only a valid JSON object matching the required format."
)


@dataclass
class UsageCounters:
    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0


class LlmGateway:
    """One configured model endpoint plus the prompt template registry.

    Stateless between calls apart from the scripted transcript cursor and
    usage counters; concurrent calls are capped by a semaphore.
    """

    def __init__(
        self,
        config: ProviderConfig,
        transcript: Optional[ScriptedTranscript] = None,
        templates: Optional[Mapping[str, PromptTemplate]] = None,
        max_in_flight: int = 4,
    ):
        self.config = config
        self.templates = dict(DEFAULT_TEMPLATES)
        if templates:
            self.templates.update(templates)
        if config.provider_id == "scripted":
            if transcript is None:
                raise ProviderConfigError("scripted provider requires a transcript")
            self._backend = _ScriptedBackend(transcript)
        else:
            self._backend = _HostedBackend(config)
        self._sem = threading.Semaphore(max_in_flight)
        self._scripted = config.provider_id == "scripted"
        self._usage_lock = threading.Lock()
        self.usage = UsageCounters()
        self.exchanges: list[LlmExchange] = []
        self.record_exchanges = True

    def template(self, template_id: str) -> PromptTemplate:
        try:
            return self.templates[template_id]
        except KeyError:
            raise GatewayError(f"unknown template {template_id!r}") from None

    def complete(self, template_id: str, bindings: Mapping[str, str]) -> LlmExchange:
        """Render, call, parse, and contract-check; retries up to
        config.max_retries with the validation error quoted back."""
        template = self.template(template_id)
        prompt = render_prompt(template, bindings)
        if self._scripted:
            self._backend.template_id = template_id
            self._backend.bindings = bindings

        attempts_allowed = self.config.max_retries + 1
        current_prompt = prompt
        total_usage = {"input_tokens": 0, "output_tokens": 0}
        last_raw = ""
        last_error: Optional[Exception] = None

        for attempt in range(1, attempts_allowed + 1):
            with self._sem:
                try:
                    raw, usage = self._backend.send(current_prompt)
                except TransportError as exc:
                    last_error = exc
                    if attempt == attempts_allowed:
                        raise TransportError(
                            f"provider failed after {attempt} attempts: {exc}"
                        ) from exc
                    continue
            total_usage["input_tokens"] += usage["input_tokens"]
            total_usage["output_tokens"] += usage["output_tokens"]
            last_raw = raw
            try:
                parsed = parse_structured(raw, template.response_contract)
            except ValueError as exc:
                last_error = exc
                if attempt == attempts_allowed:
                    break
                current_prompt = prompt + _REPAIR_NOTE.format(error=exc)
                continue
            exchange = LlmExchange(
                template_id=template_id,
                rendered_prompt=prompt,
                raw_response=raw,
                parsed=parsed,
                attempt=attempt,
                usage=total_usage,
            )
            self._record(exchange)
            return exchange

        self._record(
            LlmExchange(
                template_id=template_id,
                rendered_prompt=prompt,
                raw_response=last_raw,
                parsed=None,
                attempt=attempts_allowed,
                usage=total_usage,
            )
        )
        raise ContractViolationError(
            f"model output failed contract after {attempts_allowed} attempts: {last_error}",
            raw_response=last_raw,
            attempts=attempts_allowed,
        )

    def _record(self, exchange: LlmExchange) -> None:
        with self._usage_lock:
            self.usage.calls += 1
            self.usage.input_tokens += exchange.usage["input_tokens"]
            self.usage.output_tokens += exchange.usage["output_tokens"]
            if self.record_exchanges:
                self.exchanges.append(exchange)
