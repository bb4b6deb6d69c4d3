"""
Chat-completions client used by the remote generator, implementer and scheduler.

Replies must be JSON matching one of the reply schemas; a reply that does not
validate gets one reformat request before MalformedReply is raised. In replay
mode replies come from a directory of files named by the prompt's SHA-256;
record mode calls the endpoint and writes those files.
"""

import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path

import requests
from decouple import config as env
from django.conf import settings
from django.template.loader import render_to_string

from .exceptions import ConfigurationError, GatewayUnavailable, MalformedReply
from .serializers import REPLY_SCHEMAS

logger = logging.getLogger(__name__)

MODES = ("live", "record", "replay")
SYSTEM_PROMPT = "You are a quantitative researcher. Reply with a single JSON object and nothing else."

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str = ""
    model: str = "gpt-4o"
    token_env: str = "ALPHALOOP_LLM_TOKEN"
    temperature: float = 0.8
    max_tokens: int = 4096
    timeout: float = 120.0
    retries: int = 2
    mode: str = "live"
    replay_dir: str = ""

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigurationError("gateway timeout must be positive")
        if self.retries < 0:
            raise ConfigurationError("gateway retries must be non-negative")
        if self.mode not in MODES:
            raise ConfigurationError(f"gateway mode must be one of {MODES}")

    @classmethod
    def from_settings(cls):
        gateway = settings.LLM_GATEWAY
        return cls(
            endpoint=gateway["ENDPOINT"],
            model=gateway["MODEL"],
            token_env=gateway["TOKEN_ENV"],
            temperature=gateway["TEMPERATURE"],
            max_tokens=gateway["MAX_TOKENS"],
            timeout=gateway["TIMEOUT"],
            retries=gateway["RETRIES"],
            mode=gateway["MODE"],
            replay_dir=gateway["REPLAY_DIR"],
        )

    def check_ready(self):
        """Raise ConfigurationError unless a request could be served."""
        if self.mode in ("live", "record") and not self.endpoint:
            raise ConfigurationError("no gateway endpoint configured")
        if self.mode in ("record", "replay") and not self.replay_dir:
            raise ConfigurationError(f"gateway mode {self.mode!r} needs a replay directory")


class TokenCounter:
    def __init__(self):
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.requests = 0
        self._lock = threading.Lock()

    def add(self, usage):
        with self._lock:
            self.requests += 1
            self.prompt_tokens += int((usage or {}).get("prompt_tokens", 0))
            self.completion_tokens += int((usage or {}).get("completion_tokens", 0))

    def to_dict(self):
        return {
            "requests": self.requests,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def prompt_key(prompt):
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _decode(text):
    return json.loads(_FENCE.sub("", text.strip()))


class LlmGateway:
    def __init__(self, config, session=None):
        self.config = config
        self.session = session or requests.Session()
        self.tokens = TokenCounter()

    # -- transport -------------------------------------------------------------

    def _replay_path(self, prompt):
        return Path(self.config.replay_dir) / f"{prompt_key(prompt)}.json"

    def _post(self, prompt):
        if not self.config.endpoint:
            raise ConfigurationError("no gateway endpoint configured")
        headers = {"Content-Type": "application/json"}
        token = env(self.config.token_env, default="")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        response = self._send(body, headers)
        # requests.JSONDecodeError is also a RequestException; a body that
        # arrived is never retried.
        try:
            payload = response.json()
            content = payload["choices"][0]["message"]["content"]
            return content, payload.get("usage", {})
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedReply(f"unexpected response body: {exc}", raw=response.text) from None

    def _send(self, body, headers):
        last_error = None
        for attempt in range(1, self.config.retries + 2):
            try:
                response = self.session.post(
                    self.config.endpoint, json=body, headers=headers, timeout=self.config.timeout
                )
                response.raise_for_status()
                return response
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("gateway attempt %d failed: %s", attempt, exc)
        raise GatewayUnavailable(
            f"gateway unreachable after {self.config.retries + 1} attempts: {last_error}"
        )

    def complete(self, prompt):
        """Raw reply text for one prompt."""
        if self.config.mode == "replay":
            path = self._replay_path(prompt)
            if not path.exists():
                raise GatewayUnavailable(f"no recorded reply for prompt {prompt_key(prompt)}")
            recorded = json.loads(path.read_text())
            self.tokens.add(recorded.get("usage"))
            return recorded["content"]

        content, usage = self._post(prompt)
        self.tokens.add(usage)
        if self.config.mode == "record":
            path = self._replay_path(prompt)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"prompt": prompt, "content": content, "usage": usage}, indent=2))
        return content

    # -- structured replies --------------------------------------------------------

    def _validate(self, text, schema):
        try:
            data = _decode(text)
        except json.JSONDecodeError as exc:
            return None, {"json": [str(exc)]}
        serializer = REPLY_SCHEMAS[schema](data=data)
        if serializer.is_valid():
            return serializer.validated_data, None
        return None, serializer.errors

    def generate(self, prompt, schema):
        if schema not in REPLY_SCHEMAS:
            raise ConfigurationError(f"unknown reply schema {schema!r}")
        text = self.complete(prompt)
        data, errors = self._validate(text, schema)
        if data is not None:
            return data
        logger.warning("reply did not match the %s schema, asking for a reformat", schema)
        retry_prompt = render_to_string(
            "research/reformat_prompt.txt",
            {"schema": schema, "errors": json.dumps(errors, default=str), "raw": text},
        )
        text = self.complete(retry_prompt)
        data, errors = self._validate(text, schema)
        if data is None:
            raise MalformedReply(f"reply does not match the {schema} schema: {errors}", raw=text)
        return data
