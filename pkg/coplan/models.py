"""
Language model wrappers for the wire planner backend.

The wire backend sends a prompt string to an external completion endpoint
and reads back a plain-text response. Endpoint and key come from the
environment (or a .env file), never from config.yaml.
"""

import json
import logging
import os
import random
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import openai
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


class WireTimeoutError(TimeoutError):
    """Raised when the completion endpoint keeps timing out."""


@dataclass(frozen=True)
class WireConfig:
    provider: str = "completion"
    model_name: str = "text-davinci-003"
    temperature: float = 0.0
    max_tokens: int = 256
    stop: Tuple[str, ...] = ("\n\n",)
    timeout: float = 30.0
    max_retries: int = 5
    endpoint_env: str = "COPLAN_WIRE_ENDPOINT"
    key_env: str = "COPLAN_WIRE_KEY"
    audit_file: Optional[str] = "wire_audit.jsonl"

    @classmethod
    def from_config(cls, config: Optional[Dict[str, Any]]) -> "WireConfig":
        if not config:
            return cls()
        section = dict(config.get("wire", config))
        if "stop" in section and section["stop"] is not None:
            section["stop"] = tuple(section["stop"])
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class BaseLLM(ABC):
    """Base class for model wrappers."""

    def __init__(self, name: str, **kwargs):
        self.name = name
        self.config = kwargs

    @abstractmethod
    def prompt(self, text: str) -> str:
        """
        Send a prompt to the model and return the response.

        Args:
            text: Input prompt text

        Returns:
            Model response as string
        """


class CompletionModel(BaseLLM):
    """Wrapper for an OpenAI-compatible text completion endpoint."""

    def __init__(self, wire: WireConfig, endpoint: Optional[str] = None, api_key: Optional[str] = None):
        super().__init__(wire.model_name)
        self.wire = wire
        self.endpoint = endpoint or os.environ.get(wire.endpoint_env)
        self.api_key = api_key or os.environ.get(wire.key_env)
        if not self.api_key:
            raise ValueError(f"{wire.key_env} must be provided or set as environment variable")
        self.client = openai.OpenAI(
            api_key=self.api_key,
            base_url=self.endpoint,
            timeout=wire.timeout,
            max_retries=0,
        )

    def prompt(self, text: str) -> str:
        """Send prompt to the endpoint with exponential backoff."""
        base_delay = 1
        timeouts = 0
        for attempt in range(self.wire.max_retries):
            try:
                response = self.client.completions.create(
                    model=self.name,
                    prompt=text,
                    temperature=self.wire.temperature,
                    max_tokens=self.wire.max_tokens,
                    stop=list(self.wire.stop) or None,
                )
                return response.choices[0].text
            except Exception as e:
                if isinstance(e, openai.APITimeoutError):
                    timeouts += 1
                delay = base_delay * (2 ** attempt) + random.uniform(0, 1)
                if attempt < self.wire.max_retries - 1:
                    logger.warning(
                        f"Attempt {attempt + 1} failed with error: {e}. Retrying in {delay:.2f} seconds..."
                    )
                    time.sleep(delay)
                    continue
                logger.error(f"All {self.wire.max_retries} attempts failed. Last error: {e}")
                if timeouts == self.wire.max_retries:
                    raise WireTimeoutError(
                        f"Endpoint timed out {timeouts} times after {self.wire.timeout}s each"
                    ) from e
                raise RuntimeError(f"Failed to get response after {self.wire.max_retries} attempts") from e
        raise RuntimeError("max_retries must be positive")


class ScriptedModel(BaseLLM):
    """
    Replays canned responses, for tests and offline runs.

    Responses are either a fixed sequence (repeating the last one once
    exhausted) or a callable from prompt to response.
    """

    def __init__(
        self,
        responses: Union[Sequence[str], Callable[[str], str]],
        name: str = "scripted",
    ):
        super().__init__(name)
        if not callable(responses) and not responses:
            raise ValueError("ScriptedModel needs at least one response")
        self.responses = responses
        self.prompts: List[str] = []

    @property
    def call_count(self) -> int:
        return len(self.prompts)

    def prompt(self, text: str) -> str:
        self.prompts.append(text)
        if callable(self.responses):
            return self.responses(text)
        index = min(len(self.prompts) - 1, len(self.responses) - 1)
        return self.responses[index]


class AuditedModel(BaseLLM):
    """Model wrapper that appends every exchange to a JSONL audit file."""

    def __init__(self, base_model: BaseLLM, audit_file: Union[str, Path]):
        super().__init__(f"audited-{base_model.name}")
        self.base_model = base_model
        self.audit_file = Path(audit_file)
        self.queries: List[Dict[str, Any]] = []
        self.audit_file.parent.mkdir(parents=True, exist_ok=True)

    def prompt(self, text: str) -> str:
        entry = {
            "timestamp": datetime.now().isoformat(),
            "query_number": len(self.queries) + 1,
            "query": text,
        }
        response = self.base_model.prompt(text)
        entry["response"] = response
        self.queries.append(entry)
        with self.audit_file.open("a") as f:
            f.write(json.dumps(entry) + "\n")
        return response


def create_model_from_config(config: Dict[str, Any], audit_dir: Optional[Path] = None) -> BaseLLM:
    """
    Create a model instance from the wire section of the configuration.

    Args:
        config: Full configuration dict or its wire section
        audit_dir: When given, wrap the model in an AuditedModel writing there

    Returns:
        Configured model instance
    """
    wire = WireConfig.from_config(config)
    provider = wire.provider.lower()
    if provider == "completion":
        model: BaseLLM = CompletionModel(wire)
    elif provider == "scripted":
        section = config.get("wire", config)
        model = ScriptedModel(section.get("responses", ["> step 1: look"]))
    else:
        raise ValueError(f"Unsupported model provider: {provider}")
    if audit_dir is not None and wire.audit_file:
        model = AuditedModel(model, Path(audit_dir) / wire.audit_file)
    return model
