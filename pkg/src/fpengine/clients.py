"""Pluggable client interfaces and their HTTP implementations.

Every external dependency of the loop (the model under training, the
annotation oracle, the trainer, the text/image embedding provider, and
the description scorer) sits behind one of these interfaces. Endpoint
specs in the config select an implementation:

* ``mock:<seed>``  deterministic simulation clients (see ``simkit``),
* ``http(s)://...``  remote services speaking the JSON protocols below,
* ``none``  absent (only valid for the reviewer).

Wire protocol (all POST, JSON bodies):

* model    ``/v1/answer``    {image_ref, question_text, choices?}
           -> {text, token_logprobs}
* oracle   ``/v1/annotate``  {image_ref, question_text} -> {text}
* embedder ``/v1/embed``     {text} -> {embedding}
* scorer   ``/v1/score``     {answer_text, reference_text} -> {score}
* trainer  ``/v1/fine_tune`` {training_set_ref, base_model_tag}
           -> {model_tag}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Protocol, runtime_checkable

import numpy as np

if TYPE_CHECKING:
    from .config import EngineConfig


class ClientError(RuntimeError):
    """A remote or mock client failed to produce a response."""


@dataclass
class Question:
    """What a client sees of a QA item: no gold answer, no labels."""

    text: str
    task: str = "perception"
    question_type: str = "what"
    choices: list[str] = field(default_factory=list)


@dataclass
class Answer:
    text: str
    token_logprobs: list[float] = field(default_factory=list)


@runtime_checkable
class ModelClient(Protocol):
    identity: str

    def answer(self, image_ref: str, question: Question, run: int = 0) -> Answer: ...


@runtime_checkable
class OracleClient(Protocol):
    identity: str

    def annotate(self, image_ref: str, question: Question) -> str: ...


@runtime_checkable
class TextEmbedClient(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


@runtime_checkable
class DescriptionScorer(Protocol):
    def score(self, answer_text: str, reference_text: str) -> float: ...


@runtime_checkable
class TrainerClient(Protocol):
    def fine_tune(
        self,
        training_set_ref: str,
        base_model_tag: str,
        progress: Callable[[str], None] | None = None,
    ) -> str: ...


class ReviewerClient(Protocol):
    """Automatic stand-in for a human reviewer (mock only)."""

    def review(self, record: dict) -> tuple[str, str | None, str]:
        """Return (action, edited_text, reviewer tag)."""
        ...


# -- HTTP implementations ---------------------------------------------------


def _default_client_factory():
    import httpx

    return httpx.Client(timeout=60.0)


# swappable for tests (e.g. httpx.MockTransport)
_client_factory = _default_client_factory


def _post(base_url: str, path: str, payload: dict) -> dict:
    try:
        with _client_factory() as client:
            resp = client.post(base_url.rstrip("/") + path, json=payload)
            resp.raise_for_status()
            return resp.json()
    except Exception as exc:
        raise ClientError(f"POST {path} to {base_url} failed: {exc}") from exc


class HTTPModelClient:
    def __init__(self, base_url: str):
        self.base_url = base_url
        self.identity = base_url

    def answer(self, image_ref: str, question: Question, run: int = 0) -> Answer:
        payload: dict = {"image_ref": image_ref, "question_text": question.text}
        if question.choices:
            payload["choices"] = question.choices
        data = _post(self.base_url, "/v1/answer", payload)
        return Answer(text=data["text"], token_logprobs=list(data.get("token_logprobs", [])))


class HTTPOracleClient:
    def __init__(self, base_url: str):
        self.base_url = base_url
        self.identity = base_url

    def annotate(self, image_ref: str, question: Question) -> str:
        return _post(self.base_url, "/v1/annotate", {"image_ref": image_ref, "question_text": question.text})["text"]


class HTTPEmbedClient:
    def __init__(self, base_url: str, dim: int):
        self.base_url = base_url
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.asarray(_post(self.base_url, "/v1/embed", {"text": text})["embedding"], dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ClientError(f"embedder returned dimension {vec.shape}, expected {self.dim}")
        return vec


class HTTPScorerClient:
    def __init__(self, base_url: str):
        self.base_url = base_url

    def score(self, answer_text: str, reference_text: str) -> float:
        return float(_post(self.base_url, "/v1/score", {"answer_text": answer_text, "reference_text": reference_text})["score"])


class HTTPTrainerClient:
    def __init__(self, base_url: str):
        self.base_url = base_url

    def fine_tune(self, training_set_ref: str, base_model_tag: str, progress=None) -> str:
        if progress:
            progress(f"submitting {training_set_ref}")
        return _post(self.base_url, "/v1/fine_tune", {"training_set_ref": training_set_ref, "base_model_tag": base_model_tag})["model_tag"]


# -- endpoint resolution ------------------------------------------------------


@dataclass
class ClientSet:
    model: ModelClient
    oracle: OracleClient
    embedder: TextEmbedClient
    scorer: DescriptionScorer
    trainer: TrainerClient
    reviewer: ReviewerClient | None = None


def is_mock(spec: str) -> bool:
    return spec == "mock" or spec.startswith("mock:")


def resolve_clients(config: "EngineConfig", workspace_root: str) -> ClientSet:
    """Build the client set for a workspace from config endpoint specs.

    ``mock:<seed>`` endpoints require the workspace to hold a simulated
    world (``world.json``); the model spec may carry a trained-state
    suffix, e.g. ``mock:7:t2``.
    """
    from . import simkit  # deferred: simkit imports these interfaces

    def build(kind: str, spec: str):
        if spec == "none":
            return None
        if is_mock(spec):
            return simkit.resolve_mock(kind, spec, workspace_root, config)
        if spec.startswith("http://") or spec.startswith("https://"):
            if kind == "model":
                return HTTPModelClient(spec)
            if kind == "oracle":
                return HTTPOracleClient(spec)
            if kind == "embedder":
                return HTTPEmbedClient(spec, config.text_dim)
            if kind == "scorer":
                return HTTPScorerClient(spec)
            if kind == "trainer":
                return HTTPTrainerClient(spec)
            if kind == "reviewer":
                raise ClientError("reviewer has no HTTP protocol; use the review API or mock:<seed>")
        raise ClientError(f"cannot resolve {kind} endpoint {spec!r}")

    return ClientSet(
        model=build("model", config.model),
        oracle=build("oracle", config.oracle),
        embedder=build("embedder", config.embedder),
        scorer=build("scorer", config.scorer),
        trainer=build("trainer", config.trainer),
        reviewer=build("reviewer", config.reviewer),
    )
