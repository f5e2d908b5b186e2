"""Deterministic simulation clients and synthetic worlds.

The kit makes the whole loop testable at desk scale: a synthetic world
of per-dimension Gaussian clusters on the unit sphere, a model whose
per-item correctness is Bernoulli(1 - e_k) driven by counter-based
hashing (so every response is a pure function of seed, item, and run
index), an always-right oracle, a keyword-overlap scorer, a reviewer
with fixed accept/edit/reject rates, and a trainer that shrinks the
model's per-dimension error rates as e_k' = e_k * exp(-n_k / s_k) for
n_k training samples on dimension k.

Token logprobs are emitted around ln(1 - e_k * kappa) so trajectory
entropy rises with the model's true error rate on the item's dimension.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .clients import Answer, ClientError, Question
from .datastore import MODALITIES, Datastore, QAItem, Sample
from .determinism import det_hash64, det_uniform, philox as _philox, unit as _unit

_REVIEW_ACCEPT = 0.63
_REVIEW_EDIT = 0.29
_LOGPROB_TOKENS = 6
_JITTER = 1e-3


# -- world --------------------------------------------------------------------


@dataclass
class SimWorld:
    seed: int
    k: int
    dim: int
    pool_size: int
    dev_size: int
    test_size: int
    e_hat: list[float]
    scales: list[float]
    kappa: float = 0.9
    target_cos: float = 0.95
    centers: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.centers is None:
            self.centers = _make_centers(self.seed, self.k, self.dim)

    # sample synthesis ------------------------------------------------------

    def _noise_sigma(self) -> float:
        return math.sqrt((1.0 / self.target_cos**2 - 1.0) / self.dim)

    def sample_id(self, split: str, i: int) -> str:
        return f"sim-{self.seed}-{split}-{i:06d}-d{self.dimension_of_index(i)}"

    def image_ref(self, split: str, i: int) -> str:
        return f"sim://{self.seed}/{split}/{i}/d{self.dimension_of_index(i)}"

    def dimension_of_index(self, i: int) -> int:
        return i % self.k  # balanced assignment

    def embedding(self, split: str, i: int) -> np.ndarray:
        d = self.dimension_of_index(i)
        rng = _philox(self.seed, "emb", split, i)
        noise = rng.normal(size=self.dim) * self._noise_sigma()
        return _unit(self.centers[d] + noise)

    def make_sample(self, split: str, i: int) -> Sample:
        d = self.dimension_of_index(i)
        labels = [0] * self.k
        labels[d] = 1
        return Sample(
            id=self.sample_id(split, i),
            image_ref=self.image_ref(split, i),
            modality=MODALITIES[i % len(MODALITIES)],
            split=split,
            capability_labels=labels,
            embedding=self.embedding(split, i),
        )

    def make_dev_qa(self, i: int) -> QAItem:
        d = self.dimension_of_index(i)
        return QAItem(
            sample_id=self.sample_id("dev", i),
            task="perception",
            question_type="what",
            question_text="Which degradation dimension dominates this image?",
            choices=[f"dim{j}" for j in range(self.k)],
            gold_answer=f"dim{d}",
        )

    def ingest_into(self, store: Datastore) -> None:
        samples = [self.make_sample("pool", i) for i in range(self.pool_size)]
        samples += [self.make_sample("dev", i) for i in range(self.dev_size)]
        samples += [self.make_sample("test", i) for i in range(self.test_size)]
        qa = [self.make_dev_qa(i) for i in range(self.dev_size)]
        report = store.ingest(samples, qa)
        if report.rejected:
            raise ClientError(f"sim world ingest rejected records: {report.rejected[:3]}")

    # persistence ------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "seed": self.seed,
                    "k": self.k,
                    "dim": self.dim,
                    "pool_size": self.pool_size,
                    "dev_size": self.dev_size,
                    "test_size": self.test_size,
                    "e_hat": self.e_hat,
                    "scales": self.scales,
                    "kappa": self.kappa,
                    "target_cos": self.target_cos,
                },
                sort_keys=True,
                indent=1,
            ),
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimWorld":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _make_centers(seed: int, k: int, dim: int) -> np.ndarray:
    """K orthonormal cluster centers (pairwise cosine 0 <= 0.3)."""
    if k > dim:
        raise ValueError(f"cannot separate {k} cluster centers in dimension {dim}")
    rng = _philox(seed, "centers")
    basis, _ = np.linalg.qr(rng.normal(size=(dim, k)))
    return np.ascontiguousarray(basis.T)


def generate_world(
    seed: int,
    k: int,
    dim: int,
    pool_size: int,
    dev_size: int,
    test_size: int = 0,
    e_hat: Sequence[float] | None = None,
    scales: Sequence[float] | None = None,
    kappa: float = 0.9,
) -> SimWorld:
    """Deterministic synthetic world; same seed, same world."""
    if not (pool_size >= dev_size >= k >= 2):
        raise ValueError("need pool_size >= dev_size >= K >= 2")
    if e_hat is None:
        e_hat = list(np.linspace(0.1, 0.5, k))
    if scales is None:
        scales = [12.0] * k
    if len(e_hat) != k or len(scales) != k:
        raise ValueError("e_hat and scales must have length K")
    if any(not 0.0 <= x < 1.0 for x in e_hat):
        raise ValueError("e_hat entries must be in [0, 1)")
    return SimWorld(
        seed=seed,
        k=k,
        dim=dim,
        pool_size=pool_size,
        dev_size=dev_size,
        test_size=test_size,
        e_hat=[float(x) for x in e_hat],
        scales=[float(s) for s in scales],
        kappa=kappa,
    )


# -- ref parsing ---------------------------------------------------------------


def _dim_from_ref(ref: str) -> int:
    tail = ref.rsplit("-d", 1) if "-d" in ref else ref.rsplit("/d", 1)
    try:
        return int(tail[1])
    except (IndexError, ValueError):
        raise ClientError(f"not a sim image/sample ref: {ref!r}")


def _index_from_ref(image_ref: str) -> int:
    # sim://<seed>/<split>/<i>/d<k>
    try:
        return int(image_ref.split("/")[-2])
    except (IndexError, ValueError):
        raise ClientError(f"not a sim image ref: {image_ref!r}")


_SEVERITIES = ("mild", "moderate", "severe")


def _severity(seed: int, image_ref: str, dim: int) -> str:
    # offset by the (believed) dimension: descriptions naming the wrong
    # dimension also disagree on severity, keeping their oracle
    # agreement clearly below threshold
    return _SEVERITIES[(det_hash64(seed, "sev", image_ref) + dim) % len(_SEVERITIES)]


def _oracle_description(seed: int, image_ref: str) -> str:
    d = _dim_from_ref(image_ref)
    modality = MODALITIES[_index_from_ref(image_ref) % len(MODALITIES)]
    return f"synthetic {modality} image dominant artifact dim{d} severity {_severity(seed, image_ref, d)}"


# -- clients --------------------------------------------------------------------


class SimModel:
    """Answer correctness Bernoulli(1 - e_k) on the item's dimension,
    counter-hashed per (item, run)."""

    def __init__(self, world: SimWorld, e: Sequence[float], tag: str):
        self.world = world
        self.e = [float(x) for x in e]
        self.identity = tag

    def _logprobs(self, image_ref: str, question_text: str, e_k: float) -> list[float]:
        base = math.log(max(1.0 - e_k * self.world.kappa, 1e-12))
        jitter = (det_uniform(self.world.seed, "jitter", image_ref, question_text) - 0.5) * 2 * _JITTER
        lp = min(0.0, base + jitter)
        return [lp] * _LOGPROB_TOKENS

    def answer(self, image_ref: str, question: Question, run: int = 0) -> Answer:
        true_dim = _dim_from_ref(image_ref)
        e_k = self.e[true_dim]
        u = det_uniform(self.world.seed, "ans", image_ref, question.text, run)
        correct = u >= e_k
        if correct:
            believed = true_dim
        else:
            offset = 1 + det_hash64(self.world.seed, "wrong", image_ref, question.text, run) % (self.world.k - 1)
            believed = (true_dim + offset) % self.world.k
        if question.task == "perception":
            want = f"dim{believed}"
            text = want if want in question.choices or not question.choices else question.choices[believed % len(question.choices)]
        else:
            sev = _severity(self.world.seed, image_ref, believed)
            text = f"image shows dim{believed} artifact severity {sev} assessment complete"
        return Answer(text=text, token_logprobs=self._logprobs(image_ref, question.text, e_k))


class SimOracle:
    """Reference annotator: always names the true dimension."""

    def __init__(self, world: SimWorld, tag: str):
        self.world = world
        self.identity = tag

    def annotate(self, image_ref: str, question: Question) -> str:
        true_dim = _dim_from_ref(image_ref)
        if question.task == "perception":
            want = f"dim{true_dim}"
            if question.choices and want not in question.choices:
                return question.choices[true_dim % len(question.choices)]
            return want
        return _oracle_description(self.world.seed, image_ref)


class SimEmbedder:
    """Deterministic unit text embeddings (hash-keyed Gaussian)."""

    def __init__(self, seed: int, dim: int):
        self.seed = seed
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        rng = _philox(self.seed, "text", text)
        return _unit(rng.normal(size=self.dim))


class SimScorer:
    """Keyword-overlap description scorer (plumbing tests only)."""

    def score(self, answer_text: str, reference_text: str) -> float:
        from .router import TokenF1Scorer

        return TokenF1Scorer().score(answer_text, reference_text)


class SimReviewer:
    """Deterministic reviewer with fixed accept/edit/reject rates."""

    def __init__(self, seed: int):
        self.seed = seed
        self.tag = f"sim-reviewer-{seed}"

    def review(self, record: dict) -> tuple[str, str | None, str]:
        u = det_uniform(self.seed, "review", record["record_id"])
        if u < _REVIEW_ACCEPT:
            return "accept", None, self.tag
        if u < _REVIEW_ACCEPT + _REVIEW_EDIT:
            base = (record.get("y_oracle") or {}).get("text") or "corrected annotation"
            return "edit", base + " [expert reviewed]", self.tag
        return "reject", None, self.tag


class ModelRegistry:
    """Tag -> error-rate vector registry for trained sim models."""

    def __init__(self, root: str | Path):
        self.path = Path(root) / "models.json"

    def _read(self) -> dict:
        if self.path.exists():
            return json.loads(self.path.read_text(encoding="utf-8"))
        return {}

    def lookup(self, tag: str) -> list[float] | None:
        entry = self._read().get(tag)
        return None if entry is None else list(entry["e"])

    def register(self, tag: str, e: Sequence[float], parent: str) -> None:
        data = self._read()
        data[tag] = {"e": [float(x) for x in e], "parent": parent}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(self.path)


class SimTrainer:
    """Concave mock trainer: e_k' = e_k * exp(-n_k / s_k)."""

    def __init__(self, world: SimWorld, root: str | Path):
        self.world = world
        self.registry = ModelRegistry(root)

    def fine_tune(
        self,
        training_set_ref: str,
        base_model_tag: str,
        progress: Callable[[str], None] | None = None,
    ) -> str:
        e_base = _model_error_rates(self.world, self.registry, base_model_tag)
        counts = [0] * self.world.k
        with open(training_set_ref, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    counts[_dim_from_ref(rec["image_ref"])] += 1
        if progress:
            progress(f"fine-tuning on {sum(counts)} records: per-dimension {counts}")
        e_new = [e * math.exp(-n / s) for e, n, s in zip(e_base, counts, self.world.scales)]
        root_tag, step = _split_tag(base_model_tag)
        new_tag = f"{root_tag}:t{step + 1}"
        self.registry.register(new_tag, e_new, parent=base_model_tag)
        if progress:
            progress(f"registered {new_tag}")
        return new_tag


def _split_tag(tag: str) -> tuple[str, int]:
    parts = tag.split(":")
    if len(parts) >= 2 and parts[-1][:1] == "t" and parts[-1][1:].isdigit():
        return ":".join(parts[:-1]), int(parts[-1][1:])
    return tag, 0


def _model_error_rates(world: SimWorld, registry: ModelRegistry, tag: str) -> list[float]:
    _, step = _split_tag(tag)
    if step == 0:
        return list(world.e_hat)
    e = registry.lookup(tag)
    if e is None:
        raise ClientError(f"unknown trained model tag {tag!r}")
    return e


# -- endpoint resolution -----------------------------------------------------------


def _mock_seed(spec: str, default_seed: int) -> int:
    parts = spec.split(":")
    if parts[0] != "mock":
        raise ClientError(f"not a mock endpoint: {spec!r}")
    if len(parts) >= 2 and parts[1].isdigit():
        return int(parts[1])
    return default_seed  # bare "mock" (or trained-state tag) follows config.seed


def _load_world(workspace_root: str | Path, seed: int) -> SimWorld:
    path = Path(workspace_root) / "world.json"
    if not path.exists():
        raise ClientError(f"no simulated world at {path}; run `fpe ingest --sim --seed {seed}` first")
    world = SimWorld.load(path)
    if world.seed != seed:
        raise ClientError(f"workspace world has seed {world.seed}, endpoint asked for {seed}")
    return world


def resolve_mock(kind: str, spec: str, workspace_root: str | Path, config) -> object:
    seed = _mock_seed(spec, config.seed)
    if kind == "embedder":
        return SimEmbedder(seed, config.text_dim)
    if kind == "scorer":
        return SimScorer()
    if kind == "reviewer":
        return SimReviewer(seed)
    world = _load_world(workspace_root, seed)
    if kind == "model":
        registry = ModelRegistry(workspace_root)
        return SimModel(world, _model_error_rates(world, registry, spec), tag=spec)
    if kind == "oracle":
        return SimOracle(world, tag=spec)
    if kind == "trainer":
        return SimTrainer(world, workspace_root)
    raise ClientError(f"unknown mock client kind {kind!r}")


# -- sample-efficiency experiment ------------------------------------------------


@dataclass
class CurvePoint:
    strategy: str
    seed: int
    budget: int
    accuracy: float

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "budget": self.budget, "accuracy": self.accuracy}


def expected_accuracy(world: SimWorld, e: Sequence[float]) -> float:
    """Expected dev accuracy of a model with per-dimension error rates e
    (dev items weighted by their dimension shares)."""
    counts = [0] * world.k
    for i in range(world.dev_size):
        counts[world.dimension_of_index(i)] += 1
    total = sum(counts)
    return 1.0 - sum(c * err for c, err in zip(counts, e)) / total


def save_curve(points: Sequence[CurvePoint], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def load_curve(path: str | Path) -> list[CurvePoint]:
    points = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                points.append(CurvePoint(**json.loads(line)))
    return points


def run_efficiency_experiment(
    world: SimWorld,
    total_budget: int,
    iterations: int,
    strategy: str,
    workdir: str | Path,
    config_overrides: dict | None = None,
) -> list[CurvePoint]:
    """Run the closed loop on a fresh workspace under one sampling
    strategy and return the accuracy-vs-budget learning curve.

    Accuracy here is the exact expected dev accuracy of the trained
    model state (the registry's error rates), so curves are
    deterministic given the seed.
    """
    from .config import EngineConfig
    from .orchestrator import STATUS_RUNNING, Workspace, init_workspace, run_iteration

    if strategy not in ("failure_driven", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    root = Path(workdir) / f"{strategy}-b{total_budget}"
    per_iteration = max(1, total_budget // max(1, iterations))
    overrides = {
        "seed": world.seed,
        "model": f"mock:{world.seed}",
        "oracle": f"mock:{world.seed}",
        "trainer": f"mock:{world.seed}",
        "embedder": f"mock:{world.seed}",
        "scorer": f"mock:{world.seed}",
        "reviewer": f"mock:{world.seed}",
        "budget": per_iteration,
        "global_budget": total_budget,
        "sampling_strategy": strategy,
    }
    overrides.update(config_overrides or {})
    config = EngineConfig().with_overrides(**overrides)
    if (root / "state.json").exists():
        ws = Workspace(root, config)
    else:
        ws = init_workspace(root, config, dim=world.dim, k=world.k)
        world.save(root / "world.json")
        world.ingest_into(ws.store())

    registry = ModelRegistry(root)
    points = [CurvePoint(strategy, world.seed, 0, expected_accuracy(world, world.e_hat))]
    state = ws.load_state()
    for _ in range(iterations):
        if state.status != STATUS_RUNNING:
            break
        state = run_iteration(ws, state)
        e_now = _model_error_rates(world, registry, state.model_tag)
        points.append(CurvePoint(strategy, world.seed, state.budget_spent, expected_accuracy(world, e_now)))
    return points
