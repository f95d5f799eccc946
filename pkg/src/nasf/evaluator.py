"""Evaluators: compile a descriptor, train it with SGD, report test accuracy.

The local and distributed evaluators share one training loop. Batches come
from :func:`nasf.curator.lockstep_batches`, so a W-rank evaluation sees, at
every step, exactly the examples a single process would, split across ranks.
Each rank's mean gradient is weighted by its share of the global batch before
the allreduce, which makes the averaged gradient the full-batch gradient even
when the last batch does not divide evenly.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from nasf import curator, engine
from nasf.comms import CommError, Environment, ProtocolError, fnv1a_64
from nasf.descriptor import Descriptor, DescriptorError, Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvaluationConfig:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.05
    train_subset: int | None = None
    test_subset: int | None = None
    seed: int = 0

    def __post_init__(self):
        # epochs == 0 is allowed: it scores the untrained network
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("train_subset", "test_subset"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1 or None for all")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluationConfig":
        return cls(**doc)


@dataclass(frozen=True)
class EvaluationResult:
    test_accuracy: float
    trainable_parameters: int
    train_seconds: float
    epochs_run: int
    status: str = "ok"
    reason: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def fitness(self) -> float:
        """Accuracy, or exactly 0 for any failed evaluation."""
        return self.test_accuracy if self.ok else 0.0

    @classmethod
    def failed(cls, reason: str, parameters: int = 0, seconds: float = 0.0,
               epochs: int = 0) -> "EvaluationResult":
        return cls(0.0, parameters, seconds, epochs, "failed", reason)

    def to_dict(self) -> dict:
        doc = {"test_accuracy": self.test_accuracy,
               "trainable_parameters": self.trainable_parameters,
               "train_seconds": self.train_seconds,
               "epochs_run": self.epochs_run,
               "status": self.status}
        if self.reason:
            doc["reason"] = self.reason
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluationResult":
        return cls(float(doc["test_accuracy"]), int(doc["trainable_parameters"]),
                   float(doc["train_seconds"]), int(doc["epochs_run"]),
                   doc.get("status", "ok"), doc.get("reason", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# gradient exchange format
# --------------------------------------------------------------------------

def flatten_gradients(network: Network) -> np.ndarray:
    """Weights then biases per layer, layers in topological order, row-major."""
    parts = []
    for s in network.states:
        parts.append(s.weight_gradients.ravel())
        parts.append(s.bias_gradients.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_gradients(network: Network, flat) -> None:
    flat = np.asarray(flat, dtype=np.float64).ravel()
    expected = network.parameter_count()
    if flat.size != expected:
        raise ProtocolError(f"gradient vector has {flat.size} entries, network has {expected}")
    offset = 0
    for s in network.states:
        for grad in (s.weight_gradients, s.bias_gradients):
            grad[...] = flat[offset:offset + grad.size].reshape(grad.shape)
            offset += grad.size


def flatten_parameters(network: Network) -> np.ndarray:
    parts = []
    for s in network.states:
        parts.append(s.weights.ravel())
        parts.append(s.biases.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def descriptor_hash(desc: Descriptor) -> int:
    return fnv1a_64(desc.to_json().encode("utf-8"))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class Diverged(ArithmeticError):
    pass


def train_step(network: Network, images: np.ndarray, labels: np.ndarray, global_count: int,
               learning_rate: float, env: Environment | None = None) -> float:
    """One synchronous SGD step on this rank's slice of a global batch.

    Returns the global mean loss. ``global_count`` is the size of the global
    batch; with ``env`` the weighted gradients are averaged across ranks.
    """
    world = 1 if env is None else env.world_size
    if len(labels):
        logits = network.forward(images)
        loss, grad = engine.softmax_cross_entropy(logits, labels)
        network.backward(grad)
        share = len(labels) / global_count
    else:
        loss, share = 0.0, 0.0
        for s in network.states:
            s.zero_grad()
    if env is None or world == 1:
        if share != 1.0:
            for s in network.states:
                s.weight_gradients *= share
                s.bias_gradients *= share
        mean_loss = loss * share
    else:
        # mean over ranks of (W * share * g) is the full-batch gradient
        weight = world * share
        vec = np.append(flatten_gradients(network) * weight, loss * weight)
        reduced = env.allreduce_mean(vec)
        unflatten_gradients(network, reduced[:-1])
        mean_loss = float(reduced[-1])
    if not math.isfinite(mean_loss):
        raise Diverged(f"loss became {mean_loss}")
    engine.sgd_step(network.states, learning_rate)
    return mean_loss


def _count_correct(network: Network, data: curator.Dataset, indices: np.ndarray,
                   batch_size: int) -> int:
    correct = 0
    for lo in range(0, len(indices), batch_size):
        images, labels = data.take(indices[lo:lo + batch_size])
        correct += int(np.sum(np.argmax(network.forward(images), axis=1) == labels))
    return correct


def _evaluate(desc: Descriptor, train: curator.Dataset, test: curator.Dataset,
              cfg: EvaluationConfig, env: Environment | None) -> EvaluationResult:
    rank = 0 if env is None else env.rank
    world = 1 if env is None else env.world_size
    train = train.subset(cfg.train_subset)
    test = test.subset(cfg.test_subset)
    try:
        network = desc.compile(train.shape, seed=cfg.seed)
    except (DescriptorError, engine.ShapeError) as exc:
        parameters = 0
        return EvaluationResult.failed(f"compile: {exc}", parameters)
    parameters = network.parameter_count()
    started = time.perf_counter()
    epochs = 0
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(cfg.epochs):
                epoch_seed = cfg.seed * 1_000_003 + epoch
                for images, labels, count in curator.lockstep_batches(
                        train, cfg.batch_size, epoch_seed, rank, world):
                    train_step(network, images, labels, count, cfg.learning_rate, env)
                epochs += 1
    except Diverged:
        return EvaluationResult.failed("diverged", parameters,
                                       time.perf_counter() - started, epochs)
    seconds = time.perf_counter() - started
    if env is None or world == 1:
        correct, total = _count_correct(network, test, np.arange(len(test)), cfg.batch_size), len(test)
    else:
        part = curator.shard(test, rank, world)
        local = [_count_correct(network, test, part.indices, cfg.batch_size), len(part)]
        summed = env.allreduce_mean(local) * world
        correct, total = int(round(summed[0])), int(round(summed[1]))
        # every rank reports rank 0's clock so results are identical
        seconds = float(env.broadcast([seconds])[0])
    return EvaluationResult(correct / total, parameters, seconds, epochs)


def descriptor_evaluate(desc: Descriptor, data: tuple[curator.Dataset, curator.Dataset],
                        cfg: EvaluationConfig) -> EvaluationResult:
    """Train and test ``desc`` in this process.

    Compile failures and divergence yield a failed result with accuracy 0
    rather than an exception.
    """
    report = desc.validate()
    if not report:
        return EvaluationResult.failed("compile: " + "; ".join(report.errors))
    train, test = data
    return _evaluate(desc, train, test, cfg, None)


def distributed_descriptor_evaluate(desc: Descriptor, data: tuple[curator.Dataset, curator.Dataset],
                                    cfg: EvaluationConfig, env: Environment) -> EvaluationResult:
    """Collective evaluation with per-step gradient averaging across ``env``.

    Every rank must call this with the same descriptor and config; a hash of
    both is compared before training and a mismatch raises ProtocolError on
    all ranks. Communication failures during training come back as a failed
    result tagged "comm:".
    """
    if env.world_size == 1:
        return descriptor_evaluate(desc, data, cfg)
    fingerprint = fnv1a_64((desc.to_json() + json.dumps(cfg.to_dict(), sort_keys=True)).encode())
    agree_on(env, fingerprint, "descriptor/config hash")
    report = desc.validate()
    if not report:
        return EvaluationResult.failed("compile: " + "; ".join(report.errors))
    train, test = data
    try:
        return _evaluate(desc, train, test, cfg, env)
    except ProtocolError:
        raise
    except CommError as exc:
        return EvaluationResult.failed(f"comm: {exc}")


def agree_on(env: Environment, value: int, what: str) -> None:
    """Raise ProtocolError on every rank unless all ranks hold the same 64-bit value."""
    hashes = env.gather_bytes(struct.pack(">Q", value & 0xFFFFFFFFFFFFFFFF))
    verdict = b"\x00"
    if env.rank == 0:
        values = [struct.unpack(">Q", h)[0] for h in hashes]
        if len(set(values)) != 1:
            odd = [r for r, v in enumerate(values) if v != values[0]]
            verdict = b"\x01" + f"{what} differs on ranks {odd}".encode()
    verdict = env.broadcast_bytes(verdict)
    if verdict[:1] == b"\x01":
        raise ProtocolError(verdict[1:].decode())
