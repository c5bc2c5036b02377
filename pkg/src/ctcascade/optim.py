"""ADAM with a gradient-coupled L2 weight penalty, and the training loop."""
import csv
from dataclasses import asdict, dataclass, field
import logging

import numpy as np

from .errors import NonFiniteError, ParameterError, TrainingDivergence
from .layers import l2_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_penalty: float = 1e-4
    minibatch: int = 100
    total_iterations: int = 90_000
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.minibatch < 1:
            raise ParameterError("minibatch must be >= 1")
        if self.total_iterations < 0:
            raise ParameterError("total_iterations must be >= 0")
        if self.weight_penalty < 0:
            raise ParameterError("weight_penalty must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def for_parameters(cls, parameters):
        return cls(
            [np.zeros_like(p.value) for p in parameters],
            [np.zeros_like(p.value) for p in parameters],
            0,
        )


def adam_step(parameters, state, config):
    """Apply one bias-corrected ADAM update in place and zero the gradients.

    The weight penalty adds ``weight_penalty * value`` to the gradient of
    parameters flagged ``decay`` (convolution and linear weights only). A
    non-finite gradient aborts before anything is modified.
    """
    for p in parameters:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}; update skipped")
    if not state.first_moment:
        fresh = AdamState.for_parameters(parameters)
        state.first_moment, state.second_moment = fresh.first_moment, fresh.second_moment

    state.step_count += 1
    t = state.step_count
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(parameters, state.first_moment, state.second_moment):
        g = p.grad
        if p.decay and config.weight_penalty:
            g = g + config.weight_penalty * p.value
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.value.dtype)
        p.zero_grad()
    return parameters, state


@dataclass
class TrainResult:
    network: object
    trace: list
    state: AdamState


def training_loop(network, batches, config, state=None):
    """Run ``config.total_iterations`` ADAM steps on minibatches from ``batches``.

    ``batches`` is an iterable of (inputs, targets) pairs. The minibatch loss
    is recorded every ``config.log_every`` iterations and after the last one
    as ``(iteration, loss)``. A non-finite loss raises TrainingDivergence.
    """
    params = network.parameters()
    state = state or AdamState.for_parameters(params)
    trace = []
    network.zero_grad()
    it = iter(batches)
    for i in range(config.total_iterations):
        inputs, targets = next(it)
        pred = network.forward(inputs, training=True)
        loss, grad = l2_loss(pred, targets)
        if not np.isfinite(loss):
            raise TrainingDivergence(i, trace)
        if i % config.log_every == 0 or i == config.total_iterations - 1:
            trace.append((i, loss))
            log.debug("iteration %d loss %.6g", i, loss)
        network.backward(grad)
        try:
            adam_step(params, state, config)
        except NonFiniteError as exc:
            raise TrainingDivergence(i, trace) from exc
    return TrainResult(network, trace, state)


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "loss"])
        for i, loss in trace:
            writer.writerow([i, repr(float(loss))])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["loss"])) for r in rows]
