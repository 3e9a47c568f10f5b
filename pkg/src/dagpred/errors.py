"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DagpredError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DagpredError, ValueError):
    pass


class NonFinite(DagpredError, ArithmeticError):
    pass


# graph structure

class DagError(DagpredError, ValueError):
    pass


class CycleDetected(DagError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f"cycle detected through nodes {self.cycle}")


class SelfLoop(DagError):
    def __init__(self, node):
        self.node = int(node)
        super().__init__(f"self-loop at node {self.node}")


class DescriptorError(DagError):
    pass


class UnknownVariant(DagpredError, ValueError):
    pass


# encoding

class IndexOutOfRange(DagpredError, IndexError):
    pass


class EncodingError(DagpredError, ValueError):
    pass


# autodiff

class EmptyRowMask(DagpredError, ValueError):
    pass


class NotScalar(DagpredError, ValueError):
    pass


class DetachedGraph(DagpredError, RuntimeError):
    pass


class NonDeterministicFunction(DagpredError, RuntimeError):
    pass


# training / metrics / io

class OutOfRange(DagpredError, ValueError):
    pass


class EmptyDataset(DagpredError, ValueError):
    pass


class DivergedLoss(DagpredError, RuntimeError):
    def __init__(self, epoch, last_finite_epoch):
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch
        super().__init__(
            f"loss became non-finite at epoch {epoch} "
            f"(last finite epoch: {last_finite_epoch})"
        )


class LengthMismatch(DagpredError, ValueError):
    pass


class AllTied(DagpredError, ValueError):
    pass


class NonPositiveGroundTruth(DagpredError, ValueError):
    pass


class ParseError(DagpredError, ValueError):
    def __init__(self, line, msg):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class ValidationError(DagpredError, ValueError):
    def __init__(self, index, msg):
        self.index = index
        super().__init__(f"record {index}: {msg}")


class EmptyInput(DagpredError, ValueError):
    pass


class CheckpointMismatch(DagpredError, ValueError):
    pass


class ConfigError(DagpredError, ValueError):
    pass
