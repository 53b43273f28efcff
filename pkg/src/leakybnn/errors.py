"""Exception types raised across the package."""


class LeakyBNNError(Exception):
    pass


# dataset
class IdxError(LeakyBNNError):
    pass


class WrongMagic(IdxError):
    pass


class Truncated(IdxError):
    pass


class LabelOutOfRange(IdxError):
    pass


class NotEnoughData(LeakyBNNError):
    pass


# nn / training
class ShapeMismatch(LeakyBNNError):
    pass


class NonFiniteLoss(LeakyBNNError):
    pass


class CheckpointError(LeakyBNNError):
    pass


# calibration
class EmptyBatch(LeakyBNNError):
    pass


# probe
class BadAddress(LeakyBNNError):
    pass


class NotReLU(LeakyBNNError):
    pass


class NegativeInput(LeakyBNNError):
    pass


class InfiniteWStar(LeakyBNNError):
    pass


class NotEnoughWeights(LeakyBNNError):
    pass


class ConfigError(LeakyBNNError):
    pass
