class ConfigError(ValueError):
    """Invalid model, layer or tensor configuration."""


class InputError(ValueError):
    """Malformed user data: annotations, images, metric inputs."""


class WeightFileError(ValueError):
    """A weight file could not be read or does not match the model."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during training."""
