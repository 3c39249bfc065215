"""
Exception hierarchy for the segmentation transfer pipeline
"""


class MsegError(Exception):
    """Base class for every error raised by the pipeline."""
    pass


class ShapeError(MsegError, ValueError):
    """Tensor or volume extents are inconsistent with an operation."""
    pass


class NonFiniteError(MsegError):
    """A NaN or Inf was produced while debug validation was enabled."""
    pass


class GradientError(MsegError):
    """Backward pass was requested on something that cannot be differentiated."""
    pass


class VolumeFormatError(MsegError):
    """A volume file is malformed, truncated or uses an unsupported encoding."""
    pass


class LabelError(MsegError, ValueError):
    """Label ids fall outside their class range or a label map is inconsistent."""
    pass


class PhantomError(MsegError):
    """A phantom scene could not be generated for the requested spec."""
    pass


class CheckpointError(MsegError):
    """A checkpoint file is malformed or does not match the expected architecture."""
    pass


class TransferError(MsegError):
    """Stage-1 parameters cannot be loaded into the dual-decoder network."""
    pass


class ConfigError(MsegError, ValueError):
    """An experiment configuration document is invalid."""
    pass


class TrainingDivergedError(MsegError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, stage: str, step: int, loss: float):
        super().__init__(f"{stage} diverged at step {step}: loss={loss}")
        self.stage = stage
        self.step = step
        self.loss = loss


class InferenceError(MsegError):
    """Inference was requested on an incompatible volume or head."""
    pass


class EvaluationError(MsegError, ValueError):
    """Dice evaluation inputs are empty or inconsistent."""
    pass


class DataError(MsegError, ValueError):
    """A volume cannot be normalized, cropped or augmented as requested."""
    pass
