from vipsim import learner, runner, utils
from vipsim._version import __version__
from vipsim.config import dump_config, load_config
from vipsim.exceptions import ConfigError, ValidationError, VipsimError
from vipsim.model import (
    DetectorGeometry,
    Frame,
    LineCatalog,
    PhysicsConstants,
    ResponseModel,
    RunConfig,
    RunPlan,
    SourceMix,
    Spectrum,
)

__all__ = [
    "learner",
    "runner",
    "utils",
    "__version__",
    "dump_config",
    "load_config",
    "ConfigError",
    "ValidationError",
    "VipsimError",
    "DetectorGeometry",
    "Frame",
    "LineCatalog",
    "PhysicsConstants",
    "ResponseModel",
    "RunConfig",
    "RunPlan",
    "SourceMix",
    "Spectrum",
]

del _version  # noqa: F821
