"""Relative-pose redundancy removal for pairs of RGB-D sensors.

Two sensors estimate their relative pose with a distributed point-to-plane
ICP, drop the 8x8 blocks of one view that the other view already predicts,
and send the rest to a station that rebuilds both views.
"""

from .errors import (BehindCameraError, ContainerError, DecodeError, DegenerateGeometryError,
                     GenerationError, IngestionError, InsufficientDataError, InvalidDepthError,
                     MalformedPayloadError, NoNormalError, ProtocolError, RPRRError, SessionAbort,
                     ValidationError)
from .geometry import Intrinsics, RigidTransform, se3_exp, se3_invert, warp_pixels
from .icp import IcpConfig, IcpResult, icp_run_distributed, icp_run_local
from .metrics import EnergyModel, bpp_of, energy_estimate, psnr
from .postproc import FilterConfig, fill_cracks, postprocess, remove_ghosts
from .redundancy import BlockSet, prediction_set, validation_set, warp_image
from .scenes import ScenePair, SyntheticSceneSpec, gen_synthetic_scene, standard_scenes
from .session import (SessionConfig, TransmissionRecord, reconstruct, run_independent,
                      run_sequence, run_session)

__version__ = "0.1.0"
