"""Sliding-window direct odometry with relocalization pose priors."""

from .frames import ACTIVE, DROPPED, MARGINALIZED, Frame, Keyframe, PhotoPoint, photometric_residual, select_points
from .photometric import HUBER, PATTERN, bilinear, huber_energy, huber_weights, warp_residuals
from .system import DirectOdometry, FrameRecord, OdometryConfig, WindowLog, write_energy_log
from .tracker import TrackerConfig, TrackResult, track_frame
from .window import (
    BAResult,
    EnergyTerms,
    MarginalizationEvent,
    RelativePrior,
    Window,
    collect_observations,
    marginalize_keyframe,
    select_reloc_priors,
    window_energy,
    windowed_ba,
)
