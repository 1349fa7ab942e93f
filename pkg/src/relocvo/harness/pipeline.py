"""End-to-end run: relocalization, tracking, BA, marginalization, fusion."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigurationError, TrackingLostError
from ..fusion import FusionConfig, OnlineFusion
from ..odometry import DirectOdometry, Frame, OdometryConfig
from ..reloc import RelocConfig, Relocalizer
from .world import perturb_reloc

NO_PRIOR = "no-prior"
FRONT_END = "front-end"
FRONT_AND_BACK_END = "front-and-back-end"
MODES = (NO_PRIOR, FRONT_END, FRONT_AND_BACK_END)


@dataclass
class PipelineConfig:
    mode: str = FRONT_AND_BACK_END
    fusion: bool = True
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    reloc: RelocConfig = field(default_factory=RelocConfig)
    fusion_config: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")

    def odometry_config(self):
        """Odometry settings with the prior switches implied by the mode."""
        return replace(self.odometry, front_end_prior=self.mode != NO_PRIOR, back_end_prior=self.mode == FRONT_AND_BACK_END)


@dataclass
class PipelineResult:
    mode: str
    odometry: dict  # keyframe id -> world-to-camera pose (odometry frame)
    reloc: dict  # keyframe id -> RelocResult (map frame), successful ones only
    fused: dict  # keyframe id -> Sim3, None when fusion was off or never bootstrapped
    fused_flag: str  # "ok", "off" or "no-bootstrap"
    timestamps: dict
    marginalized: list  # keyframe ids in the order they left the window
    energy_log: list
    fusion_log: list
    lost_at: int = None
    message: str = ""
    timings: dict = field(default_factory=dict)

    @property
    def complete(self):
        return self.lost_at is None


def relocalize_sequence(seq, db, config=None):
    """Relocalization per frame (``None`` where unavailable or failed).

    Frames marked unavailable are never queried; successful poses are
    corrupted by the sequence's pre-drawn relocalization noise.
    """
    loc = Relocalizer(db, config or RelocConfig())
    out = []
    for k in range(seq.n_frames):
        if not seq.available[k]:
            out.append(None)
            continue
        res = loc(k, seq.features[k])
        if res is not None:
            res = replace(res, pose=perturb_reloc(res.pose, seq.reloc_noise[k]))
        out.append(res)
    return out


def run_pipeline(seq, db, mode=FRONT_AND_BACK_END, fusion=True, config=None, relocs=None):
    """Run the full system over ``seq``.

    ``relocs`` (from :func:`relocalize_sequence`) can be shared between runs
    of different modes. A lost track ends the run early; the result then
    holds the partial trajectories and ``lost_at``.
    """
    cfg = replace(config or PipelineConfig(), mode=mode, fusion=fusion)
    if db.camera != seq.camera:
        raise ConfigurationError("sequence and map use different camera intrinsics")
    if relocs is None:
        relocs = relocalize_sequence(seq, db, cfg.reloc)
    vo = DirectOdometry(seq.camera, cfg.odometry_config(), seq.render_poses[0], seq.first_depth)
    fuser = OnlineFusion({k: kf.pose for k, kf in db.keyframes.items()}, cfg.fusion_config) if fusion else None
    marginalized, kf_reloc = [], {}
    fusion_times = []

    def consume(events):
        for ev in events:
            marginalized.append(ev.keyframe.id)
            if ev.reloc is not None:
                kf_reloc[ev.keyframe.id] = ev.reloc
            if fuser is not None:
                t0 = time.perf_counter()
                fuser.process(ev.keyframe.id, ev.pose, ev.reloc)
                fusion_times.append(time.perf_counter() - t0)

    lost_at, message = None, ""
    try:
        for k in range(seq.n_frames):
            frame = Frame(k, float(seq.timestamps[k]), seq.pyramids[k], seq.features[k])
            consume(vo.process(frame, relocs[k]))
    except TrackingLostError as err:
        lost_at, message = err.frame_id, str(err)
    consume(vo.finish())

    fused, flag = None, "off"
    if fuser is not None:
        fused, flag = (dict(fuser.fused), "ok") if fuser.fused else (None, "no-bootstrap")
    return PipelineResult(mode, vo.keyframe_trajectory(), kf_reloc, fused, flag, dict(vo.timestamps), marginalized,
                          list(vo.energy_log), list(fuser.log) if fuser else [], lost_at, message,
                          {"keyframe": list(vo.keyframe_seconds), "fusion": fusion_times})
