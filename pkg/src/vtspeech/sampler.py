"""Autoregressive speech-frame generation with modality-drop ablations.

Frames are emitted one at a time: each step embeds only the newly appended
slots, reruns the trunk over the cached prefix rows, and samples the F
channels independently from their class distributions. Generation stops when
enough channels emit the EOS class or the frame cap is reached.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .decoder import TransformerState, trunk_hidden
from .errors import LayoutError, ShapeError
from .meldsp import EOS_CLASS, DMelSeq
from .seqlayout import (
    LayoutKind,
    PositionScheme,
    SequencePlan,
    build_generation_prefix,
)
from .tokenizers import SpeakerVector, TextTokens, VideoTokenGrid

log = logging.getLogger(__name__)

LENGTH_HEADROOM = 1.6  # frame cap relative to the video duration in speech frames


@dataclass(frozen=True)
class GenOptions:
    temperature: float = 0.0  # 0 = argmax
    max_frames: int | None = None  # None: derive from video duration
    stop_rule: float = 0.5  # fraction of channels predicting EOS that stops
    drop_video: bool = False
    drop_text: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ShapeError("temperature must be >= 0")
        if self.max_frames is not None and self.max_frames < 1:
            raise ShapeError("max_frames must be >= 1")
        if not 0.0 < self.stop_rule <= 1.0:
            raise ShapeError("stop_rule must be in (0, 1]")


def default_max_frames(video: VideoTokenGrid, speech_hop: float = 0.025) -> int:
    """Length cap: LENGTH_HEADROOM x the video duration in speech frames."""
    return math.ceil(
        LENGTH_HEADROOM * video.n_frames * video.frame_period_seconds / speech_hop
    )


class _PrefixCache:
    """Embedded slot rows for a growing generation prefix."""

    def __init__(self, state: TransformerState):
        self.state = state
        self.rows: np.ndarray | None = None
        self.n_slots = 0

    def sync(self, plan: SequencePlan) -> None:
        from .decoder import embed_all_slots  # local to avoid cycle at import

        if self.rows is None or len(plan.slots) < self.n_slots:
            new = plan
            start = 0
        else:
            start = self.n_slots
            if start == len(plan.slots):
                return
            new = SequencePlan(
                slots=plan.slots[start:], layout=plan.layout, scheme=plan.scheme,
                text=plan.text, video=plan.video, speech=plan.speech,
                speaker=plan.speaker, n_speech_frames=plan.n_speech_frames,
                speech_hop_seconds=plan.speech_hop_seconds,
            )
        with tc.no_grad():
            fresh = embed_all_slots(new, self.state.enc).data
        self.rows = fresh if start == 0 else np.vstack([self.rows, fresh])
        self.n_slots = len(plan.slots)


def _next_frame_logits(cache: _PrefixCache, plan: SequencePlan) -> np.ndarray:
    state = cache.state
    cfg = state.cfg
    positions = np.array([s.position_index for s in plan.slots])
    with tc.no_grad():
        hidden = trunk_hidden(tc.Tensor(cache.rows.copy()), positions, state)
        last = tc.narrow(hidden, 0, hidden.shape[0] - 1, 1)
        flat = tc.add(tc.matmul(last, state.head_w), state.head_b)
    return flat.data.reshape(cfg.n_mels, cfg.speech_classes)


def _sample_channels(logits: np.ndarray, temperature: float,
                     rng: np.random.Generator) -> np.ndarray:
    if temperature == 0.0:
        return np.argmax(logits, axis=-1)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    u = rng.random(logits.shape[0])
    cum = np.cumsum(probs, axis=-1)
    return (u[:, None] > cum).sum(axis=-1)


def _effective_conditioning(
    state: TransformerState,
    video: VideoTokenGrid | None,
    text: TextTokens | None,
    layout: LayoutKind,
    opts: GenOptions,
) -> tuple[TextTokens | None, VideoTokenGrid | None]:
    """Apply modality drops: a dropped modality keeps its block but empties it
    (begin sentinel immediately followed by end sentinel)."""
    layout = LayoutKind(layout)
    eff_text = text
    eff_video = video
    if opts.drop_text and layout.uses_text:
        eff_text = TextTokens(ids=np.zeros(0, dtype=np.int64))
    if opts.drop_video and layout.uses_video:
        eff_video = VideoTokenGrid(
            tokens=np.zeros((0, *state.cfg.video_grid), dtype=np.int64),
            k_codes=state.cfg.k_video,
            frame_period_seconds=(
                video.frame_period_seconds if video is not None else 0.040
            ),
        )
    has_text = layout.uses_text and eff_text is not None and len(eff_text) > 0
    has_video = layout.uses_video and eff_video is not None and eff_video.n_frames > 0
    if not has_text and not has_video:
        raise LayoutError("conditioning cannot be empty: every content stream "
                          "is dropped or absent")
    return eff_text, eff_video


def generate(
    state: TransformerState,
    speaker: SpeakerVector,
    video: VideoTokenGrid | None,
    text: TextTokens | None,
    layout: LayoutKind,
    scheme: PositionScheme,
    opts: GenOptions = GenOptions(),
    audit: dict | None = None,
) -> DMelSeq:
    """Generate a discrete speech-frame sequence conditioned per layout.

    EOS classes in emitted non-terminal frames are replaced by the nearest
    valid level (15) and counted; the returned grid never contains EOS.
    """
    layout = LayoutKind(layout)
    text, video = _effective_conditioning(state, video, text, layout, opts)
    cfg = state.cfg
    if opts.max_frames is not None:
        max_frames = opts.max_frames
    elif layout.uses_video and video is not None and video.n_frames > 0:
        max_frames = default_max_frames(video)
    else:
        raise ShapeError("max_frames is required when no video sets the duration")

    rng = np.random.default_rng(np.random.SeedSequence([0x5A3, opts.seed]))
    frames: list[np.ndarray] = []
    stray_eos = 0
    prefix_lengths: list[int] = []
    cache = _PrefixCache(state)
    stop_threshold = opts.stop_rule * cfg.n_mels
    while len(frames) < max_frames:
        plan = build_generation_prefix(
            text, video,
            np.array(frames, dtype=np.int64).reshape(len(frames), cfg.n_mels),
            layout, scheme, speaker=speaker, n_mels=cfg.n_mels,
        )
        cache.sync(plan)
        prefix_lengths.append(len(plan.slots))
        logits = _next_frame_logits(cache, plan)
        picked = _sample_channels(logits, opts.temperature, rng)
        n_eos = int(np.sum(picked == EOS_CLASS))
        if n_eos >= stop_threshold:
            break  # terminal frame excluded from output
        if n_eos:
            stray_eos += n_eos
            picked = np.where(picked == EOS_CLASS, EOS_CLASS - 1, picked)
        frames.append(picked.astype(np.int64))
    if stray_eos:
        log.info("replaced %d stray EOS channels with level %d", stray_eos, EOS_CLASS - 1)
    if audit is not None:
        audit["prefix_lengths"] = prefix_lengths
        audit["stray_eos"] = stray_eos
    return DMelSeq(
        indices=np.array(frames, dtype=np.int64).reshape(len(frames), cfg.n_mels),
        frame_hop_seconds=0.025,
    )


def generate_streaming(
    state: TransformerState,
    speaker: SpeakerVector,
    video: VideoTokenGrid,
    text: TextTokens | None,
    scheme: PositionScheme,
    opts: GenOptions = GenOptions(),
    audit: dict | None = None,
) -> DMelSeq:
    """Same contract as ``generate`` under the streaming layout: video frames
    with timestamps at or before the current speech time sit in the prefix,
    so each step attends to a shorter sequence than the ordered layouts."""
    return generate(
        state, speaker, video, text, LayoutKind.TV_STREAMING, scheme, opts, audit
    )
