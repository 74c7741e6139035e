"""Multimodal sequence assembly: slot orders, positions, targets, masking.

A plan lists every decoder slot in order: one speaker slot, each modality
wrapped in its own begin/end sentinels, and payload slots carrying frame or
token indices. Speech slots carry next-frame prediction targets; the final
speech slot targets a frame whose channels all hold the reserved EOS class.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, LayoutError, ShapeError, VtspeechError
from .meldsp import EOS_CLASS, DMelSeq
from .tokenizers import TextTokens, VideoTokenGrid, SpeakerVector

SPEECH_HOP_SECONDS = 0.025


class LayoutKind(str, Enum):
    TTS = "tts"
    TV_ORDERED = "tv_ordered"
    VT_ORDERED = "vt_ordered"
    TV_STREAMING = "tv_streaming"
    V_ONLY = "v_only"

    @property
    def uses_text(self) -> bool:
        return self is not LayoutKind.V_ONLY

    @property
    def uses_video(self) -> bool:
        return self is not LayoutKind.TTS


class PositionKind(str, Enum):
    GLOBAL = "global"
    TIME_ALIGNED = "time_aligned"


@dataclass(frozen=True)
class PositionScheme:
    kind: PositionKind = PositionKind.GLOBAL
    base_unit_seconds: float = 0.005

    def steps_for(self, period_seconds: float) -> int:
        steps = round(period_seconds / self.base_unit_seconds)
        if abs(steps * self.base_unit_seconds - period_seconds) > 1e-9 or steps < 1:
            raise ConfigError(
                f"base unit {self.base_unit_seconds}s does not divide a "
                f"{period_seconds}s frame period"
            )
        return steps


@dataclass
class Slot:
    kind: str  # speaker | bos | eos | video | text | speech
    stream: str  # speaker | video | text | speech
    payload: int | None = None  # frame index (video/speech) or token id (text)
    position_index: int = 0
    timestamp_seconds: float | None = None
    is_loss_target: bool = False
    target_frame: np.ndarray | None = None  # F ints; EOS class allowed
    masked: bool = False


@dataclass
class SequencePlan:
    slots: list[Slot]
    layout: LayoutKind
    scheme: PositionScheme
    text: TextTokens | None
    video: VideoTokenGrid | None
    speech: DMelSeq | None
    speaker: SpeakerVector | None
    n_speech_frames: int
    speech_hop_seconds: float = SPEECH_HOP_SECONDS

    def __len__(self) -> int:
        return len(self.slots)

    def stream_slots(self, stream: str) -> list[int]:
        """Indices of payload slots belonging to one modality stream."""
        return [
            i for i, s in enumerate(self.slots) if s.stream == stream and s.kind == stream
        ]

    def target_count(self) -> int:
        return sum(1 for s in self.slots if s.is_loss_target)


def eos_frame(n_mels: int) -> np.ndarray:
    return np.full(n_mels, EOS_CLASS, dtype=np.int64)


def _block(stream: str, payloads, timestamps=None) -> list[Slot]:
    slots = [Slot(kind="bos", stream=stream)]
    for i, payload in enumerate(payloads):
        slots.append(
            Slot(
                kind=stream,
                stream=stream,
                payload=int(payload),
                timestamp_seconds=None if timestamps is None else timestamps[i],
            )
        )
    slots.append(Slot(kind="eos", stream=stream))
    return slots


def _merge_streaming(
    n_video: int, video_period: float, n_speech: int, speech_hop: float
) -> list[tuple[str, int]]:
    """Ascending by timestamp; video first on equal timestamps."""
    events = [("video", t, t * video_period) for t in range(n_video)]
    events += [("speech", t, t * speech_hop) for t in range(n_speech)]
    events.sort(key=lambda e: (e[2], 0 if e[0] == "video" else 1))
    for prev, cur in zip(events, events[1:]):
        if cur[2] < prev[2]:
            raise VtspeechError("streaming merge produced non-monotone timestamps")
    return [(stream, idx) for stream, idx, _ in events]


def _assign_positions(slots: list[Slot], scheme: PositionScheme,
                      video_period: float, speech_hop: float) -> None:
    if scheme.kind is PositionKind.GLOBAL:
        for i, slot in enumerate(slots):
            slot.position_index = i
        return
    video_step = scheme.steps_for(video_period)
    speech_step = scheme.steps_for(speech_hop)
    timed = {"video": video_step, "speech": speech_step}
    base = 0
    for slot in slots:
        if slot.kind in timed:
            continue
        slot.position_index = base
        base += 1
    for slot in slots:
        if slot.kind in timed:
            slot.position_index = base + timed[slot.kind] * slot.payload


def _attach_targets(slots: list[Slot], speech: DMelSeq | None,
                    n_speech: int, n_mels: int) -> None:
    """bos_s targets frame 0, frame t targets t+1, the last slot targets EOS."""
    stream = [s for s in slots if s.stream == "speech" and s.kind in ("bos", "speech")]
    for slot in stream:
        if slot.kind == "eos":
            continue
        next_frame = 0 if slot.kind == "bos" else slot.payload + 1
        slot.is_loss_target = True
        if next_frame >= n_speech:
            slot.target_frame = eos_frame(n_mels)
        elif speech is not None:
            slot.target_frame = speech.indices[next_frame].copy()


def build_plan(
    text: TextTokens | None,
    video: VideoTokenGrid | None,
    speech: DMelSeq | None,
    layout: LayoutKind,
    scheme: PositionScheme,
    *,
    n_speech_frames: int | None = None,
    speaker: SpeakerVector | None = None,
    n_mels: int = 80,
    open_ended: bool = False,
) -> SequencePlan:
    """Assemble the full slot sequence for one sample.

    ``speech`` may be None for generation-time plans, in which case
    ``n_speech_frames`` gives the number of already-emitted frames. With
    ``open_ended`` the trailing end sentinels are dropped and the sequence is
    truncated right after the last speech slot, so successive generation
    prefixes extend each other.
    """
    layout = LayoutKind(layout)
    if layout.uses_text and text is None:
        raise LayoutError(f"layout {layout.value} requires text")
    if layout.uses_video and video is None:
        raise LayoutError(f"layout {layout.value} requires video")
    if not layout.uses_text and text is not None:
        raise LayoutError(f"layout {layout.value} does not take text")
    if not layout.uses_video and video is not None:
        raise LayoutError(f"layout {layout.value} does not take video")
    if speech is not None:
        n_speech = speech.n_frames
        n_mels = speech.n_mels
        speech_hop = speech.frame_hop_seconds
    else:
        if n_speech_frames is None:
            raise ShapeError("need speech or n_speech_frames")
        n_speech = n_speech_frames
        speech_hop = SPEECH_HOP_SECONDS
    video_period = video.frame_period_seconds if video is not None else 0.040

    slots = [Slot(kind="speaker", stream="speaker")]
    text_block = (
        _block("text", text.ids.tolist()) if layout.uses_text else []
    )
    video_ts = (
        [t * video_period for t in range(video.n_frames)] if video is not None else []
    )
    video_block = (
        _block("video", range(video.n_frames), video_ts) if layout.uses_video else []
    )
    speech_ts = [t * speech_hop for t in range(n_speech)]
    speech_block = _block("speech", range(n_speech), speech_ts)

    if layout is LayoutKind.TV_STREAMING:
        slots += text_block
        slots.append(Slot(kind="bos", stream="video"))
        slots.append(Slot(kind="bos", stream="speech"))
        for stream, idx in _merge_streaming(
            video.n_frames, video_period, n_speech, speech_hop
        ):
            period = video_period if stream == "video" else speech_hop
            slots.append(
                Slot(kind=stream, stream=stream, payload=idx,
                     timestamp_seconds=idx * period)
            )
        slots.append(Slot(kind="eos", stream="video"))
        slots.append(Slot(kind="eos", stream="speech"))
    elif layout is LayoutKind.TTS:
        slots += text_block + speech_block
    elif layout is LayoutKind.V_ONLY:
        slots += video_block + speech_block
    elif layout is LayoutKind.TV_ORDERED:
        slots += text_block + video_block + speech_block
    elif layout is LayoutKind.VT_ORDERED:
        slots += video_block + text_block + speech_block

    if open_ended:
        last_speech = max(
            (i for i, s in enumerate(slots)
             if s.stream == "speech" and s.kind in ("bos", "speech")),
            default=None,
        )
        if last_speech is None:
            raise LayoutError("open-ended plan has no speech slots")
        slots = slots[: last_speech + 1]

    _assign_positions(slots, scheme, video_period, speech_hop)
    if open_ended:
        slots[-1].is_loss_target = True  # the next-frame prediction point
    else:
        _attach_targets(slots, speech, n_speech, n_mels)
    return SequencePlan(
        slots=slots,
        layout=layout,
        scheme=scheme,
        text=text,
        video=video,
        speech=speech,
        speaker=speaker,
        n_speech_frames=n_speech,
        speech_hop_seconds=speech_hop,
    )


def build_generation_prefix(
    text: TextTokens | None,
    video: VideoTokenGrid | None,
    frames: np.ndarray,
    layout: LayoutKind,
    scheme: PositionScheme,
    *,
    speaker: SpeakerVector | None = None,
    n_mels: int = 80,
) -> SequencePlan:
    """Prefix plan whose final slot predicts speech frame ``len(frames)``."""
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size == 0:
        frames = np.zeros((0, n_mels), dtype=np.int64)
    frames = frames.reshape(-1, n_mels)
    plan = build_plan(
        text, video, None, layout, scheme,
        n_speech_frames=frames.shape[0], speaker=speaker, n_mels=n_mels,
        open_ended=True,
    )
    plan.speech = DMelSeq(indices=frames, frame_hop_seconds=plan.speech_hop_seconds)
    return plan


def apply_span_masking(
    plan: SequencePlan,
    p: float,
    mean_span: int = 3,
    ratio: float = 0.5,
    rng: np.random.Generator | None = None,
) -> SequencePlan:
    """Mask random spans per modality stream until ``ratio`` of it is covered.

    With probability ``p`` per sample. Masked slots keep their payload but are
    flagged so the decoder substitutes the stream's learned mask vector.
    Speech predictions into or out of masked slots are dropped from the loss;
    speaker and sentinel slots are never masked.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"masking probability must be in [0, 1], got {p}")
    if rng is None:
        rng = np.random.default_rng()
    out = replace(plan, slots=[copy.copy(s) for s in plan.slots])
    if p == 0.0 or rng.random() >= p:
        return out
    for stream in ("video", "text", "speech"):
        idx = out.stream_slots(stream)
        n = len(idx)
        if n == 0:
            continue
        want = int(np.ceil(ratio * n - 1e-9))
        masked: set[int] = set()
        guard = 0
        while len(masked) < want and guard < 10000:
            guard += 1
            start = int(rng.integers(0, n))
            span = int(rng.geometric(1.0 / mean_span))
            for j in range(start, min(start + span, n)):
                if len(masked) >= want:
                    break  # trim the final span at the budget
                masked.add(j)
        for j in masked:
            out.slots[idx[j]].masked = True

    # exclusion rule: a speech prediction is kept only when neither the slot
    # that makes it nor the slot carrying its target frame is masked
    frame_slot = {out.slots[i].payload: i for i in out.stream_slots("speech")}
    for slot in out.slots:
        if not slot.is_loss_target:
            continue
        if slot.masked:
            slot.is_loss_target = False
            continue
        next_frame = 0 if slot.kind == "bos" else slot.payload + 1
        carrier = frame_slot.get(next_frame)
        if carrier is not None and out.slots[carrier].masked:
            slot.is_loss_target = False
    return out


def causal_reachability(plan: SequencePlan) -> np.ndarray:
    """slot i attends to slots j <= i in plan order."""
    n = len(plan.slots)
    return np.tril(np.ones((n, n), dtype=bool))


def render_plan(plan: SequencePlan) -> str:
    """One slot per line, stable columns; used by golden-file tests."""
    lines = [
        f"layout={plan.layout.value} scheme={plan.scheme.kind.value} "
        f"slots={len(plan.slots)} speech_frames={plan.n_speech_frames}"
    ]
    for i, s in enumerate(plan.slots):
        ts = "-" if s.timestamp_seconds is None else f"{s.timestamp_seconds:.3f}"
        payload = "-" if s.payload is None else str(s.payload)
        flags = ("L" if s.is_loss_target else ".") + ("M" if s.masked else ".")
        lines.append(
            f"{i:4d} {s.kind:8s} {s.stream:8s} payload={payload:>4s} "
            f"pos={s.position_index:5d} t={ts:>7s} {flags}"
        )
    return "\n".join(lines) + "\n"
