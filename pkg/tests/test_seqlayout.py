import numpy as np
import pytest

from vtspeech.errors import ConfigError, LayoutError
from vtspeech.meldsp import EOS_CLASS, DMelSeq
from vtspeech.seqlayout import (
    LayoutKind,
    PositionKind,
    PositionScheme,
    apply_span_masking,
    build_generation_prefix,
    build_plan,
    causal_reachability,
    render_plan,
)
from vtspeech.tokenizers import TextTokens, VideoTokenGrid

GLOBAL = PositionScheme(kind=PositionKind.GLOBAL)
ALIGNED = PositionScheme(kind=PositionKind.TIME_ALIGNED)
F = 6


def sample(rng, n_text=2, n_video=3, n_speech=4):
    text = TextTokens(ids=rng.integers(2, 10, n_text))
    video = VideoTokenGrid(tokens=rng.integers(0, 8, (n_video, 2, 2)), k_codes=8)
    speech = DMelSeq(indices=rng.integers(0, 16, (n_speech, F)), frame_hop_seconds=0.025)
    return text, video, speech


def slot_signature(plan):
    return [(s.kind, s.stream, s.payload) for s in plan.slots]


class TestBuildPlan:
    def test_vt_ordered_slot_count(self):
        rng = np.random.default_rng(0)
        text, video, speech = sample(rng, n_text=2, n_video=3, n_speech=4)
        plan = build_plan(text, video, speech, LayoutKind.VT_ORDERED, GLOBAL)
        assert len(plan) == 1 + (3 + 2) + (2 + 2) + (4 + 2) == 16

    def test_slot_count_formula_all_layouts(self):
        rng = np.random.default_rng(1)
        for layout in LayoutKind:
            n_text, n_video, n_speech = 3, 5, 7
            text, video, speech = sample(rng, n_text, n_video, n_speech)
            plan = build_plan(
                text if layout.uses_text else None,
                video if layout.uses_video else None,
                speech, layout, GLOBAL,
            )
            want = 1 + (n_speech + 2)
            if layout.uses_text:
                want += n_text + 2
            if layout.uses_video:
                want += n_video + 2
            assert len(plan) == want

    def test_block_orders(self):
        rng = np.random.default_rng(2)
        text, video, speech = sample(rng, 1, 1, 1)
        tv = [s.stream for s in build_plan(text, video, speech, LayoutKind.TV_ORDERED, GLOBAL).slots]
        assert tv == ["speaker"] + ["text"] * 3 + ["video"] * 3 + ["speech"] * 3
        vt = [s.stream for s in build_plan(text, video, speech, LayoutKind.VT_ORDERED, GLOBAL).slots]
        assert vt == ["speaker"] + ["video"] * 3 + ["text"] * 3 + ["speech"] * 3

    def test_streaming_merge_matches_timestamp_oracle(self):
        rng = np.random.default_rng(3)
        text, video, speech = sample(rng, n_text=2, n_video=3, n_speech=4)
        plan = build_plan(text, video, speech, LayoutKind.TV_STREAMING, GLOBAL)
        merged = [
            (s.stream, s.payload) for s in plan.slots
            if s.kind in ("video", "speech")
        ]
        # oracle: sort (timestamp, video-first) with explicit tie-break
        events = [("video", t, t * 0.040) for t in range(3)]
        events += [("speech", t, t * 0.025) for t in range(4)]
        events.sort(key=lambda e: (e[2], 0 if e[0] == "video" else 1))
        assert merged == [(s, i) for s, i, _ in events]
        assert merged == [
            ("video", 0), ("speech", 0), ("speech", 1), ("video", 1),
            ("speech", 2), ("speech", 3), ("video", 2),
        ]

    def test_streaming_no_future_video_property(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n_v = int(rng.integers(1, 12))
            n_s = int(rng.integers(1, 12))
            text, video, speech = sample(rng, 2, n_v, n_s)
            plan = build_plan(text, video, speech, LayoutKind.TV_STREAMING, GLOBAL)
            for i, s in enumerate(plan.slots):
                if s.kind != "speech":
                    continue
                for prev in plan.slots[:i]:
                    if prev.kind == "video":
                        assert prev.timestamp_seconds <= s.timestamp_seconds

    def test_global_positions_enumerate(self):
        rng = np.random.default_rng(5)
        text, video, speech = sample(rng)
        plan = build_plan(text, video, speech, LayoutKind.TV_ORDERED, GLOBAL)
        assert [s.position_index for s in plan.slots] == list(range(len(plan)))

    def test_time_aligned_positions(self):
        rng = np.random.default_rng(6)
        text, video, speech = sample(rng, n_text=2, n_video=6, n_speech=9)
        plan = build_plan(text, video, speech, LayoutKind.TV_ORDERED, ALIGNED)
        non_timed = [s for s in plan.slots if s.kind not in ("video", "speech")]
        base = len(non_timed)
        assert [s.position_index for s in non_timed] == list(range(base))
        for s in plan.slots:
            if s.kind == "video":
                assert s.position_index == base + 8 * s.payload
            if s.kind == "speech":
                assert s.position_index == base + 5 * s.payload
        # 0.2 s coincidence: speech frame 8 and video frame 5
        vid5 = next(s for s in plan.slots if s.kind == "video" and s.payload == 5)
        sp8 = next(s for s in plan.slots if s.kind == "speech" and s.payload == 8)
        assert vid5.position_index == sp8.position_index == base + 40

    def test_bad_base_unit_rejected(self):
        with pytest.raises(ConfigError):
            scheme = PositionScheme(kind=PositionKind.TIME_ALIGNED, base_unit_seconds=0.007)
            rng = np.random.default_rng(7)
            text, video, speech = sample(rng)
            build_plan(text, video, speech, LayoutKind.TV_ORDERED, scheme)

    def test_targets_shifted_by_one_with_eos_terminal(self):
        rng = np.random.default_rng(8)
        text, video, speech = sample(rng, n_speech=4)
        plan = build_plan(text, video, speech, LayoutKind.TV_ORDERED, GLOBAL)
        targets = [s for s in plan.slots if s.is_loss_target]
        assert len(targets) == 4 + 1
        assert targets[0].kind == "bos" and np.array_equal(
            targets[0].target_frame, speech.indices[0]
        )
        for t in range(3):
            assert np.array_equal(targets[t + 1].target_frame, speech.indices[t + 1])
        assert np.all(targets[-1].target_frame == EOS_CLASS)

    def test_missing_modality_rejected(self):
        rng = np.random.default_rng(9)
        text, video, speech = sample(rng)
        with pytest.raises(LayoutError):
            build_plan(text, None, speech, LayoutKind.TV_ORDERED, GLOBAL)
        with pytest.raises(LayoutError):
            build_plan(None, video, speech, LayoutKind.TTS, GLOBAL)

    def test_exactly_one_speaker_slot(self):
        rng = np.random.default_rng(10)
        text, video, speech = sample(rng)
        plan = build_plan(text, video, speech, LayoutKind.TV_STREAMING, GLOBAL)
        assert sum(1 for s in plan.slots if s.kind == "speaker") == 1


class TestSpanMasking:
    def plan(self, rng, n_speech=40, n_video=30, n_text=20):
        text, video, speech = sample(rng, n_text, n_video, n_speech)
        return build_plan(text, video, speech, LayoutKind.TV_ORDERED, GLOBAL)

    def test_p_zero_is_identity(self):
        rng = np.random.default_rng(0)
        plan = self.plan(rng)
        out = apply_span_masking(plan, p=0.0, rng=rng)
        assert not any(s.masked for s in out.slots)
        assert out.target_count() == plan.target_count()

    def test_masked_fraction_statistics(self):
        fractions = {"video": [], "text": [], "speech": []}
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            plan = self.plan(rng)
            out = apply_span_masking(plan, p=1.0, mean_span=3, ratio=0.5, rng=rng)
            for stream in fractions:
                idx = out.stream_slots(stream)
                frac = sum(out.slots[i].masked for i in idx) / len(idx)
                fractions[stream].append(frac)
        for stream, vals in fractions.items():
            assert 0.45 <= np.mean(vals) <= 0.55, (stream, np.mean(vals))

    def test_masking_every_speech_slot_kills_all_targets(self):
        rng = np.random.default_rng(1)
        plan = self.plan(rng, n_speech=6)
        out = apply_span_masking(plan, p=0.0, rng=rng)
        for i in out.stream_slots("speech"):
            out.slots[i].masked = True
        # re-run only the exclusion logic through a fresh masking call at p=0
        # by directly checking rule effects:
        masked_frames = {out.slots[i].payload for i in out.stream_slots("speech")}
        for slot in out.slots:
            if not slot.is_loss_target:
                continue
            nxt = 0 if slot.kind == "bos" else slot.payload + 1
            if slot.masked or nxt in masked_frames:
                slot.is_loss_target = False
        assert out.target_count() == 0

    def test_speaker_and_sentinels_never_masked(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            plan = self.plan(rng)
            out = apply_span_masking(plan, p=1.0, rng=rng)
            for s in out.slots:
                if s.kind in ("speaker", "bos", "eos"):
                    assert not s.masked

    def test_original_plan_untouched(self):
        rng = np.random.default_rng(2)
        plan = self.plan(rng)
        apply_span_masking(plan, p=1.0, rng=rng)
        assert not any(s.masked for s in plan.slots)


class TestCausalReachability:
    def test_lower_triangular(self):
        rng = np.random.default_rng(0)
        text, video, speech = sample(rng)
        plan = build_plan(text, video, speech, LayoutKind.TV_ORDERED, GLOBAL)
        mask = causal_reachability(plan)
        assert mask[0].sum() == 1  # slot 0 sees only itself
        assert np.array_equal(mask, np.tril(np.ones_like(mask)))

    def test_independent_of_layout_given_order(self):
        rng = np.random.default_rng(1)
        text, video, speech = sample(rng)
        a = causal_reachability(build_plan(text, video, speech, LayoutKind.TV_ORDERED, GLOBAL))
        b = causal_reachability(build_plan(text, video, speech, LayoutKind.VT_ORDERED, GLOBAL))
        assert np.array_equal(a, b)


class TestGenerationPrefix:
    def test_prefix_extends_previous_prefix(self):
        rng = np.random.default_rng(0)
        text, video, _ = sample(rng, n_video=5)
        prev_sig = None
        for t in range(6):
            frames = rng.integers(0, 16, (t, F))
            plan = build_generation_prefix(
                text, video, frames, LayoutKind.TV_STREAMING, GLOBAL, n_mels=F
            )
            assert plan.slots[-1].stream == "speech"
            assert plan.slots[-1].is_loss_target
            sig = slot_signature(plan)
            if prev_sig is not None:
                assert sig[: len(prev_sig)] == prev_sig
            prev_sig = sig

    def test_streaming_prefix_video_count(self):
        rng = np.random.default_rng(1)
        text, video, _ = sample(rng, n_video=10)
        for t in range(1, 8):
            frames = rng.integers(0, 16, (t, F))
            plan = build_generation_prefix(
                text, video, frames, LayoutKind.TV_STREAMING, GLOBAL, n_mels=F
            )
            n_vid = sum(1 for s in plan.slots if s.kind == "video")
            last_time = (t - 1) * 0.025
            want = min(int(np.floor(last_time / 0.040 + 1e-9)) + 1, video.n_frames)
            assert n_vid == want

    def test_ordered_prefix_keeps_full_conditioning(self):
        rng = np.random.default_rng(2)
        text, video, _ = sample(rng, n_video=5)
        plan = build_generation_prefix(
            text, video, np.zeros((0, F), dtype=np.int64),
            LayoutKind.VT_ORDERED, GLOBAL, n_mels=F,
        )
        kinds = [s.kind for s in plan.slots]
        assert kinds.count("video") == 5 and kinds.count("eos") == 2
        assert kinds[-1] == "bos" and plan.slots[-1].stream == "speech"


class TestRender:
    def test_render_golden(self):
        text = TextTokens(ids=np.array([4, 2]))
        video = VideoTokenGrid(tokens=np.zeros((2, 1, 1), dtype=np.int64), k_codes=4)
        speech = DMelSeq(indices=np.zeros((2, 3), dtype=np.int64), frame_hop_seconds=0.025)
        plan = build_plan(text, video, speech, LayoutKind.VT_ORDERED, ALIGNED)
        golden = (
            "layout=vt_ordered scheme=time_aligned slots=13 speech_frames=2\n"
            "   0 speaker  speaker  payload=   - pos=    0 t=      - ..\n"
            "   1 bos      video    payload=   - pos=    1 t=      - ..\n"
            "   2 video    video    payload=   0 pos=    9 t=  0.000 ..\n"
            "   3 video    video    payload=   1 pos=   17 t=  0.040 ..\n"
            "   4 eos      video    payload=   - pos=    2 t=      - ..\n"
            "   5 bos      text     payload=   - pos=    3 t=      - ..\n"
            "   6 text     text     payload=   4 pos=    4 t=      - ..\n"
            "   7 text     text     payload=   2 pos=    5 t=      - ..\n"
            "   8 eos      text     payload=   - pos=    6 t=      - ..\n"
            "   9 bos      speech   payload=   - pos=    7 t=      - L.\n"
            "  10 speech   speech   payload=   0 pos=    9 t=  0.000 L.\n"
            "  11 speech   speech   payload=   1 pos=   14 t=  0.025 L.\n"
            "  12 eos      speech   payload=   - pos=    8 t=      - ..\n"
        )
        assert render_plan(plan) == golden
