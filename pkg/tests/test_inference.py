import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from glm_align.config import RunConfig
from glm_align.errors import InputError, SequencingError
from glm_align.inference import (
    Pipeline,
    Round,
    TaskKind,
    epsilon_for_task,
    extract_for_task,
    interleave_generate,
    select_layers,
    storytelling_triggers,
)


@pytest.fixture(scope="module")
def pipeline(cfg, backbone):
    return Pipeline.build(cfg.replace(sample_steps=3, max_new=6), backbone=backbone)


class TestEpsilon:
    @pytest.mark.parametrize(
        "task,eps",
        [("text_to_image", 1.0), ("edit_default", 0.8), ("edit_color_texture", 0.7), ("storytelling", 1.0)],
    )
    def test_defaults(self, task, eps):
        assert epsilon_for_task(task) == eps

    def test_precedence(self):
        cfg = RunConfig(epsilon_defaults={"edit_default": 0.5})
        assert epsilon_for_task(TaskKind.edit_default, cfg) == 0.5
        assert epsilon_for_task(TaskKind.edit_default, cfg, override=0.25) == 0.25
        assert epsilon_for_task(TaskKind.edit_layout, cfg) == 0.95

    def test_invalid(self):
        with pytest.raises(InputError):
            epsilon_for_task("text_to_image", override=1.5)
        with pytest.raises(ValueError):
            epsilon_for_task("paint")


class TestLayers:
    @pytest.mark.parametrize("task", list(TaskKind))
    def test_shallow_and_deep(self, task):
        assert select_layers(task, 6) == (0, 6)

    def test_boundary_and_override(self):
        assert select_layers("text_to_image", 1) == (0, 1)
        assert select_layers("text_to_image", 6, (0, 1)) == (0, 1)
        with pytest.raises(InputError):
            select_layers("text_to_image", 6, (0, 7))
        with pytest.raises(InputError):
            select_layers("text_to_image", 0)


class TestTriggers:
    @pytest.mark.parametrize(
        "text,expected",
        [("A. B. C.", [2, 5, 8]), ("Wait... done.", [7, 13]), ("", []), ("Hello", []), ("...", [3]), ("a.b", [2])],
    )
    def test_cases(self, text, expected):
        assert storytelling_triggers(text) == expected

    @given(st.text(alphabet="ab .!", max_size=40))
    def test_one_trigger_per_period_run(self, text):
        triggers = storytelling_triggers(text)
        runs = sum(1 for i, ch in enumerate(text) if ch == "." and (i == 0 or text[i - 1] != "."))
        assert len(triggers) == runs
        assert all(text[p - 1] == "." and (p == len(text) or text[p] != ".") for p in triggers)


class TestExtraction:
    def test_t2i_uses_first_round(self, pipeline):
        rounds = [pipeline.run_round(Round("a cat"))]
        ((idx, _, stack),) = extract_for_task("text_to_image", rounds)
        assert idx == 0 and stack is rounds[0].stack

    def test_edit_uses_last_round(self, pipeline):
        rounds = [pipeline.run_round(Round(t)) for t in ("one", "two", "three")]
        ((idx, _, stack),) = extract_for_task("edit_default", rounds)
        assert idx == 2 and stack is rounds[2].stack

    def test_story_one_stack_per_trigger(self, pipeline):
        rounds = [pipeline.run_round(Round("tell", response="First. Second."))]
        targets = extract_for_task("storytelling", rounds, pipeline)
        assert [pos for _, pos, _ in targets] == [6, 14]
        assert not torch.equal(targets[0][2][6], targets[1][2][6])

    def test_no_rounds(self):
        with pytest.raises(SequencingError):
            extract_for_task("text_to_image", [])


class TestInterleave:
    def test_t2i_single_image(self, pipeline):
        events = interleave_generate([Round("a blue square")], "text_to_image", pipeline)
        assert [e.kind for e in events].count("image") == 1
        img = next(e for e in events if e.kind == "image")
        assert img.pixels.shape == (1, 3, 32, 32)

    def test_story_four_sentences_four_images(self, pipeline):
        story = "One day. Then rain. A frog sang. The end."
        events = interleave_generate([Round("story", response=story)], TaskKind.storytelling, pipeline)
        kinds = [e.kind for e in events]
        assert kinds == ["text_segment", "image"] * 4
        assert "".join(e.payload for e in events if e.kind == "text_segment") == story
        assert [e.trigger_pos for e in events if e.kind == "image"] == storytelling_triggers(story)

    def test_max_sentences_caps_images(self, cfg, backbone):
        pipe = Pipeline.build(cfg.replace(sample_steps=2, max_sentences=2), backbone=backbone)
        events = interleave_generate([Round("s", response="A. B. C. D.")], "storytelling", pipe)
        assert sum(e.kind == "image" for e in events) == 2
        assert "".join(e.payload for e in events if e.kind == "text_segment") == "A. B. C. D."

    def test_deterministic(self, pipeline):
        conv = [Round("a red circle")]
        a = interleave_generate(conv, "text_to_image", pipeline)
        b = interleave_generate(conv, "text_to_image", pipeline)
        assert [e.kind for e in a] == [e.kind for e in b]
        for x, y in zip(a, b):
            if x.kind == "image":
                assert torch.equal(x.payload.values, y.payload.values)
            else:
                assert x.payload == y.payload

    def test_edit_with_image(self, pipeline):
        img = torch.rand(3, 32, 32, dtype=torch.float64) * 2 - 1
        events = interleave_generate([Round("make it red", image=img)], "edit_color_texture", pipeline)
        assert sum(e.kind == "image" for e in events) == 1

    def test_empty_conversation(self, pipeline):
        with pytest.raises(SequencingError):
            interleave_generate([], "text_to_image", pipeline)
