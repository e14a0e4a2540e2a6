"""Task policies: hidden-layer choice, fusion gate, and when images are generated in a chat."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import torch

from .adapter import GLMAdapter, adapter_forward
from .backbone import Backbone, HiddenStack, LatentImage, VisualFeature, tokenize
from .config import DEFAULT_EPSILONS, RunConfig, seeded_rng
from .diffusion import NoiseSchedule, build_schedule, sample
from .errors import InputError, SequencingError


class TaskKind(str, enum.Enum):
    text_to_image = "text_to_image"
    edit_default = "edit_default"
    edit_layout = "edit_layout"
    edit_color_texture = "edit_color_texture"
    storytelling = "storytelling"

    @property
    def is_edit(self) -> bool:
        return self.value.startswith("edit")


def epsilon_for_task(task: TaskKind | str, cfg: RunConfig | None = None, override: float | None = None) -> float:
    """Fusion gate for ``task``: explicit override, then config, then the built-in default."""
    task = TaskKind(task)
    if override is not None:
        eps = float(override)
    elif cfg is not None and task.value in cfg.epsilon_defaults:
        eps = float(cfg.epsilon_defaults[task.value])
    else:
        eps = DEFAULT_EPSILONS[task.value]
    if not 0.0 <= eps <= 1.0:
        raise InputError(f"epsilon must lie in [0, 1], got {eps}")
    return eps


def select_layers(task: TaskKind | str, L: int, override: tuple[int, int] | None = None) -> tuple[int, int]:
    """(base_layer, refiner_layer): shallow h_0 for the base path, deep h_L for the refiner."""
    TaskKind(task)
    if L < 1:
        raise InputError(f"L must be >= 1, got {L}")
    if override is None:
        return 0, L
    base, refiner = override
    if not (0 <= base <= L and 0 <= refiner <= L):
        raise InputError(f"layer override {override} outside [0, {L}]")
    return base, refiner


_PERIOD_RUNS = re.compile(r"\.+")


def storytelling_triggers(text: str) -> list[int]:
    """Positions just past each maximal run of '.' characters."""
    return [m.end() for m in _PERIOD_RUNS.finditer(text)]


# ---------------------------------------------------------------------------
# conversations
# ---------------------------------------------------------------------------


@dataclass
class Round:
    user: str
    image: torch.Tensor | None = None
    response: str | None = None  # when set, the reply is teacher-forced instead of decoded


@dataclass
class RoundResult:
    user: str
    response: str
    seq: list[int]  # prompt ids followed by response ids
    prompt_len: int
    f_image: VisualFeature
    stack: HiddenStack  # decoding state at the end of the round


@dataclass
class GenerationEvent:
    kind: str  # "text_segment" | "image"
    payload: str | LatentImage
    round_index: int
    trigger_pos: int | None = None
    pixels: torch.Tensor | None = field(default=None, repr=False)


@dataclass
class Pipeline:
    cfg: RunConfig
    backbone: Backbone
    adapter: GLMAdapter
    schedule: NoiseSchedule

    @classmethod
    def build(cls, cfg: RunConfig, adapter: GLMAdapter | None = None, backbone: Backbone | None = None) -> Pipeline:
        return cls(
            cfg,
            backbone or Backbone(cfg.profile, cfg.seed, cfg.denoiser_warmup),
            adapter or GLMAdapter.from_config(cfg),
            build_schedule(cfg.profile.T, cfg.beta_start, cfg.beta_end),
        )

    def run_round(self, rnd: Round) -> RoundResult:
        bb = self.backbone
        image = rnd.image if rnd.image is not None else bb.blank_image()
        f_image = bb.encode_vision(image)
        e_text = bb.encode_text(rnd.user)
        prompt = e_text.ids[0, : e_text.n_tokens[0]].tolist()
        if rnd.response is None:
            tokens, stack = bb.mllm_forward(e_text, f_image, self.cfg.max_new)
            response_ids = tokens[0].ids
            response = tokens[0].text
        else:
            response = rnd.response
            response_ids = tokenize(response, len(response.encode("utf-8")))
            stack = None
        seq = prompt + response_ids
        if stack is None:
            stack = bb.stack_at(seq, len(seq), f_image)
        return RoundResult(rnd.user, response, seq, len(prompt), f_image, stack)

    def stack_at_char(self, result: RoundResult, char_pos: int) -> HiddenStack:
        n_bytes = len(result.response[:char_pos].encode("utf-8"))
        return self.backbone.stack_at(result.seq, result.prompt_len + n_bytes, result.f_image)

    def render(
        self, stack: HiddenStack, base_layer: int, refiner_layer: int, epsilon: float, rng: torch.Generator
    ) -> tuple[LatentImage, torch.Tensor]:
        with torch.no_grad():
            emb0 = adapter_forward(stack[base_layer], self.adapter, base_layer)
            embL = adapter_forward(stack[refiner_layer], self.adapter, refiner_layer)
            latent = sample(emb0, embL, epsilon, self.cfg.steps, rng, self.backbone, self.schedule)
        return latent, self.backbone.vae_decode(latent)

    def image_rng(self, index: int) -> torch.Generator:
        return seeded_rng(self.cfg.seed, f"sample/{index}")


def extract_for_task(
    task: TaskKind | str, rounds: list[RoundResult], pipeline: Pipeline | None = None, max_images: int | None = None
) -> list[tuple[int, int, HiddenStack]]:
    """Hidden stacks to feed the adapter, as (round index, trigger position, stack) triples."""
    task = TaskKind(task)
    if not rounds:
        raise SequencingError("no completed LM round to extract hidden states from")
    if task is TaskKind.text_to_image:
        return [(0, len(rounds[0].response), rounds[0].stack)]
    if task.is_edit:
        return [(len(rounds) - 1, len(rounds[-1].response), rounds[-1].stack)]
    if pipeline is None:
        raise SequencingError("storytelling extraction needs the pipeline to replay decoding states")
    last = rounds[-1]
    triggers = storytelling_triggers(last.response)
    if max_images is not None:
        triggers = triggers[:max_images]
    return [(len(rounds) - 1, pos, pipeline.stack_at_char(last, pos)) for pos in triggers]


def interleave_generate(
    conversation: list[Round],
    task: TaskKind | str,
    pipeline: Pipeline,
    epsilon: float | None = None,
    layers: tuple[int, int] | None = None,
) -> list[GenerationEvent]:
    """Run every round, then emit text segments with images spliced in at the task's trigger points."""
    task = TaskKind(task)
    cfg = pipeline.cfg
    if not conversation:
        raise SequencingError("empty conversation")
    rounds = [pipeline.run_round(r) for r in conversation]
    eps = epsilon_for_task(task, cfg, epsilon)
    base_layer, refiner_layer = select_layers(task, cfg.profile.L, layers)
    max_images = cfg.max_sentences if task is TaskKind.storytelling else None
    targets = extract_for_task(task, rounds, pipeline, max_images)

    by_round: dict[int, list[tuple[int, HiddenStack]]] = {}
    for round_index, pos, stack in targets:
        by_round.setdefault(round_index, []).append((pos, stack))

    events: list[GenerationEvent] = []
    image_index = 0
    for i, res in enumerate(rounds):
        cursor = 0
        for pos, stack in by_round.get(i, []):
            # every image follows a text segment, possibly an empty one
            events.append(GenerationEvent("text_segment", res.response[cursor:pos], i))
            latent, pixels = pipeline.render(stack, base_layer, refiner_layer, eps, pipeline.image_rng(image_index))
            events.append(GenerationEvent("image", latent, i, pos, pixels))
            image_index += 1
            cursor = pos
        if cursor < len(res.response):
            events.append(GenerationEvent("text_segment", res.response[cursor:], i))
    return events
