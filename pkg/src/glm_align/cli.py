"""Command-line entry point: ``glm-align <subcommand> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .config import PROFILES, RunConfig, load_config, preset
from .data import load_image, load_manifest, save_image, synth_dataset
from .errors import GLMAlignError, InputError
from .evaluation import evaluate_sets, layer_sweep
from .inference import Pipeline, Round, TaskKind, interleave_generate
from .training import build_components, enforce_freeze, fit, init_state

log = logging.getLogger("glm_align")

OUT_ENV = "GLM_ALIGN_OUT"


def _common(parent: argparse.ArgumentParser, suppress: bool):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parent.add_argument("--config", default=default(None), help="key = value config file or preset name")
    parent.add_argument("--seed", type=int, default=default(None))
    parent.add_argument("--profile", choices=sorted(PROFILES), default=default(None))
    parent.add_argument("--out", default=default(None), help=f"output directory (default ${OUT_ENV} or ./runs)")
    parent.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glm-align", description=__doc__)
    _common(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", parents=[common], help="train the adapter")
    p.add_argument("--manifest", help="JSON-lines dataset manifest")
    p.add_argument("--synth", type=int, default=64, help="synthetic samples when no manifest is given")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="accept a config-hash mismatch on --resume")
    p.add_argument("--timing", action="store_true", help="record wall_ms per step (breaks byte-identical metrics)")
    p.add_argument("--mode", choices=("verbatim", "eps_pred"))

    p = sub.add_parser("eval", parents=[common], help="stub FID / CLIP-style scores of two manifests")
    p.add_argument("--gen-manifest", required=True)
    p.add_argument("--ref-manifest", required=True)
    p.add_argument("--ckpt")

    def sampler_knobs(sp):
        sp.add_argument("--ckpt")
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--mode", choices=("verbatim", "eps_pred"))

    p = sub.add_parser("generate", parents=[common], help="text-to-image")
    p.add_argument("--prompt", required=True)
    sampler_knobs(p)

    p = sub.add_parser("edit", parents=[common], help="chat-based image editing")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--task", default="edit_default", choices=[t.value for t in TaskKind if t.is_edit])
    sampler_knobs(p)

    p = sub.add_parser("story", parents=[common], help="storytelling with one image per sentence")
    p.add_argument("--prompt", required=True)
    p.add_argument("--response", help="teacher-forced story text instead of greedy decoding")
    p.add_argument("--max-sentences", type=int)
    sampler_knobs(p)

    p = sub.add_parser("layer-sweep", parents=[common], help="feed h_(L-k) to the adapter for each offset k")
    p.add_argument("--prompt", required=True)
    p.add_argument("--offsets", default="0,1,2,4")
    sampler_knobs(p)

    p = sub.add_parser("synth-data", parents=[common], help="write the synthetic shapes dataset")
    p.add_argument("--n", type=int, default=64)

    p = sub.add_parser("inspect-ckpt", parents=[common], help="print a checkpoint header")
    p.add_argument("file")
    return parser


# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.profile:
            cfg = cfg.replace(profile=PROFILES[args.profile])
    else:
        cfg = preset("desk", args.profile or "desk")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "mode", None):
        cfg = cfg.replace(ddpm_mode=args.mode)
    return cfg


def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


def pipeline_for(args, cfg: RunConfig) -> Pipeline:
    """Trained pipeline from --ckpt (its stored config wins), else an untrained adapter."""
    if getattr(args, "ckpt", None):
        state, cfg, _ = load_checkpoint(args.ckpt)
        if getattr(args, "mode", None):
            cfg = cfg.replace(ddpm_mode=args.mode)
        adapter = state.adapter
    else:
        log.warning("no --ckpt given; using an untrained adapter")
        adapter = None
    if getattr(args, "steps", None):
        cfg = cfg.replace(sample_steps=args.steps)
    if getattr(args, "max_sentences", None):
        cfg = cfg.replace(max_sentences=args.max_sentences)
    return Pipeline.build(cfg, adapter)


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------


def cmd_train(args, cfg: RunConfig) -> str:
    out = out_dir(args)
    if args.manifest:
        manifest = load_manifest(args.manifest)
    else:
        manifest = synth_dataset(args.synth, cfg.seed, out / "data", cfg.profile.image_size)
    samples = manifest.load_samples(cfg.profile.pixel_shape)
    backbone, schedule = build_components(cfg)
    metrics = out / "metrics.jsonl"
    if args.resume:
        state, _, _ = load_checkpoint(args.resume, cfg, force=args.force)
    else:
        state = init_state(cfg)
        metrics.write_text("")
    ckpt_dir = out / "checkpoints"

    def on_step(st, _losses):
        if args.ckpt_every and st.step % args.ckpt_every == 0:
            save_checkpoint(st, cfg, ckpt_dir / f"step_{st.step:06d}.ckpt")

    state, history = fit(samples, cfg, backbone, schedule, state, args.max_steps, metrics, args.timing, on_step)
    enforce_freeze(backbone)
    final = save_checkpoint(state, cfg, out / "final.ckpt")
    last = history[-1] if history else None
    losses = f" l_align={last.l_align:.6g} l_overall={last.l_overall:.6g}" if last else ""
    return f"train: steps={state.step} epoch={state.epoch}{losses} ckpt={final} sha={file_digest(final)}"


def cmd_eval(args, cfg: RunConfig) -> str:
    pipeline = pipeline_for(args, cfg)
    shape = pipeline.cfg.profile.pixel_shape
    gen = load_manifest(args.gen_manifest).load_samples(shape)
    ref = load_manifest(args.ref_manifest).load_samples(shape)
    record = evaluate_sets(pipeline, gen, ref)
    line = json.dumps(record)
    with open(out_dir(args) / "eval.jsonl", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    return line


def _emit_images(events, out: Path, stem: str) -> list[Path]:
    paths = []
    for ev in events:
        if ev.kind == "image":
            paths.append(save_image(ev.pixels, out / f"{stem}_{len(paths) + 1:02d}.png"))
    return paths


def cmd_generate(args, cfg: RunConfig) -> str:
    pipeline = pipeline_for(args, cfg)
    events = interleave_generate([Round(args.prompt)], TaskKind.text_to_image, pipeline, args.epsilon)
    out = out_dir(args)
    (img,) = [ev for ev in events if ev.kind == "image"]
    path = save_image(img.pixels, out / "generate.png")
    return f"generate: image={path} sha={file_digest(path)}"


def cmd_edit(args, cfg: RunConfig) -> str:
    pipeline = pipeline_for(args, cfg)
    image = load_image(args.image, pipeline.cfg.profile.pixel_shape)
    events = interleave_generate([Round(args.instruction, image=image)], args.task, pipeline, args.epsilon)
    out = out_dir(args)
    (img,) = [ev for ev in events if ev.kind == "image"]
    path = save_image(img.pixels, out / "edit.png")
    return f"edit: task={args.task} image={path} sha={file_digest(path)}"


def cmd_story(args, cfg: RunConfig) -> str:
    pipeline = pipeline_for(args, cfg)
    events = interleave_generate(
        [Round(args.prompt, response=args.response)], TaskKind.storytelling, pipeline, args.epsilon
    )
    out = out_dir(args)
    paths = _emit_images(events, out, "story")
    lines, n_img = [], 0
    for ev in events:
        if ev.kind == "text_segment":
            lines.append(ev.payload)
        else:
            n_img += 1
            lines.append(f"[image {n_img:02d}: {paths[n_img - 1].name}]")
    transcript = out / "transcript.txt"
    transcript.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return f"story: images={len(paths)} transcript={transcript}"


def cmd_layer_sweep(args, cfg: RunConfig) -> str:
    pipeline = pipeline_for(args, cfg)
    try:
        offsets = [int(k) for k in args.offsets.split(",") if k.strip()]
    except ValueError:
        raise InputError(f"--offsets must be comma-separated integers, got {args.offsets!r}") from None
    report = layer_sweep(args.prompt, offsets, pipeline)
    out = out_dir(args)
    for e in report.entries:
        save_image(e.pixels, out / f"sweep_L-{e.offset}.png")
    (out / "sweep.tsv").write_text(report.table(), encoding="utf-8")
    cells = " ".join(f"L-{e.offset}:{e.l_align:.6g}" for e in report.entries)
    return f"layer-sweep: {cells}"


def cmd_synth_data(args, cfg: RunConfig) -> str:
    out = out_dir(args)
    manifest = synth_dataset(args.n, cfg.seed, out, cfg.profile.image_size)
    return f"synth-data: n={len(manifest)} manifest={manifest.path} sha={file_digest(manifest.path)}"


def cmd_inspect_ckpt(args, cfg: RunConfig) -> str:
    return json.dumps(inspect_checkpoint(args.file), sort_keys=True)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "edit": cmd_edit,
    "story": cmd_story,
    "layer-sweep": cmd_layer_sweep,
    "synth-data": cmd_synth_data,
    "inspect-ckpt": cmd_inspect_ckpt,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        print(COMMANDS[args.command](args, cfg))
    except GLMAlignError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
