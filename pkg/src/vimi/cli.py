"""Command-line surface wiring the modules into reproducible runs.

Subcommands: build-index, retrieve, augment, curate, train, sample, eval.
Every command prints a single line of JSON to stdout that includes the
configuration hash, and is deterministic given config plus seed. Exit
codes: 0 success, 1 input error, 2 I/O or corrupt-file error, 3 internal
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    load_config,
    override,
    resolve_seed,
)
from .diffusion import (
    DivergedLossError,
    ToyDenoiser,
    TrainingConfig,
    VideoTensor,
    train_toy,
)
from .diffusion import ShapeMismatchError as DiffusionShapeError
from .encoder import ConditioningEncoder, EncoderSpec, PromptTooLongError
from .encoder import ShapeMismatchError as EncoderShapeError
from .metrics import (
    DimensionMismatchError,
    TooFewSamplesError,
    feature_extract,
    fit_gaussian,
    frechet_distance,
)
from .prompts import (
    DictionaryExtractor,
    EmptyCaptionError,
    MissingFrameError,
    MultimodalPrompt,
    SyntheticCropSegmenter,
    build_instructed_t2v_prompt,
    build_prediction_prompt,
    build_pretraining_prompt,
    curate_subject_prompt,
    extract_entities,
)
from .retrieval import (
    CorpusFormatError,
    DuplicateIdError,
    InvalidKError,
    RetrievalResult,
    UnknownDocError,
    build_index,
    load_corpus_jsonl,
    load_index,
    retrieve,
    save_index,
)
from .sampling import (
    CascadeConfig,
    CascadeShapeError,
    block_mean_downsample,
    cascade_sample,
    sample,
    upsample_nearest,
)
from .serialization import CorruptFileError

EXIT_INPUT = 1
EXIT_IO = 2
EXIT_INTERNAL = 3

VIDEO_SUFFIX = ".vv"


class InputDataError(Exception):
    """Semantically invalid input (missing record fields, absent
    prerequisites, shape disagreements)."""


class ArgumentError(Exception):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True, separators=(",", ":")))


def _read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputDataError(f"{path}: line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise InputDataError(f"{path}: line {line_no}: expected a JSON object")
            records.append(obj)
    return records


def _record_field(record: dict, field: str, path, line_no: int) -> str:
    value = record.get(field)
    if not isinstance(value, str) or not value:
        raise InputDataError(f"{path}: record {line_no}: missing or empty {field!r}")
    return value


def _resolved_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    seed = resolve_seed(getattr(args, "seed", None), cfg.seed)
    return override(cfg, "", seed=seed)


def _make_encoder(spec: EncoderSpec) -> ConditioningEncoder:
    return ConditioningEncoder(spec)


# -- subcommands -------------------------------------------------------------


def cmd_build_index(args) -> None:
    cfg = _resolved_config(args)
    cfg = override(cfg, "retrieval", k1=args.k1, b=args.b)
    corpus = load_corpus_jsonl(args.corpus)
    index = build_index(corpus, cfg.retrieval.params())
    save_index(index, args.out)
    _emit(
        {
            "command": "build-index",
            "doc_count": index.doc_count,
            "avg_doc_len": index.avg_doc_len,
            "terms": len(index.postings),
            "config_hash": config_hash(cfg),
        }
    )


def cmd_retrieve(args) -> None:
    cfg = _resolved_config(args)
    cfg = override(cfg, "retrieval", k=args.k)
    index = load_index(args.index)
    result = retrieve(index, args.query, cfg.retrieval.k, exclude_self=args.exclude_self)
    _emit({"command": "retrieve", **result.to_dict(), "config_hash": config_hash(cfg)})


def _retrieval_for(index, caption: str, record_id: str, k: int, exclude_self: bool) -> RetrievalResult:
    """K=0 short-circuits to an empty result without touching the index."""
    if k == 0 or index is None:
        return RetrievalResult(query=caption, pairs=[])
    return retrieve(index, caption, k, exclude_self=record_id if exclude_self else None)


def cmd_augment(args) -> None:
    cfg = _resolved_config(args)
    cfg = override(cfg, "retrieval", k=args.k)
    k = cfg.retrieval.k
    if k < 0:
        raise InputDataError(f"K must be >= 0, got {k}")
    index = None
    if k > 0:
        if not Path(args.index).exists():
            raise InputDataError(f"index {args.index} not found; required for K > 0")
        index = load_index(args.index)
    records = _read_jsonl(args.dataset)
    with open(args.out, "w", encoding="utf-8") as fh:
        for n, record in enumerate(records, start=1):
            record_id = _record_field(record, "id", args.dataset, n)
            caption = _record_field(record, "caption", args.dataset, n)
            retrieved = _retrieval_for(index, caption, record_id, k, args.exclude_self)
            prompt = build_pretraining_prompt(caption, retrieved)
            fh.write(json.dumps({"id": record_id, "prompt": prompt.to_dict()}, sort_keys=True))
            fh.write("\n")
    _emit(
        {
            "command": "augment",
            "records": len(records),
            "k": k,
            "config_hash": config_hash(cfg),
        }
    )


def cmd_curate(args) -> None:
    cfg = _resolved_config(args)
    phrases = [
        line.strip()
        for line in Path(args.dictionary).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    extractor = DictionaryExtractor(phrases)
    segmenter = SyntheticCropSegmenter()
    records = _read_jsonl(args.dataset)
    total_entities = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for n, record in enumerate(records, start=1):
            record_id = _record_field(record, "id", args.dataset, n)
            caption = _record_field(record, "caption", args.dataset, n)
            entities = extract_entities(caption, extractor)
            total_entities += len(entities)
            prompt = curate_subject_prompt(caption, entities, segmenter)
            fh.write(json.dumps({"id": record_id, "prompt": prompt.to_dict()}, sort_keys=True))
            fh.write("\n")
    _emit(
        {
            "command": "curate",
            "records": len(records),
            "entities": total_entities,
            "config_hash": config_hash(cfg),
        }
    )


def _load_video_for(videos_dir: str, record_id: str) -> VideoTensor:
    path = Path(videos_dir) / f"{record_id}{VIDEO_SUFFIX}"
    if not path.exists():
        raise InputDataError(f"no video file for id {record_id!r} ({path})")
    return VideoTensor.load(path)


def _check_video_shape(video: VideoTensor, expected: tuple[int, int, int, int], record_id: str) -> None:
    if video.shape != expected:
        raise InputDataError(
            f"video {record_id!r} has shape {video.shape}, config expects {expected}"
        )


def _derived_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def _train_stage1(args, cfg: RunConfig) -> dict:
    """Pretraining: the base model on downsampled videos and the upsampler
    on full-resolution videos with the re-upsampled base video as auxiliary
    conditioning, both driven by retrieval-augmented prompts."""
    if args.prompts is None:
        raise InputDataError("stage 1 requires --prompts with augmented prompt records")
    records = _read_jsonl(args.prompts)
    stage2_shape = cfg.video.stage2_shape()
    stage1_shape = cfg.video.stage1_shape()
    cascade = CascadeConfig(
        stage1_shape, stage2_shape, cfg.sampling.steps1, cfg.sampling.steps2
    )
    factor_h = stage2_shape[1] // stage1_shape[1]
    factor_w = stage2_shape[2] // stage1_shape[2]

    full: list[VideoTensor] = []
    prompts: list[MultimodalPrompt] = []
    for n, record in enumerate(records, start=1):
        record_id = _record_field(record, "id", args.prompts, n)
        if "prompt" not in record:
            raise InputDataError(f"{args.prompts}: record {n}: missing 'prompt'")
        prompts.append(MultimodalPrompt.from_dict(record["prompt"]))
        video = _load_video_for(args.videos, record_id)
        _check_video_shape(video, stage2_shape, record_id)
        full.append(video)

    down = [
        VideoTensor(block_mean_downsample(v.data, factor_h, factor_w), v.framerate) for v in full
    ]
    aux_blocks = [upsample_nearest(v.data, factor_h, factor_w).ravel() for v in down]

    seed_base, seed_ups, seed_t1, seed_t2 = _derived_seeds(cfg.seed, 4)
    encoder = _make_encoder(cfg.encoder)
    tr = cfg.training
    steps = args.steps if args.steps is not None else tr.stage1_steps
    freeze = None if tr.freeze_steps < 0 else tr.freeze_steps

    base = ToyDenoiser(
        stage1_shape,
        cond_dim=cfg.encoder.d_model,
        hidden=tr.hidden,
        sigma_data=cfg.diffusion.sigma_data,
        seed=seed_base,
    )
    base_losses: list[float] = []
    train_toy(
        base,
        list(zip(down, prompts)),
        cfg.diffusion,
        encoder,
        TrainingConfig(steps=steps, lr=tr.lr, batch_size=tr.batch_size, freeze_steps=freeze, seed=seed_t1),
        on_step=lambda _i, lo: base_losses.append(lo),
    )

    ups = ToyDenoiser(
        stage2_shape,
        cond_dim=cfg.encoder.d_model + int(np.prod(stage2_shape)),
        hidden=tr.hidden,
        sigma_data=cfg.diffusion.sigma_data,
        seed=seed_ups,
    )
    ups_losses: list[float] = []
    train_toy(
        ups,
        list(zip(full, prompts)),
        cfg.diffusion,
        encoder,
        TrainingConfig(steps=steps, lr=tr.lr, batch_size=tr.batch_size, freeze_steps=freeze, seed=seed_t2),
        aux_fn=lambda i: aux_blocks[i],
        on_step=lambda _i, lo: ups_losses.append(lo),
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base.save(out_dir / "base.ckpt")
    ups.save(out_dir / "upsampler.ckpt")
    return {
        "command": "train",
        "stage": 1,
        "steps": steps,
        "records": len(records),
        "final_loss_base": base_losses[-1],
        "final_loss_upsampler": ups_losses[-1],
        "checkpoints": ["base.ckpt", "upsampler.ckpt"],
        "cascade_factors": [factor_h, factor_w],
        "config_hash": config_hash(cfg),
    }


def _stage2_prompt(task: str, record_id: str, caption: str, index, k: int, extractor, segmenter):
    if task == "subject":
        return curate_subject_prompt(caption, extract_entities(caption, extractor), segmenter)
    if task == "predict":
        return build_prediction_prompt(caption, f"video://{record_id}#frame0")
    retrieved = _retrieval_for(index, caption, record_id, k if index is not None else 0, True)
    return build_instructed_t2v_prompt(caption, retrieved)


def _train_stage2(args, cfg: RunConfig) -> dict:
    """Instruction tuning: continue the stage-1 base model on a weighted
    mixture of subject-driven, prediction, and text-to-video prompts."""
    if args.init is None:
        raise InputDataError("stage 2 requires --init with a stage-1 checkpoint")
    if not Path(args.init).exists():
        raise InputDataError(f"stage 2 requires a stage-1 checkpoint; {args.init} not found")
    model = ToyDenoiser.load(args.init)

    if args.captions is None:
        raise InputDataError("stage 2 requires --captions with id/caption records")
    records = _read_jsonl(args.captions)
    stage2_shape = cfg.video.stage2_shape()
    stage1_shape = cfg.video.stage1_shape()
    if tuple(model.data_shape) != stage1_shape:
        raise InputDataError(
            f"checkpoint shape {tuple(model.data_shape)} != config stage-1 shape {stage1_shape}"
        )
    factor_h = stage2_shape[1] // stage1_shape[1]
    factor_w = stage2_shape[2] // stage1_shape[2]

    index = None
    if args.index is not None:
        if not Path(args.index).exists():
            raise InputDataError(f"index {args.index} not found")
        index = load_index(args.index)
    phrases = []
    if args.dictionary is not None:
        phrases = [
            line.strip()
            for line in Path(args.dictionary).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    extractor = DictionaryExtractor(phrases)
    segmenter = SyntheticCropSegmenter()

    items: list[tuple[str, str, VideoTensor]] = []
    for n, record in enumerate(records, start=1):
        record_id = _record_field(record, "id", args.captions, n)
        caption = _record_field(record, "caption", args.captions, n)
        video = _load_video_for(args.videos, record_id)
        _check_video_shape(video, stage2_shape, record_id)
        down = VideoTensor(block_mean_downsample(video.data, factor_h, factor_w), video.framerate)
        items.append((record_id, caption, down))

    tr = cfg.training
    weights = np.array([tr.subject_weight, tr.predict_weight, tr.t2v_weight], dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InputDataError("task weights must be non-negative with a positive sum")
    weights = weights / weights.sum()
    tasks = ("subject", "predict", "t2v")

    seed_mix, seed_train = _derived_seeds(cfg.seed, 6)[4:6]
    rng = np.random.default_rng(seed_mix)
    dataset: list[tuple[VideoTensor, MultimodalPrompt]] = []
    for record_id, caption, down in items:
        for task in rng.choice(tasks, size=3, p=weights):
            prompt = _stage2_prompt(
                task, record_id, caption, index, cfg.retrieval.k, extractor, segmenter
            )
            dataset.append((down, prompt))

    steps = args.steps if args.steps is not None else tr.stage2_steps
    freeze = None if tr.freeze_steps < 0 else tr.freeze_steps
    encoder = _make_encoder(cfg.encoder)
    losses: list[float] = []
    train_toy(
        model,
        dataset,
        cfg.diffusion,
        encoder,
        TrainingConfig(steps=steps, lr=tr.lr, batch_size=tr.batch_size, freeze_steps=freeze, seed=seed_train),
        on_step=lambda _i, lo: losses.append(lo),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "instructed.ckpt")
    return {
        "command": "train",
        "stage": 2,
        "steps": steps,
        "records": len(records),
        "mixture_size": len(dataset),
        "final_loss": losses[-1],
        "checkpoints": ["instructed.ckpt"],
        "config_hash": config_hash(cfg),
    }


def cmd_train(args) -> None:
    cfg = _resolved_config(args)
    cfg = override(cfg, "training", lr=args.lr, batch_size=args.batch_size)
    if args.stage == 1:
        _emit(_train_stage1(args, cfg))
    else:
        _emit(_train_stage2(args, cfg))


def _sample_prompt(args, cfg: RunConfig) -> MultimodalPrompt:
    if args.prompt_file is not None:
        return MultimodalPrompt.from_dict(json.loads(Path(args.prompt_file).read_text("utf-8")))
    if args.prompt is None:
        raise InputDataError("provide --prompt text or --prompt-file")
    index = None
    if args.index is not None:
        index = load_index(args.index)
    retrieved = _retrieval_for(index, args.prompt, "", cfg.retrieval.k, False)
    if args.task == "t2v":
        return build_instructed_t2v_prompt(args.prompt, retrieved)
    return build_pretraining_prompt(args.prompt, retrieved)


def cmd_sample(args) -> None:
    cfg = _resolved_config(args)
    cfg = override(
        cfg, "sampling", steps1=args.steps1, steps2=args.steps2, cfg_scale=args.cfg_scale
    )
    base = ToyDenoiser.load(args.checkpoint)
    prompt = _sample_prompt(args, cfg)
    encoder = _make_encoder(cfg.encoder)
    upsampler = ToyDenoiser.load(args.upsampler) if args.upsampler is not None else None

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(args.num):
        rng = np.random.default_rng([cfg.seed, i])
        if upsampler is not None:
            cascade = CascadeConfig(
                tuple(base.data_shape),
                tuple(upsampler.data_shape),
                cfg.sampling.steps1,
                cfg.sampling.steps2,
            )
            video = cascade_sample(
                base,
                upsampler,
                prompt,
                encoder,
                cfg.diffusion,
                cascade,
                rng,
                cfg.video.framerate,
                guidance_scale=cfg.sampling.cfg_scale,
                rho=args.schedule_rho,
            )
        else:
            video = sample(
                base,
                prompt,
                encoder,
                cfg.diffusion,
                cfg.sampling.steps1,
                rng,
                cfg.video.framerate,
                guidance_scale=cfg.sampling.cfg_scale,
                rho=args.schedule_rho,
            )
        name = f"sample_{i:03d}{VIDEO_SUFFIX}"
        video.save(out_dir / name)
        files.append(name)
    _emit(
        {
            "command": "sample",
            "num": args.num,
            "files": files,
            "config_hash": config_hash(cfg),
        }
    )


def _load_feature_matrix(directory: str) -> np.ndarray:
    paths = sorted(Path(directory).glob(f"*{VIDEO_SUFFIX}"))
    if not paths:
        raise InputDataError(f"no {VIDEO_SUFFIX} files in {directory}")
    return np.stack([feature_extract(VideoTensor.load(p)) for p in paths])


def cmd_eval(args) -> None:
    cfg = _resolved_config(args)
    gen = _load_feature_matrix(args.generated)
    ref = _load_feature_matrix(args.reference)
    value = frechet_distance(fit_gaussian(gen), fit_gaussian(ref))
    report = {
        "command": "eval",
        "frechet": value,
        "n_generated": int(gen.shape[0]),
        "n_reference": int(ref.shape[0]),
        "feature_dim": int(gen.shape[1]),
        "config_hash": config_hash(cfg),
    }
    if args.out is not None:
        Path(args.out).write_text(
            json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
        )
    _emit(report)


# -- parser ------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--seed", type=int, help="run seed (overrides config and VIMI_SEED)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vimi", description="Grounded video-generation toy pipeline.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("build-index", help="build a BM25 index from a JSONL corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("retrieve", help="query an index")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--exclude-self", metavar="DOC_ID")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("augment", help="attach retrieved pairs to caption records")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="JSONL with id and caption fields")
    p.add_argument("--index")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--exclude-self", action="store_true", help="drop each record's own id")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("curate", help="build subject-driven prompts from captions")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dictionary", required=True, help="entity phrases, one per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="toy training, stage 1 (pretrain) or 2 (instruction tune)")
    _add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--videos", required=True, help="directory of <id>" + VIDEO_SUFFIX + " files")
    p.add_argument("--prompts", help="stage 1: augmented prompt JSONL")
    p.add_argument("--captions", help="stage 2: caption JSONL")
    p.add_argument("--init", help="stage 2: stage-1 base checkpoint")
    p.add_argument("--index", help="stage 2: retrieval index for text-to-video prompts")
    p.add_argument("--dictionary", help="stage 2: entity phrases for subject prompts")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate videos from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="base model checkpoint")
    p.add_argument("--upsampler", help="optional upsampler checkpoint for cascade sampling")
    p.add_argument("--prompt", help="caption text")
    p.add_argument("--prompt-file", help="serialized prompt JSON")
    p.add_argument("--index", help="retrieval augmentation for --prompt")
    p.add_argument("--task", choices=("pretrain", "t2v"), default="pretrain")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--steps1", type=int)
    p.add_argument("--steps2", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--schedule-rho", type=float)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="Frechet distance between two video directories")
    _add_common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", help="also write the metric JSON here")
    p.set_defaults(func=cmd_eval)

    return parser


_INPUT_ERRORS = (
    ArgumentError,
    InputDataError,
    ConfigError,
    CorpusFormatError,
    InvalidKError,
    UnknownDocError,
    DuplicateIdError,
    EmptyCaptionError,
    MissingFrameError,
    PromptTooLongError,
    EncoderShapeError,
    DiffusionShapeError,
    CascadeShapeError,
    DimensionMismatchError,
    TooFewSamplesError,
    ValueError,
)


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CorruptFileError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergedLossError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # anything unforeseen is an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
