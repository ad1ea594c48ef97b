"""Command-line entry point: ``fdgan {synth,train,eval,generate}``.

Every command resolves and validates its configuration before touching the
filesystem. A run directory holds ``config.yaml``, ``checkpoints/``,
``logs/``, ``grids/`` and ``reports/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DIVERGENCE = 4

RUN_ROOT_ENV = "FDGAN_RUN_ROOT"
STAGE_FILES = {1: "stage1.pt", 2: "stage2.pt", 3: "stage3.pt"}

log = logging.getLogger("fdgan")


class MissingDependency(RuntimeError):
    """A required input (prerequisite checkpoint, data directory) is absent."""


# ---------------------------------------------------------------------------
# helpers


def _run_dir(args, cfg):
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{cfg.preset}-{cfg.ablation}-seed{cfg.seed}"


def _resolve_config(args, run_dir_hint=None):
    from .config import load_config

    preset = "full" if args.full else ("desk" if args.desk else None)
    path = args.config
    if path is None and run_dir_hint is not None and (Path(run_dir_hint) / "config.yaml").exists():
        # eval/generate reuse the configuration echoed by train
        path = Path(run_dir_hint) / "config.yaml"
    return load_config(path, preset=preset, seed=args.seed, ablation=args.ablation)


def _load_training_data(cfg):
    from .data import generate_synthetic_dataset, load_market_layout, load_reid_directory

    if cfg.dataset.source == "synth":
        return generate_synthetic_dataset(cfg.synth_spec())
    root = Path(cfg.dataset.path)
    if not root.is_dir():
        raise MissingDependency(f"dataset directory not found: {root}")
    size = (cfg.model.height, cfg.model.width)
    if (root / "bounding_box_train").is_dir():
        return load_market_layout(root, cfg.dataset.landmark_file, size)["train"]
    return load_reid_directory(root, cfg.dataset.landmark_file, size)


def _load_eval_data(cfg, landmarks=True):
    from .data import generate_heldout_split, load_market_layout, load_reid_directory

    if cfg.dataset.source == "synth":
        spec, opts = cfg.heldout_spec()
        query, gallery = generate_heldout_split(spec, **opts)
    else:
        root = Path(cfg.dataset.path)
        if not (root / "query").is_dir() or not (root / "bounding_box_test").is_dir():
            raise MissingDependency(f"{root} needs query/ and bounding_box_test/ for evaluation")
        size = (cfg.model.height, cfg.model.width)
        if landmarks:
            splits = load_market_layout(root, cfg.dataset.landmark_file, size)
            query, gallery = splits["query"], splits["gallery"]
        else:
            # pose files are never opened on this path
            query = load_reid_directory(root / "query", None, size, split="query")
            gallery = load_reid_directory(root / "bounding_box_test", None, size, split="gallery")
    if not landmarks:
        query, gallery = query.without_landmarks(), gallery.without_landmarks()
    return query, gallery


def _latest_checkpoint(run_dir):
    for stage in (3, 2, 1):
        p = run_dir / "checkpoints" / STAGE_FILES[stage]
        if p.exists():
            return p
    return None


def _model_from_checkpoint(payload, cfg=None):
    from .models import ModelConfig
    from .train import init_from_stage1, init_from_stage2

    ck = ModelConfig.from_dict(payload["model_config"])
    if cfg is not None:
        keys = ("preset", "embed_dim", "height", "width", "encoder_channels")
        diff = [k for k in keys if getattr(ck, k) != getattr(cfg.model, k)]
        if diff:
            from .config import ConfigError
            raise ConfigError(f"checkpoint model config differs from run config in {diff}")
    model = init_from_stage1(payload) if payload["stage"] == 1 else init_from_stage2(payload)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .data import generate_heldout_split, generate_synthetic_dataset, write_reid_directory

    cfg = _resolve_config(args)
    overrides = {k: v for k, v in (("n_identities", args.ids), ("images_per_identity", args.per_id),
                                   ("n_cameras", args.cameras)) if v is not None}
    try:
        spec = cfg.synth_spec(**overrides)
    except ValueError as exc:
        from .config import ConfigError
        raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(os.environ.get(RUN_ROOT_ENV, "runs")) / "synth"
    if out.exists() and any(out.iterdir()) and not args.force:
        from .config import ConfigError
        raise ConfigError(f"{out} exists and is not empty (use --force to overwrite)")
    splits = {"train": generate_synthetic_dataset(spec)}
    if args.heldout:
        hspec, opts = cfg.heldout_spec()
        splits["query"], splits["gallery"] = generate_heldout_split(hspec, **opts)
    write_reid_directory(out, splits)
    counts = ", ".join(f"{k}: {len(v)}" for k, v in splits.items())
    print(f"wrote {out} ({counts})")
    return EXIT_OK


def _grid_hook(state, dataset, cfg, run_dir, every):
    import numpy as np
    import torch

    from .data import PairSampler
    from .visualize import save_grid, training_grid

    sampler = PairSampler(dataset, cfg.model.noise_dim, cfg.train.bandwidth_range, False)
    batch = sampler.sample(8, 4, np.random.default_rng(cfg.seed + 4242))
    total = state.schedule.total_epochs

    def hook(st, force=False):
        if not force and st.epoch % every and st.epoch != total:
            return {}
        model = st.model
        was = model.training
        model.eval()
        with torch.no_grad():
            e = model.encode(batch.x1)
            y = model.generate(e, model.encode_pose(batch.target_pose), batch.noise)
        model.train(was)
        idx = batch.target_index
        grid = training_grid(batch, y, dataset.landmarks_xy[idx], dataset.landmarks_visible[idx])
        path = save_grid(grid, run_dir / "grids" / f"stage{st.stage}_epoch{st.epoch:03d}.png")
        return {"grid": str(path)}

    return hook


def cmd_train(args):
    from .checkpoint import load_checkpoint
    from .config import ConfigError
    from .train import TrainLog, run_stage1, run_stage2, run_stage3

    cfg = _resolve_config(args, args.out)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    stages = [s for s in stages if s <= cfg.last_stage]
    if not stages:
        raise ConfigError(f"ablation {cfg.ablation!r} only trains up to stage {cfg.last_stage}")
    run_dir = _run_dir(args, cfg)
    ckpt_dir = run_dir / "checkpoints"
    first = stages[0]
    if first > 1 and not (ckpt_dir / STAGE_FILES[first - 1]).exists():
        raise MissingDependency(
            f"stage {first} needs a stage-{first - 1} checkpoint at {ckpt_dir / STAGE_FILES[first - 1]}; "
            f"run 'train --stage {first - 1}' first")
    dataset = _load_training_data(cfg)
    if len(dataset) == 0:
        raise MissingDependency("training dataset is empty")
    if cfg.model.single_branch_classifier:
        from .models import ModelConfig
        n_ids = len(set(dataset.identities.tolist()))
        cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), "num_identities": n_ids})

    for sub in ("checkpoints", "logs", "grids", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    tcfg = cfg.train
    kw = {"max_iterations": args.max_iterations}
    for stage in stages:
        ckpt = ckpt_dir / STAGE_FILES[stage]
        train_log = TrainLog(run_dir / "logs" / f"stage{stage}.jsonl")
        resume = ckpt if args.resume and ckpt.exists() else None
        try:
            if stage == 1:
                state = run_stage1(dataset, cfg.model, tcfg, cfg.loss, ckpt, train_log, resume=resume, **kw)
            else:
                # grids need a state to size the schedule, so the hook is built on first call
                hook = _LazyGrid(dataset, cfg, run_dir, args.grid_every)
                prev = resume or ckpt_dir / STAGE_FILES[stage - 1]
                payload = load_checkpoint(prev)
                runner = run_stage2 if stage == 2 else run_stage3
                extra = {"model_cfg": cfg.model} if stage == 2 and payload["stage"] == 1 else {}
                state = runner(dataset, payload, tcfg, cfg.loss, ckpt, train_log, on_epoch_end=hook,
                               **extra, **kw)
                hook(state, force=True)
        finally:
            train_log.close()
        running = {k: round(v, 4) for k, v in state.running.items()}
        print(f"stage {stage}: {state.iteration} iterations, checkpoint {ckpt}")
        print(f"  running losses {json.dumps(running, sort_keys=True)}")
    return EXIT_OK


class _LazyGrid:
    def __init__(self, dataset, cfg, run_dir, every):
        self.args = (dataset, cfg, run_dir, every)
        self.hook = None

    def __call__(self, state, force=False):
        if self.hook is None:
            self.hook = _grid_hook(state, *self.args)
        return self.hook(state, force)


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .evaluation import EmbeddingMatrix, Protocol, evaluate, extract_embeddings

    if args.query_embeddings or args.gallery_embeddings:
        if not (args.query_embeddings and args.gallery_embeddings):
            from .config import ConfigError
            raise ConfigError("--query-embeddings and --gallery-embeddings go together")
        q = EmbeddingMatrix.load(args.query_embeddings)
        g = EmbeddingMatrix.load(args.gallery_embeddings)
        protocol = Protocol(junk_same_camera=bool(args.junk_same_camera), max_rank=args.max_rank or 20)
        report = evaluate(q, g, protocol)
        out_dir = Path(args.out) if args.out else Path(args.query_embeddings).parent
        return _emit_report(report, out_dir, "embeddings")

    run_dir = Path(args.out) if args.out else None
    cfg = _resolve_config(args, run_dir)
    run_dir = run_dir or _run_dir(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    if ckpt is None or not ckpt.exists():
        raise MissingDependency(f"no checkpoint found (looked in {run_dir / 'checkpoints'})")
    payload = load_checkpoint(ckpt)
    model = _model_from_checkpoint(payload, cfg)
    query, gallery = _load_eval_data(cfg, landmarks=not args.no_landmarks)
    protocol = Protocol(junk_same_camera=cfg.eval.junk_same_camera if args.junk_same_camera is None
                        else args.junk_same_camera,
                        max_rank=args.max_rank or cfg.eval.max_rank)
    q = extract_embeddings(model, query, batch_size=cfg.eval.batch_size, split="query")
    g = extract_embeddings(model, gallery, batch_size=cfg.eval.batch_size, split="gallery")
    tag = f"stage{payload['stage']}"
    if args.export_embeddings:
        q.save(run_dir / "reports" / f"{tag}_query.emb")
        g.save(run_dir / "reports" / f"{tag}_gallery.emb")
    return _emit_report(evaluate(q, g, protocol), run_dir / "reports", tag, checkpoint=ckpt)


def _emit_report(report, out_dir, tag, checkpoint=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = report.to_dict()
    if checkpoint is not None:
        record["checkpoint"] = str(checkpoint)
    (out_dir / f"eval_{tag}.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    table = report.table()
    (out_dir / f"eval_{tag}.txt").write_text(table + "\n")
    print(table)
    print(f"mAP {100 * report.mAP:.2f}  top-1 {100 * report.top(1):.2f}")
    return EXIT_OK


def cmd_generate(args):
    import numpy as np
    import torch
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .config import ConfigError
    from .pose import render_heatmaps, read_landmark_file, PoseLandmarks
    from .visualize import compose_grid, heatmap_image, save_grid, skeleton_image, to_uint8_hwc

    run_dir = Path(args.out) if args.out else None
    cfg = _resolve_config(args, run_dir)
    run_dir = run_dir or _run_dir(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    if ckpt is None or not ckpt.exists():
        raise MissingDependency(f"no checkpoint found (looked in {run_dir / 'checkpoints'})")
    payload = load_checkpoint(ckpt, stages={2, 3})
    model = _model_from_checkpoint(payload, cfg)
    h, w = cfg.model.height, cfg.model.width

    truth = None
    if args.image:
        image = _read_image(args.image, h, w)
        if not args.landmarks:
            raise ConfigError("--image needs --landmarks with the target pose")
    else:
        ds = _load_training_data(cfg)
        image = ds.images[args.index]
    if args.landmarks:
        try:
            records = read_landmark_file(args.landmarks)
        except (OSError, ValueError) as exc:
            raise ConfigError(
                f"cannot read landmarks: {exc}. Expected one record per line: "
                f"name followed by 18 (x, y, visible) triples, comma or space separated") from exc
        if not records:
            raise ConfigError(f"{args.landmarks} holds no landmark records")
        name = args.target or next(iter(records))
        if name not in records:
            raise ConfigError(f"no landmark record named {name!r} in {args.landmarks}")
        lm_h, lm_w = (args.landmark_size or (h, w))
        lm = PoseLandmarks.from_triples(records[name], lm_h, lm_w).rescaled(h, w)
        xy, vis = lm.xy, lm.visible
        if args.truth:
            truth = _read_image(args.truth, h, w)
    else:
        # synthetic default: target pose and ground truth from another image of the same person
        same = np.flatnonzero(ds.identities == ds.identities[args.index])
        j = int(same[(np.flatnonzero(same == args.index)[0] + 1) % len(same)])
        j = args.target_index if args.target_index is not None else j
        xy, vis = ds.landmarks_xy[j], ds.landmarks_visible[j]
        if ds.identities[j] == ds.identities[args.index]:
            truth = ds.images[j]

    lo, hi = cfg.train.bandwidth_range
    pose_map = render_heatmaps(xy[None], vis[None], np.array([(lo + hi) / 2]), h, w)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    noise = torch.from_numpy(rng.standard_normal((args.n_noise, cfg.model.noise_dim)).astype(np.float32))
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    with torch.no_grad():
        e = model.encode(x).expand(args.n_noise, -1)
        p = model.encode_pose(torch.from_numpy(pose_map)).expand(args.n_noise, -1)
        y = model.generate(e, p, noise)
    blank = np.full((h, w, 3), 255, np.uint8)
    pose_panel = np.maximum(skeleton_image(xy, vis, h, w), heatmap_image(pose_map[0]) // 2)
    panels = [to_uint8_hwc(image), pose_panel, to_uint8_hwc(truth) if truth is not None else blank]
    panels += [to_uint8_hwc(y[i]) for i in range(args.n_noise)]
    out = Path(args.output) if args.output else run_dir / "grids" / "generate.png"
    save_grid(compose_grid([panels]), out)
    print(f"wrote {out} ({len(panels)} panels)")
    return EXIT_OK


def _read_image(path, h, w):
    import numpy as np
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((w, h), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    except OSError as exc:
        raise MissingDependency(f"cannot read image {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help=f"run directory (default: ${RUN_ROOT_ENV} or ./runs)")
    preset = common.add_mutually_exclusive_group()
    preset.add_argument("--desk", action="store_true", help="small desk-scale preset (default)")
    preset.add_argument("--full", action="store_true", help="full-scale preset")
    common.add_argument("--ablation", help="named component-analysis preset (e.g. no_sp, share_e)")
    common.add_argument("-v", "--verbose", action="store_true")

    # global flags live on each subcommand so they are accepted after it
    p = argparse.ArgumentParser(prog="fdgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic dataset to disk")
    s.add_argument("--ids", type=int, help="number of identities")
    s.add_argument("--per-id", type=int, help="images per identity")
    s.add_argument("--cameras", type=int, help="number of cameras")
    s.add_argument("--heldout", action="store_true", help="also write query/ and bounding_box_test/")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="run training stages")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--max-iterations", type=int, help="cap iterations per stage (smoke runs)")
    t.add_argument("--resume", action="store_true", help="continue an interrupted stage checkpoint")
    t.add_argument("--grid-every", type=int, default=5, help="write an image grid every N epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="retrieval evaluation with the encoder only")
    e.add_argument("--checkpoint", help="checkpoint to evaluate (default: latest in the run)")
    e.add_argument("--no-landmarks", action="store_true", help="drop all pose data before evaluating")
    e.add_argument("--junk-same-camera", dest="junk_same_camera", action="store_true", default=None)
    e.add_argument("--keep-same-camera", dest="junk_same_camera", action="store_false")
    e.add_argument("--max-rank", type=int)
    e.add_argument("--export-embeddings", action="store_true")
    e.add_argument("--query-embeddings", help="evaluate exported embedding files instead")
    e.add_argument("--gallery-embeddings")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", parents=[common], help="render generations for a target pose")
    g.add_argument("--checkpoint")
    g.add_argument("--image", help="input image file")
    g.add_argument("--landmarks", help="landmark file holding the target pose")
    g.add_argument("--target", help="record name inside --landmarks (default: first)")
    g.add_argument("--landmark-size", type=int, nargs=2, metavar=("H", "W"),
                   help="frame size the landmark coordinates refer to (default: model size)")
    g.add_argument("--truth", help="ground-truth image in the target pose")
    g.add_argument("--index", type=int, default=0, help="synthetic input sample when --image is absent")
    g.add_argument("--target-index", type=int, help="synthetic sample supplying the target pose")
    g.add_argument("--n-noise", type=int, default=4)
    g.add_argument("--output", help="PNG path (default: <run>/grids/generate.png)")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from .config import ConfigError
        from .checkpoint import CheckpointError
        from .losses import TrainingDivergence
    except ImportError as exc:
        print(f"error: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    if getattr(args, "n_noise", 1) < 1:
        print("error: --n-noise must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingDependency, ImportError) as exc:
        print(f"error: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        where = getattr(exc, "checkpoint", None)
        print(f"error: training diverged: {exc}; last good checkpoint: {where}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
