"""Command-line entry point.

Subcommands: generate, stream, train, bench, eval, retrieve. Exit codes:
0 ok, 2 config error, 3 causality violation, 4 data error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from . import formats, pipeline, train, world
from .config import load_config, save_config
from .encoder import CausalEncoder
from .errors import CausalityError, ConfigError, DataError, S2GSError
from .memory import export_tracks_csv
from .openvocab import Projector, SemanticSpace, retrieve
from .semantic import FeaturePyramid, QueryDecoder
from .world import CLASS_NAMES, DatasetReader, SceneSpec


def _parser():
    p = argparse.ArgumentParser(prog="s2gs", description=__doc__)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--trajectory", choices=["orbit", "sweep"], default="orbit")
    g.add_argument("--occlusion", type=int, default=-1,
                   help="emit the two-object occlusion scenario with K hidden frames")

    s = sub.add_parser("stream", help="run the causal streaming driver")
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--mode", choices=["student", "oracle"], default="oracle")
    s.add_argument("--stamp", choices=["pred", "gt"], default="pred")
    s.add_argument("--render-every", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--decoder", default=None, help="semantic decoder checkpoint dir")
    s.add_argument("--encoder", default=None, help="encoder checkpoint dir")
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one learnable component")
    t.add_argument("target", choices=["semantic", "projector", "encoder"])
    t.add_argument("--data", required=True, help="comma-separated dataset dirs")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--out", required=True, help="checkpoint directory to write")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--decoder", default=None, help="decoder ckpt (projector training)")
    t.add_argument("--no-contrastive", action="store_true")
    t.add_argument("--log", default=None, help="CSV training log path")

    b = sub.add_parser("bench", help="streaming vs offline cost benchmark")
    b.add_argument("--frames", type=int, required=True)
    b.add_argument("--modes", default="streaming,offline")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--timer", choices=["wall", "mac"], default="wall",
                   help="mac = deterministic cost counter (byte-identical artifacts)")
    b.add_argument("--memory-cap", type=int, default=None,
                   help="bytes of retained offline input before OOM-equivalent cutoff")

    e = sub.add_parser("eval", help="score stream outputs against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)

    r = sub.add_parser("retrieve", help="language-conditioned query retrieval")
    r.add_argument("--label", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--data", required=True, help="dataset dir with the frame")
    r.add_argument("--decoder", required=True)
    r.add_argument("--projector", required=True)
    r.add_argument("--vocab", default=None, help="vocabulary TSV (default: built-in)")
    r.add_argument("--out", required=True)
    return p


def _load_decoder(cfg, path, seed=0):
    decoder = QueryDecoder(cfg, seed=seed + 1)
    if path:
        ad.load_into(path, decoder.params())
    return decoder


def _load_encoder(cfg, path, seed=0):
    encoder = CausalEncoder(cfg, seed=seed)
    if path:
        ad.load_into(path, encoder.params())
    return encoder


def cmd_generate(cfg, args):
    if args.occlusion >= 0:
        bundles = world.occlusion_scenario(args.seed, total=args.frames,
                                           occluded_frames=args.occlusion,
                                           image_size=cfg.image_size)
        spec = None
    else:
        spec = SceneSpec(seed=args.seed, trajectory=args.trajectory)
        bundles = world.generate(spec, args.frames, image_size=cfg.image_size)
    world.export_dataset(args.out, bundles, spec)
    print(f"wrote {len(bundles)} frames to {args.out}")
    return 0


def cmd_stream(cfg, args):
    reader = DatasetReader(args.indir)
    models = pipeline.Models(
        encoder=_load_encoder(cfg, args.encoder, seed=args.seed),
        pyramid=FeaturePyramid(cfg.image_size, cfg.feature_dim, seed=cfg.feature_seed),
        decoder=_load_decoder(cfg, args.decoder, seed=args.seed),
    )
    os.makedirs(args.out, exist_ok=True)
    state = pipeline.new_state(cfg, models)
    track_rows = []
    for bundle in reader:
        do_render = args.render_every and (bundle.index % args.render_every == 0)
        state, out = pipeline.stream_step(
            cfg, models, state, bundle, mode=args.mode,
            gt_stamp=(args.stamp == "gt"),
            render_size=cfg.image_size if do_render else 0,
        )
        t = bundle.index
        formats.write_pgm16(os.path.join(args.out, f"sem_{t:04d}.pgm"), out.sem_map)
        formats.write_pgm16(os.path.join(args.out, f"inst_{t:04d}.pgm"), out.inst_map)
        for tid in out.track_ids:
            m = out.inst_map == tid
            if not m.any():
                continue
            ys, xs = np.nonzero(m)
            cls = int(np.bincount(out.sem_map[m]).argmax())
            track_rows.append((t, int(tid), cls, int(m.sum()), float(xs.mean()), float(ys.mean())))
        if out.render is not None:
            formats.write_ppm(os.path.join(args.out, f"render_{t:04d}.ppm"), out.render.color)
            formats.write_depth(os.path.join(args.out, f"render_depth_{t:04d}.s2dp"),
                                out.render.depth_map(cfg.label_alpha_gate))
    export_tracks_csv(os.path.join(args.out, "tracks.csv"), track_rows)
    state.scene.save(os.path.join(args.out, "scene.s2gs"))
    save_config(os.path.join(args.out, "config.txt"), cfg)
    print(f"streamed {reader.total} frames (reads={reader.frame_reads}), "
          f"scene={len(state.scene)} gaussians")
    return 0


def cmd_train(cfg, args):
    dirs = [d for d in args.data.split(",") if d]
    sequences = [list(DatasetReader(d)) for d in dirs]
    log_rows = []
    if args.target == "semantic":
        decoder = train.train_semantic(cfg, sequences, args.steps, seed=args.seed,
                                       use_contrastive=not args.no_contrastive,
                                       log_rows=log_rows)
        ad.save_checkpoint(args.out, decoder.params())
    elif args.target == "projector":
        if not args.decoder:
            raise ConfigError("projector training needs --decoder")
        decoder = _load_decoder(cfg, args.decoder, seed=args.seed)
        space = SemanticSpace(list(CLASS_NAMES), dim=cfg.semantic_dim,
                              seed=cfg.vocab_seed, noise=cfg.teacher_noise)
        projector = train.train_projector(cfg, decoder, space, sequences, args.steps,
                                          seed=args.seed)
        ad.save_checkpoint(args.out, projector.params())
        space.save_vocabulary(os.path.join(args.out, "vocabulary.tsv"))
    else:
        encoder = train.train_encoder(cfg, sequences, args.steps, seed=args.seed,
                                      log_rows=log_rows)
        ad.save_checkpoint(args.out, encoder.params())
    if args.log and log_rows:
        with open(args.log, "w", encoding="ascii") as fh:
            if args.target == "semantic":
                fh.write("step,loss_mask,loss_cls,loss_cl\n")
                for row in log_rows:
                    fh.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.6f}\n")
            else:
                fh.write("step,loss\n")
                for row in log_rows:
                    fh.write(f"{row[0]},{row[1]:.6f}\n")
    print(f"trained {args.target} for {args.steps} steps -> {args.out}")
    return 0


def cmd_bench(cfg, args):
    spec = SceneSpec(seed=args.seed, n_objects=3)
    bundles = world.generate(spec, args.frames, image_size=cfg.image_size)
    models = pipeline.Models.fresh(cfg, seed=args.seed)
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    results = pipeline.run_benchmark(cfg, models, bundles, modes=modes,
                                     repeats=args.repeats, timer=args.timer,
                                     memory_cap=args.memory_cap)
    os.makedirs(args.out, exist_ok=True)
    for res in results:
        pipeline.write_bench_csv(os.path.join(args.out, f"bench_{res.mode}.csv"),
                                 res, args.timer)
    pipeline.write_bench_svg(os.path.join(args.out, "bench.svg"), results, args.timer)
    print(f"benchmarked modes {modes} over {args.frames} frames -> {args.out}")
    return 0


def cmd_eval(cfg, args):
    gt = DatasetReader(args.gt)
    bundles = list(gt)
    pred_inst, pred_sem = [], []
    for b in bundles:
        pred_sem.append(formats.read_pgm16(os.path.join(args.pred, f"sem_{b.index:04d}.pgm")))
        pred_inst.append(formats.read_pgm16(os.path.join(args.pred, f"inst_{b.index:04d}.pgm")))
    miou2d, _ = pipeline.class_iou_report(pred_sem, [b.semantics for b in bundles],
                                          cfg.num_classes)
    tracking = pipeline.evaluate_tracking(pred_inst, [b.instances for b in bundles])
    rows = [("frame_miou", miou2d), ("t_miou", tracking["t_miou"]),
            ("t_sr", tracking["t_sr"]), ("id_switches", tracking["id_switches"])]
    scene_path = os.path.join(args.pred, "scene.s2gs")
    if os.path.exists(scene_path):
        from .gaussians import GaussianScene

        scene = GaussianScene.load(scene_path)
        views = pipeline.evaluate_scene_views(cfg, scene, bundles)
        source = pipeline.evaluate_source_consistency(cfg, scene, bundles)
        rows += [("scene_psnr", views["psnr"]), ("scene_miou", views["miou"]),
                 ("source_psnr", source["psnr"]), ("source_miou", source["miou"])]
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write("metric,value\n")
        for name, value in rows:
            fh.write(f"{name},{value:.4f}\n")
    print("\n".join(f"{name}: {value:.2f}" for name, value in rows))
    return 0


def cmd_retrieve(cfg, args):
    reader = DatasetReader(args.data)
    bundle = reader.read_frame(args.frame)
    decoder = _load_decoder(cfg, args.decoder)
    projector = Projector(cfg.identity_dim, cfg.semantic_dim)
    ad.load_into(args.projector, projector.params())
    if args.vocab:
        space = SemanticSpace.load_vocabulary(args.vocab)
    else:
        space = SemanticSpace(list(CLASS_NAMES), dim=cfg.semantic_dim, seed=cfg.vocab_seed)
    pyramid = FeaturePyramid(cfg.image_size, cfg.feature_dim, seed=cfg.feature_seed)
    with ad.no_grad():
        qs = decoder.decode(pyramid.extract(bundle.rgb))
    projected = projector.project_np(qs.embeds_np())
    n_star, mask, scores = retrieve(space.embed_label(args.label), projected, qs.masks_np())
    formats.write_pgm16(args.out, (mask > 0.5).astype(np.uint16))
    scores_path = os.path.splitext(args.out)[0] + "_scores.csv"
    with open(scores_path, "w", encoding="ascii") as fh:
        fh.write("query,score\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},{s:.6f}\n")
    print(f"label {args.label!r} -> query {n_star} (score {scores[n_star]:.4f})")
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        overrides = []
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.append(tuple(item.split("=", 1)))
        cfg = load_config(args.config, overrides)
        handler = {
            "generate": cmd_generate,
            "stream": cmd_stream,
            "train": cmd_train,
            "bench": cmd_bench,
            "eval": cmd_eval,
            "retrieve": cmd_retrieve,
        }[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CausalityError as exc:
        print(f"causality violation: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except S2GSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
