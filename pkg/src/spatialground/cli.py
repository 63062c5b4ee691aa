"""Command-line entry point.

Subcommands wire the library into the end-to-end workflows: synthesize
scenes, auto-label datasets, lift detections, train/evaluate the relation
classifier, ground expressions (locally or against a running server), and
evaluate grounding results.

Every command is a pure function of (inputs, seed): outputs go to new paths
(refused without --force when they exist), progress goes to stderr, results
to stdout or files.  Exit codes: 0 success, 1 usage/validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

from . import __version__
from .autolabel import RelationRuleConfig, build_dataset, lift_scene
from .classifier import (
    TrainConfig,
    load_model,
    save_model,
    train,
)
from .dataio import (
    MULTICLASS,
    MULTILABEL,
    RelationVocabulary,
    VOCAB_DIRECTIONAL,
    canonical_relation,
    dumps_canonical,
    Expression,
    load_index,
    load_manifest,
)
from .errors import ParseError, PipelineError, ValidationError
from .features import EmbeddingTable, needs_language
from .geometry import DenoiseConfig, dump_cloud
from .metrics import (
    eval_classification,
    eval_grounding,
    report_classification,
    report_grounding,
)
from .pipeline import (
    GroundedExpression,
    build_feature_dataset,
    ground_dataset,
    ground_scene,
    grounding_ground_truths,
)
from .ranking import RankingConfig
from .synthgen import SceneSpec, generate_benchmark

logger = logging.getLogger("spatialground")

FEATURE_FLAGS = {
    "geom2d": "GEOM2D",
    "geom2d+lng": "GEOM2D_LNG",
    "geom3d": "GEOM3D",
    "geom3d+lng": "GEOM3D_LNG",
}


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _refuse_existing(path: str, force: bool, is_dir: bool = False) -> None:
    exists = os.path.isdir(path) and os.listdir(path) if is_dir else os.path.exists(path)
    if exists and not force:
        raise ValidationError(f"output {path} already exists; pass --force to overwrite")


def _ranking_config(args) -> RankingConfig:
    return RankingConfig(k=args.k, detector_profile=args.detector_profile)


def _load_table(args) -> EmbeddingTable | None:
    return EmbeddingTable.load(args.embeddings) if getattr(args, "embeddings", None) else None


def _scene_paths(data: str) -> list[str]:
    """Accept a dataset index file or a directory of scene manifests."""
    if os.path.isdir(data):
        paths = sorted(
            p for p in glob.glob(os.path.join(data, "*.json")) if os.path.basename(p) != "index.json"
        )
        if not paths:
            raise ValidationError(f"no scene manifests found in {data}")
        return paths
    index = load_index(data)
    return index.scene_paths(data)


def _write_records(records: list[dict], out: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_synthetic(args) -> int:
    _refuse_existing(args.out, args.force, is_dir=True)
    vocab = RelationVocabulary(
        VOCAB_DIRECTIONAL.names, MULTICLASS if args.mode == "multiclass" else MULTILABEL
    )
    spec = SceneSpec(
        n_objects_min=args.min_objects,
        n_objects_max=args.max_objects,
        vocabulary=vocab,
        detector_noise=args.detector_noise,
    )
    indices = generate_benchmark(args.scenes, args.seed, args.out, spec)
    for name, index in indices.items():
        logger.info("split %s: %d scenes, %d expressions", name, len(index.scenes), sum(index.relation_counts.values()))
    print(dumps_canonical({name: {"scenes": len(ix.scenes), "relations": ix.relation_counts} for name, ix in indices.items()}), end="")
    return 0


def cmd_autolabel(args) -> int:
    _refuse_existing(args.out, args.force, is_dir=True)
    stats = build_dataset(
        _scene_paths(args.scenes),
        args.out,
        RelationRuleConfig(margin_fraction=args.margin_fraction),
        DenoiseConfig(),
        threads=args.threads,
    )
    print(
        dumps_canonical(
            {
                "scenes_total": stats.scenes_total,
                "scenes_labeled": stats.scenes_labeled,
                "expressions": stats.expressions,
                "relation_counts": stats.relation_counts,
            }
        ),
        end="",
    )
    return 0


def cmd_lift(args) -> int:
    manifest = load_manifest(args.scene)
    lifted = lift_scene(manifest, args.scene)
    records = []
    for i, ld in enumerate(lifted):
        box = ld.box
        records.append(
            {
                "label": ld.detection.label,
                "score": ld.detection.score,
                "bbox": ld.detection.bbox.as_list(),
                "t": [float(v) for v in box.T],
                "r": [float(v) for v in box.R.reshape(-1)],
                "d": [float(v) for v in box.D],
                "degenerate": box.degenerate,
            }
        )
        if args.dump_clouds:
            os.makedirs(args.dump_clouds, exist_ok=True)
            from .dataio import depth_path_for, load_depth
            from .geometry import backproject

            depth = load_depth(
                depth_path_for(manifest, args.scene),
                manifest.intrinsics.width,
                manifest.intrinsics.height,
            )
            region = ld.detection.mask if ld.detection.mask is not None else ld.detection.bbox
            cloud = backproject(depth, region, manifest.intrinsics)
            dump_cloud(cloud, os.path.join(args.dump_clouds, f"{manifest.scene_id}_{i:03d}.xyz"))
    _write_records(records, args.out)
    return 0


def cmd_train_srm(args) -> int:
    _refuse_existing(args.out, args.force)
    schema = FEATURE_FLAGS[args.features]
    table = _load_table(args)
    if needs_language(schema) and table is None:
        raise ValidationError(f"--features {args.features} requires --embeddings")
    data = build_feature_dataset(
        args.data, schema, table, args.embeddings, threads=args.threads
    )
    val = None
    if args.val:
        val = build_feature_dataset(args.val, schema, table, args.embeddings, threads=args.threads)
    hidden = tuple(int(h) for h in args.hidden.split(","))
    if len(hidden) != 2:
        raise ValidationError("--hidden expects two comma-separated sizes")
    cfg = TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        hidden_dims=hidden,
        seed=args.seed,
    )
    params, log = train(cfg, data, val)
    for s in log:
        logger.info(
            "epoch %2d lr %.6f loss %.4f acc %.2f%%%s",
            s.epoch,
            s.lr,
            s.train_loss,
            100 * s.train_accuracy,
            "" if s.val_accuracy is None else f" val {100 * s.val_accuracy:.2f}%",
        )
    save_model(params, args.out)
    print(
        dumps_canonical(
            {
                "model": args.out,
                "schema": schema,
                "samples": len(data),
                "final_loss": log[-1].train_loss,
                "final_train_accuracy": 100 * log[-1].train_accuracy,
            }
        ),
        end="",
    )
    return 0


def cmd_eval_srm(args) -> int:
    params = load_model(args.model)
    table = _load_table(args)
    if needs_language(params.schema_id) and table is None:
        raise ValidationError(f"model schema {params.schema_id} requires --embeddings")
    data = build_feature_dataset(args.data, params.schema_id, table, args.embeddings, threads=args.threads)
    from .classifier import forward_batch

    topk = tuple(int(k) for k in args.topk.split(","))
    m = eval_classification(forward_batch(params, data.features), data.labels, data.vocabulary, topk=topk)
    report = report_classification(m, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report)
    else:
        sys.stdout.write(report)
    return 0


def _ground_via_server(args, expressions: list[tuple[str, Expression]]) -> list[dict]:
    import httpx

    records = []
    with httpx.Client(base_url=args.server, timeout=120.0) as client:
        for manifest_path, expr in expressions:
            resp = client.post(
                "/ground",
                json={
                    "manifest_path": os.path.abspath(manifest_path),
                    "target": expr.target_label,
                    "relation": expr.relation,
                    "reference": expr.reference_label,
                    "k": args.k,
                    "detector_profile": args.detector_profile,
                    "explain": args.explain,
                },
            )
            resp.raise_for_status()
            rec = resp.json()
            if rec.get("per_pair_table") is None:
                rec.pop("per_pair_table", None)
            records.append(rec)
    return records


def cmd_ground(args) -> int:
    if args.out:
        _refuse_existing(args.out, args.force)
    if not args.scene and not args.data:
        raise ValidationError("ground needs --scene or --data")

    expr = None
    if args.expr:
        parts = [p.strip() for p in args.expr.split(",")]
        if len(parts) != 3:
            raise ValidationError('--expr expects "target,relation,reference"')
        expr = Expression(parts[0], canonical_relation(parts[1]), parts[2])

    if args.server:
        if args.data:
            index = load_index(args.data)
            pairs = []
            for path in index.scene_paths(args.data):
                m = load_manifest(path)
                pairs.extend((path, e) for e in m.expressions)
        else:
            m = load_manifest(args.scene)
            pairs = [(args.scene, expr)] if expr else [(args.scene, e) for e in m.expressions]
        _write_records(_ground_via_server(args, pairs), args.out)
        return 0

    model = None if args.detector_only else load_model(args.model) if args.model else None
    if model is None and not args.detector_only:
        raise ValidationError("ground needs --model (or --detector-only)")
    table = _load_table(args)
    if model is not None and needs_language(model.schema_id) and table is None:
        raise ValidationError(f"model schema {model.schema_id} requires --embeddings")
    cfg = _ranking_config(args)

    results: list[GroundedExpression]
    if args.data:
        results = ground_dataset(
            args.data,
            model,
            cfg,
            table=table,
            table_path=args.embeddings,
            explain=args.explain,
            detector_only=args.detector_only,
            threads=args.threads,
        )
    else:
        manifest = load_manifest(args.scene)
        if expr is not None:
            manifest.expressions = [expr]
        results = ground_scene(
            manifest,
            args.scene,
            model,
            cfg,
            table=table,
            explain=args.explain,
            detector_only=args.detector_only,
        )
    _write_records([g.record(args.explain) for g in results], args.out)
    return 0


def cmd_eval_grounding(args) -> int:
    with open(args.results, "r", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    if not records:
        raise ValidationError(f"{args.results}: no records")

    # ground truth looked up per (scene_id, triplet) in the dataset
    gt_map: dict[tuple, tuple] = {}
    index = load_index(args.data)
    for path in index.scene_paths(args.data):
        m = load_manifest(path)
        for e in m.expressions:
            gt_map[(m.scene_id, *e.triplet())] = e.gt_target_boxes()

    from .dataio import BBox2D

    preds, gts = [], []
    for rec in records:
        e = rec["expression"]
        key = (rec["scene_id"], e["target"], e["relation"], e["reference"])
        if key not in gt_map:
            raise ValidationError(f"no ground truth for record {key}")
        boxes = gt_map[key]
        if not boxes:
            raise ValidationError(f"expression {key} carries no ground-truth box")
        gts.append(boxes)
        preds.append(BBox2D(*rec["target_bbox"]) if rec.get("target_bbox") else None)
    m = eval_grounding(preds, gts, iou_threshold=args.iou_threshold)
    report = report_grounding(m, args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report)
    else:
        sys.stdout.write(report)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.model, args.embeddings)
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level.lower())
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="RNG seed (bit-for-bit reproducible)")
    p.add_argument("--threads", type=int, default=1, help="scene-level parallelism (default 1)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--config", default=None, help="JSON file with default flag values")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _add_ranking_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=3, help="candidates per role")
    p.add_argument(
        "--detector-profile",
        default="detic",
        choices=["detic", "gdino"],
        help="score-threshold defaults per detector family",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spatialground", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic RGB-D benchmark")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="multilabel", choices=["multilabel", "multiclass"])
    p.add_argument("--min-objects", type=int, default=4)
    p.add_argument("--max-objects", type=int, default=10)
    p.add_argument("--detector-noise", type=float, default=0.02)
    _add_common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("autolabel", help="derive spatial expressions from scene geometry")
    p.add_argument("--scenes", required=True, help="dataset index or directory of manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--margin-fraction", type=float, default=0.5)
    _add_common(p)
    p.set_defaults(func=cmd_autolabel)

    p = sub.add_parser("lift", help="lift a scene's detections to 3D boxes")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default=None, help="output records file (default stdout)")
    p.add_argument("--dump-clouds", default=None, help="directory for ASCII x y z cloud dumps")
    _add_common(p)
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("train-srm", help="train the relation classifier")
    p.add_argument("--data", required=True, help="dataset index")
    p.add_argument("--val", default=None, help="validation dataset index")
    p.add_argument("--features", required=True, choices=sorted(FEATURE_FLAGS))
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--embeddings", default=None, help="word embedding table (for +lng)")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--hidden", default="64,32")
    _add_common(p)
    p.set_defaults(func=cmd_train_srm)

    p = sub.add_parser("eval-srm", help="evaluate a relation classifier on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--topk", default="1,2")
    p.add_argument("--format", default="text", choices=["text", "json"])
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_srm)

    p = sub.add_parser("ground", help="ground expressions in scenes")
    p.add_argument("--scene", default=None, help="one scene manifest")
    p.add_argument("--data", default=None, help="dataset index (batch mode)")
    p.add_argument("--expr", default=None, help='"target,relation,reference" (with --scene)')
    p.add_argument("--model", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--explain", action="store_true", help="include the per-pair score table")
    p.add_argument("--detector-only", action="store_true", help="rank by detector score alone")
    p.add_argument("--server", default=None, help="URL of a running service (thin-client mode)")
    p.add_argument("--out", default=None, help="records file (default stdout)")
    _add_ranking_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("eval-grounding", help="score grounding records against a dataset")
    p.add_argument("--results", required=True, help="records file from `ground`")
    p.add_argument("--data", required=True, help="dataset index with ground truth")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--format", default="text", choices=["text", "json"])
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_grounding)

    p = sub.add_parser("serve", help="run the HTTP grounding service")
    p.add_argument("--model", default=None)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8400)
    _add_common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Layered config: file values become defaults, explicit flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            overrides = json.load(f)
    except OSError as e:
        raise ValidationError(f"cannot read config {args.config}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed config {args.config}: {e}") from e
    if not isinstance(overrides, dict):
        raise ValidationError(f"config {args.config}: expected an object of flag values")
    unknown = [k for k in overrides if not hasattr(args, k.replace("-", "_"))]
    if unknown:
        raise ValidationError(f"config {args.config}: unknown keys {unknown}")
    parser.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        try:
            args = _apply_config_file(parser, argv)
        except SystemExit as e:  # argparse --help/--version/usage errors
            return int(e.code or 0)
        logging.basicConfig(
            level=getattr(logging, args.log_level),
            stream=sys.stderr,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except (ValidationError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PipelineError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
