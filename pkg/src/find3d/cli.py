"""Command-line entry points and the HTTP service backing the viewer.

Numeric defaults marked "full-scale recipe" mirror the production training
setup (voxel 0.02, block 1024, batch 64, 80 epochs, lr 3e-4 -> 5e-5); the
model defaults in ModelConfig are toy-scale so everything runs on a laptop.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import bench, engine, net, query, train
from .cloud import normalize, voxel_sample
from .plyio import read_ply, write_ply

ASSIGNMENT_PALETTE = np.array(
    [
        (0.894, 0.102, 0.110),
        (0.216, 0.494, 0.722),
        (0.302, 0.686, 0.290),
        (0.596, 0.306, 0.639),
        (1.000, 0.498, 0.000),
        (0.969, 0.506, 0.749),
        (0.651, 0.337, 0.157),
        (0.400, 0.761, 0.647),
        (0.988, 0.553, 0.384),
        (0.553, 0.627, 0.796),
        (0.906, 0.541, 0.765),
        (0.651, 0.847, 0.329),
        (1.000, 0.851, 0.184),
        (0.898, 0.769, 0.580),
        (0.702, 0.702, 0.702),
        (0.122, 0.471, 0.706),
    ]
)
NO_LABEL_COLOR = np.array((0.5, 0.5, 0.5))


def assignment_colors(assignment: np.ndarray) -> np.ndarray:
    colors = np.tile(NO_LABEL_COLOR, (len(assignment), 1))
    labeled = assignment >= 0
    colors[labeled] = ASSIGNMENT_PALETTE[assignment[labeled] % len(ASSIGNMENT_PALETTE)]
    return colors


def _build_embedder(args, out_dim: int):
    return query.make_embedder(
        args.embedder, dim=out_dim, cache_path=getattr(args, "embedder_cache", None), seed=0
    )


def cmd_synth(args) -> int:
    objects = bench.synth_dataset(
        seed=args.seed,
        n_objects=args.objects,
        parts_range=(args.min_parts, args.max_parts),
        pose=args.pose,
        total_points=args.points,
    )
    manifest = bench.save_dataset(args.out, objects, name=args.name)
    print(f"wrote {len(objects)} objects to {manifest}")
    return 0


def cmd_annotate(args) -> int:
    objects = bench.load_dataset(args.manifest)
    embedder = _build_embedder(args, args.dim)
    results = []
    for obj in objects:
        norm_cloud, _ = normalize(obj.cloud)
        sample = voxel_sample(norm_cloud, args.voxel_size)
        kept_cloud = norm_cloud.subset(sample.kept)
        if args.provider == "oracle":
            provider = engine.OracleAnnotationProvider(kept_cloud, obj.part_names, seed=args.seed)
        else:
            provider = engine.RemoteAnnotationProvider()
        result = engine.build_labels(
            kept_cloud,
            provider,
            embedder,
            object_id=obj.object_id,
            n_views=args.views,
            min_labels=args.min_labels,
        )
        flag = " [insufficient labels]" if result.insufficient_labels else ""
        print(f"{obj.object_id}: {len(result.records)} labels{flag}")
        results.append(result)
    sidecar = os.path.splitext(args.out)[0] + ".fnde"
    engine.write_annotations(args.out, sidecar, results)
    print(f"wrote {args.out} and {sidecar}")
    return 0


def load_train_config(path):
    with open(path, "r", encoding="utf-8") as f:
        cfg = json.load(f)
    model_config = net.ModelConfig.from_dict(cfg["model"]) if "model" in cfg else net.ModelConfig()
    train_config = train.TrainConfig.from_dict(cfg.get("train", {}))
    return cfg, model_config, train_config


def cmd_train(args) -> int:
    cfg, model_config, train_config = load_train_config(args.config)
    annotations_path = args.annotations or cfg.get("annotations")
    manifest_path = args.manifest or cfg.get("manifest")
    if not annotations_path or not manifest_path:
        raise SystemExit("train config must provide 'manifest' and 'annotations' paths")
    objects = bench.load_dataset(manifest_path)
    by_id = engine.read_annotations(annotations_path)
    dataset = []
    for obj in objects:
        labels = by_id.get(obj.object_id, [])
        dataset.append((obj.cloud, labels))
    state = net.init_model(model_config, seed=cfg.get("init_seed", 0))
    result = train.fit(dataset, train_config, state)
    net.save_checkpoint(args.out, result.state)
    best_path = os.path.splitext(args.out)[0] + ".best.ckpt"
    net.save_checkpoint(best_path, result.best_state)
    csv_path = os.path.splitext(args.out)[0] + ".history.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(train.history_to_csv(result.history))
    last = result.history[-1] if result.history else {}
    print(
        f"trained {train_config.epochs} epochs on {len(result.train_ids)} objects "
        f"(val {len(result.val_ids)}); final train_loss={last.get('train_loss')}"
    )
    print(f"wrote {args.out}, {best_path}, {csv_path}")
    return 0


def cmd_segment(args) -> int:
    state = net.load_checkpoint(args.checkpoint)
    cloud = read_ply(args.cloud)
    embedder = _build_embedder(args, state.config.out_dim)
    result = query.segment(cloud, state, args.query, embedder)
    payload = query.result_to_json(result)
    json_path = args.out + ".json"
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(payload)
    colored = cloud.copy()
    colored.colors = assignment_colors(result.assignment)
    ply_path = args.out + ".ply"
    write_ply(ply_path, colored)
    counts = {q: int((result.assignment == i).sum()) for i, q in enumerate(result.queries)}
    counts["<no label>"] = int((result.assignment == query.NO_LABEL).sum())
    print(json.dumps(counts, indent=2))
    print(f"wrote {json_path} and {ply_path}")
    return 0


def cmd_eval(args) -> int:
    objects = bench.load_dataset(args.manifest)
    state = net.load_checkpoint(args.checkpoint) if args.predictor == "model" else None
    out_dim = state.config.out_dim if state is not None else args.dim
    embedder = _build_embedder(args, out_dim)
    if args.predictor == "model":
        predictor = bench.ModelPredictor(state)
    else:
        predictor = bench.OraclePredictor(embedder)
    report = bench.evaluate(
        predictor,
        objects,
        embedder,
        template=args.template,
        rotation_mode=args.rotation,
        seed=args.seed,
    )
    with open(args.out + ".json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(args.out + ".csv", "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    print(f"class mIoU: {report.overall:.4f} ({args.rotation}, template {args.template!r})")
    for cat, miou in report.per_category.items():
        print(f"  {cat}: {miou:.4f}")
    print(f"wrote {args.out}.json and {args.out}.csv")
    return 0


def cmd_describe(args) -> int:
    if args.checkpoint:
        state = net.load_checkpoint(args.checkpoint)
        config = state.config
    else:
        config = net.ModelConfig()
    print(json.dumps(net.describe(config), indent=2))
    return 0


# ---------------------------------------------------------------------------
# HTTP service


class ServiceState:
    """Immutable after construction: model, objects, cached features."""

    def __init__(self, state: net.ModelState, objects: list[bench.BenchmarkObject], embedder):
        self.model = state
        self.objects = {obj.object_id: obj for obj in objects}
        self.order = [obj.object_id for obj in objects]
        self.embedder = embedder
        self.features = {
            obj.object_id: query.segment_features(obj.cloud, state) for obj in objects
        }


def _make_handler(service: ServiceState):
    class Handler(BaseHTTPRequestHandler):
        def _send(self, code: int, payload: str, content_type="application/json"):
            body = payload.encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.end_headers()
            self.wfile.write(body)

        def _error(self, code: int, detail: str):
            self._send(code, json.dumps({"error": True, "detail": detail}))

        def log_message(self, fmt, *fmt_args):  # quiet server
            pass

        def do_OPTIONS(self):
            self._send(200, "{}")

        def do_GET(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if parts == ["objects"]:
                listing = [
                    {
                        "id": oid,
                        "category": service.objects[oid].category,
                        "n_points": len(service.objects[oid].cloud),
                    }
                    for oid in service.order
                ]
                return self._send(200, json.dumps(listing))
            if len(parts) == 3 and parts[0] == "objects" and parts[2] == "points":
                obj = service.objects.get(parts[1])
                if obj is None:
                    return self._error(404, f"unknown object {parts[1]!r}")
                payload = {
                    "positions": [[float(v) for v in row] for row in obj.cloud.positions],
                    "colors": [[float(v) for v in row] for row in obj.cloud.colors],
                }
                return self._send(200, json.dumps(payload))
            return self._error(404, f"no route for {self.path}")

        def do_POST(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if len(parts) == 3 and parts[0] == "objects" and parts[2] == "query":
                obj = service.objects.get(parts[1])
                if obj is None:
                    return self._error(404, f"unknown object {parts[1]!r}")
                try:
                    length = int(self.headers.get("Content-Length", 0))
                    body = json.loads(self.rfile.read(length).decode("utf-8"))
                    queries = body.get("queries")
                    if not isinstance(queries, list) or not queries or not all(
                        isinstance(q, str) and q.strip() for q in queries
                    ):
                        return self._error(400, "queries must be a non-empty list of strings")
                except (ValueError, json.JSONDecodeError) as exc:
                    return self._error(400, f"bad request body: {exc}")
                try:
                    feats = service.features[obj.object_id]
                    scores = query.score(feats, service.embedder.embed_many(queries))
                    result = query.QueryResult(queries, scores, query.assign(scores))
                    return self._send(200, query.result_to_json(result))
                except Exception as exc:  # surface as a 500 with detail
                    return self._error(500, str(exc))
            return self._error(404, f"no route for {self.path}")

    return Handler


def make_server(checkpoint, manifest, embedder_kind="mock", port=0, host="127.0.0.1"):
    state = net.load_checkpoint(checkpoint)
    objects = bench.load_dataset(manifest)
    embedder = query.make_embedder(embedder_kind, dim=state.config.out_dim)
    service = ServiceState(state, objects, embedder)
    server = ThreadingHTTPServer((host, port), _make_handler(service))
    return server, service


def cmd_serve(args) -> int:
    server, service = make_server(args.checkpoint, args.manifest, args.embedder, args.port, args.host)
    print(f"serving {len(service.order)} objects on http://{args.host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="find3d",
        description="Open-vocabulary 3D part segmentation toolkit (desk scale)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pose", choices=("random", "canonical"), default="random")
    p.add_argument("--points", type=int, default=1400, help="raw points per object")
    p.add_argument("--min-parts", type=int, default=2)
    p.add_argument("--max-parts", type=int, default=5)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", help="run the data engine over a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--provider", choices=("oracle", "remote"), default="oracle")
    p.add_argument("--embedder", choices=("mock", "cache", "remote"), default="mock")
    p.add_argument("--embedder-cache", default=None)
    p.add_argument("--dim", type=int, default=32, help="embedding dim (toy default 32)")
    p.add_argument("--views", type=int, default=10, help="renders per object")
    p.add_argument("--voxel-size", type=float, default=0.02, help="full-scale recipe value")
    p.add_argument("--min-labels", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train from annotations (config JSON drives it)")
    p.add_argument("--config", required=True)
    p.add_argument("--annotations", default=None, help="overrides config value")
    p.add_argument("--manifest", default=None, help="overrides config value")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one PLY cloud by text queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--query", action="append", required=True)
    p.add_argument("--embedder", choices=("mock", "cache", "remote"), default="mock")
    p.add_argument("--embedder-cache", default=None)
    p.add_argument("--out", default="segmented")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="class-average mIoU over a benchmark manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--template", default="{part} of a {object}")
    p.add_argument("--rotation", choices=("canonical", "rotated"), default="canonical")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--predictor", choices=("model", "oracle"), default="model")
    p.add_argument("--embedder", choices=("mock", "cache", "remote"), default="mock")
    p.add_argument("--embedder-cache", default=None)
    p.add_argument("--dim", type=int, default=32, help="embedding dim for --predictor oracle")
    p.add_argument("--out", default="eval_report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("describe", help="report architecture parameter counts")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("serve", help="HTTP service for the interactive viewer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embedder", choices=("mock", "cache", "remote"), default="mock")
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError, IndexError, SystemExit) as exc:
        if isinstance(exc, SystemExit):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
