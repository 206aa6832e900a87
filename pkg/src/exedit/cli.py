"""Command-line entry points.

Subcommands: edit, sweep, ablate, invert, eval, curate, serve. Defaults
match the standard operating point (edit weight 0.65, guidance 10, 1000
inversion steps, 50 generation steps). Flag precedence: explicit flags >
--config JSON > defaults. Exit codes: 0 success, 1 domain error, 2 usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as dataset_mod
from .clipspace import EmbeddingModels
from .errors import ExeditError
from .injection import InjectionConfig
from .inversion import InversionCache
from .metrics import MetricSuite, evaluate
from .pipeline import ABLATION_FLAGS, EditOptions, ExemplarTriplet, build_engine, save_sweep_bundle
from .vlm import HttpVlmBackend, ReplayVlmBackend

logger = logging.getLogger(__name__)

DEFAULTS = {
    "lambda": 0.65,
    "guidance_scale": 10.0,
    "gen_steps": 50,
    "inversion_steps": 1000,
    "seed": 0,
}


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stub", action="store_true", help="use the deterministic stub pipeline")
    p.add_argument("--weights-dir", default=None, help="directory with converted model weights")
    p.add_argument("--cache-dir", default=None, help="inversion cache directory")
    p.add_argument("--vlm-url", default=None, help="remote VLM endpoint (else replay backend)")
    p.add_argument("--model-seed", type=int, default=7, help="seed for the frozen model stack")
    p.add_argument("--config", default=None, help="JSON file of option defaults")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def _add_edit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--x", required=True, help="exemplar original image")
    p.add_argument("--xedit", required=True, help="exemplar edited image")
    p.add_argument("--y", required=True, help="test image to transfer the edit onto")
    p.add_argument("--yedit", default=None, help="optional ground-truth edited test image")
    p.add_argument("--edit-type", default="global_style", choices=dataset_mod.EDIT_TYPES)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="edit weight")
    p.add_argument("--guidance", type=float, default=None, help="classifier-free guidance scale")
    p.add_argument("--gen-steps", type=int, default=None)
    p.add_argument("--inversion-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate-flags", default="", help=f"comma list from {ABLATION_FLAGS}")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--dry-run", action="store_true", help="print the resolved plan, no model calls")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_edit = sub.add_parser("edit", help="transfer one exemplar edit onto a test image")
    _add_edit_flags(p_edit)
    _add_engine_flags(p_edit)

    p_sweep = sub.add_parser("sweep", help="run an edit-weight sweep")
    _add_edit_flags(p_sweep)
    _add_engine_flags(p_sweep)
    p_sweep.add_argument("--lambdas", default="0,0.6,0.7,0.8", help="comma-separated weights")

    p_abl = sub.add_parser("ablate", help="run the four ablation variants")
    _add_edit_flags(p_abl)
    _add_engine_flags(p_abl)

    p_inv = sub.add_parser("invert", help="DDIM-invert an image into the cache")
    p_inv.add_argument("--y", required=True)
    p_inv.add_argument("--steps", type=int, default=DEFAULTS["inversion_steps"])
    p_inv.add_argument("--cache-dir", required=True)
    p_inv.add_argument("--weights-dir", default=None)
    p_inv.add_argument("--model-seed", type=int, default=7)
    p_inv.add_argument("--json", action="store_true")

    p_eval = sub.add_parser("eval", help="score generated results against a manifest")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--results", required=True)
    p_eval.add_argument("--out", default=None, help="directory for report.json/report.csv")
    p_eval.add_argument("--weights-dir", default=None)
    p_eval.add_argument("--model-seed", type=int, default=7)
    p_eval.add_argument("--json", action="store_true")

    p_cur = sub.add_parser("curate", help="dataset curation tooling")
    cur_sub = p_cur.add_subparsers(dest="curate_command", required=True)
    p_pair = cur_sub.add_parser("pair", help="pair records sharing an instruction and export review queue")
    p_pair.add_argument("--records", required=True, help="JSON list of source records")
    p_pair.add_argument("--out-dir", required=True)
    p_pair.add_argument("--json", action="store_true")
    p_ing = cur_sub.add_parser("ingest", help="turn a filled review CSV into a manifest")
    p_ing.add_argument("--csv", required=True)
    p_ing.add_argument("--candidates", default=None)
    p_ing.add_argument("--out", required=True)
    p_ing.add_argument("--json", action="store_true")

    p_srv = sub.add_parser("serve", help="run the HTTP job service")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8000)
    p_srv.add_argument("--queue-cap", type=int, default=16)
    p_srv.add_argument("--work-root", default="jobs")
    p_srv.add_argument("--frontend-dist", default=None)
    p_srv.add_argument("--stub", action="store_true")
    p_srv.add_argument("--weights-dir", default=None)
    p_srv.add_argument("--cache-dir", default=None)

    return parser


def _resolve_options(args) -> EditOptions:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())

    def pick(flag_value, key):
        if flag_value is not None:
            return flag_value
        if key in cfg:
            return cfg[key]
        return DEFAULTS[key]

    flags = frozenset(f for f in (args.ablate_flags or "").split(",") if f)
    return EditOptions(
        lam=float(pick(args.lam, "lambda")),
        guidance_scale=float(pick(args.guidance, "guidance_scale")),
        gen_steps=int(pick(args.gen_steps, "gen_steps")),
        inversion_steps=int(pick(args.inversion_steps, "inversion_steps")),
        seed=int(pick(args.seed, "seed")),
        ablations=flags,
        injection=InjectionConfig.from_dict(cfg.get("injection", {})),
    )


def _load_triplet(args) -> ExemplarTriplet:
    return ExemplarTriplet.from_paths(
        x=args.x, x_edit=args.xedit, y=args.y, y_edit=args.yedit, edit_type=args.edit_type
    )


def _make_engine(args):
    backend = HttpVlmBackend(args.vlm_url) if args.vlm_url else ReplayVlmBackend()
    return build_engine(
        stub=args.stub,
        weights_dir=args.weights_dir,
        cache_dir=args.cache_dir,
        vlm_backend=backend,
        seed=args.model_seed,
    )


def _print_plan(args, opts: EditOptions, lambdas=None) -> None:
    backbone_id = "stub" if args.stub else (
        f"ldm-compact/{Path(args.weights_dir).name}" if args.weights_dir else f"ldm-compact/seed{args.model_seed}"
    )
    cache_hit = False
    if args.cache_dir and not args.stub:
        from . import imaging

        cache = InversionCache(args.cache_dir)
        y = imaging.load_work_image(args.y)
        cache_hit = cache.path_for(cache.key(y, opts.inversion_steps, backbone_id)).exists()
    plan = {
        "stages": ["caption", "embed", "invert", "capture", "generate", "decode"],
        "options": opts.to_dict(),
        "lambdas": lambdas,
        "backbone_id": backbone_id,
        "inversion_cache_hit": cache_hit,
    }
    print(json.dumps(plan, indent=2, sort_keys=True))


def _emit(args, payload: dict, human_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def cmd_edit(args) -> int:
    opts = _resolve_options(args)
    if args.dry_run:
        _print_plan(args, opts)
        return 0
    engine = _make_engine(args)
    result = engine.edit(_load_triplet(args), opts)
    out = result.save_bundle(args.out)
    _emit(
        args,
        {"result_dir": str(out), "caption": result.caption, "timings": result.timings},
        [f"result bundle: {out}", f"caption: {result.caption}", f"total: {result.timings.get('total')}s"],
    )
    return 0


def cmd_sweep(args) -> int:
    opts = _resolve_options(args)
    lambdas = [float(v) for v in args.lambdas.split(",") if v != ""]
    if args.dry_run:
        _print_plan(args, opts, lambdas=lambdas)
        return 0
    engine = _make_engine(args)
    results = engine.lambda_sweep(_load_triplet(args), lambdas, opts)
    out = save_sweep_bundle(results, args.out)
    _emit(
        args,
        {"result_dir": str(out), "lambdas": lambdas, "caption": results[0].caption},
        [f"sweep bundle: {out} ({len(results)} weights)"],
    )
    return 0


def cmd_ablate(args) -> int:
    opts = _resolve_options(args)
    if args.dry_run:
        _print_plan(args, opts)
        return 0
    engine = _make_engine(args)
    results = engine.ablate(_load_triplet(args), opts)
    out_root = Path(args.out)
    for flag, result in results.items():
        result.save_bundle(out_root / flag)
    _emit(
        args,
        {"result_dir": str(out_root), "variants": sorted(results)},
        [f"ablation bundles under: {out_root}"],
    )
    return 0


def cmd_invert(args) -> int:
    from . import imaging
    from .backbone import Conditioning, DiffusionBackbone
    from .edit_embedding import EditEmbedder
    from .inversion import invert_cached

    backbone = DiffusionBackbone.build(weights_dir=args.weights_dir, seed=args.model_seed)
    embedder = EditEmbedder.build(weights_dir=args.weights_dir, seed=args.model_seed)
    null_cond = Conditioning.null(embedder.embed_caption(""))
    cache = InversionCache(args.cache_dir)
    y = imaging.load_work_image(args.y)
    result, hit = invert_cached(backbone, y, null_cond, args.steps, cache)
    path = cache.path_for(cache.key(y, args.steps, backbone.backbone_id))
    _emit(
        args,
        {"cache_path": str(path), "cache_hit": hit, "num_steps": result.num_steps},
        [f"{'cache hit' if hit else 'inverted'}: {path}"],
    )
    return 0


def cmd_eval(args) -> int:
    manifest = dataset_mod.Manifest.load(args.manifest)
    suite = MetricSuite(EmbeddingModels.build(weights_dir=args.weights_dir, seed=args.model_seed))
    report = evaluate(
        manifest,
        args.results,
        suite,
        metadata={"manifest_hash": manifest.content_hash(), "manifest": str(args.manifest)},
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / "report.json")
        report.to_csv(out / "report.csv")
    _emit(args, {"aggregates": report.aggregates}, report.summary_lines())
    return 0


def cmd_curate(args) -> int:
    if args.curate_command == "pair":
        records = dataset_mod.load_source_records(args.records)
        candidates = dataset_mod.pair_by_instruction(records)
        csv_path = dataset_mod.export_review_queue(candidates, args.out_dir)
        _emit(
            args,
            {"candidates": len(candidates), "review_csv": str(csv_path)},
            [f"{len(candidates)} candidates; review sheet: {csv_path}"],
        )
        return 0
    manifest, skipped = dataset_mod.ingest_review(args.csv, args.candidates)
    manifest.save(args.out)
    _emit(
        args,
        {"entries": manifest.total, "skipped": skipped, "counts": manifest.counts},
        [f"manifest with {manifest.total} entries -> {args.out}"]
        + [f"skipped {s['id']}: {s['reason']}" for s in skipped],
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        work_root=args.work_root,
        queue_cap=args.queue_cap,
        stub=args.stub,
        weights_dir=args.weights_dir,
        cache_dir=args.cache_dir,
        frontend_dist=args.frontend_dist,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "edit": cmd_edit,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "invert": cmd_invert,
    "eval": cmd_eval,
    "curate": cmd_curate,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ExeditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
